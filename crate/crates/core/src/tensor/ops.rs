//! Structured ops: convolutions, embedding lookup, masked attention.

use crate::error::{HydraError, Result};
use crate::tensor::Tensor;

/// Valid (no padding) 2-D convolution.
///
/// input (B, C, T, F), weight (C', C, Kt, Kf), bias (C'), strides >= 1.
/// Output extents follow T' = floor((T - Kt)/stride_t) + 1 and the same on
/// the frequency axis.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride_t: usize,
    stride_f: usize,
) -> Result<Tensor> {
    let ish = input.shape();
    let wsh = weight.shape();
    if ish.len() != 4 || wsh.len() != 4 {
        return Err(HydraError::Dimension(format!(
            "conv2d: input {:?} weight {:?}",
            ish, wsh
        )));
    }
    let (b, c, t, f) = (ish[0], ish[1], ish[2], ish[3]);
    let (co, ci, kt, kf) = (wsh[0], wsh[1], wsh[2], wsh[3]);
    if ci != c {
        return Err(HydraError::Dimension(format!(
            "conv2d: weight expects {ci} channels, input has {c}"
        )));
    }
    if bias.shape() != [co] {
        return Err(HydraError::Dimension(format!(
            "conv2d: bias {:?} vs out channels {co}",
            bias.shape()
        )));
    }
    if stride_t == 0 || stride_f == 0 {
        return Err(HydraError::Dimension("conv2d: zero stride".to_string()));
    }
    if kt > t || kf > f {
        return Err(HydraError::Dimension(format!(
            "conv2d: kernel ({kt},{kf}) exceeds spatial extent ({t},{f})"
        )));
    }
    let to = (t - kt) / stride_t + 1;
    let fo = (f - kf) / stride_f + 1;

    let mut out = vec![0.0; b * co * to * fo];
    {
        let x = input.data();
        let w = weight.data();
        let bv = bias.data();
        for bi in 0..b {
            for oc in 0..co {
                for ot in 0..to {
                    let orow = &mut out[((bi * co + oc) * to + ot) * fo..][..fo];
                    orow.fill(bv[oc]);
                    for icn in 0..c {
                        for ik in 0..kt {
                            let ti = ot * stride_t + ik;
                            let xrow = &x[((bi * c + icn) * t + ti) * f..][..f];
                            let wrow = &w[((oc * c + icn) * kt + ik) * kf..][..kf];
                            for (of, o) in orow.iter_mut().enumerate() {
                                let x0 = of * stride_f;
                                let mut acc = 0.0;
                                for (jk, &wv) in wrow.iter().enumerate() {
                                    acc += xrow[x0 + jk] * wv;
                                }
                                *o += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    let (xin, win, bin) = (input.clone(), weight.clone(), bias.clone());
    Tensor::from_op(
        vec![b, co, to, fo],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        "conv2d",
        move |dy| {
            let x = xin.data();
            let w = win.data();
            if xin.requires_grad() {
                let mut dx = vec![0.0; x.len()];
                for bi in 0..b {
                    for oc in 0..co {
                        for ot in 0..to {
                            let dyrow = &dy[((bi * co + oc) * to + ot) * fo..][..fo];
                            for icn in 0..c {
                                for ik in 0..kt {
                                    let ti = ot * stride_t + ik;
                                    let dxrow = &mut dx[((bi * c + icn) * t + ti) * f..][..f];
                                    let wrow = &w[((oc * c + icn) * kt + ik) * kf..][..kf];
                                    for (of, &d) in dyrow.iter().enumerate() {
                                        if d == 0.0 {
                                            continue;
                                        }
                                        let x0 = of * stride_f;
                                        for (jk, &wv) in wrow.iter().enumerate() {
                                            dxrow[x0 + jk] += d * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                xin.accumulate_grad(&dx);
            }
            if win.requires_grad() {
                let mut dw = vec![0.0; w.len()];
                for bi in 0..b {
                    for oc in 0..co {
                        for ot in 0..to {
                            let dyrow = &dy[((bi * co + oc) * to + ot) * fo..][..fo];
                            for icn in 0..c {
                                for ik in 0..kt {
                                    let ti = ot * stride_t + ik;
                                    let xrow = &x[((bi * c + icn) * t + ti) * f..][..f];
                                    let dwrow = &mut dw[((oc * c + icn) * kt + ik) * kf..][..kf];
                                    for (of, &d) in dyrow.iter().enumerate() {
                                        if d == 0.0 {
                                            continue;
                                        }
                                        let x0 = of * stride_f;
                                        for (jk, dwv) in dwrow.iter_mut().enumerate() {
                                            *dwv += d * xrow[x0 + jk];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                win.accumulate_grad(&dw);
            }
            if bin.requires_grad() {
                let mut db = vec![0.0; co];
                for bi in 0..b {
                    for oc in 0..co {
                        for i in 0..to * fo {
                            db[oc] += dy[(bi * co + oc) * to * fo + i];
                        }
                    }
                }
                bin.accumulate_grad(&db);
            }
        },
    )
}

/// Depthwise 1-D convolution over the time axis with zero same-padding.
///
/// input (B, T, D), weight (D, K) with K odd, bias (D). Shape-preserving.
pub fn depthwise_conv1d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ish = input.shape();
    let wsh = weight.shape();
    if ish.len() != 3 || wsh.len() != 2 || wsh[0] != ish[2] {
        return Err(HydraError::Dimension(format!(
            "depthwise_conv1d: input {:?} weight {:?}",
            ish, wsh
        )));
    }
    let (b, t, d) = (ish[0], ish[1], ish[2]);
    let k = wsh[1];
    if k.is_multiple_of(2) {
        return Err(HydraError::Dimension(format!(
            "depthwise_conv1d: even kernel {k}"
        )));
    }
    if bias.shape() != [d] {
        return Err(HydraError::Dimension(format!(
            "depthwise_conv1d: bias {:?} vs width {d}",
            bias.shape()
        )));
    }
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; b * t * d];
    {
        let x = input.data();
        let w = weight.data();
        let bv = bias.data();
        for bi in 0..b {
            for ti in 0..t {
                for di in 0..d {
                    let mut acc = bv[di];
                    for ki in 0..k {
                        let src = ti + ki;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        acc += x[(bi * t + (src - pad)) * d + di] * w[di * k + ki];
                    }
                    out[(bi * t + ti) * d + di] = acc;
                }
            }
        }
    }
    let (xin, win, bin) = (input.clone(), weight.clone(), bias.clone());
    Tensor::from_op(
        vec![b, t, d],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        "depthwise_conv1d",
        move |dy| {
            let x = xin.data();
            let w = win.data();
            if xin.requires_grad() {
                let mut dx = vec![0.0; x.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for di in 0..d {
                            let dv = dy[(bi * t + ti) * d + di];
                            if dv == 0.0 {
                                continue;
                            }
                            for ki in 0..k {
                                let src = ti + ki;
                                if src < pad || src - pad >= t {
                                    continue;
                                }
                                dx[(bi * t + (src - pad)) * d + di] += dv * w[di * k + ki];
                            }
                        }
                    }
                }
                xin.accumulate_grad(&dx);
            }
            if win.requires_grad() {
                let mut dw = vec![0.0; w.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for di in 0..d {
                            let dv = dy[(bi * t + ti) * d + di];
                            if dv == 0.0 {
                                continue;
                            }
                            for ki in 0..k {
                                let src = ti + ki;
                                if src < pad || src - pad >= t {
                                    continue;
                                }
                                dw[di * k + ki] += dv * x[(bi * t + (src - pad)) * d + di];
                            }
                        }
                    }
                }
                win.accumulate_grad(&dw);
            }
            if bin.requires_grad() {
                let mut db = vec![0.0; d];
                for bi in 0..b {
                    for ti in 0..t {
                        for di in 0..d {
                            db[di] += dy[(bi * t + ti) * d + di];
                        }
                    }
                }
                bin.accumulate_grad(&db);
            }
        },
    )
}

/// Row lookup: ids index into table (V, D); output (ids.len()/cols-grouped
/// under `shape`) x D. Gradient scatters into the table rows.
pub fn embedding(ids: &[usize], shape: &[usize], table: &Tensor) -> Result<Tensor> {
    let tsh = table.shape();
    if tsh.len() != 2 {
        return Err(HydraError::Dimension(format!(
            "embedding: table {:?}",
            tsh
        )));
    }
    let (v, d) = (tsh[0], tsh[1]);
    if crate::tensor::numel_of(shape) != ids.len() {
        return Err(HydraError::Dimension(format!(
            "embedding: {} ids vs shape {:?}",
            ids.len(),
            shape
        )));
    }
    for &id in ids {
        if id >= v {
            return Err(HydraError::Vocab { id, vocab: v });
        }
    }
    let mut out = vec![0.0; ids.len() * d];
    {
        let tb = table.data();
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&tb[id * d..(id + 1) * d]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.push(d);
    let tab = table.clone();
    let ids_owned: Vec<usize> = ids.to_vec();
    Tensor::from_op(
        out_shape,
        out,
        vec![table.clone()],
        "embedding",
        move |dy| {
            let mut dt = vec![0.0; tab.numel()];
            for (r, &id) in ids_owned.iter().enumerate() {
                for i in 0..d {
                    dt[id * d + i] += dy[r * d + i];
                }
            }
            tab.accumulate_grad(&dt);
        },
    )
}

/// Attention mask with broadcasting over batch and query axes. `allowed`
/// holds `mb * mq * mk` flags; an axis of extent 1 broadcasts.
#[derive(Clone, Debug)]
pub struct AttnMask {
    allowed: Vec<bool>,
    mb: usize,
    mq: usize,
    mk: usize,
}

impl AttnMask {
    pub fn new(allowed: Vec<bool>, mb: usize, mq: usize, mk: usize) -> Result<Self> {
        if allowed.len() != mb * mq * mk {
            return Err(HydraError::Dimension(format!(
                "mask: {} flags vs ({mb},{mq},{mk})",
                allowed.len()
            )));
        }
        Ok(AttnMask { allowed, mb, mq, mk })
    }

    /// Causal mask: query u may attend to keys 0..=u.
    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                allowed[q * len + k] = true;
            }
        }
        AttnMask { allowed, mb: 1, mq: len, mk: len }
    }

    /// Per-utterance key validity from sequence lengths.
    pub fn key_lengths(lengths: &[usize], t_k: usize) -> Self {
        let mut allowed = vec![false; lengths.len() * t_k];
        for (b, &len) in lengths.iter().enumerate() {
            for k in 0..len.min(t_k) {
                allowed[b * t_k + k] = true;
            }
        }
        AttnMask { allowed, mb: lengths.len(), mq: 1, mk: t_k }
    }

    fn allows(&self, b: usize, q: usize, k: usize) -> bool {
        let bi = if self.mb == 1 { 0 } else { b };
        let qi = if self.mq == 1 { 0 } else { q };
        self.allowed[(bi * self.mq + qi) * self.mk + k]
    }
}

/// Scaled dot-product attention over (B, H, T, head_dim) operands. Forbidden
/// key positions receive exactly zero weight and no gradient.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 4 || ks.len() != 4 || vs.len() != 4 {
        return Err(HydraError::Dimension(format!(
            "attention: q {:?} k {:?} v {:?}",
            qs, ks, vs
        )));
    }
    let (b, h, tq, dk) = (qs[0], qs[1], qs[2], qs[3]);
    let (tk, dv) = (ks[2], vs[3]);
    if ks[0] != b || ks[1] != h || ks[3] != dk || vs[0] != b || vs[1] != h || vs[2] != tk {
        return Err(HydraError::Dimension(format!(
            "attention: incompatible q {:?} k {:?} v {:?}",
            qs, ks, vs
        )));
    }
    if let Some(m) = mask {
        if (m.mb != 1 && m.mb != b) || (m.mq != 1 && m.mq != tq) || m.mk != tk {
            return Err(HydraError::Dimension(format!(
                "attention mask ({},{},{}) vs b={b} tq={tq} tk={tk}",
                m.mb, m.mq, m.mk
            )));
        }
    }
    let scale = 1.0 / (dk as f64).sqrt();

    // Attention weights per (b, h, tq) row, with masked keys excluded from
    // the softmax entirely.
    let mut weights = vec![0.0; b * h * tq * tk];
    {
        let qd = q.data();
        let kd = k.data();
        for bi in 0..b {
            for hi in 0..h {
                let qb = &qd[((bi * h + hi) * tq) * dk..];
                let kb = &kd[((bi * h + hi) * tk) * dk..];
                for qi in 0..tq {
                    let row = &mut weights[((bi * h + hi) * tq + qi) * tk..][..tk];
                    let mut mx = f64::NEG_INFINITY;
                    let qrow = &qb[qi * dk..][..dk];
                    for (ki, slot) in row.iter_mut().enumerate() {
                        if mask.is_none_or(|m| m.allows(bi, qi, ki)) {
                            let krow = &kb[ki * dk..][..dk];
                            let mut s = 0.0;
                            for (qv, kv) in qrow.iter().zip(krow) {
                                s += qv * kv;
                            }
                            *slot = s * scale;
                            mx = mx.max(*slot);
                        } else {
                            *slot = f64::NEG_INFINITY;
                        }
                    }
                    if mx == f64::NEG_INFINITY {
                        return Err(HydraError::Dimension(format!(
                            "attention: fully masked row (b={bi}, q={qi})"
                        )));
                    }
                    let mut z = 0.0;
                    for slot in row.iter_mut() {
                        if *slot == f64::NEG_INFINITY {
                            *slot = 0.0;
                        } else {
                            *slot = (*slot - mx).exp();
                            z += *slot;
                        }
                    }
                    for w in row.iter_mut() {
                        *w /= z;
                    }
                }
            }
        }
    }

    let mut out = vec![0.0; b * h * tq * dv];
    {
        let vd = v.data();
        for bi in 0..b {
            for hi in 0..h {
                let vb = &vd[((bi * h + hi) * tk) * dv..];
                for qi in 0..tq {
                    let wrow = &weights[((bi * h + hi) * tq + qi) * tk..][..tk];
                    let orow = &mut out[((bi * h + hi) * tq + qi) * dv..][..dv];
                    for ki in 0..tk {
                        let w = wrow[ki];
                        if w == 0.0 {
                            continue;
                        }
                        for di in 0..dv {
                            orow[di] += w * vb[ki * dv + di];
                        }
                    }
                }
            }
        }
    }

    let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
    let saved = weights;
    Tensor::from_op(
        vec![b, h, tq, dv],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        "attention",
        move |dy| {
            let qd = qc.data();
            let kd = kc.data();
            let vd = vc.data();
            let mut dq = vec![0.0; qd.len()];
            let mut dkb = vec![0.0; kd.len()];
            let mut dvb = vec![0.0; vd.len()];
            for bi in 0..b {
                for hi in 0..h {
                    let base = (bi * h + hi) * tq;
                    let kbase = (bi * h + hi) * tk;
                    for qi in 0..tq {
                        let wrow = &saved[(base + qi) * tk..][..tk];
                        let dyr = &dy[(base + qi) * dv..][..dv];
                        // dL/dw[ki] = dy . v[ki]
                        let mut dw = vec![0.0; tk];
                        for ki in 0..tk {
                            if wrow[ki] == 0.0 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for di in 0..dv {
                                acc += dyr[di] * vd[(kbase + ki) * dv + di];
                            }
                            dw[ki] = acc;
                            // dV[ki] += w * dy
                            for di in 0..dv {
                                dvb[(kbase + ki) * dv + di] += wrow[ki] * dyr[di];
                            }
                        }
                        // softmax backward on the row
                        let mut dot = 0.0;
                        for ki in 0..tk {
                            dot += dw[ki] * wrow[ki];
                        }
                        for ki in 0..tk {
                            let ds = wrow[ki] * (dw[ki] - dot);
                            if ds == 0.0 {
                                continue;
                            }
                            let g = ds * scale;
                            for di in 0..dk {
                                dq[(base + qi) * dk + di] += g * kd[(kbase + ki) * dk + di];
                                dkb[(kbase + ki) * dk + di] += g * qd[(base + qi) * dk + di];
                            }
                        }
                    }
                }
            }
            qc.accumulate_grad(&dq);
            kc.accumulate_grad(&dkb);
            vc.accumulate_grad(&dvb);
        },
    )
}

/// Standard sinusoidal position table: PE(t, 2i) = sin(t / 10000^{2i/D}),
/// PE(t, 2i+1) = cos of the same angle. Returned row-major (len, d).
pub fn sinusoid_table(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            pe[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
