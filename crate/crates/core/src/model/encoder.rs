//! Conformer-style encoder blocks and the CTC projection head.

use crate::error::Result;
use crate::model::{multi_head_attention, zero_padded_rows, BoundParams, EncoderConfig};
use crate::tensor::{depthwise_conv1d, AttnMask, Tensor};

/// Encoder stack over an embedding (B, T', D). Each block applies, with a
/// residual around each sub-layer: half-step feed-forward, self-attention
/// masked to valid key positions, a depthwise-conv module, a second
/// half-step feed-forward, then a closing LayerNorm. Zero blocks is the
/// identity.
pub fn encode(
    params: &BoundParams,
    cfg: &EncoderConfig,
    o: &Tensor,
    lengths: &[usize],
) -> Result<Tensor> {
    let t = o.shape()[1];
    let key_mask = AttnMask::key_lengths(lengths, t);
    let mut x = o.clone();

    for b in 0..cfg.num_blocks {
        let p = format!("encoder.block{b}");

        let h = norm(params, &format!("{p}.norm_ffn1"), &x)?;
        let h = ffn(params, &format!("{p}.ffn1"), &h)?;
        let h = params.apply_dropout(&h)?;
        x = x.add(&h.scale(0.5)?)?;

        let h = norm(params, &format!("{p}.norm_attn"), &x)?;
        let h = multi_head_attention(params, &format!("{p}.attn"), &h, &h, cfg.heads, Some(&key_mask))?;
        let h = params.apply_dropout(&h)?;
        x = x.add(&h)?;

        let h = norm(params, &format!("{p}.norm_conv"), &x)?;
        // Valid rows must not see padding rows through the kernel window.
        let h = zero_padded_rows(&h, lengths)?;
        let h = depthwise_conv1d(
            &h,
            &params.get(&format!("{p}.conv.depthwise.weight"))?,
            &params.get(&format!("{p}.conv.depthwise.bias"))?,
        )?
        .relu()?;
        let h = h.linear(
            &params.get(&format!("{p}.conv.pointwise.weight"))?,
            &params.get(&format!("{p}.conv.pointwise.bias"))?,
        )?;
        let h = params.apply_dropout(&h)?;
        x = x.add(&h)?;

        let h = norm(params, &format!("{p}.norm_ffn2"), &x)?;
        let h = ffn(params, &format!("{p}.ffn2"), &h)?;
        let h = params.apply_dropout(&h)?;
        x = x.add(&h.scale(0.5)?)?;

        x = norm(params, &format!("{p}.norm_out"), &x)?;
    }
    Ok(x)
}

/// Vocabulary projection over encoder output: linear then log-softmax, so
/// every frame row is a log-simplex.
pub fn ctc_head(params: &BoundParams, c: &Tensor) -> Result<Tensor> {
    c.linear(&params.get("heads.ctc.weight")?, &params.get("heads.ctc.bias")?)?
        .log_softmax()
}

fn norm(params: &BoundParams, prefix: &str, x: &Tensor) -> Result<Tensor> {
    x.layer_norm(
        &params.get(&format!("{prefix}.gain"))?,
        &params.get(&format!("{prefix}.offset"))?,
    )
}

fn ffn(params: &BoundParams, prefix: &str, x: &Tensor) -> Result<Tensor> {
    x.linear(
        &params.get(&format!("{prefix}.linear1.weight"))?,
        &params.get(&format!("{prefix}.linear1.bias"))?,
    )?
    .relu()?
    .linear(
        &params.get(&format!("{prefix}.linear2.weight"))?,
        &params.get(&format!("{prefix}.linear2.bias"))?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FrontendConfig;
    use crate::model::{DecoderConfig, ModelState};

    fn state(num_blocks: usize) -> ModelState {
        ModelState::init(
            FrontendConfig::new(&[4], false, 80, 16).unwrap(),
            EncoderConfig { num_blocks, model_dim: 16, heads: 2, ffn_dim: 24, depthwise_kernel: 3, dropout: 0.0 },
            DecoderConfig { num_blocks_l2r: 1, num_blocks_r2l: 0, model_dim: 16, heads: 2, ffn_dim: 24, vocab_size: 8 },
            3,
        )
        .unwrap()
    }

    fn demo_input(b: usize, t: usize, d: usize, scale: f64) -> Tensor {
        let data: Vec<f64> = (0..b * t * d)
            .map(|i| (((i * 37 + 11) % 101) as f64 / 50.0 - 1.0) * scale)
            .collect();
        Tensor::constant(&[b, t, d], data).unwrap()
    }

    #[test]
    fn zero_blocks_is_identity() {
        let m = state(0);
        let o = demo_input(2, 5, 16, 0.8);
        let c = encode(&m.bind(false), &m.encoder, &o, &[5, 5]).unwrap();
        assert_eq!(c.data(), o.data());
    }

    #[test]
    fn shape_is_preserved() {
        let m = state(2);
        let o = demo_input(2, 7, 16, 0.8);
        let c = encode(&m.bind(false), &m.encoder, &o, &[7, 4]).unwrap();
        assert_eq!(c.shape(), &[2, 7, 16]);
    }

    #[test]
    fn padding_rows_cannot_influence_valid_rows() {
        let m = state(2);
        let b = 1;
        let (t, valid, d) = (9usize, 6usize, 16usize);
        let base = demo_input(b, t, d, 0.8);
        let mut perturbed = base.data().to_vec();
        for v in perturbed.iter_mut().skip(valid * d) {
            *v += 7.7;
        }
        let pert = Tensor::constant(&[b, t, d], perturbed).unwrap();
        let ca = encode(&m.bind(false), &m.encoder, &base, &[valid]).unwrap();
        let cb = encode(&m.bind(false), &m.encoder, &pert, &[valid]).unwrap();
        for i in 0..valid * d {
            assert!(
                (ca.data()[i] - cb.data()[i]).abs() < 1e-9,
                "row leak at {i}: {} vs {}",
                ca.data()[i],
                cb.data()[i]
            );
        }
    }

    #[test]
    fn ctc_head_rows_are_log_simplexes() {
        let m = state(1);
        let o = demo_input(2, 6, 16, 0.8);
        let bound = m.bind(false);
        let c = encode(&bound, &m.encoder, &o, &[6, 6]).unwrap();
        let lp = ctc_head(&bound, &c).unwrap();
        assert_eq!(lp.shape(), &[2, 6, 8]);
        for r in 0..12 {
            let row = &lp.data()[r * 8..(r + 1) * 8];
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ctc_head_zero_weights_give_uniform() {
        let mut m = state(0);
        let v = m.decoder.vocab_size;
        for name in ["heads.ctc.weight", "heads.ctc.bias"] {
            let p = m.param_mut(name).unwrap();
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let o = demo_input(1, 3, 16, 0.8);
        let bound = m.bind(false);
        let lp = ctc_head(&bound, &o).unwrap();
        let expect = -(v as f64).ln();
        for val in lp.data() {
            assert!((val - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_touches_same_parameters_for_any_input_width() {
        // Branch-agnostic: the parameter set bound during encode does not
        // depend on which branch produced the embedding.
        let m = state(2);
        let names = |t: usize| -> Vec<String> {
            let bound = m.bind(true);
            let o = demo_input(1, t, 16, 0.5);
            let c = encode(&bound, &m.encoder, &o, &[t]).unwrap();
            c.sum_all().unwrap().backward().unwrap();
            bound.gradients().into_iter().map(|(n, _)| n).collect()
        };
        assert_eq!(names(11), names(5));
    }
}
