//! Training objectives: CTC loss via the log-space forward recursion,
//! label-smoothed KL attention loss, and their weighted combination.

use crate::error::{HydraError, Result};
use crate::tensor::Tensor;
use crate::tokens::{eos_id, TokenSeq, BLANK_ID};

/// Loss combination weights: `alpha` on the CTC term, `r2l_weight` splitting
/// the attention term between directions, label smoothing for the KL target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub r2l_weight: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.3, r2l_weight: 0.3, label_smoothing: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(HydraError::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.r2l_weight) {
            return Err(HydraError::Config(format!(
                "r2l weight {} outside [0,1]",
                self.r2l_weight
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(HydraError::Config(format!(
                "label smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Blank-interleaved label sequence: blank, t0, blank, t1, ..., blank.
fn expand_with_blanks(target: &TokenSeq) -> Vec<usize> {
    let mut labels = Vec::with_capacity(2 * target.len() + 1);
    labels.push(BLANK_ID);
    for &id in target.ids() {
        labels.push(id);
        labels.push(BLANK_ID);
    }
    labels
}

/// CTC loss of one utterance: -log of the total probability of all frame
/// alignments collapsing to the target, from log-probabilities (T', V).
/// Differentiable with respect to `log_probs`.
///
/// A target of U tokens with r adjacent repeats needs at least U + r frames;
/// anything shorter has no alignment and is rejected.
pub fn ctc_loss(log_probs: &Tensor, target: &TokenSeq) -> Result<Tensor> {
    let sh = log_probs.shape();
    if sh.len() != 2 {
        return Err(HydraError::Dimension(format!(
            "ctc_loss expects (T', V), got {sh:?}"
        )));
    }
    let (t_len, v) = (sh[0], sh[1]);
    for &id in target.ids() {
        if id >= v {
            return Err(HydraError::Vocab { id, vocab: v });
        }
        if id == BLANK_ID {
            return Err(HydraError::Usage("target contains the blank id".to_string()));
        }
    }
    let u = target.len();
    let min_frames = u + target.adjacent_repeats();
    if t_len < min_frames {
        return Err(HydraError::InfeasibleTarget(format!(
            "target of {u} tokens needs {min_frames} frames, got {t_len}"
        )));
    }

    let labels = expand_with_blanks(target);
    let s_len = labels.len();
    let lp = log_probs.data();
    let at = |t: usize, k: usize| lp[t * v + k];

    // Skip from s-2 to s is legal only between distinct non-blank labels.
    let skip_ok: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && labels[s] != BLANK_ID && labels[s] != labels[s - 2])
        .collect();

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = at(0, labels[0]);
    if s_len > 1 {
        alpha[s_len + 1 - s_len] = at(0, labels[1]); // alpha[0][1]
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[(t - 1) * s_len + s];
            let step = if s >= 1 { alpha[(t - 1) * s_len + s - 1] } else { neg };
            let skip = if skip_ok[s] { alpha[(t - 1) * s_len + s - 2] } else { neg };
            let sum = lse3(stay, step, skip);
            alpha[t * s_len + s] = if sum == neg { neg } else { sum + at(t, labels[s]) };
        }
    }
    let tail = alpha[(t_len - 1) * s_len + s_len - 1];
    let tail2 = if s_len > 1 { alpha[(t_len - 1) * s_len + s_len - 2] } else { neg };
    let log_z = lse2(tail, tail2);
    if log_z == neg {
        return Err(HydraError::InfeasibleTarget(format!(
            "no alignment of {u} tokens into {t_len} frames"
        )));
    }

    // Beta recursion, symmetric to alpha, for the gradient.
    let mut beta = vec![neg; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = at(t_len - 1, labels[s_len - 1]);
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = at(t_len - 1, labels[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let stay = beta[(t + 1) * s_len + s];
            let step = if s + 1 < s_len { beta[(t + 1) * s_len + s + 1] } else { neg };
            let skip = if s + 2 < s_len && skip_ok[s + 2] {
                beta[(t + 1) * s_len + s + 2]
            } else {
                neg
            };
            let sum = lse3(stay, step, skip);
            beta[t * s_len + s] = if sum == neg { neg } else { sum + at(t, labels[s]) };
        }
    }

    // d(-logZ)/d lp[t][k] = -sum_{s: labels[s]=k} exp(alpha + beta - lp - logZ)
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for (s, &lab) in labels.iter().enumerate() {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == neg || b == neg {
                continue;
            }
            grad[t * v + lab] -= (a + b - at(t, lab) - log_z).exp();
        }
    }

    let parent = log_probs.clone();
    Tensor::from_op(
        vec![1],
        vec![-log_z],
        vec![log_probs.clone()],
        "ctc_loss",
        move |dy| {
            let scaled: Vec<f64> = grad.iter().map(|g| g * dy[0]).collect();
            parent.accumulate_grad(&scaled);
        },
    )
}

/// Label-smoothed KL attention loss over teacher-forced logits (U+1, V).
/// The target distribution puts 1-eps on the true next token (the target
/// followed by eos) and eps/(V-1) elsewhere; the loss is the mean KL over
/// positions.
pub fn kl_attention_loss(logits: &Tensor, target: &TokenSeq, eps: f64) -> Result<Tensor> {
    let sh = logits.shape();
    if sh.len() != 2 {
        return Err(HydraError::Dimension(format!(
            "kl_attention_loss expects (U+1, V), got {sh:?}"
        )));
    }
    let (rows, v) = (sh[0], sh[1]);
    if rows != target.len() + 1 {
        return Err(HydraError::Dimension(format!(
            "{} logit rows for target of {} tokens",
            rows,
            target.len()
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(HydraError::Config(format!("label smoothing {eps} outside [0,1)")));
    }
    let mut next = target.ids().to_vec();
    next.push(eos_id(v));
    for &id in &next {
        if id >= v {
            return Err(HydraError::Vocab { id, vocab: v });
        }
    }

    let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
    let mut q = vec![off; rows * v];
    for (r, &id) in next.iter().enumerate() {
        q[r * v + id] = 1.0 - eps;
    }
    // Entropy term of q, identical for every row.
    let q_log_q = if eps == 0.0 {
        0.0
    } else {
        (1.0 - eps) * (1.0 - eps).ln() + eps * off.ln()
    };

    let lp = logits.log_softmax()?;
    let qt = Tensor::constant(&[rows, v], q)?;
    lp.mul(&qt)?
        .sum_all()?
        .affine(-1.0 / rows as f64, q_log_q)
}

/// Weighted total: alpha * L_CTC + (1-alpha) * [(1-beta) * L_l2r + beta * L_r2l].
/// With beta = 0 the right-to-left term is not required and the combination
/// reduces to a unidirectional attention loss.
pub fn total_loss(
    l_ctc: &Tensor,
    l_l2r: &Tensor,
    l_r2l: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<Tensor> {
    weights.validate()?;
    let beta = weights.r2l_weight;
    let att = if beta > 0.0 {
        let r2l = l_r2l.ok_or_else(|| {
            HydraError::Config("r2l weight is positive but no right-to-left loss given".to_string())
        })?;
        l_l2r.scale(1.0 - beta)?.add(&r2l.scale(beta)?)?
    } else {
        l_l2r.clone()
    };
    l_ctc.scale(weights.alpha)?.add(&att.scale(1.0 - weights.alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn log_uniform(t: usize, v: usize) -> Tensor {
        Tensor::constant(&[t, v], vec![(1.0 / v as f64).ln(); t * v]).unwrap()
    }

    fn random_log_simplex(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(t * v);
        for _ in 0..t {
            let mut row: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x = (*x / s).ln());
            out.extend(row);
        }
        out
    }

    /// Exhaustive oracle: enumerate every length-T frame path, collapse it,
    /// and sum probabilities of paths collapsing to the target.
    fn brute_force_ctc(lp: &[f64], t: usize, v: usize, target: &[usize]) -> f64 {
        let mut total = 0.0f64;
        let paths = v.pow(t as u32);
        for code in 0..paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t);
            for _ in 0..t {
                path.push(c % v);
                c /= v;
            }
            let collapsed = crate::decoding::collapse_path(&path);
            if collapsed == target {
                let logp: f64 = path.iter().enumerate().map(|(i, &k)| lp[i * v + k]).sum();
                total += logp.exp();
            }
        }
        -total.ln()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn one_frame_uniform_single_token() {
        let lp = log_uniform(1, 2);
        let target = TokenSeq::from_raw(vec![1]);
        let loss = ctc_loss(&lp, &target).unwrap().item();
        assert!((loss - 0.5f64.ln().abs()).abs() < 1e-4);
        assert!((loss - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 200 {
            let t = rng.random_range(1..=8usize);
            let v = rng.random_range(2..=4usize);
            let u = rng.random_range(0..=3usize);
            let ids: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
            let target = TokenSeq::from_raw(ids.clone());
            if t < u + target.adjacent_repeats() {
                continue;
            }
            if ids.is_empty() {
                // empty target: loss is -log P(all blanks)
                let data = random_log_simplex(t, v, &mut rng);
                let lp = Tensor::constant(&[t, v], data.clone()).unwrap();
                let loss = ctc_loss(&lp, &target).unwrap().item();
                let expect: f64 = -(0..t).map(|i| data[i * v]).sum::<f64>();
                assert!((loss - expect).abs() < 1e-9);
                checked += 1;
                continue;
            }
            let data = random_log_simplex(t, v, &mut rng);
            let lp = Tensor::constant(&[t, v], data.clone()).unwrap();
            let loss = ctc_loss(&lp, &target).unwrap().item();
            let oracle = brute_force_ctc(&data, t, v, &ids);
            assert!(
                (loss - oracle).abs() < 1e-9,
                "T={t} V={v} target {ids:?}: {loss} vs {oracle}"
            );
            checked += 1;
        }
    }

    #[test]
    fn three_frames_two_tokens_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_log_simplex(3, 3, &mut rng);
        let lp = Tensor::constant(&[3, 3], data.clone()).unwrap();
        let target = TokenSeq::from_raw(vec![1, 2]);
        let loss = ctc_loss(&lp, &target).unwrap().item();
        let oracle = brute_force_ctc(&data, 3, 3, &[1, 2]);
        assert!((loss - oracle).abs() < 1e-9);
    }

    #[test]
    fn infeasible_target_is_rejected() {
        let lp = log_uniform(2, 4);
        // repeated token needs a separating blank: 3 frames minimum
        let target = TokenSeq::from_raw(vec![1, 1]);
        assert!(matches!(
            ctc_loss(&lp, &target),
            Err(HydraError::InfeasibleTarget(_))
        ));
        // more tokens than frames
        let target = TokenSeq::from_raw(vec![1, 2, 3]);
        assert!(matches!(
            ctc_loss(&lp, &target),
            Err(HydraError::InfeasibleTarget(_))
        ));
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let data = random_log_simplex(6, 4, &mut rng);
        let leaves = vec![(vec![6, 4], data)];
        let target = TokenSeq::from_raw(vec![2, 1, 1]);
        let err = grad_check(
            |ts| ctc_loss(&ts[0], &target),
            &leaves,
            64,
            13,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn kl_zero_when_p_equals_q() {
        let v = 4;
        let eps = 0.2;
        let target = TokenSeq::from_raw(vec![1]);
        // logits = log q reproduces q after softmax
        let off = eps / (v - 1) as f64;
        let mut logits = vec![off.ln(); 2 * v];
        logits[1] = (1.0 - eps).ln();
        logits[v + eos_id(v)] = (1.0 - eps).ln();
        logits[v + 1] = off.ln();
        let t = Tensor::constant(&[2, v], logits).unwrap();
        let loss = kl_attention_loss(&t, &target, eps).unwrap().item();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn kl_with_no_smoothing_is_cross_entropy() {
        let v = 4;
        let target = TokenSeq::from_raw(vec![2]);
        let data = vec![0.3, -0.1, 0.8, 0.2, 0.0, 0.5, -0.4, 0.9];
        let t = Tensor::constant(&[2, v], data.clone()).unwrap();
        let loss = kl_attention_loss(&t, &target, 0.0).unwrap().item();
        let lp = t.log_softmax().unwrap();
        let expect = -(lp.data()[2] + lp.data()[v + eos_id(v)]) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_direct_sum_oracle() {
        let v = 3;
        let eps = 0.1;
        let target = TokenSeq::from_raw(vec![1]);
        let data = vec![0.7, -0.3, 0.1, -0.2, 0.4, 0.6];
        let t = Tensor::constant(&[2, v], data.clone()).unwrap();
        let loss = kl_attention_loss(&t, &target, eps).unwrap().item();

        // direct sum: mean over rows of sum_k q_k ln(q_k / p_k)
        let lp = t.log_softmax().unwrap();
        let next = [1usize, eos_id(v)];
        let mut acc = 0.0;
        for (r, &true_id) in next.iter().enumerate() {
            for k in 0..v {
                let q = if k == true_id { 1.0 - eps } else { eps / (v - 1) as f64 };
                acc += q * (q.ln() - lp.data()[r * v + k]);
            }
        }
        let expect = acc / 2.0;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let leaves = vec![(vec![3, 4], vec![0.3, -0.5, 0.2, 0.9, -0.1, 0.4, 0.0, -0.7, 0.6, 0.1, -0.2, 0.5])];
        let target = TokenSeq::from_raw(vec![1, 2]);
        let err = grad_check(
            |ts| kl_attention_loss(&ts[0], &target, 0.1),
            &leaves,
            24,
            3,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn total_loss_reduces_to_each_term() {
        let ctc = Tensor::scalar(2.0).unwrap();
        let l2r = Tensor::scalar(1.0).unwrap();
        let r2l = Tensor::scalar(3.0).unwrap();

        let w = LossWeights { alpha: 1.0, r2l_weight: 0.3, label_smoothing: 0.0 };
        assert_eq!(total_loss(&ctc, &l2r, Some(&r2l), &w).unwrap().item(), 2.0);

        let w = LossWeights { alpha: 0.0, r2l_weight: 0.0, label_smoothing: 0.0 };
        assert_eq!(total_loss(&ctc, &l2r, None, &w).unwrap().item(), 1.0);
    }

    #[test]
    fn total_loss_hand_arithmetic() {
        let ctc = Tensor::scalar(2.0).unwrap();
        let l2r = Tensor::scalar(1.0).unwrap();
        let r2l = Tensor::scalar(3.0).unwrap();
        let w = LossWeights { alpha: 0.3, r2l_weight: 0.3, label_smoothing: 0.0 };
        let total = total_loss(&ctc, &l2r, Some(&r2l), &w).unwrap().item();
        assert!((total - 1.72).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_a_convex_combination() {
        for alpha in [0.0, 0.2, 0.5, 0.8, 1.0] {
            let ctc = Tensor::scalar(2.0).unwrap();
            let l2r = Tensor::scalar(1.0).unwrap();
            let r2l = Tensor::scalar(5.0).unwrap();
            let w = LossWeights { alpha, r2l_weight: 0.4, label_smoothing: 0.0 };
            let att = 0.6 * 1.0 + 0.4 * 5.0;
            let total = total_loss(&ctc, &l2r, Some(&r2l), &w).unwrap().item();
            assert!(total >= 2.0f64.min(att) - 1e-12 && total <= 2.0f64.max(att) + 1e-12);
        }
    }

    #[test]
    fn missing_r2l_with_positive_weight_is_config_error() {
        let ctc = Tensor::scalar(2.0).unwrap();
        let l2r = Tensor::scalar(1.0).unwrap();
        let w = LossWeights { alpha: 0.5, r2l_weight: 0.5, label_smoothing: 0.0 };
        assert!(matches!(
            total_loss(&ctc, &l2r, None, &w),
            Err(HydraError::Config(_))
        ));
    }
}
