//! Dynamic-subsample training: per-batch uniform branch selection, forward
//! and backward through the selected branch only, lazy Adam updates so
//! unselected branches stay bit-identical.

mod optimizer;
mod transfer;

pub use optimizer::AdamOptimizer;
pub use transfer::{init_model, InitPlan, InitSource};

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Utterance, FEATURE_DIM};
use crate::error::{HydraError, Result};
use crate::frontend::{frontend_forward, FeatureBatch};
use crate::model::{ctc_head, decode_step, encode, Direction, ModelState};
use crate::objectives::{ctc_loss, kl_attention_loss, total_loss, LossWeights};
use crate::tensor::Tensor;
use crate::tokens::TokenSeq;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weights: LossWeights,
    pub branches: Vec<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(HydraError::Config("warmup_steps must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(HydraError::Config("batch_size must be >= 1".to_string()));
        }
        if self.peak_lr <= 0.0 {
            return Err(HydraError::Config(format!("peak_lr {} must be > 0", self.peak_lr)));
        }
        if self.branches.is_empty() {
            return Err(HydraError::Config("empty branch set".to_string()));
        }
        self.weights.validate()
    }
}

/// Noam-style schedule: peak * sqrt(warmup) * min(step^-0.5, step * warmup^-1.5).
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps as f64;
    cfg.peak_lr * w.sqrt() * (1.0 / s.sqrt()).min(s / (w * w.sqrt()))
}

/// One training step's record, emitted as a line to the metrics stream.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub branch: usize,
    pub loss_total: f64,
    pub loss_ctc: f64,
    pub loss_kl: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub dropped: usize,
}

impl StepRecord {
    pub fn metrics_line(&self) -> String {
        format!(
            "step={} branch={} loss={:.6} ctc={:.6} kl={:.6} grad_norm={:.6} wall_ms={:.3} dropped={}",
            self.step, self.branch, self.loss_total, self.loss_ctc, self.loss_kl, self.grad_norm,
            self.wall_ms, self.dropped
        )
    }
}

/// Uniform draw over the configured branch set.
pub fn select_branch(branches: &[usize], rng: &mut ChaCha8Rng) -> Result<usize> {
    if branches.is_empty() {
        return Err(HydraError::Config("empty branch set".to_string()));
    }
    Ok(branches[rng.random_range(0..branches.len())])
}

/// Zero-padded feature batch for a set of utterances.
pub fn batch_features(utts: &[&Utterance]) -> Result<FeatureBatch> {
    let b = utts.len();
    let t_max = utts.iter().map(|u| u.frames).max().unwrap_or(0);
    let mut data = vec![0.0; b * t_max * FEATURE_DIM];
    for (bi, u) in utts.iter().enumerate() {
        data[bi * t_max * FEATURE_DIM..bi * t_max * FEATURE_DIM + u.features.len()]
            .copy_from_slice(&u.features);
    }
    FeatureBatch::new(
        Tensor::constant(&[b, t_max, FEATURE_DIM], data)?,
        utts.iter().map(|u| u.frames).collect(),
    )
}

fn mean_of(losses: Vec<Tensor>) -> Result<Tensor> {
    let n = losses.len();
    let mut it = losses.into_iter();
    let mut acc = it.next().ok_or_else(|| HydraError::Train("empty loss list".to_string()))?;
    for l in it {
        acc = acc.add(&l)?;
    }
    acc.scale(1.0 / n as f64)
}

/// Forward/backward through the selected branch and an Adam update over
/// exactly the parameters that received gradients.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut ModelState,
    optimizer: &mut AdamOptimizer,
    batch: &[&Utterance],
    branch: usize,
    weights: &LossWeights,
    lr: f64,
    dropout_seed: u64,
    grad_clip: f64,
) -> Result<StepRecord> {
    let start = Instant::now();
    let spec = model.frontend.branch(branch)?.clone();

    // Utterances the branch cannot subsample, or whose target no longer fits
    // the subsampled frame budget, are dropped from this batch.
    let mut kept: Vec<&Utterance> = Vec::with_capacity(batch.len());
    let mut dropped = 0usize;
    for u in batch {
        let fits = spec
            .subsampled_length(u.frames)
            .map(|t| t >= u.target.len() + u.target.adjacent_repeats())
            .unwrap_or(false);
        if fits {
            kept.push(u);
        } else {
            dropped += 1;
        }
    }
    if kept.is_empty() {
        return Err(HydraError::Train(format!(
            "no utterance in the batch is feasible for branch {branch}"
        )));
    }

    let features = batch_features(&kept)?;
    let targets: Vec<TokenSeq> = kept.iter().map(|u| u.target.clone()).collect();

    let bound = model.bind_train(model.encoder.dropout, dropout_seed);
    let (o, lengths) = frontend_forward(&bound, &spec, &features, model.frontend.use_pos_enc)?;
    let c = encode(&bound, &model.encoder, &o, &lengths)?;

    let log_probs = ctc_head(&bound, &c)?;
    let mut ctc_terms = Vec::with_capacity(kept.len());
    for (bi, target) in targets.iter().enumerate() {
        let rows = log_probs.slice_batch_rows(bi, lengths[bi])?;
        ctc_terms.push(ctc_loss(&rows, target)?);
    }
    let l_ctc = mean_of(ctc_terms)?;

    let eps = weights.label_smoothing;
    let kl_direction = |direction: Direction| -> Result<Tensor> {
        let logits = decode_step(&bound, &model.decoder, &c, &lengths, &targets, direction)?;
        let mut terms = Vec::with_capacity(kept.len());
        for (bi, target) in targets.iter().enumerate() {
            let rows = logits.slice_batch_rows(bi, target.len() + 1)?;
            let oriented = match direction {
                Direction::LeftToRight => target.clone(),
                Direction::RightToLeft => target.reversed(),
            };
            terms.push(kl_attention_loss(&rows, &oriented, eps)?);
        }
        mean_of(terms)
    };
    let l_l2r = kl_direction(Direction::LeftToRight)?;
    let l_r2l = if weights.r2l_weight > 0.0 {
        Some(kl_direction(Direction::RightToLeft)?)
    } else {
        None
    };

    let total = total_loss(&l_ctc, &l_l2r, l_r2l.as_ref(), weights)?;
    let loss_kl = match &l_r2l {
        Some(r) => (1.0 - weights.r2l_weight) * l_l2r.item() + weights.r2l_weight * r.item(),
        None => l_l2r.item(),
    };
    total.backward()?;

    let mut grads = bound.gradients();
    let mut sq = 0.0;
    for (_, g) in &grads {
        for v in g {
            sq += v * v;
        }
    }
    let grad_norm = sq.sqrt();
    if grad_clip > 0.0 && grad_norm > grad_clip {
        let scale = grad_clip / grad_norm;
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }

    let record = StepRecord {
        step: 0,
        branch,
        loss_total: total.item(),
        loss_ctc: l_ctc.item(),
        loss_kl,
        grad_norm,
        wall_ms: 0.0,
        dropped,
    };
    for (name, grad) in &grads {
        optimizer.apply(model.param_mut(name)?, grad, lr);
    }
    Ok(StepRecord { wall_ms: start.elapsed().as_secs_f64() * 1e3, ..record })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Full training loop: shuffled batches, uniform branch selection per batch,
/// Noam learning-rate schedule. Non-finite losses abort the step; five in a
/// row halt training. `on_step` sees each record and the fresh model state
/// (for metrics and periodic checkpoints).
pub fn train(
    model: &mut ModelState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &ModelState) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if dataset.utterances.is_empty() {
        return Err(HydraError::Train("empty dataset".to_string()));
    }
    if dataset.vocab_size() != model.decoder.vocab_size {
        return Err(HydraError::Config(format!(
            "dataset vocab {} vs model vocab {}",
            dataset.vocab_size(),
            model.decoder.vocab_size
        )));
    }
    let model_factors = model.frontend.factors();
    for b in &cfg.branches {
        if !model_factors.contains(b) {
            return Err(HydraError::Config(format!(
                "branch {b} not in the model's frontend {model_factors:?}"
            )));
        }
    }
    if cfg.weights.r2l_weight > 0.0 && model.decoder.num_blocks_r2l == 0 {
        return Err(HydraError::Config(
            "r2l loss weight is positive but the right-to-left stack has no blocks".to_string(),
        ));
    }

    let mut select_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x5e1ec7));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xba7c4));
    let mut optimizer = AdamOptimizer::new();

    let n = dataset.utterances.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle
    let mut records = Vec::with_capacity(cfg.steps);
    let mut consecutive_aborts = 0usize;

    let mut step = 1usize;
    while step <= cfg.steps {
        if cursor + cfg.batch_size > n {
            for i in (1..n).rev() {
                order.swap(i, shuffle_rng.random_range(0..=i));
            }
            cursor = 0;
            if cfg.batch_size > n {
                return Err(HydraError::Config(format!(
                    "batch_size {} exceeds dataset of {n}",
                    cfg.batch_size
                )));
            }
        }
        let batch: Vec<&Utterance> = order[cursor..cursor + cfg.batch_size]
            .iter()
            .map(|&i| &dataset.utterances[i])
            .collect();
        cursor += cfg.batch_size;

        let branch = select_branch(&cfg.branches, &mut select_rng)?;
        let lr = learning_rate(cfg, step);
        match train_step(
            model,
            &mut optimizer,
            &batch,
            branch,
            &cfg.weights,
            lr,
            splitmix64(cfg.seed ^ (step as u64)),
            cfg.grad_clip,
        ) {
            Ok(mut record) => {
                record.step = step;
                consecutive_aborts = 0;
                on_step(&record, model)?;
                records.push(record);
                step += 1;
            }
            Err(HydraError::NonFinite(op)) => {
                consecutive_aborts += 1;
                if consecutive_aborts >= 5 {
                    return Err(HydraError::Train(format!(
                        "aborting: 5 consecutive non-finite losses (last from `{op}`) at step {step}"
                    )));
                }
                step += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::frontend::FrontendConfig;
    use crate::model::{DecoderConfig, EncoderConfig};

    fn tiny_model(factors: &[usize], vocab: usize, seed: u64) -> ModelState {
        ModelState::init(
            FrontendConfig::new(factors, false, 80, 16).unwrap(),
            EncoderConfig { num_blocks: 1, model_dim: 16, heads: 2, ffn_dim: 24, depthwise_kernel: 3, dropout: 0.0 },
            DecoderConfig { num_blocks_l2r: 1, num_blocks_r2l: 1, model_dim: 16, heads: 2, ffn_dim: 24, vocab_size: vocab },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn single_branch_selection_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..32 {
            assert_eq!(select_branch(&[6], &mut rng).unwrap(), 6);
        }
    }

    #[test]
    fn selection_is_seed_deterministic_and_balanced() {
        let draw = |seed: u64| -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..3000).map(|_| select_branch(&[4, 6, 8], &mut rng).unwrap()).collect()
        };
        assert_eq!(draw(11), draw(11));
        let seq = draw(11);
        let p = 1.0f64 / 3.0;
        let bound = 3.0 * (3000.0 * p * (1.0 - p)).sqrt();
        for b in [4, 6, 8] {
            let count = seq.iter().filter(|&&x| x == b).count() as f64;
            assert!((count - 1000.0).abs() <= bound, "branch {b}: {count}");
        }
    }

    #[test]
    fn empty_branch_set_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(select_branch(&[], &mut rng), Err(HydraError::Config(_))));
    }

    #[test]
    fn unselected_branch_parameters_stay_bit_identical() {
        let mut model = tiny_model(&[4, 6, 8], 8, 3);
        let data = gen_synthetic(6, 8, 10, 0.05, 21).unwrap();
        let mut opt = AdamOptimizer::new();
        let before: Vec<(String, Vec<f64>)> = model
            .params()
            .map(|p| (p.name.clone(), p.data.clone()))
            .collect();
        let batch: Vec<&Utterance> = data.utterances.iter().take(2).collect();
        let w = LossWeights::default();
        train_step(&mut model, &mut opt, &batch, 4, &w, 1e-3, 9, 0.0).unwrap();
        for (name, old) in &before {
            let now = &model.param(name).unwrap().data;
            if name.starts_with("frontend.sub6.") || name.starts_with("frontend.sub8.") {
                assert_eq!(now, old, "{name} must be untouched");
                assert!(opt.moments(name).is_none(), "{name} moments must not exist");
            } else if name.starts_with("encoder.block0.ffn1.linear1.weight")
                || name.starts_with("frontend.sub4.linear.weight")
            {
                assert_ne!(now, old, "{name} should move");
            }
        }
    }

    #[test]
    fn shared_parameters_move_under_every_branch() {
        let mut model = tiny_model(&[4, 6, 8], 8, 3);
        let data = gen_synthetic(6, 8, 10, 0.05, 22).unwrap();
        let mut opt = AdamOptimizer::new();
        let w = LossWeights::default();
        for branch in [4usize, 6, 8] {
            let before = model.param("encoder.block0.attn.q.weight").unwrap().data.clone();
            let batch: Vec<&Utterance> = data.utterances.iter().take(2).collect();
            train_step(&mut model, &mut opt, &batch, branch, &w, 1e-3, branch as u64, 0.0).unwrap();
            let after = &model.param("encoder.block0.attn.q.weight").unwrap().data;
            assert_ne!(&before, after, "encoder frozen under branch {branch}");
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let mut model = tiny_model(&[4], 8, 5);
        let data = gen_synthetic(4, 8, 10, 0.02, 40).unwrap();
        let batch: Vec<&Utterance> = data.utterances.iter().collect();
        let mut opt = AdamOptimizer::new();
        let w = LossWeights::default();
        let mut first = 0.0;
        let mut last = 0.0;
        for i in 0..50 {
            let r = train_step(&mut model, &mut opt, &batch, 4, &w, 1e-3, i, 0.0).unwrap();
            if i == 0 {
                first = r.loss_total;
            }
            last = r.loss_total;
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn too_short_utterances_are_dropped_with_a_count() {
        let mut model = tiny_model(&[8], 8, 5);
        let mut data = gen_synthetic(2, 8, 10, 0.0, 3).unwrap();
        // Shrink one utterance below the factor-8 receptive field.
        data.utterances[0].frames = 10;
        data.utterances[0].features.truncate(10 * FEATURE_DIM);
        let batch: Vec<&Utterance> = data.utterances.iter().collect();
        let mut opt = AdamOptimizer::new();
        let r = train_step(&mut model, &mut opt, &batch, 8, &LossWeights::default(), 1e-3, 0, 0.0)
            .unwrap();
        assert_eq!(r.dropped, 1);
    }

    #[test]
    fn zero_steps_leaves_the_model_unchanged() {
        let mut model = tiny_model(&[4], 8, 5);
        let before: Vec<Vec<f64>> = model.params().map(|p| p.data.clone()).collect();
        let data = gen_synthetic(4, 8, 10, 0.05, 1).unwrap();
        let cfg = TrainConfig {
            seed: 1,
            steps: 0,
            batch_size: 2,
            peak_lr: 1e-3,
            warmup_steps: 10,
            weights: LossWeights::default(),
            branches: vec![4],
            grad_clip: 5.0,
        };
        let records = train(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
        assert!(records.is_empty());
        let after: Vec<Vec<f64>> = model.params().map(|p| p.data.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_reproduces_identical_parameters() {
        let data = gen_synthetic(6, 8, 10, 0.05, 33).unwrap();
        let cfg = TrainConfig {
            seed: 12,
            steps: 8,
            batch_size: 3,
            peak_lr: 1e-3,
            warmup_steps: 4,
            weights: LossWeights::default(),
            branches: vec![4, 6, 8],
            grad_clip: 5.0,
        };
        let run = || {
            let mut model = tiny_model(&[4, 6, 8], 8, 7);
            train(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
            model
        };
        let a = run();
        let b = run();
        for (pa, pb) in a.params().zip(b.params()) {
            assert_eq!(pa.data, pb.data, "{}", pa.name);
            assert_eq!(pa.step_count, pb.step_count);
        }
    }

    #[test]
    fn repeated_non_finite_losses_halt_training() {
        let mut model = tiny_model(&[4], 8, 5);
        let data = gen_synthetic(4, 8, 10, 0.05, 2).unwrap();
        // an absurd learning rate blows the parameters up after one update,
        // so every following forward pass overflows
        let cfg = TrainConfig {
            seed: 3,
            steps: 40,
            batch_size: 2,
            peak_lr: 1e18,
            warmup_steps: 1,
            weights: LossWeights::default(),
            branches: vec![4],
            grad_clip: 0.0,
        };
        let err = train(&mut model, &data, &cfg, |_, _| Ok(())).unwrap_err();
        match err {
            HydraError::Train(msg) => assert!(msg.contains("non-finite"), "{msg}"),
            other => panic!("expected a training halt, got {other}"),
        }
    }

    #[test]
    fn dropout_is_seed_deterministic_and_changes_the_loss() {
        let data = gen_synthetic(4, 8, 10, 0.05, 4).unwrap();
        let batch: Vec<&Utterance> = data.utterances.iter().take(2).collect();
        let run = |dropout: f64| -> f64 {
            let mut model = tiny_model(&[4], 8, 5);
            model.encoder.dropout = dropout;
            let mut opt = AdamOptimizer::new();
            train_step(&mut model, &mut opt, &batch, 4, &LossWeights::default(), 1e-3, 77, 0.0)
                .unwrap()
                .loss_total
        };
        assert_eq!(run(0.2), run(0.2));
        assert_ne!(run(0.2), run(0.0));
    }

    #[test]
    fn learning_rate_peaks_at_warmup() {
        let cfg = TrainConfig {
            seed: 0,
            steps: 1,
            batch_size: 1,
            peak_lr: 2e-3,
            warmup_steps: 100,
            weights: LossWeights::default(),
            branches: vec![4],
            grad_clip: 0.0,
        };
        let lr_w = learning_rate(&cfg, 100);
        assert!((lr_w - 2e-3).abs() < 1e-12);
        assert!(learning_rate(&cfg, 50) < lr_w);
        assert!(learning_rate(&cfg, 400) < lr_w);
    }
}
