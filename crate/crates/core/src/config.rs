//! Flat key-value text formats: the run configuration and initialization
//! plans. A config file plus a seed and a dataset fully determines a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HydraError, Result};
use crate::frontend::FrontendConfig;
use crate::model::{DecoderConfig, EncoderConfig};
use crate::objectives::LossWeights;
use crate::training::{InitPlan, InitSource, TrainConfig};

pub const CONFIG_FORMAT_VERSION: u64 = 1;

/// Every knob of a run. Defaults are the desk-scale configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub alpha: f64,
    pub r2l_weight: f64,
    pub label_smoothing: f64,
    pub rescore_ctc_weight: f64,
    pub grad_clip: f64,
    pub branches: Vec<usize>,
    pub use_pos_enc: bool,
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub ffn_dim: usize,
    pub depthwise_kernel: usize,
    pub dropout: f64,
    pub decoder_blocks_l2r: usize,
    pub decoder_blocks_r2l: usize,
    pub vocab_size: usize,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            steps: 2000,
            batch_size: 8,
            peak_lr: 3e-3,
            warmup_steps: 100,
            alpha: 0.3,
            r2l_weight: 0.3,
            label_smoothing: 0.1,
            rescore_ctc_weight: 0.3,
            grad_clip: 5.0,
            branches: vec![4, 6, 8],
            use_pos_enc: false,
            input_dim: 80,
            model_dim: 64,
            heads: 4,
            encoder_blocks: 4,
            ffn_dim: 128,
            depthwise_kernel: 7,
            dropout: 0.0,
            decoder_blocks_l2r: 2,
            decoder_blocks_r2l: 2,
            vocab_size: 15,
            checkpoint_interval: 0,
        }
    }
}

impl RunConfig {
    pub fn frontend(&self) -> Result<FrontendConfig> {
        FrontendConfig::new(&self.branches, self.use_pos_enc, self.input_dim, self.model_dim)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            num_blocks: self.encoder_blocks,
            model_dim: self.model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            depthwise_kernel: self.depthwise_kernel,
            dropout: self.dropout,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            num_blocks_l2r: self.decoder_blocks_l2r,
            num_blocks_r2l: self.decoder_blocks_r2l,
            model_dim: self.model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab_size,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            r2l_weight: self.r2l_weight,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            steps: self.steps,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            weights: self.weights(),
            branches: self.branches.clone(),
            grad_clip: self.grad_clip,
        }
    }
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            HydraError::Config(format!("line {}: expected `key = value`, got `{line}`", ln + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.remove(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| HydraError::Config(format!("bad value `{v}` for `{key}`"))),
    }
}

/// Parses the run-config format. Unknown keys are rejected; missing keys
/// take the documented defaults.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut map = parse_kv(text)?;
    let version: u64 = take(&mut map, "format_version", CONFIG_FORMAT_VERSION)?;
    if version != CONFIG_FORMAT_VERSION {
        return Err(HydraError::Config(format!(
            "config format_version {version}, this build reads {CONFIG_FORMAT_VERSION}"
        )));
    }
    let d = RunConfig::default();
    let branches = match map.remove("branches") {
        None => d.branches.clone(),
        Some(v) => v
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| HydraError::Config(format!("bad branch `{s}`")))
            })
            .collect::<Result<Vec<usize>>>()?,
    };
    let cfg = RunConfig {
        seed: take(&mut map, "seed", d.seed)?,
        steps: take(&mut map, "steps", d.steps)?,
        batch_size: take(&mut map, "batch_size", d.batch_size)?,
        peak_lr: take(&mut map, "peak_lr", d.peak_lr)?,
        warmup_steps: take(&mut map, "warmup_steps", d.warmup_steps)?,
        alpha: take(&mut map, "alpha", d.alpha)?,
        r2l_weight: take(&mut map, "r2l_weight", d.r2l_weight)?,
        label_smoothing: take(&mut map, "label_smoothing", d.label_smoothing)?,
        rescore_ctc_weight: take(&mut map, "rescore_ctc_weight", d.rescore_ctc_weight)?,
        grad_clip: take(&mut map, "grad_clip", d.grad_clip)?,
        branches,
        use_pos_enc: take(&mut map, "use_pos_enc", d.use_pos_enc)?,
        input_dim: take(&mut map, "input_dim", d.input_dim)?,
        model_dim: take(&mut map, "model_dim", d.model_dim)?,
        heads: take(&mut map, "heads", d.heads)?,
        encoder_blocks: take(&mut map, "encoder_blocks", d.encoder_blocks)?,
        ffn_dim: take(&mut map, "ffn_dim", d.ffn_dim)?,
        depthwise_kernel: take(&mut map, "depthwise_kernel", d.depthwise_kernel)?,
        dropout: take(&mut map, "dropout", d.dropout)?,
        decoder_blocks_l2r: take(&mut map, "decoder_blocks_l2r", d.decoder_blocks_l2r)?,
        decoder_blocks_r2l: take(&mut map, "decoder_blocks_r2l", d.decoder_blocks_r2l)?,
        vocab_size: take(&mut map, "vocab_size", d.vocab_size)?,
        checkpoint_interval: take(&mut map, "checkpoint_interval", d.checkpoint_interval)?,
    };
    if let Some(key) = map.keys().next() {
        return Err(HydraError::Config(format!("unknown config key `{key}`")));
    }
    Ok(cfg)
}

pub fn run_config_to_string(cfg: &RunConfig) -> String {
    let mut s = String::new();
    writeln!(s, "format_version = {CONFIG_FORMAT_VERSION}").unwrap();
    writeln!(s, "seed = {}", cfg.seed).unwrap();
    writeln!(s, "steps = {}", cfg.steps).unwrap();
    writeln!(s, "batch_size = {}", cfg.batch_size).unwrap();
    writeln!(s, "peak_lr = {:?}", cfg.peak_lr).unwrap();
    writeln!(s, "warmup_steps = {}", cfg.warmup_steps).unwrap();
    writeln!(s, "alpha = {:?}", cfg.alpha).unwrap();
    writeln!(s, "r2l_weight = {:?}", cfg.r2l_weight).unwrap();
    writeln!(s, "label_smoothing = {:?}", cfg.label_smoothing).unwrap();
    writeln!(s, "rescore_ctc_weight = {:?}", cfg.rescore_ctc_weight).unwrap();
    writeln!(s, "grad_clip = {:?}", cfg.grad_clip).unwrap();
    let branches: Vec<String> = cfg.branches.iter().map(|b| b.to_string()).collect();
    writeln!(s, "branches = {}", branches.join(",")).unwrap();
    writeln!(s, "use_pos_enc = {}", cfg.use_pos_enc).unwrap();
    writeln!(s, "input_dim = {}", cfg.input_dim).unwrap();
    writeln!(s, "model_dim = {}", cfg.model_dim).unwrap();
    writeln!(s, "heads = {}", cfg.heads).unwrap();
    writeln!(s, "encoder_blocks = {}", cfg.encoder_blocks).unwrap();
    writeln!(s, "ffn_dim = {}", cfg.ffn_dim).unwrap();
    writeln!(s, "depthwise_kernel = {}", cfg.depthwise_kernel).unwrap();
    writeln!(s, "dropout = {:?}", cfg.dropout).unwrap();
    writeln!(s, "decoder_blocks_l2r = {}", cfg.decoder_blocks_l2r).unwrap();
    writeln!(s, "decoder_blocks_r2l = {}", cfg.decoder_blocks_r2l).unwrap();
    writeln!(s, "vocab_size = {}", cfg.vocab_size).unwrap();
    writeln!(s, "checkpoint_interval = {}", cfg.checkpoint_interval).unwrap();
    s
}

/// An initialization plan file: the run config it applies to, a seed for
/// scratch parameters, and a source per part. Checkpoint paths are resolved
/// relative to the plan file's directory.
#[derive(Clone, Debug)]
pub struct PlanFile {
    pub config_path: PathBuf,
    pub seed: u64,
    pub plan: InitPlan,
}

pub fn parse_plan_file(text: &str, plan_dir: &Path) -> Result<PlanFile> {
    let mut map = parse_kv(text)?;
    let version: u64 = take(&mut map, "format_version", 1)?;
    if version != 1 {
        return Err(HydraError::Config(format!("plan format_version {version}, expected 1")));
    }
    let config_rel = map
        .remove("config")
        .ok_or_else(|| HydraError::Config("plan file missing `config`".to_string()))?;
    let seed: u64 = take(&mut map, "seed", 42)?;
    let mut plan = InitPlan {
        branch_sources: BTreeMap::new(),
        encoder_decoder: InitSource::Scratch,
    };
    if let Some(v) = map.remove("encoder_decoder") {
        plan.encoder_decoder = InitSource::parse(&v, plan_dir);
    }
    let keys: Vec<String> = map.keys().cloned().collect();
    for key in keys {
        if let Some(factor) = key.strip_prefix("sub") {
            let factor: usize = factor
                .parse()
                .map_err(|_| HydraError::Config(format!("bad plan key `{key}`")))?;
            let v = map.remove(&key).unwrap();
            plan.branch_sources.insert(factor, InitSource::parse(&v, plan_dir));
        } else {
            return Err(HydraError::Config(format!("unknown plan key `{key}`")));
        }
    }
    Ok(PlanFile { config_path: plan_dir.join(config_rel), seed, plan })
}
