//! Initialization plans: per-branch and encoder/decoder weight transfer
//! from single-rate checkpoints, with everything unspecified seeded from
//! scratch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::checkpoint::load_checkpoint;
use crate::error::{HydraError, Result};
use crate::frontend::FrontendConfig;
use crate::model::{DecoderConfig, EncoderConfig, ModelState};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum InitSource {
    #[default]
    Scratch,
    Checkpoint(PathBuf),
}

impl InitSource {
    pub fn parse(s: &str, base: &Path) -> InitSource {
        if s == "scratch" {
            InitSource::Scratch
        } else {
            InitSource::Checkpoint(base.join(s))
        }
    }
}

/// Where each subsampling branch and the shared encoder/decoder stack come
/// from. Branches absent from the map start from scratch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InitPlan {
    pub branch_sources: BTreeMap<usize, InitSource>,
    pub encoder_decoder: InitSource,
}

fn copy_prefixed(
    target: &mut ModelState,
    source: &ModelState,
    prefixes: &[String],
    what: &str,
) -> Result<usize> {
    let names: Vec<String> = target
        .param_names()
        .iter()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .map(|s| s.to_string())
        .collect();
    if names.is_empty() {
        return Err(HydraError::Transfer(format!("{what}: no parameters match {prefixes:?}")));
    }
    for name in &names {
        let src = source.param(name).map_err(|_| {
            HydraError::Transfer(format!("{what}: source checkpoint lacks `{name}`"))
        })?;
        let dst = target.param_mut(name)?;
        if src.shape != dst.shape {
            return Err(HydraError::Transfer(format!(
                "{what}: `{name}` is {:?} in the source but {:?} here",
                src.shape, dst.shape
            )));
        }
        dst.data = src.data.clone();
    }
    Ok(names.len())
}

/// Realizes an initialization plan: a fresh seeded model, then per-branch
/// conv stacks and/or the whole shared stack (encoder, decoder, projection
/// heads) overwritten from checkpoints.
pub fn init_model(
    plan: &InitPlan,
    frontend: FrontendConfig,
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    seed: u64,
) -> Result<ModelState> {
    let factors = frontend.factors();
    for factor in plan.branch_sources.keys() {
        if !factors.contains(factor) {
            return Err(HydraError::Transfer(format!(
                "plan references branch {factor}, model has {factors:?}"
            )));
        }
    }
    let mut model = ModelState::init(frontend, encoder, decoder, seed)?;

    for (factor, source) in &plan.branch_sources {
        if let InitSource::Checkpoint(path) = source {
            let ckpt = load_checkpoint(path)?;
            copy_prefixed(
                &mut model,
                &ckpt.state,
                &[format!("frontend.sub{factor}.")],
                &format!("branch {factor}"),
            )?;
        }
    }
    if let InitSource::Checkpoint(path) = &plan.encoder_decoder {
        let ckpt = load_checkpoint(path)?;
        copy_prefixed(
            &mut model,
            &ckpt.state,
            &["encoder.".to_string(), "decoder.".to_string(), "heads.".to_string()],
            "encoder+decoder",
        )?;
    }
    Ok(model)
}
