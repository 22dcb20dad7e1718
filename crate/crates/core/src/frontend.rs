//! Multi-branch convolutional subsampling frontend.
//!
//! Each branch is a stack of strided valid 2-D convolutions with ReLU,
//! followed by a linear projection to the model width, an optional additive
//! sinusoidal position encoding, and a LayerNorm. Branch factor n reduces T
//! to within a few frames of floor(T/n).

use crate::error::{HydraError, Result};
use crate::model::BoundParams;
use crate::tensor::{conv2d, sinusoid_table, Tensor};

/// One convolution layer of a branch. Kernels obey kernel = 2*stride - 1 on
/// both axes; frequency strides mirror time strides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel_t: usize,
    pub kernel_f: usize,
    pub stride_t: usize,
    pub stride_f: usize,
    pub out_channels: usize,
}

/// Pipeline description for one subsampling factor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub factor: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub model_dim: usize,
    pub input_dim: usize,
}

pub const SUPPORTED_FACTORS: [usize; 3] = [4, 6, 8];

/// Builds the stride layout for a supported factor: 4 -> strides [2,2],
/// 6 -> [2,3], 8 -> [2,2,2]; every layer outputs `model_dim` channels.
pub fn build_branch(factor: usize, model_dim: usize, input_dim: usize) -> Result<BranchSpec> {
    let strides: &[usize] = match factor {
        4 => &[2, 2],
        6 => &[2, 3],
        8 => &[2, 2, 2],
        other => {
            return Err(HydraError::Config(format!(
                "unsupported subsampling factor {other} (supported: 4, 6, 8)"
            )))
        }
    };
    let layers = strides
        .iter()
        .map(|&s| ConvLayerSpec {
            kernel_t: 2 * s - 1,
            kernel_f: 2 * s - 1,
            stride_t: s,
            stride_f: s,
            out_channels: model_dim,
        })
        .collect();
    let spec = BranchSpec { factor, layers, model_dim, input_dim };
    debug_assert_eq!(
        spec.layers.iter().map(|l| l.stride_t).product::<usize>(),
        factor
    );
    Ok(spec)
}

impl BranchSpec {
    /// Frames remaining after the conv stack, or TooShort if any layer would
    /// see fewer frames than its kernel.
    pub fn subsampled_length(&self, frames: usize) -> Result<usize> {
        let mut len = frames;
        for layer in &self.layers {
            if len < layer.kernel_t {
                return Err(HydraError::TooShort(format!(
                    "{len} frames into kernel {} of branch {}",
                    layer.kernel_t, self.factor
                )));
            }
            len = (len - layer.kernel_t) / layer.stride_t + 1;
        }
        Ok(len)
    }

    /// Frequency bins after the conv stack, from the input feature width.
    pub fn final_freq_bins(&self) -> Result<usize> {
        let mut f = self.input_dim;
        for layer in &self.layers {
            if f < layer.kernel_f {
                return Err(HydraError::Config(format!(
                    "input dim {} too narrow for branch {} conv stack",
                    self.input_dim, self.factor
                )));
            }
            f = (f - layer.kernel_f) / layer.stride_f + 1;
        }
        Ok(f)
    }

    pub fn param_prefix(&self) -> String {
        format!("frontend.sub{}", self.factor)
    }
}

/// Frontend configuration: one spec per factor, ascending and unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrontendConfig {
    pub branches: Vec<BranchSpec>,
    pub use_pos_enc: bool,
    pub input_dim: usize,
    pub model_dim: usize,
}

impl FrontendConfig {
    pub fn new(factors: &[usize], use_pos_enc: bool, input_dim: usize, model_dim: usize) -> Result<Self> {
        if factors.is_empty() {
            return Err(HydraError::Config("at least one branch required".to_string()));
        }
        if factors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HydraError::Config(format!(
                "branch factors must be unique and ascending, got {factors:?}"
            )));
        }
        let branches = factors
            .iter()
            .map(|&f| build_branch(f, model_dim, input_dim))
            .collect::<Result<Vec<_>>>()?;
        for b in &branches {
            b.final_freq_bins()?;
        }
        Ok(FrontendConfig { branches, use_pos_enc, input_dim, model_dim })
    }

    pub fn factors(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.factor).collect()
    }

    pub fn branch(&self, factor: usize) -> Result<&BranchSpec> {
        self.branches
            .iter()
            .find(|b| b.factor == factor)
            .ok_or_else(|| HydraError::Config(format!("no branch with factor {factor}")))
    }
}

/// Padded acoustic features (B, T, I) with per-utterance frame counts.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub features: Tensor,
    pub lengths: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(features: Tensor, lengths: Vec<usize>) -> Result<Self> {
        let sh = features.shape();
        if sh.len() != 3 {
            return Err(HydraError::Dimension(format!(
                "feature batch must be (B, T, I), got {sh:?}"
            )));
        }
        if lengths.len() != sh[0] {
            return Err(HydraError::Dimension(format!(
                "{} lengths for batch of {}",
                lengths.len(),
                sh[0]
            )));
        }
        if lengths.iter().any(|&l| l == 0 || l > sh[1]) {
            return Err(HydraError::Dimension(format!(
                "lengths {:?} outside 1..={}",
                lengths, sh[1]
            )));
        }
        Ok(FeatureBatch { features, lengths })
    }

    pub fn batch_size(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Adds the scaled sinusoidal position encoding: z * sqrt(D) + PE.
pub fn pos_enc(z: &Tensor) -> Result<Tensor> {
    let sh = z.shape();
    if sh.len() != 3 {
        return Err(HydraError::Dimension(format!("pos_enc expects (B, T, D), got {sh:?}")));
    }
    let (b, t, d) = (sh[0], sh[1], sh[2]);
    let table = sinusoid_table(t, d);
    let mut tiled = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        tiled.extend_from_slice(&table);
    }
    let pe = Tensor::constant(&[b, t, d], tiled)?;
    z.scale((d as f64).sqrt())?.add(&pe)
}

/// Runs one branch over a batch: conv stack with ReLU, flatten channels x
/// freq, linear to D, optional position encoding, LayerNorm. Returns the
/// embedding (B, T', D) and the subsampled per-utterance lengths.
pub fn frontend_forward(
    params: &BoundParams,
    spec: &BranchSpec,
    batch: &FeatureBatch,
    use_pos_enc: bool,
) -> Result<(Tensor, Vec<usize>)> {
    let lengths_out = batch
        .lengths
        .iter()
        .map(|&l| spec.subsampled_length(l))
        .collect::<Result<Vec<usize>>>()?;

    let sh = batch.features.shape();
    let (b, t, i) = (sh[0], sh[1], sh[2]);
    let prefix = spec.param_prefix();

    // (B, T, I) -> (B, 1, T, I)
    let mut x = batch.features.reshape(&[b, 1, t, i])?;
    for (li, layer) in spec.layers.iter().enumerate() {
        let w = params.get(&format!("{prefix}.conv{li}.weight"))?;
        let bset = params.get(&format!("{prefix}.conv{li}.bias"))?;
        x = conv2d(&x, &w, &bset, layer.stride_t, layer.stride_f)?.relu()?;
    }

    // (B, C, T', F') -> (B, T', C * F')
    let csh = x.shape().to_vec();
    let (ch, tp, fp) = (csh[1], csh[2], csh[3]);
    let x = x.swap_axes(1, 2)?.reshape(&[b, tp, ch * fp])?;

    let w = params.get(&format!("{prefix}.linear.weight"))?;
    let bias = params.get(&format!("{prefix}.linear.bias"))?;
    let mut z = x.linear(&w, &bias)?;

    if use_pos_enc {
        z = pos_enc(&z)?;
    }

    let gain = params.get(&format!("{prefix}.norm.gain"))?;
    let offset = params.get(&format!("{prefix}.norm.offset"))?;
    let o = z.layer_norm(&gain, &offset)?;
    Ok((o, lengths_out))
}
