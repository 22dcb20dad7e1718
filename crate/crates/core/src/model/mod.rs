//! Shared encoder/decoder model state: named parameters, deterministic
//! initialization, and graph binding for forward passes.

mod decoder;
mod encoder;

pub use decoder::{decode_step, Direction};
pub use encoder::{ctc_head, encode};

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HydraError, Result};
use crate::frontend::FrontendConfig;
use crate::tensor::{attention, AttnMask, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub depthwise_kernel: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(HydraError::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.depthwise_kernel < 3 || self.depthwise_kernel.is_multiple_of(2) {
            return Err(HydraError::Config(format!(
                "depthwise kernel {} must be odd and >= 3",
                self.depthwise_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HydraError::Config(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_blocks_l2r: usize,
    pub num_blocks_r2l: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(HydraError::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.vocab_size < crate::tokens::MIN_VOCAB {
            return Err(HydraError::Config(format!(
                "vocab size {} below minimum {}",
                self.vocab_size,
                crate::tokens::MIN_VOCAB
            )));
        }
        Ok(())
    }
}

/// One named parameter: shape, values, and how many optimizer updates it
/// has received.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub step_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InitKind {
    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    FanIn(usize),
    Zeros,
    Ones,
}

/// The full parameter layout implied by a configuration, in deterministic
/// order. Initialization, checkpoint validation and transfer all walk this.
fn schema(
    frontend: &FrontendConfig,
    encoder: &EncoderConfig,
    decoder: &DecoderConfig,
) -> Result<Vec<(String, Vec<usize>, InitKind)>> {
    let d = frontend.model_dim;
    if encoder.model_dim != d || decoder.model_dim != d {
        return Err(HydraError::Config(format!(
            "model dims disagree: frontend {d}, encoder {}, decoder {}",
            encoder.model_dim, decoder.model_dim
        )));
    }
    let v = decoder.vocab_size;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: InitKind| {
        out.push((name, shape, kind));
    };

    for spec in &frontend.branches {
        let p = spec.param_prefix();
        let mut in_ch = 1usize;
        for (i, layer) in spec.layers.iter().enumerate() {
            let fan = in_ch * layer.kernel_t * layer.kernel_f;
            push(
                format!("{p}.conv{i}.weight"),
                vec![layer.out_channels, in_ch, layer.kernel_t, layer.kernel_f],
                InitKind::FanIn(fan),
            );
            push(format!("{p}.conv{i}.bias"), vec![layer.out_channels], InitKind::Zeros);
            in_ch = layer.out_channels;
        }
        let flat = d * spec.final_freq_bins()?;
        push(format!("{p}.linear.weight"), vec![d, flat], InitKind::FanIn(flat));
        push(format!("{p}.linear.bias"), vec![d], InitKind::Zeros);
        push(format!("{p}.norm.gain"), vec![d], InitKind::Ones);
        push(format!("{p}.norm.offset"), vec![d], InitKind::Zeros);
    }

    let norm = |push: &mut dyn FnMut(String, Vec<usize>, InitKind), p: String| {
        push(format!("{p}.gain"), vec![d], InitKind::Ones);
        push(format!("{p}.offset"), vec![d], InitKind::Zeros);
    };
    let proj = |push: &mut dyn FnMut(String, Vec<usize>, InitKind), p: String, o: usize, i: usize| {
        push(format!("{p}.weight"), vec![o, i], InitKind::FanIn(i));
        push(format!("{p}.bias"), vec![o], InitKind::Zeros);
    };

    for b in 0..encoder.num_blocks {
        let p = format!("encoder.block{b}");
        norm(&mut push, format!("{p}.norm_ffn1"));
        proj(&mut push, format!("{p}.ffn1.linear1"), encoder.ffn_dim, d);
        proj(&mut push, format!("{p}.ffn1.linear2"), d, encoder.ffn_dim);
        norm(&mut push, format!("{p}.norm_attn"));
        for part in ["q", "k", "v", "out"] {
            proj(&mut push, format!("{p}.attn.{part}"), d, d);
        }
        norm(&mut push, format!("{p}.norm_conv"));
        push(
            format!("{p}.conv.depthwise.weight"),
            vec![d, encoder.depthwise_kernel],
            InitKind::FanIn(encoder.depthwise_kernel),
        );
        push(format!("{p}.conv.depthwise.bias"), vec![d], InitKind::Zeros);
        proj(&mut push, format!("{p}.conv.pointwise"), d, d);
        norm(&mut push, format!("{p}.norm_ffn2"));
        proj(&mut push, format!("{p}.ffn2.linear1"), encoder.ffn_dim, d);
        proj(&mut push, format!("{p}.ffn2.linear2"), d, encoder.ffn_dim);
        norm(&mut push, format!("{p}.norm_out"));
    }

    push("decoder.embed.weight".to_string(), vec![v, d], InitKind::FanIn(d));
    for (dir, blocks) in [("l2r", decoder.num_blocks_l2r), ("r2l", decoder.num_blocks_r2l)] {
        for b in 0..blocks {
            let p = format!("decoder.{dir}.block{b}");
            norm(&mut push, format!("{p}.norm_self"));
            for part in ["q", "k", "v", "out"] {
                proj(&mut push, format!("{p}.self_attn.{part}"), d, d);
            }
            norm(&mut push, format!("{p}.norm_cross"));
            for part in ["q", "k", "v", "out"] {
                proj(&mut push, format!("{p}.cross_attn.{part}"), d, d);
            }
            norm(&mut push, format!("{p}.norm_ffn"));
            proj(&mut push, format!("{p}.ffn.linear1"), decoder.ffn_dim, d);
            proj(&mut push, format!("{p}.ffn.linear2"), d, decoder.ffn_dim);
        }
        norm(&mut push, format!("decoder.{dir}.norm"));
    }
    proj(&mut push, "decoder.out".to_string(), v, d);

    proj(&mut push, "heads.ctc".to_string(), v, d);

    Ok(out)
}

/// All parameters plus the configuration that shaped them. The unit of
/// checkpointing and transfer.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    params: BTreeMap<String, Parameter>,
}

impl ModelState {
    /// Fresh model, every parameter drawn deterministically from the seed in
    /// schema order.
    pub fn init(
        frontend: FrontendConfig,
        encoder: EncoderConfig,
        decoder: DecoderConfig,
        seed: u64,
    ) -> Result<ModelState> {
        encoder.validate()?;
        decoder.validate()?;
        let layout = schema(&frontend, &encoder, &decoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, kind) in layout {
            let n = shape.iter().product();
            let data = match kind {
                InitKind::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                InitKind::Zeros => vec![0.0; n],
                InitKind::Ones => vec![1.0; n],
            };
            params.insert(name.clone(), Parameter { name, shape, data, step_count: 0 });
        }
        Ok(ModelState { frontend, encoder, decoder, params })
    }

    /// Rebuilds a state from an explicit parameter map (checkpoint loading),
    /// validating it against the layout the configuration implies. Any
    /// missing, extra, or mis-shaped tensor is named in the error.
    pub fn from_parameters(
        frontend: FrontendConfig,
        encoder: EncoderConfig,
        decoder: DecoderConfig,
        params: BTreeMap<String, Parameter>,
    ) -> Result<ModelState> {
        encoder.validate()?;
        decoder.validate()?;
        let layout = schema(&frontend, &encoder, &decoder)?;
        if layout.len() != params.len() {
            let expected: std::collections::BTreeSet<&str> =
                layout.iter().map(|(n, _, _)| n.as_str()).collect();
            for name in params.keys() {
                if !expected.contains(name.as_str()) {
                    return Err(HydraError::Checkpoint(format!(
                        "unexpected tensor `{name}` for this configuration"
                    )));
                }
            }
        }
        for (name, shape, _) in &layout {
            let p = params.get(name).ok_or_else(|| {
                HydraError::Checkpoint(format!("missing tensor `{name}`"))
            })?;
            if &p.shape != shape {
                return Err(HydraError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    p.shape, shape
                )));
            }
            if p.data.len() != shape.iter().product::<usize>() {
                return Err(HydraError::Checkpoint(format!(
                    "tensor `{name}` holds {} values for shape {:?}",
                    p.data.len(),
                    shape
                )));
            }
        }
        Ok(ModelState { frontend, encoder, decoder, params })
    }

    pub fn param(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| HydraError::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| HydraError::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.keys().map(|s| s.as_str()).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Expected (name, shape) layout for this configuration.
    pub fn expected_layout(&self) -> Result<Vec<(String, Vec<usize>)>> {
        Ok(schema(&self.frontend, &self.encoder, &self.decoder)?
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect())
    }

    /// Binds parameters as graph leaves for a forward pass. `trainable`
    /// controls whether gradients are tracked.
    pub fn bind(&self, trainable: bool) -> BoundParams<'_> {
        BoundParams {
            state: self,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
            dropout: None,
        }
    }

    /// Training binding with dropout active at `rate` (when > 0), drawing
    /// masks from a dedicated deterministic stream.
    pub fn bind_train(&self, dropout_rate: f64, dropout_seed: u64) -> BoundParams<'_> {
        BoundParams {
            state: self,
            trainable: true,
            bound: RefCell::new(BTreeMap::new()),
            dropout: if dropout_rate > 0.0 {
                Some((dropout_rate, RefCell::new(ChaCha8Rng::seed_from_u64(dropout_seed))))
            } else {
                None
            },
        }
    }
}

/// Per-forward-pass view of a ModelState: each parameter becomes one graph
/// leaf, created on first use and shared by later uses in the same pass.
pub struct BoundParams<'a> {
    state: &'a ModelState,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Tensor>>,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'a> BoundParams<'a> {
    pub fn get(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self.state.param(name)?;
        let t = if self.trainable {
            Tensor::leaf(&p.shape, p.data.clone())?
        } else {
            Tensor::constant(&p.shape, p.data.clone())?
        };
        self.bound.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn state(&self) -> &'a ModelState {
        self.state
    }

    /// Gradients accumulated on bound leaves, in name order. Parameters the
    /// graph never touched are absent.
    pub fn gradients(&self) -> Vec<(String, Vec<f64>)> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, t)| t.grad().map(|g| (name.clone(), g)))
            .collect()
    }

    pub(crate) fn apply_dropout(&self, x: &Tensor) -> Result<Tensor> {
        match &self.dropout {
            None => Ok(x.clone()),
            Some((rate, rng)) => {
                let keep = 1.0 - rate;
                let mut rng = rng.borrow_mut();
                let mask: Vec<f64> = (0..x.numel())
                    .map(|_| if rng.random_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = Tensor::constant(x.shape(), mask)?;
                x.mul(&m)
            }
        }
    }
}

/// Multi-head attention sub-layer shared by the encoder and decoder: project
/// q/k/v, split into heads, attend, merge, project out.
pub(crate) fn multi_head_attention(
    params: &BoundParams,
    prefix: &str,
    query_in: &Tensor,
    kv_in: &Tensor,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<Tensor> {
    let qs = query_in.shape().to_vec();
    let ks = kv_in.shape().to_vec();
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    let dk = d / heads;

    let split = |x: &Tensor, t: usize| -> Result<Tensor> {
        x.reshape(&[b, t, heads, dk])?.swap_axes(1, 2)
    };

    let q = split(
        &query_in.linear(
            &params.get(&format!("{prefix}.q.weight"))?,
            &params.get(&format!("{prefix}.q.bias"))?,
        )?,
        tq,
    )?;
    let k = split(
        &kv_in.linear(
            &params.get(&format!("{prefix}.k.weight"))?,
            &params.get(&format!("{prefix}.k.bias"))?,
        )?,
        tk,
    )?;
    let v = split(
        &kv_in.linear(
            &params.get(&format!("{prefix}.v.weight"))?,
            &params.get(&format!("{prefix}.v.bias"))?,
        )?,
        tk,
    )?;

    let ctx = attention(&q, &k, &v, mask)?;
    let merged = ctx.swap_axes(1, 2)?.reshape(&[b, tq, d])?;
    merged.linear(
        &params.get(&format!("{prefix}.out.weight"))?,
        &params.get(&format!("{prefix}.out.bias"))?,
    )
}

/// Zeroes rows at or beyond each utterance's valid length.
pub(crate) fn zero_padded_rows(x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let sh = x.shape();
    let (b, t, d) = (sh[0], sh[1], sh[2]);
    let mut mask = vec![0.0; b * t * d];
    for (bi, &len) in lengths.iter().enumerate() {
        let upto = len.min(t);
        for v in mask.iter_mut().skip(bi * t * d).take(upto * d) {
            *v = 1.0;
        }
    }
    x.mul(&Tensor::constant(&[b, t, d], mask)?)
}
