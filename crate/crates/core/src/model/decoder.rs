//! Bidirectional Transformer decoder: two independent block stacks over a
//! shared token embedding and output projection. The right-to-left stack
//! consumes reversed targets; the two logit streams are only combined in
//! losses and rescoring.

use crate::error::{HydraError, Result};
use crate::model::{multi_head_attention, BoundParams, DecoderConfig};
use crate::tensor::{embedding, sinusoid_table, AttnMask, Tensor};
use crate::tokens::{sos_id, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
}

impl Direction {
    fn prefix(self) -> &'static str {
        match self {
            Direction::LeftToRight => "decoder.l2r",
            Direction::RightToLeft => "decoder.r2l",
        }
    }

    fn blocks(self, cfg: &DecoderConfig) -> usize {
        match self {
            Direction::LeftToRight => cfg.num_blocks_l2r,
            Direction::RightToLeft => cfg.num_blocks_r2l,
        }
    }
}

/// Teacher-forced decoding: feeds sos followed by the (possibly reversed)
/// target through the chosen stack with a causal self-attention mask and
/// cross-attention restricted to valid encoder frames. Returns next-token
/// logits (B, U_max+1, V); rows past an utterance's own target length are
/// padding and must be ignored by the caller.
pub fn decode_step(
    params: &BoundParams,
    cfg: &DecoderConfig,
    c: &Tensor,
    lengths: &[usize],
    targets: &[TokenSeq],
    direction: Direction,
) -> Result<Tensor> {
    let csh = c.shape();
    if csh.len() != 3 || csh[0] != targets.len() || csh[0] != lengths.len() {
        return Err(HydraError::Dimension(format!(
            "decode_step: encoder output {:?} vs {} targets / {} lengths",
            csh,
            targets.len(),
            lengths.len()
        )));
    }
    let (b, t_enc, d) = (csh[0], csh[1], csh[2]);
    let v = cfg.vocab_size;
    for seq in targets {
        for &id in seq.ids() {
            if id >= v {
                return Err(HydraError::Vocab { id, vocab: v });
            }
        }
    }
    let u_max = targets.iter().map(|t| t.len()).max().unwrap_or(0);
    let rows = u_max + 1;

    // Input ids: sos then the target (reversed for the r2l stack), padded
    // with eos. Padded rows sit after every real position; the causal mask
    // keeps them from reaching valid rows.
    let pad = crate::tokens::eos_id(v);
    let mut ids = Vec::with_capacity(b * rows);
    for seq in targets {
        let ordered = match direction {
            Direction::LeftToRight => seq.clone(),
            Direction::RightToLeft => seq.reversed(),
        };
        ids.push(sos_id(v));
        ids.extend_from_slice(ordered.ids());
        ids.resize(ids.len() + (u_max - ordered.len()), pad);
    }

    let table = params.get("decoder.embed.weight")?;
    let emb = embedding(&ids, &[b, rows], &table)?;
    let pe = sinusoid_table(rows, d);
    let mut tiled = Vec::with_capacity(b * rows * d);
    for _ in 0..b {
        tiled.extend_from_slice(&pe);
    }
    let pe = Tensor::constant(&[b, rows, d], tiled)?;
    let mut x = emb.scale((d as f64).sqrt())?.add(&pe)?;

    let causal = AttnMask::causal(rows);
    let cross = AttnMask::key_lengths(lengths, t_enc);
    let stack = direction.prefix();
    for bi in 0..direction.blocks(cfg) {
        let p = format!("{stack}.block{bi}");

        let h = norm(params, &format!("{p}.norm_self"), &x)?;
        let h = multi_head_attention(params, &format!("{p}.self_attn"), &h, &h, cfg.heads, Some(&causal))?;
        x = x.add(&h)?;

        let h = norm(params, &format!("{p}.norm_cross"), &x)?;
        let h = multi_head_attention(params, &format!("{p}.cross_attn"), &h, c, cfg.heads, Some(&cross))?;
        x = x.add(&h)?;

        let h = norm(params, &format!("{p}.norm_ffn"), &x)?;
        let h = h
            .linear(
                &params.get(&format!("{p}.ffn.linear1.weight"))?,
                &params.get(&format!("{p}.ffn.linear1.bias"))?,
            )?
            .relu()?
            .linear(
                &params.get(&format!("{p}.ffn.linear2.weight"))?,
                &params.get(&format!("{p}.ffn.linear2.bias"))?,
            )?;
        x = x.add(&h)?;
    }
    let x = norm(params, &format!("{stack}.norm"), &x)?;
    x.linear(&params.get("decoder.out.weight")?, &params.get("decoder.out.bias")?)
}

fn norm(params: &BoundParams, prefix: &str, x: &Tensor) -> Result<Tensor> {
    x.layer_norm(
        &params.get(&format!("{prefix}.gain"))?,
        &params.get(&format!("{prefix}.offset"))?,
    )
}
