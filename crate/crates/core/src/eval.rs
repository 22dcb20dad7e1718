//! Whole-pipeline inference helpers: per-utterance encoding, greedy and
//! rescored decoding over a dataset, and accuracy accounting.

use crate::data::{Dataset, Utterance, FEATURE_DIM};
use crate::decoding::{ctc_greedy, ctc_prefix_beam, rescore_nbest, token_accuracy};
use crate::error::Result;
use crate::frontend::{frontend_forward, FeatureBatch};
use crate::model::{ctc_head, encode, BoundParams, ModelState};
use crate::objectives::LossWeights;
use crate::tensor::Tensor;
use crate::tokens::TokenSeq;

/// Encoder output (1, T', D) and its frame count for one utterance.
pub fn encode_utterance(
    params: &BoundParams,
    model: &ModelState,
    branch: usize,
    utt: &Utterance,
) -> Result<(Tensor, usize)> {
    let spec = model.frontend.branch(branch)?;
    let features = FeatureBatch::new(
        Tensor::constant(&[1, utt.frames, FEATURE_DIM], utt.features.clone())?,
        vec![utt.frames],
    )?;
    let (o, lengths) = frontend_forward(params, spec, &features, model.frontend.use_pos_enc)?;
    let c = encode(params, &model.encoder, &o, &lengths)?;
    Ok((c, lengths[0]))
}

/// CTC greedy hypothesis for one utterance.
pub fn greedy_utterance(
    params: &BoundParams,
    model: &ModelState,
    branch: usize,
    utt: &Utterance,
) -> Result<TokenSeq> {
    let (c, len) = encode_utterance(params, model, branch, utt)?;
    let v = model.decoder.vocab_size;
    let lp = ctc_head(params, &c)?.reshape(&[len, v])?;
    ctc_greedy(&lp)
}

/// Prefix-beam n-best then attention rescoring for one utterance.
#[allow(clippy::too_many_arguments)]
pub fn rescore_utterance(
    params: &BoundParams,
    model: &ModelState,
    branch: usize,
    utt: &Utterance,
    beam: usize,
    weights: &LossWeights,
    ctc_weight: f64,
    length_normalize: bool,
) -> Result<TokenSeq> {
    let (c, len) = encode_utterance(params, model, branch, utt)?;
    let v = model.decoder.vocab_size;
    let lp = ctc_head(params, &c)?.reshape(&[len, v])?;
    let nbest = ctc_prefix_beam(&lp, beam)?;
    let rescored = rescore_nbest(
        params,
        &model.decoder,
        &c,
        len,
        &nbest,
        weights,
        ctc_weight,
        length_normalize,
    )?;
    Ok(rescored.entries.into_iter().next().unwrap().tokens)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Rescore { beam: usize, length_normalize: bool },
}

/// Decodes a whole dataset at one branch; returns hypotheses and the
/// micro-averaged token accuracy against the references.
pub fn decode_dataset(
    model: &ModelState,
    branch: usize,
    dataset: &Dataset,
    mode: DecodeMode,
    weights: &LossWeights,
    ctc_weight: f64,
) -> Result<(Vec<TokenSeq>, f64)> {
    let params = model.bind(false);
    let mut hyps = Vec::with_capacity(dataset.utterances.len());
    for utt in &dataset.utterances {
        let hyp = match mode {
            DecodeMode::Greedy => greedy_utterance(&params, model, branch, utt)?,
            DecodeMode::Rescore { beam, length_normalize } => rescore_utterance(
                &params,
                model,
                branch,
                utt,
                beam,
                weights,
                ctc_weight,
                length_normalize,
            )?,
        };
        hyps.push(hyp);
    }
    let acc = token_accuracy(
        hyps.iter()
            .zip(&dataset.utterances)
            .map(|(h, u)| (h.ids(), u.target.ids())),
    );
    Ok((hyps, acc))
}
