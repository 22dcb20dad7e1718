//! Real-time-factor measurement: frontend + encoder + CTC greedy over a
//! manifest, single-threaded, median of repeated runs.

use std::time::Instant;

use crate::data::{Dataset, Utterance, FEATURE_DIM, FRAME_SHIFT_SECONDS};
use crate::decoding::ctc_greedy;
use crate::error::{HydraError, Result};
use crate::eval::greedy_utterance;
use crate::frontend::{frontend_forward, FeatureBatch};
use crate::model::{ctc_head, encode, BoundParams, ModelState};
use crate::tensor::Tensor;
use crate::tokens::TokenSeq;

/// Streaming approximation window, in input frames.
pub const CHUNK_FRAMES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Full,
    Chunked,
}

impl std::fmt::Display for BenchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BenchMode::Full => write!(f, "full"),
            BenchMode::Chunked => write!(f, "chunked"),
        }
    }
}

/// Timing record for one branch/mode pair. Only reports taken with one
/// thread are comparable across runs.
#[derive(Clone, Debug)]
pub struct RtfReport {
    pub branch: usize,
    pub mode: BenchMode,
    pub utterances: usize,
    pub audio_seconds: f64,
    pub wall_seconds: f64,
    pub rtf: f64,
    pub threads: usize,
}

impl RtfReport {
    pub fn comparable(&self) -> bool {
        self.threads == 1
    }

    pub fn summary_line(&self) -> String {
        format!(
            "branch={} mode={} utterances={} audio_s={:.3} wall_s={:.4} rtf={:.6} threads={}",
            self.branch, self.mode, self.utterances, self.audio_seconds, self.wall_seconds,
            self.rtf, self.threads
        )
    }
}

/// Fixed 64-frame windows processed independently, greedy outputs
/// concatenated. Windows too short for the branch are skipped.
fn chunked_greedy(
    params: &BoundParams,
    model: &ModelState,
    branch: usize,
    utt: &Utterance,
) -> Result<TokenSeq> {
    let spec = model.frontend.branch(branch)?;
    let v = model.decoder.vocab_size;
    let mut ids = Vec::new();
    let mut start = 0usize;
    while start < utt.frames {
        let end = (start + CHUNK_FRAMES).min(utt.frames);
        let frames = end - start;
        if spec.subsampled_length(frames).is_err() {
            break;
        }
        let features = FeatureBatch::new(
            Tensor::constant(
                &[1, frames, FEATURE_DIM],
                utt.features[start * FEATURE_DIM..end * FEATURE_DIM].to_vec(),
            )?,
            vec![frames],
        )?;
        let (o, lengths) = frontend_forward(params, spec, &features, model.frontend.use_pos_enc)?;
        let c = encode(params, &model.encoder, &o, &lengths)?;
        let lp = ctc_head(params, &c)?.reshape(&[lengths[0], v])?;
        ids.extend_from_slice(ctc_greedy(&lp)?.ids());
        start = end;
    }
    Ok(TokenSeq::from_raw(ids))
}

/// Times decoding of the whole manifest; reports the median RTF over
/// `repetitions` timed passes after one untimed warmup pass.
pub fn bench_rtf(
    model: &ModelState,
    branch: usize,
    dataset: &Dataset,
    mode: BenchMode,
    repetitions: usize,
) -> Result<RtfReport> {
    if dataset.utterances.is_empty() {
        return Err(HydraError::Usage("benchmark over an empty manifest".to_string()));
    }
    if repetitions == 0 {
        return Err(HydraError::Usage("repetitions must be >= 1".to_string()));
    }
    let audio_seconds = dataset.total_frames() as f64 * FRAME_SHIFT_SECONDS;
    let params = model.bind(false);

    let one_pass = |params: &BoundParams| -> Result<()> {
        for utt in &dataset.utterances {
            match mode {
                BenchMode::Full => {
                    greedy_utterance(params, model, branch, utt)?;
                }
                BenchMode::Chunked => {
                    chunked_greedy(params, model, branch, utt)?;
                }
            }
        }
        Ok(())
    };

    one_pass(&params)?; // warmup, untimed

    let mut walls = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        one_pass(&params)?;
        walls.push(t0.elapsed().as_secs_f64());
    }
    walls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let wall_seconds = walls[walls.len() / 2];

    Ok(RtfReport {
        branch,
        mode,
        utterances: dataset.utterances.len(),
        audio_seconds,
        wall_seconds,
        rtf: wall_seconds / audio_seconds,
        threads: 1,
    })
}
