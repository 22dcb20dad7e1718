//! Dataset handling: the manifest + raw-feature file layout and the
//! synthetic data generator used for desk-scale experiments.
//!
//! Feature files hold raw little-endian f32 frames of fixed width 80;
//! transcripts live in the manifest as token ids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HydraError, Result};
use crate::tokens::{eos_id, sos_id, TokenSeq, BLANK_ID, MIN_VOCAB};

pub const FEATURE_DIM: usize = 80;
/// Frame shift assumed for audio-seconds accounting, in seconds.
pub const FRAME_SHIFT_SECONDS: f64 = 0.01;

const MANIFEST_MAGIC: &str = "hydraformer-manifest 1";

#[derive(Clone, Debug)]
pub struct Utterance {
    /// Feature file path relative to the manifest, or a synthetic id.
    pub path: String,
    pub frames: usize,
    /// Row-major (frames, FEATURE_DIM) values.
    pub features: Vec<f64>,
    pub target: TokenSeq,
}

/// A vocabulary table plus fully loaded utterances.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.frames).sum()
    }

    pub fn audio_seconds(&self) -> f64 {
        self.total_frames() as f64 * FRAME_SHIFT_SECONDS
    }
}

/// Default vocabulary entries: blank, single letters (then t10, t11, ...),
/// sos, eos.
pub fn default_vocab(vocab_size: usize) -> Vec<String> {
    let mut vocab = Vec::with_capacity(vocab_size);
    vocab.push("<blank>".to_string());
    for i in 0..vocab_size - 3 {
        if i < 26 {
            vocab.push(((b'a' + i as u8) as char).to_string());
        } else {
            vocab.push(format!("t{i}"));
        }
    }
    vocab.push("<sos>".to_string());
    vocab.push("<eos>".to_string());
    vocab
}

/// Synthetic corpus: each content token owns a fixed random 80-dim prototype
/// frame; an utterance tiles each transcript token `frames_per_token` times
/// and adds Gaussian noise. Transcripts are 4..=8 tokens with no adjacent
/// repeats. Deterministic in the seed; feature values are quantized to f32
/// so in-memory data matches a write/load round trip bit for bit.
pub fn gen_synthetic(
    num_utts: usize,
    vocab_size: usize,
    frames_per_token: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if vocab_size < MIN_VOCAB {
        return Err(HydraError::Config(format!(
            "vocab size {vocab_size} < {MIN_VOCAB} (blank/sos/eos plus one content token)"
        )));
    }
    if frames_per_token < 9 {
        return Err(HydraError::Config(format!(
            "frames_per_token {frames_per_token} < 9: factor-8 subsampling would starve tokens of frames"
        )));
    }
    let content = vocab_size - 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // token id 1..=content -> prototype frame
    let prototypes: Vec<Vec<f64>> = (0..content)
        .map(|_| (0..FEATURE_DIM).map(|_| quant(rng.random_range(-1.0..1.0))).collect())
        .collect();

    let mut utterances = Vec::with_capacity(num_utts);
    for n in 0..num_utts {
        let len = rng.random_range(4..=8usize);
        let mut ids = Vec::with_capacity(len);
        for _ in 0..len {
            loop {
                let id = rng.random_range(1..=content);
                if ids.last() != Some(&id) {
                    ids.push(id);
                    break;
                }
            }
        }
        let frames = len * frames_per_token;
        let mut features = Vec::with_capacity(frames * FEATURE_DIM);
        for &id in &ids {
            let proto = &prototypes[id - 1];
            for _ in 0..frames_per_token {
                for &p in proto {
                    let noisy = p + noise_std * gaussian(&mut rng);
                    features.push(quant(noisy));
                }
            }
        }
        utterances.push(Utterance {
            path: format!("features/utt{n:04}.f32"),
            frames,
            features,
            target: TokenSeq::new(ids, vocab_size)?,
        });
    }
    Ok(Dataset { vocab: default_vocab(vocab_size), utterances })
}

fn quant(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Writes feature files plus `manifest.txt` under `dir`; returns the
/// manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("features"))?;
    let mut manifest = String::new();
    writeln!(manifest, "{MANIFEST_MAGIC}").unwrap();
    writeln!(manifest, "vocab {}", dataset.vocab.len()).unwrap();
    for (id, tok) in dataset.vocab.iter().enumerate() {
        writeln!(manifest, "token {id} {tok}").unwrap();
    }
    for utt in &dataset.utterances {
        let mut bytes = Vec::with_capacity(utt.features.len() * 4);
        for &v in &utt.features {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let path = dir.join(&utt.path);
        fs::write(&path, bytes)?;
        let ids: Vec<String> = utt.target.ids().iter().map(|i| i.to_string()).collect();
        writeln!(manifest, "utt {} {} {}", utt.path, utt.frames, ids.join(" ")).unwrap();
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Loads a manifest and every referenced feature file. A feature file whose
/// size disagrees with the declared frame count is rejected outright.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| HydraError::Data(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim() == MANIFEST_MAGIC => {}
        other => {
            return Err(HydraError::Data(format!(
                "bad manifest header {other:?}, expected `{MANIFEST_MAGIC}`"
            )))
        }
    }
    let vocab_line = lines
        .next()
        .ok_or_else(|| HydraError::Data("manifest missing vocab line".to_string()))?;
    let vocab_size: usize = vocab_line
        .strip_prefix("vocab ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| HydraError::Data(format!("bad vocab line `{vocab_line}`")))?;
    if vocab_size < MIN_VOCAB {
        return Err(HydraError::Data(format!("vocab size {vocab_size} too small")));
    }

    let mut vocab = vec![String::new(); vocab_size];
    let mut seen = vec![false; vocab_size];
    let mut utterances = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("token") => {
                let id: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| HydraError::Data(format!("bad token line `{line}`")))?;
                let tok = parts
                    .next()
                    .ok_or_else(|| HydraError::Data(format!("bad token line `{line}`")))?;
                if id >= vocab_size {
                    return Err(HydraError::Data(format!("token id {id} >= vocab {vocab_size}")));
                }
                vocab[id] = tok.to_string();
                seen[id] = true;
            }
            Some("utt") => {
                let rel = parts
                    .next()
                    .ok_or_else(|| HydraError::Data(format!("bad utt line `{line}`")))?;
                let frames: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| HydraError::Data(format!("bad utt line `{line}`")))?;
                let ids = parts
                    .map(|s| {
                        s.parse::<usize>()
                            .map_err(|_| HydraError::Data(format!("bad token id `{s}` in `{line}`")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                for &id in &ids {
                    if id >= vocab_size || id == BLANK_ID || id == sos_id(vocab_size) || id == eos_id(vocab_size)
                    {
                        return Err(HydraError::Data(format!(
                            "utt `{rel}`: transcript id {id} is reserved or out of range"
                        )));
                    }
                }
                let full = base.join(rel);
                let bytes = fs::read(&full)
                    .map_err(|e| HydraError::Data(format!("{}: {e}", full.display())))?;
                let expect = frames * FEATURE_DIM * 4;
                if bytes.len() != expect {
                    return Err(HydraError::Data(format!(
                        "{}: {} bytes but manifest declares {} frames ({} bytes)",
                        full.display(),
                        bytes.len(),
                        frames,
                        expect
                    )));
                }
                let features: Vec<f64> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                utterances.push(Utterance {
                    path: rel.to_string(),
                    frames,
                    features,
                    target: TokenSeq::from_raw(ids),
                });
            }
            other => {
                return Err(HydraError::Data(format!("unknown manifest entry {other:?}")));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(HydraError::Data("manifest vocab table is incomplete".to_string()));
    }
    Ok(Dataset { vocab, utterances })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(4, 8, 10, 0.05, 77).unwrap();
        let b = gen_synthetic(4, 8, 10, 0.05, 77).unwrap();
        for (ua, ub) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(ua.features, ub.features);
            assert_eq!(ua.target, ub.target);
        }
        let c = gen_synthetic(4, 8, 10, 0.05, 78).unwrap();
        assert_ne!(a.utterances[0].features, c.utterances[0].features);
    }

    #[test]
    fn zero_noise_tiles_prototypes_exactly() {
        let d = gen_synthetic(2, 8, 10, 0.0, 5).unwrap();
        for utt in &d.utterances {
            for (ti, _) in utt.target.ids().iter().enumerate() {
                let tile = &utt.features[ti * 10 * FEATURE_DIM..(ti * 10 + 1) * FEATURE_DIM];
                for rep in 1..10 {
                    let other = &utt.features
                        [(ti * 10 + rep) * FEATURE_DIM..(ti * 10 + rep + 1) * FEATURE_DIM];
                    assert_eq!(tile, other);
                }
            }
        }
    }

    #[test]
    fn rejects_unworkable_parameters() {
        assert!(gen_synthetic(1, 3, 10, 0.0, 0).is_err());
        assert!(gen_synthetic(1, 8, 8, 0.0, 0).is_err());
    }

    #[test]
    fn write_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_synthetic(3, 8, 10, 0.05, 9).unwrap();
        let manifest = write_dataset(&d, dir.path()).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.vocab, d.vocab);
        for (a, b) in d.utterances.iter().zip(&loaded.utterances) {
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.features, b.features);
            assert_eq!(a.target, b.target);
        }
    }

    #[test]
    fn frame_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_synthetic(1, 8, 10, 0.0, 1).unwrap();
        let manifest = write_dataset(&d, dir.path()).unwrap();
        let feat = dir.path().join(&d.utterances[0].path);
        let mut bytes = fs::read(&feat).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&feat, bytes).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(HydraError::Data(_))));
    }
}
