//! Self-describing checkpoint files: a text header carrying the full model
//! configuration, vocabulary and training step, then an indexed binary blob
//! of little-endian tensors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::data::default_vocab;
use crate::error::{HydraError, Result};
use crate::frontend::FrontendConfig;
use crate::model::{DecoderConfig, EncoderConfig, ModelState, Parameter};

const CKPT_MAGIC: &str = "hydraformer-ckpt 1";

/// A model plus the metadata that makes the file self-describing.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: ModelState,
    pub vocab: Vec<String>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(state: ModelState, vocab: Vec<String>, step: u64) -> Result<Self> {
        if vocab.len() != state.decoder.vocab_size {
            return Err(HydraError::Checkpoint(format!(
                "vocab table of {} entries vs model vocab {}",
                vocab.len(),
                state.decoder.vocab_size
            )));
        }
        Ok(Checkpoint { state, vocab, step })
    }

    pub fn with_default_vocab(state: ModelState, step: u64) -> Self {
        let vocab = default_vocab(state.decoder.vocab_size);
        Checkpoint { state, vocab, step }
    }
}

fn err(msg: impl Into<String>) -> HydraError {
    HydraError::Checkpoint(msg.into())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let state = &ckpt.state;
    let mut header = String::new();
    writeln!(header, "{CKPT_MAGIC}").unwrap();
    writeln!(header, "step = {}", ckpt.step).unwrap();
    let factors: Vec<String> = state.frontend.factors().iter().map(|f| f.to_string()).collect();
    writeln!(header, "branches = {}", factors.join(",")).unwrap();
    writeln!(header, "use_pos_enc = {}", state.frontend.use_pos_enc).unwrap();
    writeln!(header, "input_dim = {}", state.frontend.input_dim).unwrap();
    writeln!(header, "model_dim = {}", state.frontend.model_dim).unwrap();
    writeln!(header, "enc_blocks = {}", state.encoder.num_blocks).unwrap();
    writeln!(header, "enc_heads = {}", state.encoder.heads).unwrap();
    writeln!(header, "enc_ffn = {}", state.encoder.ffn_dim).unwrap();
    writeln!(header, "enc_kernel = {}", state.encoder.depthwise_kernel).unwrap();
    writeln!(header, "enc_dropout = {:?}", state.encoder.dropout).unwrap();
    writeln!(header, "dec_blocks_l2r = {}", state.decoder.num_blocks_l2r).unwrap();
    writeln!(header, "dec_blocks_r2l = {}", state.decoder.num_blocks_r2l).unwrap();
    writeln!(header, "dec_heads = {}", state.decoder.heads).unwrap();
    writeln!(header, "dec_ffn = {}", state.decoder.ffn_dim).unwrap();
    writeln!(header, "vocab_size = {}", state.decoder.vocab_size).unwrap();
    writeln!(header, "vocab = {}", ckpt.vocab.join(" ")).unwrap();

    let params: Vec<&Parameter> = state.params().collect();
    writeln!(header, "tensors = {}", params.len()).unwrap();
    for p in &params {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        writeln!(header, "{} f64 {} {}", p.name, p.step_count, dims.join(",")).unwrap();
    }
    writeln!(header, "data").unwrap();

    let mut bytes = header.into_bytes();
    for p in &params {
        for v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct HeaderKv(BTreeMap<String, String>);

impl HeaderKv {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| err(format!("header missing `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| err(format!("bad value for `{key}`")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    let data_marker = b"\ndata\n";
    let split = bytes
        .windows(data_marker.len())
        .position(|w| w == data_marker)
        .ok_or_else(|| err("missing data section"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| err("header is not UTF-8"))?;
    let blob = &bytes[split + data_marker.len()..];

    let mut lines = header.lines();
    match lines.next() {
        Some(l) if l.trim() == CKPT_MAGIC => {}
        other => {
            return Err(err(format!(
                "unsupported checkpoint version {other:?}, expected `{CKPT_MAGIC}`"
            )))
        }
    }

    let mut kv = BTreeMap::new();
    let mut index: Vec<(String, String, u64, Vec<usize>)> = Vec::new();
    let mut tensor_count: Option<usize> = None;
    for line in lines.by_ref() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some((k, v)) = line.split_once(" = ") {
            kv.insert(k.trim().to_string(), v.trim().to_string());
            if k.trim() == "tensors" {
                tensor_count =
                    Some(v.trim().parse().map_err(|_| err("bad tensor count"))?);
                break;
            }
        } else {
            return Err(err(format!("bad header line `{line}`")));
        }
    }
    let tensor_count = tensor_count.ok_or_else(|| err("header missing `tensors`"))?;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(err(format!("bad tensor index line `{line}`")));
        }
        let dims = parts[3]
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|_| err(format!("bad dims in `{line}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let step: u64 = parts[2].parse().map_err(|_| err(format!("bad step count in `{line}`")))?;
        index.push((parts[0].to_string(), parts[1].to_string(), step, dims));
    }
    if index.len() != tensor_count {
        return Err(err(format!(
            "tensor index has {} entries, header declares {tensor_count}",
            index.len()
        )));
    }

    let kv = HeaderKv(kv);
    let step: u64 = kv.parse("step")?;
    let factors = kv
        .get("branches")?
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| err("bad branches")))
        .collect::<Result<Vec<usize>>>()?;
    let frontend = FrontendConfig::new(
        &factors,
        kv.parse("use_pos_enc")?,
        kv.parse("input_dim")?,
        kv.parse("model_dim")?,
    )?;
    let encoder = EncoderConfig {
        num_blocks: kv.parse("enc_blocks")?,
        model_dim: kv.parse("model_dim")?,
        heads: kv.parse("enc_heads")?,
        ffn_dim: kv.parse("enc_ffn")?,
        depthwise_kernel: kv.parse("enc_kernel")?,
        dropout: kv.parse("enc_dropout")?,
    };
    let decoder = DecoderConfig {
        num_blocks_l2r: kv.parse("dec_blocks_l2r")?,
        num_blocks_r2l: kv.parse("dec_blocks_r2l")?,
        model_dim: kv.parse("model_dim")?,
        heads: kv.parse("dec_heads")?,
        ffn_dim: kv.parse("dec_ffn")?,
        vocab_size: kv.parse("vocab_size")?,
    };
    let vocab: Vec<String> = kv.get("vocab")?.split_whitespace().map(|s| s.to_string()).collect();
    if vocab.len() != decoder.vocab_size {
        return Err(err(format!(
            "vocab table of {} entries vs declared size {}",
            vocab.len(),
            decoder.vocab_size
        )));
    }

    // Read blob in index order, then validate the full payload against the
    // configuration's expected layout.
    let mut params = BTreeMap::new();
    let mut offset = 0usize;
    for (name, dtype, step_count, dims) in index {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = match dtype.as_str() {
            "f64" => {
                let need = n * 8;
                if offset + need > blob.len() {
                    return Err(err(format!("truncated payload at tensor `{name}`")));
                }
                blob[offset..offset + need]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            "f32" => {
                let need = n * 4;
                if offset + need > blob.len() {
                    return Err(err(format!("truncated payload at tensor `{name}`")));
                }
                blob[offset..offset + need]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            other => return Err(err(format!("tensor `{name}` has unknown dtype `{other}`"))),
        };
        offset += data.len() * if dtype == "f64" { 8 } else { 4 };
        if params
            .insert(name.clone(), Parameter { name: name.clone(), shape: dims, data, step_count })
            .is_some()
        {
            return Err(err(format!("duplicate tensor `{name}`")));
        }
    }
    if offset != blob.len() {
        return Err(err(format!(
            "payload has {} trailing bytes",
            blob.len() - offset
        )));
    }

    let state = ModelState::from_parameters(frontend, encoder, decoder, params)?;
    Ok(Checkpoint { state, vocab, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FrontendConfig;

    fn sample_state() -> ModelState {
        ModelState::init(
            FrontendConfig::new(&[4, 6], true, 80, 16).unwrap(),
            EncoderConfig { num_blocks: 1, model_dim: 16, heads: 2, ffn_dim: 24, depthwise_kernel: 3, dropout: 0.1 },
            DecoderConfig { num_blocks_l2r: 1, num_blocks_r2l: 1, model_dim: 16, heads: 2, ffn_dim: 24, vocab_size: 9 },
            17,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut state = sample_state();
        state.param_mut("heads.ctc.bias").unwrap().step_count = 42;
        let ckpt = Checkpoint::with_default_vocab(state, 123);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.vocab, ckpt.vocab);
        assert_eq!(loaded.state.frontend, ckpt.state.frontend);
        assert_eq!(loaded.state.encoder, ckpt.state.encoder);
        assert_eq!(loaded.state.decoder, ckpt.state.decoder);
        for (a, b) in ckpt.state.params().zip(loaded.state.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.step_count, b.step_count);
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{}", a.name);
        }
    }

    #[test]
    fn truncated_file_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint::with_default_vocab(sample_state(), 0);
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 100);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(HydraError::Checkpoint(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, b"hydraformer-ckpt 9\ndata\n").unwrap();
        let e = load_checkpoint(&path).unwrap_err();
        assert!(matches!(e, HydraError::Checkpoint(_)));
        assert!(e.to_string().contains("version"));
    }

    #[test]
    fn missing_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint::with_default_vocab(sample_state(), 0);
        save_checkpoint(&path, &ckpt).unwrap();
        let text = fs::read(&path).unwrap();
        // drop one index line and its payload
        let s = String::from_utf8_lossy(&text);
        let needle = "heads.ctc.bias f64 0 9\n";
        let pos = s.find(needle).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&text[..pos]);
        bytes.extend_from_slice(&text[pos + needle.len()..]);
        fs::write(&path, bytes).unwrap();
        let e = load_checkpoint(&path).unwrap_err();
        assert!(e.to_string().contains("tensor"), "{e}");
    }
}
