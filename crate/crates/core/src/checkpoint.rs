//! Binary checkpoint: magic bytes, a JSON header and a body of
//! little-endian `f32` tensors.
//!
//! ```text
//! "UEDKL1\0" | header length (u64 LE) | header JSON, space padded | body
//! ```
//!
//! The header carries the run config, class table, vocabulary and a manifest
//! of `(name, shape, offset)` for every tensor; offsets are relative to the
//! start of the body, which begins on an 8-byte boundary. Parameters are kept
//! at `f32` precision throughout training so a save/load cycle is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::base_learner::BaseLearnerModel;
use crate::config::RunConfig;
use crate::ensemble::EnsembleParams;
use crate::error::{Error, Result};
use crate::params::ParamTensors;
use crate::prep::{self, EncodedPayload, Vocabulary};

pub const MAGIC: &[u8; 7] = b"UEDKL1\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to score new payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct UedklModel {
    pub config: RunConfig,
    /// Trained class names; index `i` is class `i`.
    pub classes: Vec<String>,
    pub vocab: Vocabulary,
    pub learners: Vec<BaseLearnerModel>,
    pub ensemble: Option<EnsembleParams>,
}

impl UedklModel {
    pub fn encode(&self, payload: &str) -> EncodedPayload {
        let t = &self.config.tokenizer;
        self.vocab
            .encode(&prep::prepare(payload, t.mode, t.ngram_unit), t.max_len)
    }

    fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for l in &self.learners {
            out.extend(
                l.tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("learner{}.{n}", l.learner_id), t)),
            );
        }
        if let Some(e) = &self.ensemble {
            out.extend(e.tensors());
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LearnerMeta {
    id: usize,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: RunConfig,
    classes: Vec<String>,
    vocabulary: Vocabulary,
    learners: Vec<LearnerMeta>,
    has_ensemble: bool,
    tensors: Vec<TensorEntry>,
}

/// Serializes a model. Values are stored as `f32`.
pub fn to_bytes(model: &UedklModel) -> Result<Vec<u8>> {
    let named = model.named_tensors();
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        classes: model.classes.clone(),
        vocabulary: model.vocab.clone(),
        learners: model
            .learners
            .iter()
            .map(|l| LearnerMeta {
                id: l.learner_id,
                seed: l.seed,
            })
            .collect(),
        has_ensemble: model.ensemble.is_some(),
        tensors,
    };
    let mut json = serde_json::to_vec(&header)?;
    while (MAGIC.len() + 8 + json.len()) % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for &x in t.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<UedklModel> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len_bytes: [u8; 8] = bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap();
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let body_start = MAGIC.len() + 8 + header_len;
    if body_start > bytes.len() {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[MAGIC.len() + 8..body_start])
        .map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let body = &bytes[body_start..];
    let mut tensors: Vec<(&str, Mat)> = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > body.len() {
            return Err(bad(format!("tensor {} runs past the end of the file", e.name)));
        }
        let values: Vec<f64> = body[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let m = Mat::from_shape_vec((e.shape[0], e.shape[1]), values).expect("size checked");
        tensors.push((e.name.as_str(), m));
    }
    let with_prefix = |prefix: &str| -> (Vec<String>, Vec<Mat>) {
        tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix(prefix).map(|rest| (rest.to_owned(), m.clone())))
            .unzip()
    };
    let check_names = |what: &str, expected: Vec<String>, found: &[String]| -> Result<()> {
        if expected.as_slice() != found {
            return Err(bad(format!("{what}: tensor manifest does not match the model layout")));
        }
        Ok(())
    };

    let classes = header.classes.len();
    let base_cfg = header.config.base_learner(header.vocabulary.len(), classes);
    let mut learners = Vec::new();
    for meta in &header.learners {
        let (names, ts) = with_prefix(&format!("learner{}.", meta.id));
        let learner = BaseLearnerModel::from_tensors(base_cfg, meta.id, meta.seed, &ts)?;
        check_names(
            &format!("learner {}", meta.id),
            learner.tensors().into_iter().map(|(n, _)| n).collect(),
            &names,
        )?;
        learners.push(learner);
    }
    let ensemble = if header.has_ensemble {
        let (names, ts) = with_prefix("");
        let (names, ts): (Vec<String>, Vec<Mat>) = names
            .into_iter()
            .zip(ts)
            .filter(|(n, _)| n.starts_with("ensemble."))
            .unzip();
        let e = EnsembleParams::from_tensors(header.config.ensemble_config(classes), &ts)?;
        check_names("ensemble", e.tensors().into_iter().map(|(n, _)| n).collect(), &names)?;
        Some(e)
    } else {
        None
    };
    let model = UedklModel {
        config: header.config,
        classes: header.classes,
        vocab: header.vocabulary,
        learners,
        ensemble,
    };
    if model.named_tensors().len() != header.tensors.len() {
        return Err(bad("tensor manifest has entries the model does not use"));
    }
    Ok(model)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(model: &UedklModel, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model)?)
}

pub fn load(path: &Path) -> Result<UedklModel> {
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prep::{NgramUnit, TokenizerMode};

    fn tiny_model(with_ensemble: bool) -> UedklModel {
        let mut config = RunConfig::default();
        config.tokenizer.max_len = 6;
        config.tokenizer.vocab_size = 30;
        config.encoder.dim = 8;
        config.encoder.heads = 2;
        config.encoder.layers = 1;
        config.encoder.pool_dim = 4;
        config.gp.units = 4;
        config.gp.inducing = 3;
        config.ensemble.learners = 2;
        config.ensemble.attn_dim = 4;
        let corpus: Vec<_> = ["select * from t", "<script>alert(1)", "hello world"]
            .iter()
            .map(|p| prep::prepare(p, TokenizerMode::Trigram, NgramUnit::Char))
            .collect();
        let vocab = Vocabulary::build(&corpus, 30, TokenizerMode::Trigram);
        let classes = vec!["a".to_owned(), "b".to_owned(), "c".to_owned()];
        let base = config.base_learner(vocab.len(), classes.len());
        let source: Vec<EncodedPayload> = corpus.iter().map(|s| vocab.encode(s, 6)).collect();
        let learners = (0..2)
            .map(|h| BaseLearnerModel::init(base, h, 40 + h as u64, &source).unwrap())
            .collect();
        let ensemble = with_ensemble.then(|| EnsembleParams::init(config.ensemble_config(3), 9).unwrap());
        UedklModel {
            config,
            classes,
            vocab,
            learners,
            ensemble,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for with_ensemble in [false, true] {
            let m = tiny_model(with_ensemble);
            let bytes = to_bytes(&m).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn body_is_eight_byte_aligned() {
        let bytes = to_bytes(&tiny_model(true)).unwrap();
        let header_len = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
        assert_eq!((15 + header_len) % 8, 0);
        let n: usize = tiny_model(true).named_tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(bytes.len(), 15 + header_len + 4 * n);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let mut bytes = to_bytes(&tiny_model(true)).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..10]), Err(Error::Checkpoint(_))));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny_model(true);
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
        assert!(!dir.path().join("m.ckpt.tmp").exists());
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Checkpoint(_))));
    }
}
