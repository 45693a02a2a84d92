//! Synthetic task generators, parallel-corpus ingestion, deterministic
//! splits, and checkpoint persistence.
//!
//! Checkpoints are a single file: one JSON header line describing version,
//! configs, vocabulary, iteration, and the array manifest, followed by the
//! raw little-endian f64 arrays (parameters, then Adam moments) and a
//! trailing CRC32 of everything before it. Loading a checkpoint restores
//! training bit-exactly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DenoiserConfig, DenoiserState};
use crate::rng::{role, stream};
use crate::schedule::NoiseSchedule;
use crate::train::{AdamState, TrainConfig, Trainer};
use crate::vocab::{Vocabulary, RESERVED, UNK};

/// One source/target pair of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Copy,
    Reverse,
    Sort,
    AddMod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Total vocabulary size including the four reserved ids.
    pub vocab: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub count: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= RESERVED.len() + 1 {
            return Err(Error::Config(format!(
                "synthetic vocabulary of {} leaves no content tokens",
                self.vocab
            )));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::Config(format!(
                "invalid length range [{}, {}]",
                self.len_min, self.len_max
            )));
        }
        Ok(())
    }
}

/// Deterministically generate source/target pairs for a toy task. Content
/// token ids live in [4, vocab).
pub fn generate_synth(spec: &SynthSpec) -> Result<Vec<ParallelExample>> {
    spec.validate()?;
    let lo = RESERVED.len();
    let base = spec.vocab - lo;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = stream(spec.seed, &[role::BATCH, 0xDA7A, i as u64]);
        let len = rng.random_range(spec.len_min..=spec.len_max);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> usize { rng.random_range(lo..spec.vocab) };
        let (source, target) = match spec.kind {
            SynthKind::Copy => {
                let s: Vec<usize> = (0..len).map(|_| draw(&mut rng)).collect();
                (s.clone(), s)
            }
            SynthKind::Reverse => {
                let s: Vec<usize> = (0..len).map(|_| draw(&mut rng)).collect();
                let t = s.iter().rev().copied().collect();
                (s, t)
            }
            SynthKind::Sort => {
                let s: Vec<usize> = (0..len).map(|_| draw(&mut rng)).collect();
                let mut t = s.clone();
                t.sort_unstable();
                (s, t)
            }
            SynthKind::AddMod => {
                // Source interleaves the operand sequences a and b; target
                // is the per-position sum of content values modulo the
                // content base, mapped back into content ids.
                let a: Vec<usize> = (0..len).map(|_| draw(&mut rng)).collect();
                let b: Vec<usize> = (0..len).map(|_| draw(&mut rng)).collect();
                let mut s = Vec::with_capacity(2 * len);
                for (&x, &y) in a.iter().zip(&b) {
                    s.push(x);
                    s.push(y);
                }
                let t = a
                    .iter()
                    .zip(&b)
                    .map(|(&x, &y)| ((x - lo) + (y - lo)) % base + lo)
                    .collect();
                (s, t)
            }
        };
        out.push(ParallelExample { source, target });
    }
    Ok(out)
}

/// Deterministic 90/5/5 split by example index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

pub fn split_of_index(index: usize) -> Split {
    // splitmix-style mix of the index alone, so the split never depends on
    // seeds or content.
    let mut x = index as u64;
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^= x >> 31;
    match x % 100 {
        0..=89 => Split::Train,
        90..=94 => Split::Val,
        _ => Split::Test,
    }
}

pub fn split_examples(
    examples: Vec<ParallelExample>,
) -> (Vec<ParallelExample>, Vec<ParallelExample>, Vec<ParallelExample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (i, ex) in examples.into_iter().enumerate() {
        match split_of_index(i) {
            Split::Train => train.push(ex),
            Split::Val => val.push(ex),
            Split::Test => test.push(ex),
        }
    }
    (train, val, test)
}

// ---------------------------------------------------------------------------
// TSV corpora
// ---------------------------------------------------------------------------

/// Load a "source<TAB>target" UTF-8 corpus; whitespace tokenization; the
/// vocabulary is built from the training split with a minimum-frequency
/// threshold, and out-of-vocabulary tokens map to the unknown id.
pub fn load_parallel_tsv(path: &Path, min_freq: usize) -> Result<(Vec<ParallelExample>, Vocabulary)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut raw: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let src = parts.next().unwrap_or("");
        let tgt = parts.next().ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            reason: "expected source<TAB>target".into(),
        })?;
        let src_tokens: Vec<String> = src.split_whitespace().map(str::to_string).collect();
        let tgt_tokens: Vec<String> = tgt.split_whitespace().map(str::to_string).collect();
        if src_tokens.is_empty() || tgt_tokens.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                reason: "source and target must be nonempty".into(),
            });
        }
        raw.push((src_tokens, tgt_tokens));
    }
    if raw.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            reason: "no examples in file".into(),
        });
    }

    let mut freq: HashMap<&str, usize> = HashMap::new();
    for (i, (src, tgt)) in raw.iter().enumerate() {
        if split_of_index(i) != Split::Train {
            continue;
        }
        for t in src.iter().chain(tgt) {
            *freq.entry(t).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|(_, c)| *c >= min_freq)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let vocab = Vocabulary::from_content_tokens(kept.into_iter().map(|(t, _)| t.to_string()))?;

    let encode = |tokens: &[String]| -> Vec<usize> {
        tokens.iter().map(|t| vocab.id(t).unwrap_or(UNK)).collect()
    };
    let examples = raw
        .iter()
        .map(|(s, t)| ParallelExample {
            source: encode(s),
            target: encode(t),
        })
        .collect();
    Ok((examples, vocab))
}

/// Load a TSV with an existing vocabulary (evaluation data for a trained
/// model); out-of-vocabulary tokens map to unk.
pub fn load_tsv_with_vocab(path: &Path, vocab: &Vocabulary) -> Result<Vec<ParallelExample>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let src = parts.next().unwrap_or("");
        let tgt = parts.next().ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            reason: "expected source<TAB>target".into(),
        })?;
        let source = vocab.encode_line(src);
        let target = vocab.encode_line(tgt);
        if source.is_empty() || target.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                reason: "source and target must be nonempty".into(),
            });
        }
        out.push(ParallelExample { source, target });
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            reason: "no examples in file".into(),
        });
    }
    Ok(out)
}

/// Write examples as a TSV decodable with the given vocabulary.
pub fn save_parallel_tsv(path: &Path, examples: &[ParallelExample], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&vocab.decode(&ex.source)?);
        out.push('\t');
        out.push_str(&vocab.decode(&ex.target)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "fewstep-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    iteration: u64,
    adam_step: u64,
    model: DenoiserConfig,
    train: TrainConfig,
    sched: NoiseSchedule,
    vocab: Vocabulary,
    dtype: String,
    arrays: Vec<ArrayMeta>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f =
            std::fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(bytes)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.sync_all()
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Serialize the full training state (parameters, Adam moments, iteration,
/// configs, vocabulary) with a trailing CRC32.
pub fn save_checkpoint(trainer: &Trainer, vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut arrays: Vec<ArrayMeta> = Vec::new();
    for (name, t) in trainer.state.params().iter() {
        arrays.push(ArrayMeta {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
        });
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_MAGIC.into(),
        version: CHECKPOINT_VERSION,
        iteration: trainer.iteration,
        adam_step: trainer.adam.step,
        model: trainer.state.config,
        train: trainer.config.clone(),
        sched: trainer.sched,
        vocab: vocab.clone(),
        dtype: "f64le".into(),
        arrays,
    };
    let mut bytes = serde_json::to_string(&header)
        .map_err(|e| Error::Checkpoint {
            path: path.display().to_string(),
            reason: format!("header encoding failed: {e}"),
        })?
        .into_bytes();
    bytes.push(b'\n');
    let push_tensor = |t: &crate::tensor::Tensor, bytes: &mut Vec<u8>| {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (_, t) in trainer.state.params().iter() {
        push_tensor(t, &mut bytes);
    }
    for t in &trainer.adam.m {
        push_tensor(t, &mut bytes);
    }
    for t in &trainer.adam.v {
        push_tensor(t, &mut bytes);
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes);
    let crc = hasher.finalize();
    bytes.extend_from_slice(&crc.to_le_bytes());
    write_atomic(path, &bytes)
}

/// Load a checkpoint, verifying the checksum, version, and array shapes.
pub fn load_checkpoint(path: &Path) -> Result<(Trainer, Vocabulary)> {
    let ckpt_err = |reason: String| Error::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 4 {
        return Err(ckpt_err("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    if hasher.finalize() != stored {
        return Err(ckpt_err("checksum mismatch (corrupt or truncated)".into()));
    }
    let newline = body
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ckpt_err("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&body[..newline])
        .map_err(|e| ckpt_err(format!("header decoding failed: {e}")))?;
    if header.format != CHECKPOINT_MAGIC {
        return Err(ckpt_err(format!("unrecognized format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }

    // Rebuild the state skeleton, then overwrite every tensor from the file.
    let mut init_rng = stream(header.train.seed, &[role::INIT]);
    let mut state = DenoiserState::init(header.model, &mut init_rng)?;
    if state.params().len() != header.arrays.len() {
        return Err(ckpt_err(format!(
            "{} arrays in file, {} in model",
            header.arrays.len(),
            state.params().len()
        )));
    }

    let mut cursor = newline + 1;
    let read_tensor = |rows: usize, cols: usize, cursor: &mut usize| -> Result<crate::tensor::Tensor> {
        let n = rows * cols * 8;
        if *cursor + n > body.len() {
            return Err(ckpt_err("array data truncated".into()));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in body[*cursor..*cursor + n].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        *cursor += n;
        Ok(crate::tensor::Tensor::from_vec(rows, cols, data))
    };

    for (pid, meta) in header.arrays.iter().enumerate() {
        let expect = state.params().tensor(pid).shape();
        if (meta.rows, meta.cols) != expect || state.params().name(pid) != meta.name {
            return Err(ckpt_err(format!(
                "array {} ({}x{}) does not match model slot {} {:?}",
                meta.name,
                meta.rows,
                meta.cols,
                state.params().name(pid),
                expect
            )));
        }
        *state.params_mut().tensor_mut(pid) = read_tensor(meta.rows, meta.cols, &mut cursor)?;
    }
    let mut adam = AdamState::new(&state);
    adam.step = header.adam_step;
    for slot in adam.m.iter_mut() {
        *slot = read_tensor(slot.rows(), slot.cols(), &mut cursor)?;
    }
    for slot in adam.v.iter_mut() {
        *slot = read_tensor(slot.rows(), slot.cols(), &mut cursor)?;
    }
    if cursor != body.len() {
        return Err(ckpt_err("trailing bytes after arrays".into()));
    }

    let trainer = Trainer {
        state,
        config: header.train,
        sched: header.sched,
        adam,
        iteration: header.iteration,
    };
    Ok((trainer, header.vocab))
}
