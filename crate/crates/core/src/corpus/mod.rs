//! Dialogue corpora: records, JSON-lines I/O, context windows and batching.

mod synthetic;

pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prototypes::{EmotionSet, VadPoint};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub speaker: usize,
    pub label: usize,
    pub hvad: Option<VadPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub cls: usize,
    pub eos: usize,
    pub pad: usize,
    pub speaker_base: usize,
}

/// Vocabulary description. Speaker `s` is encoded as token `speaker_base + s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub vocab_size: usize,
    pub special: SpecialTokens,
}

impl Vocab {
    pub fn speaker_token(&self, speaker: usize) -> Result<usize> {
        let t = self.special.speaker_base + speaker;
        if t >= self.vocab_size {
            return Err(Error::Data(format!(
                "speaker {speaker} maps to token {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let v: Vocab = serde_json::from_str(&text)?;
        let s = v.special;
        if [s.cls, s.eos, s.pad, s.speaker_base]
            .iter()
            .any(|&t| t >= v.vocab_size)
        {
            return Err(Error::Data("special token outside vocabulary".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    tokens: Vec<usize>,
    speaker: usize,
    label: String,
    hvad: Option<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
}

/// Parses a JSON-lines corpus, one dialogue per non-blank line.
pub fn read_corpus(reader: impl BufRead, emotions: &EmotionSet) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.utterances.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("dialogue {:?} has no utterances", rec.id),
            });
        }
        let utterances = rec
            .utterances
            .into_iter()
            .map(|u| {
                let label = emotions.index_of(&u.label)?;
                let hvad = u
                    .hvad
                    .map(|[v, a, d]| VadPoint::strict(v, a, d))
                    .transpose()?;
                Ok(Utterance {
                    tokens: u.tokens,
                    speaker: u.speaker,
                    label,
                    hvad,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::UnknownLabel(_) | Error::Data(_) => Error::Parse {
                    line: line_no,
                    msg: e.to_string(),
                },
                e => e,
            })?;
        out.push(Dialogue {
            id: rec.id,
            utterances,
        });
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>, emotions: &EmotionSet) -> Result<Vec<Dialogue>> {
    let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    read_corpus(BufReader::new(f), emotions)
}

/// Writes the canonical JSON-lines form read by [`read_corpus`].
pub fn write_corpus(mut w: impl Write, dialogues: &[Dialogue], emotions: &EmotionSet) -> Result<()> {
    for d in dialogues {
        let rec = DialogueRecord {
            id: d.id.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    tokens: u.tokens.clone(),
                    speaker: u.speaker,
                    label: emotions.name(u.label).to_string(),
                    hvad: u.hvad.map(VadPoint::to_array),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, dialogues: &[Dialogue], emotions: &EmotionSet) -> Result<()> {
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_corpus(&mut w, dialogues, emotions)?;
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Checks token ids, speakers and labels against a vocabulary and label count.
pub fn validate_corpus(dialogues: &[Dialogue], vocab: &Vocab, n_emotions: usize) -> Result<()> {
    for d in dialogues {
        if d.is_empty() {
            return Err(Error::Data(format!("dialogue {:?} is empty", d.id)));
        }
        for (i, u) in d.utterances.iter().enumerate() {
            if let Some(&t) = u.tokens.iter().find(|&&t| t >= vocab.vocab_size) {
                return Err(Error::Data(format!(
                    "dialogue {:?} utterance {i}: token {t} outside vocabulary of {}",
                    d.id, vocab.vocab_size
                )));
            }
            vocab.speaker_token(u.speaker)?;
            if u.label >= n_emotions {
                return Err(Error::Data(format!(
                    "dialogue {:?} utterance {i}: label {} out of range",
                    d.id, u.label
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Past context utterances.
    pub wp: usize,
    /// Future context utterances.
    pub wf: usize,
    pub max_len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            wp: 1,
            wf: 0,
            max_len: 64,
        }
    }
}

/// `[CLS]`, speaker-prefixed utterances around the target, `[EOS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextWindow {
    pub target_index: usize,
    pub input_ids: Vec<usize>,
    /// Half-open token range of the target utterance's own tokens.
    pub target_span: (usize, usize),
}

impl ContextWindow {
    pub const CLS_POSITION: usize = 0;

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }
}

/// Builds the input for utterance `i`. When the full window exceeds
/// `max_len`, whole context utterances are dropped farthest-first (past
/// before future at equal distance); the target is never cut.
pub fn build_context_window(
    d: &Dialogue,
    i: usize,
    cfg: &WindowConfig,
    vocab: &Vocab,
) -> Result<ContextWindow> {
    if i >= d.len() {
        return Err(Error::Data(format!(
            "utterance {i} out of range for dialogue {:?} of length {}",
            d.id,
            d.len()
        )));
    }
    let target_len = d.utterances[i].tokens.len() + 3;
    if target_len > cfg.max_len {
        return Err(Error::Data(format!(
            "dialogue {:?} utterance {i} needs {target_len} tokens, max_len is {}",
            d.id, cfg.max_len
        )));
    }
    let seg_len = |k: usize| d.utterances[k].tokens.len() + 1;
    let mut lo = i.saturating_sub(cfg.wp);
    let mut hi = (i + cfg.wf).min(d.len() - 1);
    let mut total: usize = 2 + (lo..=hi).map(seg_len).sum::<usize>();
    while total > cfg.max_len {
        let drop_past = lo < i && (i - lo >= hi - i);
        if drop_past {
            total -= seg_len(lo);
            lo += 1;
        } else {
            total -= seg_len(hi);
            hi -= 1;
        }
    }
    let mut ids = Vec::with_capacity(total);
    ids.push(vocab.special.cls);
    let mut span = (0, 0);
    for k in lo..=hi {
        let u = &d.utterances[k];
        ids.push(vocab.speaker_token(u.speaker)?);
        if k == i {
            span = (ids.len(), ids.len() + u.tokens.len());
        }
        ids.extend_from_slice(&u.tokens);
    }
    ids.push(vocab.special.eos);
    Ok(ContextWindow {
        target_index: i,
        input_ids: ids,
        target_span: span,
    })
}

/// One classification sample: an utterance with its encoded window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub dialogue: usize,
    pub window: ContextWindow,
    pub label: usize,
    pub hvad: Option<VadPoint>,
}

/// Encodes every utterance of every dialogue, in corpus order.
pub fn build_samples(dialogues: &[Dialogue], cfg: &WindowConfig, vocab: &Vocab) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (di, d) in dialogues.iter().enumerate() {
        for (i, u) in d.utterances.iter().enumerate() {
            out.push(Sample {
                dialogue: di,
                window: build_context_window(d, i, cfg, vocab)?,
                label: u.label,
                hvad: u.hvad,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub windows: Vec<ContextWindow>,
    /// Class index per sample; the one-hot matrix is [`Batch::one_hot`].
    pub labels: Vec<usize>,
    pub hvads: Vec<Option<VadPoint>>,
    pub n_emotions: usize,
}

impl Batch {
    pub fn from_parts(
        windows: Vec<ContextWindow>,
        labels: Vec<usize>,
        hvads: Vec<Option<VadPoint>>,
        n_emotions: usize,
    ) -> Self {
        Self {
            windows,
            labels,
            hvads,
            n_emotions,
        }
    }

    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>, n_emotions: usize) -> Self {
        let mut b = Self::from_parts(Vec::new(), Vec::new(), Vec::new(), n_emotions);
        for s in samples {
            b.windows.push(s.window.clone());
            b.labels.push(s.label);
            b.hvads.push(s.hvad);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `M ∈ {0,1}^{|B|×|E|}`.
    pub fn one_hot(&self) -> Tensor {
        let e = self.n_emotions;
        let mut data = vec![0.0; self.len() * e];
        for (i, &l) in self.labels.iter().enumerate() {
            data[i * e + l] = 1.0;
        }
        Tensor::matrix(self.len(), e, data).expect("consistent shape")
    }

    /// Batch positions labelled `j`.
    pub fn members(&self, j: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == j).collect()
    }
}

/// Shuffled fixed-size batches; every sample lands in exactly one batch and
/// only the last batch may be short.
pub fn make_batches(samples: &[Sample], batch_size: usize, n_emotions: usize, shuffle_seed: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    batches_from_order(samples, &order, batch_size, n_emotions)
}

/// Batches in corpus order, for evaluation.
pub fn sequential_batches(samples: &[Sample], batch_size: usize, n_emotions: usize) -> Vec<Batch> {
    let order: Vec<usize> = (0..samples.len()).collect();
    batches_from_order(samples, &order, batch_size, n_emotions)
}

fn batches_from_order(samples: &[Sample], order: &[usize], batch_size: usize, n_emotions: usize) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    order
        .chunks(batch_size)
        .map(|c| Batch::from_samples(c.iter().map(|&i| &samples[i]), n_emotions))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Deterministic 80/10/10 assignment from a hash of the dialogue id.
pub fn split_of(id: &str) -> Split {
    let digest = Sha256::digest(id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    match u64::from_le_bytes(head) % 10 {
        0..=7 => Split::Train,
        8 => Split::Valid,
        _ => Split::Test,
    }
}

pub fn split_dialogues(dialogues: &[Dialogue]) -> (Vec<Dialogue>, Vec<Dialogue>, Vec<Dialogue>) {
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for d in dialogues {
        match split_of(&d.id) {
            Split::Train => train.push(d.clone()),
            Split::Valid => valid.push(d.clone()),
            Split::Test => test.push(d.clone()),
        }
    }
    (train, valid, test)
}
