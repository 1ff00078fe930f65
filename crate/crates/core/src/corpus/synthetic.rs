//! Synthetic dialogue corpora whose token statistics follow the emotions'
//! positions in VAD space.
//!
//! Token layout: `pad`, `cls`, `eos`, one token per speaker, then
//! `tokens_per_emotion` signal tokens per emotion, `cue_tokens_per_emotion`
//! cue tokens per emotion, and the remaining ids as filler.
//!
//! An ordinary utterance starts with one of its emotion's signal tokens; each
//! further slot is filler with probability `filler_rate`, otherwise a signal
//! token, borrowed with probability `confusion_rate` from another emotion
//! chosen with weight `exp(-d²/2σ²)` on the prototype distance `d`. A
//! context-dependent utterance is pure filler and its label is announced by a
//! cue token appended to the previous utterance, so it can only be recovered
//! with past context.

use std::path::PathBuf;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dialogue, SpecialTokens, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::prototypes::{BuiltinSet, PrototypeTable, VadPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Built-in label set supplying names and prototypes.
    pub emotions: BuiltinSet,
    /// Prototype file overriding `emotions`.
    pub prototype_file: Option<PathBuf>,
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub tokens_per_emotion: usize,
    pub cue_tokens_per_emotion: usize,
    pub dialogues: usize,
    pub min_dialogue_len: usize,
    pub max_dialogue_len: usize,
    pub min_utterance_tokens: usize,
    pub max_utterance_tokens: usize,
    pub filler_rate: f64,
    pub confusion_rate: f64,
    pub confusion_sigma: f64,
    pub label_noise: f64,
    pub context_dependence: f64,
    /// Half-width of the uniform noise added to each utterance's VAD annotation.
    pub hvad_noise: f64,
    /// Relative label frequencies; uniform when absent.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            emotions: BuiltinSet::Iemocap,
            prototype_file: None,
            vocab_size: 64,
            n_speakers: 2,
            tokens_per_emotion: 4,
            cue_tokens_per_emotion: 1,
            dialogues: 200,
            min_dialogue_len: 6,
            max_dialogue_len: 14,
            min_utterance_tokens: 3,
            max_utterance_tokens: 5,
            filler_rate: 0.3,
            confusion_rate: 0.2,
            confusion_sigma: 0.3,
            label_noise: 0.0,
            context_dependence: 0.3,
            hvad_noise: 0.05,
            class_weights: None,
        }
    }
}

impl SyntheticSpec {
    pub fn prototypes(&self) -> Result<PrototypeTable> {
        match &self.prototype_file {
            Some(p) => PrototypeTable::load(p),
            None => Ok(PrototypeTable::builtin(self.emotions)),
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            vocab_size: self.vocab_size,
            special: SpecialTokens {
                pad: 0,
                cls: 1,
                eos: 2,
                speaker_base: 3,
            },
        }
    }

    fn signal_base(&self) -> usize {
        3 + self.n_speakers
    }

    fn cue_base(&self, n_emotions: usize) -> usize {
        self.signal_base() + n_emotions * self.tokens_per_emotion
    }

    fn filler_base(&self, n_emotions: usize) -> usize {
        self.cue_base(n_emotions) + n_emotions * self.cue_tokens_per_emotion
    }

    pub fn validate(&self, n_emotions: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if n_emotions == 0 {
            return fail("no emotions".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.n_speakers == 0 || self.tokens_per_emotion == 0 {
            return fail("n_speakers and tokens_per_emotion must be positive".into());
        }
        if self.context_dependence > 0.0 && self.cue_tokens_per_emotion == 0 {
            return fail("context_dependence needs cue tokens".into());
        }
        let needed = self.filler_base(n_emotions) + 1;
        if self.vocab_size < needed {
            return fail(format!(
                "vocab_size {} too small: layout needs at least {needed}",
                self.vocab_size
            ));
        }
        if self.dialogues == 0
            || self.min_dialogue_len == 0
            || self.min_dialogue_len > self.max_dialogue_len
            || self.min_utterance_tokens == 0
            || self.min_utterance_tokens > self.max_utterance_tokens
        {
            return fail("empty or inverted dialogue/utterance length range".into());
        }
        for (name, p) in [
            ("filler_rate", self.filler_rate),
            ("confusion_rate", self.confusion_rate),
            ("label_noise", self.label_noise),
            ("context_dependence", self.context_dependence),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.hvad_noise >= 0.0) || !(self.confusion_sigma > 0.0) {
            return fail("hvad_noise must be >= 0 and confusion_sigma > 0".into());
        }
        if let Some(w) = &self.class_weights {
            if w.len() != n_emotions || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return fail("class_weights must be one non-negative weight per emotion".into());
            }
        }
        Ok(())
    }
}

/// Generates a corpus, deterministic in `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Dialogue>> {
    let table = spec.prototypes()?;
    let e = table.len();
    spec.validate(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let prior = match &spec.class_weights {
        Some(w) => WeightedIndex::new(w),
        None => WeightedIndex::new(vec![1.0; e]),
    }
    .map_err(|err| Error::Config(err.to_string()))?;

    // neighbour weights for borrowed signal tokens
    let neighbours: Vec<Option<WeightedIndex<f64>>> = (0..e)
        .map(|j| {
            let w: Vec<f64> = (0..e)
                .map(|k| {
                    if k == j {
                        0.0
                    } else {
                        let d = table.get(j).distance(table.get(k));
                        (-d * d / (2.0 * spec.confusion_sigma.powi(2))).exp()
                    }
                })
                .collect();
            WeightedIndex::new(w).ok()
        })
        .collect();

    let signal_base = spec.signal_base();
    let cue_base = spec.cue_base(e);
    let filler_base = spec.filler_base(e);
    let n_filler = spec.vocab_size - filler_base;

    let mut out = Vec::with_capacity(spec.dialogues);
    for di in 0..spec.dialogues {
        let n = rng.random_range(spec.min_dialogue_len..=spec.max_dialogue_len);
        let truth: Vec<usize> = (0..n).map(|_| prior.sample(&mut rng)).collect();
        let dependent: Vec<bool> = (0..n)
            .map(|i| i > 0 && rng.random_bool(spec.context_dependence))
            .collect();

        let mut utterances = Vec::with_capacity(n);
        for i in 0..n {
            let len = rng.random_range(spec.min_utterance_tokens..=spec.max_utterance_tokens);
            let j = truth[i];
            let mut tokens = Vec::with_capacity(len + 1);
            for slot in 0..len {
                let filler = dependent[i] || (slot > 0 && rng.random_bool(spec.filler_rate));
                let t = if filler {
                    filler_base + rng.random_range(0..n_filler)
                } else {
                    let source = match &neighbours[j] {
                        Some(nb) if slot > 0 && rng.random_bool(spec.confusion_rate) => {
                            nb.sample(&mut rng)
                        }
                        _ => j,
                    };
                    signal_base
                        + source * spec.tokens_per_emotion
                        + rng.random_range(0..spec.tokens_per_emotion)
                };
                tokens.push(t);
            }
            if i + 1 < n && dependent[i + 1] {
                tokens.push(
                    cue_base
                        + truth[i + 1] * spec.cue_tokens_per_emotion
                        + rng.random_range(0..spec.cue_tokens_per_emotion),
                );
            }

            let label = if e > 1 && rng.random_bool(spec.label_noise) {
                let other = rng.random_range(0..e - 1);
                if other >= j {
                    other + 1
                } else {
                    other
                }
            } else {
                j
            };
            let [v, a, d] = table.get(label).to_array();
            let r = spec.hvad_noise;
            let mut jitter = || {
                if r > 0.0 {
                    rng.random_range(-r..=r)
                } else {
                    0.0
                }
            };
            let hvad = VadPoint::new(v + jitter(), a + jitter(), d + jitter())?;
            utterances.push(Utterance {
                tokens,
                speaker: rng.random_range(0..spec.n_speakers),
                label,
                hvad: Some(hvad),
            });
        }
        out.push(Dialogue {
            id: format!("syn-{seed}-{di:05}"),
            utterances,
        });
    }
    Ok(out)
}
