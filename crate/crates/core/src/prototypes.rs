//! Emotion label sets and their Valence-Arousal-Dominance prototypes.
//!
//! Three prototype modes are supported:
//! - `nrc`: fixed per-emotion lexicon points (built in for four label sets,
//!   or read from a prototype file),
//! - `hvad`: per-utterance annotated points averaged per cluster,
//! - `random`: seeded uniform points in the unit cube (a control).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::error::{Error, Result};

/// A point in the unit VAD cube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VadPoint {
    pub v: f64,
    pub a: f64,
    pub d: f64,
}

impl VadPoint {
    /// Clamps each component into `[0, 1]`. Fails on non-finite input.
    pub fn new(v: f64, a: f64, d: f64) -> Result<Self> {
        if !(v.is_finite() && a.is_finite() && d.is_finite()) {
            return Err(Error::NonFinite("VAD point".into()));
        }
        Ok(Self {
            v: v.clamp(0.0, 1.0),
            a: a.clamp(0.0, 1.0),
            d: d.clamp(0.0, 1.0),
        })
    }

    /// Like [`VadPoint::new`] but rejects components outside `[0, 1]`.
    pub fn strict(v: f64, a: f64, d: f64) -> Result<Self> {
        for x in [v, a, d] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Data(format!("VAD component {x} outside [0, 1]")));
            }
        }
        Ok(Self { v, a, d })
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.v, self.a, self.d]
    }

    pub fn distance(self, other: VadPoint) -> f64 {
        let [x, y, z] = self.to_array();
        let [p, q, r] = other.to_array();
        ((x - p).powi(2) + (y - q).powi(2) + (z - r).powi(2)).sqrt()
    }
}

impl From<VadPoint> for [f64; 3] {
    fn from(p: VadPoint) -> Self {
        p.to_array()
    }
}

/// Ordered emotion labels. Indices into this list are the class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionSet {
    names: Vec<String>,
    neutral: Option<usize>,
}

impl EmotionSet {
    /// `neutral` names the label to treat as neutral, if any.
    pub fn new(names: Vec<String>, neutral: Option<&str>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Data("emotion set is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Data("empty emotion name".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::Data(format!("duplicate emotion name {n:?}")));
            }
        }
        let neutral = match neutral {
            None => None,
            Some(n) => Some(
                names
                    .iter()
                    .position(|x| x == n)
                    .ok_or_else(|| Error::UnknownLabel(n.to_string()))?,
            ),
        };
        Ok(Self { names, neutral })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn neutral_index(&self) -> Option<usize> {
        self.neutral
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeMode {
    Nrc,
    Hvad,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinSet {
    Iemocap,
    Meld,
    Emorynlp,
    Dailydialog,
}

impl BuiltinSet {
    pub const ALL: [BuiltinSet; 4] = [
        BuiltinSet::Iemocap,
        BuiltinSet::Meld,
        BuiltinSet::Emorynlp,
        BuiltinSet::Dailydialog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinSet::Iemocap => "iemocap",
            BuiltinSet::Meld => "meld",
            BuiltinSet::Emorynlp => "emorynlp",
            BuiltinSet::Dailydialog => "dailydialog",
        }
    }

    fn rows(self) -> &'static [(&'static str, [f64; 3])] {
        match self {
            BuiltinSet::Iemocap => IEMOCAP,
            BuiltinSet::Meld => MELD,
            BuiltinSet::Emorynlp => EMORYNLP,
            BuiltinSet::Dailydialog => DAILYDIALOG,
        }
    }
}

impl std::str::FromStr for BuiltinSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BuiltinSet::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown built-in emotion set {s:?}")))
    }
}

// NRC-VAD lexicon entries for each label, in each label set's canonical order.
const IEMOCAP: &[(&str, [f64; 3])] = &[
    ("neutral", [0.469, 0.184, 0.357]),
    ("frustrated", [0.060, 0.730, 0.280]),
    ("sad", [0.052, 0.288, 0.164]),
    ("anger", [0.167, 0.865, 0.657]),
    ("excited", [0.908, 0.931, 0.709]),
    ("happy", [0.960, 0.732, 0.850]),
];

const MELD: &[(&str, [f64; 3])] = &[
    ("neutral", [0.469, 0.184, 0.357]),
    ("joy", [0.980, 0.824, 0.794]),
    ("surprise", [0.875, 0.875, 0.562]),
    ("anger", [0.167, 0.865, 0.657]),
    ("sad", [0.052, 0.288, 0.164]),
    ("disgust", [0.052, 0.775, 0.317]),
    ("fear", [0.073, 0.840, 0.293]),
];

const EMORYNLP: &[(&str, [f64; 3])] = &[
    ("joyful", [0.990, 0.740, 0.667]),
    ("neutral", [0.469, 0.184, 0.357]),
    ("powerful", [0.865, 0.830, 0.991]),
    ("mad", [0.219, 0.873, 0.277]),
    ("sad", [0.225, 0.333, 0.149]),
    ("scared", [0.146, 0.828, 0.185]),
    ("peaceful", [0.867, 0.108, 0.569]),
];

const DAILYDIALOG: &[(&str, [f64; 3])] = &[
    ("neutral", [0.469, 0.184, 0.357]),
    ("anger", [0.167, 0.865, 0.657]),
    ("disgust", [0.052, 0.775, 0.317]),
    ("fear", [0.073, 0.840, 0.293]),
    ("happy", [0.960, 0.732, 0.850]),
    ("sad", [0.052, 0.288, 0.164]),
    ("surprise", [0.875, 0.875, 0.562]),
];

/// One VAD prototype per emotion of an [`EmotionSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    pub mode: PrototypeMode,
    pub emotions: EmotionSet,
    vad: Vec<VadPoint>,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct PrototypeFile {
    emotions: Vec<String>,
    vad: Vec<[f64; 3]>,
    neutral: Option<String>,
}

impl PrototypeTable {
    pub fn new(mode: PrototypeMode, emotions: EmotionSet, vad: Vec<VadPoint>) -> Result<Self> {
        if vad.len() != emotions.len() {
            return Err(Error::Data(format!(
                "{} prototypes for {} emotions",
                vad.len(),
                emotions.len()
            )));
        }
        Ok(Self {
            mode,
            emotions,
            vad,
            seed: None,
        })
    }

    /// Lexicon prototypes for one of the four built-in label sets.
    pub fn builtin(set: BuiltinSet) -> Self {
        let rows = set.rows();
        let names = rows.iter().map(|(n, _)| n.to_string()).collect();
        let emotions = EmotionSet::new(names, Some("neutral")).expect("built-in set is valid");
        let vad = rows
            .iter()
            .map(|(_, [v, a, d])| VadPoint { v: *v, a: *a, d: *d })
            .collect();
        Self {
            mode: PrototypeMode::Nrc,
            emotions,
            vad,
            seed: None,
        }
    }

    /// Uniform random prototypes in `[0, 1]³`, reproducible from `seed`.
    pub fn random(emotions: EmotionSet, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vad = (0..emotions.len())
            .map(|_| VadPoint {
                v: rng.random(),
                a: rng.random(),
                d: rng.random(),
            })
            .collect();
        Self {
            mode: PrototypeMode::Random,
            emotions,
            vad,
            seed: Some(seed),
        }
    }

    /// Same emotions and fallback points, but cluster targets come from
    /// per-utterance annotations.
    pub fn with_mode(mut self, mode: PrototypeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: PrototypeFile = serde_json::from_str(text)?;
        let emotions = EmotionSet::new(f.emotions, f.neutral.as_deref())?;
        let vad = f
            .vad
            .iter()
            .map(|&[v, a, d]| VadPoint::strict(v, a, d))
            .collect::<Result<Vec<_>>>()?;
        Self::new(PrototypeMode::Nrc, emotions, vad)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let f = PrototypeFile {
            emotions: self.emotions.names().to_vec(),
            vad: self.vad.iter().map(|p| p.to_array()).collect(),
            neutral: self
                .emotions
                .neutral_index()
                .map(|i| self.emotions.name(i).to_string()),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn len(&self) -> usize {
        self.vad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vad.is_empty()
    }

    pub fn get(&self, j: usize) -> VadPoint {
        self.vad[j]
    }

    pub fn points(&self) -> &[VadPoint] {
        &self.vad
    }

    pub fn by_name(&self, name: &str) -> Result<VadPoint> {
        Ok(self.vad[self.emotions.index_of(name)?])
    }
}

/// Linear map of a raw annotation on `[lo, hi]` onto `[0, 1]`.
pub fn rescale_hvad(raw: [f64; 3], lo: f64, hi: f64) -> Result<VadPoint> {
    if !(hi > lo) {
        return Err(Error::Data(format!("rescale range [{lo}, {hi}] is empty")));
    }
    let mut out = [0.0; 3];
    for (o, &x) in out.iter_mut().zip(&raw) {
        if !(lo..=hi).contains(&x) {
            return Err(Error::Data(format!("raw VAD value {x} outside [{lo}, {hi}]")));
        }
        *o = (x - lo) / (hi - lo);
    }
    Ok(VadPoint {
        v: out[0],
        a: out[1],
        d: out[2],
    })
}

/// Label-side cluster representations for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelClusters {
    /// `|E|` rows; rows of absent clusters hold the table prototype.
    pub rows: Vec<[f64; 3]>,
    /// `present[j]` is false when no sample in the batch carries label `j`.
    pub present: Vec<bool>,
}

/// Maps the batch's one-hot label columns into VAD space: for each present
/// emotion, the label-weighted average of the member points. In `nrc` and
/// `random` mode every member of a cluster shares the emotion's prototype, so
/// the result is that prototype; in `hvad` mode it is the mean annotation.
pub fn label_cluster_vad(batch: &Batch, table: &PrototypeTable) -> Result<LabelClusters> {
    let e = table.len();
    let mut sums = vec![[0.0f64; 3]; e];
    let mut counts = vec![0usize; e];
    for (i, &label) in batch.labels.iter().enumerate() {
        if label >= e {
            return Err(Error::Data(format!(
                "label {label} out of range for {e} emotions"
            )));
        }
        counts[label] += 1;
        if table.mode == PrototypeMode::Hvad {
            let p = batch.hvads.get(i).copied().flatten().ok_or_else(|| {
                Error::Data(format!("batch sample {i} has no utterance-level VAD"))
            })?;
            for (s, x) in sums[label].iter_mut().zip(p.to_array()) {
                *s += x;
            }
        }
    }
    let rows = (0..e)
        .map(|j| {
            if counts[j] == 0 || table.mode != PrototypeMode::Hvad {
                table.get(j).to_array()
            } else {
                sums[j].map(|s| s / counts[j] as f64)
            }
        })
        .collect();
    Ok(LabelClusters {
        rows,
        present: counts.iter().map(|&c| c > 0).collect(),
    })
}
