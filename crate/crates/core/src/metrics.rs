//! Confusion matrices, weighted-F1, micro-F1 with one label ignored, and the
//! VAD scatter export.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::EmotionSet;

/// Square count matrix, rows indexed by gold label and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(n: usize) -> Self {
        Self {
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_rows(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if counts.iter().any(|r| r.len() != n) {
            return Err(Error::Data("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_pairs(gold: &[usize], pred: &[usize], n: usize) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Shape {
                op: "confusion",
                lhs: vec![gold.len()],
                rhs: vec![pred.len()],
            });
        }
        let mut c = Self::new(n);
        for (&g, &p) in gold.iter().zip(pred) {
            c.record(g, p)?;
        }
        Ok(c)
    }

    pub fn record(&mut self, gold: usize, pred: usize) -> Result<()> {
        let n = self.n();
        if gold >= n || pred >= n {
            return Err(Error::Data(format!(
                "label pair ({gold}, {pred}) out of range for {n} classes"
            )));
        }
        self.counts[gold][pred] += 1;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, j: usize) -> u64 {
        self.counts[j].iter().sum()
    }

    pub fn predicted(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// F1 of class `j`; zero when precision and recall are both zero.
    pub fn f1(&self, j: usize) -> f64 {
        let tp = self.counts[j][j] as f64;
        let denom = (self.support(j) + self.predicted(j)) as f64;
        if tp == 0.0 || denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    }

    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.n()).map(|j| self.f1(j)).collect()
    }

    /// Applies `perm` to both axes: class `j` becomes class `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::new(self.n());
        for (g, row) in self.counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                out.counts[perm[g]][perm[p]] = c;
            }
        }
        out
    }
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(c: &Confusion) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Empty("weighted_f1"));
    }
    Ok((0..c.n())
        .map(|j| c.support(j) as f64 * c.f1(j))
        .sum::<f64>()
        / total as f64)
}

pub fn macro_f1(c: &Confusion) -> Result<f64> {
    if c.n() == 0 {
        return Err(Error::Empty("macro_f1"));
    }
    Ok(c.per_class_f1().iter().sum::<f64>() / c.n() as f64)
}

/// Micro-F1 over every class except `excluded`.
///
/// A prediction of a kept class is a false positive whenever it is wrong, even
/// if the gold label is the excluded one; a kept gold label predicted as
/// anything else, the excluded class included, is a false negative.
pub fn micro_f1_excluding(c: &Confusion, excluded: usize) -> Result<f64> {
    if excluded >= c.n() {
        return Err(Error::Data(format!(
            "excluded class {excluded} out of range for {} classes",
            c.n()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for j in (0..c.n()).filter(|&j| j != excluded) {
        let hit = c.get(j, j);
        tp += hit;
        fp += c.predicted(j) - hit;
        fn_ += c.support(j) - hit;
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Err(Error::Empty("micro_f1_excluding"));
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// One evaluated utterance in VAD space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub gold: usize,
    pub pred: usize,
    pub vad: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub confusion: Confusion,
    pub weighted_f1: f64,
    /// Present when the label set has a neutral class.
    pub micro_f1_excl: Option<f64>,
    pub per_class_f1: Vec<f64>,
    pub vad_scatter: Vec<ScatterPoint>,
}

impl EvalReport {
    /// Scores `points` (in corpus order) against `emotions`.
    pub fn from_points(emotions: &EmotionSet, points: Vec<ScatterPoint>) -> Result<Self> {
        let mut confusion = Confusion::new(emotions.len());
        for p in &points {
            confusion.record(p.gold, p.pred)?;
        }
        let micro_f1_excl = match emotions.neutral_index() {
            Some(x) => match micro_f1_excluding(&confusion, x) {
                Ok(v) => Some(v),
                Err(Error::Empty(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        Ok(Self {
            labels: emotions.names().to_vec(),
            weighted_f1: weighted_f1(&confusion)?,
            micro_f1_excl,
            per_class_f1: confusion.per_class_f1(),
            confusion,
            vad_scatter: points,
        })
    }

    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..self.confusion.n()).map(|j| self.confusion.get(j, j)).sum();
        hits as f64 / self.confusion.total().max(1) as f64
    }
}

pub const SCATTER_HEADER: &str = "gold_label,pred_label,v,a,d";

pub fn write_vad_scatter(mut w: impl Write, report: &EvalReport) -> Result<()> {
    let io = |e| Error::io("<scatter>", e);
    writeln!(w, "{SCATTER_HEADER}").map_err(io)?;
    for p in &report.vad_scatter {
        let name = |j: usize| {
            report
                .labels
                .get(j)
                .cloned()
                .ok_or_else(|| Error::Data(format!("label index {j} out of range")))
        };
        writeln!(
            w,
            "{},{},{:?},{:?},{:?}",
            name(p.gold)?,
            name(p.pred)?,
            p.vad[0],
            p.vad[1],
            p.vad[2]
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn export_vad_scatter(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    if report.vad_scatter.is_empty() {
        return Err(Error::Empty("export_vad_scatter"));
    }
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_vad_scatter(&mut w, report)?;
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Parses a scatter CSV back into `(gold, pred, vad)` rows.
pub fn read_vad_scatter(r: impl BufRead) -> Result<Vec<(String, String, [f64; 3])>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<scatter>", e))?;
        if i == 0 {
            if line != SCATTER_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header {SCATTER_HEADER:?}"),
                });
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        };
        if f.len() != 5 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 5 fields, found {}", f.len()),
            });
        }
        out.push((
            f[0].to_string(),
            f[1].to_string(),
            [parse(f[2])?, parse(f[3])?, parse(f[4])?],
        ));
    }
    Ok(out)
}
