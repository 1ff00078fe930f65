//! Seeded training runs and the experiment drivers built on them.
//!
//! A run is a pure function of the [`Dataset`], the [`TrainSetup`] and a seed:
//! the seed fixes parameter initialisation, the per-epoch shuffles and the
//! dropout masks, so repeated runs are bit-identical on one platform.

mod experiments;
mod gradcheck;
mod optim;

pub use experiments::{
    batch_stability_experiment, compare, mean_sd, CompareReport, CompareRow, StabilityCell,
    StabilityTable,
};
pub use gradcheck::{
    full_model_gradcheck, gradcheck_batch, gradcheck_setup, FullModelCheck, MethodCheck, AUX_METHODS,
};
pub use optim::{lr_schedule, AdamW, AdamWConfig};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_samples, make_batches, sequential_batches, split_dialogues, validate_corpus, Batch, Dialogue,
    Sample, Vocab, WindowConfig,
};
use crate::encoder::{AdapterConfig, EncoderConfig, ForwardOut, Model};
use crate::error::{Error, Result};
use crate::losses::{
    aggregate_pred_clusters, combined_loss, erc_loss, sccl_loss, scl_loss, vad_regression_loss,
    vadcl_loss, LossConfig,
};
use crate::metrics::{EvalReport, ScatterPoint};
use crate::prototypes::{label_cluster_vad, EmotionSet, PrototypeMode, PrototypeTable};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};

/// Auxiliary objective trained jointly with cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cross-entropy only.
    None,
    Sccl,
    Scl,
    Vadcl,
    /// SCCL against random prototypes.
    RandomSccl,
    /// Correlation loss between predicted VAD and per-sample targets.
    Regression,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::None,
        Method::Sccl,
        Method::Scl,
        Method::Vadcl,
        Method::RandomSccl,
        Method::Regression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Sccl => "sccl",
            Method::Scl => "scl",
            Method::Vadcl => "vadcl",
            Method::RandomSccl => "random_sccl",
            Method::Regression => "regression",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub prototype_mode: PrototypeMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    /// Seed of the random prototype table; each run's own seed when absent.
    pub prototype_seed: Option<u64>,
    pub eval_batch_size: usize,
    /// Score the validation split after every epoch.
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Sccl,
            prototype_mode: PrototypeMode::Nrc,
            batch_size: 8,
            epochs: 10,
            peak_lr: 3e-3,
            warmup_ratio: 0.2,
            weight_decay: 0.01,
            seeds: vec![0, 1, 2, 3, 4],
            prototype_seed: None,
            eval_batch_size: 64,
            validate_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 1]",
                self.warmup_ratio
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs besides data and seed.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.encoder.validate()?;
        self.adapter.validate(self.encoder.n_layers)
    }

    pub fn with_method(&self, method: Method) -> Self {
        let mut s = self.clone();
        s.train.method = method;
        s
    }
}

/// Encoded train/valid/test samples plus the label set, vocabulary and
/// prototypes they were built with.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub emotions: EmotionSet,
    pub vocab: Vocab,
    pub prototypes: PrototypeTable,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Splits `dialogues` 80/10/10 by id hash and encodes every utterance.
    pub fn from_dialogues(
        dialogues: &[Dialogue],
        prototypes: PrototypeTable,
        vocab: Vocab,
        window: &WindowConfig,
    ) -> Result<Self> {
        let (train, valid, test) = split_dialogues(dialogues);
        Self::from_splits(&train, &valid, &test, prototypes, vocab, window)
    }

    pub fn from_splits(
        train: &[Dialogue],
        valid: &[Dialogue],
        test: &[Dialogue],
        prototypes: PrototypeTable,
        vocab: Vocab,
        window: &WindowConfig,
    ) -> Result<Self> {
        let e = prototypes.len();
        for part in [train, valid, test] {
            validate_corpus(part, &vocab, e)?;
        }
        let data = Self {
            emotions: prototypes.emotions.clone(),
            train: build_samples(train, window, &vocab)?,
            valid: build_samples(valid, window, &vocab)?,
            test: build_samples(test, window, &vocab)?,
            vocab,
            prototypes,
        };
        if data.train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if data.test.is_empty() {
            return Err(Error::Data("test split is empty".into()));
        }
        Ok(data)
    }
}

/// Losses recorded for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub erc: f64,
    /// Unweighted auxiliary loss; 0 for [`Method::None`].
    pub aux: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub method: Method,
    /// Seed of the random prototypes, for runs that use them.
    pub prototype_seed: Option<u64>,
    pub final_report: EvalReport,
    pub loss_curve: Vec<LossPoint>,
    /// Validation weighted-F1 after each epoch.
    pub epoch_f1: Vec<f64>,
    /// Mean distance between per-emotion centres of the test predictions and
    /// the dataset prototypes.
    pub cluster_distance: Option<f64>,
    pub wallclock: f64,
}

pub struct RunOutput {
    pub result: RunResult,
    pub model: Model,
}

/// Cluster targets used by a method: random for [`Method::RandomSccl`] or
/// `random` mode, otherwise the dataset table in the configured mode.
pub fn prototypes_for(data: &Dataset, cfg: &TrainConfig, seed: u64) -> PrototypeTable {
    let random = cfg.method == Method::RandomSccl || cfg.prototype_mode == PrototypeMode::Random;
    if random {
        PrototypeTable::random(data.emotions.clone(), cfg.prototype_seed.unwrap_or(seed))
    } else {
        data.prototypes.clone().with_mode(cfg.prototype_mode)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One seeded training run followed by evaluation on the test split.
pub fn train_run(data: &Dataset, setup: &TrainSetup, seed: u64) -> Result<RunOutput> {
    setup.validate()?;
    let start = Instant::now();
    let cfg = &setup.train;
    let e = data.emotions.len();
    let mut model = Model::new(setup.encoder.clone(), setup.adapter.clone(), e, seed)?;
    model.check_vocab(&data.vocab)?;
    let table = prototypes_for(data, cfg, seed);
    let mut opt = AdamW::for_model(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut dropout_rng = stream(seed, 1);
    let mut shuffle_rng = stream(seed, 2);
    let mut curve = Vec::with_capacity(total_steps);
    let mut epoch_f1 = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in make_batches(&data.train, cfg.batch_size, e, shuffle_rng.next_u64()) {
            let lr = lr_schedule(step, total_steps, cfg.warmup_ratio, cfg.peak_lr);
            let point = train_step(&mut model, &mut opt, &batch, setup, &table, lr, step, &mut dropout_rng)?;
            curve.push(point);
            step += 1;
        }
        if cfg.validate_each_epoch && !data.valid.is_empty() {
            let r = evaluate(&model, &data.valid, &data.emotions, cfg.eval_batch_size)?;
            log::info!("seed {seed} {} epoch {epoch}: valid weighted-F1 {:.4}", cfg.method, r.weighted_f1);
            epoch_f1.push(r.weighted_f1);
        }
    }
    let final_report = evaluate(&model, &data.test, &data.emotions, cfg.eval_batch_size)?;
    let cluster_distance = cluster_distance(&final_report, &data.prototypes);
    let result = RunResult {
        seed,
        method: cfg.method,
        prototype_seed: table.seed,
        final_report,
        loss_curve: curve,
        epoch_f1,
        cluster_distance,
        wallclock: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { result, model })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &Batch,
    setup: &TrainSetup,
    table: &PrototypeTable,
    lr: f64,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossPoint> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward(&mut g, &p, &batch.windows, Some(rng))?;
    let (erc, aux, total) = objective(&mut g, &out, batch, setup, table)?;
    let point = LossPoint {
        erc: g.value(erc).item(),
        aux: aux.map_or(0.0, |a| g.value(a).item()),
        total: g.value(total).item(),
    };
    if !(point.erc.is_finite() && point.aux.is_finite() && point.total.is_finite()) {
        return Err(Error::Diverged {
            step,
            detail: format!("non-finite loss {point:?}"),
        });
    }
    g.backward(total)?;
    let grads: Vec<Vec<f64>> = p
        .named()
        .iter()
        .map(|(_, &v)| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; g.value(v).len()],
        })
        .collect();
    opt.step_model(&mut model.params, &grads, lr).map_err(|e| match e {
        Error::Diverged { detail, .. } => Error::Diverged { step, detail },
        other => other,
    })?;
    Ok(point)
}

/// Cross-entropy, the method's auxiliary loss (if any) and their combination.
pub fn objective(
    g: &mut Graph,
    out: &ForwardOut,
    batch: &Batch,
    setup: &TrainSetup,
    table: &PrototypeTable,
) -> Result<(Var, Option<Var>, Var)> {
    let erc = erc_loss(g, out.probs, &batch.one_hot())?;
    let tau = setup.loss.tau;
    let aux = match setup.train.method {
        Method::None => None,
        Method::Sccl | Method::RandomSccl => {
            let pred = aggregate_pred_clusters(g, out.vad, batch)?;
            let labels = label_cluster_vad(batch, table)?;
            let policy = setup.loss.policy(table.mode);
            Some(sccl_loss(g, pred, labels, &setup.loss, policy)?.loss)
        }
        Method::Scl => Some(scl_loss(g, out.cls, &batch.labels, tau)?),
        Method::Vadcl => Some(vadcl_loss(g, out.vad, &batch.labels, tau)?),
        Method::Regression if batch.len() < 2 => {
            log::debug!("batch of one carries no correlation signal");
            None
        }
        Method::Regression => {
            let targets = regression_targets(batch, table)?;
            Some(vad_regression_loss(g, out.vad, &targets)?)
        }
    };
    let total = match aux {
        Some(a) => combined_loss(g, erc, a, setup.loss.alpha)?,
        None => erc,
    };
    Ok((erc, aux, total))
}

/// Compares the gradient of the method's training objective on `batch` with
/// central differences over every model parameter. Dropout is off.
pub fn model_grad_check(
    model: &Model,
    batch: &Batch,
    setup: &TrainSetup,
    table: &PrototypeTable,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let tensors: Vec<Tensor> = model.params.named().into_iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |g, vars| {
            let mut it = vars.iter().copied();
            let bound = model.params.map(&mut |_, _| it.next().expect("one var per parameter"));
            let out = model.forward(g, &bound, &batch.windows, None)?;
            Ok(objective(g, &out, batch, setup, table)?.2)
        },
        &tensors,
        opts,
    )
}

/// Per-sample VAD targets: the utterance annotation in `hvad` mode, the
/// label's prototype otherwise.
fn regression_targets(batch: &Batch, table: &PrototypeTable) -> Result<Tensor> {
    let rows = batch
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| match table.mode {
            PrototypeMode::Hvad => batch.hvads[i]
                .map(|p| p.to_array())
                .ok_or_else(|| Error::Data(format!("batch sample {i} has no utterance-level VAD"))),
            _ => Ok(table.get(l).to_array()),
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Scores `samples` in order with dropout off.
pub fn evaluate(model: &Model, samples: &[Sample], emotions: &EmotionSet, batch_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let mut points = Vec::with_capacity(samples.len());
    for batch in sequential_batches(samples, batch_size.max(1), emotions.len()) {
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let out = model.forward(&mut g, &p, &batch.windows, None)?;
        let logits = g.value(out.logits);
        let vad = g.value(out.vad);
        for (i, &gold) in batch.labels.iter().enumerate() {
            let row = logits.row(i);
            let pred = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("at least one class");
            let v = vad.row(i);
            points.push(ScatterPoint {
                gold,
                pred,
                vad: [v[0], v[1], v[2]],
            });
        }
    }
    EvalReport::from_points(emotions, points)
}

/// Mean over gold classes of the distance between the class's mean predicted
/// VAD point and its prototype. `None` when the report has no scatter points.
pub fn cluster_distance(report: &EvalReport, table: &PrototypeTable) -> Option<f64> {
    let e = table.len();
    let mut sums = vec![[0.0f64; 3]; e];
    let mut counts = vec![0usize; e];
    for p in &report.vad_scatter {
        counts[p.gold] += 1;
        for (s, x) in sums[p.gold].iter_mut().zip(p.vad) {
            *s += x;
        }
    }
    let dists: Vec<f64> = (0..e)
        .filter(|&j| counts[j] > 0)
        .map(|j| {
            let proto = table.get(j).to_array();
            sums[j]
                .iter()
                .zip(proto)
                .map(|(s, q)| (s / counts[j] as f64 - q).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64)
}

/// Runs every seed of `setup.train.seeds`.
pub fn train(data: &Dataset, setup: &TrainSetup, exec: crate::exec::Execution) -> Result<Vec<RunOutput>> {
    setup.validate()?;
    exec.map(setup.train.seeds.clone(), |seed| train_run(data, setup, seed))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests;
