//! Training objectives on the [`Graph`] tape.
//!
//! [`sccl_loss`] contrasts per-emotion means of predicted VAD vectors with
//! label-side cluster representations. [`scl_loss`], [`vadcl_loss`] and
//! [`vad_regression_loss`] are the comparison objectives.

use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::prototypes::{LabelClusters, PrototypeMode};
use crate::tensor::{Graph, Tensor, Var};

/// Floor applied to probabilities before taking logs in [`erc_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Where the temperature enters the similarity score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPlacement {
    /// `log softmax_k(ĥ·m_k / τ)`.
    #[default]
    InsideExp,
    /// `log[(exp(ĥ·m_j)/τ) / Σ_k (exp(ĥ·m_k)/τ)]`, in which τ cancels.
    PaperLiteral,
}

/// Which clusters enter the softmax denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyClusterPolicy {
    /// Only clusters present in the batch.
    Skip,
    /// Every emotion; absent ones contribute their fixed prototype.
    PrototypeDenominator,
}

impl EmptyClusterPolicy {
    pub fn default_for(mode: PrototypeMode) -> Self {
        match mode {
            PrototypeMode::Hvad => Self::Skip,
            PrototypeMode::Nrc | PrototypeMode::Random => Self::PrototypeDenominator,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub tau_placement: TauPlacement,
    /// `None` picks [`EmptyClusterPolicy::default_for`] the prototype mode.
    pub empty_cluster_policy: Option<EmptyClusterPolicy>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            alpha: 0.8,
            tau_placement: TauPlacement::InsideExp,
            empty_cluster_policy: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn policy(&self, mode: PrototypeMode) -> EmptyClusterPolicy {
        self.empty_cluster_policy
            .unwrap_or_else(|| EmptyClusterPolicy::default_for(mode))
    }
}

/// Per-emotion means of predicted VAD rows; `None` marks an empty cluster.
#[derive(Clone, Debug)]
pub struct PredClusters {
    pub means: Vec<Option<Var>>,
}

impl PredClusters {
    pub fn mask(&self) -> Vec<bool> {
        self.means.iter().map(Option::is_some).collect()
    }

    pub fn present(&self) -> usize {
        self.means.iter().flatten().count()
    }
}

pub fn aggregate_pred_clusters(g: &mut Graph, vad: Var, batch: &Batch) -> Result<PredClusters> {
    let rows = g.shape(vad).first().copied().unwrap_or(0);
    if g.shape(vad).len() != 2 || rows != batch.len() {
        return Err(Error::Shape {
            op: "aggregate_pred_clusters",
            lhs: g.shape(vad).to_vec(),
            rhs: vec![batch.len(), 3],
        });
    }
    let mut means = Vec::with_capacity(batch.n_emotions);
    for j in 0..batch.n_emotions {
        let members = batch.members(j);
        means.push(if members.is_empty() {
            None
        } else {
            let sel = g.select_rows(vad, &members)?;
            Some(g.mean(sel, Some(0))?)
        });
    }
    Ok(PredClusters { means })
}

pub struct ScclTerms {
    pub pred_clusters: PredClusters,
    pub label_clusters: LabelClusters,
    /// `(j, sim(j))` for each present cluster.
    pub sim: Vec<(usize, Var)>,
    pub loss: Var,
}

/// `−(1/n) Σ_j sim(j)` over the `n` present clusters.
pub fn sccl_loss(
    g: &mut Graph,
    pred: PredClusters,
    labels: LabelClusters,
    cfg: &LossConfig,
    policy: EmptyClusterPolicy,
) -> Result<ScclTerms> {
    cfg.validate()?;
    if pred.means.len() != labels.rows.len() {
        return Err(Error::Shape {
            op: "sccl_loss",
            lhs: vec![pred.means.len()],
            rhs: vec![labels.rows.len()],
        });
    }
    if pred.present() == 0 {
        return Err(Error::Empty("sccl_loss"));
    }
    let denom: Vec<usize> = match policy {
        EmptyClusterPolicy::Skip => (0..pred.means.len())
            .filter(|&k| pred.means[k].is_some())
            .collect(),
        EmptyClusterPolicy::PrototypeDenominator => (0..labels.rows.len()).collect(),
    };
    let m = Tensor::from_rows(&denom.iter().map(|&k| labels.rows[k]).collect::<Vec<_>>())?;
    let m = g.constant(m);
    let mut sim = Vec::new();
    for (j, h) in pred.means.iter().enumerate() {
        let Some(h) = *h else { continue };
        let pos = denom.iter().position(|&k| k == j).expect("present cluster in denominator");
        let col = g.reshape(h, vec![3, 1])?;
        let logits = g.matmul(m, col)?;
        let logits = g.reshape(logits, vec![denom.len()])?;
        let s = match cfg.tau_placement {
            TauPlacement::InsideExp => {
                let scaled = g.scale(logits, 1.0 / cfg.tau);
                let ls = g.log_softmax(scaled, 0)?;
                g.gather(ls, vec![pos], vec![])?
            }
            TauPlacement::PaperLiteral => {
                let e = g.exp(logits)?;
                let e = g.scale(e, 1.0 / cfg.tau);
                let num = g.gather(e, vec![pos], vec![])?;
                let den = g.sum(e, None)?;
                let ratio = g.div(num, den)?;
                g.log(ratio)?
            }
        };
        sim.push((j, s));
    }
    let parts: Vec<Var> = sim.iter().map(|&(_, s)| s).collect();
    let mean = mean_of(g, &parts)?;
    let loss = g.neg(mean);
    Ok(ScclTerms {
        pred_clusters: pred,
        label_clusters: labels,
        sim,
        loss,
    })
}

/// Cross-entropy `−(1/|B|) Σ_ij M_ij log max(Ŷ_ij, 1e-12)` against a one-hot `M`.
pub fn erc_loss(g: &mut Graph, probs: Var, one_hot: &Tensor) -> Result<Var> {
    if g.shape(probs) != one_hot.shape() {
        return Err(Error::Shape {
            op: "erc_loss",
            lhs: g.shape(probs).to_vec(),
            rhs: one_hot.shape().to_vec(),
        });
    }
    let rows = one_hot.shape()[0];
    if rows == 0 {
        return Err(Error::Empty("erc_loss"));
    }
    let floored = g.clamp_min(probs, PROB_FLOOR);
    let logp = g.log(floored)?;
    let m = g.constant(one_hot.clone());
    let picked = g.mul(logp, m)?;
    let total = g.sum(picked, None)?;
    Ok(g.scale(total, -1.0 / rows as f64))
}

/// `L_ERC + α·L_aux`.
pub fn combined_loss(g: &mut Graph, l_erc: Var, l_aux: Var, alpha: f64) -> Result<Var> {
    let weighted = g.scale(l_aux, alpha);
    g.add(l_erc, weighted)
}

/// Supervised contrastive loss over L2-normalised rows of `emb`.
pub fn scl_loss(g: &mut Graph, emb: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let z = g.l2_normalize_rows(emb)?;
    contrastive(g, z, labels, tau, "scl_loss")
}

/// Supervised contrastive loss on raw VAD predictions.
pub fn vadcl_loss(g: &mut Graph, vad: Var, labels: &[usize], tau: f64) -> Result<Var> {
    contrastive(g, vad, labels, tau, "vadcl_loss")
}

fn contrastive(g: &mut Graph, z: Var, labels: &[usize], tau: f64, op: &'static str) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let b = match *g.shape(z) {
        [b, _] if b == labels.len() => b,
        ref s => {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            })
        }
    };
    if b < 2 {
        log::warn!("{op}: batch of {b} has no contrastive pairs; loss defined as 0");
        return Ok(g.scalar(0.0));
    }
    let zt = g.transpose(z)?;
    let s = g.matmul(z, zt)?;
    let s = g.scale(s, 1.0 / tau);
    let mut anchors = Vec::new();
    for i in 0..b {
        let others: Vec<usize> = (0..b).filter(|&a| a != i).collect();
        let positives: Vec<usize> = others
            .iter()
            .enumerate()
            .filter(|&(_, &a)| labels[a] == labels[i])
            .map(|(k, _)| k)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let row = g.gather(s, others.iter().map(|&a| i * b + a).collect(), vec![b - 1])?;
        let ls = g.log_softmax(row, 0)?;
        let n = positives.len();
        let pos = g.gather(ls, positives, vec![n])?;
        anchors.push(g.mean(pos, None)?);
    }
    if anchors.is_empty() {
        log::debug!("{op}: no anchor has a positive");
        return Ok(g.scalar(0.0));
    }
    let mean = mean_of(g, &anchors)?;
    Ok(g.neg(mean))
}

/// Mean over the three dimensions of `1 − r`, with `r` the Pearson
/// correlation across the batch. A dimension with zero variance on either
/// side contributes 1.
pub fn vad_regression_loss(g: &mut Graph, vad: Var, targets: &Tensor) -> Result<Var> {
    if g.shape(vad) != targets.shape() || targets.rank() != 2 {
        return Err(Error::Shape {
            op: "vad_regression_loss",
            lhs: g.shape(vad).to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let (b, dims) = (targets.shape()[0], targets.shape()[1]);
    if b < 2 {
        return Err(Error::Domain {
            op: "vad_regression_loss",
            detail: format!("correlation needs at least 2 samples, got {b}"),
        });
    }
    let mut t = targets.clone();
    for d in 0..dims {
        let mean = (0..b).map(|i| t.at(i, d)).sum::<f64>() / b as f64;
        for i in 0..b {
            t.data_mut()[i * dims + d] -= mean;
        }
    }
    let t_var: Vec<f64> = (0..dims)
        .map(|d| (0..b).map(|i| t.at(i, d).powi(2)).sum())
        .collect();
    let tc = g.constant(t);

    let mu = g.mean(vad, Some(0))?;
    let mu = g.broadcast_rows(mu, b)?;
    let pc = g.sub(vad, mu)?;
    let prod = g.mul(pc, tc)?;
    let cov = g.sum(prod, Some(0))?;
    let sq = g.mul(pc, pc)?;
    let p_var = g.sum(sq, Some(0))?;

    let mut terms = Vec::with_capacity(dims);
    for (d, &tv) in t_var.iter().enumerate() {
        let pv = g.value(p_var).data()[d];
        if tv <= 0.0 || pv <= 0.0 {
            terms.push(g.scalar(1.0));
            continue;
        }
        let c = g.gather(cov, vec![d], vec![])?;
        let v = g.gather(p_var, vec![d], vec![])?;
        let sd = g.sqrt(v)?;
        let r = g.div(c, sd)?;
        let r = g.scale(r, 1.0 / tv.sqrt());
        let one_minus = g.neg(r);
        terms.push(g.add_scalar(one_minus, 1.0));
    }
    mean_of(g, &terms)
}

/// Mean of one-element tensors.
fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let flat = parts
        .iter()
        .map(|&p| g.reshape(p, vec![1]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_rows(&flat)?;
    g.mean(stacked, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::{BuiltinSet, PrototypeTable};
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clusters(rows: Vec<[f64; 3]>, present: Vec<bool>) -> LabelClusters {
        LabelClusters { rows, present }
    }

    fn sccl_value(preds: &[Option<[f64; 3]>], labels: &LabelClusters, cfg: &LossConfig, policy: EmptyClusterPolicy) -> f64 {
        let mut g = Graph::new();
        let means = preds
            .iter()
            .map(|p| p.map(|p| g.constant(Tensor::vector(p.to_vec()))))
            .collect();
        let t = sccl_loss(&mut g, PredClusters { means }, labels.clone(), cfg, policy).unwrap();
        g.value(t.loss).item()
    }

    /// Scalar reference: plain loops, τ inside the exponent.
    fn sccl_reference(preds: &[Option<[f64; 3]>], rows: &[[f64; 3]], tau: f64, all: bool) -> f64 {
        let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let denom: Vec<usize> = (0..rows.len()).filter(|&k| all || preds[k].is_some()).collect();
        let mut total = 0.0;
        let mut n = 0.0;
        for (j, p) in preds.iter().enumerate() {
            let Some(h) = p else { continue };
            let z: f64 = denom.iter().map(|&k| (dot(h, &rows[k]) / tau).exp()).sum();
            total += dot(h, &rows[j]) / tau - z.ln();
            n += 1.0;
        }
        -total / n
    }

    fn rand_vad(rng: &mut ChaCha8Rng) -> [f64; 3] {
        [rng.random(), rng.random(), rng.random()]
    }

    #[test]
    fn two_member_mean() {
        let mut g = Graph::new();
        let vad = g.constant(Tensor::from_rows(&[[0.2, 0.2, 0.2], [0.4, 0.6, 0.8], [0.9, 0.9, 0.9]]).unwrap());
        let batch = Batch::from_parts(Vec::new(), vec![0, 0, 1], vec![None; 3], 3);
        let pc = aggregate_pred_clusters(&mut g, vad, &batch).unwrap();
        assert_eq!(pc.mask(), vec![true, true, false]);
        let m = g.value(pc.means[0].unwrap()).data().to_vec();
        for (a, b) in m.iter().zip([0.3, 0.4, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(g.value(pc.means[1].unwrap()).data(), &[0.9, 0.9, 0.9]);
    }

    #[test]
    fn row_count_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let vad = g.constant(Tensor::zeros(&[2, 3]));
        let batch = Batch::from_parts(Vec::new(), vec![0], vec![None], 2);
        assert!(matches!(aggregate_pred_clusters(&mut g, vad, &batch), Err(Error::Shape { .. })));
    }

    #[test]
    fn happy_sad_frozen_value() {
        let h = [0.960, 0.732, 0.850];
        let s = [0.052, 0.288, 0.164];
        let labels = clusters(vec![h, s], vec![true, true]);
        let v = sccl_value(&[Some(h), Some(s)], &labels, &LossConfig::default(), EmptyClusterPolicy::Skip);
        assert!((v - 0.501_558_040_308_378_5).abs() < 1e-12, "{v}");
    }

    #[test]
    fn paper_literal_is_tau_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rows: Vec<[f64; 3]> = (0..4).map(|_| rand_vad(&mut rng)).collect();
            let preds: Vec<Option<[f64; 3]>> = (0..4)
                .map(|k| (k == 0 || rng.random_bool(0.7)).then(|| rand_vad(&mut rng)))
                .collect();
            let labels = clusters(rows.clone(), preds.iter().map(Option::is_some).collect());
            let at = |tau: f64, placement| {
                let cfg = LossConfig { tau, tau_placement: placement, ..LossConfig::default() };
                sccl_value(&preds, &labels, &cfg, EmptyClusterPolicy::PrototypeDenominator)
            };
            let base = at(1.0, TauPlacement::PaperLiteral);
            for tau in [0.5, 2.0] {
                assert!((at(tau, TauPlacement::PaperLiteral) - base).abs() < 1e-12);
            }
            assert!((at(1.0, TauPlacement::InsideExp) - base).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_reference_under_both_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let rows: Vec<[f64; 3]> = (0..5).map(|_| rand_vad(&mut rng)).collect();
            let preds: Vec<Option<[f64; 3]>> = (0..5)
                .map(|k| (k == 2 || rng.random_bool(0.6)).then(|| rand_vad(&mut rng)))
                .collect();
            let labels = clusters(rows.clone(), preds.iter().map(Option::is_some).collect());
            let tau = rng.random_range(0.2..2.0);
            let cfg = LossConfig { tau, ..LossConfig::default() };
            for (policy, all) in [(EmptyClusterPolicy::Skip, false), (EmptyClusterPolicy::PrototypeDenominator, true)] {
                let got = sccl_value(&preds, &labels, &cfg, policy);
                let want = sccl_reference(&preds, &rows, tau, all);
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn sim_is_non_positive() {
        let table = PrototypeTable::builtin(BuiltinSet::Iemocap);
        let rows: Vec<[f64; 3]> = table.points().iter().map(|p| p.to_array()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let means = (0..6).map(|_| Some(g.constant(Tensor::vector(rand_vad(&mut rng).to_vec())))).collect();
        let t = sccl_loss(&mut g, PredClusters { means }, clusters(rows, vec![true; 6]), &LossConfig::default(), EmptyClusterPolicy::Skip).unwrap();
        assert_eq!(t.sim.len(), 6);
        assert!(t.sim.iter().all(|&(_, s)| g.value(s).item() <= 0.0));
    }

    #[test]
    fn errors() {
        let labels = clusters(vec![[0.5; 3]; 2], vec![false; 2]);
        let mut g = Graph::new();
        let empty = PredClusters { means: vec![None, None] };
        assert!(matches!(
            sccl_loss(&mut g, empty.clone(), labels.clone(), &LossConfig::default(), EmptyClusterPolicy::Skip),
            Err(Error::Empty(_))
        ));
        let cfg = LossConfig { tau: 0.0, ..LossConfig::default() };
        assert!(matches!(sccl_loss(&mut g, empty, labels, &cfg, EmptyClusterPolicy::Skip), Err(Error::Config(_))));
    }

    #[test]
    fn own_prototype_direction_decreases_loss() {
        // Happy and excited have the largest self dot product of the IEMOCAP
        // prototypes, so pushing their cluster means along the prototype
        // decreases the loss whatever the softmax weights are.
        let table = PrototypeTable::builtin(BuiltinSet::Iemocap);
        let rows: Vec<[f64; 3]> = table.points().iter().map(|p| p.to_array()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let preds: Vec<[f64; 3]> = (0..6).map(|_| rand_vad(&mut rng)).collect();
            for name in ["happy", "excited"] {
                let j = table.emotions.index_of(name).unwrap();
                let mut g = Graph::new();
                let vars: Vec<Var> = preds.iter().map(|p| g.param(&Tensor::vector(p.to_vec()))).collect();
                let t = sccl_loss(
                    &mut g,
                    PredClusters { means: vars.iter().copied().map(Some).collect() },
                    clusters(rows.clone(), vec![true; 6]),
                    &LossConfig::default(),
                    EmptyClusterPolicy::PrototypeDenominator,
                )
                .unwrap();
                g.backward(t.loss).unwrap();
                let grad = g.grad(vars[j]).unwrap();
                let dir: f64 = grad.iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                assert!(dir < 0.0, "{name}: {dir}");
            }
        }
    }

    #[test]
    fn erc_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[3, 6], 1.0 / 6.0));
        let mut oh = Tensor::zeros(&[3, 6]);
        for i in 0..3 {
            oh.data_mut()[i * 6 + i] = 1.0;
        }
        let l = erc_loss(&mut g, p, &oh).unwrap();
        assert!((g.value(l).item() - 6f64.ln()).abs() < 1e-12);

        let perfect = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let l = erc_loss(&mut g, perfect, &Tensor::eye(2)).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let zero = g.constant(Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
        let l = erc_loss(&mut g, zero, &Tensor::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert!((g.value(l).item() + PROB_FLOOR.ln()).abs() < 1e-9);

        let bad = g.constant(Tensor::full(&[2, 6], 1.0 / 6.0));
        assert!(matches!(erc_loss(&mut g, bad, &oh), Err(Error::Shape { .. })));
    }

    #[test]
    fn combined_arithmetic_and_alpha_zero() {
        let mut g = Graph::new();
        let a = g.scalar(1.0);
        let b = g.scalar(2.0);
        let l = combined_loss(&mut g, a, b, 0.5).unwrap();
        assert_eq!(g.value(l).item(), 2.0);

        let x = Tensor::from_rows(&[[0.3, -0.2, 0.9], [0.1, 0.4, -0.5]]).unwrap();
        let oh = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let run = |with_aux: bool| {
            let mut g = Graph::new();
            let xv = g.param(&x);
            let p = g.softmax(xv, 1).unwrap();
            let erc = erc_loss(&mut g, p, &oh).unwrap();
            let loss = if with_aux {
                let s = g.sigmoid(xv);
                let aux = vadcl_loss(&mut g, s, &[0, 0], 1.0).unwrap();
                combined_loss(&mut g, erc, aux, 0.0).unwrap()
            } else {
                erc
            };
            g.backward(loss).unwrap();
            (g.value(loss).item(), g.grad(xv).unwrap().to_vec())
        };
        let (l0, g0) = run(false);
        let (l1, g1) = run(true);
        assert_eq!(l0, l1);
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    /// Pairwise reference written directly from the definition.
    fn contrastive_reference(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let b = z.len();
        let dot = |i: usize, j: usize| z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..b {
            let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let den: f64 = (0..b).filter(|&a| a != i).map(|a| dot(i, a).exp()).sum();
            let s: f64 = pos.iter().map(|&p| (dot(i, p).exp() / den).ln()).sum();
            total += -s / pos.len() as f64;
            anchors += 1;
        }
        if anchors == 0 {
            0.0
        } else {
            total / anchors as f64
        }
    }

    fn normalize(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn scl_matches_pairwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = [0, 1, 0, 2, 1, 0];
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_rows(&rows).unwrap());
        let l = scl_loss(&mut g, e, &labels, 0.7).unwrap();
        let z: Vec<Vec<f64>> = rows.iter().map(|r| normalize(r)).collect();
        let want = contrastive_reference(&z, &labels, 0.7);
        assert!((g.value(l).item() - want).abs() < 1e-10);
    }

    #[test]
    fn scl_single_pair_and_singleton() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_rows(&[[1.0, 2.0], [-0.5, 0.3]]).unwrap());
        let l = scl_loss(&mut g, e, &[1, 1], 0.1).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);
        let one = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let l = scl_loss(&mut g, one, &[0], 1.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = vadcl_loss(&mut g, one, &[0], 1.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn vadcl_equal_predictions() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::full(&[4, 3], 0.4));
        let labels = [0, 0, 1, 1];
        let l = vadcl_loss(&mut g, v, &labels, 1.0).unwrap();
        let want = contrastive_reference(&vec![vec![0.4; 3]; 4], &labels, 1.0);
        assert!((g.value(l).item() - want).abs() < 1e-12);
        assert!((want - 3f64.ln()).abs() < 1e-12);
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn regression_examples() {
        let t = Tensor::from_rows(&[[0.1, 0.9, 0.3], [0.5, 0.2, 0.8], [0.7, 0.4, 0.1]]).unwrap();
        let mut g = Graph::new();
        let same = g.constant(t.clone());
        let l = vad_regression_loss(&mut g, same, &t).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let anti: Vec<f64> = t.data().iter().map(|x| 1.0 - x).collect();
        let anti = g.constant(Tensor::matrix(3, 3, anti).unwrap());
        let l = vad_regression_loss(&mut g, anti, &t).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-12);

        let flat = g.constant(Tensor::full(&[3, 3], 0.5));
        let l = vad_regression_loss(&mut g, flat, &t).unwrap();
        assert_eq!(g.value(l).item(), 1.0);

        let one = g.constant(Tensor::zeros(&[1, 3]));
        assert!(vad_regression_loss(&mut g, one, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn regression_matches_scalar_pearson() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let p: Vec<[f64; 3]> = (0..7).map(|_| rand_vad(&mut rng)).collect();
        let t: Vec<[f64; 3]> = (0..7).map(|_| rand_vad(&mut rng)).collect();
        let mut g = Graph::new();
        let pv = g.constant(Tensor::from_rows(&p).unwrap());
        let l = vad_regression_loss(&mut g, pv, &Tensor::from_rows(&t).unwrap()).unwrap();
        let want: f64 = (0..3)
            .map(|d| {
                let x: Vec<f64> = p.iter().map(|r| r[d]).collect();
                let y: Vec<f64> = t.iter().map(|r| r[d]).collect();
                1.0 - pearson(&x, &y)
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.value(l).item() - want).abs() < 1e-10);
    }

    #[test]
    fn losses_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut mat = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = mat(5, 3);
        let labels = vec![0usize, 1, 0, 2, 1];
        let batch = Batch::from_parts(Vec::new(), labels.clone(), vec![None; 5], 4);
        let table = PrototypeTable::builtin(BuiltinSet::Iemocap);
        let rows: Vec<[f64; 3]> = table.points()[..4].iter().map(|p| p.to_array()).collect();
        let targets = mat(5, 3);
        let one_hot = batch.one_hot();
        let opts = GradCheckOptions::default();
        for placement in [TauPlacement::InsideExp, TauPlacement::PaperLiteral] {
            for policy in [EmptyClusterPolicy::Skip, EmptyClusterPolicy::PrototypeDenominator] {
                let cfg = LossConfig { tau: 0.5, tau_placement: placement, ..LossConfig::default() };
                let r = grad_check(
                    |g, p| {
                        let s = g.sigmoid(p[0]);
                        let pc = aggregate_pred_clusters(g, s, &batch)?;
                        let lc = LabelClusters { rows: rows.clone(), present: pc.mask() };
                        Ok(sccl_loss(g, pc, lc, &cfg, policy)?.loss)
                    },
                    &[x.clone()],
                    &opts,
                )
                .unwrap();
                assert!(r.passed, "sccl {placement:?} {policy:?}: {}", r.max_rel_err);
            }
        }
        let checks: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)> = vec![
            ("erc", Box::new(|g: &mut Graph, p: &[Var]| {
                let pr = g.softmax(p[0], 1)?;
                erc_loss(g, pr, &one_hot)
            })),
            ("scl", Box::new(|g: &mut Graph, p: &[Var]| scl_loss(g, p[0], &labels, 0.3))),
            ("vadcl", Box::new(|g: &mut Graph, p: &[Var]| {
                let s = g.sigmoid(p[0]);
                vadcl_loss(g, s, &labels, 0.5)
            })),
            ("regression", Box::new(|g: &mut Graph, p: &[Var]| {
                let s = g.sigmoid(p[0]);
                vad_regression_loss(g, s, &targets)
            })),
        ];
        for (name, f) in checks {
            let input = if name == "erc" { mat(5, 4) } else { x.clone() };
            let r = grad_check(|g, p| f(g, p), &[input], &opts).unwrap();
            assert!(r.passed, "{name}: {}", r.max_rel_err);
        }
    }
}
