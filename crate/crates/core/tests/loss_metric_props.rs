use proptest::prelude::*;

use sccl::losses::{
    erc_loss, sccl_loss, scl_loss, vad_regression_loss, vadcl_loss, EmptyClusterPolicy, LossConfig, PredClusters,
    TauPlacement,
};
use sccl::metrics::{macro_f1, micro_f1_excluding, weighted_f1, Confusion};
use sccl::prototypes::LabelClusters;
use sccl::tensor::{Graph, Tensor};

fn unit3() -> impl Strategy<Value = [f64; 3]> {
    [0.001f64..0.999, 0.001f64..0.999, 0.001f64..0.999]
}

/// Predicted cluster means (some absent) with label rows for each cluster.
fn clusters() -> impl Strategy<Value = (Vec<Option<[f64; 3]>>, Vec<[f64; 3]>)> {
    (2usize..8)
        .prop_flat_map(|e| {
            (
                prop::collection::vec(prop::option::weighted(0.7, unit3()), e),
                prop::collection::vec(unit3(), e),
                0..e,
                unit3(),
            )
        })
        .prop_map(|(mut preds, rows, forced, fill)| {
            preds[forced].get_or_insert(fill);
            (preds, rows)
        })
}

fn sccl_value(preds: &[Option<[f64; 3]>], rows: &[[f64; 3]], cfg: &LossConfig, policy: EmptyClusterPolicy) -> f64 {
    let mut g = Graph::new();
    let means = preds
        .iter()
        .map(|p| p.map(|p| g.constant(Tensor::vector(p.to_vec()))))
        .collect();
    let labels = LabelClusters { rows: rows.to_vec(), present: preds.iter().map(Option::is_some).collect() };
    let t = sccl_loss(&mut g, PredClusters { means }, labels, cfg, policy).unwrap();
    g.value(t.loss).item()
}

fn labelled_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..9, 1usize..5).prop_flat_map(|(b, e)| {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), b),
            prop::collection::vec(0..e, b),
        )
    })
}

fn confusion() -> impl Strategy<Value = Confusion> {
    (2usize..7).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(0u64..20, n), n)
            .prop_map(|rows| Confusion::from_rows(rows).unwrap())
    })
}

proptest! {
    #[test]
    fn sccl_is_finite_and_nonnegative((preds, rows) in clusters(), tau in 0.05f64..5.0, skip in any::<bool>()) {
        let policy = if skip { EmptyClusterPolicy::Skip } else { EmptyClusterPolicy::PrototypeDenominator };
        let v = sccl_value(&preds, &rows, &LossConfig { tau, ..LossConfig::default() }, policy);
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn literal_placement_ignores_tau((preds, rows) in clusters(), tau in 0.05f64..5.0) {
        let at = |tau| sccl_value(
            &preds,
            &rows,
            &LossConfig { tau, tau_placement: TauPlacement::PaperLiteral, ..LossConfig::default() },
            EmptyClusterPolicy::Skip,
        );
        prop_assert!((at(tau) - at(1.0)).abs() <= 1e-12);
    }

    #[test]
    fn sccl_is_invariant_to_cluster_relabelling((preds, rows) in clusters(), shift in 0usize..8) {
        let e = preds.len();
        let rot = |k: usize| (k + shift) % e;
        let p2: Vec<_> = (0..e).map(|k| preds[rot(k)]).collect();
        let r2: Vec<_> = (0..e).map(|k| rows[rot(k)]).collect();
        for policy in [EmptyClusterPolicy::Skip, EmptyClusterPolicy::PrototypeDenominator] {
            let a = sccl_value(&preds, &rows, &LossConfig::default(), policy);
            let b = sccl_value(&p2, &r2, &LossConfig::default(), policy);
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn scl_ignores_row_scale((x, labels) in labelled_rows(), c in 0.1f64..10.0) {
        let scaled: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let value = |rows: &[Vec<f64>]| {
            let mut g = Graph::new();
            let e = g.constant(Tensor::from_rows(rows).unwrap());
            let l = scl_loss(&mut g, e, &labels, 0.5).unwrap();
            g.value(l).item()
        };
        prop_assert!((value(&x) - value(&scaled)).abs() <= 1e-10);
    }

    #[test]
    fn contrastive_losses_are_nonnegative_or_zero((x, labels) in labelled_rows()) {
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_rows(&x).unwrap());
        let v = vadcl_loss(&mut g, e, &labels, 1.0).unwrap();
        let s = scl_loss(&mut g, e, &labels, 1.0).unwrap();
        for l in [v, s] {
            let val = g.value(l).item();
            prop_assert!(val.is_finite() && val >= -1e-12);
        }
    }

    #[test]
    fn erc_loss_is_the_mean_negative_log_probability(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..8),
        picks in prop::collection::vec(0usize..4, 8),
    ) {
        let probs: Vec<Vec<f64>> = rows.iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect() }).collect();
        let b = probs.len();
        let mut oh = vec![0.0; b * 4];
        for i in 0..b { oh[i * 4 + picks[i]] = 1.0; }
        let expected = -(0..b).map(|i| probs[i][picks[i]].ln()).sum::<f64>() / b as f64;
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&probs).unwrap());
        let l = erc_loss(&mut g, p, &Tensor::matrix(b, 4, oh).unwrap()).unwrap();
        prop_assert!((g.value(l).item() - expected).abs() <= 1e-12);
    }

    #[test]
    fn regression_loss_lies_in_zero_two(rows in prop::collection::vec(unit3(), 2..10), targets in prop::collection::vec(unit3(), 10)) {
        let b = rows.len();
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&rows).unwrap());
        let t = Tensor::from_rows(&targets[..b]).unwrap();
        let l = vad_regression_loss(&mut g, v, &t).unwrap();
        let val = g.value(l).item();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&val));
    }

    #[test]
    fn f1_scores_are_bounded_and_permutation_invariant(c in confusion(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = c.n();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let p = c.permuted(&perm);
        if let Ok(w) = weighted_f1(&c) {
            prop_assert!((0.0..=1.0).contains(&w));
            prop_assert!((w - weighted_f1(&p).unwrap()).abs() <= 1e-12);
            prop_assert!((macro_f1(&c).unwrap() - macro_f1(&p).unwrap()).abs() <= 1e-12);
        }
        for x in 0..n {
            match (micro_f1_excluding(&c, x), micro_f1_excluding(&p, perm[x])) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-12 && (0.0..=1.0).contains(&a)),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "permutation changed micro-F1 definedness"),
            }
        }
    }

    #[test]
    fn perfect_predictions_score_one(diag in prop::collection::vec(1u64..30, 2..7)) {
        let n = diag.len();
        let rows = (0..n).map(|i| (0..n).map(|j| if i == j { diag[i] } else { 0 }).collect()).collect();
        let c = Confusion::from_rows(rows).unwrap();
        prop_assert_eq!(weighted_f1(&c).unwrap(), 1.0);
        prop_assert_eq!(micro_f1_excluding(&c, 0).unwrap(), 1.0);
    }
}
