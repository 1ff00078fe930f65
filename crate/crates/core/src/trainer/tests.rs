use super::*;
use crate::corpus::{generate_synthetic, SyntheticSpec};
use crate::exec::Execution;

fn dataset(spec: &SyntheticSpec, seed: u64) -> Dataset {
    let dialogues = generate_synthetic(spec, seed).unwrap();
    Dataset::from_dialogues(
        &dialogues,
        spec.prototypes().unwrap(),
        spec.vocab(),
        &WindowConfig { wp: 1, wf: 0, max_len: 32 },
    )
    .unwrap()
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        dialogues: 30,
        min_dialogue_len: 4,
        max_dialogue_len: 6,
        ..SyntheticSpec::default()
    }
}

fn small_setup(method: Method, epochs: usize) -> TrainSetup {
    TrainSetup {
        train: TrainConfig {
            method,
            epochs,
            batch_size: 8,
            seeds: vec![1, 2],
            ..TrainConfig::default()
        },
        encoder: EncoderConfig {
            d_h: 16,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 32,
            max_len: 32,
            dropout: 0.1,
            ..EncoderConfig::default()
        },
        adapter: AdapterConfig {
            interactive_layers: vec![0],
            d_a: 8,
            ff_dim: 16,
            ..AdapterConfig::default()
        },
        ..TrainSetup::default()
    }
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, format!("\"{}\"", m.name()));
    }
    assert!("bogus".parse::<Method>().is_err());
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::default();
    assert!(c.validate().is_ok());
    c.warmup_ratio = 1.5;
    assert!(c.validate().is_err());
    c = TrainConfig { seeds: vec![], ..TrainConfig::default() };
    assert!(c.validate().is_err());
    c = TrainConfig { peak_lr: 0.0, ..TrainConfig::default() };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn zero_epochs_only_evaluates() {
    let data = dataset(&small_spec(), 3);
    let out = train_run(&data, &small_setup(Method::Sccl, 0), 5).unwrap();
    assert!(out.result.loss_curve.is_empty());
    assert!(out.result.epoch_f1.is_empty());
    let fresh = Model::new(out.model.encoder.clone(), out.model.adapter.clone(), 6, 5).unwrap();
    assert_eq!(fresh.params, out.model.params);
    assert_eq!(out.result.final_report.confusion.total() as usize, data.test.len());
}

#[test]
fn runs_are_seed_deterministic() {
    let data = dataset(&small_spec(), 3);
    let setup = small_setup(Method::Sccl, 1);
    let a = train_run(&data, &setup, 9).unwrap();
    let b = train_run(&data, &setup, 9).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.result.loss_curve, b.result.loss_curve);
    let c = train_run(&data, &setup, 10).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn every_method_trains_finitely() {
    let data = dataset(&small_spec(), 4);
    for m in Method::ALL {
        let out = train_run(&data, &small_setup(m, 1), 1).unwrap();
        assert!(!out.result.loss_curve.is_empty());
        for p in &out.result.loss_curve {
            assert!(p.erc.is_finite() && p.aux.is_finite() && p.total.is_finite());
            if m == Method::None {
                assert_eq!(p.aux, 0.0);
                assert_eq!(p.erc, p.total);
            }
        }
        assert!(out.model.params.named().iter().all(|(_, t)| t.is_finite()));
        assert_eq!(out.result.prototype_seed.is_some(), m == Method::RandomSccl);
    }
}

#[test]
fn alpha_zero_matches_none() {
    let data = dataset(&small_spec(), 5);
    let none = train_run(&data, &small_setup(Method::None, 1), 3).unwrap();
    let mut setup = small_setup(Method::Sccl, 1);
    setup.loss.alpha = 0.0;
    let sccl = train_run(&data, &setup, 3).unwrap();
    assert_eq!(none.model.params, sccl.model.params);
    for (a, b) in none.result.loss_curve.iter().zip(&sccl.result.loss_curve) {
        assert_eq!((a.erc, a.total), (b.erc, b.total));
    }
}

#[test]
fn regression_uses_hvad_targets_in_hvad_mode() {
    let data = dataset(&small_spec(), 6);
    let mut setup = small_setup(Method::Regression, 1);
    setup.train.prototype_mode = PrototypeMode::Hvad;
    train_run(&data, &setup, 1).unwrap();
    setup.train.method = Method::Sccl;
    train_run(&data, &setup, 1).unwrap();
}

#[test]
fn cluster_distance_of_perfect_predictions_is_zero() {
    let table = PrototypeTable::builtin(crate::prototypes::BuiltinSet::Iemocap);
    let points = (0..6)
        .map(|j| ScatterPoint { gold: j, pred: j, vad: table.get(j).to_array() })
        .collect();
    let report = EvalReport::from_points(&table.emotions, points).unwrap();
    assert!(cluster_distance(&report, &table).unwrap() < 1e-15);
}

#[test]
fn parallel_and_sequential_agree() {
    let data = dataset(&small_spec(), 7);
    let setup = small_setup(Method::Vadcl, 1);
    let a = train(&data, &setup, Execution::Sequential).unwrap();
    let b = train(&data, &setup, Execution::Parallel).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.model.params, y.model.params);
        assert_eq!(x.result.seed, y.result.seed);
    }
}

#[test]
fn compare_and_stability_shapes() {
    let data = dataset(&small_spec(), 8);
    let setup = small_setup(Method::None, 1);
    let methods = [Method::None, Method::RandomSccl];
    let report = compare(&data, &setup, &methods, Execution::Sequential).unwrap();
    assert_eq!(report.runs.len(), 4);
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.row(Method::RandomSccl).unwrap().prototype_seeds, vec![1, 2]);
    assert!(report.row(Method::None).unwrap().micro_f1_excl_mean.is_some());
    assert_eq!(report.to_csv().lines().count(), 3);

    let table = batch_stability_experiment(&data, &setup, &[Method::Scl], &[1, 4], Execution::Sequential).unwrap();
    assert_eq!(table.cells.len(), 2);
    assert!(table.cells.iter().all(|c| c.per_seed_f1.len() == 2));
    assert!(table.sd_by_method[&Method::Scl] >= 0.0);
    assert_eq!(table.to_csv().lines().count(), 3);
    let json = serde_json::to_string(&table).unwrap();
    let back: StabilityTable = serde_json::from_str(&json).unwrap();
    assert_eq!(back.cells.len(), 2);

    let one_seed = TrainSetup {
        train: TrainConfig { seeds: vec![1], ..setup.train.clone() },
        ..setup
    };
    assert!(batch_stability_experiment(&data, &one_seed, &[Method::Scl], &[1], Execution::Sequential).is_err());
}

#[test]
fn scl_at_batch_one_is_cross_entropy_only() {
    let data = dataset(&small_spec(), 9);
    let mut none = small_setup(Method::None, 1);
    none.train.batch_size = 1;
    let mut scl = none.clone();
    scl.train.method = Method::Scl;
    let a = train_run(&data, &none, 2).unwrap();
    let b = train_run(&data, &scl, 2).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert!(b.result.loss_curve.iter().all(|p| p.aux == 0.0));
}

#[test]
fn cell_failures_are_recorded() {
    let data = dataset(&small_spec(), 10);
    let mut setup = small_setup(Method::Sccl, 1);
    setup.train.prototype_mode = PrototypeMode::Hvad;
    let mut broken = data.clone();
    for s in &mut broken.train {
        s.hvad = None;
    }
    let table = batch_stability_experiment(&broken, &setup, &[Method::Sccl, Method::None], &[4], Execution::Sequential).unwrap();
    assert!(table.cell(Method::Sccl, 4).unwrap().error.is_some());
    assert!(table.cell(Method::None, 4).unwrap().error.is_none());
}
