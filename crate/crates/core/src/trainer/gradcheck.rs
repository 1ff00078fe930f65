use serde::Serialize;

use super::{model_grad_check, prototypes_for, Dataset, Method, TrainSetup};
use crate::corpus::{build_samples, generate_synthetic, Batch, SyntheticSpec, WindowConfig};
use crate::encoder::{AdapterConfig, EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::prototypes::PrototypeTable;
use crate::tensor::{GradCheckOptions, GradCheckReport};

/// Methods with an auxiliary loss.
pub const AUX_METHODS: [Method; 5] = [
    Method::Sccl,
    Method::Scl,
    Method::Vadcl,
    Method::RandomSccl,
    Method::Regression,
];

/// Two layers of width 16 with both layers fused into the adapter; no dropout.
pub fn gradcheck_setup() -> TrainSetup {
    TrainSetup {
        encoder: EncoderConfig {
            vocab_size: 64,
            d_h: 16,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 32,
            max_len: 16,
            dropout: 0.0,
        },
        adapter: AdapterConfig {
            enabled: true,
            interactive_layers: vec![0, 1],
            d_a: 8,
            ff_dim: 16,
        },
        ..TrainSetup::default()
    }
}

/// Four context-free synthetic utterances labelled from `table`, the first
/// two sharing a label when the corpus allows it.
pub fn gradcheck_batch(seed: u64, max_len: usize, vocab_size: usize, table: &PrototypeTable) -> Result<Batch> {
    let spec = SyntheticSpec {
        dialogues: 6,
        vocab_size,
        context_dependence: 0.0,
        ..SyntheticSpec::default()
    };
    spec.validate(table.len())?;
    let dialogues = generate_synthetic(&spec, seed)?;
    let samples: Vec<_> = build_samples(&dialogues, &WindowConfig { wp: 0, wf: 0, max_len }, &spec.vocab())?
        .into_iter()
        .filter(|s| s.label < table.len())
        .collect();
    let first = samples.first().ok_or(Error::Empty("gradcheck_batch"))?;
    let mut chosen = vec![first];
    chosen.extend(samples[1..].iter().find(|s| s.label == first.label));
    chosen.extend(samples[1..].iter().filter(|s| s.label != first.label).take(4 - chosen.len()));
    Ok(Batch::from_samples(chosen, table.len()))
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodCheck {
    pub method: Method,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct FullModelCheck {
    pub parameters: usize,
    pub batch_size: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
    pub methods: Vec<MethodCheck>,
}

/// Checks the full model's training objective under every auxiliary loss.
/// The model is initialised and the batch drawn from `seed`; dropout is
/// forced off.
pub fn full_model_gradcheck(
    setup: &TrainSetup,
    table: &PrototypeTable,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<FullModelCheck> {
    let mut setup = setup.clone();
    setup.encoder.dropout = 0.0;
    setup.validate()?;
    let model = Model::new(setup.encoder.clone(), setup.adapter.clone(), table.len(), seed)?;
    let batch = gradcheck_batch(seed, setup.encoder.max_len, setup.encoder.vocab_size, table)?;
    let data = Dataset {
        emotions: table.emotions.clone(),
        vocab: SyntheticSpec::default().vocab(),
        prototypes: table.clone(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    let mut methods = Vec::with_capacity(AUX_METHODS.len());
    for method in AUX_METHODS {
        let s = setup.with_method(method);
        let t = prototypes_for(&data, &s.train, seed);
        let report = model_grad_check(&model, &batch, &s, &t, opts)?;
        log::info!("{method}: max rel err {:.3e}", report.max_rel_err);
        methods.push(MethodCheck { method, report });
    }
    let max_rel_err = methods.iter().map(|m| m.report.max_rel_err).fold(0.0, f64::max);
    Ok(FullModelCheck {
        parameters: model.num_parameters(),
        batch_size: batch.len(),
        max_rel_err,
        tol: opts.tol,
        passed: max_rel_err < opts.tol,
        methods,
    })
}
