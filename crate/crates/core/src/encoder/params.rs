use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AdapterConfig, EncoderConfig};
use crate::tensor::Tensor;

/// Expands to the field list of a parameter struct, so every traversal
/// visits fields in the same order under the same names.
macro_rules! param_struct {
    ($(#[$m:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }

            fn map_with<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)*
                }
            }
        }
    };
}

param_struct!(
    /// Weights of one transformer block. Keys carry no bias: it would shift
    /// every score of a query equally and never receive gradient.
    BlockParams {
        wq, bq, wk, wv, bv, wo, bo, ln1_g, ln1_b, ff1_w, ff1_b, ff2_w, ff2_b, ln2_g, ln2_b,
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayerParams<T> {
    pub down_w: T,
    pub down_b: T,
    pub block: BlockParams<T>,
    pub up_w: T,
    pub up_b: T,
}

impl<T> AdapterLayerParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}down_w"), &self.down_w);
        f(format!("{prefix}down_b"), &self.down_b);
        self.block.visit(&format!("{prefix}block."), f);
        f(format!("{prefix}up_w"), &self.up_w);
        f(format!("{prefix}up_b"), &self.up_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}down_w"), &mut self.down_w);
        f(format!("{prefix}down_b"), &mut self.down_b);
        self.block.visit_mut(&format!("{prefix}block."), f);
        f(format!("{prefix}up_w"), &mut self.up_w);
        f(format!("{prefix}up_b"), &mut self.up_b);
    }

    pub(crate) fn map_with<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AdapterLayerParams<U> {
        AdapterLayerParams {
            down_w: f(&format!("{prefix}down_w"), &self.down_w),
            down_b: f(&format!("{prefix}down_b"), &self.down_b),
            block: self.block.map_with(&format!("{prefix}block."), f),
            up_w: f(&format!("{prefix}up_w"), &self.up_w),
            up_b: f(&format!("{prefix}up_b"), &self.up_b),
        }
    }
}

/// All model weights. `T` is [`Tensor`] for storage and
/// [`Var`](crate::tensor::Var) once bound to a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<BlockParams<T>>,
    pub adapters: Vec<AdapterLayerParams<T>>,
    /// Final fusion, `d_h × d_h`.
    pub w1: T,
    pub b1: T,
    /// VAD head, `d_h × 3`.
    pub w2: T,
    pub b2: T,
    /// Classifier, `d_h × |E|`.
    pub w3: T,
    pub b3: T,
}

impl<T> ModelParams<T> {
    /// Every parameter with its dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut refs: Vec<(String, &T)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}."), &mut |n, t| refs.push((n, t)));
        }
        for (i, a) in self.adapters.iter().enumerate() {
            a.visit(&format!("adapters.{i}."), &mut |n, t| refs.push((n, t)));
        }
        for (n, t) in [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ] {
            refs.push((n.into(), t));
        }
        refs
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        let f: &mut dyn FnMut(String, &mut T) = &mut |n, t| f(&n, t);
        f("tok_emb".into(), &mut self.tok_emb);
        f("pos_emb".into(), &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}."), f);
        }
        for (i, a) in self.adapters.iter_mut().enumerate() {
            a.visit_mut(&format!("adapters.{i}."), f);
        }
        f("w1".into(), &mut self.w1);
        f("b1".into(), &mut self.b1);
        f("w2".into(), &mut self.w2);
        f("b2".into(), &mut self.b2);
        f("w3".into(), &mut self.w3);
        f("b3".into(), &mut self.b3);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            tok_emb: f("tok_emb", &self.tok_emb),
            pos_emb: f("pos_emb", &self.pos_emb),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map_with(&format!("layers.{i}."), f))
                .collect(),
            adapters: self
                .adapters
                .iter()
                .enumerate()
                .map(|(i, a)| a.map_with(&format!("adapters.{i}."), f))
                .collect(),
            w1: f("w1", &self.w1),
            b1: f("b1", &self.b1),
            w2: f("w2", &self.w2),
            b2: f("b2", &self.b2),
            w3: f("w3", &self.w3),
            b3: f("b3", &self.b3),
        }
    }
}

fn block_shapes(d: usize, ff: usize) -> BlockParams<Vec<usize>> {
    BlockParams {
        wq: vec![d, d],
        bq: vec![d],
        wk: vec![d, d],
        wv: vec![d, d],
        bv: vec![d],
        wo: vec![d, d],
        bo: vec![d],
        ln1_g: vec![d],
        ln1_b: vec![d],
        ff1_w: vec![d, ff],
        ff1_b: vec![ff],
        ff2_w: vec![ff, d],
        ff2_b: vec![d],
        ln2_g: vec![d],
        ln2_b: vec![d],
    }
}

impl ModelParams<Vec<usize>> {
    /// Expected parameter shapes for a configuration.
    pub fn shapes(enc: &EncoderConfig, adapter: &AdapterConfig, n_emotions: usize) -> Self {
        let d = enc.d_h;
        let adapters = if adapter.enabled {
            (0..adapter.n_k())
                .map(|_| AdapterLayerParams {
                    down_w: vec![d, adapter.d_a],
                    down_b: vec![adapter.d_a],
                    block: block_shapes(adapter.d_a, adapter.ff_dim),
                    up_w: vec![adapter.d_a, d],
                    up_b: vec![d],
                })
                .collect()
        } else {
            Vec::new()
        };
        ModelParams {
            tok_emb: vec![enc.vocab_size, d],
            pos_emb: vec![enc.max_len, d],
            layers: (0..enc.n_layers).map(|_| block_shapes(d, enc.ff_dim)).collect(),
            adapters,
            w1: vec![d, d],
            b1: vec![d],
            w2: vec![d, 3],
            b2: vec![3],
            w3: vec![d, n_emotions],
            b3: vec![n_emotions],
        }
    }
}

impl ModelParams<Tensor> {
    /// Seeded initialization: embeddings uniform in ±0.5, matrices
    /// Glorot-uniform, biases zero, layer-norm gains one.
    pub fn init(enc: &EncoderConfig, adapter: &AdapterConfig, n_emotions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::shapes(enc, adapter, n_emotions).map(&mut |name, shape| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            let n: usize = shape.iter().product();
            let data = if leaf.ends_with("_emb") {
                (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
            } else if leaf.ends_with("_g") {
                vec![1.0; n]
            } else if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            } else {
                vec![0.0; n]
            };
            Tensor::new(shape.clone(), data).expect("shape matches data")
        })
    }
}
