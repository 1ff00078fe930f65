//! Toy context-aware utterance encoder.
//!
//! Token and position embeddings feed a stack of post-LN self-attention
//! blocks. An optional adapter runs alongside: adapter layer `j` reads the
//! element-wise sum of encoder layer `l_j`'s output and the previous adapter
//! output (zeros for the first layer). The final representation is
//! `tanh((H^L + H_a) W1 + b1)`; its position-0 row feeds a sigmoid VAD head
//! and a softmax classifier.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{AdapterLayerParams, BlockParams, ModelParams};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextWindow, Vocab};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_h: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_h: 32,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 64,
            max_len: 64,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_h == 0 || self.n_heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.d_h % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_h {} not divisible by n_heads {}",
                self.d_h, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub enabled: bool,
    /// Encoder layers (0-based, strictly increasing) fused into successive adapter layers.
    pub interactive_layers: Vec<usize>,
    /// Inner width of each adapter layer.
    pub d_a: usize,
    pub ff_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interactive_layers: vec![0, 1],
            d_a: 16,
            ff_dim: 32,
        }
    }
}

impl AdapterConfig {
    pub fn n_k(&self) -> usize {
        self.interactive_layers.len()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let l = &self.interactive_layers;
        if l.is_empty() || l.len() > n_layers {
            return Err(Error::Config(format!(
                "adapter needs 1..={n_layers} interactive layers, got {}",
                l.len()
            )));
        }
        if l.windows(2).any(|w| w[0] >= w[1]) || l.iter().any(|&x| x >= n_layers) {
            return Err(Error::Config(format!(
                "interactive layers {l:?} must be strictly increasing and < {n_layers}"
            )));
        }
        if self.d_a == 0 || self.ff_dim == 0 {
            return Err(Error::Config("adapter sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer outputs of the encoder for one window, each `len × d_h`.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    pub layers: Vec<Var>,
}

impl EncoderStates {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }
}

/// Batch-level outputs; row `i` belongs to window `i`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// `Ĥ^{[CLS]}` rows, `|B| × d_h`.
    pub cls: Var,
    /// Sigmoid VAD predictions, `|B| × 3`.
    pub vad: Var,
    pub logits: Var,
    /// Class probabilities, `|B| × |E|`.
    pub probs: Var,
}

/// Randomness for dropout; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub n_emotions: usize,
    pub params: ModelParams<Tensor>,
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut DropoutRng<'_>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// One post-LN transformer block: self-attention then feed-forward, each
/// with a residual connection and layer normalization.
pub fn transformer_block(
    g: &mut Graph,
    p: &BlockParams<Var>,
    x: Var,
    n_heads: usize,
    rate: f64,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let d = g.shape(x)[1];
    let dk = d / n_heads;
    let q = linear(g, x, p.wq, p.bq)?;
    let k = g.matmul(x, p.wk)?;
    let v = linear(g, x, p.wv, p.bv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = g.softmax(scores, 1)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let o = linear(g, cat, p.wo, p.bo)?;
    let o = dropout(g, o, rate, rng)?;
    let r = g.add(x, o)?;
    let h1 = g.layer_norm(r, p.ln1_g, p.ln1_b, LN_EPS)?;
    let f = linear(g, h1, p.ff1_w, p.ff1_b)?;
    let f = g.gelu(f);
    let f = linear(g, f, p.ff2_w, p.ff2_b)?;
    let f = dropout(g, f, rate, rng)?;
    let r = g.add(h1, f)?;
    g.layer_norm(r, p.ln2_g, p.ln2_b, LN_EPS)
}

/// Runs the encoder on one window, returning every layer's output.
pub fn encode(
    g: &mut Graph,
    p: &ModelParams<Var>,
    window: &ContextWindow,
    cfg: &EncoderConfig,
    rng: &mut DropoutRng<'_>,
) -> Result<EncoderStates> {
    let len = window.len();
    if len > cfg.max_len {
        return Err(Error::Data(format!(
            "window of {len} tokens exceeds max_len {}",
            cfg.max_len
        )));
    }
    if let Some(&t) = window.input_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let tok = g.select_rows(p.tok_emb, &window.input_ids)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = g.select_rows(p.pos_emb, &positions)?;
    let mut x = g.add(tok, pos)?;
    x = dropout(g, x, cfg.dropout, rng)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for block in &p.layers {
        x = transformer_block(g, block, x, cfg.n_heads, cfg.dropout, rng)?;
        layers.push(x);
    }
    Ok(EncoderStates { layers })
}

/// The adapter recurrence: `H_f^j = H^{l_j} + H_a^{j-1}`, `H_a^j = layer_j(H_f^j)`,
/// starting from an all-zero `H_a`. Returns `H_a^{n_k}`.
pub fn adapter_fuse<F>(g: &mut Graph, states: &EncoderStates, interactive: &[usize], mut layer: F) -> Result<Var>
where
    F: FnMut(&mut Graph, usize, Var) -> Result<Var>,
{
    let first = *states
        .layers
        .first()
        .ok_or_else(|| Error::Data("no encoder states to fuse".into()))?;
    let shape = g.shape(first).to_vec();
    let mut h_a = g.constant(Tensor::zeros(&shape));
    for (j, &l) in interactive.iter().enumerate() {
        let h_l = *states
            .layers
            .get(l)
            .ok_or_else(|| Error::Data(format!("missing encoder state for layer {l}")))?;
        let h_f = g.add(h_l, h_a)?;
        h_a = layer(g, j, h_f)?;
    }
    Ok(h_a)
}

/// One adapter layer: project to the adapter width, one transformer block,
/// project back. There is no skip connection around it.
pub fn adapter_layer(
    g: &mut Graph,
    p: &AdapterLayerParams<Var>,
    x: Var,
    rate: f64,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let down = linear(g, x, p.down_w, p.down_b)?;
    let h = transformer_block(g, &p.block, down, 1, rate, rng)?;
    linear(g, h, p.up_w, p.up_b)
}

/// `tanh((h_enc + h_adapter) W1 + b1)`; a missing adapter term is zero.
pub fn fuse_final(g: &mut Graph, h_enc: Var, h_adapter: Option<Var>, w1: Var, b1: Var) -> Result<Var> {
    let x = match h_adapter {
        Some(a) => g.add(h_enc, a)?,
        None => h_enc,
    };
    let y = linear(g, x, w1, b1)?;
    Ok(g.tanh(y))
}

/// `sigmoid(h W2 + b2)` for each row of `h_cls`.
pub fn vad_head(g: &mut Graph, h_cls: Var, w2: Var, b2: Var) -> Result<Var> {
    let y = linear(g, h_cls, w2, b2)?;
    Ok(g.sigmoid(y))
}

/// Returns `(logits, softmax(logits))` with `logits = h W3 + b3`.
pub fn classify_head(g: &mut Graph, h_cls: Var, w3: Var, b3: Var) -> Result<(Var, Var)> {
    let logits = linear(g, h_cls, w3, b3)?;
    let probs = g.softmax(logits, 1)?;
    Ok((logits, probs))
}

impl Model {
    pub fn new(encoder: EncoderConfig, adapter: AdapterConfig, n_emotions: usize, seed: u64) -> Result<Self> {
        encoder.validate()?;
        adapter.validate(encoder.n_layers)?;
        if n_emotions == 0 {
            return Err(Error::Config("no emotions".into()));
        }
        let params = ModelParams::init(&encoder, &adapter, n_emotions, seed);
        Ok(Self {
            encoder,
            adapter,
            n_emotions,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter as a tracked leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> ModelParams<Var> {
        self.params.map(&mut |_, t| g.param(t))
    }

    /// Fails with a named-parameter diagnostic when `vocab` does not fit the embeddings.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let found = self.params.tok_emb.shape().to_vec();
        if found[0] != vocab.vocab_size {
            return Err(Error::ParamShape {
                name: "tok_emb".into(),
                expected: vec![vocab.vocab_size, self.encoder.d_h],
                found,
            });
        }
        Ok(())
    }

    /// `Ĥ` for one window: encoder, optional adapter, final fusion.
    pub fn represent(
        &self,
        g: &mut Graph,
        p: &ModelParams<Var>,
        window: &ContextWindow,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let states = encode(g, p, window, &self.encoder, rng)?;
        let h_a = if self.adapter.enabled {
            let rate = self.encoder.dropout;
            Some(adapter_fuse(g, &states, &self.adapter.interactive_layers, |g, j, x| {
                adapter_layer(g, &p.adapters[j], x, rate, rng)
            })?)
        } else {
            None
        };
        fuse_final(g, states.last(), h_a, p.w1, p.b1)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ModelParams<Var>,
        windows: &[ContextWindow],
        mut rng: DropoutRng<'_>,
    ) -> Result<ForwardOut> {
        if windows.is_empty() {
            return Err(Error::Empty("forward"));
        }
        let mut rows = Vec::with_capacity(windows.len());
        for w in windows {
            let h = self.represent(g, p, w, &mut rng)?;
            rows.push(g.row(h, ContextWindow::CLS_POSITION)?);
        }
        let cls = g.concat_rows(&rows)?;
        let vad = vad_head(g, cls, p.w2, p.b2)?;
        let (logits, probs) = classify_head(g, cls, p.w3, p.b3)?;
        Ok(ForwardOut {
            cls,
            vad,
            logits,
            probs,
        })
    }
}
