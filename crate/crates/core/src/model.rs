//! Instrumented pre-norm transformer.
//!
//! The forward pass follows the residual-stream formulation: each layer
//! reads the residual `h_l`, adds its attention output `a_l` to form the
//! mid-layer state, then adds its MLP output `m_l` to produce `h_{l+1}`.
//! Attention is causal grouped-query attention with rotary positions;
//! the MLP is gated (SiLU). The final residual is decoded through the
//! final norm and the output projection into a distribution over the
//! vocabulary.
//!
//! Every forward pass runs through the [`Tape`] machinery, so a recorded
//! pass is the same computation as an unrecorded one; `record_tape`
//! only decides whether the tape is kept.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_base: f32,
    pub eps: f32,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_q_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::input(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_q_heads != 0 {
            return Err(Error::input(format!(
                "d_model {} not divisible by n_q_heads {}",
                self.d_model, self.n_q_heads
            )));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::input(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.d_head() % 2 != 0 {
            return Err(Error::input(format!(
                "head dimension {} must be even for rotary positions",
                self.d_head()
            )));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::input("rope_base must be positive".to_string()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::input("eps must be positive".to_string()));
        }
        Ok(())
    }
}

/// Named architecture shapes. Layer counts and Q/KV head splits follow
/// the studied model family; widths default to desk scale (head
/// dimension 16) and can be rescaled with a factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Shape1p5B,
    Shape7B,
    Shape14B,
    Shape32B,
    Tiny,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Shape1p5B,
        Preset::Shape7B,
        Preset::Shape14B,
        Preset::Shape32B,
        Preset::Tiny,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Shape1p5B => "1.5B-shape",
            Preset::Shape7B => "7B-shape",
            Preset::Shape14B => "14B-shape",
            Preset::Shape32B => "32B-shape",
            Preset::Tiny => "tiny",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::input(format!(
                "unknown preset {s:?}; expected one of 1.5B-shape, 7B-shape, 14B-shape, 32B-shape, tiny"
            ))
        })
    }

    /// (n_layers, n_q_heads, n_kv_heads, base d_ff at scale 1).
    fn dims(&self) -> (usize, usize, usize, usize) {
        match self {
            Preset::Shape1p5B => (28, 12, 2, 768),
            Preset::Shape7B => (28, 28, 4, 1792),
            Preset::Shape14B => (48, 40, 8, 2560),
            Preset::Shape32B => (64, 40, 8, 2560),
            Preset::Tiny => (8, 4, 2, 192),
        }
    }

    /// Builds a config for this preset. `scale_factor` multiplies the
    /// desk-scale head dimension (16) and feed-forward width while
    /// preserving layer count and head ratios.
    pub fn config(&self, scale_factor: f64, vocab_size: usize) -> Result<ModelConfig> {
        if !(scale_factor > 0.0) {
            return Err(Error::input(format!(
                "scale factor must be positive, got {scale_factor}"
            )));
        }
        let (n_layers, n_q, n_kv, base_ff) = self.dims();
        let mut d_head = ((16.0 * scale_factor).round() as usize).max(2);
        if d_head % 2 != 0 {
            d_head += 1;
        }
        let cfg = ModelConfig {
            n_layers,
            d_model: n_q * d_head,
            n_q_heads: n_q,
            n_kv_heads: n_kv,
            d_ff: ((base_ff as f64 * scale_factor).round() as usize).max(8),
            vocab_size,
            rope_base: 10000.0,
            eps: 1e-6,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One layer's parameter tensors. Projections are stored `[in, out]`
/// and applied as `x · W`.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Full parameter set plus its config. Immutable once built; cheap to
/// share across probe workers.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub w_out: Tensor,
}

/// Deterministic random initialization: projection and embedding
/// entries ~ N(0, 0.02), norm scales 1.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid stddev");
    let mut sample = |shape: Vec<usize>| -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Tensor::new(shape, data).expect("shape/data agree")
    };

    let d = config.d_model;
    let kv_width = config.n_kv_heads * config.d_head();
    let embed = sample(vec![config.vocab_size, d]);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: Tensor::filled(vec![d], 1.0),
            wq: sample(vec![d, d]),
            wk: sample(vec![d, kv_width]),
            wv: sample(vec![d, kv_width]),
            wo: sample(vec![d, d]),
            mlp_norm: Tensor::filled(vec![d], 1.0),
            w_gate: sample(vec![d, config.d_ff]),
            w_up: sample(vec![d, config.d_ff]),
            w_down: sample(vec![config.d_ff, d]),
        });
    }
    let final_norm = Tensor::filled(vec![d], 1.0);
    let w_out = sample(vec![d, config.vocab_size]);
    Ok(ModelWeights {
        config: config.clone(),
        embed,
        layers,
        final_norm,
        w_out,
    })
}

/// Per-layer residual-stream snapshots from one forward pass.
///
/// `h` holds the residual entering each layer plus the final state
/// (`n_layers + 1` tensors); `attn_out`, `h_mid`, and `mlp_out` hold the
/// attention output, post-attention residual, and MLP output per layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub h: Vec<Tensor>,
    pub attn_out: Vec<Tensor>,
    pub h_mid: Vec<Tensor>,
    pub mlp_out: Vec<Tensor>,
    pub y: Tensor,
}

impl LayerTrace {
    pub fn n_layers(&self) -> usize {
        self.attn_out.len()
    }

    pub fn n_context(&self) -> usize {
        self.h[0].shape()[0]
    }
}

/// A single residual-stream intervention applied during a forward pass.
#[derive(Debug, Clone)]
pub enum InterventionSpec {
    /// Bypass layer `layer` for all positions `t <= cutoff`: the
    /// residual entering layer `layer + 1` keeps the pre-layer rows
    /// there, and downstream attention sees the modified stream.
    Skip { layer: usize, cutoff: usize },
    /// Replace the residual entering layer `layer + 1` at one position
    /// with a baseline vector of length `d_model`.
    Erase {
        layer: usize,
        position: usize,
        baseline: Tensor,
    },
}

impl InterventionSpec {
    fn validate(&self, config: &ModelConfig, n_context: usize) -> Result<()> {
        match self {
            InterventionSpec::Skip { layer, cutoff } => {
                if *layer >= config.n_layers {
                    return Err(Error::input(format!(
                        "skip layer {layer} out of range for {} layers",
                        config.n_layers
                    )));
                }
                if *cutoff >= n_context {
                    return Err(Error::input(format!(
                        "skip cutoff {cutoff} out of range for {n_context} positions"
                    )));
                }
            }
            InterventionSpec::Erase {
                layer,
                position,
                baseline,
            } => {
                if *layer >= config.n_layers {
                    return Err(Error::input(format!(
                        "erase layer {layer} out of range for {} layers",
                        config.n_layers
                    )));
                }
                if *position >= n_context {
                    return Err(Error::input(format!(
                        "erase position {position} out of range for {n_context} positions"
                    )));
                }
                if baseline.shape() != [config.d_model] {
                    return Err(Error::shape(format!(
                        "erase baseline has shape {:?}, expected [{}]",
                        baseline.shape(),
                        config.d_model
                    )));
                }
            }
        }
        Ok(())
    }

    fn boundary_layer(&self) -> usize {
        match self {
            InterventionSpec::Skip { layer, .. } | InterventionSpec::Erase { layer, .. } => *layer,
        }
    }

    /// Applies the intervention to the residual leaving the boundary
    /// layer; `h_prev` is the residual that entered it.
    fn splice(&self, h_prev: &Tensor, h_next: &Tensor) -> Result<Tensor> {
        match self {
            InterventionSpec::Skip { cutoff, .. } => {
                let rows: Vec<(usize, &[f32])> =
                    (0..=*cutoff).map(|t| (t, h_prev.row(t))).collect();
                h_next.with_rows_replaced(&rows)
            }
            InterventionSpec::Erase {
                position, baseline, ..
            } => h_next.with_rows_replaced(&[(*position, baseline.data())]),
        }
    }
}

/// Handles into the tape of a recorded forward pass.
#[derive(Debug)]
pub struct TapedForward {
    pub tape: Tape,
    /// Residual-state nodes `h_{start}..h_L`; index 0 is the pass input.
    pub h_nodes: Vec<NodeId>,
    pub start_layer: usize,
    /// Pre-softmax output-head logits, `[n_context, vocab]`.
    pub logits: NodeId,
}

/// Result of [`forward`]: the trace, plus the tape when requested.
#[derive(Debug)]
pub struct ForwardResult {
    pub trace: LayerTrace,
    pub taped: Option<TapedForward>,
}

/// Embeds a token sequence into the initial residual state.
pub fn embed_tokens(weights: &ModelWeights, tokens: &[u32]) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::input("token sequence is empty".to_string()));
    }
    let v = weights.config.vocab_size;
    let d = weights.config.d_model;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        let t = t as usize;
        if t >= v {
            return Err(Error::input(format!(
                "token id {t} out of range for vocab size {v}"
            )));
        }
        data.extend_from_slice(weights.embed.row(t));
    }
    Tensor::new(vec![tokens.len(), d], data)
}

struct LayerNodes {
    attn_out: NodeId,
    h_mid: NodeId,
    mlp_out: NodeId,
    h_next: NodeId,
}

fn run_layer(
    tape: &mut Tape,
    weights: &ModelWeights,
    layer: usize,
    h: NodeId,
) -> Result<LayerNodes> {
    let cfg = &weights.config;
    let lw = &weights.layers[layer];
    let d_head = cfg.d_head();
    let group = cfg.n_q_heads / cfg.n_kv_heads;
    let inv_sqrt = 1.0 / (d_head as f32).sqrt();

    let attn_norm = tape.leaf(lw.attn_norm.clone());
    let wq = tape.leaf(lw.wq.clone());
    let wk = tape.leaf(lw.wk.clone());
    let wv = tape.leaf(lw.wv.clone());
    let wo = tape.leaf(lw.wo.clone());

    let xn = tape.rmsnorm(h, attn_norm, cfg.eps)?;
    let q = tape.matmul(xn, wq)?;
    let k = tape.matmul(xn, wk)?;
    let v = tape.matmul(xn, wv)?;
    let q = tape.rotary(q, cfg.n_q_heads, cfg.rope_base)?;
    let k = tape.rotary(k, cfg.n_kv_heads, cfg.rope_base)?;

    let mut k_heads = Vec::with_capacity(cfg.n_kv_heads);
    let mut v_heads = Vec::with_capacity(cfg.n_kv_heads);
    for kv in 0..cfg.n_kv_heads {
        k_heads.push(tape.slice_cols(k, kv * d_head, d_head)?);
        v_heads.push(tape.slice_cols(v, kv * d_head, d_head)?);
    }

    let mut ctx_heads = Vec::with_capacity(cfg.n_q_heads);
    for qh in 0..cfg.n_q_heads {
        let q_head = tape.slice_cols(q, qh * d_head, d_head)?;
        let kv = qh / group;
        let scores = tape.matmul_nt(q_head, k_heads[kv])?;
        let scaled = tape.scale(scores, inv_sqrt);
        let probs = tape.causal_softmax(scaled)?;
        ctx_heads.push(tape.matmul(probs, v_heads[kv])?);
    }
    let ctx = tape.concat_cols(&ctx_heads)?;
    let attn_out = tape.matmul(ctx, wo)?;
    let h_mid = tape.add(h, attn_out)?;

    let mlp_norm = tape.leaf(lw.mlp_norm.clone());
    let w_gate = tape.leaf(lw.w_gate.clone());
    let w_up = tape.leaf(lw.w_up.clone());
    let w_down = tape.leaf(lw.w_down.clone());

    let mn = tape.rmsnorm(h_mid, mlp_norm, cfg.eps)?;
    let gate = tape.matmul(mn, w_gate)?;
    let up = tape.matmul(mn, w_up)?;
    let act = tape.silu(gate);
    let gated = tape.mul(act, up)?;
    let mlp_out = tape.matmul(gated, w_down)?;
    let h_next = tape.add(h_mid, mlp_out)?;

    Ok(LayerNodes {
        attn_out,
        h_mid,
        mlp_out,
        h_next,
    })
}

fn output_head(tape: &mut Tape, weights: &ModelWeights, h_final: NodeId) -> Result<NodeId> {
    let final_norm = tape.leaf(weights.final_norm.clone());
    let w_out = tape.leaf(weights.w_out.clone());
    let normed = tape.rmsnorm(h_final, final_norm, weights.config.eps)?;
    tape.matmul(normed, w_out)
}

/// Full forward pass over a token sequence.
///
/// With an intervention, the residual leaving the intervened layer is
/// spliced before the next layer runs, so downstream attention
/// recomputes over the modified keys and values. Interventions cannot
/// be combined with `record_tape` (the splice has no gradient
/// semantics).
pub fn forward(
    weights: &ModelWeights,
    tokens: &[u32],
    intervention: Option<&InterventionSpec>,
    record_tape: bool,
) -> Result<ForwardResult> {
    if intervention.is_some() && record_tape {
        return Err(Error::input(
            "record_tape cannot be combined with an intervention".to_string(),
        ));
    }
    let h0 = embed_tokens(weights, tokens)?;
    if let Some(iv) = intervention {
        iv.validate(&weights.config, tokens.len())?;
    }

    let n_layers = weights.config.n_layers;
    let mut tape = Tape::new();
    let input = tape.leaf(h0);
    let mut h_nodes = vec![input];
    let mut attn_out = Vec::with_capacity(n_layers);
    let mut h_mid = Vec::with_capacity(n_layers);
    let mut mlp_out = Vec::with_capacity(n_layers);

    for l in 0..n_layers {
        let nodes = run_layer(&mut tape, weights, l, *h_nodes.last().expect("nonempty"))?;
        attn_out.push(tape.value(nodes.attn_out).clone());
        h_mid.push(tape.value(nodes.h_mid).clone());
        mlp_out.push(tape.value(nodes.mlp_out).clone());

        let mut h_next = nodes.h_next;
        if let Some(iv) = intervention {
            if iv.boundary_layer() == l {
                let spliced = iv.splice(tape.value(h_nodes[l]), tape.value(nodes.h_next))?;
                h_next = tape.leaf(spliced);
            }
        }
        h_nodes.push(h_next);
    }

    let logits = output_head(&mut tape, weights, *h_nodes.last().expect("nonempty"))?;
    let y_node = tape.softmax(logits);

    let trace = LayerTrace {
        h: h_nodes.iter().map(|&n| tape.value(n).clone()).collect(),
        attn_out,
        h_mid,
        mlp_out,
        y: tape.value(y_node).clone(),
    };
    let taped = record_tape.then_some(TapedForward {
        tape,
        h_nodes,
        start_layer: 0,
        logits,
    });
    Ok(ForwardResult { trace, taped })
}

/// Runs layers `start_layer..n_layers` from a given residual state,
/// recording the tape. The first entry of `h_nodes` is the injected
/// input, so gradients with respect to it are available.
pub fn taped_forward_from(
    weights: &ModelWeights,
    h_start: Tensor,
    start_layer: usize,
) -> Result<TapedForward> {
    let cfg = &weights.config;
    if start_layer > cfg.n_layers {
        return Err(Error::input(format!(
            "start layer {start_layer} out of range for {} layers",
            cfg.n_layers
        )));
    }
    if h_start.shape().len() != 2 || h_start.cols() != cfg.d_model {
        return Err(Error::shape(format!(
            "residual state has shape {:?}, expected [n_context, {}]",
            h_start.shape(),
            cfg.d_model
        )));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(h_start);
    let mut h_nodes = vec![input];
    for l in start_layer..cfg.n_layers {
        let nodes = run_layer(&mut tape, weights, l, *h_nodes.last().expect("nonempty"))?;
        h_nodes.push(nodes.h_next);
    }
    let logits = output_head(&mut tape, weights, *h_nodes.last().expect("nonempty"))?;
    Ok(TapedForward {
        tape,
        h_nodes,
        start_layer,
        logits,
    })
}

/// Residual states and output distribution from resuming the pass at a
/// given layer. Used by probes that splice the stream and only need the
/// downstream effects.
pub struct ResumedStates {
    /// `h_{start}..h_L`, including the injected input.
    pub h: Vec<Tensor>,
    pub y: Tensor,
}

pub fn resume_forward(
    weights: &ModelWeights,
    h_start: Tensor,
    start_layer: usize,
) -> Result<ResumedStates> {
    let taped = taped_forward_from(weights, h_start, start_layer)?;
    let mut tape = taped.tape;
    let y = tape.softmax(taped.logits);
    let h = taped
        .h_nodes
        .iter()
        .map(|&n| tape.value(n).clone())
        .collect();
    Ok(ResumedStates {
        h,
        y: tape.value(y).clone(),
    })
}

/// Output-head logits for arbitrary residual rows `[n, d_model]`.
pub fn lens_logits(weights: &ModelWeights, h: &Tensor) -> Result<Tensor> {
    h.rmsnorm(&weights.final_norm, weights.config.eps)?
        .matmul(&weights.w_out)
}

/// Decodes a single residual state of length `d_model` through the
/// final norm and output projection into a probability vector.
pub fn decode_lens(weights: &ModelWeights, h: &Tensor) -> Result<Tensor> {
    let d = weights.config.d_model;
    if h.len() != d {
        return Err(Error::shape(format!(
            "residual state has {} entries, expected {d}",
            h.len()
        )));
    }
    let row = Tensor::new(vec![1, d], h.data().to_vec())?;
    let probs = lens_logits(weights, &row)?.softmax();
    Tensor::new(vec![weights.config.vocab_size], probs.data().to_vec())
}
