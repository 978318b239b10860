//! The five residual-stream probes.
//!
//! - [`cosine_profile`]: cosine similarity of each (sub)layer's
//!   contribution against the residual it lands on.
//! - [`lens_profile`]: KL divergence and top-5 overlap between
//!   intermediate decoded distributions and the final one.
//! - [`skip_effect`]: how bypassing one layer for a prefix of positions
//!   perturbs later layers' contributions and the output.
//! - [`erasure_effect`]: how replacing one token's residual with a
//!   dataset baseline shifts answer predictions.
//! - [`gradient_attribution`]: gradient of the answer-token
//!   log-probability with respect to each layer's activations, plain or
//!   path-integrated.
//!
//! Per-position metrics are averaged over positions within a prompt,
//! then over prompts; the skip probe alone aggregates by maximum.

use crate::corpus::{BaselineStats, PromptRecord};
use crate::model::{
    forward, lens_logits, resume_forward, taped_forward_from, LayerTrace, ModelWeights,
};
use crate::tape::{NodeId, Tape};
use crate::tensor::{cosim_slices, l2_diff, l2_norm, Tensor};
use crate::{Error, Result};

/// Which sequence positions a probe measures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PositionSelection {
    All,
    /// Answer-span positions when the record has a span, all positions
    /// otherwise.
    AnswerSpan,
    Explicit(Vec<usize>),
}

impl PositionSelection {
    pub fn resolve(&self, n_context: usize, answer: Option<(usize, usize)>) -> Result<Vec<usize>> {
        let positions: Vec<usize> = match self {
            PositionSelection::All => (0..n_context).collect(),
            PositionSelection::AnswerSpan => match answer {
                Some((s, e)) => (s..e).collect(),
                None => (0..n_context).collect(),
            },
            PositionSelection::Explicit(p) => p.clone(),
        };
        if positions.is_empty() {
            return Err(Error::input("empty position selection".to_string()));
        }
        if let Some(&bad) = positions.iter().find(|&&t| t >= n_context) {
            return Err(Error::input(format!(
                "position {bad} out of range for {n_context}"
            )));
        }
        Ok(positions)
    }
}

/// The prediction rows scored by erasure and attribution: row `t - 1`
/// predicts answer token `t`, so the span must start past position 0.
fn scored_rows(prompt: &PromptRecord) -> Result<(usize, usize)> {
    let (start, end) = prompt
        .answer
        .ok_or_else(|| Error::input(format!("prompt {} has no answer span", prompt.id)))?;
    if start == 0 {
        return Err(Error::input(format!(
            "prompt {}: answer span starting at 0 has no predicting row",
            prompt.id
        )));
    }
    if start >= end || end > prompt.tokens.len() {
        return Err(Error::input(format!(
            "prompt {}: answer span [{start}, {end}) out of range",
            prompt.id
        )));
    }
    Ok((start - 1, end - 1))
}

// ---------------------------------------------------------------------------
// Residual cosine similarity
// ---------------------------------------------------------------------------

/// Per-layer cosine curves: `full = cos(a+m, h)`, `attn = cos(a, h)`,
/// `mlp = cos(m, h+a)`, and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineProfile {
    pub full: Vec<f64>,
    pub attn: Vec<f64>,
    pub mlp: Vec<f64>,
    pub averaged: Vec<f64>,
    pub positions: usize,
    pub prompts: usize,
}

impl CosineProfile {
    fn finish(mut self) -> Self {
        self.averaged = self
            .full
            .iter()
            .zip(&self.attn)
            .zip(&self.mlp)
            .map(|((f, a), m)| (f + a + m) / 3.0)
            .collect();
        self
    }

    /// Mean over prompts, per curve; the averaged curve is recomputed
    /// from the merged triple.
    pub fn merge(profiles: &[CosineProfile]) -> Result<CosineProfile> {
        if profiles.is_empty() {
            return Err(Error::input("no cosine profiles to merge".to_string()));
        }
        let n_layers = profiles[0].full.len();
        let mut out = CosineProfile {
            full: vec![0.0; n_layers],
            attn: vec![0.0; n_layers],
            mlp: vec![0.0; n_layers],
            averaged: Vec::new(),
            positions: 0,
            prompts: 0,
        };
        for p in profiles {
            if p.full.len() != n_layers {
                return Err(Error::input("cosine profiles have differing depth".to_string()));
            }
            for l in 0..n_layers {
                out.full[l] += p.full[l];
                out.attn[l] += p.attn[l];
                out.mlp[l] += p.mlp[l];
            }
            out.positions += p.positions;
            out.prompts += p.prompts;
        }
        let n = profiles.len() as f64;
        for l in 0..n_layers {
            out.full[l] /= n;
            out.attn[l] /= n;
            out.mlp[l] /= n;
        }
        Ok(out.finish())
    }
}

/// Cosine curves for one trace, averaged over the selected positions.
pub fn cosine_profile(trace: &LayerTrace, positions: &[usize]) -> Result<CosineProfile> {
    if positions.is_empty() {
        return Err(Error::input("empty position selection".to_string()));
    }
    let n_context = trace.n_context();
    if let Some(&bad) = positions.iter().find(|&&t| t >= n_context) {
        return Err(Error::input(format!(
            "position {bad} out of range for {n_context}"
        )));
    }
    let n_layers = trace.n_layers();
    let mut profile = CosineProfile {
        full: vec![0.0; n_layers],
        attn: vec![0.0; n_layers],
        mlp: vec![0.0; n_layers],
        averaged: Vec::new(),
        positions: positions.len(),
        prompts: 1,
    };
    let inv = 1.0 / positions.len() as f64;
    for l in 0..n_layers {
        for &t in positions {
            let h = trace.h[l].row(t);
            let a = trace.attn_out[l].row(t);
            let m = trace.mlp_out[l].row(t);
            let h_mid = trace.h_mid[l].row(t);
            let both: Vec<f32> = a.iter().zip(m).map(|(&x, &y)| x + y).collect();
            profile.full[l] += cosim_slices(&both, h) * inv;
            profile.attn[l] += cosim_slices(a, h) * inv;
            profile.mlp[l] += cosim_slices(m, h_mid) * inv;
        }
    }
    Ok(profile.finish())
}

// ---------------------------------------------------------------------------
// Logit lens
// ---------------------------------------------------------------------------

/// Direction of the lens KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KlDirection {
    /// `KL(p_final ‖ p_layer)` — weights the divergence by where the
    /// model's final distribution puts its mass. The default.
    #[serde(rename = "final-from-early")]
    FinalFromEarly,
    /// `KL(p_layer ‖ p_final)`.
    #[serde(rename = "early-from-final")]
    EarlyFromFinal,
}

/// Per-layer lens curves over states `h_1..h_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LensProfile {
    pub kl: Vec<f64>,
    pub overlap: Vec<f64>,
    pub direction: KlDirection,
    pub positions: usize,
    pub prompts: usize,
}

impl LensProfile {
    pub fn merge(profiles: &[LensProfile]) -> Result<LensProfile> {
        if profiles.is_empty() {
            return Err(Error::input("no lens profiles to merge".to_string()));
        }
        let n_layers = profiles[0].kl.len();
        let mut out = LensProfile {
            kl: vec![0.0; n_layers],
            overlap: vec![0.0; n_layers],
            direction: profiles[0].direction,
            positions: 0,
            prompts: 0,
        };
        for p in profiles {
            if p.kl.len() != n_layers || p.direction != out.direction {
                return Err(Error::input("lens profiles are not compatible".to_string()));
            }
            for l in 0..n_layers {
                out.kl[l] += p.kl[l];
                out.overlap[l] += p.overlap[l];
            }
            out.positions += p.positions;
            out.prompts += p.prompts;
        }
        let n = profiles.len() as f64;
        for l in 0..n_layers {
            out.kl[l] /= n;
            out.overlap[l] /= n;
        }
        Ok(out)
    }
}

/// Indices of the `k` largest entries, ties broken toward lower index.
fn top_k_indices(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of shared top-5 tokens between two distributions (set
/// semantics; a multiple of 0.2 for vocabularies of at least 5).
pub fn top5_overlap(p: &[f32], q: &[f32]) -> f64 {
    let k = p.len().min(5);
    let a = top_k_indices(p, k);
    let b = top_k_indices(q, k);
    let shared = a.iter().filter(|i| b.contains(i)).count();
    shared as f64 / k as f64
}

fn select_rows(t: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let d = t.cols();
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        data.extend_from_slice(t.row(p));
    }
    Tensor::new(vec![positions.len(), d], data)
}

/// KL-to-final and top-5-overlap curves for one trace, averaged over
/// the selected positions.
pub fn lens_profile(
    trace: &LayerTrace,
    weights: &ModelWeights,
    positions: &[usize],
    direction: KlDirection,
) -> Result<LensProfile> {
    if positions.is_empty() {
        return Err(Error::input("empty position selection".to_string()));
    }
    let n_layers = trace.n_layers();
    let final_rows = select_rows(&trace.h[n_layers], positions)?;
    let final_p = lens_logits(weights, &final_rows)?.softmax();

    let mut profile = LensProfile {
        kl: Vec::with_capacity(n_layers),
        overlap: Vec::with_capacity(n_layers),
        direction,
        positions: positions.len(),
        prompts: 1,
    };
    let inv = 1.0 / positions.len() as f64;
    for l in 1..=n_layers {
        let rows = select_rows(&trace.h[l], positions)?;
        let layer_p = lens_logits(weights, &rows)?.softmax();
        let mut kl_sum = 0.0f64;
        let mut ov_sum = 0.0f64;
        for (i, _) in positions.iter().enumerate() {
            let pf = final_p.row(i);
            let pl = layer_p.row(i);
            let (num, den) = match direction {
                KlDirection::FinalFromEarly => (pf, pl),
                KlDirection::EarlyFromFinal => (pl, pf),
            };
            kl_sum += kl_divergence(num, den);
            ov_sum += top5_overlap(pl, pf);
        }
        profile.kl.push(kl_sum * inv);
        profile.overlap.push(ov_sum * inv);
    }
    Ok(profile)
}

/// `Σ p · ln(p / q)` in f64. Zero-probability `p` entries contribute 0;
/// `q` is floored at f64-minimum-positive so underflowed entries keep
/// the sum finite. Tiny negative rounding residue is clamped away.
fn kl_divergence(p: &[f32], q: &[f32]) -> f64 {
    let mut kl = 0.0f64;
    for (&pv, &qv) in p.iter().zip(q) {
        let pv = pv as f64;
        if pv > 0.0 {
            let qv = (qv as f64).max(f64::MIN_POSITIVE);
            kl += pv * (pv / qv).ln();
        }
    }
    kl.max(0.0)
}

// ---------------------------------------------------------------------------
// Layer skip
// ---------------------------------------------------------------------------

/// Downstream effect of bypassing one layer for a prefix of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipEffect {
    pub layer: usize,
    /// Relative contribution change of each later layer `l`, indexed
    /// `l - layer - 1`; maximized over cutoffs and measured positions.
    /// Empty when the last layer is skipped.
    pub r_later: Vec<f64>,
    /// Max `‖y[t] − ȳ[t]‖₂` over measured positions and cutoffs.
    pub output_change: f64,
    pub cutoffs: Vec<usize>,
}

/// Runs one baseline pass and one intervened pass per cutoff, measuring
/// positions after each cutoff.
pub fn skip_effect(
    weights: &ModelWeights,
    prompt: &PromptRecord,
    layer: usize,
    cutoffs: &[usize],
) -> Result<SkipEffect> {
    let n_layers = weights.config.n_layers;
    let n = prompt.tokens.len();
    if layer >= n_layers {
        return Err(Error::input(format!(
            "skip layer {layer} out of range for {n_layers} layers"
        )));
    }
    if cutoffs.is_empty() {
        return Err(Error::input("no skip cutoffs supplied".to_string()));
    }
    if let Some(&bad) = cutoffs.iter().find(|&&c| c + 1 >= n) {
        return Err(Error::input(format!(
            "cutoff {bad} leaves no measurable positions in a {n}-token prompt"
        )));
    }

    let base = forward(weights, &prompt.tokens, None, false)?;
    let mut r_later = vec![0.0f64; n_layers - layer - 1];
    let mut output_change = 0.0f64;

    for &cutoff in cutoffs {
        let rows: Vec<(usize, &[f32])> = (0..=cutoff)
            .map(|t| (t, base.trace.h[layer].row(t)))
            .collect();
        let spliced = base.trace.h[layer + 1].with_rows_replaced(&rows)?;
        let resumed = resume_forward(weights, spliced, layer + 1)?;

        for l in layer + 1..n_layers {
            let h_bar = &resumed.h[l - layer - 1];
            let h_bar_next = &resumed.h[l - layer];
            for t in cutoff + 1..n {
                let contrib: Vec<f32> = base.trace.h[l + 1]
                    .row(t)
                    .iter()
                    .zip(base.trace.h[l].row(t))
                    .map(|(&a, &b)| a - b)
                    .collect();
                let contrib_bar: Vec<f32> = h_bar_next
                    .row(t)
                    .iter()
                    .zip(h_bar.row(t))
                    .map(|(&a, &b)| a - b)
                    .collect();
                let num = l2_diff(&contrib, &contrib_bar);
                let den = l2_norm(&contrib).max(1e-12);
                let r = num / den;
                if r > r_later[l - layer - 1] {
                    r_later[l - layer - 1] = r;
                }
            }
        }
        for t in cutoff + 1..n {
            let change = l2_diff(base.trace.y.row(t), resumed.y.row(t));
            output_change = output_change.max(change);
        }
    }
    Ok(SkipEffect {
        layer,
        r_later,
        output_change,
        cutoffs: cutoffs.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Residual erasure
// ---------------------------------------------------------------------------

/// Output shift caused by replacing each residual with the dataset
/// baseline, per (layer, position).
#[derive(Debug, Clone, PartialEq)]
pub struct ErasureMap {
    /// `effect[l][t]`: max over answer-prediction rows of
    /// `‖y − ȳ‖₂` when the residual produced by layer `l` at position
    /// `t` is replaced.
    pub effect: Vec<Vec<f64>>,
    /// Half-open range of output rows that were scored.
    pub scored_rows: (usize, usize),
}

impl ErasureMap {
    /// Mean effect over positions, per layer.
    pub fn layer_curve(&self) -> Vec<f64> {
        self.effect
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }
}

/// One intervened pass per (layer, position); effects are measured on
/// the rows predicting the answer tokens.
pub fn erasure_effect(
    weights: &ModelWeights,
    prompt: &PromptRecord,
    baseline: &BaselineStats,
) -> Result<ErasureMap> {
    let n_layers = weights.config.n_layers;
    if baseline.means.len() != n_layers {
        return Err(Error::input(format!(
            "baseline covers {} layers, model has {n_layers}",
            baseline.means.len()
        )));
    }
    let (rows_start, rows_end) = scored_rows(prompt)?;
    let n = prompt.tokens.len();
    let base = forward(weights, &prompt.tokens, None, false)?;

    let mut effect = vec![vec![0.0f64; n]; n_layers];
    for l in 0..n_layers {
        let mean = baseline.means[l].data();
        for t in 0..n {
            let spliced = base.trace.h[l + 1].with_rows_replaced(&[(t, mean)])?;
            let resumed = resume_forward(weights, spliced, l + 1)?;
            let mut worst = 0.0f64;
            for r in rows_start..rows_end {
                worst = worst.max(l2_diff(base.trace.y.row(r), resumed.y.row(r)));
            }
            effect[l][t] = worst;
        }
    }
    Ok(ErasureMap {
        effect,
        scored_rows: (rows_start, rows_end),
    })
}

// ---------------------------------------------------------------------------
// Gradient attribution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttributionVariant {
    /// Gradient-norm scores, one backward pass.
    #[serde(rename = "plain")]
    Plain,
    /// Path-integrated signed scores along a straight line from a
    /// baseline activation.
    #[serde(rename = "path")]
    Path,
}

/// Attribution scores per (residual state, position); state `l` is
/// `h_l`, so there are `n_layers + 1` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub score: Vec<Vec<f64>>,
    pub variant: AttributionVariant,
    pub steps: usize,
}

impl AttributionMap {
    /// Mean score over positions, per residual state.
    pub fn layer_curve(&self) -> Vec<f64> {
        self.score
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }
}

/// Adds the scalar target to a tape: the summed log-probability of each
/// realized answer token under its predicting row.
fn answer_target_node(
    tape: &mut Tape,
    logits: NodeId,
    tokens: &[u32],
    span: (usize, usize),
) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    let vocab = shape[1];
    let mut indicator = vec![0.0f32; shape[0] * vocab];
    for t in span.0..span.1 {
        indicator[(t - 1) * vocab + tokens[t] as usize] = 1.0;
    }
    let ind = tape.leaf(Tensor::new(shape, indicator)?);
    let logp = tape.log_softmax(logits);
    let masked = tape.mul(logp, ind)?;
    Ok(tape.sum(masked))
}

/// Gradients of the answer target with respect to every residual state
/// `h_0..h_L`, from a single recorded forward pass.
pub fn attribution_gradients(
    weights: &ModelWeights,
    prompt: &PromptRecord,
) -> Result<Vec<Tensor>> {
    scored_rows(prompt)?;
    let span = prompt.answer.expect("validated");
    let out = forward(weights, &prompt.tokens, None, true)?;
    let mut tf = out.taped.expect("tape requested");
    let target = answer_target_node(&mut tf.tape, tf.logits, &prompt.tokens, span)?;
    let grads = tf.tape.backward(target)?;
    tf.h_nodes
        .iter()
        .map(|&node| {
            Ok(grads
                .wrt(node)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tf.tape.value(node).shape().to_vec())))
        })
        .collect()
}

/// Answer-target value when the pass is resumed from `h_start` at
/// `start_layer`; the scalar the attribution gradients differentiate.
pub fn answer_target_from_state(
    weights: &ModelWeights,
    h_start: Tensor,
    start_layer: usize,
    prompt: &PromptRecord,
) -> Result<f64> {
    scored_rows(prompt)?;
    let span = prompt.answer.expect("validated");
    let mut tf = taped_forward_from(weights, h_start, start_layer)?;
    let target = answer_target_node(&mut tf.tape, tf.logits, &prompt.tokens, span)?;
    Ok(tf.tape.value(target).data()[0] as f64)
}

/// Attribution of the answer predictions to each residual state.
///
/// The plain variant scores `‖∂target/∂h_l[t]‖₂` from one backward
/// pass. The path variant integrates gradients along a straight line
/// from a baseline (zeros, or the dataset mean when supplied) to the
/// actual activation, one layer at a time, using `steps` midpoint
/// evaluations; its scores are signed.
pub fn gradient_attribution(
    weights: &ModelWeights,
    prompt: &PromptRecord,
    variant: AttributionVariant,
    steps: usize,
    baseline: Option<&BaselineStats>,
) -> Result<AttributionMap> {
    scored_rows(prompt)?;
    let span = prompt.answer.expect("validated");
    let n = prompt.tokens.len();
    let n_layers = weights.config.n_layers;
    let d = weights.config.d_model;

    match variant {
        AttributionVariant::Plain => {
            let grads = attribution_gradients(weights, prompt)?;
            let score = grads
                .iter()
                .map(|g| (0..n).map(|t| l2_norm(g.row(t))).collect())
                .collect();
            Ok(AttributionMap {
                score,
                variant,
                steps: 0,
            })
        }
        AttributionVariant::Path => {
            if steps < 1 {
                return Err(Error::input("path attribution needs steps >= 1".to_string()));
            }
            let out = forward(weights, &prompt.tokens, None, false)?;
            let mut score = Vec::with_capacity(n_layers + 1);
            for l in 0..=n_layers {
                let actual = &out.trace.h[l];
                // Dataset means exist for h_1..h_L; h_0 falls back to zeros.
                let base: Tensor = match (baseline, l) {
                    (Some(stats), l) if l >= 1 => {
                        let mean = stats.means[l - 1].data();
                        let mut data = Vec::with_capacity(n * d);
                        for _ in 0..n {
                            data.extend_from_slice(mean);
                        }
                        Tensor::new(vec![n, d], data)?
                    }
                    _ => Tensor::zeros(vec![n, d]),
                };
                let delta = actual.sub(&base)?;

                let mut avg_grad = vec![0.0f64; n * d];
                for k in 0..steps {
                    let alpha = (k as f32 + 0.5) / steps as f32;
                    let interp = base.add(&delta.scale(alpha))?;
                    let mut tf = taped_forward_from(weights, interp, l)?;
                    let target =
                        answer_target_node(&mut tf.tape, tf.logits, &prompt.tokens, span)?;
                    let grads = tf.tape.backward(target)?;
                    if let Some(g) = grads.wrt(tf.h_nodes[0]) {
                        for (acc, &v) in avg_grad.iter_mut().zip(g.data()) {
                            *acc += v as f64;
                        }
                    }
                }
                let inv = 1.0 / steps as f64;
                let row_scores: Vec<f64> = (0..n)
                    .map(|t| {
                        delta
                            .row(t)
                            .iter()
                            .zip(&avg_grad[t * d..(t + 1) * d])
                            .map(|(&dv, &gv)| dv as f64 * gv * inv)
                            .sum()
                    })
                    .collect();
                score.push(row_scores);
            }
            Ok(AttributionMap {
                score,
                variant,
                steps,
            })
        }
    }
}
