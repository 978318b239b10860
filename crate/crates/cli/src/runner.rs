//! Probe orchestration: runs the selected probes over a corpus with
//! parallel per-prompt workers and a fixed reduction order, so results
//! do not depend on scheduling or on DEPTHSCOPE_THREADS.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depthscope_core::corpus::{stable_id_hash, BaselineStats, PromptRecord};
use depthscope_core::model::{forward, ModelWeights};
use depthscope_core::probes::{
    cosine_profile, erasure_effect, gradient_attribution, lens_profile, skip_effect,
    AttributionVariant, CosineProfile, KlDirection, LensProfile, PositionSelection,
};
use depthscope_core::report::{CurveSet, RunManifest};
use depthscope_core::{Error, Result};

pub const ALL_PROBES: [&str; 5] = ["cosine", "lens", "skip", "erasure", "attribution"];
const MIN_SKIP_PREFIX: usize = 1;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub probes: Vec<String>,
    pub seed: u64,
    pub kl_direction: KlDirection,
    pub attr_variant: AttributionVariant,
    pub attr_steps: usize,
    pub skip_samples: usize,
    pub lens_positions: PositionSelection,
    pub per_prompt: bool,
}

/// Worker count: DEPTHSCOPE_THREADS when set, available parallelism
/// otherwise, never more than the number of prompts.
pub fn worker_count(prompts: usize) -> Result<usize> {
    let n = match std::env::var("DEPTHSCOPE_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|e| Error::input(format!("DEPTHSCOPE_THREADS: {e}")))?,
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    Ok(n.max(1).min(prompts.max(1)))
}

/// Applies `f` to every item on a small worker pool, preserving input
/// order in the output.
fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> =
        items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(i, &items[i]);
                *slots[i].lock().expect("result slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot lock").expect("worker filled slot"))
        .collect()
}

/// Everything one prompt contributes to the aggregated curves.
struct PromptOutputs {
    cosine: Option<CosineProfile>,
    lens: Option<LensProfile>,
    /// Per skipped layer: (max relative contribution change over later
    /// layers, max output change).
    skip: Option<Vec<(f64, f64)>>,
    erasure: Option<Vec<f64>>,
    attribution: Option<Vec<f64>>,
}

fn sample_cutoffs(opts: &RunOptions, prompt: &PromptRecord) -> Vec<usize> {
    let n = prompt.tokens.len();
    let hi = n.saturating_sub(2);
    if hi < MIN_SKIP_PREFIX {
        return Vec::new();
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(opts.seed ^ stable_id_hash(&prompt.id) ^ 0x736b6970);
    let mut picked = BTreeSet::new();
    let span = hi - MIN_SKIP_PREFIX + 1;
    for _ in 0..opts.skip_samples.min(span) {
        loop {
            let c = rng.gen_range(MIN_SKIP_PREFIX..=hi);
            if picked.insert(c) {
                break;
            }
        }
    }
    picked.into_iter().collect()
}

fn with_probe(probe: &str, e: Error) -> Error {
    match e {
        Error::Input(m) => Error::Input(format!("probe {probe}: {m}")),
        Error::Shape(m) => Error::Shape(format!("probe {probe}: {m}")),
        other => other,
    }
}

fn run_prompt(
    weights: &ModelWeights,
    prompt: &PromptRecord,
    baseline: Option<&BaselineStats>,
    opts: &RunOptions,
) -> Result<PromptOutputs> {
    let wants = |name: &str| opts.probes.iter().any(|p| p == name);
    let mut outputs = PromptOutputs {
        cosine: None,
        lens: None,
        skip: None,
        erasure: None,
        attribution: None,
    };

    if wants("cosine") || wants("lens") {
        let out = forward(weights, &prompt.tokens, None, false)?;
        if wants("cosine") {
            let positions = PositionSelection::All
                .resolve(prompt.tokens.len(), prompt.answer)
                .map_err(|e| with_probe("cosine", e))?;
            outputs.cosine =
                Some(cosine_profile(&out.trace, &positions).map_err(|e| with_probe("cosine", e))?);
        }
        if wants("lens") {
            let positions = opts
                .lens_positions
                .resolve(prompt.tokens.len(), prompt.answer)
                .map_err(|e| with_probe("lens", e))?;
            outputs.lens = Some(
                lens_profile(&out.trace, weights, &positions, opts.kl_direction)
                    .map_err(|e| with_probe("lens", e))?,
            );
        }
    }

    if wants("skip") {
        let cutoffs = sample_cutoffs(opts, prompt);
        if cutoffs.is_empty() {
            return Err(with_probe(
                "skip",
                Error::input("too short for skip cutoffs".to_string()),
            ));
        }
        let n_layers = weights.config.n_layers;
        let mut per_layer = Vec::with_capacity(n_layers);
        for s in 0..n_layers {
            let eff =
                skip_effect(weights, prompt, s, &cutoffs).map_err(|e| with_probe("skip", e))?;
            let max_r = eff.r_later.iter().cloned().fold(0.0f64, f64::max);
            per_layer.push((max_r, eff.output_change));
        }
        outputs.skip = Some(per_layer);
    }

    if wants("erasure") {
        let stats = baseline.ok_or_else(|| {
            Error::input("probe erasure: baseline statistics unavailable".to_string())
        })?;
        outputs.erasure = Some(
            erasure_effect(weights, prompt, stats)
                .map_err(|e| with_probe("erasure", e))?
                .layer_curve(),
        );
    }

    if wants("attribution") {
        let map = gradient_attribution(
            weights,
            prompt,
            opts.attr_variant,
            opts.attr_steps,
            baseline,
        )
        .map_err(|e| with_probe("attribution", e))?;
        outputs.attribution = Some(map.layer_curve());
    }

    Ok(outputs)
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let len = rows[0].len();
    let mut out = vec![0.0; len];
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Runs the selected probes over the corpus and aggregates one
/// [`CurveSet`] per probe.
pub fn run_probes(
    weights: &ModelWeights,
    corpus: &[PromptRecord],
    baseline: Option<&BaselineStats>,
    opts: &RunOptions,
    manifest: &RunManifest,
) -> Result<Vec<CurveSet>> {
    if corpus.is_empty() {
        return Err(Error::input("corpus is empty".to_string()));
    }
    for name in &opts.probes {
        if !ALL_PROBES.contains(&name.as_str()) {
            return Err(Error::input(format!(
                "unknown probe {name:?}; expected one of {}",
                ALL_PROBES.join(", ")
            )));
        }
    }
    let threads = worker_count(corpus.len())?;
    let per_prompt = parallel_map(corpus, threads, |_, prompt| {
        run_probe_with_context(weights, prompt, baseline, opts)
    })?;

    let dataset = corpus
        .iter()
        .map(|r| r.dataset.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect::<Vec<_>>()
        .join("+");
    let n_layers = weights.config.n_layers;
    let prompts = corpus.len();
    let mut sets = Vec::new();

    let make_set = |probe: &str,
                    states: usize,
                    series: BTreeMap<String, Vec<f64>>,
                    per_prompt_rows: Option<BTreeMap<String, Vec<Vec<f64>>>>| {
        CurveSet {
            probe: probe.to_string(),
            dataset: dataset.clone(),
            n_layers: states,
            prompts,
            series,
            per_prompt: per_prompt_rows,
            manifest: Some(manifest.clone()),
        }
    };

    for probe in &opts.probes {
        match probe.as_str() {
            "cosine" => {
                let profiles: Vec<CosineProfile> =
                    per_prompt.iter().map(|o| o.cosine.clone().expect("ran")).collect();
                let merged = CosineProfile::merge(&profiles)?;
                let mut series = BTreeMap::new();
                series.insert("full".to_string(), merged.full);
                series.insert("attn".to_string(), merged.attn);
                series.insert("mlp".to_string(), merged.mlp);
                series.insert("avg".to_string(), merged.averaged);
                let pp = opts.per_prompt.then(|| {
                    let mut m = BTreeMap::new();
                    m.insert(
                        "avg".to_string(),
                        profiles.iter().map(|p| p.averaged.clone()).collect(),
                    );
                    m
                });
                sets.push(make_set("cosine", n_layers, series, pp));
            }
            "lens" => {
                let profiles: Vec<LensProfile> =
                    per_prompt.iter().map(|o| o.lens.clone().expect("ran")).collect();
                let merged = LensProfile::merge(&profiles)?;
                let mut series = BTreeMap::new();
                series.insert("kl".to_string(), merged.kl);
                series.insert("overlap".to_string(), merged.overlap);
                let pp = opts.per_prompt.then(|| {
                    let mut m = BTreeMap::new();
                    m.insert(
                        "kl".to_string(),
                        profiles.iter().map(|p| p.kl.clone()).collect::<Vec<_>>(),
                    );
                    m.insert(
                        "overlap".to_string(),
                        profiles.iter().map(|p| p.overlap.clone()).collect::<Vec<_>>(),
                    );
                    m
                });
                sets.push(make_set("lens", n_layers, series, pp));
            }
            "skip" => {
                // Maximum across prompts, matching the probe's own
                // max-over-positions aggregation.
                let mut rel = vec![0.0f64; n_layers];
                let mut out_change = vec![0.0f64; n_layers];
                for outputs in &per_prompt {
                    let rows = outputs.skip.as_ref().expect("ran");
                    for s in 0..n_layers {
                        rel[s] = rel[s].max(rows[s].0);
                        out_change[s] = out_change[s].max(rows[s].1);
                    }
                }
                let mut series = BTreeMap::new();
                series.insert("relative_contribution".to_string(), rel);
                series.insert("output_change".to_string(), out_change);
                sets.push(make_set("skip", n_layers, series, None));
            }
            "erasure" => {
                let rows: Vec<Vec<f64>> = per_prompt
                    .iter()
                    .map(|o| o.erasure.clone().expect("ran"))
                    .collect();
                let mut series = BTreeMap::new();
                series.insert("effect".to_string(), mean_rows(&rows));
                sets.push(make_set("erasure", n_layers, series, None));
            }
            "attribution" => {
                let rows: Vec<Vec<f64>> = per_prompt
                    .iter()
                    .map(|o| o.attribution.clone().expect("ran"))
                    .collect();
                let mut series = BTreeMap::new();
                series.insert("score".to_string(), mean_rows(&rows));
                // n_layers + 1 residual states, h_0 through h_L.
                sets.push(make_set("attribution", n_layers + 1, series, None));
            }
            _ => unreachable!("validated above"),
        }
    }
    Ok(sets)
}

fn run_probe_with_context(
    weights: &ModelWeights,
    prompt: &PromptRecord,
    baseline: Option<&BaselineStats>,
    opts: &RunOptions,
) -> Result<PromptOutputs> {
    run_prompt(weights, prompt, baseline, opts).map_err(|e| match e {
        Error::Input(msg) => Error::Input(format!("prompt {:?}: {msg}", prompt.id)),
        Error::Shape(msg) => Error::Shape(format!("prompt {:?}: {msg}", prompt.id)),
        other => other,
    })
}
