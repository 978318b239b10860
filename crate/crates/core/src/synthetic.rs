//! Planted-transition synthetic traces and detector validation.
//!
//! Trace generation plants a three-phase structure into per-layer
//! contributions: orthogonal writes (cosine ≈ 0), then erasure of the
//! running residual direction (cosine < 0) through a known layer
//! `k_star`, then amplification (cosine > 0). Residual identities hold
//! bit-exactly because the stream is assembled with the same additions
//! the model uses. Lens curves are generated separately with crossings
//! planted at the same layer, since a synthetic trace has no
//! vocabulary.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detect::{ed_from_cosine, ed_from_kl, ed_from_overlap, DetectorConfig};
use crate::model::LayerTrace;
use crate::probes::cosine_profile;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Contribution strength for the erase/amplify phases. Erasure folds a
/// norm-restoring orthogonal component into the MLP contribution so
/// long erase phases cannot underflow the residual.
const ALPHA: f32 = 0.2;

#[derive(Debug, Clone)]
pub struct SyntheticTraceSpec {
    pub n_layers: usize,
    pub dim: usize,
    /// First erasure layer; layers before it write orthogonal features.
    pub k_write: usize,
    /// Last erasure layer — the planted transition.
    pub k_star: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticTraceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::input("synthetic trace needs dim >= 4".to_string()));
        }
        if !(self.k_write <= self.k_star && self.k_star < self.n_layers) {
            return Err(Error::input(format!(
                "need k_write <= k_star < n_layers, got {} <= {} < {}",
                self.k_write, self.k_star, self.n_layers
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::input("noise_sigma must be nonnegative".to_string()));
        }
        Ok(())
    }
}

enum Phase {
    Orthogonal,
    Erase,
    Amplify,
}

fn phase_of(spec: &SyntheticTraceSpec, layer: usize) -> Phase {
    if layer < spec.k_write {
        Phase::Orthogonal
    } else if layer <= spec.k_star {
        Phase::Erase
    } else {
        Phase::Amplify
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Random unit vector orthogonal to the span of `against` (the basis
/// is orthonormalized first, so projections remove the whole span).
fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize, against: &[&[f64]]) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(against.len());
    for raw in against {
        let mut b = raw.to_vec();
        for prev in &basis {
            let coef = dot(&b, prev);
            for (bi, pi) in b.iter_mut().zip(prev) {
                *bi -= coef * pi;
            }
        }
        let n = norm(&b);
        if n > 1e-12 {
            for bi in &mut b {
                *bi /= n;
            }
            basis.push(b);
        }
    }
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let coef = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= coef * bi;
            }
        }
        let n = norm(&v);
        if n > 1e-9 {
            for vi in &mut v {
                *vi /= n;
            }
            return v;
        }
    }
}

fn to_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&v| v as f64).collect()
}

fn row_tensor(data: Vec<f64>, dim: usize) -> Result<Tensor> {
    Tensor::new(vec![1, dim], data.into_iter().map(|v| v as f32).collect())
}

/// Generates a single-position trace with the planted phase structure;
/// returns the trace and the planted transition layer.
pub fn gen_trace(spec: &SyntheticTraceSpec) -> Result<(LayerTrace, usize)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let sigma = spec.noise_sigma;

    let h0_dir = random_orthogonal(&mut rng, d, &[]);
    let h0 = row_tensor(h0_dir, d)?;

    let mut h = vec![h0];
    let mut attn_out = Vec::with_capacity(spec.n_layers);
    let mut h_mid = Vec::with_capacity(spec.n_layers);
    let mut mlp_out = Vec::with_capacity(spec.n_layers);

    fn jitter(rng: &mut ChaCha8Rng, v: &mut [f64], sigma: f64, scale: f64) {
        if sigma > 0.0 {
            for vi in v.iter_mut() {
                *vi += sigma * scale * rng.gen_range(-1.0f64..1.0);
            }
        }
    }

    for l in 0..spec.n_layers {
        let h_cur = to_f64(h[l].row(0));
        let h_norm = norm(&h_cur);

        // Attention contribution.
        let mut a: Vec<f64> = match phase_of(spec, l) {
            Phase::Orthogonal => {
                let u = random_orthogonal(&mut rng, d, &[&h_cur]);
                u.iter().map(|&x| x * ALPHA as f64 * h_norm).collect()
            }
            Phase::Erase => h_cur.iter().map(|&x| -(ALPHA as f64) * x).collect(),
            Phase::Amplify => h_cur.iter().map(|&x| ALPHA as f64 * x).collect(),
        };
        jitter(&mut rng, &mut a, sigma, h_norm);
        let a_t = row_tensor(a, d)?;
        let mid_t = h[l].add(&a_t)?;
        let mid = to_f64(mid_t.row(0));
        let mid_norm = norm(&mid);

        // MLP contribution, orthogonality taken against the stream the
        // MLP actually sees.
        let mut m: Vec<f64> = match phase_of(spec, l) {
            Phase::Orthogonal => {
                let u = random_orthogonal(&mut rng, d, &[&h_cur, &mid]);
                u.iter().map(|&x| x * ALPHA as f64 * mid_norm).collect()
            }
            Phase::Erase => {
                // m = -alpha * mid + w, with w sized to restore ‖h‖.
                let parallel = (1.0 - ALPHA as f64) * mid_norm;
                let w_norm = (h_norm * h_norm - parallel * parallel).max(0.0).sqrt();
                let w = random_orthogonal(&mut rng, d, &[&h_cur, &mid]);
                mid.iter()
                    .zip(&w)
                    .map(|(&x, &wi)| -(ALPHA as f64) * x + w_norm * wi)
                    .collect()
            }
            Phase::Amplify => mid.iter().map(|&x| ALPHA as f64 * x).collect(),
        };
        jitter(&mut rng, &mut m, sigma, mid_norm);
        let m_t = row_tensor(m, d)?;
        let h_next = mid_t.add(&m_t)?;

        attn_out.push(a_t);
        h_mid.push(mid_t);
        mlp_out.push(m_t);
        h.push(h_next);
    }

    let trace = LayerTrace {
        h,
        attn_out,
        h_mid,
        mlp_out,
        y: Tensor::filled(vec![1, 1], 1.0),
    };
    Ok((trace, spec.k_star))
}

/// Synthetic lens curves with crossings planted at layer `k`
/// (`1 <= k < n_layers`): an exponentially decaying KL whose first
/// sub-half-max layer is `k`, and an overlap curve first exceeding the
/// default 0.3 threshold at `k`.
pub fn gen_lens_curves(
    n_layers: usize,
    k: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if k == 0 || k >= n_layers {
        return Err(Error::input(format!(
            "planted lens crossing {k} must lie in 1..{n_layers}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_scale = k as f64 - 0.5;
    let mut kl: Vec<f64> = (0..n_layers)
        .map(|l| 8.0 * (-(l as f64) / half_scale * std::f64::consts::LN_2).exp())
        .collect();
    kl[n_layers - 1] = 0.0;

    let rise = (n_layers - 1 - k).max(1) as f64;
    let mut overlap: Vec<f64> = (0..n_layers)
        .map(|l| {
            if l < k {
                0.1
            } else {
                0.35 + 0.65 * (l - k) as f64 / rise
            }
        })
        .collect();
    overlap[n_layers - 1] = 1.0;

    if noise_sigma > 0.0 {
        for v in kl.iter_mut() {
            *v = (*v * (1.0 + noise_sigma * rng.gen_range(-1.0f64..1.0))).max(0.0);
        }
        for v in overlap.iter_mut() {
            *v = (*v + noise_sigma * rng.gen_range(-1.0f64..1.0)).clamp(0.0, 1.0);
        }
    }
    Ok((kl, overlap))
}

/// A full set of planted curves plus their ground truth.
#[derive(Debug, Clone)]
pub struct PlantedCurves {
    pub cosine_full: Vec<f64>,
    pub cosine_attn: Vec<f64>,
    pub cosine_mlp: Vec<f64>,
    pub cosine_avg: Vec<f64>,
    pub kl: Vec<f64>,
    pub overlap: Vec<f64>,
    pub k_star: usize,
}

pub fn planted_curves(spec: &SyntheticTraceSpec) -> Result<PlantedCurves> {
    let (trace, k_star) = gen_trace(spec)?;
    let profile = cosine_profile(&trace, &[0])?;
    let (kl, overlap) =
        gen_lens_curves(spec.n_layers, k_star, spec.noise_sigma, spec.seed ^ 0x9e37)?;
    Ok(PlantedCurves {
        cosine_full: profile.full,
        cosine_attn: profile.attn,
        cosine_mlp: profile.mlp,
        cosine_avg: profile.averaged,
        kl,
        overlap,
        k_star,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectorOutcome {
    pub cases: u64,
    pub exact: u64,
    pub recovery_rate: f64,
    /// Signed (estimate − truth) error histogram; exact recoveries land
    /// in the 0 bucket.
    pub off_by: BTreeMap<i64, u64>,
}

impl DetectorOutcome {
    fn new() -> Self {
        Self {
            cases: 0,
            exact: 0,
            recovery_rate: 0.0,
            off_by: BTreeMap::new(),
        }
    }

    fn record(&mut self, estimate: usize, truth: usize) {
        self.cases += 1;
        let off = estimate as i64 - truth as i64;
        if off == 0 {
            self.exact += 1;
        }
        *self.off_by.entry(off).or_insert(0) += 1;
    }

    fn finish(&mut self) {
        if self.cases > 0 {
            self.recovery_rate = self.exact as f64 / self.cases as f64;
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub seeds: u64,
    pub layer_counts: Vec<usize>,
    pub dim: usize,
    pub noise_sigma: f64,
    pub cases: u64,
    pub cosine: DetectorOutcome,
    pub kl: DetectorOutcome,
    pub overlap: DetectorOutcome,
}

impl ValidationReport {
    pub fn all_exact(&self) -> bool {
        self.cosine.recovery_rate == 1.0
            && self.kl.recovery_rate == 1.0
            && self.overlap.recovery_rate == 1.0
    }
}

#[derive(Debug, Clone)]
pub struct ValidationConfig {
    pub layer_counts: Vec<usize>,
    pub dim: usize,
    pub noise_sigma: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            layer_counts: vec![8, 16, 28, 48, 64],
            dim: 32,
            noise_sigma: 0.0,
        }
    }
}

/// Runs all three detectors against planted ground truth across seeds
/// and depths.
pub fn validate_detectors(n_seeds: u64, cfg: &ValidationConfig) -> Result<ValidationReport> {
    if n_seeds < 1 {
        return Err(Error::input("need at least one seed".to_string()));
    }
    if cfg.layer_counts.iter().any(|&l| l < 4) {
        return Err(Error::input("layer counts must be at least 4".to_string()));
    }
    let detector_cfg = DetectorConfig::default();
    let mut cosine = DetectorOutcome::new();
    let mut kl = DetectorOutcome::new();
    let mut overlap = DetectorOutcome::new();

    for seed in 0..n_seeds {
        for &n_layers in &cfg.layer_counts {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ n_layers as u64);
            let k_star = rng.gen_range(1..=n_layers - 2);
            let k_write = rng.gen_range(0..=k_star);
            let spec = SyntheticTraceSpec {
                n_layers,
                dim: cfg.dim,
                k_write,
                k_star,
                noise_sigma: cfg.noise_sigma,
                seed: rng.gen(),
            };
            let curves = planted_curves(&spec)?;
            cosine.record(ed_from_cosine(&curves.cosine_avg, n_layers)?.ed, k_star);
            kl.record(ed_from_kl(&curves.kl, n_layers, &detector_cfg)?.ed, k_star);
            overlap.record(
                ed_from_overlap(&curves.overlap, n_layers, &detector_cfg)?.ed,
                k_star,
            );
        }
    }
    cosine.finish();
    kl.finish();
    overlap.finish();
    let cases = cosine.cases;
    Ok(ValidationReport {
        seeds: n_seeds,
        layer_counts: cfg.layer_counts.clone(),
        dim: cfg.dim,
        noise_sigma: cfg.noise_sigma,
        cases,
        cosine,
        kl,
        overlap,
    })
}
