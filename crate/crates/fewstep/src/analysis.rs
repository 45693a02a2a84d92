//! Metrics and the statistical laboratory.
//!
//! Sentence BLEU with add-one smoothing, the reused-vs-corrected
//! self-conditioning estimation gap, BLEU comparison of the two sampling
//! modes, per-dimension OLS fitting of reused estimates against
//! step-matched ones, extraction of the empirical signal-shrink and
//! noise-gain factors from those fits, and the Shapiro-Wilk normality test
//! in the Royston (1995) approximation.


#![allow(clippy::needless_range_loop)]
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{denoise, length_logits, top_lengths, DenoiserState};
use crate::rng::{role, stream};
use crate::sample::{generate, SelfCondMode};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Sentence BLEU
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BleuConfig {
    /// Highest n-gram order.
    pub max_order: usize,
    /// Add-one smoothing on orders whose match count is zero.
    pub smoothing: bool,
    pub brevity_penalty: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_order: 4,
            smoothing: true,
            brevity_penalty: true,
        }
    }
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut map: HashMap<&[usize], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Geometric mean of modified n-gram precisions times the brevity penalty
/// exp(min(0, 1 - |ref|/|hyp|)). Orders with zero matches take the add-one
/// smoothed precision (m+1)/(T+1). An empty hypothesis scores 0.
pub fn sentence_bleu(hyp: &[usize], reference: &[usize], cfg: &BleuConfig) -> Result<f64> {
    if cfg.max_order < 1 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    if reference.is_empty() {
        return Err(Error::Domain("BLEU reference must be nonempty".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=cfg.max_order {
        let ref_counts = ngram_counts(reference, n);
        let total = hyp.len().saturating_sub(n - 1);
        let mut matches = 0usize;
        if total > 0 {
            let hyp_counts = ngram_counts(hyp, n);
            for (gram, count) in hyp_counts {
                let cap = ref_counts.get(gram).copied().unwrap_or(0);
                matches += count.min(cap);
            }
        }
        let precision = if matches > 0 {
            matches as f64 / total as f64
        } else if cfg.smoothing {
            (matches + 1) as f64 / (total + 1) as f64
        } else {
            return Ok(0.0);
        };
        log_sum += precision.ln();
    }
    let geo = (log_sum / cfg.max_order as f64).exp();
    let bp = if cfg.brevity_penalty {
        (1.0 - reference.len() as f64 / hyp.len() as f64).min(0.0).exp()
    } else {
        1.0
    };
    Ok(geo * bp)
}

// ---------------------------------------------------------------------------
// Estimation gap
// ---------------------------------------------------------------------------

/// Per-step and supremum estimation gap between the denoiser conditioned on
/// the reused (previous-step) estimate and on the step-matched corrected
/// estimate, measured along reused-mode trajectories.
#[derive(Debug, Clone)]
pub struct GapReport {
    /// Interior step times in trajectory order (descending).
    pub step_times: Vec<f64>,
    /// Mean over examples of the per-entry RMS gap at each interior step.
    pub per_step_mean: Vec<f64>,
    /// Supremum of the per-step means.
    pub sup: f64,
    /// Per-example, per-step gaps (example-major) for stability analysis.
    pub per_example: Vec<Vec<f64>>,
}

fn rms_diff(a: &Tensor, b: &Tensor) -> f64 {
    let n = (a.rows() * a.cols()) as f64;
    (a.sub(b).sq_norm() / n).sqrt()
}

/// Content hash of an example, so per-example draws do not depend on the
/// dataset ordering (the gap is a mean/sup over a set).
fn example_tag(source: &[usize], length: usize) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x100000001b3);
    };
    eat(length as u64);
    for &id in source {
        eat(id as u64 + 1);
    }
    h
}

/// Run reused-mode trajectories on (source, target-length) pairs and
/// measure the gap at every interior step. Needs nfe >= 3: the reused
/// condition at an interior step must itself come from a conditioned step.
pub fn estimation_gap(
    state: &DenoiserState,
    examples: &[(Vec<usize>, usize)],
    nfe: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<GapReport> {
    if nfe < 3 {
        return Err(Error::Config(format!(
            "estimation gap needs nfe >= 3 (an interior step with a doubly-prior estimate); got {nfe}"
        )));
    }
    if examples.is_empty() {
        return Err(Error::Config("estimation gap needs at least one example".into()));
    }
    let mut per_example: Vec<Vec<f64>> = Vec::with_capacity(examples.len());
    let mut step_times: Vec<f64> = Vec::new();
    for (idx, (source, length)) in examples.iter().enumerate() {
        let mut s = stream(seed, &[role::ANALYSIS, example_tag(source, *length)]);
        let traj_seed: u64 = s.random();
        let gen = generate(
            state,
            source,
            *length,
            nfe,
            SelfCondMode::Reused,
            traj_seed,
            sched,
        )?;
        let steps = &gen.trajectory.steps;
        let mut gaps = Vec::with_capacity(nfe - 2);
        for j in 2..nfe {
            let t = steps[j].t;
            if idx == 0 {
                step_times.push(t);
            }
            let times = vec![t; steps[j].z_t.rows()];
            let reused_out = &steps[j].prediction;
            let fresh = denoise(state, &steps[j].z_t, &times, None, source)?;
            let corrected = denoise(state, &steps[j].z_t, &times, Some(&fresh), source)?;
            gaps.push(rms_diff(reused_out, &corrected));
        }
        per_example.push(gaps);
    }
    let n_steps = step_times.len();
    let mut per_step_mean = vec![0.0; n_steps];
    for gaps in &per_example {
        for (acc, g) in per_step_mean.iter_mut().zip(gaps) {
            *acc += g;
        }
    }
    for v in per_step_mean.iter_mut() {
        *v /= per_example.len() as f64;
    }
    let sup = per_step_mean.iter().cloned().fold(0.0, f64::max);
    Ok(GapReport {
        step_times,
        per_step_mean,
        sup,
        per_example,
    })
}

/// Bootstrap standard error of the sup statistic над examples.
pub fn gap_sup_bootstrap_se(report: &GapReport, resamples: usize, seed: u64) -> f64 {
    let n = report.per_example.len();
    let n_steps = report.step_times.len();
    let mut rng = stream(seed, &[role::ANALYSIS, 0xB007]);
    let mut sups = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = vec![0.0; n_steps];
        for _ in 0..n {
            let pick = rng.random_range(0..n);
            for (a, g) in acc.iter_mut().zip(&report.per_example[pick]) {
                *a += g;
            }
        }
        let sup = acc
            .iter()
            .map(|v| v / n as f64)
            .fold(0.0, f64::max);
        sups.push(sup);
    }
    let mean = sups.iter().sum::<f64>() / resamples as f64;
    (sups.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / resamples as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Reused vs corrected BLEU
// ---------------------------------------------------------------------------

/// Corpus-mean sentence BLEU of reused-mode and corrected-mode generation
/// under identical seeds and top-1 predicted lengths.
pub fn sc_bleu_compare(
    state: &DenoiserState,
    examples: &[(Vec<usize>, Vec<usize>)],
    nfe: usize,
    seed: u64,
    sched: &NoiseSchedule,
    bleu: &BleuConfig,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Config("BLEU comparison needs at least one example".into()));
    }
    let mut total_reused = 0.0;
    let mut total_corrected = 0.0;
    for (idx, (source, target)) in examples.iter().enumerate() {
        let logits = length_logits(state, source)?;
        let length = top_lengths(&logits, 1)[0];
        let mut s = stream(seed, &[role::ANALYSIS, 0xC0, idx as u64]);
        let gen_seed: u64 = s.random();
        let reused = generate(state, source, length, nfe, SelfCondMode::Reused, gen_seed, sched)?;
        let corrected = generate(
            state,
            source,
            length,
            nfe,
            SelfCondMode::Corrected,
            gen_seed,
            sched,
        )?;
        total_reused += sentence_bleu(&reused.tokens, target, bleu)?;
        total_corrected += sentence_bleu(&corrected.tokens, target, bleu)?;
    }
    let n = examples.len() as f64;
    Ok((total_reused / n, total_corrected / n))
}

// ---------------------------------------------------------------------------
// Residual regression
// ---------------------------------------------------------------------------

/// Per-dimension through-origin OLS statistics of reused estimates against
/// step-matched ones.
#[derive(Debug, Clone)]
pub struct ResidualStats {
    /// Slope per dimension: sum(reused * matched) / sum(matched^2).
    pub mu: Vec<f64>,
    /// Population standard deviation of the residuals per dimension.
    pub sigma: Vec<f64>,
    /// Flattened samples per dimension.
    pub count: usize,
}

/// Fit the per-dimension regression reused = mu * matched + residual over
/// all positions of all pairs. Errors if any dimension has sum(matched^2)
/// of zero or fewer than two samples exist.
pub fn fit_residual_stats(pairs: &[(Tensor, Tensor)]) -> Result<ResidualStats> {
    if pairs.is_empty() {
        return Err(Error::Config("residual fit needs at least one pair".into()));
    }
    let dims = pairs[0].0.cols();
    let mut count = 0usize;
    for (reused, matched) in pairs {
        if reused.shape() != matched.shape() || reused.cols() != dims {
            return Err(Error::ShapeMismatch(
                "residual pairs must share one L x H shape family".into(),
            ));
        }
        count += reused.rows();
    }
    if count < 2 {
        return Err(Error::Config("residual fit needs at least two samples".into()));
    }
    let mut num = vec![0.0; dims];
    let mut den = vec![0.0; dims];
    for (reused, matched) in pairs {
        for l in 0..reused.rows() {
            for h in 0..dims {
                num[h] += reused.get(l, h) * matched.get(l, h);
                den[h] += matched.get(l, h) * matched.get(l, h);
            }
        }
    }
    let mut mu = vec![0.0; dims];
    for h in 0..dims {
        if den[h] == 0.0 {
            return Err(Error::DegenerateDimension {
                dim: h,
                reason: "all step-matched values are zero".into(),
            });
        }
        mu[h] = num[h] / den[h];
    }
    let mut ss = vec![0.0; dims];
    for (reused, matched) in pairs {
        for l in 0..reused.rows() {
            for h in 0..dims {
                let r = reused.get(l, h) - mu[h] * matched.get(l, h);
                ss[h] += r * r;
            }
        }
    }
    let sigma = ss.iter().map(|s| (s / count as f64).sqrt()).collect();
    Ok(ResidualStats { mu, sigma, count })
}

/// Standardized residuals (r / sigma) of one dimension, in sample order.
pub fn standardized_residuals(
    pairs: &[(Tensor, Tensor)],
    stats: &ResidualStats,
    dim: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(stats.count);
    for (reused, matched) in pairs {
        for l in 0..reused.rows() {
            let r = reused.get(l, dim) - stats.mu[dim] * matched.get(l, dim);
            out.push(if stats.sigma[dim] > 0.0 {
                r / stats.sigma[dim]
            } else {
                0.0
            });
        }
    }
    out
}

/// Empirical perturbation factors from the fitted statistics at time s:
/// lambda = 1/mu and gamma = (alpha_s/sigma_s) * (sigma/mu), elementwise.
pub fn empirical_lambda_gamma(
    stats: &ResidualStats,
    s: f64,
    sched: &NoiseSchedule,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (alpha_s, sigma_s) = sched.alpha_sigma(s)?;
    let mut lambda = Vec::with_capacity(stats.mu.len());
    let mut gamma = Vec::with_capacity(stats.mu.len());
    for (h, (&m, &sd)) in stats.mu.iter().zip(&stats.sigma).enumerate() {
        if m == 0.0 {
            return Err(Error::DegenerateDimension {
                dim: h,
                reason: "fitted slope is zero; factors undefined".into(),
            });
        }
        lambda.push(1.0 / m);
        gamma.push((alpha_s / sigma_s) * (sd / m));
    }
    Ok((lambda, gamma))
}

// ---------------------------------------------------------------------------
// Residual report (per-step regression + normality screen)
// ---------------------------------------------------------------------------

/// One row of the residual analysis: the regression and normality
/// statistics of a single embedding dimension at a single step time.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualRow {
    pub t: f64,
    pub dim: usize,
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub w: f64,
    pub p: f64,
}

/// Run reused-mode trajectories, pair each step's carried-over estimate
/// with the corrected same-step estimate, fit the per-dimension regression
/// at every step with a previous estimate, and screen up to
/// `sw_sample_size` standardized residuals per dimension with the
/// Shapiro-Wilk test.
pub fn residual_report(
    state: &DenoiserState,
    examples: &[(Vec<usize>, usize)],
    nfe: usize,
    seed: u64,
    sched: &NoiseSchedule,
    sw_sample_size: usize,
) -> Result<Vec<ResidualRow>> {
    if nfe < 2 {
        return Err(Error::Config(
            "residual analysis needs nfe >= 2 (a step with a previous estimate)".into(),
        ));
    }
    if examples.is_empty() {
        return Err(Error::Config("residual analysis needs at least one example".into()));
    }
    // pairs[j] collects (reused carried estimate, corrected estimate) at
    // step index j of the grid.
    let mut pairs: Vec<Vec<(Tensor, Tensor)>> = vec![Vec::new(); nfe];
    let mut step_times = vec![0.0; nfe];
    for (idx, (source, length)) in examples.iter().enumerate() {
        let mut s = stream(seed, &[role::ANALYSIS, 0x4E5, idx as u64]);
        let traj_seed: u64 = s.random();
        let gen = generate(
            state,
            source,
            *length,
            nfe,
            SelfCondMode::Reused,
            traj_seed,
            sched,
        )?;
        let steps = &gen.trajectory.steps;
        for j in 1..nfe {
            let t = steps[j].t;
            step_times[j] = t;
            let times = vec![t; steps[j].z_t.rows()];
            let fresh = denoise(state, &steps[j].z_t, &times, None, source)?;
            let corrected = denoise(state, &steps[j].z_t, &times, Some(&fresh), source)?;
            pairs[j].push((steps[j - 1].prediction.clone(), corrected));
        }
    }

    let dims = state.config.latent_dim;
    let mut rows = Vec::new();
    for j in 1..nfe {
        let stats = fit_residual_stats(&pairs[j])?;
        let (lambda, gamma) = empirical_lambda_gamma(&stats, step_times[j], sched)?;
        for dim in 0..dims {
            let residuals = standardized_residuals(&pairs[j], &stats, dim);
            let sample: Vec<f64> = if residuals.len() > sw_sample_size {
                let mut rng = stream(seed, &[role::ANALYSIS, 0x5A, j as u64, dim as u64]);
                let mut picked = Vec::with_capacity(sw_sample_size);
                for _ in 0..sw_sample_size {
                    picked.push(residuals[rng.random_range(0..residuals.len())]);
                }
                picked
            } else {
                residuals
            };
            // Degenerate residuals (e.g. a perfectly fit dimension) carry
            // no normality evidence.
            let (w, p) = shapiro_wilk(&sample).unwrap_or((f64::NAN, f64::NAN));
            rows.push(ResidualRow {
                t: step_times[j],
                dim,
                mu: stats.mu[dim],
                sigma: stats.sigma[dim],
                lambda: lambda[dim],
                gamma: gamma[dim],
                w,
                p,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Shapiro-Wilk (Royston 1995, AS R94)
// ---------------------------------------------------------------------------

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .rev()
        .fold(0.0, |acc, &c| acc * x + c)
}

/// Acklam's rational approximation to the standard normal quantile.
#[allow(clippy::excessive_precision)]
fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation.
fn normal_cdf(x: f64) -> f64 {
    const A1: f64 = 0.254829592;
    const A2: f64 = -0.284496736;
    const A3: f64 = 1.421413741;
    const A4: f64 = -1.453152027;
    const A5: f64 = 1.061405429;
    const P: f64 = 0.3275911;
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let z = x.abs() * std::f64::consts::FRAC_1_SQRT_2;
    let t = 1.0 / (1.0 + P * z);
    let erf = 1.0 - ((((A5 * t + A4) * t + A3) * t + A2) * t + A1) * t * (-z * z).exp();
    0.5 * (1.0 + sign * erf)
}

/// Shapiro-Wilk W statistic and p-value for 3 <= n <= 5000 samples with
/// nonzero variance. Coefficients follow Royston's approximation from Blom
/// normal scores; the p-value maps ln(1 - W) through the fitted
/// normal/log-normal transforms.
pub fn shapiro_wilk(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::Domain(format!(
            "Shapiro-Wilk requires 3 <= n <= 5000, got {n}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Shapiro-Wilk sample contains non-finite values".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let range = x[n - 1] - x[0];
    if range <= 0.0 {
        return Err(Error::Domain("Shapiro-Wilk sample has zero variance".into()));
    }

    let nn2 = n / 2;
    // a[0] unused; 1-based like the published algorithm.
    let mut a = vec![0.0; nn2 + 1];
    if n == 3 {
        a[1] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let an25 = n as f64 + 0.25;
        let mut summ2 = 0.0;
        for i in 1..=nn2 {
            a[i] = normal_quantile((i as f64 - 0.375) / an25);
            summ2 += a[i] * a[i];
        }
        summ2 *= 2.0;
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / (n as f64).sqrt();
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let a1 = poly(&C1, rsn) - a[1] / ssumm2;
        let (i1, fac) = if n > 5 {
            let a2 = -a[2] / ssumm2 + poly(&C2, rsn);
            let fac = ((summ2 - 2.0 * a[1] * a[1] - 2.0 * a[2] * a[2])
                / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
                .sqrt();
            a[2] = a2;
            (3, fac)
        } else {
            let fac = ((summ2 - 2.0 * a[1] * a[1]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (2, fac)
        };
        a[1] = a1;
        for v in a.iter_mut().skip(i1).take(nn2 + 1 - i1) {
            *v /= -fac;
        }
    }

    // W as the squared correlation between sorted data and coefficients.
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut ssx = 0.0;
    let mut sax = 0.0;
    let mut ssa = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        // Antisymmetric coefficient vector: -a[k] in the lower half,
        // +a[k] in the upper half, 0 in the middle of odd n.
        let j = n - 1 - i;
        let coeff = if i < j {
            -a[i + 1]
        } else if i > j {
            a[j + 1]
        } else {
            0.0
        };
        let dx = xi - mean;
        ssx += dx * dx;
        sax += coeff * dx;
        ssa += coeff * coeff;
    }
    let w = ((sax * sax) / (ssa * ssx)).clamp(0.0, 1.0);

    // p-value.
    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = (0.75f64).sqrt().asin();
        (pi6 * (w.sqrt().asin() - stqr)).clamp(0.0, 1.0)
    } else {
        const G: [f64; 2] = [-2.273, 0.459];
        const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
        const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
        const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
        const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
        let w1 = 1.0 - w;
        if w1 <= 0.0 {
            return Ok((w, 1.0));
        }
        let y = w1.ln();
        let (z, m, s) = if n <= 11 {
            let an = n as f64;
            let gamma = poly(&G, an);
            if y >= gamma {
                return Ok((w, 1e-99));
            }
            let yy = -(gamma - y).ln();
            (yy, poly(&C3, an), poly(&C4, an).exp())
        } else {
            let xx = (n as f64).ln();
            (y, poly(&C5, xx), poly(&C6, xx).exp())
        };
        (1.0 - normal_cdf((z - m) / s)).clamp(0.0, 1.0)
    };
    Ok((w, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::rng::fill_standard_normal;
    use crate::schedule::ScheduleKind;
    use proptest::prelude::*;

    // ---- BLEU ----

    #[test]
    fn bleu_hand_cases() {
        let cfg = BleuConfig::default();
        // Perfect match of length >= 4.
        let r = vec![4, 5, 6, 7, 8];
        assert_eq!(sentence_bleu(&r, &r, &cfg).unwrap(), 1.0);
        // Empty hypothesis.
        assert_eq!(sentence_bleu(&[], &r, &cfg).unwrap(), 0.0);
        // All precisions 1, brevity penalty exp(1 - 5/4).
        let hyp = vec![4, 5, 6, 7];
        let got = sentence_bleu(&hyp, &r, &cfg).unwrap();
        assert!((got - (-0.25f64).exp()).abs() < 1e-12);
        assert!((got - 0.7788007830714049).abs() < 1e-12);
        // Empty reference is an error.
        assert!(sentence_bleu(&hyp, &[], &cfg).is_err());
    }

    #[test]
    fn bleu_smoothing_case() {
        // hyp = a b x d vs ref = a b c d:
        // p1 = 3/4, p2 = 1/3, p3 = (0+1)/(2+1), p4 = (0+1)/(1+1), BP = 1.
        // BLEU = (3/4 * 1/3 * 1/3 * 1/2)^(1/4) = (1/24)^(1/4).
        let cfg = BleuConfig::default();
        let hyp = vec![10, 11, 99, 13];
        let reference = vec![10, 11, 12, 13];
        let got = sentence_bleu(&hyp, &reference, &cfg).unwrap();
        assert!((got - (1.0f64 / 24.0).powf(0.25)).abs() < 1e-12);
    }

    #[test]
    fn bleu_short_hypothesis_brevity() {
        // hyp is a 3-token prefix of the 6-token reference: precisions all 1
        // (order 4 has no hypothesis n-grams; smoothed to 1), BP = exp(-1).
        let cfg = BleuConfig::default();
        let reference = vec![4, 5, 6, 7, 8, 9];
        let hyp = vec![4, 5, 6];
        let got = sentence_bleu(&hyp, &reference, &cfg).unwrap();
        assert!((got - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_clipping_case() {
        // hyp = a a a a vs ref = a a:
        // p1 = 2/4, p2 = 1/3, p3 = 1/3, p4 = 1/2 -> (1/36)^(1/4) = 1/sqrt(6).
        let cfg = BleuConfig::default();
        let got = sentence_bleu(&[4, 4, 4, 4], &[4, 4], &cfg).unwrap();
        assert!((got - 1.0 / 6.0f64.sqrt()).abs() < 1e-12);
    }

    proptest! {
        /// Identity scores 1; any other hypothesis of a random pair scores
        /// below 1 when the reference has at least 4 tokens.
        #[test]
        fn bleu_is_one_iff_equal(
            reference in proptest::collection::vec(4usize..12, 4..10),
            hyp in proptest::collection::vec(4usize..12, 1..10),
        ) {
            let cfg = BleuConfig::default();
            prop_assert!((sentence_bleu(&reference, &reference, &cfg).unwrap() - 1.0).abs() < 1e-12);
            let score = sentence_bleu(&hyp, &reference, &cfg).unwrap();
            prop_assert!(score <= 1.0 + 1e-12);
            if score >= 1.0 - 1e-12 {
                prop_assert_eq!(&hyp, &reference);
            }
        }
    }

    // ---- Residual regression ----

    #[test]
    fn noiseless_proportionality() {
        let matched = Tensor::from_fn(10, 3, |r, c| (r + c) as f64 * 0.1 + 0.2);
        let reused = matched.scale(2.0);
        let stats = fit_residual_stats(&[(reused, matched)]).unwrap();
        for h in 0..3 {
            assert!((stats.mu[h] - 2.0).abs() < 1e-12);
            assert!(stats.sigma[h] < 1e-12);
        }
    }

    #[test]
    fn generative_recovery() {
        let mut rng = stream(41, &[role::ANALYSIS]);
        let n = 100_000;
        let mut matched = Tensor::zeros(n, 2);
        fill_standard_normal(&mut rng, matched.data_mut());
        let mut noise = Tensor::zeros(n, 2);
        fill_standard_normal(&mut rng, noise.data_mut());
        let reused = Tensor::from_fn(n, 2, |r, c| 1.5 * matched.get(r, c) + 0.2 * noise.get(r, c));
        let stats = fit_residual_stats(&[(reused, matched)]).unwrap();
        for h in 0..2 {
            assert!((stats.mu[h] - 1.5).abs() < 0.02 * 1.5, "mu = {}", stats.mu[h]);
            assert!((stats.sigma[h] - 0.2).abs() < 0.02 * 0.2, "sigma = {}", stats.sigma[h]);
        }
    }

    #[test]
    fn degenerate_dimension_is_named() {
        let mut matched = Tensor::from_fn(5, 3, |r, c| (r + c) as f64 + 1.0);
        for r in 0..5 {
            matched.set(r, 1, 0.0);
        }
        let reused = matched.clone();
        match fit_residual_stats(&[(reused, matched)]) {
            Err(Error::DegenerateDimension { dim, .. }) => assert_eq!(dim, 1),
            other => panic!("expected degenerate dimension error, got {other:?}"),
        }
    }

    #[test]
    fn residual_fit_matches_two_pass_oracle() {
        let mut rng = stream(43, &[role::ANALYSIS]);
        let matched = Tensor::from_fn(50, 2, |_, _| rng.random_range(-1.0..1.0));
        let reused = Tensor::from_fn(50, 2, |r, c| {
            0.8 * matched.get(r, c) + rng.random_range(-0.1..0.1)
        });
        let stats = fit_residual_stats(&[(reused.clone(), matched.clone())]).unwrap();
        for h in 0..2 {
            let mut num = 0.0;
            let mut den = 0.0;
            for r in 0..50 {
                num += reused.get(r, h) * matched.get(r, h);
                den += matched.get(r, h) * matched.get(r, h);
            }
            let mu = num / den;
            let mut ss = 0.0;
            for r in 0..50 {
                let e = reused.get(r, h) - mu * matched.get(r, h);
                ss += e * e;
            }
            let sigma = (ss / 50.0).sqrt();
            assert!((stats.mu[h] - mu).abs() < 1e-10);
            assert!((stats.sigma[h] - sigma).abs() < 1e-10);
        }
    }

    #[test]
    fn lambda_gamma_examples() {
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let s = 0.4;
        let (alpha_s, sigma_s) = sched.alpha_sigma(s).unwrap();
        // Identity case.
        let stats = ResidualStats {
            mu: vec![1.0],
            sigma: vec![0.0],
            count: 10,
        };
        let (l, g) = empirical_lambda_gamma(&stats, s, &sched).unwrap();
        assert_eq!(l[0], 1.0);
        assert_eq!(g[0], 0.0);
        // Direct substitution: mu = 2, sigma = sigma_s/alpha_s.
        let stats = ResidualStats {
            mu: vec![2.0],
            sigma: vec![sigma_s / alpha_s],
            count: 10,
        };
        let (l, g) = empirical_lambda_gamma(&stats, s, &sched).unwrap();
        assert!((l[0] - 0.5).abs() < 1e-12);
        assert!((g[0] - 0.5).abs() < 1e-12);
        // Sign propagation.
        let stats = ResidualStats {
            mu: vec![-0.5],
            sigma: vec![0.1],
            count: 10,
        };
        let (l, _) = empirical_lambda_gamma(&stats, s, &sched).unwrap();
        assert!(l[0] < 0.0);
        // Zero slope errors.
        let stats = ResidualStats {
            mu: vec![0.0],
            sigma: vec![0.1],
            count: 10,
        };
        assert!(empirical_lambda_gamma(&stats, s, &sched).is_err());
    }

    #[test]
    fn planted_factors_recovered_through_pipeline() {
        // Generate reused = mu * matched + sigma_hat * eps with the
        // parameterization implied by planted (lambda, gamma) at time s,
        // then recover them.
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let s = 0.35;
        let (alpha_s, sigma_s) = sched.alpha_sigma(s).unwrap();
        let (lambda, gamma) = (0.92, 0.28);
        let mu = 1.0 / lambda;
        let sigma_hat = gamma * mu * sigma_s / alpha_s;
        let mut rng = stream(47, &[role::ANALYSIS]);
        let n = 100_000;
        let mut matched = Tensor::zeros(n, 1);
        fill_standard_normal(&mut rng, matched.data_mut());
        let mut eps = Tensor::zeros(n, 1);
        fill_standard_normal(&mut rng, eps.data_mut());
        let reused = Tensor::from_fn(n, 1, |r, _| mu * matched.get(r, 0) + sigma_hat * eps.get(r, 0));
        let stats = fit_residual_stats(&[(reused, matched)]).unwrap();
        let (l, g) = empirical_lambda_gamma(&stats, s, &sched).unwrap();
        assert!((l[0] - lambda).abs() < 0.03 * lambda, "lambda = {}", l[0]);
        assert!((g[0] - gamma).abs() < 0.03 * gamma, "gamma = {}", g[0]);
    }

    // ---- Shapiro-Wilk ----

    #[test]
    fn shapiro_wilk_domain_errors() {
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
        assert!(shapiro_wilk(&vec![0.5; 100]).is_err());
        let big: Vec<f64> = (0..5001).map(|i| i as f64).collect();
        assert!(shapiro_wilk(&big).is_err());
    }

    #[test]
    fn blom_positions_are_maximally_normal() {
        // Samples placed exactly at the Blom plotting positions.
        let n = 50;
        let samples: Vec<f64> = (1..=n)
            .map(|i| normal_quantile((i as f64 - 0.375) / (n as f64 + 0.25)))
            .collect();
        let (w, p) = shapiro_wilk(&samples).unwrap();
        assert!(w > 0.99, "W = {w}");
        assert!(p > 0.5, "p = {p}");
    }

    #[test]
    fn known_w_values_match_reference_implementations() {
        // W for 1..n matches R's shapiro.test to ~1e-3.
        for (n, expected) in [(5usize, 0.9868), (10, 0.9702), (20, 0.9604)] {
            let data: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            let (w, _) = shapiro_wilk(&data).unwrap();
            assert!((w - expected).abs() < 1e-3, "n = {n}: W = {w} vs {expected}");
        }
    }

    #[test]
    fn exponential_data_is_rejected() {
        let mut rng = stream(53, &[role::ANALYSIS]);
        let samples: Vec<f64> = (0..80)
            .map(|_| -rng.random_range(1e-12..1.0f64).ln())
            .collect();
        let (w, p) = shapiro_wilk(&samples).unwrap();
        assert!(w < 0.95, "W = {w}");
        assert!(p < 0.01, "p = {p}");
    }

    #[test]
    fn calibration_near_nominal_level() {
        // Smaller version of the acceptance calibration: the rejection rate
        // at p < 0.05 over standard-normal batches sits near 5%.
        let mut rng = stream(59, &[role::ANALYSIS]);
        let batches = 2000;
        let mut rejects = 0;
        for _ in 0..batches {
            let mut x = vec![0.0; 50];
            fill_standard_normal(&mut rng, &mut x);
            let (_, p) = shapiro_wilk(&x).unwrap();
            if p < 0.05 {
                rejects += 1;
            }
        }
        let rate = rejects as f64 / batches as f64;
        assert!((0.03..=0.07).contains(&rate), "rejection rate {rate}");
    }

    #[test]
    fn p_decreases_as_uniform_contamination_grows() {
        // Mixing uniform noise into normal samples at increasing rates must
        // (on average) drive the p-value down.
        let mut rng = stream(61, &[role::ANALYSIS]);
        let mut mean_p = Vec::new();
        for mix in [0.0, 0.5, 1.0] {
            let mut total = 0.0;
            let reps = 300;
            for _ in 0..reps {
                let x: Vec<f64> = (0..50)
                    .map(|_| {
                        if rng.random::<f64>() < mix {
                            rng.random_range(-2.0..2.0f64)
                        } else {
                            let g: f64 = rng.sample(rand_distr::StandardNormal);
                            g
                        }
                    })
                    .collect();
                total += shapiro_wilk(&x).unwrap().1;
            }
            mean_p.push(total / reps as f64);
        }
        assert!(mean_p[0] > mean_p[1], "{mean_p:?}");
        assert!(mean_p[1] > mean_p[2], "{mean_p:?}");
    }

    // ---- Estimation gap on constructed models ----

    #[test]
    fn insensitive_model_has_zero_gap() {
        let mut rng = stream(63, &[role::INIT]);
        let mut state =
            DenoiserState::init(DenoiserConfig::micro(8, 6), &mut rng).unwrap();
        state.make_self_cond_insensitive();
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let examples = vec![(vec![1, 4, 5, 2], 4), (vec![1, 6, 2], 3)];
        let report = estimation_gap(&state, &examples, 5, 7, &sched).unwrap();
        assert_eq!(report.step_times.len(), 3);
        assert_eq!(report.sup, 0.0);
        for g in report.per_step_mean {
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn gap_requires_three_steps() {
        let mut rng = stream(64, &[role::INIT]);
        let state = DenoiserState::init(DenoiserConfig::micro(8, 6), &mut rng).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let examples = vec![(vec![1, 4, 2], 3)];
        assert!(estimation_gap(&state, &examples, 2, 7, &sched).is_err());
        assert!(estimation_gap(&state, &examples, 3, 7, &sched).is_ok());
    }

    #[test]
    fn gap_invariant_to_example_order() {
        // Per-example draws hash the example content, so permuting the
        // dataset permutes nothing observable: mean and sup are identical.
        let mut rng = stream(65, &[role::INIT]);
        let state = DenoiserState::init(DenoiserConfig::micro(8, 6), &mut rng).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let a = vec![
            (vec![1, 4, 5, 2], 4),
            (vec![1, 6, 2], 3),
            (vec![1, 7, 7, 4, 2], 5),
        ];
        let mut b = a.clone();
        b.reverse();
        let ra = estimation_gap(&state, &a, 4, 7, &sched).unwrap();
        let rb = estimation_gap(&state, &b, 4, 7, &sched).unwrap();
        assert_eq!(ra.sup, rb.sup);
        assert_eq!(ra.per_step_mean, rb.per_step_mean);

        let manual_mean: Vec<f64> = (0..ra.step_times.len())
            .map(|j| {
                ra.per_example.iter().map(|g| g[j]).sum::<f64>() / ra.per_example.len() as f64
            })
            .collect();
        for (x, y) in ra.per_step_mean.iter().zip(&manual_mean) {
            assert!((x - y).abs() < 1e-15);
        }
        let manual_sup = manual_mean.iter().cloned().fold(0.0, f64::max);
        assert_eq!(ra.sup, manual_sup);
    }

    #[test]
    fn gap_sup_stable_under_dataset_doubling() {
        // The sup estimate over N examples and over the same set doubled
        // must agree within three bootstrap standard errors.
        let mut rng = stream(67, &[role::INIT]);
        let state = DenoiserState::init(DenoiserConfig::micro(8, 6), &mut rng).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let mut examples = Vec::new();
        for i in 0..24 {
            let len = 3 + (i % 3);
            let source: Vec<usize> = std::iter::once(1)
                .chain((0..len).map(|j| 4 + (i + j) % 4))
                .chain(std::iter::once(2))
                .collect();
            examples.push((source, len));
        }
        let report_n = estimation_gap(&state, &examples, 5, 7, &sched).unwrap();
        let mut doubled = examples.clone();
        for i in 0..24 {
            let len = 3 + ((i + 1) % 3);
            let source: Vec<usize> = std::iter::once(1)
                .chain((0..len).map(|j| 4 + (i * 3 + 2 * j) % 4))
                .chain(std::iter::once(2))
                .collect();
            doubled.push((source, len));
        }
        let report_2n = estimation_gap(&state, &doubled, 5, 7, &sched).unwrap();
        let se = gap_sup_bootstrap_se(&report_n, 200, 9);
        assert!(
            (report_2n.sup - report_n.sup).abs() < 3.0 * se.max(1e-12),
            "sup {} vs {} with bootstrap se {se}",
            report_n.sup,
            report_2n.sup
        );
    }

    #[test]
    fn insensitive_model_equal_bleu_in_both_modes() {
        let mut rng = stream(66, &[role::INIT]);
        let mut state =
            DenoiserState::init(DenoiserConfig::micro(8, 6), &mut rng).unwrap();
        state.make_self_cond_insensitive();
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let examples = vec![
            (vec![1, 4, 5, 2], vec![4, 5]),
            (vec![1, 6, 7, 2], vec![6, 7]),
        ];
        let (reused, corrected) =
            sc_bleu_compare(&state, &examples, 5, 3, &sched, &BleuConfig::default()).unwrap();
        assert_eq!(reused, corrected);
    }
}
