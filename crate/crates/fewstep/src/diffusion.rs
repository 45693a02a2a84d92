//! Gaussian diffusion kernels over latent sequences.
//!
//! Forward sampling (standard and perturbed), the reverse-posterior
//! parameters, and the single reverse step. The forward kernels take one
//! diffusion time per token because confidence-driven noise scaling makes
//! the timestep token-dependent; constant time is the special case of a
//! uniform vector. Noise is always passed in by the caller so tests can
//! share draws and runs stay reproducible.

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, PerturbSchedule};
use crate::tensor::Tensor;

/// Per-token forward coefficients: row l of the sample is
/// `signal[l] * z0[l] + noise_std[l] * noise[l]`.
#[derive(Debug, Clone)]
pub struct ForwardCoeffs {
    pub signal: Vec<f64>,
    pub noise_std: Vec<f64>,
}

/// Coefficients of the plain forward process: (alpha_t, sigma_t) per token.
pub fn forward_coeffs(sched: &NoiseSchedule, t: &[f64]) -> Result<ForwardCoeffs> {
    let mut signal = Vec::with_capacity(t.len());
    let mut noise_std = Vec::with_capacity(t.len());
    for &tl in t {
        let (a, s) = sched.alpha_sigma(tl)?;
        signal.push(a);
        noise_std.push(s);
    }
    Ok(ForwardCoeffs { signal, noise_std })
}

/// Coefficients of the perturbed forward process:
/// (alpha_t * lambda_t, sigma_t * sqrt(1 + gamma_t^2)) per token.
pub fn perturbed_forward_coeffs(
    sched: &NoiseSchedule,
    perturb: &PerturbSchedule,
    t: &[f64],
) -> Result<ForwardCoeffs> {
    let mut signal = Vec::with_capacity(t.len());
    let mut noise_std = Vec::with_capacity(t.len());
    for &tl in t {
        let (a, s) = sched.alpha_sigma(tl)?;
        let (lambda, gamma) = perturb.at(tl);
        signal.push(a * lambda);
        noise_std.push(s * (1.0 + gamma * gamma).sqrt());
    }
    Ok(ForwardCoeffs { signal, noise_std })
}

/// Combine clean latents with noise under per-token coefficients.
pub fn combine(z0: &Tensor, coeffs: &ForwardCoeffs, noise: &Tensor) -> Result<Tensor> {
    if z0.shape() != noise.shape() {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?} vs noise {:?}",
            z0.shape(),
            noise.shape()
        )));
    }
    if coeffs.signal.len() != z0.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} coefficient rows vs {} latent rows",
            coeffs.signal.len(),
            z0.rows()
        )));
    }
    let mut out = Tensor::zeros(z0.rows(), z0.cols());
    for l in 0..z0.rows() {
        let a = coeffs.signal[l];
        let s = coeffs.noise_std[l];
        let zr = z0.row(l);
        let nr = noise.row(l);
        let or = out.row_mut(l);
        for c in 0..zr.len() {
            or[c] = a * zr[c] + s * nr[c];
        }
    }
    Ok(out)
}

/// Sample z_t from q(z_t | z_0) = N(alpha_t z_0, sigma_t^2 I) per token.
pub fn forward_sample(
    z0: &Tensor,
    t: &[f64],
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    combine(z0, &forward_coeffs(sched, t)?, noise)
}

/// Sample the perturbed forward state
/// z'_t = alpha_t lambda_t z_0 + sigma_t sqrt(1 + gamma_t^2) eps per token.
pub fn perturbed_forward_sample(
    z0: &Tensor,
    t: &[f64],
    noise: &Tensor,
    sched: &NoiseSchedule,
    perturb: &PerturbSchedule,
) -> Result<Tensor> {
    combine(z0, &perturbed_forward_coeffs(sched, perturb, t)?, noise)
}

/// Parameters of q(z_s | z_t, z_0): the posterior mean matrix and the
/// shared per-token standard deviation.
#[derive(Debug, Clone)]
pub struct PosteriorParams {
    pub mean: Tensor,
    pub std: Vec<f64>,
}

/// Posterior coefficients (on z_t and on z_0) and standard deviation for a
/// transition t -> s with s < t.
pub fn posterior_coeffs(sched: &NoiseSchedule, s: f64, t: f64) -> Result<(f64, f64, f64)> {
    let (alpha_s, sigma_s) = sched.alpha_sigma(s)?;
    let (alpha_t, sigma_t) = sched.alpha_sigma(t)?;
    let sigma_ts = sched.sigma_t_given_s(s, t)?;
    let c_zt = (alpha_t / alpha_s) * (sigma_s * sigma_s) / (sigma_t * sigma_t);
    let c_z0 = alpha_s * (sigma_ts * sigma_ts) / (sigma_t * sigma_t);
    let std = (sigma_s / sigma_t) * sigma_ts;
    Ok((c_zt, c_z0, std))
}

/// mu(z_t, z0) = (alpha_t/alpha_s)(sigma_s^2/sigma_t^2) z_t
///             + alpha_s (sigma_{t|s}^2/sigma_t^2) z0,
/// std = (sigma_s/sigma_t) sigma_{t|s}.
pub fn posterior_params(
    z_t: &Tensor,
    z0_hat: &Tensor,
    s: f64,
    t: f64,
    sched: &NoiseSchedule,
) -> Result<PosteriorParams> {
    if z_t.shape() != z0_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "z_t {:?} vs z0 estimate {:?}",
            z_t.shape(),
            z0_hat.shape()
        )));
    }
    let (c_zt, c_z0, std) = posterior_coeffs(sched, s, t)?;
    let mut mean = z_t.scale(c_zt);
    mean.add_assign_scaled(z0_hat, c_z0);
    Ok(PosteriorParams {
        mean,
        std: vec![std; z_t.rows()],
    })
}

/// One reverse step: draw z_s = mu + std * noise.
pub fn reverse_step(
    z_t: &Tensor,
    z0_hat: &Tensor,
    s: f64,
    t: f64,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if noise.shape() != z_t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "noise {:?} vs state {:?}",
            noise.shape(),
            z_t.shape()
        )));
    }
    let params = posterior_params(z_t, z0_hat, s, t, sched)?;
    let mut out = params.mean;
    for l in 0..out.rows() {
        let std = params.std[l];
        let nr = noise.row(l);
        let or = out.row_mut(l);
        for c in 0..nr.len() {
            or[c] += std * nr[c];
        }
    }
    Ok(out)
}
