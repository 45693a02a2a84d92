//! Confidence-driven timestep rescaling.
//!
//! A token is high-confidence when the nearest codebook row of the model's
//! reconstruction matches the nearest row of the clean latent (i = j).
//! Those tokens get their diffusion time inflated by the phase-stepped
//! factor beta(n), clamped to the ceiling, so training keeps presenting
//! them at harder noise levels while uncertain tokens stay untouched.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::forward_sample;
use crate::error::{Error, Result};
use crate::model::{denoise, DenoiserState};
use crate::rng::fill_standard_normal;
use crate::schedule::{NoiseSchedule, NoiseScalingConfig};
use crate::tensor::Tensor;
use crate::vocab::EmbeddingCodebook;

/// Per-token flags: true where the reconstruction rounds to the same token
/// as the clean latent.
pub type ConfidenceMask = Vec<bool>;

/// mask_l = round(z0)_l == round(z_hat)_l.
pub fn confidence_mask(
    z0: &Tensor,
    z_hat: &Tensor,
    codebook: &EmbeddingCodebook,
) -> Result<ConfidenceMask> {
    if z0.shape() != z_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "clean latent {:?} vs reconstruction {:?}",
            z0.shape(),
            z_hat.shape()
        )));
    }
    let truth = codebook.round_to_tokens(z0)?;
    let recon = codebook.round_to_tokens(z_hat)?;
    Ok(truth
        .into_iter()
        .zip(recon)
        .map(|(i, j)| i == j)
        .collect())
}

/// t_theta: masked entries become min(beta * t, ceiling); others unchanged.
pub fn rescale_timesteps(t: &[f64], mask: &[bool], beta: f64, t_ceiling: f64) -> Vec<f64> {
    debug_assert!(beta >= 1.0, "scaling factor must be >= 1");
    debug_assert_eq!(t.len(), mask.len());
    t.iter()
        .zip(mask)
        .map(|(&tl, &m)| if m { (beta * tl).min(t_ceiling) } else { tl })
        .collect()
}

/// Statistics of one rescaling decision, reported to the metrics stream.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalingStats {
    /// Fraction of tokens whose time was rescaled.
    pub masked_fraction: f64,
    /// Mean of t_theta - t over all tokens.
    pub mean_delta: f64,
}

/// With probability `apply_prob`, run a no-gradient confidence pass (plain
/// forward sample at t, zero self-condition) and rescale the confident
/// tokens' times by beta(n). Otherwise return t unchanged without running
/// the extra pass. Model parameters are never touched.
#[allow(clippy::too_many_arguments)]
pub fn apply_noise_scaling(
    z0: &Tensor,
    t: &[f64],
    state: &DenoiserState,
    source: &[usize],
    cfg: &NoiseScalingConfig,
    iteration: u64,
    sched: &NoiseSchedule,
    branch_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, ScalingStats)> {
    if branch_rng.random::<f64>() >= cfg.apply_prob {
        return Ok((t.to_vec(), ScalingStats::default()));
    }
    let beta = cfg.beta_at(iteration)?;
    let mut noise = Tensor::zeros(z0.rows(), z0.cols());
    fill_standard_normal(noise_rng, noise.data_mut());
    let z_t = forward_sample(z0, t, &noise, sched)?;
    let z_hat = denoise(state, &z_t, t, None, source)?;
    let mask = confidence_mask(z0, &z_hat, &state.codebook())?;
    let rescaled = rescale_timesteps(t, &mask, beta, cfg.t_ceiling);
    let n = t.len() as f64;
    let stats = ScalingStats {
        masked_fraction: mask.iter().filter(|m| **m).count() as f64 / n,
        mean_delta: rescaled
            .iter()
            .zip(t)
            .map(|(a, b)| a - b)
            .sum::<f64>()
            / n,
    };
    Ok((rescaled, stats))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::rng::{role, stream};
    use crate::schedule::ScheduleKind;
    use proptest::prelude::*;

    fn separated_codebook() -> EmbeddingCodebook {
        // Four well-separated rows on the axes.
        let mut t = Tensor::zeros(4, 2);
        t.row_mut(0).copy_from_slice(&[10.0, 0.0]);
        t.row_mut(1).copy_from_slice(&[-10.0, 0.0]);
        t.row_mut(2).copy_from_slice(&[0.0, 10.0]);
        t.row_mut(3).copy_from_slice(&[0.0, -10.0]);
        EmbeddingCodebook::from_table(t)
    }

    #[test]
    fn perfect_reconstruction_is_all_true() {
        let cb = separated_codebook();
        let z0 = cb.embed(&[0, 2, 3]).unwrap();
        let mask = confidence_mask(&z0, &z0, &cb).unwrap();
        assert_eq!(mask, vec![true, true, true]);
    }

    #[test]
    fn orthogonal_offset_lands_in_other_cell() {
        let cb = separated_codebook();
        let z0 = cb.embed(&[0, 0]).unwrap();
        // Push far along the other axis: nearest row becomes 2.
        let z_hat = Tensor::from_fn(2, 2, |r, c| z0.get(r, c) + if c == 1 { 40.0 } else { 0.0 });
        let mask = confidence_mask(&z0, &z_hat, &cb).unwrap();
        assert_eq!(mask, vec![false, false]);
    }

    #[test]
    fn mask_matches_brute_force_double_argmin() {
        let mut rng = stream(5, &[role::ANALYSIS]);
        let cb = EmbeddingCodebook::init(32, 4, &mut rng);
        let z0 = Tensor::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let z_hat = Tensor::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let mask = confidence_mask(&z0, &z_hat, &cb).unwrap();
        for l in 0..6 {
            let nearest = |row: &[f64]| -> usize {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for m in 0..cb.vocab_size() {
                    let d: f64 = row
                        .iter()
                        .zip(cb.table().row(m))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = m;
                    }
                }
                best
            };
            assert_eq!(mask[l], nearest(z0.row(l)) == nearest(z_hat.row(l)));
        }
    }

    #[test]
    fn rescale_examples() {
        // All-false mask leaves t unchanged.
        let t = vec![0.3, 0.5];
        assert_eq!(rescale_timesteps(&t, &[false, false], 2.0, 0.999), t);
        // beta = 2, masked 0.3 -> 0.6.
        let out = rescale_timesteps(&[0.3], &[true], 2.0, 0.999);
        assert!((out[0] - 0.6).abs() < 1e-15);
        // Ceiling clamp.
        let out = rescale_timesteps(&[0.4], &[true], 4.0, 0.999);
        assert_eq!(out[0], 0.999);
    }

    #[test]
    fn apply_prob_zero_is_identity() {
        let mut rng = stream(7, &[role::INIT]);
        let state = DenoiserState::init(DenoiserConfig::micro(6, 5), &mut rng).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let mut cfg = NoiseScalingConfig::new(vec![100], vec![2.0]);
        cfg.apply_prob = 0.0;
        let z0 = state.codebook().embed(&[4, 5]).unwrap();
        let t = vec![0.4, 0.8];
        let mut b = stream(7, &[role::BRANCH]);
        let mut n = stream(7, &[role::NOISE]);
        let (out, stats) =
            apply_noise_scaling(&z0, &t, &state, &[1, 4, 2], &cfg, 0, &sched, &mut b, &mut n)
                .unwrap();
        assert_eq!(out, t);
        assert_eq!(stats.masked_fraction, 0.0);
    }

    #[test]
    fn apply_never_mutates_parameters() {
        let mut rng = stream(8, &[role::INIT]);
        let state = DenoiserState::init(DenoiserConfig::micro(6, 5), &mut rng).unwrap();
        let hash_before = state.param_hash();
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let cfg = NoiseScalingConfig::new(vec![100], vec![2.0]);
        let z0 = state.codebook().embed(&[4, 5, 3]).unwrap();
        let t = vec![0.2, 0.5, 0.9];
        let mut b = stream(8, &[role::BRANCH]);
        let mut n = stream(8, &[role::NOISE]);
        for iter in 0..8 {
            apply_noise_scaling(
                &z0, &t, &state, &[1, 4, 2], &cfg, iter, &sched, &mut b, &mut n,
            )
            .unwrap();
        }
        assert_eq!(state.param_hash(), hash_before);
    }

    #[test]
    fn zero_denoiser_rescales_only_tokens_nearest_origin() {
        // A denoiser that always predicts zero reconstructs every position
        // as the codebook row nearest the origin, so only tokens whose true
        // id is that row count as confident.
        let mut rng = stream(9, &[role::INIT]);
        let mut state = DenoiserState::init(DenoiserConfig::micro(6, 4), &mut rng).unwrap();
        state.zero_output_projection();
        // Rows at distinct distances from the origin; row 5 is closest.
        let table = Tensor::from_fn(6, 4, |r, c| {
            if c == 0 {
                (6 - r) as f64
            } else {
                0.0
            }
        });
        state.set_codebook(table);
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let mut cfg = NoiseScalingConfig::new(vec![100], vec![2.0]);
        cfg.apply_prob = 1.0;
        let tokens = vec![5usize, 2, 5];
        let z0 = state.codebook().embed(&tokens).unwrap();
        let t = vec![0.2, 0.2, 0.3];
        let mut b = stream(9, &[role::BRANCH]);
        let mut n = stream(9, &[role::NOISE]);
        let (out, stats) =
            apply_noise_scaling(&z0, &t, &state, &[1, 4, 2], &cfg, 0, &sched, &mut b, &mut n)
                .unwrap();
        assert!((out[0] - 0.4).abs() < 1e-15);
        assert_eq!(out[1], 0.2);
        assert!((out[2] - 0.6).abs() < 1e-15);
        assert!((stats.masked_fraction - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        /// Monotone and bounded: t_theta >= t componentwise, equality off the
        /// mask, and everything stays within [t, ceiling].
        #[test]
        fn rescale_is_monotone(
            t in proptest::collection::vec(0.001f64..0.999, 1..8),
            mask_bits in proptest::collection::vec(any::<bool>(), 8),
            beta in 1.0f64..6.0,
        ) {
            let mask = &mask_bits[..t.len()];
            let ceiling = 0.999;
            let out = rescale_timesteps(&t, mask, beta, ceiling);
            for ((a, b), m) in out.iter().zip(&t).zip(mask) {
                prop_assert!(*a >= *b - 1e-15);
                prop_assert!(*a <= ceiling + 1e-15);
                if !m {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
