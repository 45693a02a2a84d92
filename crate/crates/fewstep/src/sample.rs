//! Reverse-process generation and MBR decoding.
//!
//! Generation walks a uniform descending time grid from t = 1 to the floor,
//! predicting the clean latent at each step and sampling the posterior
//! transition. Three self-conditioning modes are supported: none (zeros),
//! reused (the previous step's prediction, one denoiser call per step), and
//! corrected (a fresh same-step estimate as the condition, doubling the
//! calls). The final output rounds the last prediction rather than the last
//! noisy draw.

use serde::{Deserialize, Serialize};

use crate::analysis::{sentence_bleu, BleuConfig};
use crate::diffusion::reverse_step;
use crate::error::{Error, Result};
use crate::model::{denoise, length_logits, top_lengths, DenoiserState};
use crate::rng::{fill_standard_normal, role, stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelfCondMode {
    None,
    #[default]
    Reused,
    Corrected,
}

impl std::str::FromStr for SelfCondMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SelfCondMode::None),
            "reused" => Ok(SelfCondMode::Reused),
            "corrected" => Ok(SelfCondMode::Corrected),
            other => Err(Error::Config(format!(
                "unknown self-conditioning mode {other:?} (none|reused|corrected)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Number of denoising steps (denoiser calls in reused/none mode).
    pub nfe: usize,
    pub sc_mode: SelfCondMode,
    /// Candidate lengths considered by MBR.
    pub length_beam: usize,
    /// Independent noise seeds per candidate length.
    pub noise_beam: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            nfe: 5,
            sc_mode: SelfCondMode::Reused,
            length_beam: 1,
            noise_beam: 1,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe < 1 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        if self.length_beam < 1 || self.noise_beam < 1 {
            return Err(Error::Config("beams must be at least 1".into()));
        }
        Ok(())
    }
}

/// One record per denoiser step.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub t: f64,
    pub z_t: Tensor,
    pub prediction: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub tokens: Vec<usize>,
    pub trajectory: Trajectory,
    pub denoiser_calls: usize,
}

/// One decoded hypothesis inside an MBR candidate set.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    pub length: usize,
    pub seed: u64,
}

/// nfe + 1 uniformly spaced times descending from 1 to the floor. The
/// endpoints are exact so the final reverse step lands on the schedule
/// domain boundary.
pub fn time_grid(nfe: usize, t_floor: f64) -> Vec<f64> {
    assert!(nfe >= 1, "nfe must be at least 1");
    let mut grid: Vec<f64> = (0..=nfe)
        .map(|i| 1.0 - (1.0 - t_floor) * i as f64 / nfe as f64)
        .collect();
    grid[nfe] = t_floor;
    grid
}

/// Generate a sequence of the given target length conditioned on `source`.
pub fn generate(
    state: &DenoiserState,
    source: &[usize],
    length: usize,
    nfe: usize,
    sc_mode: SelfCondMode,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Generated> {
    if length == 0 || length > state.config.max_len {
        return Err(Error::Domain(format!(
            "target length {length} outside 1..={}",
            state.config.max_len
        )));
    }
    if nfe < 1 {
        return Err(Error::Config("nfe must be at least 1".into()));
    }
    let h = state.config.latent_dim;
    let grid = time_grid(nfe, sched.t_floor);

    let mut rng = stream(seed, &[role::GENERATE]);
    let mut z = Tensor::zeros(length, h);
    fill_standard_normal(&mut rng, z.data_mut());

    let mut trajectory = Trajectory::default();
    let mut calls = 0usize;
    let mut prev_pred: Option<Tensor> = None;

    for j in 0..nfe {
        let t = grid[j];
        let s = grid[j + 1];
        let times = vec![t; length];
        let sc = match sc_mode {
            SelfCondMode::None => None,
            SelfCondMode::Reused => prev_pred.clone(),
            SelfCondMode::Corrected => {
                let fresh = denoise(state, &z, &times, None, source)?;
                calls += 1;
                Some(fresh)
            }
        };
        let pred = denoise(state, &z, &times, sc.as_ref(), source)?;
        calls += 1;
        pred.check_finite("denoiser prediction")?;
        trajectory.steps.push(TrajectoryStep {
            t,
            z_t: z.clone(),
            prediction: pred.clone(),
        });
        let mut noise = Tensor::zeros(length, h);
        fill_standard_normal(&mut rng, noise.data_mut());
        z = reverse_step(&z, &pred, s, t, &noise, sched)?;
        prev_pred = Some(pred);
    }

    let tokens = state
        .codebook()
        .round_to_tokens(&trajectory.steps.last().unwrap().prediction)?;
    Ok(Generated {
        tokens,
        trajectory,
        denoiser_calls: calls,
    })
}

/// Expand the candidate set: top length-beam predicted lengths, noise-beam
/// seeds per length. Candidate order is (length rank, beam index) and each
/// candidate's seed is derived from the master seed and its coordinates.
pub fn expand_candidates(
    state: &DenoiserState,
    source: &[usize],
    gcfg: &GenerationConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Candidate>> {
    gcfg.validate()?;
    let logits = length_logits(state, source)?;
    let lengths = top_lengths(&logits, gcfg.length_beam);
    let mut out = Vec::with_capacity(lengths.len() * gcfg.noise_beam);
    for &len in &lengths {
        for beam in 0..gcfg.noise_beam {
            let mut s = stream(gcfg.seed, &[role::CANDIDATE, len as u64, beam as u64]);
            let cand_seed: u64 = rand::Rng::random(&mut s);
            let gen = generate(state, source, len, gcfg.nfe, gcfg.sc_mode, cand_seed, sched)?;
            out.push(Candidate {
                tokens: gen.tokens,
                length: len,
                seed: cand_seed,
            });
        }
    }
    Ok(out)
}

/// Select the candidate maximizing mean sentence BLEU against the others;
/// ties keep the earliest candidate.
pub fn mbr_select(candidates: &[Candidate], bleu: &BleuConfig) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Config("empty candidate set".into()));
    }
    if candidates.len() == 1 {
        return Ok(0);
    }
    let mut best = 0usize;
    let mut best_utility = f64::NEG_INFINITY;
    for (i, ci) in candidates.iter().enumerate() {
        let mut total = 0.0;
        let mut count = 0usize;
        for (j, cj) in candidates.iter().enumerate() {
            if i == j {
                continue;
            }
            total += sentence_bleu(&ci.tokens, &cj.tokens, bleu)?;
            count += 1;
        }
        let utility = total / count as f64;
        if utility > best_utility {
            best_utility = utility;
            best = i;
        }
    }
    Ok(best)
}

/// Full MBR decode: expand candidates, pick by mean pairwise BLEU.
pub fn mbr_decode(
    state: &DenoiserState,
    source: &[usize],
    gcfg: &GenerationConfig,
    sched: &NoiseSchedule,
    bleu: &BleuConfig,
) -> Result<(Vec<usize>, Vec<Candidate>)> {
    let candidates = expand_candidates(state, source, gcfg, sched)?;
    let idx = mbr_select(&candidates, bleu)?;
    Ok((candidates[idx].tokens.clone(), candidates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::rng::{role, stream};
    use crate::schedule::ScheduleKind;

    fn micro_state(seed: u64) -> DenoiserState {
        let mut rng = stream(seed, &[role::INIT]);
        DenoiserState::init(DenoiserConfig::micro(8, 6), &mut rng).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = time_grid(1, 0.001);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[1], 0.001);

        let g = time_grid(4, 0.0);
        assert_eq!(g, vec![1.0, 0.75, 0.5, 0.25, 0.0]);

        let g = time_grid(7, 0.001);
        let max_gap = g
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0f64, f64::max);
        assert!((max_gap - (1.0 - 0.001) / 7.0).abs() < 1e-12);
    }

    #[test]
    fn call_count_contract() {
        let state = micro_state(3);
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let src = vec![1, 4, 5, 2];
        for nfe in [1usize, 5] {
            let reused =
                generate(&state, &src, 4, nfe, SelfCondMode::Reused, 9, &sched).unwrap();
            assert_eq!(reused.denoiser_calls, nfe);
            assert_eq!(reused.trajectory.steps.len(), nfe);
            let corrected =
                generate(&state, &src, 4, nfe, SelfCondMode::Corrected, 9, &sched).unwrap();
            assert_eq!(corrected.denoiser_calls, 2 * nfe);
        }
    }

    #[test]
    fn nfe_one_none_equals_reused() {
        let state = micro_state(4);
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let src = vec![1, 4, 2];
        let a = generate(&state, &src, 3, 1, SelfCondMode::None, 5, &sched).unwrap();
        let b = generate(&state, &src, 3, 1, SelfCondMode::Reused, 5, &sched).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(
            a.trajectory.steps[0].prediction,
            b.trajectory.steps[0].prediction
        );
    }

    #[test]
    fn trajectory_times_strictly_decrease() {
        let state = micro_state(5);
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let gen = generate(&state, &[1, 4, 2], 4, 6, SelfCondMode::Reused, 7, &sched).unwrap();
        for w in gen.trajectory.steps.windows(2) {
            assert!(w[1].t < w[0].t);
            assert!(w[0].prediction.is_finite());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let state = micro_state(6);
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let a = generate(&state, &[1, 4, 2], 4, 5, SelfCondMode::Reused, 11, &sched).unwrap();
        let b = generate(&state, &[1, 4, 2], 4, 5, SelfCondMode::Reused, 11, &sched).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let c = generate(&state, &[1, 4, 2], 4, 5, SelfCondMode::Reused, 12, &sched).unwrap();
        // Different seed draws different initial noise.
        assert_ne!(
            a.trajectory.steps[0].z_t, c.trajectory.steps[0].z_t,
            "seed must steer the initial draw"
        );
    }

    #[test]
    fn corrected_collapses_to_reused_for_insensitive_model() {
        let mut state = micro_state(7);
        state.make_self_cond_insensitive();
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let a = generate(&state, &[1, 4, 2], 4, 5, SelfCondMode::Reused, 13, &sched).unwrap();
        let b = generate(&state, &[1, 4, 2], 4, 5, SelfCondMode::Corrected, 13, &sched).unwrap();
        assert_eq!(a.tokens, b.tokens);
        for (sa, sb) in a.trajectory.steps.iter().zip(&b.trajectory.steps) {
            assert_eq!(sa.prediction, sb.prediction);
        }
    }

    #[test]
    fn candidate_set_size_and_determinism() {
        let state = micro_state(8);
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let gcfg = GenerationConfig {
            nfe: 2,
            sc_mode: SelfCondMode::Reused,
            length_beam: 3,
            noise_beam: 2,
            seed: 21,
        };
        let cands = expand_candidates(&state, &[1, 4, 5, 2], &gcfg, &sched).unwrap();
        assert_eq!(cands.len(), 6);
        let again = expand_candidates(&state, &[1, 4, 5, 2], &gcfg, &sched).unwrap();
        for (a, b) in cands.iter().zip(&again) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.seed, b.seed);
        }
    }

    #[test]
    fn rejects_out_of_range_length() {
        let state = micro_state(9);
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        assert!(generate(&state, &[1, 2], 0, 5, SelfCondMode::None, 1, &sched).is_err());
        assert!(generate(&state, &[1, 2], 7, 5, SelfCondMode::None, 1, &sched).is_err());
    }

    #[test]
    fn mbr_single_and_identical_candidates() {
        let bleu = BleuConfig::default();
        let one = vec![Candidate {
            tokens: vec![4, 5, 6],
            length: 3,
            seed: 0,
        }];
        assert_eq!(mbr_select(&one, &bleu).unwrap(), 0);
        let same = vec![
            Candidate {
                tokens: vec![4, 5],
                length: 2,
                seed: 0,
            },
            Candidate {
                tokens: vec![4, 5],
                length: 2,
                seed: 1,
            },
            Candidate {
                tokens: vec![4, 5],
                length: 2,
                seed: 2,
            },
        ];
        assert_eq!(mbr_select(&same, &bleu).unwrap(), 0);
    }

    #[test]
    fn mbr_prefers_the_consensus_candidate() {
        // The middle candidate shares more n-grams with both others.
        let bleu = BleuConfig::default();
        let cands = vec![
            Candidate {
                tokens: vec![4, 5, 6, 9],
                length: 4,
                seed: 0,
            },
            Candidate {
                tokens: vec![4, 5, 6, 7],
                length: 4,
                seed: 1,
            },
            Candidate {
                tokens: vec![8, 5, 6, 7],
                length: 4,
                seed: 2,
            },
        ];
        let picked = mbr_select(&cands, &bleu).unwrap();
        // Brute-force pairwise utility matrix.
        let mut best = 0;
        let mut best_u = f64::NEG_INFINITY;
        for i in 0..cands.len() {
            let mut u = 0.0;
            for j in 0..cands.len() {
                if i != j {
                    u += sentence_bleu(&cands[i].tokens, &cands[j].tokens, &bleu).unwrap();
                }
            }
            let u = u / (cands.len() - 1) as f64;
            if u > best_u {
                best_u = u;
                best = i;
            }
        }
        assert_eq!(picked, best);
        assert_eq!(picked, 1);
    }
}
