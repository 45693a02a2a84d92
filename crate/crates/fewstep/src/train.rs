//! The training loop: perturbed forward sampling, the 50% self-conditioning
//! alternation with stop-gradient, confidence-driven timestep rescaling,
//! joint losses (denoising MSE + rounding cross entropy + a small length
//! head term), gradient clipping, and Adam updates on an inverse-sqrt
//! learning-rate schedule.
//!
//! Every random draw is derived from (seed, iteration, example index,
//! role), so batches may be evaluated on any number of threads and a
//! resumed run replays the exact same sequence.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ParallelExample;
use crate::diffusion::{forward_sample, perturbed_forward_coeffs, ForwardCoeffs};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{denoise, DenoiserState, DropoutCtx, ForwardPass};
use crate::noise_scaling::{apply_noise_scaling, ScalingStats};
use crate::rng::{fill_standard_normal, role, stream};
use crate::sample::{generate, SelfCondMode};
use crate::schedule::{LrSchedule, NoiseSchedule, NoiseScalingConfig, PerturbSchedule};
use crate::tensor::Tensor;
use crate::vocab::EmbeddingCodebook;

/// Auxiliary weight of the length-prediction loss.
pub const LENGTH_LOSS_WEIGHT: f64 = 0.1;
/// Label smoothing applied to the length head.
pub const LABEL_SMOOTHING: f64 = 0.1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Sequences per step.
    pub batch_size: usize,
    pub total_iterations: u64,
    /// Minimum diffusion time epsilon.
    pub t_floor: f64,
    pub perturb: PerturbSchedule,
    pub noise_scaling: NoiseScalingConfig,
    pub lr: LrSchedule,
    /// Probability of the self-conditioned objective per step.
    pub sc_prob: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
    pub validation_interval: u64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            total_iterations: 3000,
            t_floor: 1e-3,
            perturb: PerturbSchedule::default(),
            noise_scaling: NoiseScalingConfig::new(vec![800, 1600, 2400], vec![2.0, 3.0, 4.0]),
            lr: LrSchedule::default(),
            sc_prob: 0.5,
            grad_clip: 1.0,
            seed: 0,
            validation_interval: 250,
            dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sc_prob) {
            return Err(Error::Config(format!(
                "self-conditioning probability {} outside [0, 1]",
                self.sc_prob
            )));
        }
        if !(0.0..=0.9).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 0.9]", self.dropout)));
        }
        if self.validation_interval == 0 {
            return Err(Error::Config("validation interval must be positive".into()));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 0.5) {
            return Err(Error::Config(format!("t floor {} outside (0, 0.5)", self.t_floor)));
        }
        self.perturb.validate()?;
        self.noise_scaling.validate()?;
        Ok(())
    }
}

/// Per-iteration training record. Serialized as one JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub iter: u64,
    pub l_diff: f64,
    pub l_round: f64,
    pub l_total: f64,
    pub lr: f64,
    /// Fraction of tokens whose timestep the confidence pass rescaled.
    pub mans_frac: f64,
    pub wall_ms: f64,
    /// Mean rescale delta t_theta - t over the batch.
    pub t_delta: f64,
    /// Scaling factor in force at this iteration.
    pub beta: f64,
    pub grad_norm: f64,
}

/// Validation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValMetrics {
    pub iter: u64,
    /// Plain-forward denoising loss at per-example fixed draws.
    pub val_l_diff: f64,
    /// Exact-match rate of NFE=5 reused-mode generation at true lengths.
    pub val_seq_acc: f64,
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared difference over all entries.
pub fn diffusion_loss(z_pred: &Tensor, z0: &Tensor) -> Result<f64> {
    if z_pred.shape() != z0.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            z_pred.shape(),
            z0.shape()
        )));
    }
    let n = (z0.rows() * z0.cols()) as f64;
    Ok(z_pred.sub(z0).sq_norm() / n)
}

/// Mean per-position cross entropy of softmax(rounding scores) against the
/// token sequence.
pub fn rounding_loss(z0: &Tensor, x: &[usize], codebook: &EmbeddingCodebook) -> Result<f64> {
    if z0.rows() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} latent rows vs {} tokens",
            z0.rows(),
            x.len()
        )));
    }
    for &id in x {
        if id >= codebook.vocab_size() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: codebook.vocab_size(),
            });
        }
    }
    let logits = codebook.rounding_logits(z0)?;
    let mut total = 0.0;
    for (l, &t) in x.iter().enumerate() {
        let row = logits.row(l);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t];
    }
    Ok(total / x.len() as f64)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam moment estimates, one pair of tensors per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(state: &DenoiserState) -> Self {
        let zeros: Vec<Tensor> = state
            .params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Clip the global gradient norm in place; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}

fn adam_update(state: &mut DenoiserState, adam: &mut AdamState, grads: &[Tensor], lr: f64) {
    adam.step += 1;
    let step = adam.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(step);
    let bc2 = 1.0 - ADAM_BETA2.powi(step);
    for (pid, g) in grads.iter().enumerate() {
        let m = &mut adam.m[pid];
        let v = &mut adam.v[pid];
        let theta = state.params_mut().tensor_mut(pid);
        for i in 0..g.data().len() {
            let gi = g.data()[i];
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            theta.data_mut()[i] -= lr * update;
        }
    }
}

// ---------------------------------------------------------------------------
// Per-example training graph
// ---------------------------------------------------------------------------

/// How the self-conditioning input of the second pass is produced.
pub enum ScInput<'t> {
    /// No second pass: the loss reads the first-pass prediction.
    FirstPass,
    /// Second pass conditioned on the detached first-pass prediction.
    Detached,
    /// Second pass conditioned on a fixed tensor (finite-difference probes).
    Fixed(&'t Tensor),
}

/// Handles into one example's training graph.
pub struct TrainingGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub l_diff: NodeId,
    pub l_round: NodeId,
    pub l_len: NodeId,
    /// First-pass prediction node (the stop-gradient source).
    pub first_pass: NodeId,
}

/// Assemble the full loss graph for one example at given per-token times.
/// The clean latent enters through the codebook parameter, so gradients
/// reach the codebook through the forward sample, the MSE target, and the
/// rounding scores.
pub fn build_training_graph(
    state: &DenoiserState,
    example: &ParallelExample,
    times: &[f64],
    coeffs: &ForwardCoeffs,
    noise: &Tensor,
    sc: ScInput,
    mut dropout: Option<DropoutCtx>,
) -> Result<TrainingGraph> {
    let mut graph = Graph::new();
    let mut fp = ForwardPass::new(&mut graph, state);

    let (enc, key_bias, keep) = fp.encode(state, &example.source, &mut dropout)?;
    let codebook = fp.codebook_node(state);
    let z0 = fp.graph.gather(codebook, &example.target);

    // Perturbed forward sample, differentiable in z0.
    let signal = fp.graph.row_scale(z0, &coeffs.signal);
    let scaled_noise = Tensor::from_fn(noise.rows(), noise.cols(), |r, c| {
        coeffs.noise_std[r] * noise.get(r, c)
    });
    let noise_node = fp.graph.constant(scaled_noise);
    let z_t = fp.graph.add(signal, noise_node);

    let zeros = fp
        .graph
        .constant(Tensor::zeros(example.target.len(), state.config.latent_dim));
    let first_pass = fp.decode(state, z_t, times, zeros, enc, &key_bias, &mut dropout)?;

    let z_out = match sc {
        ScInput::FirstPass => first_pass,
        ScInput::Detached => {
            let cond = fp.graph.detach(first_pass);
            fp.decode(state, z_t, times, cond, enc, &key_bias, &mut dropout)?
        }
        ScInput::Fixed(t) => {
            let cond = fp.graph.constant(t.clone());
            fp.decode(state, z_t, times, cond, enc, &key_bias, &mut dropout)?
        }
    };

    let l_diff = fp.graph.mse_loss(z_out, z0);
    let logits = fp.graph.neg_sq_dist(z0, codebook);
    let l_round = fp.graph.cross_entropy(logits, &example.target, 0.0);
    let len_logits = fp.length_logits(state, enc, &keep);
    let l_len = fp
        .graph
        .cross_entropy(len_logits, &[example.target.len() - 1], LABEL_SMOOTHING);

    let partial = fp.graph.add(l_diff, l_round);
    let loss = fp.graph.add_scaled(partial, l_len, LENGTH_LOSS_WEIGHT);

    Ok(TrainingGraph {
        graph,
        loss,
        l_diff,
        l_round,
        l_len,
        first_pass,
    })
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Trainer {
    pub state: DenoiserState,
    pub config: TrainConfig,
    pub sched: NoiseSchedule,
    pub adam: AdamState,
    pub iteration: u64,
}

struct ExampleResult {
    grads: Vec<Option<Tensor>>,
    l_diff: f64,
    l_round: f64,
    l_total: f64,
    scaling: ScalingStats,
    applied: bool,
}

impl Trainer {
    pub fn new(state: DenoiserState, config: TrainConfig, sched: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&state);
        Ok(Trainer {
            state,
            config,
            sched,
            adam,
            iteration: 0,
        })
    }

    fn run_example(&self, n: u64, idx: u64, example: &ParallelExample) -> Result<ExampleResult> {
        if example.target.is_empty() || example.source.is_empty() {
            return Err(Error::Config("examples must be nonempty".into()));
        }
        if example.target.len() > self.state.config.max_len {
            return Err(Error::Domain(format!(
                "target length {} exceeds max {}",
                example.target.len(),
                self.state.config.max_len
            )));
        }
        let cfg = &self.config;
        let eps = cfg.t_floor;
        let len = example.target.len();

        // One diffusion time per sequence, broadcast over tokens, kept
        // under the ceiling so rescaled entries stay in domain.
        let mut time_rng = stream(cfg.seed, &[role::TIME, n, idx]);
        let t = time_rng.random_range(eps..1.0).min(1.0 - eps);
        let t_vec = vec![t; len];

        let z0 = self.state.codebook().embed(&example.target)?;
        let mut branch_rng = stream(cfg.seed, &[role::BRANCH, n, idx]);
        let mut conf_rng = stream(cfg.seed, &[role::CONFIDENCE, n, idx]);
        let (t_theta, scaling) = apply_noise_scaling(
            &z0,
            &t_vec,
            &self.state,
            &example.source,
            &cfg.noise_scaling,
            n,
            &self.sched,
            &mut branch_rng,
            &mut conf_rng,
        )?;
        let applied = t_theta != t_vec || scaling.masked_fraction > 0.0;

        let coeffs = perturbed_forward_coeffs(&self.sched, &cfg.perturb, &t_theta)?;
        let mut noise = Tensor::zeros(len, self.state.config.latent_dim);
        let mut noise_rng = stream(cfg.seed, &[role::NOISE, n, idx]);
        fill_standard_normal(&mut noise_rng, noise.data_mut());

        let take_sc = branch_rng.random::<f64>() < cfg.sc_prob;
        let sc = if take_sc {
            ScInput::Detached
        } else {
            ScInput::FirstPass
        };
        let mut dropout_rng = stream(cfg.seed, &[role::DROPOUT, n, idx]);
        let ctx = (cfg.dropout > 0.0).then_some(DropoutCtx {
            prob: cfg.dropout,
            rng: &mut dropout_rng,
        });

        let tg = build_training_graph(&self.state, example, &t_theta, &coeffs, &noise, sc, ctx)?;
        let l_total = tg.graph.value(tg.loss).get(0, 0);
        if !l_total.is_finite() {
            return Err(Error::Diverged {
                iteration: n,
                reason: format!("non-finite loss on example {idx}"),
            });
        }
        let grads = tg.graph.backward(tg.loss, self.state.params().len());
        Ok(ExampleResult {
            grads,
            l_diff: tg.graph.value(tg.l_diff).get(0, 0),
            l_round: tg.graph.value(tg.l_round).get(0, 0),
            l_total,
            scaling,
            applied,
        })
    }

    /// One optimizer step over a batch. `n` must be `self.iteration + 1`.
    pub fn train_step(&mut self, batch: &[&ParallelExample], n: u64) -> Result<TrainMetrics> {
        assert_eq!(n, self.iteration + 1, "iterations must advance one at a time");
        let start = std::time::Instant::now();
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }

        let results: Vec<Result<ExampleResult>> = batch
            .par_iter()
            .enumerate()
            .map(|(idx, ex)| self.run_example(n, idx as u64, ex))
            .collect();

        // Ordered reduction keeps results independent of thread scheduling.
        let mut grads: Vec<Tensor> = self
            .state
            .params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let mut l_diff = 0.0;
        let mut l_round = 0.0;
        let mut l_total = 0.0;
        let mut mans_frac = 0.0;
        let mut t_delta = 0.0;
        for r in results {
            let r = r?;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                if let Some(g) = g {
                    acc.add_assign(g);
                }
            }
            l_diff += r.l_diff;
            l_round += r.l_round;
            l_total += r.l_total;
            if r.applied {
                mans_frac += r.scaling.masked_fraction;
                t_delta += r.scaling.mean_delta;
            }
        }
        let b = batch.len() as f64;
        for g in grads.iter_mut() {
            g.scale_in_place(1.0 / b);
        }

        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        let lr = self.config.lr.lr(n);
        adam_update(&mut self.state, &mut self.adam, &grads, lr);
        if !self.state.params().all_finite() {
            return Err(Error::Diverged {
                iteration: n,
                reason: "parameters became non-finite after the update".into(),
            });
        }
        self.iteration = n;

        Ok(TrainMetrics {
            iter: n,
            l_diff: l_diff / b,
            l_round: l_round / b,
            l_total: l_total / b,
            lr,
            mans_frac: mans_frac / b,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            t_delta: t_delta / b,
            beta: self.config.noise_scaling.beta_at(n)?,
            grad_norm,
        })
    }

    /// Deterministic batch composition for iteration n: uniform draws with
    /// replacement from the training split.
    pub fn batch_indices(&self, n: u64, pool: usize) -> Vec<usize> {
        let mut rng = stream(self.config.seed, &[role::BATCH, n]);
        (0..self.config.batch_size)
            .map(|_| rng.random_range(0..pool))
            .collect()
    }
}

/// Plain-forward validation loss and NFE=5 sequence accuracy on held-out
/// data. Per-example draws are fixed (independent of the iteration), so the
/// series is comparable across checkpoints and between runs.
pub fn validate(
    state: &DenoiserState,
    val: &[ParallelExample],
    sched: &NoiseSchedule,
    seed: u64,
    nfe: usize,
) -> Result<ValMetrics> {
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let eps = sched.t_floor;
    let results: Vec<Result<(f64, bool)>> = val
        .par_iter()
        .enumerate()
        .map(|(idx, ex)| {
            let idx = idx as u64;
            let z0 = state.codebook().embed(&ex.target)?;
            let mut t_rng = stream(seed, &[role::VALIDATION, idx, 0]);
            let t = t_rng.random_range(eps..1.0 - eps);
            let times = vec![t; ex.target.len()];
            let mut noise = Tensor::zeros(z0.rows(), z0.cols());
            let mut noise_rng = stream(seed, &[role::VALIDATION, idx, 1]);
            fill_standard_normal(&mut noise_rng, noise.data_mut());
            let z_t = forward_sample(&z0, &times, &noise, sched)?;
            let pred = denoise(state, &z_t, &times, None, &ex.source)?;
            let loss = diffusion_loss(&pred, &z0)?;

            let mut gen_rng = stream(seed, &[role::VALIDATION, idx, 2]);
            let gen_seed: u64 = gen_rng.random();
            let gen = generate(
                state,
                &ex.source,
                ex.target.len(),
                nfe,
                SelfCondMode::Reused,
                gen_seed,
                sched,
            )?;
            Ok((loss, gen.tokens == ex.target))
        })
        .collect();

    let mut loss = 0.0;
    let mut correct = 0usize;
    for r in results {
        let (l, ok) = r?;
        loss += l;
        if ok {
            correct += 1;
        }
    }
    Ok(ValMetrics {
        iter: 0,
        val_l_diff: loss / val.len() as f64,
        val_seq_acc: correct as f64 / val.len() as f64,
    })
}

/// Drive the trainer for its configured number of iterations, invoking the
/// sinks for metrics, validation records, and checkpoints.
pub fn train_loop(
    trainer: &mut Trainer,
    train_split: &[ParallelExample],
    val_split: &[ParallelExample],
    mut on_metrics: impl FnMut(&TrainMetrics) -> Result<()>,
    mut on_validation: impl FnMut(&ValMetrics) -> Result<()>,
    mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
) -> Result<()> {
    if train_split.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    while trainer.iteration < trainer.config.total_iterations {
        let n = trainer.iteration + 1;
        let indices = trainer.batch_indices(n, train_split.len());
        let batch: Vec<&ParallelExample> = indices.iter().map(|&i| &train_split[i]).collect();
        let metrics = trainer.train_step(&batch, n)?;
        on_metrics(&metrics)?;

        let last = n == trainer.config.total_iterations;
        if n.is_multiple_of(trainer.config.validation_interval) || last {
            if !val_split.is_empty() {
                let mut vm =
                    validate(&trainer.state, val_split, &trainer.sched, trainer.config.seed, 5)?;
                vm.iter = n;
                on_validation(&vm)?;
            }
            on_checkpoint(trainer)?;
        }
    }
    Ok(())
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::data::{generate_synth, SynthKind, SynthSpec};
    use crate::model::DenoiserConfig;
    use crate::schedule::ScheduleKind;
    use crate::vocab::EmbeddingCodebook;

    fn micro_trainer(seed: u64) -> Trainer {
        let mut rng = stream(seed, &[role::INIT]);
        let state = DenoiserState::init(DenoiserConfig::micro(8, 6), &mut rng).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            total_iterations: 10,
            seed,
            validation_interval: 5,
            dropout: 0.1,
            ..TrainConfig::default()
        };
        Trainer::new(state, cfg, NoiseSchedule::new(ScheduleKind::Sqrt)).unwrap()
    }

    fn toy_data(seed: u64) -> Vec<ParallelExample> {
        generate_synth(&SynthSpec {
            kind: SynthKind::Copy,
            vocab: 8,
            len_min: 2,
            len_max: 5,
            count: 64,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn diffusion_loss_examples() {
        let z = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.3);
        assert_eq!(diffusion_loss(&z, &z).unwrap(), 0.0);
        let shifted = Tensor::from_fn(3, 4, |r, c| z.get(r, c) + 1.0);
        assert!((diffusion_loss(&shifted, &z).unwrap() - 1.0).abs() < 1e-15);
        // Independent naive accumulation.
        let mut rng = stream(3, &[role::NOISE]);
        let a = Tensor::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
        let b = Tensor::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
        let mut acc = 0.0;
        for r in 0..3 {
            for c in 0..4 {
                acc += (a.get(r, c) - b.get(r, c)).powi(2);
            }
        }
        assert!((diffusion_loss(&a, &b).unwrap() - acc / 12.0).abs() < 1e-12);
    }

    #[test]
    fn rounding_loss_examples() {
        // Well-separated rows: embedding its own tokens costs nearly nothing.
        let table = Tensor::from_fn(6, 4, |r, c| if c == 0 { 5.0 * r as f64 } else { 0.0 });
        let cb = EmbeddingCodebook::from_table(table);
        let x = vec![0usize, 3, 5];
        let z0 = cb.embed(&x).unwrap();
        assert!(rounding_loss(&z0, &x, &cb).unwrap() < 1e-3);

        // All rows identical: uniform rounding distribution, loss = ln V.
        let cb = EmbeddingCodebook::from_table(Tensor::from_fn(6, 4, |_, _| 0.5));
        let z0 = cb.embed(&[0, 1]).unwrap();
        let loss = rounding_loss(&z0, &[0, 1], &cb).unwrap();
        assert!((loss - 6.0f64.ln()).abs() < 1e-12);

        // Matches an independent log-sum-exp per position.
        let mut rng = stream(5, &[role::NOISE]);
        let cb = EmbeddingCodebook::init(6, 4, &mut rng);
        let z = Tensor::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
        let x = vec![2usize, 4];
        let got = rounding_loss(&z, &x, &cb).unwrap();
        let mut manual = 0.0;
        for (l, &t) in x.iter().enumerate() {
            let scores: Vec<f64> = (0..6)
                .map(|m| {
                    -z.row(l)
                        .iter()
                        .zip(cb.table().row(m))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect();
            let lse = scores.iter().map(|s| s.exp()).sum::<f64>().ln();
            manual += lse - scores[t];
        }
        assert!((got - manual / 2.0).abs() < 1e-10);

        assert!(rounding_loss(&z, &[9, 9], &cb).is_err());
    }

    #[test]
    fn clip_reduces_global_norm() {
        let mut grads = vec![
            Tensor::from_vec(1, 2, vec![3.0, 4.0]),
            Tensor::from_vec(1, 1, vec![12.0]),
        ];
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 13.0).abs() < 1e-12);
        let post = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        assert!(post <= 1.0 + 1e-9);
        // Below the clip nothing changes.
        let mut grads = vec![Tensor::from_vec(1, 2, vec![0.3, 0.4])];
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 0.5).abs() < 1e-12);
        assert_eq!(grads[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        let data = toy_data(1);
        let run = |seed: u64| -> Vec<(f64, f64, f64)> {
            let mut tr = micro_trainer(seed);
            let mut out = Vec::new();
            for n in 1..=5 {
                let idx = tr.batch_indices(n, data.len());
                let batch: Vec<&ParallelExample> = idx.iter().map(|&i| &data[i]).collect();
                let m = tr.train_step(&batch, n).unwrap();
                out.push((m.l_diff, m.l_round, m.l_total));
            }
            out
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn sc_branch_changes_only_the_diffusion_loss() {
        let data = toy_data(2);
        let mut a = micro_trainer(5);
        a.config.sc_prob = 0.0;
        a.config.dropout = 0.0;
        let mut b = micro_trainer(5);
        b.config.sc_prob = 1.0;
        b.config.dropout = 0.0;
        let idx = a.batch_indices(1, data.len());
        let batch: Vec<&ParallelExample> = idx.iter().map(|&i| &data[i]).collect();
        let ma = a.train_step(&batch, 1).unwrap();
        let mb = b.train_step(&batch, 1).unwrap();
        // Same draws, same first pass; the self-conditioned second pass
        // changes the diffusion loss but the rounding loss reads z0 only.
        assert_ne!(ma.l_diff, mb.l_diff);
        assert_eq!(ma.l_round, mb.l_round);
    }

    #[test]
    fn stop_gradient_blocks_first_pass() {
        let mut rng = stream(31, &[role::INIT]);
        let state = DenoiserState::init(DenoiserConfig::micro(8, 6), &mut rng).unwrap();
        let ex = ParallelExample {
            source: vec![1, 4, 5, 2],
            target: vec![4, 5, 6],
        };
        let times = vec![0.4; 3];
        let coeffs = perturbed_forward_coeffs(
            &NoiseSchedule::new(ScheduleKind::Sqrt),
            &PerturbSchedule::default(),
            &times,
        )
        .unwrap();
        let mut noise = Tensor::zeros(3, 4);
        let mut nrng = stream(31, &[role::NOISE]);
        fill_standard_normal(&mut nrng, noise.data_mut());

        // Analytic gradient with the detached condition.
        let tg =
            build_training_graph(&state, &ex, &times, &coeffs, &noise, ScInput::Detached, None)
                .unwrap();
        let (grads, probe) =
            tg.graph
                .backward_probed(tg.loss, state.params().len(), Some(tg.first_pass));
        assert!(
            probe.is_none(),
            "no gradient may flow into the detached first pass"
        );
        let sc_value = tg.graph.value(tg.first_pass).clone();
        let loss0 = tg.graph.value(tg.loss).get(0, 0);

        // Finite differences with the condition frozen at its unperturbed
        // value must match the analytic gradient: the stop-gradient path
        // contributes exactly zero.
        let h = 1e-5;
        let mut checked = 0;
        for pid in 0..state.params().len() {
            let len = state.params().tensor(pid).data().len();
            for idx in [0, len / 2] {
                let fd = |delta: f64| -> f64 {
                    let mut s = state.clone();
                    s.params_mut().tensor_mut(pid).data_mut()[idx] += delta;
                    let tg = build_training_graph(
                        &s,
                        &ex,
                        &times,
                        &coeffs,
                        &noise,
                        ScInput::Fixed(&sc_value),
                        None,
                    )
                    .unwrap();
                    tg.graph.value(tg.loss).get(0, 0)
                };
                let numeric = (fd(h) - fd(-h)) / (2.0 * h);
                let analytic = grads[pid].as_ref().map(|t| t.data()[idx]).unwrap_or(0.0);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    rel < 1e-3,
                    "param {} [{idx}]: analytic {analytic} vs frozen-condition fd {numeric}",
                    state.params().name(pid)
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
        assert!(loss0.is_finite());
    }

    #[test]
    fn losses_match_pure_evaluations() {
        // The graph-side losses and the standalone operations agree.
        let mut rng = stream(33, &[role::INIT]);
        let state = DenoiserState::init(DenoiserConfig::micro(8, 6), &mut rng).unwrap();
        let ex = ParallelExample {
            source: vec![1, 4, 2],
            target: vec![4, 6],
        };
        let times = vec![0.3; 2];
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let coeffs =
            perturbed_forward_coeffs(&sched, &PerturbSchedule::identity(), &times).unwrap();
        let noise = Tensor::zeros(2, 4);
        let tg =
            build_training_graph(&state, &ex, &times, &coeffs, &noise, ScInput::FirstPass, None)
                .unwrap();
        let cb = state.codebook();
        let z0 = cb.embed(&ex.target).unwrap();
        let l_round = rounding_loss(&z0, &ex.target, &cb).unwrap();
        assert!((tg.graph.value(tg.l_round).get(0, 0) - l_round).abs() < 1e-12);

        // With identity perturbation and zero noise the denoiser input is
        // alpha * z0; check l_diff against the pure path.
        let z_t = forward_sample(&z0, &times, &noise, &sched).unwrap();
        let pred = denoise(&state, &z_t, &times, None, &ex.source).unwrap();
        let l_diff = diffusion_loss(&pred, &z0).unwrap();
        assert!((tg.graph.value(tg.l_diff).get(0, 0) - l_diff).abs() < 1e-12);
    }

    #[test]
    fn short_training_reduces_loss() {
        let data = toy_data(3);
        let mut tr = micro_trainer(11);
        tr.config.total_iterations = 60;
        tr.config.lr.warmup = 20;
        tr.config.dropout = 0.0;
        let mut first = None;
        let mut last = 0.0;
        train_loop(
            &mut tr,
            &data,
            &[],
            |m| {
                if first.is_none() {
                    first = Some(m.l_total);
                }
                last = m.l_total;
                Ok(())
            },
            |_| Ok(()),
            |_| Ok(()),
        )
        .unwrap();
        assert!(last < first.unwrap(), "{last} vs {first:?}");
    }

    #[test]
    fn zero_iterations_is_a_clean_no_op() {
        let data = toy_data(4);
        let mut tr = micro_trainer(13);
        tr.config.total_iterations = 0;
        let mut metric_count = 0;
        train_loop(
            &mut tr,
            &data,
            &[],
            |_| {
                metric_count += 1;
                Ok(())
            },
            |_| Ok(()),
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(metric_count, 0);
        assert_eq!(tr.iteration, 0);
    }

    #[test]
    fn metrics_beta_jumps_at_milestone() {
        let data = toy_data(6);
        let mut tr = micro_trainer(19);
        tr.config.noise_scaling = NoiseScalingConfig::new(vec![3, 6, 9], vec![2.0, 3.0, 4.0]);
        let mut betas = Vec::new();
        for n in 1..=7 {
            let idx = tr.batch_indices(n, data.len());
            let batch: Vec<&ParallelExample> = idx.iter().map(|&i| &data[i]).collect();
            betas.push(tr.train_step(&batch, n).unwrap().beta);
        }
        assert_eq!(betas[..2], [2.0, 2.0]);
        assert_eq!(betas[2..5], [3.0, 3.0, 3.0]);
        assert_eq!(betas[5..], [4.0, 4.0]);
    }

    #[test]
    fn validation_runs_and_scores() {
        let data = toy_data(5);
        let mut rng = stream(17, &[role::INIT]);
        let state = DenoiserState::init(DenoiserConfig::micro(8, 6), &mut rng).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Sqrt);
        let vm = validate(&state, &data[..8], &sched, 3, 5).unwrap();
        assert!(vm.val_l_diff.is_finite());
        assert!((0.0..=1.0).contains(&vm.val_seq_acc));
        let vm2 = validate(&state, &data[..8], &sched, 3, 5).unwrap();
        assert_eq!(vm.val_l_diff, vm2.val_l_diff);
    }
}
