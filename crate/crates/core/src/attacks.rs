//! Confidence-maximizing l∞ attacks.
//!
//! [`monotone_pgd`] ascends the confidence with sign steps along a
//! momentum direction. A step that does not raise the confidence is
//! rejected and the step size halved; an accepted step grows it by 1.1.
//! Every iterate stays inside `[max(0, x − ε), min(1, x + ε)]`, and the
//! clean point itself counts as an iterate, so the result never reports
//! less than the clean confidence.
//!
//! All samples of a batch are attacked together but keep independent
//! state (step size, momentum, current point).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::oe_loss;
use crate::metrics::confidence;
use crate::network::{forward, forward_graph, BoundParams, NetworkSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Uniform perturbation in `[−radius, radius]^d`.
    NearPoint(f32),
    /// Uniform in the whole ε-box.
    UniformBall,
    /// See [`contrast_init`].
    Contrast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub steps: usize,
    pub restarts: usize,
    pub initial_step: f32,
    pub momentum: f32,
    pub init: InitScheme,
    pub seed: u64,
}

impl AttackConfig {
    /// 500 steps, 5 restarts, momentum 0.9, uniform init, step `0.1·ε`.
    pub fn new(epsilon: f32) -> Self {
        AttackConfig {
            epsilon,
            steps: 500,
            restarts: 5,
            initial_step: 0.1 * epsilon,
            momentum: 0.9,
            init: InitScheme::UniformBall,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon >= 0.0) {
            return bad(format!(
                "attack epsilon must be non-negative, got {}",
                self.epsilon
            ));
        }
        if self.steps == 0 || self.restarts == 0 {
            return bad("attack steps and restarts must be at least 1".into());
        }
        if !(self.initial_step >= 0.0) {
            return bad(format!(
                "initial step must be non-negative, got {}",
                self.initial_step
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if let InitScheme::NearPoint(r) = self.init {
            if !(0.0..=self.epsilon).contains(&r) {
                return bad(format!("init radius {r} must lie in [0, epsilon]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    /// Shape `[C, H, W]`.
    pub best_point: Tensor,
    pub best_confidence: f32,
    pub trajectory_max_seen: f32,
}

/// Pixels above `1 − ε` go to 1, the rest to `max(0, x − ε)`.
pub fn contrast_init(x: &Tensor, epsilon: f32) -> Tensor {
    x.map(|v| {
        if v > 1.0 - epsilon {
            1.0
        } else {
            (v - epsilon).max(0.0)
        }
    })
}

/// Lower and upper corners of the clipped ε-box.
pub fn clipped_box(x: &Tensor, epsilon: f32) -> (Tensor, Tensor) {
    (
        x.map(|v| (v - epsilon).max(0.0)),
        x.map(|v| (v + epsilon).min(1.0)),
    )
}

/// Clamps `p` into the clipped ε-box of `x` (same shapes).
pub fn project(p: &Tensor, x: &Tensor, epsilon: f32) -> Result<Tensor> {
    p.zip_map(x, |v, c| {
        v.clamp((c - epsilon).max(0.0), (c + epsilon).min(1.0))
    })
}

/// Confidences and log-confidence input gradients for a batch.
fn conf_and_grad(
    spec: &NetworkSpec,
    params: &ParamStore,
    x: &Tensor,
) -> Result<(Vec<f32>, Tensor)> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let xn = g.param(x.clone());
    let logits = forward_graph(&mut g, spec, &bound, xn)?;
    let confs = (0..x.batch())
        .map(|b| confidence(g.value(logits).row(b)))
        .collect();
    let max = g.max_last(logits)?;
    let lse = g.log_sum_exp(logits)?;
    let log_conf = g.sub(max, lse)?;
    let root = g.sum(log_conf);
    let mut grads = g.backward(root)?;
    let grad = grads.take(xn).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((confs, grad))
}

fn batch_confidences(spec: &NetworkSpec, params: &ParamStore, x: &Tensor) -> Result<Vec<f32>> {
    let logits = forward(spec, params, x)?;
    Ok((0..x.batch()).map(|b| confidence(logits.row(b))).collect())
}

fn starting_points(x: &Tensor, config: &AttackConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let eps = config.epsilon;
    let radius = match config.init {
        InitScheme::Contrast => return Ok(contrast_init(x, eps)),
        InitScheme::NearPoint(r) => r,
        InitScheme::UniformBall => eps,
    };
    let mut start = x.clone();
    if radius > 0.0 {
        for v in start.data_mut() {
            *v += rng.random_range(-radius..=radius);
        }
    }
    project(&start, x, eps)
}

/// One monotone PGD run per sample from the given starting points.
fn run_from(
    spec: &NetworkSpec,
    params: &ParamStore,
    x: &Tensor,
    start: Tensor,
    config: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    let n = x.batch();
    let d = x.item_len();
    let item_shape = x.shape()[1..].to_vec();
    let eps = config.epsilon;
    let (lo, hi) = clipped_box(x, eps);

    let clean = batch_confidences(spec, params, x)?;
    let mut best: Vec<AttackResult> = (0..n)
        .map(|b| AttackResult {
            best_point: Tensor::from_parts(item_shape.clone(), x.row(b).to_vec()),
            best_confidence: clean[b],
            trajectory_max_seen: clean[b],
        })
        .collect();

    let mut cur = start;
    let (mut cur_conf, mut grad) = conf_and_grad(spec, params, &cur)?;
    let record = |best: &mut [AttackResult], point: &Tensor, confs: &[f32]| {
        for b in 0..n {
            let r = &mut best[b];
            if confs[b] > r.best_confidence {
                r.best_confidence = confs[b];
                r.best_point = Tensor::from_parts(item_shape.clone(), point.row(b).to_vec());
            }
            r.trajectory_max_seen = r.trajectory_max_seen.max(confs[b]);
        }
    };
    record(&mut best, &cur, &cur_conf);
    if eps == 0.0 {
        return Ok(best);
    }

    let mut step = vec![config.initial_step; n];
    let mut momentum = vec![0.0f32; n * d];
    let mut direction = vec![0.0f32; n * d];
    for _ in 0..config.steps {
        // Candidate momentum from the gradient at the current point.
        for b in 0..n {
            let g = &grad.data()[b * d..(b + 1) * d];
            let norm: f32 = g.iter().map(|v| v.abs()).sum();
            let dst = &mut direction[b * d..(b + 1) * d];
            if !norm.is_finite() {
                // Skipped: the unchanged proposal is rejected, halving the step.
                dst.fill(0.0);
                continue;
            }
            let m = &momentum[b * d..(b + 1) * d];
            for j in 0..d {
                let gj = if norm > 0.0 { g[j] / norm } else { 0.0 };
                dst[j] = config.momentum * m[j] + gj;
            }
        }
        let mut proposal = cur.clone();
        for b in 0..n {
            for j in b * d..(b + 1) * d {
                let s = direction[j];
                let sign = if s > 0.0 {
                    1.0
                } else if s < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let v = proposal.data()[j] + step[b] * sign;
                proposal.data_mut()[j] = v.clamp(lo.data()[j], hi.data()[j]);
            }
        }
        let (conf, g_new) = conf_and_grad(spec, params, &proposal)?;
        record(&mut best, &proposal, &conf);
        for b in 0..n {
            let range = b * d..(b + 1) * d;
            if conf[b] > cur_conf[b] {
                cur.data_mut()[range.clone()].copy_from_slice(&proposal.data()[range.clone()]);
                grad.data_mut()[range.clone()].copy_from_slice(&g_new.data()[range.clone()]);
                momentum[range.clone()].copy_from_slice(&direction[range]);
                cur_conf[b] = conf[b];
                step[b] *= 1.1;
            } else {
                step[b] *= 0.5;
            }
        }
    }
    Ok(best)
}

/// Monotone PGD with `config.restarts` restarts; returns the best point per
/// sample of the `[B, C, H, W]` batch `x` (values in `[0, 1]`).
pub fn monotone_pgd(
    spec: &NetworkSpec,
    params: &ParamStore,
    x: &Tensor,
    config: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    config.validate()?;
    spec.check_batch(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut runs = Vec::with_capacity(config.restarts);
    for _ in 0..config.restarts {
        let start = starting_points(x, config, &mut rng)?;
        runs.push(run_from(spec, params, x, start, config)?);
        if config.epsilon == 0.0 {
            break;
        }
    }
    Ok(merge(runs))
}

/// Runs one attack from each batch of transferred points (one point per
/// sample, e.g. best points of other models). Seeds are projected into
/// each sample's box first. Without seeds this is [`monotone_pgd`].
pub fn transfer_attack(
    spec: &NetworkSpec,
    params: &ParamStore,
    x: &Tensor,
    seed_batches: &[Tensor],
    config: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    if seed_batches.is_empty() {
        return monotone_pgd(spec, params, x, config);
    }
    config.validate()?;
    spec.check_batch(x)?;
    let mut runs = Vec::with_capacity(seed_batches.len());
    for seeds in seed_batches {
        if seeds.shape() != x.shape() {
            return Err(Error::dim("transfer seeds", seeds.shape(), x.shape()));
        }
        runs.push(run_from(
            spec,
            params,
            x,
            project(seeds, x, config.epsilon)?,
            config,
        )?);
    }
    Ok(merge(runs))
}

/// Keeps the highest-confidence result per sample across runs.
pub fn merge(runs: Vec<Vec<AttackResult>>) -> Vec<AttackResult> {
    let mut iter = runs.into_iter();
    let mut best = iter.next().unwrap_or_default();
    for run in iter {
        for (b, r) in best.iter_mut().zip(run) {
            let seen = b.trajectory_max_seen.max(r.trajectory_max_seen);
            if r.best_confidence > b.best_confidence {
                *b = r;
            }
            b.trajectory_max_seen = seen;
        }
    }
    best
}

/// Per-sample maximum confidence across attack runs.
pub fn worst_case_aggregate(results: &[Vec<AttackResult>]) -> Vec<f32> {
    let n = results.iter().map(Vec::len).max().unwrap_or(0);
    (0..n)
        .map(|i| {
            results
                .iter()
                .filter_map(|run| run.get(i))
                .map(|r| r.best_confidence)
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect()
}

/// Stacks best points back into a `[B, C, H, W]` batch.
pub fn best_points(results: &[AttackResult]) -> Result<Tensor> {
    let points: Vec<Tensor> = results.iter().map(|r| r.best_point.clone()).collect();
    Tensor::stack(&points)
}

/// ACET training attack: `steps` sign-gradient ascent steps of size
/// `2ε/(steps + 1)` on the OE loss from `x`, projected into the clipped
/// ε-box, returning the highest-confidence iterate per sample.
pub fn acet_training_attack(
    spec: &NetworkSpec,
    params: &ParamStore,
    x: &Tensor,
    epsilon: f32,
    steps: usize,
) -> Result<Tensor> {
    spec.check_batch(x)?;
    let n = x.batch();
    let d = x.item_len();
    let alpha = 2.0 * epsilon / (steps as f32 + 1.0);
    let mut best = x.clone();
    let mut cur = x.clone();
    let mut best_conf = vec![f32::NEG_INFINITY; n];
    for it in 0..=steps {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params, false);
        let xn = g.param(cur.clone());
        let logits = forward_graph(&mut g, spec, &bound, xn)?;
        for b in 0..n {
            let c = confidence(g.value(logits).row(b));
            if c > best_conf[b] {
                best_conf[b] = c;
                best.data_mut()[b * d..(b + 1) * d].copy_from_slice(cur.row(b));
            }
        }
        if it == steps {
            break;
        }
        let loss = oe_loss(&mut g, logits)?;
        let grad = g
            .backward(loss)?
            .take(xn)
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let stepped = cur.zip_map(&grad, |v, gv| {
            let s = if gv > 0.0 {
                1.0
            } else if gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            v + alpha * s
        })?;
        cur = project(&stepped, x, epsilon)?;
    }
    Ok(best)
}
