//! Online threshold learning.
//!
//! The hard accept rule `phi > tau` is relaxed to an accept probability
//! `pi_k = sigmoid(gamma * (phi_k - tau_k))` with `tau_k = sigmoid(theta_k)`.
//! Stopping at stage `k` then has probability `p_k = pi_k * prod_{i<k} (1 - pi_i)`
//! and the human stage takes the remaining mass. The loss
//!
//! ```text
//! L(theta) = (1 - mean_r sum_k p_k corr_k) + lambda * mean_r sum_k p_k cost_k
//! ```
//!
//! is minimized with Adam on minibatches drawn from a FIFO replay buffer of
//! feedback records. The human stage counts as always correct.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CascadeConfig, CostMode};
use crate::engine::Thresholds;
use crate::math::{derive_seed, sigmoid};

/// Counterfactual signals of one model stage for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageFeedback {
    pub phi: f64,
    pub correct: bool,
    pub cost: f64,
}

/// One entry per model stage, in stage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub query_id: String,
    pub stages: Vec<StageFeedback>,
}

/// Bounded FIFO of feedback records; the oldest record is evicted first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    records: VecDeque<FeedbackRecord>,
    appended: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        ReplayBuffer {
            capacity,
            records: VecDeque::with_capacity(capacity.min(4096)),
            appended: 0,
        }
    }

    pub fn push(&mut self, record: FeedbackRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        self.appended += 1;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Records ever appended, including evicted ones.
    pub fn total_appended(&self) -> u64 {
        self.appended
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = &FeedbackRecord> {
        self.records.iter()
    }

    /// `size` distinct records chosen uniformly, returned in buffer order.
    pub fn sample(&self, size: usize, rng: &mut ChaCha8Rng) -> Vec<FeedbackRecord> {
        let mut idx =
            rand::seq::index::sample(rng, self.records.len(), size.min(self.records.len()))
                .into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| self.records[i].clone()).collect()
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub gamma: f64,
    pub lambda: f64,
    pub c_expert: f64,
    pub cost_mode: CostMode,
}

impl LossParams {
    pub fn from_config(config: &CascadeConfig) -> Self {
        LossParams {
            gamma: config.gamma,
            lambda: config.lambda,
            c_expert: config.c_expert,
            cost_mode: config.cost_mode,
        }
    }
}

pub fn soft_accept_prob(phi: f64, tau: f64, gamma: f64) -> f64 {
    sigmoid(gamma * (phi - tau))
}

/// Stop probabilities for `K - 1` accept probabilities: `K` entries, the last
/// one for the human stage.
pub fn stop_probabilities(pi: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(pi.len() + 1);
    let mut survive = 1.0;
    for &p in pi {
        out.push(p * survive);
        survive *= 1.0 - p;
    }
    out.push(survive);
    out
}

/// Cost charged for stopping at each of the `K` stages of one record.
fn charged_costs(record: &FeedbackRecord, params: &LossParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(record.stages.len() + 1);
    let mut running = 0.0;
    for s in &record.stages {
        running += s.cost;
        out.push(match params.cost_mode {
            CostMode::Cumulative => running,
            CostMode::Marginal => s.cost,
        });
    }
    out.push(match params.cost_mode {
        CostMode::Cumulative => running + params.c_expert,
        CostMode::Marginal => params.c_expert,
    });
    out
}

/// Per-stage value `-corr_k + lambda * cost_k`; the loss is `1 + mean(sum_k p_k * value_k)`.
fn stage_values(record: &FeedbackRecord, params: &LossParams) -> Vec<f64> {
    let costs = charged_costs(record, params);
    let corr = record
        .stages
        .iter()
        .map(|s| if s.correct { 1.0 } else { 0.0 })
        .chain(std::iter::once(1.0));
    corr.zip(costs)
        .map(|(c, cost)| -c + params.lambda * cost)
        .collect()
}

fn accept_probs(record: &FeedbackRecord, thetas: &[f64], gamma: f64) -> Vec<f64> {
    record
        .stages
        .iter()
        .zip(thetas)
        .map(|(s, &theta)| soft_accept_prob(s.phi, sigmoid(theta), gamma))
        .collect()
}

/// Expected accuracy and expected cost of one record under soft gating.
pub fn record_terms(record: &FeedbackRecord, thetas: &[f64], params: &LossParams) -> (f64, f64) {
    let p = stop_probabilities(&accept_probs(record, thetas, params.gamma));
    let costs = charged_costs(record, params);
    let corr = record
        .stages
        .iter()
        .map(|s| if s.correct { 1.0 } else { 0.0 })
        .chain(std::iter::once(1.0));
    let acc: f64 = p.iter().zip(corr).map(|(p, c)| p * c).sum();
    let cost: f64 = p.iter().zip(&costs).map(|(p, c)| p * c).sum();
    (acc, cost)
}

pub fn cascade_loss(batch: &[FeedbackRecord], thetas: &[f64], params: &LossParams) -> f64 {
    assert!(!batch.is_empty(), "loss needs a nonempty batch");
    let n = batch.len() as f64;
    let (acc, cost) = batch.iter().fold((0.0, 0.0), |(a, c), r| {
        let (ra, rc) = record_terms(r, thetas, params);
        (a + ra, c + rc)
    });
    (1.0 - acc / n) + params.lambda * (cost / n)
}

/// Analytic `dL/dtheta_k` for every model stage.
///
/// With `v_k = -corr_k + lambda * cost_k` and the continuation value
/// `W_k = pi_k v_k + (1 - pi_k) W_{k+1}` (`W_K = v_K`), one record contributes
/// `S_k (v_k - W_{k+1}) * dpi_k/dtheta_k`, where `S_k` is the probability of
/// reaching stage `k` and `dpi_k/dtheta_k = -gamma pi_k (1 - pi_k) tau_k (1 - tau_k)`.
pub fn loss_gradient(batch: &[FeedbackRecord], thetas: &[f64], params: &LossParams) -> Vec<f64> {
    assert!(!batch.is_empty(), "gradient needs a nonempty batch");
    let k = thetas.len();
    let taus: Vec<f64> = thetas.iter().map(|t| sigmoid(*t)).collect();
    let mut grad = vec![0.0; k];
    let mut cont = vec![0.0; k + 1];
    for record in batch {
        let pi = accept_probs(record, thetas, params.gamma);
        let v = stage_values(record, params);
        cont[k] = v[k];
        for i in (0..k).rev() {
            cont[i] = pi[i] * v[i] + (1.0 - pi[i]) * cont[i + 1];
        }
        let mut survive = 1.0;
        for i in 0..k {
            let dpi = -params.gamma * pi[i] * (1.0 - pi[i]) * taus[i] * (1.0 - taus[i]);
            grad[i] += survive * (v[i] - cont[i + 1]) * dpi;
            survive *= 1.0 - pi[i];
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rate,
        }
    }
}

/// One bias-corrected Adam step on `params`. Returns `false` (and changes
/// nothing) when any gradient entry is non-finite.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> bool {
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (&g, p)) in grads.iter().zip(params.iter_mut()).enumerate() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        *p -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    true
}

/// One point of the threshold trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateOutcome {
    pub step: u64,
    pub taus: Vec<f64>,
    /// Minibatch loss before the step.
    pub loss: f64,
}

/// Persistent optimizer state (everything but the buffer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub thresholds: Thresholds,
    pub adam: AdamState,
    pub steps: u64,
    pub skipped: u64,
}

/// Replay buffer, Adam state and the current threshold snapshot.
///
/// Minibatch draws depend only on `(seed, step)`, so an optimizer restored from
/// its [`OptimizerState`] and buffer continues exactly where it left off.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOptimizer {
    pub params: LossParams,
    pub batch_size: usize,
    pub seed: u64,
    pub buffer: ReplayBuffer,
    state: OptimizerState,
}

impl OnlineOptimizer {
    pub fn new(config: &CascadeConfig) -> Self {
        let thresholds = Thresholds::from_config(config);
        OnlineOptimizer {
            params: LossParams::from_config(config),
            batch_size: config.batch_size,
            seed: config.seed,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            state: OptimizerState {
                adam: AdamState::new(thresholds.len(), config.learning_rate),
                thresholds,
                steps: 0,
                skipped: 0,
            },
        }
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.state.thresholds
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn restore(&mut self, state: OptimizerState) {
        self.state = state;
    }

    pub fn steps(&self) -> u64 {
        self.state.steps
    }

    /// Steps skipped because of a non-finite gradient.
    pub fn skipped(&self) -> u64 {
        self.state.skipped
    }

    pub fn push(&mut self, record: FeedbackRecord) {
        self.buffer.push(record);
    }

    /// Samples a minibatch, takes one Adam step and publishes new thresholds.
    /// No-op (returns `None`) while the buffer holds fewer than `batch_size` records.
    pub fn online_update(&mut self) -> Option<UpdateOutcome> {
        if self.buffer.len() < self.batch_size {
            return None;
        }
        let step = self.state.steps + self.state.skipped;
        let mut rng =
            ChaCha8Rng::from_seed(derive_seed(self.seed, &[b"minibatch", &step.to_le_bytes()]));
        let batch = self.buffer.sample(self.batch_size, &mut rng);
        let mut thetas = self.state.thresholds.thetas();
        let loss = cascade_loss(&batch, &thetas, &self.params);
        let grads = loss_gradient(&batch, &thetas, &self.params);
        if !adam_step(&mut self.state.adam, &mut thetas, &grads) {
            self.state.skipped += 1;
            tracing::warn!(step, "non-finite threshold gradient; update skipped");
            return None;
        }
        self.state.thresholds = self.state.thresholds.with_thetas(&thetas);
        self.state.steps += 1;
        Some(UpdateOutcome {
            step: self.state.steps,
            taus: self.state.thresholds.taus(),
            loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;
    use rand::Rng;

    fn params(lambda: f64) -> LossParams {
        LossParams {
            gamma: 5.0,
            lambda,
            c_expert: 10.0,
            cost_mode: CostMode::Cumulative,
        }
    }

    fn record(stages: &[(f64, bool, f64)]) -> FeedbackRecord {
        FeedbackRecord {
            query_id: "q".into(),
            stages: stages
                .iter()
                .map(|&(phi, correct, cost)| StageFeedback { phi, correct, cost })
                .collect(),
        }
    }

    fn random_record(rng: &mut ChaCha8Rng, k: usize) -> FeedbackRecord {
        FeedbackRecord {
            query_id: "r".into(),
            stages: (0..k)
                .map(|_| StageFeedback {
                    phi: rng.random(),
                    correct: rng.random_bool(0.5),
                    cost: rng.random_range(0.0..2000.0),
                })
                .collect(),
        }
    }

    #[test]
    fn soft_accept_examples() {
        assert_eq!(soft_accept_prob(0.6, 0.6, 5.0), 0.5);
        assert!((soft_accept_prob(0.8, 0.6, 5.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((soft_accept_prob(0.0, 1.0, 5.0) - 0.006_692_850_924_284_856).abs() < 1e-12);
    }

    #[test]
    fn stop_probability_examples() {
        let p = stop_probabilities(&[0.9, 0.5, 0.8, 0.2]);
        let expected = [0.9, 0.05, 0.04, 0.002, 0.008];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{p:?}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(stop_probabilities(&[0.5, 0.5]), vec![0.5, 0.25, 0.25]);
        let near = stop_probabilities(&[1.0 - 1e-12, 0.3, 0.3]);
        assert!(near[0] > 1.0 - 1e-11);
        assert!(near[1..].iter().all(|p| *p < 1e-11));
    }

    #[test]
    fn loss_with_certain_first_stage() {
        // gamma = 100 realizes pi_1 -> 1 with phi_1 = 1 and tau_1 -> 0
        let p = LossParams {
            gamma: 100.0,
            ..params(1e-7)
        };
        let r = record(&[
            (1.0, true, 100.0),
            (0.0, false, 5.0),
            (0.0, false, 5.0),
            (0.0, false, 5.0),
        ]);
        let thetas = [logit(1e-9), 0.0, 0.0, 0.0];
        let l = cascade_loss(&[r], &thetas, &p);
        assert!((l - 1e-5).abs() < 1e-9, "{l}");
    }

    #[test]
    fn all_wrong_leaves_only_expert_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = record(&[
            (0.7, false, 1.0),
            (0.2, false, 1.0),
            (0.9, false, 1.0),
            (0.4, false, 1.0),
        ]);
        for _ in 0..20 {
            let thetas: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pi = accept_probs(&r, &thetas, 5.0);
            let p_human = *stop_probabilities(&pi).last().unwrap();
            let l = cascade_loss(std::slice::from_ref(&r), &thetas, &params(0.0));
            assert!((l - (1.0 - p_human)).abs() < 1e-14);
        }
    }

    #[test]
    fn more_correct_stages_never_raise_loss_without_cost() {
        let base = record(&[
            (0.7, false, 1.0),
            (0.2, false, 1.0),
            (0.9, true, 1.0),
            (0.4, false, 1.0),
        ]);
        let thetas = [0.1, -0.4, 0.3, 0.0];
        let l0 = cascade_loss(std::slice::from_ref(&base), &thetas, &params(0.0));
        for i in 0..4 {
            let mut better = base.clone();
            better.stages[i].correct = true;
            assert!(cascade_loss(&[better], &thetas, &params(0.0)) <= l0);
        }
    }

    fn finite_difference(batch: &[FeedbackRecord], thetas: &[f64], p: &LossParams) -> Vec<f64> {
        let h = 1e-5;
        (0..thetas.len())
            .map(|i| {
                let mut up = thetas.to_vec();
                let mut down = thetas.to_vec();
                up[i] += h;
                down[i] -= h;
                (cascade_loss(batch, &up, p) - cascade_loss(batch, &down, p)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_vanishes_when_every_stage_is_correct() {
        let batch = vec![
            record(&[
                (0.3, true, 1.0),
                (0.8, true, 1.0),
                (0.5, true, 1.0),
                (0.1, true, 1.0),
            ]),
            record(&[
                (0.9, true, 1.0),
                (0.2, true, 1.0),
                (0.6, true, 1.0),
                (0.7, true, 1.0),
            ]),
        ];
        let g = loss_gradient(&batch, &[0.4, -1.0, 2.0, 0.0], &params(0.0));
        assert!(g.iter().all(|x| *x == 0.0), "{g:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for lambda in [0.0, 1e-7, 1e-3] {
            for _ in 0..30 {
                let k = rng.random_range(1..6);
                let batch: Vec<_> = (0..rng.random_range(1..12))
                    .map(|_| random_record(&mut rng, k))
                    .collect();
                let thetas: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
                let p = params(lambda);
                let a = loss_gradient(&batch, &thetas, &p);
                let f = finite_difference(&batch, &thetas, &p);
                for (x, y) in a.iter().zip(&f) {
                    let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
                    assert!(rel < 1e-4, "analytic {x} vs fd {y}");
                }
            }
        }
    }

    #[test]
    fn correct_first_stage_gradient_sign() {
        let r = record(&[
            (0.7, true, 1.0),
            (0.5, false, 1.0),
            (0.5, false, 1.0),
            (0.5, false, 1.0),
        ]);
        let thetas = [logit(0.6); 4];
        let a = loss_gradient(std::slice::from_ref(&r), &thetas, &params(0.0));
        let f = finite_difference(std::slice::from_ref(&r), &thetas, &params(0.0));
        assert_eq!(a[0].signum(), f[0].signum());
        // raising theta_1 lowers p_1, the only correct model stage, so the loss grows
        assert!(a[0] > 0.0);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut s = AdamState::new(2, 0.05);
        let mut theta = [0.3, -1.0];
        assert!(adam_step(&mut s, &mut theta, &[0.0, 0.0]));
        assert_eq!(theta, [0.3, -1.0]);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut s = AdamState::new(3, 0.05);
        let mut theta = [0.0, 1.0, 2.0];
        let g = [0.2, -3.0, 1e-3];
        adam_step(&mut s, &mut theta, &g);
        for ((t, start), gi) in theta.iter().zip([0.0, 1.0, 2.0]).zip(g) {
            let expected = start - 0.05 * gi / (gi.abs() + 1e-8);
            assert!((t - expected).abs() < 1e-15);
            assert!((t - (start - 0.05 * gi.signum())).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_is_deterministic_and_skips_non_finite() {
        let mut a = AdamState::new(2, 0.05);
        let mut b = a.clone();
        let (mut ta, mut tb) = ([0.1, 0.2], [0.1, 0.2]);
        adam_step(&mut a, &mut ta, &[0.5, -0.5]);
        adam_step(&mut b, &mut tb, &[0.5, -0.5]);
        assert_eq!((ta, &a), (tb, &b));
        let before = (ta, a.clone());
        assert!(!adam_step(&mut a, &mut ta, &[f64::NAN, 0.0]));
        assert_eq!((ta, a), before);
    }

    #[test]
    fn buffer_is_fifo_and_bounded() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(FeedbackRecord {
                query_id: format!("q{i}"),
                stages: vec![],
            });
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.total_appended(), 5);
        let ids: Vec<_> = b.records().map(|r| r.query_id.as_str()).collect();
        assert_eq!(ids, ["q2", "q3", "q4"]);
    }

    #[test]
    fn minibatch_has_no_repeats() {
        let mut b = ReplayBuffer::new(50);
        for i in 0..50 {
            b.push(FeedbackRecord {
                query_id: format!("q{i}"),
                stages: vec![],
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = b.sample(10, &mut rng);
        let mut ids: Vec<_> = batch.iter().map(|r| r.query_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    fn optimizer(lambda: f64) -> OnlineOptimizer {
        OnlineOptimizer::new(&CascadeConfig {
            lambda,
            seed: 5,
            ..CascadeConfig::default()
        })
    }

    #[test]
    fn update_is_noop_below_batch_size() {
        let mut opt = optimizer(1e-7);
        for _ in 0..9 {
            opt.push(record(&[(0.5, true, 1.0); 4]));
        }
        let before = opt.thresholds().clone();
        assert!(opt.online_update().is_none());
        assert_eq!(opt.thresholds(), &before);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn reliable_first_stage_lowers_its_threshold() {
        let mut opt = optimizer(1e-7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..200 {
            let correct = i % 20 != 0; // 95% correct
            let phi = if correct {
                rng.random_range(0.6..1.0)
            } else {
                rng.random_range(0.0..0.5)
            };
            opt.push(record(&[
                (phi, correct, 450.0),
                (0.5, false, 1800.0),
                (0.5, false, 450.0),
                (0.5, false, 1800.0),
            ]));
        }
        for _ in 0..200 {
            opt.online_update().unwrap();
        }
        assert!(
            opt.thresholds().taus()[0] < 0.6,
            "{:?}",
            opt.thresholds().taus()
        );
    }

    #[test]
    fn cost_dominant_loss_favors_early_stopping_and_decreases() {
        let mut opt = optimizer(1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let stages: Vec<_> = (0..4)
                .map(|k| {
                    (
                        rng.random::<f64>(),
                        rng.random_bool(0.8),
                        if k == 3 { 5000.0 } else { 10.0 },
                    )
                })
                .collect();
            opt.push(record(&stages));
        }
        let all: Vec<_> = opt.buffer.records().cloned().collect();
        let mut prev = cascade_loss(&all, &opt.thresholds().thetas(), &opt.params);
        for _ in 0..60 {
            opt.online_update().unwrap();
            let l = cascade_loss(&all, &opt.thresholds().thetas(), &opt.params);
            assert!(l < prev, "loss rose from {prev} to {l}");
            prev = l;
        }
        let taus = opt.thresholds().taus();
        assert!(taus[..3].iter().all(|t| *t < 0.6), "{taus:?}");
    }

    #[test]
    fn mass_moves_to_the_only_correct_stage() {
        for good in 0..4 {
            let mut opt = optimizer(0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(good as u64);
            for _ in 0..100 {
                let stages: Vec<_> = (0..4)
                    .map(|k| (rng.random::<f64>(), k == good, 100.0))
                    .collect();
                opt.push(record(&stages));
            }
            let n = opt.buffer.len() as f64;
            let mean_phi: Vec<f64> = (0..4)
                .map(|k| opt.buffer.records().map(|r| r.stages[k].phi).sum::<f64>() / n)
                .collect();
            let p_good = |opt: &OnlineOptimizer| {
                let pi: Vec<f64> = mean_phi
                    .iter()
                    .zip(opt.thresholds().taus())
                    .map(|(phi, tau)| soft_accept_prob(*phi, tau, 5.0))
                    .collect();
                stop_probabilities(&pi)[good]
            };
            let mut prev = p_good(&opt);
            for _ in 0..50 {
                opt.online_update().unwrap();
                let now = p_good(&opt);
                assert!(now > prev, "stage {good}: {prev} -> {now}");
                prev = now;
            }
        }
    }

    #[test]
    fn restored_optimizer_continues_identically() {
        let mut a = optimizer(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            a.push(random_record(&mut rng, 4));
        }
        for _ in 0..5 {
            a.online_update();
        }
        let mut b = optimizer(1e-3);
        b.buffer = a.buffer.clone();
        b.restore(a.state().clone());
        for _ in 0..5 {
            assert_eq!(a.online_update(), b.online_update());
        }
    }

    proptest::proptest! {
        #[test]
        fn loss_invariant_to_permutation_and_duplication(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch: Vec<_> = (0..7).map(|_| random_record(&mut rng, 4)).collect();
            let thetas: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = params(1e-4);
            let l = cascade_loss(&batch, &thetas, &p);
            let mut rev = batch.clone();
            rev.reverse();
            proptest::prop_assert!((cascade_loss(&rev, &thetas, &p) - l).abs() < 1e-12);
            let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
            proptest::prop_assert!((cascade_loss(&doubled, &thetas, &p) - l).abs() < 1e-12);
        }
    }
}
