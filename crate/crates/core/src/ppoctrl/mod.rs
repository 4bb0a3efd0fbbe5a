//! Dynamic temperature controller: telemetry featurization, Gaussian policy
//! over the temperature action, reward shaping, GAE, clipped-surrogate
//! updates, and the outer dynamic-distillation loop.

use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{
    cache_teacher_logits, distill_epoch, evaluate, DistillConfig, DistillError, DistillTrace,
    EpochRecord,
};
use crate::featurizer::Spectrogram;
use crate::models::{Student, Teacher};
use crate::numcore::{Adam, BoundParams, NodeId, NumError, ParamId, ParamSet, Tape, Tensor};

const HALF_LN_2PI: f64 = 0.9189385332046727;
const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CtrlError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("empty telemetry history")]
    EmptyHistory,
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// s_t = (mean, std, slope of accuracy; mean, std, slope of KL; progress).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub acc_mean: f64,
    pub acc_std: f64,
    pub acc_slope: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub kl_slope: f64,
    pub progress: f64,
}

impl ControllerState {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, 7],
            vec![
                self.acc_mean,
                self.acc_std,
                self.acc_slope,
                self.kl_mean,
                self.kl_std,
                self.kl_slope,
                self.progress,
            ],
        )
        .expect("state shape")
    }

    /// Net input with KL statistics log-squashed and slopes tanh-squashed.
    /// Raw KL telemetry spans orders of magnitude early in training and
    /// saturates the tanh hidden layer, collapsing the policy onto the
    /// action bounds; accuracy stats and progress are already in [0, 1].
    pub fn to_net_input(&self) -> Tensor {
        Tensor::new(
            vec![1, 7],
            vec![
                self.acc_mean,
                self.acc_std,
                self.acc_slope.tanh(),
                self.kl_mean.ln_1p(),
                self.kl_std.ln_1p(),
                self.kl_slope.tanh(),
                self.progress,
            ],
        )
        .expect("state shape")
    }

    pub fn all_finite(&self) -> bool {
        self.to_tensor().all_finite()
    }
}

fn window_stats(history: &[f64], k: usize) -> (f64, f64, f64) {
    let w = k.min(history.len());
    let tail = &history[history.len() - w..];
    let n = w as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    // least-squares slope over x = 0..w-1
    let slope = if w < 2 {
        0.0
    } else {
        let x_mean = (n - 1.0) / 2.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &v) in tail.iter().enumerate() {
            let dx = i as f64 - x_mean;
            num += dx * (v - mean);
            den += dx * dx;
        }
        num / den
    };
    (mean, var.sqrt(), slope)
}

/// Moving mean/std/linear-rate of the last `k` accuracy and KL entries plus
/// training progress.
pub fn state_features(
    acc_history: &[f64],
    kl_history: &[f64],
    epoch: usize,
    total_epochs: usize,
    k: usize,
) -> Result<ControllerState, CtrlError> {
    if acc_history.is_empty() || kl_history.is_empty() {
        return Err(CtrlError::EmptyHistory);
    }
    let (acc_mean, acc_std, acc_slope) = window_stats(acc_history, k);
    let (kl_mean, kl_std, kl_slope) = window_stats(kl_history, k);
    let progress = if total_epochs == 0 {
        0.0
    } else {
        epoch as f64 / total_epochs as f64
    };
    Ok(ControllerState {
        acc_mean,
        acc_std,
        acc_slope,
        kl_mean,
        kl_std,
        kl_slope,
        progress,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    /// Telemetry window k.
    pub window: usize,
    pub gamma: f64,
    pub lambda_gae: f64,
    /// PPO clip parameter.
    pub kappa: f64,
    /// Entropy coefficient.
    pub omega: f64,
    /// Controller learning rate.
    pub nu: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub rho: f64,
    pub xi_base: f64,
    pub k_target: f64,
    pub a_base: f64,
    pub reward_clip: (f64, f64),
    pub sigma_clip: (f64, f64),
    pub horizon: usize,
    pub minor_epochs: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            tau_min: 1.0,
            tau_max: 10.0,
            window: 5,
            gamma: 0.9,
            lambda_gae: 1.0,
            kappa: 0.2,
            omega: 0.01,
            nu: 3e-3,
            w1: 1.0,
            w2: -0.5,
            w3: -0.1,
            rho: 1.0,
            xi_base: 0.8,
            k_target: 0.1,
            a_base: 0.9,
            reward_clip: (-1.0, 1.0),
            sigma_clip: (0.01, 0.1),
            horizon: 8,
            minor_epochs: 4,
            hidden: 16,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), CtrlError> {
        if !(self.tau_min > 0.0 && self.tau_min < self.tau_max) {
            return Err(CtrlError::BadConfig(format!(
                "need 0 < tau_min < tau_max, got [{}, {}]",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CtrlError::BadConfig(format!("gamma {} not in (0,1]", self.gamma)));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(CtrlError::BadConfig(format!("kappa {} not in (0,1)", self.kappa)));
        }
        if self.horizon == 0 || self.minor_epochs == 0 || self.window == 0 {
            return Err(CtrlError::BadConfig(
                "horizon, minor_epochs, window must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

struct ActorIds {
    w1: ParamId,
    b1: ParamId,
    w_mu: ParamId,
    b_mu: ParamId,
    w_sig: ParamId,
    b_sig: ParamId,
}

struct CriticIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Actor (7 -> mu, log sigma) and critic (7 -> value) dense nets. When
/// `sigma_clamp` is set the policy's sigma is clamped at sampling and update
/// time alike, so recorded log-probs stay consistent.
pub struct PolicyNets {
    pub actor: ParamSet,
    pub critic: ParamSet,
    actor_ids: ActorIds,
    critic_ids: CriticIds,
    pub sigma_clamp: Option<(f64, f64)>,
}

impl PolicyNets {
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut actor = ParamSet::new();
        let actor_ids = ActorIds {
            w1: actor.register("actor.w1", Tensor::glorot_uniform(&[7, hidden], 7, hidden, rng)),
            b1: actor.register("actor.b1", Tensor::zeros(&[1, hidden])),
            // Small-gain head init (standard PPO practice): the initial
            // policy is nearly state-independent around b_mu, so raw
            // telemetry swings cannot whipsaw the action before the first
            // policy updates shape the heads.
            w_mu: actor.register(
                "actor.w_mu",
                Tensor::glorot_uniform(&[hidden, 1], hidden, 1, rng).scaled(0.01),
            ),
            b_mu: actor.register("actor.b_mu", Tensor::full(&[1, 1], 0.5)),
            w_sig: actor.register(
                "actor.w_sig",
                Tensor::glorot_uniform(&[hidden, 1], hidden, 1, rng).scaled(0.01),
            ),
            // start near sigma = 0.3 for meaningful early exploration;
            // the sigma clamp takes over once accuracy crosses a_base
            b_sig: actor.register("actor.b_sig", Tensor::full(&[1, 1], (0.3_f64).ln())),
        };
        let mut critic = ParamSet::new();
        let critic_ids = CriticIds {
            w1: critic.register("critic.w1", Tensor::glorot_uniform(&[7, hidden], 7, hidden, rng)),
            b1: critic.register("critic.b1", Tensor::zeros(&[1, hidden])),
            w2: critic.register(
                "critic.w2",
                Tensor::glorot_uniform(&[hidden, 1], hidden, 1, rng),
            ),
            b2: critic.register("critic.b2", Tensor::zeros(&[1, 1])),
        };
        PolicyNets {
            actor,
            critic,
            actor_ids,
            critic_ids,
            sigma_clamp: None,
        }
    }

    /// (mu, sigma) nodes for one state; sigma is exp-parameterized with a
    /// positivity floor, then clamped if the clamp is latched.
    pub fn actor_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        state: &ControllerState,
    ) -> Result<(NodeId, NodeId), NumError> {
        let s = tape.constant(state.to_net_input());
        let h = tape.matmul(s, bound.node(self.actor_ids.w1))?;
        let h = tape.add(h, bound.node(self.actor_ids.b1))?;
        let h = tape.tanh(h);
        let mu = tape.matmul(h, bound.node(self.actor_ids.w_mu))?;
        let mu = tape.add(mu, bound.node(self.actor_ids.b_mu))?;
        let log_sig = tape.matmul(h, bound.node(self.actor_ids.w_sig))?;
        let log_sig = tape.add(log_sig, bound.node(self.actor_ids.b_sig))?;
        let log_sig = tape.clamp(log_sig, SIGMA_FLOOR.ln(), 10.0_f64.ln());
        let mut sigma = tape.exp(log_sig);
        if let Some((lo, hi)) = self.sigma_clamp {
            sigma = tape.clamp(sigma, lo, hi);
        }
        Ok((mu, sigma))
    }

    pub fn critic_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        state: &ControllerState,
    ) -> Result<NodeId, NumError> {
        let s = tape.constant(state.to_net_input());
        let h = tape.matmul(s, bound.node(self.critic_ids.w1))?;
        let h = tape.add(h, bound.node(self.critic_ids.b1))?;
        let h = tape.tanh(h);
        let v = tape.matmul(h, bound.node(self.critic_ids.w2))?;
        tape.add(v, bound.node(self.critic_ids.b2))
    }

    /// Plain (mu, sigma) values for one state.
    pub fn policy_params(&self, state: &ControllerState) -> (f64, f64) {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&self.actor, &mut tape);
        let (mu, sigma) = self.actor_forward(&mut tape, &bound, state).expect("actor");
        (tape.value(mu).data()[0], tape.value(sigma).data()[0])
    }

    pub fn value(&self, state: &ControllerState) -> f64 {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&self.critic, &mut tape);
        let v = self.critic_forward(&mut tape, &bound, state).expect("critic");
        tape.value(v).data()[0]
    }
}

/// log N(x; mu, sigma).
pub fn gaussian_log_prob(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - HALF_LN_2PI
}

#[derive(Clone, Copy, Debug)]
pub struct ActionSample {
    /// Clipped action in [0, 1].
    pub action: f64,
    /// The raw Gaussian draw whose log-prob is recorded.
    pub pre_clip: f64,
    pub log_prob: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// a_t = clip(mu + eps, 0, 1) with the pre-clip draw's log-prob recorded.
pub fn sample_action(
    nets: &PolicyNets,
    state: &ControllerState,
    rng: &mut ChaCha8Rng,
) -> ActionSample {
    let (mu, sigma) = nets.policy_params(state);
    let eps: f64 = StandardNormal.sample(rng);
    let pre_clip = mu + eps * sigma;
    ActionSample {
        action: pre_clip.clamp(0.0, 1.0),
        pre_clip,
        log_prob: gaussian_log_prob(pre_clip, mu, sigma),
        mu,
        sigma,
    }
}

/// tau_t = tau_min + a_t (tau_max - tau_min).
pub fn map_temperature(action: f64, tau_min: f64, tau_max: f64) -> f64 {
    tau_min + action * (tau_max - tau_min)
}

/// R_t = w1 (xi - xi_base) + w2 log[1 + 10 (k - k_target)^2]
///       + w3 |tau - tau_prev|^rho, clipped to the configured range.
pub fn reward(xi: f64, k: f64, tau: f64, tau_prev: f64, cfg: &ControllerConfig) -> f64 {
    let acc_term = cfg.w1 * (xi - cfg.xi_base);
    let d = k - cfg.k_target;
    let kl_term = cfg.w2 * (1.0 + 10.0 * d * d).ln();
    let churn_term = cfg.w3 * (tau - tau_prev).abs().powf(cfg.rho);
    (acc_term + kl_term + churn_term).clamp(cfg.reward_clip.0, cfg.reward_clip.1)
}

/// Backward-recursion GAE; lambda 1 gives plain discounted advantage sums.
pub fn gae(rewards: &[f64], values: &[f64], value_next: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len());
    let t = rewards.len();
    let mut adv = vec![0.0; t];
    let mut acc = 0.0;
    for i in (0..t).rev() {
        let v_next = if i + 1 < t { values[i + 1] } else { value_next };
        let delta = rewards[i] + gamma * v_next - values[i];
        acc = delta + gamma * lambda * acc;
        adv[i] = acc;
    }
    adv
}

/// min(r A, clip(r, 1-kappa, 1+kappa) A) with r the policy ratio.
pub fn clipped_objective(log_prob_new: f64, log_prob_old: f64, advantage: f64, kappa: f64) -> f64 {
    let r = (log_prob_new - log_prob_old).exp();
    let clipped = r.clamp(1.0 - kappa, 1.0 + kappa);
    (r * advantage).min(clipped * advantage)
}

/// Differential entropy of N(mu, sigma^2).
pub fn entropy_bonus(sigma: f64) -> f64 {
    sigma.ln() + HALF_LN_2PI + 0.5
}

#[derive(Clone, Debug)]
pub struct RolloutStep {
    pub state: ControllerState,
    pub pre_clip: f64,
    pub reward: f64,
    pub log_prob_old: f64,
    pub value_old: f64,
}

/// On-policy rollout storage; filled to the horizon, consumed whole by each
/// policy update, then cleared.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<RolloutStep>,
}

impl RolloutBuffer {
    pub fn push(&mut self, step: RolloutStep) {
        self.steps.push(step);
    }
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One PPO update over a full buffer (normalized advantages, clipped
/// surrogate plus entropy bonus for the actor, squared-error returns for the
/// critic, several minor epochs); the buffer is cleared afterwards.
pub fn policy_update(
    buffer: &mut RolloutBuffer,
    nets: &mut PolicyNets,
    actor_adam: &mut Adam,
    critic_adam: &mut Adam,
    value_next: f64,
    cfg: &ControllerConfig,
) -> Result<(), CtrlError> {
    let steps = std::mem::take(&mut buffer.steps);
    let t = steps.len();
    if t == 0 {
        return Ok(());
    }
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = steps.iter().map(|s| s.value_old).collect();
    let advantages = gae(&rewards, &values, value_next, cfg.gamma, cfg.lambda_gae);
    let returns: Vec<f64> = advantages.iter().zip(&values).map(|(a, v)| a + v).collect();

    let mean = advantages.iter().sum::<f64>() / t as f64;
    let var = advantages.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / t as f64;
    let std = var.sqrt();
    let norm_adv: Vec<f64> = if std > 0.0 {
        advantages.iter().map(|&a| (a - mean) / (std + 1e-8)).collect()
    } else {
        advantages.iter().map(|&a| a - mean).collect()
    };

    for _ in 0..cfg.minor_epochs {
        // actor
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&nets.actor, &mut tape);
        let mut objectives = Vec::with_capacity(t);
        for (step, &adv) in steps.iter().zip(&norm_adv) {
            let (mu, sigma) = nets.actor_forward(&mut tape, &bound, &step.state)?;
            let x = tape.constant(Tensor::full(&[1, 1], step.pre_clip));
            let diff = tape.sub(x, mu)?;
            let inv_sig = tape.log(sigma);
            // log prob = -1/2 ((x-mu)/sigma)^2 - ln sigma - 1/2 ln 2pi
            let z2 = tape.mul(diff, diff)?;
            let sig2 = tape.mul(sigma, sigma)?;
            let lsig2 = tape.log(sig2);
            let neg_lsig2 = tape.scale(lsig2, -1.0);
            let inv_sig2 = tape.exp(neg_lsig2);
            let z2s = tape.mul(z2, inv_sig2)?;
            let half_z2 = tape.scale(z2s, -0.5);
            let neg_lsig = tape.scale(inv_sig, -1.0);
            let lp = tape.add(half_z2, neg_lsig)?;
            let log_prob_new = tape.add_scalar(lp, -HALF_LN_2PI);

            let log_ratio = tape.add_scalar(log_prob_new, -step.log_prob_old);
            let ratio = tape.exp(log_ratio);
            let surr1 = tape.scale(ratio, adv);
            let clipped = tape.clamp(ratio, 1.0 - cfg.kappa, 1.0 + cfg.kappa);
            let surr2 = tape.scale(clipped, adv);
            let surr = tape.minimum(surr1, surr2)?;

            let log_sig = tape.log(sigma);
            let entropy = tape.add_scalar(log_sig, HALF_LN_2PI + 0.5);
            let ent_term = tape.scale(entropy, cfg.omega);
            objectives.push(tape.add(surr, ent_term)?);
        }
        let stacked = tape.stack_rows(&objectives)?;
        let total = tape.sum_all(stacked);
        let actor_loss = tape.scale(total, -1.0 / t as f64);
        let mut grads = tape.backward(actor_loss)?;
        let mut gt = bound.grads(&mut grads, &tape);
        actor_adam.step(&mut nets.actor, &mut gt);

        // critic
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&nets.critic, &mut tape);
        let mut errors = Vec::with_capacity(t);
        for (step, &ret) in steps.iter().zip(&returns) {
            let v = nets.critic_forward(&mut tape, &bound, &step.state)?;
            let e = tape.add_scalar(v, -ret);
            errors.push(tape.mul(e, e)?);
        }
        let stacked = tape.stack_rows(&errors)?;
        let total = tape.sum_all(stacked);
        let critic_loss = tape.scale(total, 1.0 / t as f64);
        let mut grads = tape.backward(critic_loss)?;
        let mut gt = bound.grads(&mut grads, &tape);
        critic_adam.step(&mut nets.critic, &mut gt);
    }
    Ok(())
}

/// Per-epoch controller telemetry for audit and plots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControllerRecord {
    pub epoch: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub acc_slope: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub kl_slope: f64,
    pub progress: f64,
    pub action: f64,
    pub tau: f64,
    pub reward: f64,
    pub sigma: f64,
    pub clamped: bool,
    pub held: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ControllerTrace {
    pub records: Vec<ControllerRecord>,
}

impl ControllerTrace {
    pub fn write_csv(&self, path: &Path) -> Result<(), CtrlError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CtrlError::BadConfig(e.to_string()))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| CtrlError::BadConfig(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct DynamicOutcome {
    pub trace: DistillTrace,
    pub controller: ControllerTrace,
}

/// The dynamic temperature loop: one controller step per training epoch.
/// The sigma clamp latches once validation accuracy first exceeds `a_base`;
/// non-finite telemetry holds the previous temperature for that epoch.
pub fn dynamic_distill(
    student: &mut Student,
    teacher: &Teacher,
    train: &[Spectrogram],
    val: &[Spectrogram],
    dcfg: &DistillConfig,
    ccfg: &ControllerConfig,
) -> Result<DynamicOutcome, CtrlError> {
    dcfg.validate()?;
    ccfg.validate()?;
    if train.is_empty() {
        return Err(CtrlError::BadConfig("empty train split".into()));
    }
    if val.is_empty() {
        return Err(CtrlError::BadConfig("empty val split".into()));
    }
    let cache = cache_teacher_logits(teacher, train)?;

    let mut ctrl_rng = ChaCha8Rng::seed_from_u64(ccfg.seed ^ 0xC0117_011);
    let mut nets = PolicyNets::new(ccfg.hidden, &mut ctrl_rng);
    let adam_cfg = crate::numcore::AdamConfig { lr: ccfg.nu, ..Default::default() };
    let mut actor_adam = Adam::new(adam_cfg.clone(), &nets.actor);
    let mut critic_adam = Adam::new(adam_cfg, &nets.critic);
    let mut buffer = RolloutBuffer::default();

    let mut adam = Adam::new(dcfg.adam.clone(), &student.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(dcfg.seed ^ 0xDA7A_0BDE);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(dcfg.seed ^ 0xD20_D20);

    let mut acc_history = vec![0.0];
    let mut kl_history = vec![0.0];
    let mut val_acc = 0.0;
    let mut tau_prev = map_temperature(0.5, ccfg.tau_min, ccfg.tau_max);
    let mut clamp_latched = false;

    let mut trace = DistillTrace::default();
    let mut controller = ControllerTrace::default();

    for epoch in 0..dcfg.epochs {
        let start = Instant::now();
        let state = state_features(&acc_history, &kl_history, epoch, dcfg.epochs, ccfg.window)?;
        if val_acc > ccfg.a_base {
            clamp_latched = true;
        }
        nets.sigma_clamp = clamp_latched.then_some(ccfg.sigma_clip);

        let (tau, sample, held) = if state.all_finite() {
            let sample = sample_action(&nets, &state, &mut ctrl_rng);
            (
                map_temperature(sample.action, ccfg.tau_min, ccfg.tau_max),
                Some(sample),
                false,
            )
        } else {
            (tau_prev, None, true)
        };

        let snapshot = student.params.to_map();
        let metrics = distill_epoch(
            student,
            Some(&cache),
            train,
            tau,
            dcfg.beta,
            dcfg,
            &mut adam,
            &mut order_rng,
            &mut dropout_rng,
        )?;
        if !metrics.loss_finite {
            student
                .params
                .load_map(&snapshot)
                .map_err(CtrlError::BadConfig)?;
            trace.aborted = true;
            break;
        }
        let (v_acc, _) = evaluate(student, val);
        val_acc = v_acc;
        let r = reward(metrics.train_acc, metrics.kl, tau, tau_prev, ccfg);

        if let Some(s) = sample {
            buffer.push(RolloutStep {
                state,
                pre_clip: s.pre_clip,
                reward: r,
                log_prob_old: s.log_prob,
                value_old: nets.value(&state),
            });
            if buffer.len() >= ccfg.horizon {
                let next_state =
                    state_features(&acc_history, &kl_history, epoch + 1, dcfg.epochs, ccfg.window)?;
                let v_next = nets.value(&next_state);
                policy_update(
                    &mut buffer,
                    &mut nets,
                    &mut actor_adam,
                    &mut critic_adam,
                    v_next,
                    ccfg,
                )?;
            }
        }

        if metrics.train_acc.is_finite() {
            acc_history.push(metrics.train_acc);
        }
        if metrics.kl.is_finite() {
            kl_history.push(metrics.kl);
        }

        let sigma_now = sample.map_or(0.0, |s| s.sigma);
        controller.records.push(ControllerRecord {
            epoch,
            acc_mean: state.acc_mean,
            acc_std: state.acc_std,
            acc_slope: state.acc_slope,
            kl_mean: state.kl_mean,
            kl_std: state.kl_std,
            kl_slope: state.kl_slope,
            progress: state.progress,
            action: sample.map_or(f64::NAN, |s| s.action),
            tau,
            reward: r,
            sigma: sigma_now,
            clamped: clamp_latched,
            held,
        });
        trace.push(EpochRecord {
            epoch,
            tau,
            train_acc: metrics.train_acc,
            val_acc,
            ce: metrics.ce,
            kl: metrics.kl,
            reward: r,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        tau_prev = tau;
    }
    Ok(DynamicOutcome { trace, controller })
}

use rand::SeedableRng;

#[cfg(test)]
mod tests;
