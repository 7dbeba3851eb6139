//! Latent actor and critic, trained purely in imagination.
//!
//! The actor is a squashed Gaussian over continuous actions in [-1, 1],
//! updated by backpropagating lambda-return estimates through the model
//! dynamics. The critic regresses those targets and keeps a slow copy that
//! provides the bootstrap values.

use ndgrad::record::Group;
use ndgrad::{Activation, AdamOpt, DenseNet, OutputInit, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::worldmodel::{LatentMode, ModelState, Rollout, WorldModel};
use crate::{Error, Result};

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
/// Entropy of a unit Gaussian: 0.5 * ln(2 * pi * e).
const HALF_LN_2PI_E: f64 = 1.4189385332046727;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BehaviorConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_scale: f64,
    pub lr: f64,
    pub horizon: usize,
    pub slow_critic_interval: u64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            gamma: 0.99,
            lambda: 0.95,
            entropy_scale: 1e-4,
            lr: 8e-5,
            horizon: 15,
            slow_critic_interval: 100,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Mode,
}

/// GAE-lambda returns. The terminal entry bootstraps on the value alone;
/// earlier entries mix the one-step target with the recursive tail.
pub fn lambda_returns(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len(), "lambda_returns: length mismatch");
    assert!(!rewards.is_empty(), "lambda_returns: empty input");
    let h = rewards.len();
    let mut out = vec![0.0; h];
    out[h - 1] = values[h - 1];
    for i in (0..h - 1).rev() {
        out[i] = rewards[i] + gamma * ((1.0 - lambda) * values[i + 1] + lambda * out[i + 1]);
    }
    out
}

/// Tape version of [`lambda_returns`] over per-step [S,1] columns.
pub fn lambda_returns_on_tape(
    t: &mut Tape,
    rewards: &[Var],
    values: &[Var],
    gamma: f64,
    lambda: f64,
) -> Vec<Var> {
    assert_eq!(rewards.len(), values.len());
    let h = rewards.len();
    let mut out = vec![values[h - 1]; h];
    for i in (0..h - 1).rev() {
        let v_next = t.scale(values[i + 1], (1.0 - lambda) * gamma);
        let tail = t.scale(out[i + 1], lambda * gamma);
        let boot = t.add(v_next, tail);
        out[i] = t.add(rewards[i], boot);
    }
    out
}

/// Squashed-Gaussian policy head: state (optionally with a skill vector
/// appended) to action mean and log-std, actions squashed by tanh.
pub struct Actor {
    store: ParamStore,
    net: DenseNet,
    pub action_dim: usize,
    pub skill_dim: usize,
    opt: AdamOpt,
}

impl Actor {
    pub fn new<R: Rng>(
        state_dim: usize,
        action_dim: usize,
        skill_dim: usize,
        hidden_units: usize,
        hidden_layers: usize,
        lr: f64,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let mut dims = vec![state_dim + skill_dim];
        dims.extend(std::iter::repeat(hidden_units).take(hidden_layers));
        dims.push(2 * action_dim);
        let net = DenseNet::new(&mut store, "actor", &dims, Activation::Elu, OutputInit::Zero, rng);
        let opt = AdamOpt::new(&store, lr);
        Actor { store, net, action_dim, skill_dim, opt }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn in_dim(&self) -> usize {
        self.net.in_dim()
    }

    /// (mean, log_std) with the log-std clamped to a sane band.
    pub fn dist_t(&self, t: &mut Tape, x: Var) -> (Var, Var) {
        let out = self.net.forward(t, &self.store, x);
        let mean = t.slice_cols(out, 0, self.action_dim);
        let ls_raw = t.slice_cols(out, self.action_dim, 2 * self.action_dim);
        let log_std = t.clamp(ls_raw, LOG_STD_MIN, LOG_STD_MAX);
        (mean, log_std)
    }

    /// Reparameterized sample: tanh(mean + std * eps). Returns the action and
    /// the log-std (for entropy terms).
    pub fn sample_t<R: Rng>(&self, t: &mut Tape, x: Var, rng: &mut R) -> (Var, Var) {
        let rows = t.rows(x);
        let (mean, log_std) = self.dist_t(t, x);
        let std = t.exp(log_std);
        let eps: Vec<f64> = (0..rows * self.action_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let noise = t.constant(rows, self.action_dim, eps);
        let scaled = t.mul(std, noise);
        let pre = t.add(mean, scaled);
        (t.tanh(pre), log_std)
    }

    pub fn mode_t(&self, t: &mut Tape, x: Var) -> Var {
        let (mean, _) = self.dist_t(t, x);
        t.tanh(mean)
    }

    /// Value-level action from a full policy input (state feature plus any
    /// skill context already appended).
    pub fn act<R: Rng>(&self, input: &[f64], mode: ActionMode, rng: &mut R) -> Vec<f64> {
        assert_eq!(input.len(), self.in_dim(), "act: input width");
        let mut t = Tape::new();
        let x = t.const_row(input);
        let a = match mode {
            ActionMode::Sample => self.sample_t(&mut t, x, rng).0,
            ActionMode::Mode => self.mode_t(&mut t, x),
        };
        t.value(a).to_vec()
    }

    pub fn to_group(&self) -> Group {
        Group::from_store(&self.store)
    }

    pub fn load_group(&mut self, group: &Group) -> Result<()> {
        group.apply_to_store("actor", &mut self.store)?;
        Ok(())
    }

    pub fn dump(&self) -> Vec<(String, Tensor)> {
        self.store.dump()
    }

    pub fn opt_state(&self) -> (Vec<Tensor>, Vec<Tensor>, u64) {
        self.opt.state()
    }

    pub fn restore_opt_state(&mut self, s: (Vec<Tensor>, Vec<Tensor>, u64)) {
        self.opt.restore(s.0, s.1, s.2);
    }
}

/// Value head with a slow copy. The slow copy provides bootstrap values and
/// is refreshed from the fast weights every `interval` gradient updates.
pub struct Critic {
    store: ParamStore,
    net: DenseNet,
    slow_store: ParamStore,
    slow_net: DenseNet,
    opt: AdamOpt,
    updates_since_sync: u64,
    interval: u64,
    pub skill_dim: usize,
}

impl Critic {
    pub fn new<R: Rng>(
        state_dim: usize,
        skill_dim: usize,
        hidden_units: usize,
        hidden_layers: usize,
        lr: f64,
        interval: u64,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![state_dim + skill_dim];
        dims.extend(std::iter::repeat(hidden_units).take(hidden_layers));
        dims.push(1);
        let mut store = ParamStore::new();
        let net = DenseNet::new(&mut store, "critic", &dims, Activation::Elu, OutputInit::Zero, rng);
        let mut slow_store = ParamStore::new();
        let slow_net =
            DenseNet::new(&mut slow_store, "critic", &dims, Activation::Elu, OutputInit::Zero, rng);
        slow_store.copy_from(&store);
        let opt = AdamOpt::new(&store, lr);
        Critic {
            store,
            net,
            slow_store,
            slow_net,
            opt,
            updates_since_sync: 0,
            interval,
            skill_dim,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn in_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn value_t(&self, t: &mut Tape, x: Var) -> Var {
        self.net.forward(t, &self.store, x)
    }

    pub fn slow_value_t(&self, t: &mut Tape, x: Var) -> Var {
        self.slow_net.forward(t, &self.slow_store, x)
    }

    pub fn value(&self, input: &[f64]) -> f64 {
        let mut t = Tape::new();
        let x = t.const_row(input);
        let v = self.value_t(&mut t, x);
        t.value(v)[0]
    }

    pub fn updates(&self) -> u64 {
        self.updates_since_sync
    }

    pub fn slow_dump(&self) -> Vec<(String, Tensor)> {
        self.slow_store.dump()
    }

    pub fn dump(&self) -> Vec<(String, Tensor)> {
        self.store.dump()
    }

    pub fn to_group(&self) -> Group {
        Group::from_store(&self.store)
    }

    pub fn load_group(&mut self, group: &Group) -> Result<()> {
        group.apply_to_store("critic", &mut self.store)?;
        self.slow_store.copy_from(&self.store);
        Ok(())
    }

    pub fn opt_state(&self) -> (Vec<Tensor>, Vec<Tensor>, u64, u64) {
        let (m, v, s) = self.opt.state();
        (m, v, s, self.updates_since_sync)
    }

    pub fn restore_opt_state(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step: u64, sync: u64) {
        self.opt.restore(m, v, step);
        self.updates_since_sync = sync;
    }

    pub fn restore_slow_from(&mut self, tensors: &[(String, Tensor)]) {
        for (name, tensor) in tensors {
            let id = self.slow_store.find(name).expect("slow critic tensor");
            *self.slow_store.get_mut(id) = tensor.clone();
        }
    }
}

/// Imagined rollout data extracted for the critic: features and
/// lambda-return targets, both detached.
pub struct ImaginedData {
    /// H entries, each [S * input_dim] (policy input width, incl. skill).
    pub feats: Vec<Vec<f64>>,
    /// H entries, each [S].
    pub targets: Vec<Vec<f64>>,
    /// H entries, each [S].
    pub rewards: Vec<Vec<f64>>,
    pub starts: usize,
    pub mean_reward: f64,
}

/// Per-step reward columns for an imagined rollout, built on the same tape so
/// gradients can flow through them. Entries are [S,1], aligned with
/// `rollout.feats`.
pub type RewardsFn<'a> = dyn FnMut(&mut Tape, &Rollout) -> Result<Vec<Var>> + 'a;

/// Compute the actor loss and its gradients without applying them.
/// Returns (loss, gradients, rollout data for the critic).
#[allow(clippy::too_many_arguments)]
pub fn actor_loss<R: Rng>(
    model: &WorldModel,
    actor: &Actor,
    critic: &Critic,
    starts: &[ModelState],
    cfg: &BehaviorConfig,
    rewards_fn: &mut RewardsFn,
    skills: Option<&[f64]>,
    latent: LatentMode,
    rng: &mut R,
) -> Result<(f64, ndgrad::Gradients, ImaginedData)> {
    let n = starts.len();
    assert!(n > 0, "actor_loss: no start states");
    let mut t = Tape::new();
    let skill_rows = skills.map(|s| {
        assert_eq!(s.len(), n * actor.skill_dim, "skill matrix size");
        t.constant(n, actor.skill_dim, s.to_vec())
    });
    let mut log_stds: Vec<Var> = Vec::with_capacity(cfg.horizon);
    let rollout = model.imagine_on_tape(
        &mut t,
        starts,
        cfg.horizon,
        latent,
        |t, feat, rng| {
            let x = match skill_rows {
                Some(sk) => t.concat_cols(feat, sk),
                None => feat,
            };
            let (a, ls) = actor.sample_t(t, x, rng);
            log_stds.push(ls);
            a
        },
        rng,
    );

    let reward_cols = rewards_fn(&mut t, &rollout)?;
    assert_eq!(reward_cols.len(), cfg.horizon, "rewards_fn must yield one column per step");

    // Bootstrap values from the slow critic, which also sees the skill.
    let value_cols: Vec<Var> = rollout
        .feats
        .iter()
        .map(|&f| {
            let x = match skill_rows {
                Some(sk) => t.concat_cols(f, sk),
                None => f,
            };
            critic.slow_value_t(&mut t, x)
        })
        .collect();

    let vlam = lambda_returns_on_tape(&mut t, &reward_cols, &value_cols, cfg.gamma, cfg.lambda);

    let mut vsum: Option<Var> = None;
    for &v in &vlam {
        let s = t.sum(v);
        vsum = Some(match vsum {
            None => s,
            Some(acc) => t.add(acc, s),
        });
    }
    let denom = 1.0 / (n * cfg.horizon) as f64;
    let mean_return = t.scale(vsum.unwrap(), denom);

    // Gaussian entropy of the pre-squash policy.
    let mut ls_sum: Option<Var> = None;
    for &ls in &log_stds {
        let s = t.sum(ls);
        ls_sum = Some(match ls_sum {
            None => s,
            Some(acc) => t.add(acc, s),
        });
    }
    let mean_log_std = t.scale(ls_sum.unwrap(), denom);
    let entropy = t.add_const(mean_log_std, actor.action_dim as f64 * HALF_LN_2PI_E);

    let neg_ret = t.neg(mean_return);
    let ent_term = t.scale(entropy, cfg.entropy_scale);
    let loss = t.sub(neg_ret, ent_term);

    let loss_value = t.value_scalar(loss);
    if !loss_value.is_finite() || loss_value.abs() > 1e6 {
        return Err(Error::Diverged(format!("actor loss = {loss_value}")));
    }

    // Extract detached rollout data before backward clears the tape. The
    // critic regresses on the same inputs the values were computed from.
    let mut feats = Vec::with_capacity(cfg.horizon);
    let mut targets = Vec::with_capacity(cfg.horizon);
    let mut rewards = Vec::with_capacity(cfg.horizon);
    let mut reward_total = 0.0;
    for i in 0..cfg.horizon {
        let x = match skill_rows {
            Some(sk) => t.concat_cols(rollout.feats[i], sk),
            None => rollout.feats[i],
        };
        feats.push(t.value(x).to_vec());
        targets.push(t.value(vlam[i]).to_vec());
        let r = t.value(reward_cols[i]).to_vec();
        reward_total += r.iter().sum::<f64>();
        rewards.push(r);
    }
    let data = ImaginedData {
        feats,
        targets,
        rewards,
        starts: n,
        mean_reward: reward_total * denom,
    };

    let grads = t.backward(loss)?;
    Ok((loss_value, grads, data))
}

/// One actor update: dynamics-backprop of -mean(V^lambda) minus the entropy
/// bonus, applied to the actor parameters only.
#[allow(clippy::too_many_arguments)]
pub fn actor_update<R: Rng>(
    model: &WorldModel,
    actor: &mut Actor,
    critic: &Critic,
    starts: &[ModelState],
    cfg: &BehaviorConfig,
    rewards_fn: &mut RewardsFn,
    skills: Option<&[f64]>,
    latent: LatentMode,
    rng: &mut R,
) -> Result<(f64, ImaginedData)> {
    let (loss, grads, data) =
        actor_loss(model, actor, critic, starts, cfg, rewards_fn, skills, latent, rng)?;
    actor.opt.step(&mut actor.store, &grads)?;
    Ok((loss, data))
}

/// One critic update: squared-error regression of the fast critic to the
/// lambda-return targets over t < H, then slow-copy bookkeeping.
pub fn critic_update(critic: &mut Critic, data: &ImaginedData) -> Result<f64> {
    let h = data.feats.len();
    if h < 2 {
        return Ok(0.0);
    }
    let n = data.starts;
    let width = critic.in_dim();
    let rows = (h - 1) * n;
    let mut x = Vec::with_capacity(rows * width);
    let mut y = Vec::with_capacity(rows);
    for i in 0..h - 1 {
        assert_eq!(data.feats[i].len(), n * width, "critic input width");
        x.extend_from_slice(&data.feats[i]);
        y.extend_from_slice(&data.targets[i]);
    }
    let mut t = Tape::new();
    let xs = t.constant(rows, width, x);
    let pred = critic.value_t(&mut t, xs);
    let target = t.constant(rows, 1, y);
    let d = t.sub(pred, target);
    let sq = t.square(d);
    let half = t.scale(sq, 0.5);
    let loss = t.mean(half);
    let loss_value = t.value_scalar(loss);
    let grads = t.backward(loss)?;
    critic.opt.step(&mut critic.store, &grads)?;
    critic.updates_since_sync += 1;
    if critic.updates_since_sync % critic.interval == 0 {
        critic.slow_store.copy_from(&critic.store);
    }
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> WorldModel {
        let cfg = ModelConfig {
            obs_dim: 3,
            action_dim: 2,
            deter_dim: 6,
            factors: 2,
            classes: 3,
            embed_dim: 4,
            hidden_units: 12,
            hidden_layers: 2,
            ..ModelConfig::default()
        };
        WorldModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn brute_force_return(t: usize, r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> f64 {
        let h = r.len();
        if t == h - 1 {
            v[t]
        } else {
            r[t] + gamma
                * ((1.0 - lambda) * v[t + 1]
                    + lambda * brute_force_return(t + 1, r, v, gamma, lambda))
        }
    }

    #[test]
    fn lambda_return_terminal_case() {
        let out = lambda_returns(&[5.0], &[0.7], 0.9, 0.8);
        assert_eq!(out, vec![0.7]);
    }

    #[test]
    fn lambda_zero_is_one_step_td() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let v = [0.1, 0.2, 0.3, 0.4];
        let out = lambda_returns(&r, &v, 0.9, 0.0);
        for i in 0..3 {
            assert!((out[i] - (r[i] + 0.9 * v[i + 1])).abs() < 1e-12);
        }
        assert_eq!(out[3], v[3]);
    }

    #[test]
    fn lambda_return_matches_fixture() {
        let out = lambda_returns(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5], 0.9, 0.8);
        let want = [2.854, 2.45, 0.5];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn lambda_returns_match_brute_force_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let h = rng.gen_range(1..=20usize);
            let r: Vec<f64> = (0..h).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..h).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let gamma: f64 = rng.gen_range(0.01..=1.0);
            let lambda: f64 = rng.gen_range(0.0..=1.0);
            let fast = lambda_returns(&r, &v, gamma, lambda);
            for t in 0..h {
                let slow = brute_force_return(t, &r, &v, gamma, lambda);
                assert!((fast[t] - slow).abs() < 1e-12, "t={t}: {} vs {slow}", fast[t]);
            }
        }
    }

    #[test]
    fn lambda_one_zero_values_is_discounted_sum() {
        let r = [1.0, 0.5, 0.25, 2.0];
        let v = [0.0; 4];
        let gamma = 0.9;
        let out = lambda_returns(&r, &v, gamma, 1.0);
        for t in 0..3 {
            let mut want = 0.0;
            for k in t..3 {
                want += gamma.powi((k - t) as i32) * r[k];
            }
            assert!((out[t] - want).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn act_mode_with_zero_head_is_zero_and_samples_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actor = Actor::new(5, 2, 0, 8, 2, 8e-5, &mut rng);
        let input = [0.4, -0.2, 0.8, 0.0, 0.3];
        let a = actor.act(&input, ActionMode::Mode, &mut rng);
        assert_eq!(a, vec![0.0, 0.0]);
        for _ in 0..10_000 {
            let a = actor.act(&input, ActionMode::Sample, &mut rng);
            assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        // fixed seed -> reproducible sample
        let s1 = actor.act(&input, ActionMode::Sample, &mut ChaCha8Rng::seed_from_u64(9));
        let s2 = actor.act(&input, ActionMode::Sample, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(s1, s2);
    }

    #[test]
    fn slow_critic_syncs_exactly_at_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut critic = Critic::new(4, 0, 8, 2, 1e-3, 100, &mut rng);
        // drift the fast critic away from the slow copy
        let data = ImaginedData {
            feats: vec![vec![0.2, -0.1, 0.4, 0.9, 0.5, 0.5, -0.5, 0.1]; 2],
            targets: vec![vec![1.0, -1.0]; 2],
            rewards: vec![vec![0.0, 0.0]; 2],
            starts: 2,
            mean_reward: 0.0,
        };
        let slow_initial = critic.slow_dump();
        for i in 1..=100u64 {
            critic_update(&mut critic, &data).unwrap();
            if i < 100 {
                assert_eq!(critic.slow_dump(), slow_initial, "slow moved early at {i}");
            }
        }
        assert_eq!(critic.slow_dump(), critic.dump(), "slow != fast after 100 updates");
    }

    #[test]
    fn critic_regresses_to_constant_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut critic = Critic::new(2, 0, 8, 1, 1e-2, 100, &mut rng);
        let feat = vec![0.5, -0.5];
        let data = ImaginedData {
            feats: vec![vec![0.5, -0.5]; 2],
            targets: vec![vec![0.7]; 2],
            rewards: vec![vec![0.0]; 2],
            starts: 1,
            mean_reward: 0.0,
        };
        for _ in 0..3000 {
            critic_update(&mut critic, &data).unwrap();
        }
        assert!((critic.value(&feat) - 0.7).abs() < 1e-3, "value {}", critic.value(&feat));
    }

    #[test]
    fn critic_at_target_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut critic = Critic::new(2, 0, 8, 1, 1e-3, 100, &mut rng);
        // fresh critic is the zero function, so zero targets give zero loss
        let data = ImaginedData {
            feats: vec![vec![0.3, 0.9]; 2],
            targets: vec![vec![0.0]; 2],
            rewards: vec![vec![0.0]; 2],
            starts: 1,
            mean_reward: 0.0,
        };
        let before = critic.dump();
        let loss = critic_update(&mut critic, &data).unwrap();
        assert_eq!(loss, 0.0);
        // zero gradient: parameters unchanged (weight decay only acts through
        // the optimizer when gradients exist; Adam with zero grad is a no-op
        // except weight decay, which is 1e-6 * lr and hits zero-initialized
        // outputs as exactly zero movement on zero weights)
        let after = critic.dump();
        for ((_, a), (_, b)) in before.iter().zip(&after) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    /// With a zeroed reward head and a zero critic, the return term of the
    /// actor loss vanishes, leaving exactly the entropy bonus.
    #[test]
    fn actor_gradient_reduces_to_entropy_bonus_when_returns_vanish() {
        let model = tiny_model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let actor = Actor::new(model.cfg.state_dim(), 2, 0, 8, 1, 8e-5, &mut rng);
        let critic = Critic::new(model.cfg.state_dim(), 0, 8, 1, 8e-5, 100, &mut rng);
        let cfg = BehaviorConfig { horizon: 4, ..BehaviorConfig::default() };
        let starts = vec![ModelState::zero(&model.cfg); 3];

        // reward head is zero-initialized, so extrinsic rewards are exactly 0
        let mut rewards: Box<RewardsFn> = Box::new(|t: &mut Tape, ro: &Rollout| {
            Ok(ro.feats.iter().map(|&f| model.reward_t(t, f)).collect())
        });
        let (_, grads_full, data) = actor_loss(
            &model,
            &actor,
            &critic,
            &starts,
            &cfg,
            &mut *rewards,
            None,
            LatentMode::Mode,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert!(data.rewards.iter().all(|r| r.iter().all(|&x| x == 0.0)));
        assert!(data.targets.iter().all(|r| r.iter().all(|&x| x == 0.0)));

        // entropy-only loss on the same sampled rollout
        let mut zero_rewards: Box<RewardsFn> = Box::new(|t: &mut Tape, ro: &Rollout| {
            Ok(ro
                .feats
                .iter()
                .map(|&f| {
                    let rows = t.rows(f);
                    t.constant(rows, 1, vec![0.0; rows])
                })
                .collect())
        });
        let (_, grads_ent, _) = actor_loss(
            &model,
            &actor,
            &critic,
            &starts,
            &cfg,
            &mut *zero_rewards,
            None,
            LatentMode::Mode,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();

        for id in actor.store().ids() {
            let a = grads_full.get(actor.store(), id).map(|t| t.data().to_vec());
            let b = grads_ent.get(actor.store(), id).map(|t| t.data().to_vec());
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter().zip(&b) {
                        assert!((x - y).abs() < 1e-12, "gradient mismatch");
                    }
                }
                (None, None) => {}
                other => panic!("gradient presence mismatch {other:?}"),
            }
        }
    }

    /// Rig the dynamics so reward = -||h'||^2 with h' monotone in the action;
    /// one update with no entropy bonus must pull the mean action toward 0.
    #[test]
    fn actor_update_moves_toward_reward_maximum() {
        let mut model = tiny_model(20);
        let cfg_m = model.cfg.clone();
        // update gate bias large -> z ~ 1 -> h' ~ tanh(W_c [s; a])
        let store = model.store_mut();
        let bz = store.find("gru.bz").unwrap();
        for v in store.get_mut(bz).data_mut() {
            *v = 10.0;
        }
        // candidate weights: h' depends only on the actions, gain 1
        let wc = store.find("gru.wc").unwrap();
        {
            let t = store.get_mut(wc);
            let rows = cfg_m.stoch_dim() + cfg_m.action_dim;
            let cols = cfg_m.deter_dim;
            let data = t.data_mut();
            for x in data.iter_mut() {
                *x = 0.0;
            }
            // route action components into the first hidden units
            for a in 0..cfg_m.action_dim {
                let row = cfg_m.stoch_dim() + a;
                data[row * cols + a] = 1.0;
            }
            let _ = rows;
        }
        let uc = store.find("gru.uc").unwrap();
        for v in store.get_mut(uc).data_mut() {
            *v = 0.0;
        }
        let bc = store.find("gru.bc").unwrap();
        for v in store.get_mut(bc).data_mut() {
            *v = 0.0;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut actor = Actor::new(cfg_m.state_dim(), 2, 0, 8, 1, 5e-2, &mut rng);
        // push the initial mean away from zero via the output bias
        {
            let ids = actor.net.param_ids();
            let bias = ids[ids.len() - 1];
            let b = actor.store.get_mut(bias).data_mut();
            b[0] = 0.8;
            b[1] = 0.8;
        }
        let critic = Critic::new(cfg_m.state_dim(), 0, 8, 1, 8e-5, 100, &mut rng);
        let cfg = BehaviorConfig {
            horizon: 1,
            entropy_scale: 0.0,
            gamma: 0.99,
            lambda: 0.95,
            ..BehaviorConfig::default()
        };
        let starts = vec![ModelState::zero(&cfg_m); 8];
        let mean_before = {
            let zero_feat = {
                let mut f = vec![0.0; cfg_m.state_dim()];
                f[cfg_m.deter_dim..].copy_from_slice(&ModelState::zero(&cfg_m).stoch);
                f
            };
            actor.act(&zero_feat, ActionMode::Mode, &mut rng)
        };
        let mut rewards: Box<RewardsFn> = Box::new(|t: &mut Tape, ro: &Rollout| {
            Ok(ro
                .deters
                .iter()
                .map(|&h| {
                    let sq = t.square(h);
                    let rs = t.row_sum(sq);
                    t.neg(rs)
                })
                .collect())
        });
        for _ in 0..20 {
            actor_update(
                &model,
                &mut actor,
                &critic,
                &starts,
                &cfg,
                &mut *rewards,
                None,
                LatentMode::Mode,
                &mut ChaCha8Rng::seed_from_u64(3),
            )
            .unwrap();
        }
        let zero_feat = {
            let mut f = vec![0.0; cfg_m.state_dim()];
            f[cfg_m.deter_dim..].copy_from_slice(&ModelState::zero(&cfg_m).stoch);
            f
        };
        let mean_after = actor.act(&zero_feat, ActionMode::Mode, &mut rng);
        for a in 0..2 {
            assert!(
                mean_after[a].abs() < mean_before[a].abs(),
                "action {a}: |{}| !< |{}|",
                mean_after[a],
                mean_before[a]
            );
        }
    }

    /// Finite-difference check of the full actor loss at tiny widths, using
    /// soft latents (exact gradients) and frozen sampling noise.
    #[test]
    fn actor_loss_gradient_matches_finite_differences() {
        let mut model = tiny_model(30);
        // give the zero-initialized reward head some signal so the return
        // path of the loss carries gradient too
        {
            use rand::Rng as _;
            let mut jitter = ChaCha8Rng::seed_from_u64(33);
            let store = model.store_mut();
            for name in ["reward.w2", "reward.b2"] {
                let id = store.find(name).unwrap();
                for v in store.get_mut(id).data_mut() {
                    *v += jitter.gen_range(-0.2..0.2);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut actor = Actor::new(model.cfg.state_dim(), 2, 0, 6, 1, 8e-5, &mut rng);
        // move off the zero init so the loss surface is generic, keeping
        // log-std well inside the clamp band
        {
            use rand::Rng as _;
            let mut jitter = ChaCha8Rng::seed_from_u64(32);
            for id in actor.net.param_ids() {
                for v in actor.store.get_mut(id).data_mut() {
                    *v += jitter.gen_range(-0.05..0.05);
                }
            }
        }
        let mut critic = Critic::new(model.cfg.state_dim(), 0, 6, 1, 8e-5, 100, &mut rng);
        {
            use rand::Rng as _;
            let mut jitter = ChaCha8Rng::seed_from_u64(34);
            for name in ["critic.w1", "critic.b1"] {
                let id = critic.store.find(name).unwrap();
                for v in critic.store.get_mut(id).data_mut() {
                    *v += jitter.gen_range(-0.2..0.2);
                }
            }
            critic.slow_store.copy_from(&critic.store);
        }
        let critic = critic;
        let cfg = BehaviorConfig { horizon: 3, ..BehaviorConfig::default() };
        let starts = vec![ModelState::zero(&model.cfg); 2];

        let loss_of = |actor: &Actor| {
            let mut rewards: Box<RewardsFn> = Box::new(|t: &mut Tape, ro: &Rollout| {
                Ok(ro.feats.iter().map(|&f| model.reward_t(t, f)).collect())
            });
            let (loss, _, _) = actor_loss(
                &model,
                actor,
                &critic,
                &starts,
                &cfg,
                &mut *rewards,
                None,
                LatentMode::Soft,
                &mut ChaCha8Rng::seed_from_u64(71),
            )
            .unwrap();
            loss
        };
        let grads = {
            let mut rewards: Box<RewardsFn> = Box::new(|t: &mut Tape, ro: &Rollout| {
                Ok(ro.feats.iter().map(|&f| model.reward_t(t, f)).collect())
            });
            let (_, g, _) = actor_loss(
                &model,
                &actor,
                &critic,
                &starts,
                &cfg,
                &mut *rewards,
                None,
                LatentMode::Soft,
                &mut ChaCha8Rng::seed_from_u64(71),
            )
            .unwrap();
            g
        };
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for id in actor.store.ids().collect::<Vec<_>>() {
            for j in 0..actor.store.get(id).len() {
                let orig = actor.store.get(id).data()[j];
                actor.store.get_mut(id).data_mut()[j] = orig + eps;
                let up = loss_of(&actor);
                actor.store.get_mut(id).data_mut()[j] = orig - eps;
                let down = loss_of(&actor);
                actor.store.get_mut(id).data_mut()[j] = orig;
                let cd = (up - down) / (2.0 * eps);
                let ad = grads.get(&actor.store, id).map_or(0.0, |g| g.data()[j]);
                let rel = (ad - cd).abs() / ad.abs().max(cd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn actor_update_leaves_model_and_critic_untouched() {
        let model = tiny_model(40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut actor = Actor::new(model.cfg.state_dim(), 2, 0, 8, 1, 1e-3, &mut rng);
        let critic = Critic::new(model.cfg.state_dim(), 0, 8, 1, 8e-5, 100, &mut rng);
        let cfg = BehaviorConfig { horizon: 3, ..BehaviorConfig::default() };
        let starts = vec![ModelState::zero(&model.cfg); 2];
        let model_before = model.dump();
        let critic_before = critic.dump();
        let slow_before = critic.slow_dump();
        let mut rewards: Box<RewardsFn> = Box::new(|t: &mut Tape, ro: &Rollout| {
            Ok(ro.feats.iter().map(|&f| model.reward_t(t, f)).collect())
        });
        actor_update(
            &model,
            &mut actor,
            &critic,
            &starts,
            &cfg,
            &mut *rewards,
            None,
            LatentMode::Sample,
            &mut rng,
        )
        .unwrap();
        assert_eq!(model.dump(), model_before);
        assert_eq!(critic.dump(), critic_before);
        assert_eq!(critic.slow_dump(), slow_before);
    }
}
