//! Discrete-latent recurrent state-space model.
//!
//! The latent state is a deterministic GRU vector plus a block of categorical
//! factors. The prior predicts the next stochastic block from the recurrent
//! state alone; the posterior additionally sees the encoded observation.
//! Training maximizes an ELBO: reconstruction + reward likelihood + a
//! KL term with balancing and free nats.

use std::cell::Cell;

use ndgrad::record::Group;
use ndgrad::{
    Activation, AdamOpt, DenseNet, GruCell, OutputInit, ParamStore, Tape, Tensor, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Model dimensions and loss weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Width of the deterministic (GRU) component.
    pub deter_dim: usize,
    /// Number of categorical factors in the stochastic block.
    pub factors: usize,
    /// Classes per categorical factor.
    pub classes: usize,
    pub embed_dim: usize,
    /// Hidden width of all MLPs.
    pub hidden_units: usize,
    /// Hidden layer count of all MLPs.
    pub hidden_layers: usize,
    /// KL balancing coefficient (weight on the prior-side KL).
    pub kl_alpha: f64,
    pub free_nats: f64,
    pub kl_scale: f64,
    pub lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            obs_dim: 6,
            action_dim: 2,
            deter_dim: 32,
            factors: 8,
            classes: 8,
            embed_dim: 32,
            hidden_units: 64,
            hidden_layers: 2,
            kl_alpha: 0.8,
            free_nats: 1.0,
            kl_scale: 1.0,
            lr: 3e-4,
        }
    }
}

impl ModelConfig {
    pub fn stoch_dim(&self) -> usize {
        self.factors * self.classes
    }

    /// Full state width: deterministic + stochastic.
    pub fn state_dim(&self) -> usize {
        self.deter_dim + self.stoch_dim()
    }

    fn mlp_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(self.hidden_units).take(self.hidden_layers));
        dims.push(output);
        dims
    }
}

/// The latent state: deterministic vector plus stochastic block, the block
/// stored either as one-hot samples or class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub deter: Vec<f64>,
    pub stoch: Vec<f64>,
}

impl ModelState {
    /// h = 0, stochastic block at uniform probabilities.
    pub fn zero(cfg: &ModelConfig) -> Self {
        ModelState {
            deter: vec![0.0; cfg.deter_dim],
            stoch: vec![1.0 / cfg.classes as f64; cfg.stoch_dim()],
        }
    }

    /// Concatenated full state, the input to every head.
    pub fn feature(&self) -> Vec<f64> {
        let mut f = self.deter.clone();
        f.extend_from_slice(&self.stoch);
        f
    }
}

/// Per-factor categorical logits with derived probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution {
    pub factors: usize,
    pub classes: usize,
    pub logits: Vec<f64>,
}

impl StateDistribution {
    pub fn new(factors: usize, classes: usize, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), factors * classes);
        StateDistribution { factors, classes, logits }
    }

    /// Per-factor softmax probabilities; strictly positive.
    pub fn probs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.logits.len()];
        for f in 0..self.factors {
            let seg = &self.logits[f * self.classes..(f + 1) * self.classes];
            let mx = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &l) in seg.iter().enumerate() {
                let e = (l - mx).exp();
                out[f * self.classes + j] = e;
                sum += e;
            }
            for j in 0..self.classes {
                out[f * self.classes + j] /= sum;
            }
        }
        out
    }

    /// KL(self || other), summed over factors.
    pub fn kl_to(&self, other: &StateDistribution) -> f64 {
        let p = self.probs();
        let q = other.probs();
        p.iter()
            .zip(&q)
            .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
            .sum()
    }

    /// Jensen-Shannon divergence to `other`, averaged per factor.
    /// Bounded by ln 2 and symmetric.
    pub fn js_to(&self, other: &StateDistribution) -> f64 {
        let p = self.probs();
        let q = other.probs();
        let mut total = 0.0;
        for j in 0..p.len() {
            let m = 0.5 * (p[j] + q[j]);
            if p[j] > 0.0 {
                total += 0.5 * p[j] * (p[j] / m).ln();
            }
            if q[j] > 0.0 {
                total += 0.5 * q[j] * (q[j] / m).ln();
            }
        }
        total / self.factors as f64
    }

    /// One-hot sample per factor.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let p = self.probs();
        let mut out = vec![0.0; p.len()];
        for f in 0..self.factors {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = self.classes - 1;
            for j in 0..self.classes {
                acc += p[f * self.classes + j];
                if u < acc {
                    chosen = j;
                    break;
                }
            }
            out[f * self.classes + chosen] = 1.0;
        }
        out
    }

    /// One-hot argmax per factor.
    pub fn mode(&self) -> Vec<f64> {
        let p = self.probs();
        let mut out = vec![0.0; p.len()];
        for f in 0..self.factors {
            let seg = &p[f * self.classes..(f + 1) * self.classes];
            let mut best = 0;
            for j in 1..self.classes {
                if seg[j] > seg[best] {
                    best = j;
                }
            }
            out[f * self.classes + best] = 1.0;
        }
        out
    }
}

/// Loss components of one ELBO evaluation. `total` is exactly
/// `recon + reward_nll + kl_scale * kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub reward_nll: f64,
    pub kl: f64,
    pub kl_scale: f64,
    pub total: f64,
}

/// How the extrinsic reward head participates in the ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    /// No reward term (standard unsupervised pre-training).
    Ignore,
    /// Regress rewards; gradients flow into the rest of the model.
    Train,
    /// Regress rewards with the features detached, so the head learns
    /// without influencing model training.
    TrainStopGrad,
}

/// How the stochastic block is realized during rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// Straight-through one-hot sample.
    Sample,
    /// Straight-through one-hot argmax (deterministic).
    Mode,
    /// Use the class probabilities directly (exact gradients; used by
    /// gradient-check tests).
    Soft,
}

/// Output of one training step on a sequence batch.
pub struct ModelUpdate {
    pub breakdown: ElboBreakdown,
    /// Posterior states per timestep (outer) and batch row (inner), detached.
    pub states: Vec<Vec<ModelState>>,
    /// Encoder outputs per timestep, flattened [B * embed_dim].
    pub embeds: Vec<Vec<f64>>,
    /// Posterior logits per timestep, flattened [B * factors * classes].
    pub post_logits: Vec<Vec<f64>>,
    /// Prior logits per timestep, same layout.
    pub prior_logits: Vec<Vec<f64>>,
}

/// Sequence batch: `steps` major, then `batch` rows.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub batch: usize,
    pub steps: usize,
    pub obs: Vec<f64>,      // [steps][batch][obs_dim]
    pub action: Vec<f64>,   // [steps][batch][action_dim]
    pub reward: Vec<f64>,   // [steps][batch]
    pub is_first: Vec<f64>, // [steps][batch], 1.0 marks an episode start
}

impl SeqBatch {
    pub fn obs_at(&self, t: usize, obs_dim: usize) -> &[f64] {
        &self.obs[t * self.batch * obs_dim..(t + 1) * self.batch * obs_dim]
    }
    pub fn action_at(&self, t: usize, action_dim: usize) -> &[f64] {
        &self.action[t * self.batch * action_dim..(t + 1) * self.batch * action_dim]
    }
    pub fn reward_at(&self, t: usize) -> &[f64] {
        &self.reward[t * self.batch..(t + 1) * self.batch]
    }
    pub fn is_first_at(&self, t: usize) -> &[f64] {
        &self.is_first[t * self.batch..(t + 1) * self.batch]
    }
}

/// A rollout produced by [`WorldModel::imagine_on_tape`].
pub struct Rollout {
    /// Start features [S, state_dim], before the first imagined step.
    pub start_feat: Var,
    /// Features of the imagined states z_1..z_H, each [S, state_dim].
    pub feats: Vec<Var>,
    /// Deterministic components of z_1..z_H, each [S, deter_dim].
    pub deters: Vec<Var>,
    /// Actions a_0..a_{H-1}, each [S, action_dim].
    pub actions: Vec<Var>,
}

pub struct WorldModel {
    pub cfg: ModelConfig,
    store: ParamStore,
    intr_store: ParamStore,
    encoder: DenseNet,
    decoder: DenseNet,
    gru: GruCell,
    prior_net: DenseNet,
    post_net: DenseNet,
    reward_head: DenseNet,
    intr_head: DenseNet,
    opt: AdamOpt,
    intr_opt: AdamOpt,
    encoder_calls: Cell<u64>,
    decoder_frozen: bool,
}

impl WorldModel {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let encoder = DenseNet::new(
            &mut store,
            "encoder",
            &cfg.mlp_dims(cfg.obs_dim, cfg.embed_dim),
            Activation::Elu,
            OutputInit::Normal,
            rng,
        );
        let decoder = DenseNet::new(
            &mut store,
            "decoder",
            &cfg.mlp_dims(cfg.state_dim(), cfg.obs_dim),
            Activation::Elu,
            OutputInit::Normal,
            rng,
        );
        let gru = GruCell::new(
            &mut store,
            "gru",
            cfg.stoch_dim() + cfg.action_dim,
            cfg.deter_dim,
            rng,
        );
        let prior_net = DenseNet::new(
            &mut store,
            "prior",
            &cfg.mlp_dims(cfg.deter_dim, cfg.stoch_dim()),
            Activation::Elu,
            OutputInit::Normal,
            rng,
        );
        let post_net = DenseNet::new(
            &mut store,
            "posterior",
            &cfg.mlp_dims(cfg.deter_dim + cfg.embed_dim, cfg.stoch_dim()),
            Activation::Elu,
            OutputInit::Normal,
            rng,
        );
        let reward_head = DenseNet::new(
            &mut store,
            "reward",
            &cfg.mlp_dims(cfg.state_dim(), 1),
            Activation::Elu,
            OutputInit::Zero,
            rng,
        );
        let mut intr_store = ParamStore::new();
        let intr_head = DenseNet::new(
            &mut intr_store,
            "intr_reward",
            &cfg.mlp_dims(cfg.state_dim(), 1),
            Activation::Elu,
            OutputInit::Zero,
            rng,
        );
        let opt = AdamOpt::new(&store, cfg.lr);
        let intr_opt = AdamOpt::new(&intr_store, cfg.lr);
        WorldModel {
            cfg,
            store,
            intr_store,
            encoder,
            decoder,
            gru,
            prior_net,
            post_net,
            reward_head,
            intr_head,
            opt,
            intr_opt,
            encoder_calls: Cell::new(0),
            decoder_frozen: false,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable access to the parameter store, for tests and diagnostics that
    /// rig specific weights.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.get()
    }

    pub fn decoder_frozen(&self) -> bool {
        self.decoder_frozen
    }

    /// Exclude the decoder from all subsequent optimizer updates.
    pub fn freeze_decoder(&mut self) {
        for id in self.decoder.param_ids() {
            self.store.set_trainable(id, false);
        }
        self.decoder_frozen = true;
    }

    pub fn unfreeze_decoder(&mut self) {
        for id in self.decoder.param_ids() {
            self.store.set_trainable(id, true);
        }
        self.decoder_frozen = false;
    }

    // ---- tape-level pieces -------------------------------------------------

    pub fn embed_t(&self, t: &mut Tape, obs: Var) -> Var {
        self.encoder_calls.set(self.encoder_calls.get() + 1);
        self.encoder.forward(t, &self.store, obs)
    }

    /// h' = GRU(h, s (+) a)
    pub fn step_deter_t(&self, t: &mut Tape, h: Var, s: Var, a: Var) -> Var {
        let x = t.concat_cols(s, a);
        self.gru.forward(t, &self.store, x, h)
    }

    pub fn prior_logits_t(&self, t: &mut Tape, h: Var) -> Var {
        self.prior_net.forward(t, &self.store, h)
    }

    pub fn post_logits_t(&self, t: &mut Tape, h: Var, embed: Var) -> Var {
        let x = t.concat_cols(h, embed);
        self.post_net.forward(t, &self.store, x)
    }

    pub fn decode_t(&self, t: &mut Tape, feat: Var) -> Var {
        self.decoder.forward(t, &self.store, feat)
    }

    pub fn reward_t(&self, t: &mut Tape, feat: Var) -> Var {
        self.reward_head.forward(t, &self.store, feat)
    }

    pub fn intr_reward_t(&self, t: &mut Tape, feat: Var) -> Var {
        self.intr_head.forward(t, &self.intr_store, feat)
    }

    fn latent_from_logits<R: Rng>(
        &self,
        t: &mut Tape,
        logits: Var,
        mode: LatentMode,
        rng: &mut R,
    ) -> Var {
        match mode {
            LatentMode::Sample => t.straight_through_sample(logits, self.cfg.classes, rng),
            LatentMode::Mode => t.straight_through_mode(logits, self.cfg.classes),
            LatentMode::Soft => {
                let lp = t.log_softmax(logits, self.cfg.classes);
                t.exp(lp)
            }
        }
    }

    // ---- inference ----------------------------------------------------------

    /// One filtering step: advance the recurrent state with (s, a), read the
    /// prior from it, fold in the encoded observation for the posterior, and
    /// sample the next state straight-through from the posterior.
    pub fn observe_step<R: Rng>(
        &self,
        prev: &ModelState,
        action: &[f64],
        obs: &[f64],
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<(StateDistribution, StateDistribution, ModelState)> {
        assert_eq!(prev.deter.len(), self.cfg.deter_dim, "observe_step: deter width");
        assert_eq!(prev.stoch.len(), self.cfg.stoch_dim(), "observe_step: stoch width");
        assert_eq!(action.len(), self.cfg.action_dim, "observe_step: action width");
        assert_eq!(obs.len(), self.cfg.obs_dim, "observe_step: obs width");

        let mut t = Tape::new();
        let h = t.const_row(&prev.deter);
        let s = t.const_row(&prev.stoch);
        let a = t.const_row(action);
        let h2 = self.step_deter_t(&mut t, h, s, a);
        let prior_logits = self.prior_logits_t(&mut t, h2);
        let o = t.const_row(obs);
        let e = self.embed_t(&mut t, o);
        let post_logits = self.post_logits_t(&mut t, h2, e);

        check_finite(t.value(prior_logits), "prior")?;
        check_finite(t.value(post_logits), "posterior")?;

        let sample = self.latent_from_logits(&mut t, post_logits, mode, rng);
        let next = ModelState {
            deter: t.value(h2).to_vec(),
            stoch: t.value(sample).to_vec(),
        };
        let prior = StateDistribution::new(
            self.cfg.factors,
            self.cfg.classes,
            t.value(prior_logits).to_vec(),
        );
        let post = StateDistribution::new(
            self.cfg.factors,
            self.cfg.classes,
            t.value(post_logits).to_vec(),
        );
        Ok((post, prior, next))
    }

    /// Prior prediction for (state, action) without observing: the
    /// distribution p(z' | z, a). Used by planning-free diagnostics.
    pub fn prior_prediction(&self, state: &ModelState, action: &[f64]) -> StateDistribution {
        let mut t = Tape::new();
        let h = t.const_row(&state.deter);
        let s = t.const_row(&state.stoch);
        let a = t.const_row(action);
        let h2 = self.step_deter_t(&mut t, h, s, a);
        let logits = self.prior_logits_t(&mut t, h2);
        StateDistribution::new(self.cfg.factors, self.cfg.classes, t.value(logits).to_vec())
    }

    // ---- losses --------------------------------------------------------------

    /// Balanced KL with free nats, per batch row: [B, L*C] logits in, [B,1]
    /// out. Value equals KL(post||prior) clamped below at `free_nats`; the
    /// gradient splits `alpha` to the prior side and `1-alpha` to the
    /// posterior side, and vanishes when the clamp is active.
    pub fn kl_balanced_rows(
        t: &mut Tape,
        post_logits: Var,
        prior_logits: Var,
        classes: usize,
        alpha: f64,
        free_nats: f64,
    ) -> Var {
        let post_lp = t.log_softmax(post_logits, classes);
        let post_p = t.exp(post_lp);
        let prior_lp = t.log_softmax(prior_logits, classes);

        let post_lp_sg = t.detach(post_lp);
        let post_p_sg = t.detach(post_p);
        let prior_lp_sg = t.detach(prior_lp);

        // KL(sg(post) || prior): gradient reaches only the prior.
        let d1 = t.sub(post_lp_sg, prior_lp);
        let m1 = t.mul(post_p_sg, d1);
        let kl_prior_side = t.row_sum(m1);
        // KL(post || sg(prior)): gradient reaches only the posterior.
        let d2 = t.sub(post_lp, prior_lp_sg);
        let m2 = t.mul(post_p, d2);
        let kl_post_side = t.row_sum(m2);

        let a = t.scale(kl_prior_side, alpha);
        let b = t.scale(kl_post_side, 1.0 - alpha);
        let combined = t.add(a, b);
        t.clamp(combined, free_nats, f64::INFINITY)
    }

    /// Scalar form of the balanced KL for a single distribution pair.
    pub fn kl_balanced(
        post: &StateDistribution,
        prior: &StateDistribution,
        alpha: f64,
        free_nats: f64,
    ) -> f64 {
        assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0,1]");
        assert!(free_nats >= 0.0, "free_nats must be >= 0");
        let mut t = Tape::new();
        let po = t.const_row(&post.logits);
        let pr = t.const_row(&prior.logits);
        let v = Self::kl_balanced_rows(&mut t, po, pr, post.classes, alpha, free_nats);
        t.value(v)[0]
    }

    fn elbo_graph<R: Rng>(
        &self,
        t: &mut Tape,
        batch: &SeqBatch,
        reward_mode: RewardMode,
        rng: &mut R,
    ) -> Result<(Var, Var, Var, Var, ModelUpdate)> {
        let cfg = &self.cfg;
        let (bsz, steps) = (batch.batch, batch.steps);
        if steps < 2 {
            return Err(Error::Contract(format!(
                "elbo_loss requires sequence length >= 2, got {steps}"
            )));
        }

        let zero = ModelState::zero(cfg);
        let uniform_s = t.constant(bsz, cfg.stoch_dim(), zero.stoch.repeat(bsz));
        let mut h = t.constant(bsz, cfg.deter_dim, vec![0.0; bsz * cfg.deter_dim]);
        let mut s = uniform_s;

        let mut recon_acc: Option<Var> = None;
        let mut reward_acc: Option<Var> = None;
        let mut kl_acc: Option<Var> = None;

        let mut states = Vec::with_capacity(steps);
        let mut embeds = Vec::with_capacity(steps);
        let mut post_logits_out = Vec::with_capacity(steps);
        let mut prior_logits_out = Vec::with_capacity(steps);

        for step in 0..steps {
            // Reset flagged rows to the zero state; also zero their action,
            // since the first observation of an episode has no predecessor.
            let keep: Vec<f64> = batch.is_first_at(step).iter().map(|&f| 1.0 - f).collect();
            let reset: Vec<f64> = batch.is_first_at(step).iter().map(|&f| f).collect();
            let keep_col = t.constant(bsz, 1, keep);
            let reset_col = t.constant(bsz, 1, reset);
            let h_kept = t.mul_col(h, keep_col);
            let s_kept = t.mul_col(s, keep_col);
            let s_reset = t.mul_col(uniform_s, reset_col);
            let s_in = t.add(s_kept, s_reset);
            let a_raw = t.constant(bsz, cfg.action_dim, batch.action_at(step, cfg.action_dim).to_vec());
            let a_in = t.mul_col(a_raw, keep_col);

            let h2 = self.step_deter_t(t, h_kept, s_in, a_in);
            let prior_logits = self.prior_logits_t(t, h2);
            let obs = t.constant(bsz, cfg.obs_dim, batch.obs_at(step, cfg.obs_dim).to_vec());
            let embed = self.embed_t(t, obs);
            let post_logits = self.post_logits_t(t, h2, embed);

            check_finite(t.value(prior_logits), "prior")?;
            check_finite(t.value(post_logits), "posterior")?;

            let sample = self.latent_from_logits(t, post_logits, LatentMode::Sample, rng);
            let feat = t.concat_cols(h2, sample);

            // Reconstruction: unit-variance Gaussian NLL up to constants.
            let dec = self.decode_t(t, feat);
            let diff = t.sub(dec, obs);
            let sq = t.square(diff);
            let rs = t.row_sum(sq);
            let recon_rows = t.scale(rs, 0.5);

            // Reward likelihood.
            let reward_rows = match reward_mode {
                RewardMode::Ignore => None,
                RewardMode::Train | RewardMode::TrainStopGrad => {
                    let feat_in = if reward_mode == RewardMode::TrainStopGrad {
                        t.detach(feat)
                    } else {
                        feat
                    };
                    let pred = self.reward_t(t, feat_in);
                    let target = t.constant(bsz, 1, batch.reward_at(step).to_vec());
                    let d = t.sub(pred, target);
                    let sq = t.square(d);
                    Some(t.scale(sq, 0.5))
                }
            };

            let kl_rows = Self::kl_balanced_rows(
                t,
                post_logits,
                prior_logits,
                cfg.classes,
                cfg.kl_alpha,
                cfg.free_nats,
            );

            recon_acc = Some(match recon_acc {
                None => recon_rows,
                Some(acc) => t.add(acc, recon_rows),
            });
            if let Some(r) = reward_rows {
                reward_acc = Some(match reward_acc {
                    None => r,
                    Some(acc) => t.add(acc, r),
                });
            }
            kl_acc = Some(match kl_acc {
                None => kl_rows,
                Some(acc) => t.add(acc, kl_rows),
            });

            // Detached copies for downstream consumers.
            let hv = t.value(h2);
            let sv = t.value(sample);
            let mut row_states = Vec::with_capacity(bsz);
            for b in 0..bsz {
                row_states.push(ModelState {
                    deter: hv[b * cfg.deter_dim..(b + 1) * cfg.deter_dim].to_vec(),
                    stoch: sv[b * cfg.stoch_dim()..(b + 1) * cfg.stoch_dim()].to_vec(),
                });
            }
            states.push(row_states);
            embeds.push(t.value(embed).to_vec());
            post_logits_out.push(t.value(post_logits).to_vec());
            prior_logits_out.push(t.value(prior_logits).to_vec());

            h = h2;
            s = sample;
        }

        let denom = 1.0 / (bsz * steps) as f64;
        let recon_sum = t.sum(recon_acc.unwrap());
        let recon = t.scale(recon_sum, denom);
        let reward = match reward_acc {
            Some(acc) => {
                let s = t.sum(acc);
                t.scale(s, denom)
            }
            None => t.const_scalar(0.0),
        };
        let kl_sum = t.sum(kl_acc.unwrap());
        let kl = t.scale(kl_sum, denom);

        let kl_scaled = t.scale(kl, cfg.kl_scale);
        let partial = t.add(recon, reward);
        let total = t.add(partial, kl_scaled);

        let breakdown = ElboBreakdown {
            recon: t.value_scalar(recon),
            reward_nll: t.value_scalar(reward),
            kl: t.value_scalar(kl),
            kl_scale: cfg.kl_scale,
            total: t.value_scalar(total),
        };
        let update = ModelUpdate {
            breakdown,
            states,
            embeds,
            post_logits: post_logits_out,
            prior_logits: prior_logits_out,
        };
        Ok((total, recon, reward, kl, update))
    }

    /// Evaluate the ELBO without touching parameters.
    pub fn elbo_loss<R: Rng>(
        &self,
        batch: &SeqBatch,
        reward_mode: RewardMode,
        rng: &mut R,
    ) -> Result<ModelUpdate> {
        let mut t = Tape::new();
        let (_, _, _, _, update) = self.elbo_graph(&mut t, batch, reward_mode, rng)?;
        Ok(update)
    }

    /// One gradient step on the ELBO.
    pub fn train_batch<R: Rng>(
        &mut self,
        batch: &SeqBatch,
        reward_mode: RewardMode,
        rng: &mut R,
    ) -> Result<ModelUpdate> {
        let mut t = Tape::new();
        let (total, _, _, _, update) = self.elbo_graph(&mut t, batch, reward_mode, rng)?;
        if !update.breakdown.total.is_finite() {
            return Err(Error::Diverged(format!(
                "model loss = {}",
                update.breakdown.total
            )));
        }
        let grads = t.backward(total)?;
        self.opt.step(&mut self.store, &grads)?;
        Ok(update)
    }

    /// Regress the auxiliary intrinsic-reward head onto precomputed targets.
    /// Inputs are plain values, so no gradient can reach the rest of the
    /// model. Returns the regression loss.
    pub fn train_intrinsic_head(&mut self, feats: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
        assert_eq!(feats.len(), targets.len());
        if feats.is_empty() {
            return Ok(0.0);
        }
        let d = self.cfg.state_dim();
        let n = feats.len();
        let mut flat = Vec::with_capacity(n * d);
        for f in feats {
            assert_eq!(f.len(), d);
            flat.extend_from_slice(f);
        }
        let mut t = Tape::new();
        let x = t.constant(n, d, flat);
        let pred = self.intr_reward_t(&mut t, x);
        let target = t.constant(n, 1, targets.to_vec());
        let diff = t.sub(pred, target);
        let sq = t.square(diff);
        let loss = t.mean(sq);
        let value = t.value_scalar(loss);
        let grads = t.backward(loss)?;
        self.intr_opt.step(&mut self.intr_store, &grads)?;
        Ok(value)
    }

    // ---- imagination -----------------------------------------------------------

    /// Roll the prior dynamics forward under a policy; no observations are
    /// read. The policy closure maps current features [S, state_dim] to
    /// actions [S, action_dim] on the same tape, so gradients can flow
    /// through the full unroll. The rollout RNG is threaded through to the
    /// policy so a single stream drives both latents and action noise.
    pub fn imagine_on_tape<R: Rng>(
        &self,
        t: &mut Tape,
        starts: &[ModelState],
        horizon: usize,
        latent: LatentMode,
        mut policy: impl FnMut(&mut Tape, Var, &mut R) -> Var,
        rng: &mut R,
    ) -> Rollout {
        assert!(horizon >= 1, "imagine: horizon must be >= 1");
        let cfg = &self.cfg;
        let n = starts.len();
        let mut hdata = Vec::with_capacity(n * cfg.deter_dim);
        let mut sdata = Vec::with_capacity(n * cfg.stoch_dim());
        for st in starts {
            hdata.extend_from_slice(&st.deter);
            sdata.extend_from_slice(&st.stoch);
        }
        let mut h = t.constant(n, cfg.deter_dim, hdata);
        let mut s = t.constant(n, cfg.stoch_dim(), sdata);
        let start_feat = t.concat_cols(h, s);

        let mut feats = Vec::with_capacity(horizon);
        let mut deters = Vec::with_capacity(horizon);
        let mut actions = Vec::with_capacity(horizon);
        let mut feat = start_feat;
        for _ in 0..horizon {
            let a = policy(t, feat, rng);
            debug_assert_eq!(t.cols(a), cfg.action_dim);
            let h2 = self.step_deter_t(t, h, s, a);
            let logits = self.prior_logits_t(t, h2);
            let s2 = self.latent_from_logits(t, logits, latent, rng);
            feat = t.concat_cols(h2, s2);
            feats.push(feat);
            deters.push(h2);
            actions.push(a);
            h = h2;
            s = s2;
        }
        Rollout { start_feat, feats, deters, actions }
    }

    // ---- serialization -----------------------------------------------------------

    /// All model parameters (including the intrinsic head) as one record
    /// group.
    pub fn to_group(&self) -> Group {
        let mut g = Group::from_store(&self.store);
        g.tensors.extend(Group::from_store(&self.intr_store).tensors);
        g
    }

    pub fn load_group(&mut self, group: &Group) -> Result<()> {
        group.apply_to_store("model", &mut self.store)?;
        group.apply_to_store("model", &mut self.intr_store)?;
        Ok(())
    }

    /// Bitwise snapshot of every parameter tensor, for tests.
    pub fn dump(&self) -> Vec<(String, Tensor)> {
        let mut d = self.store.dump();
        d.extend(self.intr_store.dump());
        d
    }

    pub fn decoder_param_ids(&self) -> Vec<ndgrad::ParamId> {
        self.decoder.param_ids()
    }

    pub fn posterior_param_ids(&self) -> Vec<ndgrad::ParamId> {
        self.post_net.param_ids()
    }

    /// Optimizer state handles for checkpointing.
    pub fn opt_state(&self) -> ((Vec<Tensor>, Vec<Tensor>, u64), (Vec<Tensor>, Vec<Tensor>, u64)) {
        (self.opt.state(), self.intr_opt.state())
    }

    pub fn restore_opt_state(
        &mut self,
        main: (Vec<Tensor>, Vec<Tensor>, u64),
        intr: (Vec<Tensor>, Vec<Tensor>, u64),
    ) {
        self.opt.restore(main.0, main.1, main.2);
        self.intr_opt.restore(intr.0, intr.1, intr.2);
    }
}

fn check_finite(values: &[f64], component: &str) -> Result<()> {
    if values.iter().any(|v| v.is_nan()) {
        Err(Error::NanOutput { component: component.to_string() })
    } else {
        Ok(())
    }
}
