//! Soft Actor-Critic with twin critics, tanh-squashed Gaussian actor and
//! learned temperature.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datastore::{Batch, ReplayBuffer, Transition};
use crate::envsim::{EnvError, Environment, Policy};
use crate::numgrad::{
    adam_step, mlp_forward, mlp_graph, softplus, AdamState, Array, Graph, MlpParams, NumError,
    Var, LOG_2PI,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub init_alpha: f64,
    /// Defaults to `-act_dim` when absent.
    pub target_entropy: Option<f64>,
    pub learn_alpha: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            batch_size: 256,
            hidden: vec![64, 64],
            log_std_min: -5.0,
            log_std_max: 2.0,
            init_alpha: 0.2,
            target_entropy: None,
            learn_alpha: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SacReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub config: SacConfig,
    obs_dim: usize,
    act_dim: usize,
    action_bound: f64,
    pub actor: MlpParams,
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
    log_alpha: f64,
    actor_opt: AdamState,
    critic_opt: AdamState,
    alpha_opt: AdamState,
}

fn layers(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

/// Bounded log-std: `lo + (hi - lo) * (tanh(raw) + 1) / 2`.
fn squash_log_std(raw: f64, lo: f64, hi: f64) -> f64 {
    lo + 0.5 * (hi - lo) * (raw.tanh() + 1.0)
}

fn squash_log_std_graph(g: &mut Graph, raw: Var, lo: f64, hi: f64) -> Var {
    let t = g.tanh(raw);
    let t = g.add_scalar(t, 1.0);
    let t = g.scale(t, 0.5 * (hi - lo));
    g.add_scalar(t, lo)
}

/// `log(1 - tanh(u)^2)` in the softplus form.
fn log_tanh_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        action_bound: f64,
        config: SacConfig,
        rng: &mut R,
    ) -> Self {
        let actor = MlpParams::new(&layers(obs_dim, &config.hidden, 2 * act_dim), rng);
        let q1 = MlpParams::new(&layers(obs_dim + act_dim, &config.hidden, 1), rng);
        let q2 = MlpParams::new(&layers(obs_dim + act_dim, &config.hidden, 1), rng);
        Self::from_parts(obs_dim, act_dim, action_bound, config, actor, q1, q2)
    }

    fn from_parts(
        obs_dim: usize,
        act_dim: usize,
        action_bound: f64,
        config: SacConfig,
        actor: MlpParams,
        q1: MlpParams,
        q2: MlpParams,
    ) -> Self {
        let log_alpha = config.init_alpha.ln();
        let actor_opt = AdamState::new(actor.tensors(), config.lr);
        let critic_tensors: Vec<Array> = q1.tensors().iter().chain(q2.tensors()).cloned().collect();
        let critic_opt = AdamState::new(&critic_tensors, config.lr);
        let alpha_opt = AdamState::new(&[Array::scalar(log_alpha)], config.lr);
        Self {
            obs_dim,
            act_dim,
            action_bound,
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            log_alpha,
            actor_opt,
            critic_opt,
            alpha_opt,
            config,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn action_bound(&self) -> f64 {
        self.action_bound
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha
    }

    pub fn set_log_alpha(&mut self, v: f64) {
        self.log_alpha = v;
    }

    pub fn target_entropy(&self) -> f64 {
        self.config
            .target_entropy
            .unwrap_or(-(self.act_dim as f64))
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite()
            && self.q1.is_finite()
            && self.q2.is_finite()
            && self.q1_target.is_finite()
            && self.q2_target.is_finite()
            && self.log_alpha.is_finite()
    }

    /// Copy that accepts `extra` additional trailing observation inputs.
    ///
    /// New input rows are zero, so the padded agent computes exactly the same
    /// function on `[obs; 0]`. Optimizer moments restart when `extra > 0`.
    pub fn pad_input(&self, extra: usize) -> Agent {
        if extra == 0 {
            return self.clone();
        }
        let pad = |m: &MlpParams, at: usize| -> MlpParams {
            let mut sizes = m.layer_sizes().to_vec();
            sizes[0] += extra;
            let w = m.weight(0);
            let mut data = Vec::with_capacity((w.rows() + extra) * w.cols());
            for r in 0..w.rows() {
                if r == at {
                    data.extend(std::iter::repeat_n(0.0, extra * w.cols()));
                }
                data.extend_from_slice(w.row(r));
            }
            if at == w.rows() {
                data.extend(std::iter::repeat_n(0.0, extra * w.cols()));
            }
            let mut tensors = m.tensors().to_vec();
            tensors[0] = Array::matrix(w.rows() + extra, w.cols(), data);
            MlpParams::from_tensors(&sizes, tensors).expect("padded shapes")
        };
        let obs = self.obs_dim;
        let mut out = Self::from_parts(
            obs + extra,
            self.act_dim,
            self.action_bound,
            self.config.clone(),
            pad(&self.actor, obs),
            pad(&self.q1, obs),
            pad(&self.q2, obs),
        );
        out.q1_target = pad(&self.q1_target, obs);
        out.q2_target = pad(&self.q2_target, obs);
        out.log_alpha = self.log_alpha;
        out
    }

    fn check_obs(&self, cols: usize) -> Result<(), NumError> {
        if cols != self.obs_dim {
            return Err(NumError::Dimension {
                layer: 0,
                expected: self.obs_dim,
                got: cols,
            });
        }
        Ok(())
    }

    /// Actions for a batch of observations.
    pub fn act_batch(
        &self,
        obs: &Array,
        mode: ActMode,
        rng: &mut dyn RngCore,
    ) -> Result<Array, NumError> {
        self.check_obs(obs.cols())?;
        let out = mlp_forward(&self.actor, obs)?;
        let (n, d) = (obs.rows(), self.act_dim);
        let mut actions = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = out.row(r);
            for j in 0..d {
                let mean = row[j];
                let u = match mode {
                    ActMode::Deterministic => mean,
                    ActMode::Stochastic => {
                        let log_std = squash_log_std(
                            row[d + j],
                            self.config.log_std_min,
                            self.config.log_std_max,
                        );
                        let eps: f64 = rng.sample(StandardNormal);
                        mean + log_std.exp() * eps
                    }
                };
                actions.push(u.tanh() * self.action_bound);
            }
        }
        Ok(Array::matrix(n, d, actions))
    }

    /// Action for one observation.
    pub fn act(
        &self,
        obs: &[f64],
        mode: ActMode,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>, NumError> {
        Ok(self
            .act_batch(&Array::row_vector(obs.to_vec()), mode, rng)?
            .into_data())
    }

    /// Squashed sample and its log-density for given standard-normal noise.
    fn sample_with_noise(&self, actor_out: &Array, eps: &Array) -> (Array, Vec<f64>) {
        let (n, d) = (actor_out.rows(), self.act_dim);
        let mut actions = Vec::with_capacity(n * d);
        let mut logp = Vec::with_capacity(n);
        let bound_term = d as f64 * self.action_bound.ln();
        for r in 0..n {
            let row = actor_out.row(r);
            let mut lp = -bound_term;
            for j in 0..d {
                let log_std =
                    squash_log_std(row[d + j], self.config.log_std_min, self.config.log_std_max);
                let e = eps.get(r, j);
                let u = row[j] + log_std.exp() * e;
                lp += -0.5 * e * e - log_std - 0.5 * LOG_2PI - log_tanh_jacobian(u);
                actions.push(u.tanh() * self.action_bound);
            }
            logp.push(lp);
        }
        (Array::matrix(n, d, actions), logp)
    }

    fn noise(&self, n: usize, rng: &mut dyn RngCore) -> Array {
        let data = (0..n * self.act_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Array::matrix(n, self.act_dim, data)
    }

    /// Soft Bellman targets `r + γ(1-d)(min Q_target(s', a') - α log π(a'|s'))`
    /// for next-state noise `eps`.
    pub fn critic_targets(&self, batch: &Batch, eps: &Array) -> Result<Array, NumError> {
        let out = mlp_forward(&self.actor, &batch.s_next)?;
        let (a_next, logp) = self.sample_with_noise(&out, eps);
        let sa = batch.s_next.concat_cols(&a_next);
        let t1 = mlp_forward(&self.q1_target, &sa)?;
        let t2 = mlp_forward(&self.q2_target, &sa)?;
        let alpha = self.alpha();
        let y: Vec<f64> = (0..batch.len())
            .map(|i| {
                let soft = t1.data()[i].min(t2.data()[i]) - alpha * logp[i];
                batch.r.data()[i] + self.config.gamma * (1.0 - batch.done.data()[i]) * soft
            })
            .collect();
        Ok(Array::matrix(batch.len(), 1, y))
    }

    /// One SAC step on a batch: critics, actor, temperature, then targets.
    pub fn sac_update(&mut self, batch: &Batch, rng: &mut dyn RngCore) -> Result<SacReport, NumError> {
        if batch.is_empty() {
            return Err(NumError::Shape("empty SAC batch".into()));
        }
        self.check_obs(batch.s.cols())?;
        let n = batch.len();
        let eps_next = self.noise(n, rng);
        let eps_now = self.noise(n, rng);
        let y = self.critic_targets(batch, &eps_next)?;
        let mut report = SacReport {
            alpha: self.alpha(),
            ..Default::default()
        };
        if !y.is_finite() {
            report.skipped = true;
            return Ok(report);
        }

        // critics
        let mut critic_tensors: Vec<Array> =
            self.q1.tensors().iter().chain(self.q2.tensors()).cloned().collect();
        let split = self.q1.tensors().len();
        let mut g = Graph::new();
        let vars: Vec<Var> = critic_tensors.iter().map(|t| g.param(t.clone())).collect();
        let s = g.constant(batch.s.clone());
        let a = g.constant(batch.a.clone());
        let yv = g.constant(y);
        let loss = critic_loss_graph(&mut g, &vars[..split], &vars[split..], s, a, yv);
        report.critic_loss = g.scalar(loss);
        let mut grads = match g.backward(loss) {
            Ok(gr) => gr,
            Err(_) => {
                report.skipped = true;
                return Ok(report);
            }
        };
        let gvec: Vec<Array> = vars
            .iter()
            .zip(&critic_tensors)
            .map(|(&v, t)| grads.take_or_zeros(v, t))
            .collect();
        adam_step(&mut critic_tensors, &gvec, &mut self.critic_opt)?;
        let (t1, t2) = critic_tensors.split_at(split);
        self.q1.tensors_mut().clone_from_slice(t1);
        self.q2.tensors_mut().clone_from_slice(t2);

        // actor
        let alpha = self.alpha();
        let mut g = Graph::new();
        let actor_vars = self.actor.bind(&mut g, true);
        let q1_vars = self.q1.bind(&mut g, false);
        let q2_vars = self.q2.bind(&mut g, false);
        let s = g.constant(batch.s.clone());
        let e = g.constant(eps_now);
        let (loss, logp) = actor_loss_graph(
            &mut g,
            &actor_vars,
            &q1_vars,
            &q2_vars,
            s,
            e,
            alpha,
            self.action_bound,
            (self.config.log_std_min, self.config.log_std_max),
        );
        report.actor_loss = g.scalar(loss);
        let logp_vals = g.value(logp).clone();
        report.entropy = -logp_vals.sum() / n as f64;
        let mut grads = match g.backward(loss) {
            Ok(gr) => gr,
            Err(_) => {
                report.skipped = true;
                return Ok(report);
            }
        };
        let gvec: Vec<Array> = actor_vars
            .iter()
            .zip(self.actor.tensors())
            .map(|(&v, t)| grads.take_or_zeros(v, t))
            .collect();
        adam_step(self.actor.tensors_mut(), &gvec, &mut self.actor_opt)?;

        // temperature
        if self.config.learn_alpha {
            let target = self.target_entropy();
            let (val, grad) = crate::numgrad::grad(&[Array::scalar(self.log_alpha)], |g, p| {
                let lp = g.constant(logp_vals.clone());
                Ok(alpha_loss_graph(g, p[0], lp, target))
            })?;
            report.alpha_loss = val;
            let mut la = [Array::scalar(self.log_alpha)];
            adam_step(&mut la, &grad, &mut self.alpha_opt)?;
            self.log_alpha = la[0].data()[0];
        }
        report.alpha = self.alpha();

        self.soft_target_update(self.config.tau);
        Ok(report)
    }

    /// `target <- (1 - tau) * target + tau * online` for both critics.
    pub fn soft_target_update(&mut self, tau: f64) {
        assert!(tau > 0.0 && tau <= 1.0, "tau must be in (0, 1]");
        for (target, online) in [
            (&mut self.q1_target, &self.q1),
            (&mut self.q2_target, &self.q2),
        ] {
            for (t, o) in target.tensors_mut().iter_mut().zip(online.tensors()) {
                for (x, y) in t.data_mut().iter_mut().zip(o.data()) {
                    *x = if tau == 1.0 {
                        *y
                    } else {
                        (1.0 - tau) * *x + tau * y
                    };
                }
            }
        }
    }

    /// Mean entropy estimate `-E[log π]` on a batch of observations.
    pub fn entropy(&self, obs: &Array, rng: &mut dyn RngCore) -> Result<f64, NumError> {
        let out = mlp_forward(&self.actor, obs)?;
        let eps = self.noise(obs.rows(), rng);
        let (_, logp) = self.sample_with_noise(&out, &eps);
        Ok(-logp.iter().sum::<f64>() / obs.rows() as f64)
    }
}

/// `mean((Q1(s,a) - y)^2) + mean((Q2(s,a) - y)^2)`.
pub fn critic_loss_graph(g: &mut Graph, q1: &[Var], q2: &[Var], s: Var, a: Var, y: Var) -> Var {
    let sa = g.concat_cols(s, a);
    let p1 = mlp_graph(g, q1, sa);
    let p2 = mlp_graph(g, q2, sa);
    let d1 = g.sub(p1, y);
    let d2 = g.sub(p2, y);
    let s1 = g.square(d1);
    let s2 = g.square(d2);
    let m1 = g.mean(s1);
    let m2 = g.mean(s2);
    g.add(m1, m2)
}

/// Reparameterized actor objective `mean(α log π(a|s) - min(Q1, Q2)(s, a))`.
///
/// Returns the loss node and the per-row log-density node.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss_graph(
    g: &mut Graph,
    actor: &[Var],
    q1: &[Var],
    q2: &[Var],
    s: Var,
    eps: Var,
    alpha: f64,
    bound: f64,
    log_std_range: (f64, f64),
) -> (Var, Var) {
    let d = g.value(eps).cols();
    let out = mlp_graph(g, actor, s);
    let mean = g.slice_cols(out, 0, d);
    let raw = g.slice_cols(out, d, 2 * d);
    let log_std = squash_log_std_graph(g, raw, log_std_range.0, log_std_range.1);
    let std = g.exp(log_std);
    let noise = g.mul(std, eps);
    let u = g.add(mean, noise);
    let squashed = g.tanh(u);
    let action = g.scale(squashed, bound);

    // log N(u; mean, std) = -0.5 eps^2 - log_std - 0.5 log 2π
    let e2 = g.square(eps);
    let e2 = g.scale(e2, -0.5);
    let gauss = g.sub(e2, log_std);
    let gauss = g.add_scalar(gauss, -0.5 * LOG_2PI);
    // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
    let m2u = g.scale(u, -2.0);
    let sp = g.softplus(m2u);
    let corr = g.add(u, sp);
    let corr = g.scale(corr, -2.0);
    let corr = g.add_scalar(corr, 2.0 * std::f64::consts::LN_2);
    let per_dim = g.sub(gauss, corr);
    let logp = g.sum_cols(per_dim);
    let logp = g.add_scalar(logp, -(d as f64) * bound.ln());

    let sa = g.concat_cols(s, action);
    let v1 = mlp_graph(g, q1, sa);
    let v2 = mlp_graph(g, q2, sa);
    let q = g.min(v1, v2);
    let weighted = g.scale(logp, alpha);
    let obj = g.sub(weighted, q);
    (g.mean(obj), logp)
}

/// Temperature objective `-log α · mean(log π + target_entropy)` with
/// `log π` held constant.
pub fn alpha_loss_graph(g: &mut Graph, log_alpha: Var, logp: Var, target_entropy: f64) -> Var {
    let shifted = g.add_scalar(logp, target_entropy);
    let m = g.mean(shifted);
    let prod = g.mul(log_alpha, m);
    g.neg(prod)
}

/// Adapter running an [`Agent`] as an environment [`Policy`].
pub struct AgentPolicy<'a> {
    pub agent: &'a Agent,
    pub mode: ActMode,
}

impl Policy for AgentPolicy<'_> {
    fn act(&self, observation: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.agent
            .act(observation, self.mode, rng)
            .expect("observation width matches agent")
    }
}

impl crate::worldmodel::BatchPolicy for AgentPolicy<'_> {
    fn act_batch(&self, obs: &Array, rng: &mut dyn RngCore) -> Array {
        self.agent
            .act_batch(obs, self.mode, rng)
            .expect("observation width matches agent")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineSacConfig {
    pub sac: SacConfig,
    /// Uniform-random steps before learning starts.
    pub warmup_steps: usize,
    pub updates_per_step: usize,
    pub buffer_capacity: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for OnlineSacConfig {
    fn default() -> Self {
        Self {
            sac: SacConfig::default(),
            warmup_steps: 1000,
            updates_per_step: 1,
            buffer_capacity: 1_000_000,
            eval_every: 1000,
            eval_episodes: 5,
        }
    }
}

/// Model-free SAC on a live environment.
///
/// `on_eval(step, agent, buffer)` runs every `eval_every` steps and stops
/// training when it returns `true`. It should evaluate on its own RNG stream
/// so that training randomness is unaffected.
pub fn train_sac_online<R, F>(
    env: &Environment,
    config: &OnlineSacConfig,
    max_steps: usize,
    rng: &mut R,
    mut on_eval: F,
) -> Result<(Agent, ReplayBuffer), EnvError>
where
    R: RngCore,
    F: FnMut(usize, &Agent, &ReplayBuffer) -> bool,
{
    let mut agent = Agent::new(
        env.obs_dim(),
        env.act_dim(),
        env.action_bound(),
        config.sac.clone(),
        rng,
    );
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut state = env.reset(rng);
    for step in 1..=max_steps {
        let action = if step <= config.warmup_steps {
            (0..env.act_dim())
                .map(|_| rng.random_range(-env.action_bound()..=env.action_bound()))
                .collect()
        } else {
            agent
                .act(&state.observation, ActMode::Stochastic, rng)
                .expect("agent sized for env")
        };
        let out = env.step(&state, &action)?;
        buffer.push(Transition {
            s: state.observation.clone(),
            a: action,
            r: out.reward,
            s_next: out.next_state.observation.clone(),
            done: out.done,
        });
        state = if out.done {
            env.reset(rng)
        } else {
            out.next_state
        };
        if step > config.warmup_steps {
            for _ in 0..config.updates_per_step {
                let batch = buffer
                    .sample_arrays(config.sac.batch_size, rng)
                    .expect("buffer is non-empty");
                agent.sac_update(&batch, rng).expect("batch sized for agent");
            }
        }
        if config.eval_every > 0 && step % config.eval_every == 0 && on_eval(step, &agent, &buffer)
        {
            break;
        }
    }
    Ok((agent, buffer))
}

#[derive(Serialize, Deserialize)]
struct AgentMeta {
    obs_dim: usize,
    act_dim: usize,
    action_bound: f64,
    config: SacConfig,
    log_alpha: f64,
    actor_sizes: Vec<usize>,
    critic_sizes: Vec<usize>,
}

/// Writes the actor, both critics, their targets and the temperature.
/// Optimizer moments are not stored; a loaded agent restarts them.
pub fn save_agent(path: &std::path::Path, agent: &Agent) -> Result<(), crate::datastore::DataError> {
    let meta = AgentMeta {
        obs_dim: agent.obs_dim,
        act_dim: agent.act_dim,
        action_bound: agent.action_bound,
        config: agent.config.clone(),
        log_alpha: agent.log_alpha,
        actor_sizes: agent.actor.layer_sizes().to_vec(),
        critic_sizes: agent.q1.layer_sizes().to_vec(),
    };
    let arrays: Vec<&Array> = [&agent.actor, &agent.q1, &agent.q2, &agent.q1_target, &agent.q2_target]
        .into_iter()
        .flat_map(|m| m.tensors())
        .collect();
    crate::datastore::save_arrays(path, "agent", &meta, &arrays)
}

pub fn load_agent(path: &std::path::Path) -> Result<Agent, crate::datastore::DataError> {
    let (meta, arrays): (AgentMeta, Vec<Array>) = crate::datastore::load_arrays(path, "agent")?;
    let na = 2 * (meta.actor_sizes.len() - 1);
    let nc = 2 * (meta.critic_sizes.len() - 1);
    if arrays.len() != na + 4 * nc {
        return Err(crate::datastore::DataError::Manifest("bad tensor count".into()));
    }
    let mut rest = arrays.into_iter();
    let mut take = |sizes: &[usize], n: usize| MlpParams::from_tensors(sizes, rest.by_ref().take(n).collect());
    let actor = take(&meta.actor_sizes, na)?;
    let q1 = take(&meta.critic_sizes, nc)?;
    let q2 = take(&meta.critic_sizes, nc)?;
    let q1_target = take(&meta.critic_sizes, nc)?;
    let q2_target = take(&meta.critic_sizes, nc)?;
    let mut agent = Agent::from_parts(meta.obs_dim, meta.act_dim, meta.action_bound, meta.config, actor, q1, q2);
    agent.q1_target = q1_target;
    agent.q2_target = q2_target;
    agent.log_alpha = meta.log_alpha;
    agent.alpha_opt = AdamState::new(&[Array::scalar(meta.log_alpha)], agent.config.lr);
    Ok(agent)
}
