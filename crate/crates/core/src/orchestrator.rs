//! Training loops: single-environment MBPO on offline data, the latent
//! two-environment loop, the pooled baseline, evaluation and best-policy
//! selection.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datastore::{evaluate_policy, Batch, DataError, ReplayBuffer, Transition};
use crate::envsim::{make_env, EnvError, EnvSpec, Environment, Family, Perturbation, Policy, Role};
use crate::latentspace::{pooled_dynamics_update, LatentConfig, LatentError, LatentLossReport, LatentModel};
use crate::numgrad::{Array, NumError};
use crate::sacpolicy::{ActMode, Agent, AgentPolicy, SacConfig};
use crate::worldmodel::{
    model_rollout, train_ensemble, EnsembleModel, ModelConfig, ModelError, PredictMode, Rollout,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("offline dataset has {got} transitions, at least {needed} are needed")]
    DatasetTooSmall { needed: usize, got: usize },
    #[error("empty evaluation history")]
    EmptyHistory,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Latent,
    PooledBaseline,
    OfflineOnly,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Latent => "latent",
            Mode::PooledBaseline => "pooled_baseline",
            Mode::OfflineOnly => "offline_only",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "latent" => Ok(Mode::Latent),
            "pooled_baseline" => Ok(Mode::PooledBaseline),
            "offline_only" => Ok(Mode::OfflineOnly),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Single-environment MBPO on the offline dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase1Config {
    pub sac_updates: usize,
    /// Fresh model rollouts are generated every this many updates.
    pub rollout_interval: usize,
    pub rollout_starts: usize,
    /// Fraction of every SAC batch drawn from the offline data.
    pub real_ratio: f64,
    pub model_buffer_capacity: usize,
    /// Intermediate evaluations every this many updates; 0 disables them.
    pub eval_every: usize,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            sac_updates: 5000,
            rollout_interval: 250,
            rollout_starts: 400,
            real_ratio: 0.5,
            model_buffer_capacity: 50_000,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub mode: Mode,
    /// Outer iterations `N`.
    pub iterations: usize,
    /// Simulator steps per iteration `E`.
    pub env_steps: usize,
    /// Rollout starts per simulator step `M`.
    pub rollouts_per_step: usize,
    /// SAC updates per simulator step `G`.
    pub grad_steps: usize,
    /// Rollout depth `k`.
    pub rollout_depth: usize,
    /// Starts are pushed through the model in chunks of this many rows.
    pub rollout_batch_size: usize,
    pub offline_path: Option<PathBuf>,
    pub sim: EnvSpec,
    pub real: EnvSpec,
    pub latent: LatentConfig,
    pub model: ModelConfig,
    pub sac: SacConfig,
    pub phase1: Phase1Config,
    /// Model updates per iteration and their combined batch size.
    pub model_batches: usize,
    pub model_batch_size: usize,
    /// Share of each model batch drawn from the offline data.
    pub offline_fraction: f64,
    /// Pooled baseline only: when false the model sees simulator data alone.
    pub use_offline: bool,
    /// Simulator transitions collected before the first iteration.
    pub env_warmup_steps: usize,
    pub model_buffer_capacity: usize,
    pub eval_episodes: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Latent,
            iterations: 50,
            env_steps: 100,
            rollouts_per_step: 16,
            grad_steps: 5,
            rollout_depth: 3,
            rollout_batch_size: 64,
            offline_path: None,
            sim: EnvSpec::new(Family::Pendulum, Perturbation::Gravity, 1.05, Role::Sim),
            real: EnvSpec::base(Family::Pendulum, Role::Real),
            latent: LatentConfig::default(),
            model: ModelConfig::default(),
            sac: SacConfig::default(),
            phase1: Phase1Config::default(),
            model_batches: 20,
            model_batch_size: 256,
            offline_fraction: 0.5,
            use_offline: true,
            env_warmup_steps: 256,
            model_buffer_capacity: 100_000,
            eval_episodes: 10,
            eval_every: 5,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("iterations", self.iterations),
            ("env_steps", self.env_steps),
            ("rollouts_per_step", self.rollouts_per_step),
            ("grad_steps", self.grad_steps),
            ("rollout_depth", self.rollout_depth),
            ("rollout_batch_size", self.rollout_batch_size),
            ("model_batches", self.model_batches),
            ("model_batch_size", self.model_batch_size),
            ("eval_episodes", self.eval_episodes),
            ("eval_every", self.eval_every),
            ("env_warmup_steps", self.env_warmup_steps),
            ("model_buffer_capacity", self.model_buffer_capacity),
            ("phase1.sac_updates", self.phase1.sac_updates),
            ("phase1.rollout_interval", self.phase1.rollout_interval),
            ("phase1.rollout_starts", self.phase1.rollout_starts),
            ("phase1.model_buffer_capacity", self.phase1.model_buffer_capacity),
            ("sac.batch_size", self.sac.batch_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                v.push(format!("{name} must be at least 1"));
            }
        }
        for (name, spec) in [("sim", &self.sim), ("real", &self.real)] {
            if let Err(e) = spec.validate() {
                v.push(format!("{name}: {e}"));
            }
        }
        if self.sim.role != Role::Sim {
            v.push("sim.role must be sim".into());
        }
        if self.real.role != Role::Real {
            v.push("real.role must be real".into());
        }
        if self.sim.family != self.real.family {
            v.push("sim and real must share an environment family".into());
        }
        if !(0.0..=1.0).contains(&self.phase1.real_ratio) {
            v.push("phase1.real_ratio must be in [0, 1]".into());
        }
        let f = self.offline_fraction;
        if !(f > 0.0 && f < 1.0) {
            v.push("offline_fraction must be in (0, 1)".into());
        } else if ((self.model_batch_size as f64) * f).round() as usize == 0
            || ((self.model_batch_size as f64) * f).round() as usize >= self.model_batch_size
        {
            v.push("model_batch_size too small for offline_fraction".into());
        }
        if let Err(e) = self.model.validate() {
            v.push(format!("model: {e}"));
        }
        if let Err(e) = self.latent.weights.validate() {
            v.push(format!("latent.weights: {e}"));
        }
        let obs = self.sim.family.obs_dim();
        if self.latent.resolved_dim(obs) < obs {
            v.push("latent.dim_latent must be at least the observation dimension".into());
        }
        if self.latent.frozen_identity && self.latent.dim_latent.is_some_and(|d| d != obs) {
            v.push("latent.frozen_identity needs dim_latent equal to the observation dimension".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(v))
        }
    }

    /// Rows of each model batch taken from the offline data.
    pub fn offline_rows(&self) -> usize {
        match (self.mode, self.use_offline) {
            (Mode::PooledBaseline, false) => 0,
            _ => ((self.model_batch_size as f64) * self.offline_fraction).round() as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub sim_return: f64,
    pub real_return: f64,
    pub sum: f64,
    pub policy: String,
    /// Seed of the shared evaluation stream; re-evaluating the saved policy
    /// with it reproduces the returns exactly.
    #[serde(default)]
    pub eval_seed: u64,
}

impl EvalRecord {
    pub fn new(iteration: usize, sim_return: f64, real_return: f64) -> Self {
        Self {
            iteration,
            sim_return,
            real_return,
            sum: sim_return + real_return,
            policy: format!("policy-{iteration:04}"),
            eval_seed: 0,
        }
    }

    pub fn with_seed(self, eval_seed: u64) -> Self {
        Self { eval_seed, ..self }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Mean model loss over the iteration's model updates.
    pub model_loss: f64,
    /// Mean latent loss components, latent mode only.
    pub latent: Option<LatentLossReport>,
    pub critic_loss: f64,
    pub alpha: f64,
    pub skipped_updates: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bookkeeping {
    pub env_warmup: usize,
    pub env_transitions: usize,
    pub model_insertions: u64,
    /// Rollout transitions lost to non-finite predictions.
    pub lost_transitions: u64,
    pub truncated_starts: u64,
    pub sim_rows_sampled: u64,
    pub offline_rows_sampled: u64,
}

impl Bookkeeping {
    /// `|D_env| == warmup + N·E` and `insertions == N·E·M·k − lost`.
    pub fn check(&self, config: &TrainerConfig) -> Result<(), String> {
        let steps = (config.iterations * config.env_steps) as u64;
        let expected_env = self.env_warmup as u64 + steps;
        if self.env_transitions as u64 != expected_env {
            return Err(format!(
                "env buffer holds {} transitions, expected {expected_env}",
                self.env_transitions
            ));
        }
        let planned = steps * (config.rollouts_per_step * config.rollout_depth) as u64;
        if self.model_insertions + self.lost_transitions != planned {
            return Err(format!(
                "{} model insertions + {} lost != {planned}",
                self.model_insertions, self.lost_transitions
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainerConfig,
    pub code_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub history: Vec<IterationLog>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub bookkeeping: Bookkeeping,
    pub wall_clock_secs: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(config: &TrainerConfig, mode: Mode) -> Self {
        Self {
            config: config.clone(),
            code_hash: code_hash(),
            seed: config.seed,
            mode,
            history: Vec::new(),
            evals: Vec::new(),
            best: None,
            bookkeeping: Bookkeeping::default(),
            wall_clock_secs: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

const SOURCES: [&str; 14] = [
    include_str!("lib.rs"),
    include_str!("numgrad/mod.rs"),
    include_str!("numgrad/adam.rs"),
    include_str!("numgrad/array.rs"),
    include_str!("numgrad/gaussian.rs"),
    include_str!("numgrad/graph.rs"),
    include_str!("numgrad/mlp.rs"),
    include_str!("envsim.rs"),
    include_str!("datastore.rs"),
    include_str!("worldmodel.rs"),
    include_str!("latentspace.rs"),
    include_str!("sacpolicy.rs"),
    include_str!("orchestrator.rs"),
    include_str!("gapmetrics.rs"),
];

/// SHA-256 over the library sources, identifying the code version.
pub fn code_hash() -> String {
    let mut h = Sha256::new();
    for s in SOURCES {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `iteration,sim_return,real_return,sum` rows with a header.
pub fn eval_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("iteration,sim_return,real_return,sum\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration, r.sim_return, r.real_return, r.sum
        ));
    }
    out
}

/// Per-iteration training log; latent loss columns are empty outside
/// latent mode.
pub fn history_csv(history: &[IterationLog]) -> String {
    let mut out = String::from(
        "iteration,model_loss,critic_loss,alpha,skipped_updates,pred_sim,pred_real,recon_sim,recon_real,corr\n",
    );
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{}",
            h.iteration, h.model_loss, h.critic_loss, h.alpha, h.skipped_updates
        ));
        match &h.latent {
            Some(l) => out.push_str(&format!(
                ",{},{},{},{},{}\n",
                l.pred_sim, l.pred_real, l.recon_sim, l.recon_real, l.corr
            )),
            None => out.push_str(",,,,,\n"),
        }
    }
    out
}

/// Record with the largest `sum`; the earliest wins ties.
pub fn select_best(history: &[EvalRecord]) -> Result<&EvalRecord, RunError> {
    let mut best: Option<&EvalRecord> = None;
    for r in history {
        if best.is_none_or(|b| r.sum > b.sum) {
            best = Some(r);
        }
    }
    best.ok_or(RunError::EmptyHistory)
}

/// How observations reach the policy.
#[derive(Clone, Copy)]
pub enum Encoder<'a> {
    Identity,
    Latent(&'a LatentModel, Role),
}

impl Encoder<'_> {
    pub fn encode(&self, obs: &Array) -> Array {
        match self {
            Encoder::Identity => obs.clone(),
            Encoder::Latent(m, side) => m.encode(*side, obs).expect("observation width matches"),
        }
    }
}

/// An agent acting on encoded observations.
pub struct EncodedPolicy<'a> {
    pub agent: &'a Agent,
    pub encoder: Encoder<'a>,
    pub mode: ActMode,
}

impl Policy for EncodedPolicy<'_> {
    fn act(&self, observation: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let z = self.encoder.encode(&Array::row_vector(observation.to_vec()));
        self.agent
            .act(z.data(), self.mode, rng)
            .expect("encoded width matches agent")
    }
}

/// Mean undiscounted return of deterministic actions over `episodes`
/// episodes, on an RNG stream derived from `seed` only.
pub fn evaluate(
    agent: &Agent,
    spec: &EnvSpec,
    encoder: Encoder<'_>,
    episodes: usize,
    seed: u64,
) -> Result<f64, RunError> {
    let env = make_env(spec)?;
    let policy = EncodedPolicy {
        agent,
        encoder,
        mode: ActMode::Deterministic,
    };
    Ok(evaluate_policy(&env, &policy, episodes.max(1), seed)?.mean)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const PHASE1_STREAM: u64 = 1;
const PHASE2_STREAM: u64 = 2;
const LATENT_INIT_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

/// Output of single-environment training on the offline data.
#[derive(Clone, Debug)]
pub struct Phase1 {
    pub model: EnsembleModel,
    pub agent: Agent,
    pub manifest: RunManifest,
}

/// Standard MBPO on the offline dataset: fit the ensemble, then alternate
/// short branched rollouts from offline states with SAC updates on a mix of
/// offline and model data. This is also the offline-only baseline.
pub fn phase1_single_env(config: &TrainerConfig, offline: &[Transition]) -> Result<Phase1, RunError> {
    config.validate()?;
    let started = Instant::now();
    let needed = 10 * config.model.batch_size;
    if offline.len() < needed {
        return Err(RunError::DatasetTooSmall {
            needed,
            got: offline.len(),
        });
    }
    let mut rng = stream(config.seed, PHASE1_STREAM);
    let mut eval_rng = stream(config.seed, EVAL_STREAM);
    let env = make_env(&config.real)?;
    let (model, report) = train_ensemble(offline, &config.model, &mut rng)?;
    let mut agent = Agent::new(
        env.obs_dim(),
        env.act_dim(),
        env.action_bound(),
        config.sac.clone(),
        &mut rng,
    );
    let p = &config.phase1;
    let data = ReplayBuffer::from_transitions(offline.len(), offline.iter().cloned());
    let mut model_buf = ReplayBuffer::new(p.model_buffer_capacity);
    let mut manifest = RunManifest::new(config, Mode::OfflineOnly);
    let batch = config.sac.batch_size;
    let real_rows = ((batch as f64) * p.real_ratio).round() as usize;
    let mut log = IterationLog {
        model_loss: mean(&report.elites.iter().map(|&e| report.final_nll[e]).collect::<Vec<_>>()),
        ..Default::default()
    };
    let mut critic = Vec::new();
    for u in 0..p.sac_updates {
        if u % p.rollout_interval == 0 {
            let idx = data.sample_indices(p.rollout_starts, &mut rng)?;
            let starts = Batch::from_refs(idx.iter().map(|&i| data.get(i).unwrap())).s;
            let policy = AgentPolicy {
                agent: &agent,
                mode: ActMode::Stochastic,
            };
            let out = model_rollout(&model, &policy, &starts, config.rollout_depth, PredictMode::Sample, &mut rng)?;
            manifest.bookkeeping.model_insertions += out.transitions.len() as u64;
            manifest.bookkeeping.truncated_starts += out.truncated as u64;
            model_buf.extend(out.transitions);
        }
        let b = if model_buf.is_empty() || real_rows >= batch {
            data.sample_arrays(batch, &mut rng)?
        } else if real_rows == 0 {
            model_buf.sample_arrays(batch, &mut rng)?
        } else {
            data.sample_arrays(real_rows, &mut rng)?
                .concat(&model_buf.sample_arrays(batch - real_rows, &mut rng)?)
        };
        let r = agent.sac_update(&b, &mut rng)?;
        if r.skipped {
            log.skipped_updates += 1;
        } else {
            critic.push(r.critic_loss);
        }
        let done = u + 1;
        if p.eval_every > 0 && done % p.eval_every == 0 && done < p.sac_updates {
            let seed = eval_rng.random::<u64>();
            let sim_return = evaluate(&agent, &config.sim, Encoder::Identity, config.eval_episodes, seed)?;
            let real_return = evaluate(&agent, &config.real, Encoder::Identity, config.eval_episodes, seed)?;
            manifest.evals.push(EvalRecord::new(done, sim_return, real_return).with_seed(seed));
        }
    }
    log.critic_loss = mean(&critic);
    log.alpha = agent.alpha();
    manifest.history.push(log);
    let seed = rng.random::<u64>();
    let sim_return = evaluate(&agent, &config.sim, Encoder::Identity, config.eval_episodes, seed)?;
    let real_return = evaluate(&agent, &config.real, Encoder::Identity, config.eval_episodes, seed)?;
    let record = EvalRecord::new(p.sac_updates, sim_return, real_return).with_seed(seed);
    manifest.best = Some(record.clone());
    manifest.evals.push(record);
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(Phase1 {
        model,
        agent,
        manifest,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// The model driving phase-2 rollouts.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)] // one value per run; boxing buys nothing
pub enum Dynamics {
    Latent(LatentModel),
    Pooled(EnsembleModel),
}

impl Dynamics {
    pub fn encoder(&self, side: Role) -> Encoder<'_> {
        match self {
            Dynamics::Latent(m) => Encoder::Latent(m, side),
            Dynamics::Pooled(_) => Encoder::Identity,
        }
    }

    pub fn latent(&self) -> Option<&LatentModel> {
        match self {
            Dynamics::Latent(m) => Some(m),
            Dynamics::Pooled(_) => None,
        }
    }

    fn state_dim(&self) -> usize {
        match self {
            Dynamics::Latent(m) => m.dim_latent(),
            Dynamics::Pooled(m) => m.obs_dim(),
        }
    }

    fn update(&mut self, sim: &Batch, real: Option<&Batch>) -> Result<(f64, Option<LatentLossReport>), RunError> {
        match self {
            Dynamics::Latent(m) => {
                let real = real.expect("latent updates need offline rows");
                let r = m.latent_update(sim, real)?;
                Ok((r.total, (!r.skipped).then_some(r)))
            }
            Dynamics::Pooled(m) => {
                let batches: Vec<&Batch> = std::iter::once(sim).chain(real).collect();
                Ok((pooled_dynamics_update(m, &batches)?.unwrap_or(f64::NAN), None))
            }
        }
    }

    fn rollout(&self, agent: &Agent, starts: &Array, k: usize, rng: &mut dyn RngCore) -> Result<Rollout, RunError> {
        let policy = AgentPolicy {
            agent,
            mode: ActMode::Stochastic,
        };
        Ok(match self {
            Dynamics::Latent(m) => m.latent_rollout(&policy, starts, Role::Sim, k, PredictMode::Sample, rng)?,
            Dynamics::Pooled(m) => model_rollout(m, &policy, starts, k, PredictMode::Sample, rng)?,
        })
    }
}

/// Everything a phase-2 run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub agent: Agent,
    pub best_agent: Agent,
    /// Encoders as they were when `best_agent` was evaluated.
    pub best_latent: Option<LatentModel>,
    pub dynamics: Dynamics,
    pub env_buffer: ReplayBuffer,
}

/// The two-environment loop with encoders, latent dynamics and `m`.
pub fn run_latent_training(
    config: &TrainerConfig,
    offline: &[Transition],
    phase1: &Phase1,
) -> Result<RunOutcome, RunError> {
    let mut init_rng = stream(config.seed, LATENT_INIT_STREAM);
    let model = LatentModel::init_from_single(&phase1.model, Role::Real, config.latent.clone(), &mut init_rng)?;
    run_phase2(config, offline, phase1, Mode::Latent, Dynamics::Latent(model))
}

/// The same loop without a latent space: one ensemble on raw observations,
/// trained on simulator and offline batches.
pub fn run_pooled_baseline(
    config: &TrainerConfig,
    offline: &[Transition],
    phase1: &Phase1,
) -> Result<RunOutcome, RunError> {
    let model = phase1.model.padded(phase1.model.obs_dim());
    run_phase2(config, offline, phase1, Mode::PooledBaseline, Dynamics::Pooled(model))
}

fn run_phase2(
    config: &TrainerConfig,
    offline: &[Transition],
    phase1: &Phase1,
    mode: Mode,
    mut dynamics: Dynamics,
) -> Result<RunOutcome, RunError> {
    let config = &TrainerConfig {
        mode,
        ..config.clone()
    };
    config.validate()?;
    if offline.is_empty() {
        return Err(RunError::DatasetTooSmall { needed: 1, got: 0 });
    }
    let started = Instant::now();
    let mut rng = stream(config.seed, PHASE2_STREAM);
    let sim_env = make_env(&config.sim)?;
    let obs_dim = sim_env.obs_dim();
    let mut agent = phase1.agent.pad_input(dynamics.state_dim() - obs_dim);
    let data = ReplayBuffer::from_transitions(offline.len(), offline.iter().cloned());
    let n_env = config.env_warmup_steps + config.iterations * config.env_steps;
    let mut env_buf = ReplayBuffer::new(n_env);
    let mut model_buf = ReplayBuffer::new(config.model_buffer_capacity);
    let mut manifest = RunManifest::new(config, mode);
    let mut best_agent = agent.clone();
    let mut best_latent = dynamics.latent().cloned();

    let mut state = sim_env.reset(&mut rng);
    for _ in 0..config.env_warmup_steps {
        state = collect_step(&sim_env, &agent, &dynamics, state, &mut env_buf, &mut rng)?;
    }
    manifest.bookkeeping.env_warmup = config.env_warmup_steps;

    let real_rows = config.offline_rows();
    let sim_rows = config.model_batch_size - real_rows;
    let (m, k) = (config.rollouts_per_step, config.rollout_depth);
    for it in 1..=config.iterations {
        let mut log = IterationLog {
            iteration: it,
            ..Default::default()
        };
        let mut totals = Vec::with_capacity(config.model_batches);
        let mut parts: Vec<LatentLossReport> = Vec::new();
        for _ in 0..config.model_batches {
            let sim = env_buf.sample_arrays(sim_rows, &mut rng)?;
            let real = if real_rows > 0 {
                Some(data.sample_arrays(real_rows, &mut rng)?)
            } else {
                None
            };
            manifest.bookkeeping.sim_rows_sampled += sim_rows as u64;
            manifest.bookkeeping.offline_rows_sampled += real_rows as u64;
            let (total, report) = dynamics.update(&sim, real.as_ref())?;
            if total.is_finite() {
                totals.push(total);
            } else {
                log.skipped_updates += 1;
            }
            parts.extend(report);
        }
        log.model_loss = mean(&totals);
        if !parts.is_empty() {
            let avg = |f: fn(&LatentLossReport) -> f64| mean(&parts.iter().map(f).collect::<Vec<_>>());
            log.latent = Some(LatentLossReport {
                pred_sim: avg(|r| r.pred_sim),
                pred_real: avg(|r| r.pred_real),
                recon_sim: avg(|r| r.recon_sim),
                recon_real: avg(|r| r.recon_real),
                corr: avg(|r| r.corr),
                total: avg(|r| r.total),
                skipped: false,
            });
        }

        let mut critic = Vec::new();
        for _ in 0..config.env_steps {
            state = collect_step(&sim_env, &agent, &dynamics, state, &mut env_buf, &mut rng)?;
            let idx = env_buf.sample_indices(m, &mut rng)?;
            for chunk in idx.chunks(config.rollout_batch_size) {
                let starts = Batch::from_refs(chunk.iter().map(|&i| env_buf.get(i).unwrap())).s;
                let out = dynamics.rollout(&agent, &starts, k, &mut rng)?;
                let inserted = out.transitions.len() as u64;
                manifest.bookkeeping.model_insertions += inserted;
                manifest.bookkeeping.lost_transitions += (chunk.len() * k) as u64 - inserted;
                manifest.bookkeeping.truncated_starts += out.truncated as u64;
                model_buf.extend(out.transitions);
            }
            for _ in 0..config.grad_steps {
                if model_buf.is_empty() {
                    break;
                }
                let b = model_buf.sample_arrays(config.sac.batch_size, &mut rng)?;
                let r = agent.sac_update(&b, &mut rng)?;
                if r.skipped {
                    log.skipped_updates += 1;
                } else {
                    critic.push(r.critic_loss);
                }
            }
        }
        log.critic_loss = mean(&critic);
        log.alpha = agent.alpha();
        manifest.history.push(log);

        if it % config.eval_every == 0 || it == config.iterations {
            let seed = rng.random::<u64>();
            let sim_return = evaluate(&agent, &config.sim, dynamics.encoder(Role::Sim), config.eval_episodes, seed)?;
            let real_return = evaluate(&agent, &config.real, dynamics.encoder(Role::Real), config.eval_episodes, seed)?;
            let record = EvalRecord::new(it, sim_return, real_return).with_seed(seed);
            if manifest.best.as_ref().is_none_or(|b| record.sum > b.sum) {
                manifest.best = Some(record.clone());
                best_agent = agent.clone();
                best_latent = dynamics.latent().cloned();
            }
            manifest.evals.push(record);
        }
    }
    manifest.bookkeeping.env_transitions = env_buf.len();
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(RunOutcome {
        manifest,
        agent,
        best_agent,
        best_latent,
        dynamics,
        env_buffer: env_buf,
    })
}

/// One simulator step with the current policy acting on encoded
/// observations; the raw transition goes into `buf`.
fn collect_step(
    env: &Environment,
    agent: &Agent,
    dynamics: &Dynamics,
    state: crate::envsim::EnvState,
    buf: &mut ReplayBuffer,
    rng: &mut ChaCha8Rng,
) -> Result<crate::envsim::EnvState, RunError> {
    let policy = EncodedPolicy {
        agent,
        encoder: dynamics.encoder(Role::Sim),
        mode: ActMode::Stochastic,
    };
    let a = policy.act(&state.observation, rng);
    let out = env.step(&state, &a)?;
    buf.push(Transition {
        s: state.observation.clone(),
        a,
        r: out.reward,
        s_next: out.next_state.observation.clone(),
        done: out.done,
    });
    Ok(if out.done {
        env.reset(rng)
    } else {
        out.next_state
    })
}

/// Runs the configured mode end to end, reusing `phase1` when given.
pub fn run(config: &TrainerConfig, offline: &[Transition], phase1: Option<&Phase1>) -> Result<RunManifest, RunError> {
    let owned;
    let p1 = match phase1 {
        Some(p) => p,
        None => {
            owned = phase1_single_env(config, offline)?;
            &owned
        }
    };
    Ok(match config.mode {
        Mode::OfflineOnly => p1.manifest.clone(),
        Mode::Latent => run_latent_training(config, offline, p1)?.manifest,
        Mode::PooledBaseline => run_pooled_baseline(config, offline, p1)?.manifest,
    })
}
