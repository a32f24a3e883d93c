//! Replay buffers, offline dataset generation and the on-disk container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "S2RL" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON)
//!        | payload_len: u64 | payload_len x f64 | fnv1a64(payload bytes): u64
//! ```

use std::collections::VecDeque;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsim::{
    make_env, run_episode, EnvError, EnvSpec, Environment, Policy, Role, ScriptedExpert,
    UniformPolicy,
};
use crate::numgrad::{Array, NumError};
use crate::sacpolicy::{train_sac_online, ActMode, Agent, AgentPolicy, OnlineSacConfig};

pub const MAGIC: &[u8; 4] = b"S2RL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an S2RL container")]
    BadMagic,
    #[error("format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.r.is_finite()
            && self.s.iter().chain(&self.a).chain(&self.s_next).all(|v| v.is_finite())
    }

    /// Row layout `[s, a, r, s_next, done]` used in dataset payloads.
    fn write_row(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.s);
        out.extend_from_slice(&self.a);
        out.push(self.r);
        out.extend_from_slice(&self.s_next);
        out.push(if self.done { 1.0 } else { 0.0 });
    }

    fn read_row(row: &[f64], obs: usize, act: usize) -> Self {
        Self {
            s: row[..obs].to_vec(),
            a: row[obs..obs + act].to_vec(),
            r: row[obs + act],
            s_next: row[obs + act + 1..2 * obs + act + 1].to_vec(),
            done: row[2 * obs + act + 1] != 0.0,
        }
    }
}

pub fn row_width(obs_dim: usize, act_dim: usize) -> usize {
    2 * obs_dim + act_dim + 2
}

/// Column-stacked view of a list of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub s: Array,
    pub a: Array,
    pub r: Array,
    pub s_next: Array,
    pub done: Array,
}

impl Batch {
    pub fn from_transitions(ts: &[Transition]) -> Self {
        Self::from_refs(ts.iter())
    }

    pub fn from_refs<'a>(ts: impl ExactSizeIterator<Item = &'a Transition> + Clone) -> Self {
        let n = ts.len();
        let first = ts.clone().next();
        let (obs, act) = first.map(|t| (t.s.len(), t.a.len())).unwrap_or((0, 0));
        let mut s = Vec::with_capacity(n * obs);
        let mut a = Vec::with_capacity(n * act);
        let mut r = Vec::with_capacity(n);
        let mut s_next = Vec::with_capacity(n * obs);
        let mut done = Vec::with_capacity(n);
        for t in ts {
            s.extend_from_slice(&t.s);
            a.extend_from_slice(&t.a);
            r.push(t.r);
            s_next.extend_from_slice(&t.s_next);
            done.push(if t.done { 1.0 } else { 0.0 });
        }
        Self {
            s: Array::matrix(n, obs, s),
            a: Array::matrix(n, act, a),
            r: Array::matrix(n, 1, r),
            s_next: Array::matrix(n, obs, s_next),
            done: Array::matrix(n, 1, done),
        }
    }

    pub fn len(&self) -> usize {
        self.r.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-wise concatenation.
    pub fn concat(&self, other: &Batch) -> Batch {
        if self.is_empty() {
            return other.clone();
        }
        if other.is_empty() {
            return self.clone();
        }
        let stack = |x: &Array, y: &Array| {
            let mut d = x.data().to_vec();
            d.extend_from_slice(y.data());
            Array::matrix(x.rows() + y.rows(), x.cols(), d)
        };
        Batch {
            s: stack(&self.s, &other.s),
            a: stack(&self.a, &other.a),
            r: stack(&self.r, &other.r),
            s_next: stack(&self.s_next, &other.s_next),
            done: stack(&self.done, &other.done),
        }
    }
}

/// Bounded FIFO store of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            inserted: 0,
        }
    }

    pub fn from_transitions(capacity: usize, ts: impl IntoIterator<Item = Transition>) -> Self {
        let mut b = Self::new(capacity);
        b.extend(ts);
        b
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of pushes ever made, including evicted items.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.inserted += 1;
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        for t in ts {
            self.push(t);
        }
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Transition> + Clone {
        self.items.iter()
    }

    pub fn to_vec(&self) -> Vec<Transition> {
        self.items.iter().cloned().collect()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Uniform indices with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, DataError> {
        if self.is_empty() {
            return Err(DataError::EmptyBuffer);
        }
        let n = self.len();
        Ok((0..batch_size).map(|_| rng.random_range(0..n)).collect())
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Transition>, DataError> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect())
    }

    /// Like [`ReplayBuffer::sample_batch`] but column-stacked.
    pub fn sample_arrays<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Batch, DataError> {
        let idx = self.sample_indices(batch_size, rng)?;
        Ok(Batch::from_refs(idx.iter().map(|&i| &self.items[i])))
    }
}

/// Runs `n_episodes` full episodes, in order.
pub fn collect_episodes<P: Policy + ?Sized, R: RngCore>(
    env: &Environment,
    policy: &P,
    n_episodes: usize,
    rng: &mut R,
) -> Result<Vec<Transition>, EnvError> {
    let mut out = Vec::with_capacity(n_episodes * env.horizon());
    for _ in 0..n_episodes {
        let mut state = env.reset(rng);
        loop {
            let a = policy.act(&state.observation, rng);
            let step = env.step(&state, &a)?;
            out.push(Transition {
                s: state.observation,
                a,
                r: step.reward,
                s_next: step.next_state.observation.clone(),
                done: step.done,
            });
            state = step.next_state;
            if step.done {
                break;
            }
        }
    }
    Ok(out)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// FNV-1a checksum of the little-endian encoding of `payload`.
pub fn payload_checksum(payload: &[f64]) -> u64 {
    fnv1a64(&payload_bytes(payload))
}

fn payload_bytes(payload: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_container(manifest: &str, payload: &[f64]) -> Vec<u8> {
    let body = payload_bytes(payload);
    let mut out = Vec::with_capacity(32 + manifest.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&fnv1a64(&body).to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let needed = self.pos.checked_add(n).ok_or(DataError::Truncated {
            needed: usize::MAX,
            found: self.bytes.len(),
        })?;
        if needed > self.bytes.len() {
            return Err(DataError::Truncated {
                needed,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..needed];
        self.pos = needed;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a container, verifying magic, version and checksum.
pub fn decode_container(bytes: &[u8]) -> Result<(String, Vec<f64>), DataError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4).map_err(|_| DataError::BadMagic)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mlen = c.u64()? as usize;
    let manifest = std::str::from_utf8(c.take(mlen)?)
        .map_err(|e| DataError::Manifest(e.to_string()))?
        .to_owned();
    let plen = c.u64()? as usize;
    let body = c.take(plen.checked_mul(8).ok_or(DataError::Truncated {
        needed: usize::MAX,
        found: bytes.len(),
    })?)?;
    let stored = c.u64()?;
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(DataError::Checksum { stored, computed });
    }
    let payload = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((manifest, payload))
}

pub fn write_container(path: &Path, manifest: &str, payload: &[f64]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, encode_container(manifest, payload))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(String, Vec<f64>), DataError> {
    decode_container(&std::fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct ArraysManifest<M> {
    kind: String,
    shapes: Vec<Vec<usize>>,
    meta: M,
}

/// Stores a list of arrays plus typed metadata; used for model checkpoints.
pub fn save_arrays<M: Serialize>(
    path: &Path,
    kind: &str,
    meta: &M,
    arrays: &[&Array],
) -> Result<(), DataError> {
    let manifest = ArraysManifest {
        kind: kind.to_owned(),
        shapes: arrays.iter().map(|a| a.shape().to_vec()).collect(),
        meta,
    };
    let text = serde_json::to_string(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    let payload: Vec<f64> = arrays.iter().flat_map(|a| a.data().iter().copied()).collect();
    write_container(path, &text, &payload)
}

pub fn load_arrays<M: for<'de> Deserialize<'de>>(
    path: &Path,
    kind: &str,
) -> Result<(M, Vec<Array>), DataError> {
    let (text, payload) = read_container(path)?;
    let manifest: ArraysManifest<M> =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.kind != kind {
        return Err(DataError::Manifest(format!(
            "expected a {kind} checkpoint, found {}",
            manifest.kind
        )));
    }
    let total: usize = manifest.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if total != payload.len() {
        return Err(DataError::Dimension {
            what: "checkpoint payload",
            expected: total,
            got: payload.len(),
        });
    }
    let mut off = 0;
    let mut arrays = Vec::with_capacity(manifest.shapes.len());
    for shape in manifest.shapes {
        let n: usize = shape.iter().product();
        arrays.push(Array::new(shape, payload[off..off + n].to_vec())?);
        off += n;
    }
    Ok((manifest.meta, arrays))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Medium,
    MediumReplay,
    Random,
    Expert,
}

impl std::fmt::Display for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Generator::Medium => "medium",
            Generator::MediumReplay => "medium-replay",
            Generator::Random => "random",
            Generator::Expert => "expert",
        })
    }
}

impl std::str::FromStr for Generator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "medium" => Ok(Generator::Medium),
            "medium-replay" | "medium_replay" => Ok(Generator::MediumReplay),
            "random" => Ok(Generator::Random),
            "expert" => Ok(Generator::Expert),
            other => Err(format!("unknown dataset quality {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

impl ReturnStats {
    pub fn from_returns(returns: &[f64]) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            episodes: returns.len(),
        }
    }
}

/// Undiscounted returns of `episodes` episodes on a dedicated RNG stream.
pub fn evaluate_policy<P: Policy + ?Sized>(
    env: &Environment,
    policy: &P,
    episodes: usize,
    seed: u64,
) -> Result<ReturnStats, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let returns = (0..episodes)
        .map(|_| run_episode(env, policy, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReturnStats::from_returns(&returns))
}

/// Expert and uniform-random reference returns for one environment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub expert: f64,
    pub random: f64,
}

impl ReferenceReturns {
    pub fn compute(env: &Environment, episodes: usize, seed: u64) -> Result<Self, EnvError> {
        let expert = evaluate_policy(env, &ScriptedExpert::new(env), episodes, seed)?.mean;
        let uniform = UniformPolicy {
            dim: env.act_dim(),
            bound: env.action_bound(),
        };
        let random = evaluate_policy(env, &uniform, episodes, seed)?.mean;
        Ok(Self { expert, random })
    }

    /// `(R - R_random) / (R_expert - R_random)`; 0 is random, 1 is expert.
    pub fn normalized(&self, ret: f64) -> f64 {
        (ret - self.random) / (self.expert - self.random)
    }

    /// Inverse of [`ReferenceReturns::normalized`].
    pub fn denormalized(&self, score: f64) -> f64 {
        self.random + score * (self.expert - self.random)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub env_spec: EnvSpec,
    pub generator: Generator,
    pub transition_count: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub policy_return: ReturnStats,
    pub reference: Option<ReferenceReturns>,
    pub threshold_fraction: Option<f64>,
    pub training_steps: usize,
    pub format_version: u32,
    pub content_checksum: u64,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn row_width(&self) -> usize {
        row_width(self.obs_dim, self.act_dim)
    }
}

/// Writes transitions; fills in count, dims, version and checksum.
pub fn save_dataset(
    path: &Path,
    transitions: &[Transition],
    manifest: &DatasetManifest,
) -> Result<DatasetManifest, DataError> {
    let mut m = manifest.clone();
    if let Some(t) = transitions.first() {
        m.obs_dim = t.s.len();
        m.act_dim = t.a.len();
    }
    let width = m.row_width();
    let mut payload = Vec::with_capacity(transitions.len() * width);
    for t in transitions {
        if t.s.len() != m.obs_dim || t.s_next.len() != m.obs_dim || t.a.len() != m.act_dim {
            return Err(DataError::Dimension {
                what: "transition",
                expected: width,
                got: row_width(t.s.len(), t.a.len()),
            });
        }
        t.write_row(&mut payload);
    }
    m.transition_count = transitions.len();
    m.format_version = FORMAT_VERSION;
    m.content_checksum = payload_checksum(&payload);
    let text = serde_json::to_string(&m).map_err(|e| DataError::Manifest(e.to_string()))?;
    write_container(path, &text, &payload)?;
    Ok(m)
}

pub fn load_dataset(path: &Path) -> Result<(Vec<Transition>, DatasetManifest), DataError> {
    let (text, payload) = read_container(path)?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if m.content_checksum != payload_checksum(&payload) {
        return Err(DataError::Checksum {
            stored: m.content_checksum,
            computed: payload_checksum(&payload),
        });
    }
    let width = m.row_width();
    if payload.len() != m.transition_count * width {
        return Err(DataError::Dimension {
            what: "payload rows",
            expected: m.transition_count * width,
            got: payload.len(),
        });
    }
    let ts = payload
        .chunks_exact(width)
        .map(|row| Transition::read_row(row, m.obs_dim, m.act_dim))
        .collect();
    Ok((ts, m))
}

/// Loads and checks that the stored dimensions match `spec`.
pub fn load_dataset_for(
    path: &Path,
    spec: &EnvSpec,
) -> Result<(Vec<Transition>, DatasetManifest), DataError> {
    let (ts, m) = load_dataset(path)?;
    if m.obs_dim != spec.family.obs_dim() {
        return Err(DataError::Dimension {
            what: "observation",
            expected: spec.family.obs_dim(),
            got: m.obs_dim,
        });
    }
    if m.act_dim != spec.family.act_dim() {
        return Err(DataError::Dimension {
            what: "action",
            expected: spec.family.act_dim(),
            got: m.act_dim,
        });
    }
    Ok((ts, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub sac: OnlineSacConfig,
    /// Normalized score at which the training policy counts as medium.
    pub threshold_fraction: f64,
    pub max_train_steps: usize,
    pub reference_episodes: usize,
    pub stats_episodes: usize,
    pub reference_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            sac: OnlineSacConfig::default(),
            threshold_fraction: 0.5,
            max_train_steps: 100_000,
            reference_episodes: 20,
            stats_episodes: 20,
            reference_seed: 7,
        }
    }
}

/// A generated dataset together with the frozen medium policy.
#[derive(Clone, Debug)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub manifest: DatasetManifest,
    pub policy: Agent,
}

impl OfflineDataset {
    pub fn save(&mut self, path: &Path) -> Result<(), DataError> {
        self.manifest = save_dataset(path, &self.transitions, &self.manifest)?;
        Ok(())
    }
}

/// Trains SAC on the real environment until it reaches the medium threshold,
/// then emits either rollouts of the frozen policy (medium) or the first
/// `size` transitions of the training replay buffer (medium-replay).
pub fn make_offline_dataset<R: RngCore>(
    spec: &EnvSpec,
    quality: Generator,
    size: usize,
    config: &GenConfig,
    rng: &mut R,
) -> Result<OfflineDataset, DataError> {
    if spec.role != Role::Real {
        return Err(DataError::Generation(
            "offline datasets come from the real environment".into(),
        ));
    }
    if !matches!(quality, Generator::Medium | Generator::MediumReplay) {
        return Err(DataError::Generation(format!(
            "{quality} datasets are not generated by training"
        )));
    }
    let env = make_env(spec)?;
    let reference =
        ReferenceReturns::compute(&env, config.reference_episodes, config.reference_seed)?;
    let target = reference.denormalized(config.threshold_fraction);

    let mut online = config.sac.clone();
    online.buffer_capacity = online.buffer_capacity.max(size);
    let mut medium: Option<(Agent, usize)> = None;
    let mut best = f64::NEG_INFINITY;
    let eval_seed = rng.next_u64();
    let (_, buffer) = train_sac_online(
        &env,
        &online,
        config.max_train_steps,
        rng,
        |step, agent, buffer| {
            let policy = AgentPolicy {
                agent,
                mode: ActMode::Stochastic,
            };
            let ret = evaluate_policy(&env, &policy, config.sac.eval_episodes, eval_seed ^ step as u64)
                .map(|s| s.mean)
                .unwrap_or(f64::NEG_INFINITY);
            best = best.max(ret);
            if medium.is_none() && ret >= target {
                medium = Some((agent.clone(), step));
            }
            medium.is_some() && (quality == Generator::Medium || buffer.len() >= size)
        },
    )?;
    let Some((policy, steps)) = medium else {
        return Err(DataError::Generation(format!(
            "no medium policy within {} steps: best return {best:.2}, target {target:.2} \
             (expert {:.2}, random {:.2})",
            config.max_train_steps, reference.expert, reference.random
        )));
    };

    let frozen = AgentPolicy {
        agent: &policy,
        mode: ActMode::Stochastic,
    };
    let transitions = match quality {
        Generator::Medium => {
            let episodes = size.div_ceil(env.horizon());
            let mut ts = collect_episodes(&env, &frozen, episodes, rng)?;
            ts.truncate(size);
            ts
        }
        _ => {
            if buffer.len() < size {
                return Err(DataError::Generation(format!(
                    "replay buffer holds {} transitions, {size} requested",
                    buffer.len()
                )));
            }
            buffer.iter().take(size).cloned().collect()
        }
    };
    let stats = evaluate_policy(&env, &frozen, config.stats_episodes, rng.next_u64())?;
    let manifest = DatasetManifest {
        env_spec: spec.clone(),
        generator: quality,
        transition_count: transitions.len(),
        obs_dim: env.obs_dim(),
        act_dim: env.act_dim(),
        policy_return: stats,
        reference: Some(reference),
        threshold_fraction: Some(config.threshold_fraction),
        training_steps: steps,
        format_version: FORMAT_VERSION,
        content_checksum: 0,
    };
    Ok(OfflineDataset {
        transitions,
        manifest,
        policy,
    })
}
