//! Shared latent MDP: per-environment encoders and decoders, the cross-domain
//! map `m`, latent ensemble dynamics and the three training objectives.
//!
//! Encoders, decoders and `m` are residual networks whose output layer starts
//! at zero, so right after initialization they are exactly
//! `p(s) = [s; 0]`, `q(z) = z[..obs]` and `m(z) = z`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{Batch, DataError, Transition};
use crate::envsim::{Environment, Role};
use crate::numgrad::{
    adam_step, mlp_forward, mlp_graph, AdamState, Array, Gradients, Graph, MlpParams, NumError,
    Var,
};
use crate::worldmodel::{model_rollout, BatchPolicy, EnsembleModel, ModelError, PredictMode, Rollout};

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("latent dimension {dim_latent} is below the observation dimension {obs_dim}")]
    LatentTooSmall { dim_latent: usize, obs_dim: usize },
    #[error("frozen identity encoders need dim_latent == obs_dim")]
    FrozenNeedsObsDim,
    #[error("{what} has width {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_pred: f64,
    pub w_recon: f64,
    pub w_corr: f64,
    /// Fraction of the correspondence gradient that reaches the encoders.
    pub grad_to_encoders_from_corr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_pred: 1.0,
            w_recon: 1.0,
            w_corr: 1.0,
            grad_to_encoders_from_corr: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let ws = [self.w_pred, self.w_recon, self.w_corr];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("loss weights must be finite and non-negative".into());
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err("at least one loss weight must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.grad_to_encoders_from_corr) {
            return Err("grad_to_encoders_from_corr must be in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    /// Defaults to `obs_dim + 2`.
    pub dim_latent: Option<usize>,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub weights: LossWeights,
    /// Encoders and decoders are the exact identity and never trained.
    pub frozen_identity: bool,
    /// Keep encoder parameters fixed while training everything else.
    pub freeze_encoders: bool,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            dim_latent: None,
            hidden: vec![64],
            lr: 1e-3,
            weights: LossWeights::default(),
            frozen_identity: false,
            freeze_encoders: false,
        }
    }
}

impl LatentConfig {
    pub fn resolved_dim(&self, obs_dim: usize) -> usize {
        if self.frozen_identity {
            obs_dim
        } else {
            self.dim_latent.unwrap_or(obs_dim + 2)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentLossReport {
    pub pred_sim: f64,
    pub pred_real: f64,
    pub recon_sim: f64,
    pub recon_real: f64,
    pub corr: f64,
    pub total: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentModel {
    obs_dim: usize,
    dim_latent: usize,
    pub config: LatentConfig,
    pub init_side: Role,
    pub p_sim: MlpParams,
    pub p_real: MlpParams,
    pub q_sim: MlpParams,
    pub q_real: MlpParams,
    pub m: MlpParams,
    pub dynamics: EnsembleModel,
    #[serde(skip)]
    opt: Option<AdamState>,
}

fn residual_net<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> MlpParams {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    let mut net = MlpParams::new(&sizes, rng);
    let last = net.num_layers() - 1;
    net.weight_mut(last).data_mut().fill(0.0);
    net.bias_mut(last).data_mut().fill(0.0);
    net
}

/// `[x; 0]` widened to `width` columns.
fn pad_cols(x: &Array, width: usize) -> Array {
    if x.cols() == width {
        return x.clone();
    }
    x.concat_cols(&Array::zeros(&[x.rows(), width - x.cols()]))
}

fn pad_graph(g: &mut Graph, x: Var, width: usize) -> Var {
    let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
    if cols == width {
        return x;
    }
    let zeros = g.constant(Array::zeros(&[rows, width - cols]));
    g.concat_cols(x, zeros)
}

struct Bound {
    p_sim: Vec<Var>,
    p_real: Vec<Var>,
    q_sim: Vec<Var>,
    q_real: Vec<Var>,
    m: Vec<Var>,
    dynamics: Vec<Vec<Var>>,
}

struct LossNodes {
    pred_sim: Var,
    pred_real: Var,
    recon_sim: Option<Var>,
    recon_real: Option<Var>,
    corr: Var,
    total: Var,
}

/// Inputs and gradient-stopped targets for the latent dynamics on one batch.
fn dynamics_targets(z: &Array, z_next: &Array, r: &Array) -> Array {
    let delta = z_next.zip_map(z, |n, s| n - s);
    delta.concat_cols(r)
}

/// Dynamics loss on pre-encoded constant inputs, shared by the pooled
/// baseline so that both paths run identical arithmetic.
fn pred_graph(
    g: &mut Graph,
    dynamics: &EnsembleModel,
    vars: &[Vec<Var>],
    z: Var,
    a: &Array,
    y: Array,
) -> Var {
    let av = g.constant(a.clone());
    let x = g.concat_cols(z, av);
    let yv = g.constant(y);
    dynamics.ensemble_nll_graph(g, vars, x, yv)
}

/// One Adam step of a non-latent ensemble on the summed per-source losses of
/// `batches`, built exactly like the latent prediction objective under
/// identity encoders. Returns `None` when the loss is not finite.
pub fn pooled_dynamics_update(
    model: &mut EnsembleModel,
    batches: &[&Batch],
) -> Result<Option<f64>, NumError> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let mut parts = Vec::new();
    for &b in batches {
        if b.is_empty() {
            continue;
        }
        let y = dynamics_targets(&b.s, &b.s_next, &b.r);
        let z = g.constant(b.s.clone());
        parts.push(pred_graph(&mut g, model, &vars, z, &b.a, y));
    }
    let Some(&first) = parts.first() else {
        return Ok(None);
    };
    let loss = parts[1..].iter().fold(first, |acc, &p| g.add(acc, p));
    let value = g.scalar(loss);
    match g.backward(loss) {
        Ok(mut grads) if value.is_finite() => {
            model.apply_gradients(&vars, &mut grads)?;
            Ok(Some(value))
        }
        _ => Ok(None),
    }
}

impl LatentModel {
    /// Builds the latent model around a trained single-environment ensemble.
    pub fn init_from_single<R: Rng + ?Sized>(
        single: &EnsembleModel,
        side: Role,
        config: LatentConfig,
        rng: &mut R,
    ) -> Result<Self, LatentError> {
        let obs = single.obs_dim();
        let dl = config.resolved_dim(obs);
        if config.frozen_identity && config.dim_latent.is_some_and(|d| d != obs) {
            return Err(LatentError::FrozenNeedsObsDim);
        }
        if dl < obs {
            return Err(LatentError::LatentTooSmall {
                dim_latent: dl,
                obs_dim: obs,
            });
        }
        config.weights.validate().map_err(LatentError::Weights)?;
        let p = residual_net(obs, &config.hidden, dl, rng);
        let q = residual_net(dl, &config.hidden, obs, rng);
        let m = residual_net(dl, &config.hidden, dl, rng);
        Ok(Self {
            obs_dim: obs,
            dim_latent: dl,
            init_side: side,
            p_sim: p.clone(),
            p_real: p,
            q_sim: q.clone(),
            q_real: q,
            m,
            dynamics: single.padded(dl),
            opt: None,
            config,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn dim_latent(&self) -> usize {
        self.dim_latent
    }

    pub fn is_finite(&self) -> bool {
        [&self.p_sim, &self.p_real, &self.q_sim, &self.q_real, &self.m]
            .iter()
            .all(|n| n.is_finite())
            && self.dynamics.is_finite()
    }

    fn encoder(&self, side: Role) -> &MlpParams {
        match side {
            Role::Sim => &self.p_sim,
            Role::Real => &self.p_real,
        }
    }

    fn decoder(&self, side: Role) -> &MlpParams {
        match side {
            Role::Sim => &self.q_sim,
            Role::Real => &self.q_real,
        }
    }

    fn check(&self, what: &'static str, got: usize, expected: usize) -> Result<(), LatentError> {
        if got != expected {
            return Err(LatentError::Dimension {
                what,
                expected,
                got,
            });
        }
        Ok(())
    }

    pub fn encode(&self, side: Role, s: &Array) -> Result<Array, LatentError> {
        self.check("observation", s.cols(), self.obs_dim)?;
        if self.config.frozen_identity {
            return Ok(s.clone());
        }
        let out = mlp_forward(self.encoder(side), s)?;
        Ok(pad_cols(s, self.dim_latent).zip_map(&out, |a, b| a + b))
    }

    pub fn decode(&self, side: Role, z: &Array) -> Result<Array, LatentError> {
        self.check("latent state", z.cols(), self.dim_latent)?;
        if self.config.frozen_identity {
            return Ok(z.clone());
        }
        let out = mlp_forward(self.decoder(side), z)?;
        Ok(z.slice_cols(0, self.obs_dim).zip_map(&out, |a, b| a + b))
    }

    /// `m(z)`, the map from real-encoded to sim-encoded latent states.
    pub fn cross_map(&self, z: &Array) -> Result<Array, LatentError> {
        self.check("latent state", z.cols(), self.dim_latent)?;
        let out = mlp_forward(&self.m, z)?;
        Ok(z.zip_map(&out, |a, b| a + b))
    }

    /// Samples of the initial latent distribution: environment resets pushed
    /// through the matching encoder.
    pub fn initial_latent<R: Rng + ?Sized>(
        &self,
        env: &Environment,
        n: usize,
        rng: &mut R,
    ) -> Result<Array, LatentError> {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| env.reset(rng).observation).collect();
        self.encode(env.spec().role, &Array::from_rows(&rows))
    }

    fn encode_graph(&self, g: &mut Graph, p: &[Var], s: Var) -> Var {
        if self.config.frozen_identity {
            return s;
        }
        let base = pad_graph(g, s, self.dim_latent);
        let out = mlp_graph(g, p, s);
        g.add(base, out)
    }

    fn decode_graph(&self, g: &mut Graph, q: &[Var], z: Var) -> Var {
        let base = g.slice_cols(z, 0, self.obs_dim);
        let out = mlp_graph(g, q, z);
        g.add(base, out)
    }

    fn cross_graph(&self, g: &mut Graph, m: &[Var], z: Var) -> Var {
        let out = mlp_graph(g, m, z);
        g.add(z, out)
    }

    fn bind(&self, g: &mut Graph) -> Bound {
        let maps = !self.config.frozen_identity;
        let enc = maps && !self.config.freeze_encoders;
        Bound {
            p_sim: self.p_sim.bind(g, enc),
            p_real: self.p_real.bind(g, enc),
            q_sim: self.q_sim.bind(g, maps),
            q_real: self.q_real.bind(g, maps),
            m: self.m.bind(g, true),
            dynamics: self.dynamics.bind(g),
        }
    }

    fn check_batch(&self, b: &Batch) -> Result<(), LatentError> {
        if b.is_empty() {
            return Err(LatentError::EmptyBatch);
        }
        self.check("observation", b.s.cols(), self.obs_dim)?;
        self.check("next observation", b.s_next.cols(), self.obs_dim)?;
        self.check("action", b.a.cols(), self.dynamics.act_dim())
    }

    fn build(&self, g: &mut Graph, bound: &Bound, sim: &Batch, real: &Batch) -> Result<LossNodes, LatentError> {
        let w = &self.config.weights;
        let mut pred = Vec::with_capacity(2);
        let mut recon = Vec::with_capacity(2);
        for (side, b, p, q) in [
            (Role::Sim, sim, &bound.p_sim, &bound.q_sim),
            (Role::Real, real, &bound.p_real, &bound.q_real),
        ] {
            let sv = g.constant(b.s.clone());
            let z = self.encode_graph(g, p, sv);
            let y = dynamics_targets(&self.encode(side, &b.s)?, &self.encode(side, &b.s_next)?, &b.r);
            pred.push(pred_graph(g, &self.dynamics, &bound.dynamics, z, &b.a, y));

            if self.config.frozen_identity {
                recon.push(None);
                continue;
            }
            let snv = g.constant(b.s_next.clone());
            let zn = self.encode_graph(g, p, snv);
            let mut terms = Vec::with_capacity(2);
            for (latent, target) in [(z, sv), (zn, snv)] {
                let back = self.decode_graph(g, q, latent);
                let diff = g.sub(back, target);
                let sq = g.square(diff);
                let per_row = g.sum_cols(sq);
                terms.push(g.mean(per_row));
            }
            recon.push(Some(g.add(terms[0], terms[1])));
        }

        // correspondence over the observations of both batches
        let c = w.grad_to_encoders_from_corr;
        let mut corr_terms = Vec::with_capacity(2);
        for (x_sim, x_real) in [(&sim.s, &real.s), (&sim.s_next, &real.s_next)] {
            let mut obs = x_sim.data().to_vec();
            obs.extend_from_slice(x_real.data());
            let o = g.constant(Array::matrix(x_sim.rows() + x_real.rows(), self.obs_dim, obs));
            let zs = self.encode_graph(g, &bound.p_sim, o);
            let zs = g.scale_grad(zs, c);
            let zr = self.encode_graph(g, &bound.p_real, o);
            let zr = g.scale_grad(zr, c);
            let mapped = self.cross_graph(g, &bound.m, zr);
            let diff = g.sub(zs, mapped);
            let norms = g.row_norm(diff);
            corr_terms.push(g.mean(norms));
        }
        let corr = g.add(corr_terms[0], corr_terms[1]);

        let pred_sum = g.add(pred[0], pred[1]);
        let mut total = g.scale(pred_sum, w.w_pred);
        if let (Some(a), Some(b)) = (recon[0], recon[1]) {
            let rs = g.add(a, b);
            let rs = g.scale(rs, w.w_recon);
            total = g.add(total, rs);
        }
        let cs = g.scale(corr, w.w_corr);
        total = g.add(total, cs);
        Ok(LossNodes {
            pred_sim: pred[0],
            pred_real: pred[1],
            recon_sim: recon[0],
            recon_real: recon[1],
            corr,
            total,
        })
    }

    fn report(g: &Graph, n: &LossNodes) -> LatentLossReport {
        LatentLossReport {
            pred_sim: g.scalar(n.pred_sim),
            pred_real: g.scalar(n.pred_real),
            recon_sim: n.recon_sim.map_or(0.0, |v| g.scalar(v)),
            recon_real: n.recon_real.map_or(0.0, |v| g.scalar(v)),
            corr: g.scalar(n.corr),
            total: g.scalar(n.total),
            skipped: false,
        }
    }

    /// Evaluates all objectives without changing the model.
    pub fn latent_losses(&self, sim: &Batch, real: &Batch) -> Result<LatentLossReport, LatentError> {
        self.check_batch(sim)?;
        self.check_batch(real)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let nodes = self.build(&mut g, &bound, sim, real)?;
        Ok(Self::report(&g, &nodes))
    }

    /// One Adam step on every trainable parameter group.
    pub fn latent_update(&mut self, sim: &Batch, real: &Batch) -> Result<LatentLossReport, LatentError> {
        self.check_batch(sim)?;
        self.check_batch(real)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let nodes = self.build(&mut g, &bound, sim, real)?;
        let mut report = Self::report(&g, &nodes);
        let mut grads = match g.backward(nodes.total) {
            Ok(gr) if report.total.is_finite() => gr,
            _ => {
                report.skipped = true;
                return Ok(report);
            }
        };
        self.dynamics.apply_gradients(&bound.dynamics, &mut grads)?;
        self.apply_map_gradients(&bound, &mut grads)?;
        Ok(report)
    }

    fn apply_map_gradients(&mut self, bound: &Bound, grads: &mut Gradients) -> Result<(), NumError> {
        let maps = !self.config.frozen_identity;
        let enc = maps && !self.config.freeze_encoders;
        let groups: [(&mut MlpParams, &Vec<Var>, bool); 5] = [
            (&mut self.p_sim, &bound.p_sim, enc),
            (&mut self.p_real, &bound.p_real, enc),
            (&mut self.q_sim, &bound.q_sim, maps),
            (&mut self.q_real, &bound.q_real, maps),
            (&mut self.m, &bound.m, true),
        ];
        let mut params = Vec::new();
        let mut gs = Vec::new();
        let mut slots = Vec::new();
        for (gi, (net, vars, trainable)) in groups.iter().enumerate() {
            for (ti, (t, &v)) in net.tensors().iter().zip(vars.iter()).enumerate() {
                params.push(t.clone());
                gs.push(if *trainable {
                    grads.take_or_zeros(v, t)
                } else {
                    Array::zeros(t.shape())
                });
                slots.push((gi, ti, *trainable));
            }
        }
        let lr = self.config.lr;
        let opt = self.opt.get_or_insert_with(|| AdamState::new(&params, lr));
        adam_step(&mut params, &gs, opt)?;
        let [a, b, c, d, e] = groups;
        let nets = [a.0, b.0, c.0, d.0, e.0];
        for ((gi, ti, trainable), p) in slots.into_iter().zip(params) {
            if trainable {
                nets[gi].tensors_mut()[ti] = p;
            }
        }
        Ok(())
    }

    /// `k`-step rollouts through the latent dynamics from observations of
    /// the environment matching `side`.
    pub fn latent_rollout<P: BatchPolicy + ?Sized>(
        &self,
        policy: &P,
        start_observations: &Array,
        side: Role,
        k: usize,
        mode: PredictMode,
        rng: &mut dyn RngCore,
    ) -> Result<Rollout, LatentError> {
        let starts = self.encode(side, start_observations)?;
        Ok(model_rollout(&self.dynamics, policy, &starts, k, mode, rng)?)
    }
}

/// Re-expresses raw transitions in latent coordinates of `side`.
pub fn encode_transitions(
    model: &LatentModel,
    side: Role,
    ts: &[Transition],
) -> Result<Vec<Transition>, LatentError> {
    if ts.is_empty() {
        return Ok(Vec::new());
    }
    let b = Batch::from_transitions(ts);
    let z = model.encode(side, &b.s)?;
    let zn = model.encode(side, &b.s_next)?;
    Ok(ts
        .iter()
        .enumerate()
        .map(|(i, t)| Transition {
            s: z.row(i).to_vec(),
            a: t.a.clone(),
            r: t.r,
            s_next: zn.row(i).to_vec(),
            done: t.done,
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct LatentMeta {
    obs_dim: usize,
    dim_latent: usize,
    act_dim: usize,
    config: LatentConfig,
    init_side: Role,
    map_sizes: Vec<Vec<usize>>,
    model_config: crate::worldmodel::ModelConfig,
    member_sizes: Vec<usize>,
    members: usize,
    elites: Vec<usize>,
    input_norm: crate::worldmodel::Normalizer,
    output_norm: crate::worldmodel::Normalizer,
}

pub fn save_latent(path: &std::path::Path, model: &LatentModel) -> Result<(), DataError> {
    let nets = [&model.p_sim, &model.p_real, &model.q_sim, &model.q_real, &model.m];
    let d = &model.dynamics;
    let meta = LatentMeta {
        obs_dim: model.obs_dim,
        dim_latent: model.dim_latent,
        act_dim: d.act_dim(),
        config: model.config.clone(),
        init_side: model.init_side,
        map_sizes: nets.iter().map(|n| n.layer_sizes().to_vec()).collect(),
        model_config: d.config.clone(),
        member_sizes: d.members[0].layer_sizes().to_vec(),
        members: d.members.len(),
        elites: d.elites.clone(),
        input_norm: d.input_norm.clone(),
        output_norm: d.output_norm.clone(),
    };
    let mut arrays: Vec<&Array> = nets.iter().flat_map(|n| n.tensors()).collect();
    arrays.extend(d.members.iter().flat_map(|m| m.tensors()));
    crate::datastore::save_arrays(path, "latent", &meta, &arrays)
}

pub fn load_latent(path: &std::path::Path) -> Result<LatentModel, DataError> {
    let (meta, arrays): (LatentMeta, Vec<Array>) = crate::datastore::load_arrays(path, "latent")?;
    let expected: usize = meta
        .map_sizes
        .iter()
        .chain(std::iter::repeat_n(&meta.member_sizes, meta.members))
        .map(|s| 2 * s.len().saturating_sub(1))
        .sum();
    if meta.map_sizes.len() != 5 || arrays.len() != expected {
        return Err(DataError::Manifest("bad tensor count".into()));
    }
    let mut it = arrays.into_iter();
    let mut take = |sizes: &[usize]| -> Result<MlpParams, DataError> {
        let ts: Vec<Array> = it.by_ref().take(2 * (sizes.len() - 1)).collect();
        Ok(MlpParams::from_tensors(sizes, ts)?)
    };
    let mut nets = Vec::with_capacity(5);
    for s in &meta.map_sizes {
        nets.push(take(s)?);
    }
    let members = (0..meta.members)
        .map(|_| take(&meta.member_sizes))
        .collect::<Result<Vec<_>, _>>()?;
    let dynamics = EnsembleModel::from_parts(
        meta.dim_latent,
        meta.act_dim,
        meta.model_config,
        members,
        meta.elites,
        meta.input_norm,
        meta.output_norm,
    );
    let [p_sim, p_real, q_sim, q_real, m]: [MlpParams; 5] =
        nets.try_into().map_err(|_| DataError::Manifest("bad map count".into()))?;
    Ok(LatentModel {
        obs_dim: meta.obs_dim,
        dim_latent: meta.dim_latent,
        config: meta.config,
        init_side: meta.init_side,
        p_sim,
        p_real,
        q_sim,
        q_real,
        m,
        dynamics,
        opt: None,
    })
}
