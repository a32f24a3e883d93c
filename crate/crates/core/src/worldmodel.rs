//! Probabilistic ensemble of dynamics-and-reward models.
//!
//! Each member maps normalized `(s, a)` to a diagonal Gaussian over the
//! normalized target `(s' - s, r)`. Rollouts sample a uniformly chosen elite
//! member per row.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::Transition;
use crate::numgrad::{
    adam_step, gaussian_nll_graph, mlp_forward, mlp_graph, soft_clamp, soft_clamp_graph,
    AdamState, Array, Graph, MlpParams, NumError, Var, LOG_VAR_MAX, LOG_VAR_MIN,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("need at least {needed} transitions, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("every target dimension has zero variance")]
    Degenerate,
    #[error("model has not been trained")]
    Untrained,
    #[error("rollout depth must be at least 1")]
    ZeroDepth,
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub members: usize,
    pub elites: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub log_var_min: f64,
    pub log_var_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            members: 5,
            elites: 3,
            hidden: vec![64, 64],
            lr: 1e-3,
            batch_size: 256,
            holdout_fraction: 0.1,
            patience: 5,
            max_epochs: 100,
            log_var_min: LOG_VAR_MIN,
            log_var_max: LOG_VAR_MAX,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        if self.members == 0 {
            errs.push("members must be at least 1".to_owned());
        }
        if self.elites == 0 || self.elites > self.members {
            errs.push("elites must be in 1..=members".to_owned());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_owned());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            errs.push("holdout_fraction must be in [0, 1)".to_owned());
        }
        if self.log_var_min >= self.log_var_max {
            errs.push("log_var_min must be below log_var_max".to_owned());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}

/// Per-dimension affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics of the rows of `data`, std floored.
    pub fn fit(data: &Array) -> Self {
        let (n, d) = (data.rows().max(1) as f64, data.cols());
        let mut mean = vec![0.0; d];
        for r in 0..data.rows() {
            for (m, x) in mean.iter_mut().zip(data.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..data.rows() {
            for ((v, x), m) in var.iter_mut().zip(data.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n).sqrt().max(Self::STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn inv_std(&self) -> Vec<f64> {
        self.std.iter().map(|s| 1.0 / s).collect()
    }

    pub fn normalize(&self, x: &Array) -> Array {
        let inv = self.inv_std();
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), i) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&inv) {
                *v = (*v - m) * i;
            }
        }
        out
    }

    pub fn denormalize(&self, y: &Array) -> Array {
        let mut out = y.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }

    /// Same arithmetic as [`Normalizer::normalize`], recorded on `g`.
    pub fn normalize_graph(&self, g: &mut Graph, x: Var) -> Var {
        let neg_mean = g.constant(Array::row_vector(self.mean.iter().map(|m| -m).collect()));
        let inv = g.constant(Array::row_vector(self.inv_std()));
        let centered = g.add_row(x, neg_mean);
        g.mul_row(centered, inv)
    }

    /// Copy with `extra` identity coordinates inserted at `at`.
    pub fn padded(&self, at: usize, extra: usize) -> Self {
        let mut mean = self.mean.clone();
        let mut std = self.std.clone();
        mean.splice(at..at, std::iter::repeat_n(0.0, extra));
        std.splice(at..at, std::iter::repeat_n(1.0, extra));
        Self { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub s_next: Array,
    pub r: Vec<f64>,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainReport {
    /// `holdout_nll[m][e]`: holdout NLL of member `m` after epoch `e`.
    pub holdout_nll: Vec<Vec<f64>>,
    /// Holdout NLL of the parameters each member ends with.
    pub final_nll: Vec<f64>,
    pub elites: Vec<usize>,
    pub epochs: usize,
    pub stop_reason: StopReason,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleModel {
    obs_dim: usize,
    act_dim: usize,
    pub config: ModelConfig,
    pub members: Vec<MlpParams>,
    pub elites: Vec<usize>,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
    trained: bool,
    #[serde(skip)]
    opt: Option<AdamState>,
}

/// Model inputs `[s, a]` and targets `[s' - s, r]` for a list of transitions.
pub fn model_arrays(data: &[Transition]) -> (Array, Array) {
    let (o, a) = (data[0].s.len(), data[0].a.len());
    let mut x = Vec::with_capacity(data.len() * (o + a));
    let mut y = Vec::with_capacity(data.len() * (o + 1));
    for t in data {
        x.extend_from_slice(&t.s);
        x.extend_from_slice(&t.a);
        y.extend(t.s_next.iter().zip(&t.s).map(|(n, s)| n - s));
        y.push(t.r);
    }
    (
        Array::matrix(data.len(), o + a, x),
        Array::matrix(data.len(), o + 1, y),
    )
}

impl EnsembleModel {
    /// Freshly initialized, untrained ensemble with identity normalization.
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        config: ModelConfig,
        rng: &mut R,
    ) -> Self {
        let out = obs_dim + 1;
        let mut sizes = vec![obs_dim + act_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(2 * out);
        let members = (0..config.members)
            .map(|_| MlpParams::new(&sizes, rng))
            .collect();
        Self {
            obs_dim,
            act_dim,
            elites: (0..config.elites).collect(),
            members,
            input_norm: Normalizer::identity(obs_dim + act_dim),
            output_norm: Normalizer::identity(out),
            trained: false,
            opt: None,
            config,
        }
    }

    /// Assembles a trained model from parts; used when re-embedding weights.
    pub fn from_parts(
        obs_dim: usize,
        act_dim: usize,
        config: ModelConfig,
        members: Vec<MlpParams>,
        elites: Vec<usize>,
        input_norm: Normalizer,
        output_norm: Normalizer,
    ) -> Self {
        Self {
            obs_dim,
            act_dim,
            config,
            members,
            elites,
            input_norm,
            output_norm,
            trained: true,
            opt: None,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn is_finite(&self) -> bool {
        self.members.iter().all(MlpParams::is_finite)
    }

    fn out_dim(&self) -> usize {
        self.obs_dim + 1
    }

    /// Normalized mean and clamped log-variance of one member.
    pub fn member_head(&self, member: usize, x: &Array) -> Result<(Array, Array), NumError> {
        let raw = mlp_forward(&self.members[member], &self.input_norm.normalize(x))?;
        let d = self.out_dim();
        let (lo, hi) = (self.config.log_var_min, self.config.log_var_max);
        Ok((
            raw.slice_cols(0, d),
            raw.slice_cols(d, 2 * d).map(|v| soft_clamp(v, lo, hi)),
        ))
    }

    /// Denormalized mean `(s', r)` of one member.
    pub fn member_mean(&self, member: usize, s: &Array, a: &Array) -> Result<(Array, Vec<f64>), ModelError> {
        let (mean, _) = self.member_head(member, &s.concat_cols(a))?;
        let y = self.output_norm.denormalize(&mean);
        Ok(self.split_target(s, &y))
    }

    fn split_target(&self, s: &Array, y: &Array) -> (Array, Vec<f64>) {
        let o = self.obs_dim;
        let mut next = Vec::with_capacity(s.len());
        let mut r = Vec::with_capacity(s.rows());
        for i in 0..s.rows() {
            let row = y.row(i);
            next.extend(s.row(i).iter().zip(&row[..o]).map(|(x, d)| x + d));
            r.push(row[o]);
        }
        (Array::matrix(s.rows(), o, next), r)
    }

    /// One-step prediction from a uniformly chosen elite per row.
    pub fn predict(
        &self,
        s: &Array,
        a: &Array,
        mode: PredictMode,
        rng: &mut dyn RngCore,
    ) -> Result<Prediction, ModelError> {
        if !self.trained {
            return Err(ModelError::Untrained);
        }
        let n = s.rows();
        let members: Vec<usize> = (0..n)
            .map(|_| self.elites[rng.random_range(0..self.elites.len())])
            .collect();
        self.predict_with(s, a, &members, mode, rng)
    }

    /// One-step prediction with an explicit member per row.
    pub fn predict_with(
        &self,
        s: &Array,
        a: &Array,
        members: &[usize],
        mode: PredictMode,
        rng: &mut dyn RngCore,
    ) -> Result<Prediction, ModelError> {
        let x = s.concat_cols(a);
        let d = self.out_dim();
        let mut heads: Vec<Option<(Array, Array)>> = vec![None; self.members.len()];
        for &m in members {
            if heads[m].is_none() {
                heads[m] = Some(self.member_head(m, &x)?);
            }
        }
        let mut y = Vec::with_capacity(s.rows() * d);
        for (i, &m) in members.iter().enumerate() {
            let (mean, log_var) = heads[m].as_ref().unwrap();
            for j in 0..d {
                let mu = mean.get(i, j);
                y.push(match mode {
                    PredictMode::Mean => mu,
                    PredictMode::Sample => {
                        let eps: f64 = rng.sample(StandardNormal);
                        mu + (0.5 * log_var.get(i, j)).exp() * eps
                    }
                });
            }
        }
        let y = self.output_norm.denormalize(&Array::matrix(s.rows(), d, y));
        let (s_next, r) = self.split_target(s, &y);
        Ok(Prediction {
            s_next,
            r,
            members: members.to_vec(),
        })
    }

    /// Mean over rows and output dimensions of the variance of member means,
    /// in original units.
    pub fn disagreement(&self, s: &Array, a: &Array) -> Result<f64, ModelError> {
        let means = (0..self.members.len())
            .map(|m| {
                let (next, r) = self.member_mean(m, s, a)?;
                Ok(next.concat_cols(&Array::matrix(r.len(), 1, r)))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let k = means.len() as f64;
        let len = means[0].len();
        let mut total = 0.0;
        for idx in 0..len {
            let mu = means.iter().map(|m| m.data()[idx]).sum::<f64>() / k;
            total += means.iter().map(|m| (m.data()[idx] - mu).powi(2)).sum::<f64>() / k;
        }
        Ok(total / len as f64)
    }

    /// Mean NLL of one member on raw inputs `x = [s, a]` and raw targets
    /// `y = [s' - s, r]`, recorded on `g`.
    pub fn member_nll_graph(&self, g: &mut Graph, member: &[Var], x: Var, y: Var) -> Var {
        let d = self.out_dim();
        let xn = self.input_norm.normalize_graph(g, x);
        let yn = self.output_norm.normalize_graph(g, y);
        let raw = mlp_graph(g, member, xn);
        let mean = g.slice_cols(raw, 0, d);
        let lv = g.slice_cols(raw, d, 2 * d);
        let lv = soft_clamp_graph(g, lv, self.config.log_var_min, self.config.log_var_max);
        gaussian_nll_graph(g, mean, lv, yn)
    }

    /// Mean over members of their mean NLL, with `vars[m]` bound to member `m`.
    pub fn ensemble_nll_graph(&self, g: &mut Graph, vars: &[Vec<Var>], x: Var, y: Var) -> Var {
        let mut total: Option<Var> = None;
        for v in vars {
            let l = self.member_nll_graph(g, v, x, y);
            total = Some(match total {
                Some(t) => g.add(t, l),
                None => l,
            });
        }
        let total = total.expect("ensemble has members");
        g.scale(total, 1.0 / vars.len() as f64)
    }

    /// Binds every member's tensors as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<Vec<Var>> {
        self.members.iter().map(|m| m.bind(g, true)).collect()
    }

    /// Applies one Adam step to all members from gradients collected on `g`.
    pub fn apply_gradients(
        &mut self,
        vars: &[Vec<Var>],
        grads: &mut crate::numgrad::Gradients,
    ) -> Result<(), NumError> {
        let mut flat: Vec<Array> = Vec::new();
        let mut gflat: Vec<Array> = Vec::new();
        for (m, vs) in self.members.iter().zip(vars) {
            for (t, &v) in m.tensors().iter().zip(vs) {
                gflat.push(grads.take_or_zeros(v, t));
                flat.push(t.clone());
            }
        }
        let lr = self.config.lr;
        let opt = self.opt.get_or_insert_with(|| AdamState::new(&flat, lr));
        adam_step(&mut flat, &gflat, opt)?;
        let mut it = flat.into_iter();
        for m in self.members.iter_mut() {
            for t in m.tensors_mut() {
                *t = it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Holdout NLL of one member in normalized units.
    fn member_nll(&self, member: usize, x: &Array, y: &Array) -> Result<f64, NumError> {
        let (mean, lv) = self.member_head(member, x)?;
        crate::numgrad::gaussian_nll(&mean, &lv, &self.output_norm.normalize(y))
    }

    /// Copy whose state coordinates are widened to `dim_latent` with exact
    /// zero rows and columns, so predictions on `[s; 0]` reproduce this
    /// model's predictions on `s`.
    pub fn padded(&self, dim_latent: usize) -> EnsembleModel {
        let (o, a) = (self.obs_dim, self.act_dim);
        let extra = dim_latent - o;
        if extra == 0 {
            let mut m = self.clone();
            m.opt = None;
            return m;
        }
        let d_old = o + 1;
        let d_new = dim_latent + 1;
        let members = self
            .members
            .iter()
            .map(|m| {
                let mut sizes = m.layer_sizes().to_vec();
                let last = sizes.len() - 1;
                sizes[0] = dim_latent + a;
                sizes[last] = 2 * d_new;
                let mut tensors = m.tensors().to_vec();
                // input rows: [s (o) | pad | a]
                let w0 = m.weight(0);
                let mut data = Vec::with_capacity((dim_latent + a) * w0.cols());
                for r in 0..o {
                    data.extend_from_slice(w0.row(r));
                }
                data.extend(std::iter::repeat_n(0.0, extra * w0.cols()));
                for r in o..o + a {
                    data.extend_from_slice(w0.row(r));
                }
                tensors[0] = Array::matrix(dim_latent + a, w0.cols(), data);
                // output columns: [mean s (o) | pad | mean r | lv s (o) | pad | lv r]
                let remap = |row: &[f64]| -> Vec<f64> {
                    let mut out = Vec::with_capacity(2 * d_new);
                    for half in 0..2 {
                        let base = half * d_old;
                        out.extend_from_slice(&row[base..base + o]);
                        out.extend(std::iter::repeat_n(0.0, extra));
                        out.push(row[base + o]);
                    }
                    out
                };
                let li = 2 * last - 2;
                let wl = &tensors[li];
                let rows: Vec<Vec<f64>> = (0..wl.rows()).map(|r| remap(wl.row(r))).collect();
                tensors[li] = Array::from_rows(&rows);
                tensors[li + 1] = Array::row_vector(remap(tensors[li + 1].data()));
                MlpParams::from_tensors(&sizes, tensors).expect("padded member shapes")
            })
            .collect();
        let in_norm = self.input_norm.padded(o, extra);
        let out_norm = self.output_norm.padded(o, extra);
        let mut m = EnsembleModel::from_parts(
            dim_latent,
            a,
            self.config.clone(),
            members,
            self.elites.clone(),
            in_norm,
            out_norm,
        );
        m.trained = self.trained;
        m
    }
}

/// Fits the ensemble by Gaussian NLL with bootstrap resampling, a holdout
/// split and patience-based early stopping; elites are the members with the
/// lowest holdout NLL.
pub fn train_ensemble<R: Rng + ?Sized>(
    data: &[Transition],
    config: &ModelConfig,
    rng: &mut R,
) -> Result<(EnsembleModel, ModelTrainReport), ModelError> {
    let needed = 10 * config.batch_size;
    if data.len() < needed {
        return Err(ModelError::InsufficientData {
            needed,
            got: data.len(),
        });
    }
    let (x, y) = model_arrays(data);
    let out_norm = Normalizer::fit(&y);
    if out_norm.std.iter().all(|&s| s <= Normalizer::STD_FLOOR) {
        return Err(ModelError::Degenerate);
    }
    let (obs, act) = (data[0].s.len(), data[0].a.len());
    let mut model = EnsembleModel::new(obs, act, config.clone(), rng);
    model.input_norm = Normalizer::fit(&x);
    model.output_norm = out_norm;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let n_hold = ((data.len() as f64 * config.holdout_fraction).round() as usize).max(1);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let (hx, hy) = (x.gather_rows(hold_idx), y.gather_rows(hold_idx));
    let mut boots: Vec<Vec<usize>> = (0..config.members)
        .map(|_| {
            (0..train_idx.len())
                .map(|_| train_idx[rng.random_range(0..train_idx.len())])
                .collect()
        })
        .collect();

    let mut opts: Vec<AdamState> = model
        .members
        .iter()
        .map(|m| AdamState::new(m.tensors(), config.lr))
        .collect();
    let mut history = vec![Vec::new(); config.members];
    let mut best: Vec<(f64, MlpParams)> = (0..config.members)
        .map(|m| (f64::INFINITY, model.members[m].clone()))
        .collect();
    let mut stale = 0;
    let mut epochs = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    while epochs < config.max_epochs {
        epochs += 1;
        for (m, boot) in boots.iter_mut().enumerate() {
            boot.shuffle(rng);
            for chunk in boot.chunks(config.batch_size) {
                let bx = x.gather_rows(chunk);
                let by = y.gather_rows(chunk);
                let mut g = Graph::new();
                let vars = model.members[m].bind(&mut g, true);
                let xv = g.constant(bx);
                let yv = g.constant(by);
                let loss = model.member_nll_graph(&mut g, &vars, xv, yv);
                let Ok(mut grads) = g.backward(loss) else {
                    continue;
                };
                let gs: Vec<Array> = vars
                    .iter()
                    .zip(model.members[m].tensors())
                    .map(|(&v, t)| grads.take_or_zeros(v, t))
                    .collect();
                adam_step(model.members[m].tensors_mut(), &gs, &mut opts[m])?;
            }
        }
        let mut improved = false;
        for m in 0..config.members {
            let nll = model.member_nll(m, &hx, &hy)?;
            history[m].push(nll);
            let (best_nll, _) = best[m];
            let threshold = if best_nll.is_finite() {
                best_nll - 1e-4 * best_nll.abs().max(1.0)
            } else {
                f64::INFINITY
            };
            if nll.is_finite() && nll < threshold {
                best[m] = (nll, model.members[m].clone());
                improved = true;
            }
        }
        if improved {
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    let mut final_nll = Vec::with_capacity(config.members);
    for (m, (nll, params)) in best.into_iter().enumerate() {
        if nll.is_finite() {
            model.members[m] = params;
        }
        final_nll.push(model.member_nll(m, &hx, &hy)?);
    }
    let mut ranked: Vec<usize> = (0..config.members).collect();
    ranked.sort_by(|&a, &b| final_nll[a].total_cmp(&final_nll[b]));
    model.elites = ranked[..config.elites].to_vec();
    model.trained = true;
    let report = ModelTrainReport {
        holdout_nll: history,
        final_nll,
        elites: model.elites.clone(),
        epochs,
        stop_reason,
    };
    Ok((model, report))
}

/// Policy that acts on a whole batch of observations at once.
pub trait BatchPolicy {
    fn act_batch(&self, obs: &Array, rng: &mut dyn RngCore) -> Array;
}

impl<P: BatchPolicy + ?Sized> BatchPolicy for &P {
    fn act_batch(&self, obs: &Array, rng: &mut dyn RngCore) -> Array {
        (**self).act_batch(obs, rng)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    /// Starts whose rollout stopped early on a non-finite prediction.
    pub truncated: usize,
}

/// `k`-step branched rollouts from each start; transitions are grouped by
/// step, and never marked done.
pub fn model_rollout<P: BatchPolicy + ?Sized>(
    model: &EnsembleModel,
    policy: &P,
    starts: &Array,
    k: usize,
    mode: PredictMode,
    rng: &mut dyn RngCore,
) -> Result<Rollout, ModelError> {
    if k == 0 {
        return Err(ModelError::ZeroDepth);
    }
    if !model.is_trained() {
        return Err(ModelError::Untrained);
    }
    let mut out = Rollout::default();
    let mut state = starts.clone();
    for _ in 0..k {
        if state.rows() == 0 {
            break;
        }
        let actions = policy.act_batch(&state, rng);
        let pred = model.predict(&state, &actions, mode, rng)?;
        let mut keep = Vec::with_capacity(state.rows());
        for i in 0..state.rows() {
            let next = pred.s_next.row(i);
            if !pred.r[i].is_finite() || next.iter().any(|v| !v.is_finite()) {
                out.truncated += 1;
                continue;
            }
            out.transitions.push(Transition {
                s: state.row(i).to_vec(),
                a: actions.row(i).to_vec(),
                r: pred.r[i],
                s_next: next.to_vec(),
                done: false,
            });
            keep.push(i);
        }
        state = pred.s_next.gather_rows(&keep);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    obs_dim: usize,
    act_dim: usize,
    config: ModelConfig,
    layer_sizes: Vec<usize>,
    elites: Vec<usize>,
    input_norm: Normalizer,
    output_norm: Normalizer,
}

pub fn save_model(path: &std::path::Path, model: &EnsembleModel) -> Result<(), crate::datastore::DataError> {
    let meta = ModelMeta {
        obs_dim: model.obs_dim,
        act_dim: model.act_dim,
        config: model.config.clone(),
        layer_sizes: model.members[0].layer_sizes().to_vec(),
        elites: model.elites.clone(),
        input_norm: model.input_norm.clone(),
        output_norm: model.output_norm.clone(),
    };
    let arrays: Vec<&Array> = model.members.iter().flat_map(|m| m.tensors()).collect();
    crate::datastore::save_arrays(path, "ensemble", &meta, &arrays)
}

pub fn load_model(path: &std::path::Path) -> Result<EnsembleModel, crate::datastore::DataError> {
    let (meta, arrays): (ModelMeta, Vec<Array>) = crate::datastore::load_arrays(path, "ensemble")?;
    let per = 2 * (meta.layer_sizes.len() - 1);
    if per == 0 || arrays.len() % per != 0 {
        return Err(crate::datastore::DataError::Manifest("bad tensor count".into()));
    }
    let members = arrays
        .chunks(per)
        .map(|c| MlpParams::from_tensors(&meta.layer_sizes, c.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EnsembleModel::from_parts(
        meta.obs_dim,
        meta.act_dim,
        meta.config,
        members,
        meta.elites,
        meta.input_norm,
        meta.output_norm,
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `s' = 0.9 s + 0.1 a`, `r = -s^2` on a 2-d state with 1-d action.
    pub(crate) fn linear_data(n: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
        (0..n)
            .map(|_| {
                let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let a = vec![rng.random_range(-1.0..1.0)];
                let s_next = s.iter().map(|x| 0.9 * x + 0.1 * a[0]).collect();
                let r = -(s[0] * s[0] + s[1] * s[1]);
                Transition {
                    s,
                    a,
                    r,
                    s_next,
                    done: false,
                }
            })
            .collect()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: vec![32, 32],
            batch_size: 64,
            max_epochs: 60,
            ..Default::default()
        }
    }

    pub(crate) struct ConstPolicy(pub f64);

    impl BatchPolicy for ConstPolicy {
        fn act_batch(&self, obs: &Array, _: &mut dyn RngCore) -> Array {
            Array::filled(&[obs.rows(), 1], self.0)
        }
    }

    proptest! {
        #[test]
        fn normalizer_roundtrip(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 2..20)) {
            let x = Array::from_rows(&rows);
            let n = Normalizer::fit(&x);
            let back = n.denormalize(&n.normalize(&x));
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn duplicated_data_keeps_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = linear_data(100, &mut rng);
        let (x, _) = model_arrays(&data);
        let doubled: Vec<Transition> = data.iter().chain(&data).cloned().collect();
        let (x2, _) = model_arrays(&doubled);
        let (a, b) = (Normalizer::fit(&x), Normalizer::fit(&x2));
        for (u, v) in a.mean.iter().chain(&a.std).zip(b.mean.iter().chain(&b.std)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn too_little_or_degenerate_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_config();
        let few = linear_data(10, &mut rng);
        assert!(matches!(
            train_ensemble(&few, &cfg, &mut rng),
            Err(ModelError::InsufficientData { needed: 640, .. })
        ));
        let flat: Vec<Transition> = (0..700)
            .map(|i| Transition {
                s: vec![i as f64, 0.0],
                a: vec![0.0],
                r: 1.0,
                s_next: vec![i as f64, 0.0],
                done: false,
            })
            .collect();
        assert!(matches!(
            train_ensemble(&flat, &cfg, &mut rng),
            Err(ModelError::Degenerate)
        ));
    }

    #[test]
    fn untrained_model_refuses_to_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = EnsembleModel::new(2, 1, small_config(), &mut rng);
        let s = Array::zeros(&[1, 2]);
        let a = Array::zeros(&[1, 1]);
        assert!(matches!(
            m.predict(&s, &a, PredictMode::Mean, &mut rng),
            Err(ModelError::Untrained)
        ));
    }

    #[test]
    fn learns_linear_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = linear_data(3000, &mut rng);
        let cfg = small_config();
        let (model, report) = train_ensemble(&data, &cfg, &mut rng).unwrap();
        assert_eq!(report.elites.len(), 3);
        assert!(report.elites.iter().all(|&e| report.final_nll[e].is_finite()));
        let mut sorted = report.final_nll.clone();
        sorted.sort_by(f64::total_cmp);
        for &e in &report.elites {
            assert!(report.final_nll[e] <= sorted[2]);
        }
        // improving epochs reset the patience counter, and each member is
        // restored to its best holdout snapshot
        assert!(report.epochs > cfg.patience, "stopped after {} epochs", report.epochs);
        for (hist, &fin) in report.holdout_nll.iter().zip(&report.final_nll) {
            let best = hist.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((fin - best).abs() <= 1e-9 * best.abs().max(1.0), "{fin} vs {best}");
        }

        let fresh = linear_data(500, &mut rng);
        let (s, a) = {
            let b = crate::datastore::Batch::from_transitions(&fresh);
            (b.s, b.a)
        };
        let pred = model.predict(&s, &a, PredictMode::Mean, &mut rng).unwrap();
        let mse: f64 = fresh
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.s_next
                    .iter()
                    .zip(pred.s_next.row(i))
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>()
                    / 2.0
            })
            .sum::<f64>()
            / fresh.len() as f64;
        assert!(mse < 1e-3, "holdout mse {mse}");

        // a training point
        let t = &data[0];
        let p = model
            .predict(
                &Array::row_vector(t.s.clone()),
                &Array::row_vector(t.a.clone()),
                PredictMode::Mean,
                &mut rng,
            )
            .unwrap();
        for (u, v) in p.s_next.data().iter().zip(&t.s_next) {
            assert!((u - v).abs() < 0.05);
        }

        // mean mode with fixed member is deterministic
        let p1 = model.predict_with(&s, &a, &vec![model.elites[0]; s.rows()], PredictMode::Mean, &mut rng).unwrap();
        let p2 = model.predict_with(&s, &a, &vec![model.elites[0]; s.rows()], PredictMode::Mean, &mut rng).unwrap();
        assert_eq!(p1, p2);

        // log-variances within the clamp
        for m in 0..model.members.len() {
            let (_, lv) = model.member_head(m, &s.concat_cols(&a)).unwrap();
            assert!(lv
                .data()
                .iter()
                .all(|&v| v >= cfg.log_var_min && v <= cfg.log_var_max));
        }
    }

    pub(crate) fn trained_linear(seed: u64) -> EnsembleModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = linear_data(1500, &mut rng);
        let cfg = ModelConfig {
            max_epochs: 20,
            ..small_config()
        };
        train_ensemble(&data, &cfg, &mut rng).unwrap().0
    }

    #[test]
    fn rollout_counts_and_determinism() {
        let model = trained_linear(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let starts = Array::matrix(64, 2, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect());
        let r1 = model_rollout(&model, &ConstPolicy(0.2), &starts, 1, PredictMode::Sample, &mut rng)
            .unwrap();
        assert_eq!(r1.transitions.len(), 64);
        assert!(r1.transitions.iter().all(|t| !t.done));
        let run = |seed| {
            model_rollout(
                &model,
                &ConstPolicy(0.2),
                &starts,
                3,
                PredictMode::Sample,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        assert_eq!(run(9), run(9));
        assert_eq!(run(9).transitions.len(), 192);
        assert!(matches!(
            model_rollout(&model, &ConstPolicy(0.0), &starts, 0, PredictMode::Mean, &mut rng),
            Err(ModelError::ZeroDepth)
        ));
    }

    #[test]
    fn non_elites_never_used() {
        let mut model = trained_linear(6);
        let non_elite: Vec<usize> = (0..model.members.len())
            .filter(|m| !model.elites.contains(m))
            .collect();
        for &m in &non_elite {
            for t in model.members[m].tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let starts = Array::matrix(200, 2, (0..400).map(|_| rng.random_range(-1.0..1.0)).collect());
        let out =
            model_rollout(&model, &ConstPolicy(0.1), &starts, 2, PredictMode::Sample, &mut rng).unwrap();
        assert_eq!(out.truncated, 0);
        assert_eq!(out.transitions.len(), 400);
    }

    #[test]
    fn non_finite_predictions_truncate() {
        let mut model = trained_linear(8);
        for m in 0..model.members.len() {
            let last = model.members[m].num_layers() - 1;
            model.members[m].bias_mut(last).data_mut()[0] = f64::INFINITY;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let starts = Array::zeros(&[5, 2]);
        let out = model_rollout(&model, &ConstPolicy(0.0), &starts, 3, PredictMode::Mean, &mut rng)
            .unwrap();
        assert_eq!(out.truncated, 5);
        assert!(out.transitions.is_empty());
    }

    #[test]
    fn compounding_error_grows_with_depth() {
        let model = trained_linear(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 400;
        let starts = Array::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let policy = ConstPolicy(0.5);
        let rollout = model_rollout(&model, &policy, &starts, 5, PredictMode::Sample, &mut rng).unwrap();
        // true states after j steps under the constant action
        let moment_gap = |step: usize| -> f64 {
            let rows = &rollout.transitions[(step - 1) * n..step * n];
            let mut gap = 0.0;
            for d in 0..2 {
                let model_mean = rows.iter().map(|t| t.s_next[d]).sum::<f64>() / n as f64;
                let true_mean = (0..n)
                    .map(|i| {
                        let mut x = starts.get(i, d);
                        for _ in 0..step {
                            x = 0.9 * x + 0.1 * 0.5;
                        }
                        x
                    })
                    .sum::<f64>()
                    / n as f64;
                let model_sq = rows.iter().map(|t| t.s_next[d].powi(2)).sum::<f64>() / n as f64;
                let true_sq = (0..n)
                    .map(|i| {
                        let mut x = starts.get(i, d);
                        for _ in 0..step {
                            x = 0.9 * x + 0.1 * 0.5;
                        }
                        x * x
                    })
                    .sum::<f64>()
                    / n as f64;
                gap += (model_mean - true_mean).abs() + (model_sq - true_sq).abs();
            }
            gap
        };
        let (g1, g5) = (moment_gap(1), moment_gap(5));
        assert!(g5 > g1, "moment gap k=1 {g1} vs k=5 {g5}");
    }

    #[test]
    fn padded_model_matches_original() {
        let model = trained_linear(12);
        let padded = model.padded(4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = Array::matrix(50, 2, (0..100).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = Array::matrix(50, 1, (0..50).map(|_| rng.random_range(-1.0..1.0)).collect());
        let sp = s.concat_cols(&Array::zeros(&[50, 2]));
        for m in 0..model.members.len() {
            let (n1, r1) = model.member_mean(m, &s, &a).unwrap();
            let (n2, r2) = padded.member_mean(m, &sp, &a).unwrap();
            assert!(n1.max_abs_diff(&n2.slice_cols(0, 2)) < 1e-12);
            assert!(n2.slice_cols(2, 4).data().iter().all(|&v| v == 0.0));
            for (x, y) in r1.iter().zip(&r2) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = trained_linear(14);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.s2rl");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.members, model.members);
        assert_eq!(back.elites, model.elites);
        assert_eq!(back.input_norm, model.input_norm);
        assert_eq!(back.output_norm, model.output_norm);
    }
}
