use super::array::Array;
use super::graph::{sigmoid, Graph, Var};
use super::NumError;

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Default log-variance clamp interval.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 0.5;

/// Mean and bounded log-variance of a diagonal Gaussian over a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mean: Array,
    pub log_variance: Array,
}

impl GaussianHead {
    /// Splits a raw network output `[mean | raw_log_var]` of width `2 * dim`
    /// and squashes the log-variance into `[lo, hi]`.
    pub fn from_raw(raw: &Array, dim: usize, lo: f64, hi: f64) -> Self {
        debug_assert_eq!(raw.cols(), 2 * dim);
        let mean = raw.slice_cols(0, dim);
        let log_variance = raw.slice_cols(dim, 2 * dim).map(|x| soft_clamp(x, lo, hi));
        Self { mean, log_variance }
    }
}

/// Smooth squashing of `x` into `[lo, hi]`.
pub fn soft_clamp(x: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * sigmoid(x)
}

/// Graph version of [`soft_clamp`].
pub fn soft_clamp_graph(g: &mut Graph, x: Var, lo: f64, hi: f64) -> Var {
    let s = g.sigmoid(x);
    let s = g.scale(s, hi - lo);
    g.add_scalar(s, lo)
}

/// Negative log-likelihood of `target` under `N(mean, exp(log_variance))`,
/// summed over columns and averaged over rows.
pub fn gaussian_nll(mean: &Array, log_variance: &Array, target: &Array) -> Result<f64, NumError> {
    if mean.shape() != log_variance.shape() || mean.shape() != target.shape() {
        return Err(NumError::Shape(format!(
            "gaussian_nll: mean {:?}, log_variance {:?}, target {:?}",
            mean.shape(),
            log_variance.shape(),
            target.shape()
        )));
    }
    let rows = mean.rows().max(1);
    let total: f64 = mean
        .data()
        .iter()
        .zip(log_variance.data())
        .zip(target.data())
        .map(|((m, lv), t)| 0.5 * (LOG_2PI + lv + (t - m) * (t - m) * (-lv).exp()))
        .sum();
    Ok(total / rows as f64)
}

/// Per-row Gaussian NLL as a `rows x 1` node.
pub fn gaussian_nll_rows(g: &mut Graph, mean: Var, log_variance: Var, target: Var) -> Var {
    let diff = g.sub(target, mean);
    let sq = g.square(diff);
    let neg_lv = g.neg(log_variance);
    let inv_var = g.exp(neg_lv);
    let w = g.mul(sq, inv_var);
    let s = g.add(w, log_variance);
    let s = g.add_scalar(s, LOG_2PI);
    let s = g.scale(s, 0.5);
    g.sum_cols(s)
}

/// Graph version of [`gaussian_nll`] (mean over rows of per-row sums).
pub fn gaussian_nll_graph(g: &mut Graph, mean: Var, log_variance: Var, target: Var) -> Var {
    let rows = gaussian_nll_rows(g, mean, log_variance, target);
    g.mean(rows)
}
