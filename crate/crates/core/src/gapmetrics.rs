//! Gap diagnostics: direct-transfer degradation, the distance of `m` from
//! the identity, and latent versus original KL divergence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::evaluate_policy;
use crate::envsim::{make_env, EnvError, EnvSpec, Family, Perturbation, Policy, Role};
use crate::latentspace::{LatentError, LatentModel};
use crate::numgrad::Array;

/// Lower bound on the original-space KL used as the ratio denominator.
pub const EPS_DIV: f64 = 1e-8;
/// Fitted variances below this are floored and flagged.
pub const VAR_FLOOR: f64 = 1e-6;
/// Coordinates whose variance is below this in both sets are left out.
pub const CONSTANT_VAR: f64 = 1e-9;
pub const KNN_K: usize = 5;

#[derive(Debug, Error)]
pub enum GapError {
    #[error("no observations")]
    Empty,
    #[error("{what} has {got} samples, at least {needed} are needed")]
    TooFewSamples {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("variance {0} is not positive")]
    NonPositiveVariance(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Mean over rows of `‖m(p_real(o)) − p_real(o)‖₂`.
pub fn m_identity_gap(model: &LatentModel, observations: &Array) -> Result<f64, GapError> {
    if observations.rows() == 0 {
        return Err(GapError::Empty);
    }
    let z = model.encode(Role::Real, observations)?;
    let mz = model.cross_map(&z)?;
    Ok(mean_row_distance(&mz, &z))
}

fn mean_row_distance(a: &Array, b: &Array) -> f64 {
    let total: f64 = (0..a.rows())
        .map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / a.rows() as f64
}

/// Closed-form `KL(N(mean0, diag var0) ‖ N(mean1, diag var1))`.
pub fn gaussian_kl(mean0: &[f64], var0: &[f64], mean1: &[f64], var1: &[f64]) -> Result<f64, GapError> {
    let d = mean0.len();
    for len in [var0.len(), mean1.len(), var1.len()] {
        if len != d {
            return Err(GapError::Dimension(d, len));
        }
    }
    if let Some(&v) = var0.iter().chain(var1).find(|&&v| v.is_nan() || v <= 0.0) {
        return Err(GapError::NonPositiveVariance(v));
    }
    let kl: f64 = (0..d)
        .map(|i| {
            let dm = mean0[i] - mean1[i];
            (var1[i] / var0[i]).ln() + (var0[i] + dm * dm) / var1[i] - 1.0
        })
        .sum();
    Ok((0.5 * kl).max(0.0))
}

/// Per-column mean and population variance.
pub fn fit_diag(x: &Array) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows() as f64, x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in 0..x.rows() {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianFitKl {
    pub kl: f64,
    /// Coordinates left out because both sets are constant there.
    pub excluded: Vec<usize>,
    /// Some fitted variance was floored at [`VAR_FLOOR`].
    pub floored: bool,
}

/// Diagonal-Gaussian moment-matching `KL(P ‖ Q)` from samples.
pub fn gaussian_fit_kl(p: &Array, q: &Array) -> Result<GaussianFitKl, GapError> {
    if p.cols() != q.cols() {
        return Err(GapError::Dimension(p.cols(), q.cols()));
    }
    if p.rows() == 0 || q.rows() == 0 {
        return Err(GapError::Empty);
    }
    let (mp, vp) = fit_diag(p);
    let (mq, vq) = fit_diag(q);
    let mut out = GaussianFitKl::default();
    let (mut a, mut b, mut c, mut e) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..p.cols() {
        if vp[i] < CONSTANT_VAR && vq[i] < CONSTANT_VAR {
            out.excluded.push(i);
            continue;
        }
        let floor = |v: f64, flag: &mut bool| {
            if v < VAR_FLOOR {
                *flag = true;
                VAR_FLOOR
            } else {
                v
            }
        };
        a.push(mp[i]);
        b.push(floor(vp[i], &mut out.floored));
        c.push(mq[i]);
        e.push(floor(vq[i], &mut out.floored));
    }
    out.kl = gaussian_kl(&a, &b, &c, &e)?;
    Ok(out)
}

/// k-nearest-neighbour estimate of `KL(P ‖ Q)` (Wang, Kulkarni & Verdú).
pub fn knn_kl(p: &Array, q: &Array, k: usize) -> Result<f64, GapError> {
    if p.cols() != q.cols() {
        return Err(GapError::Dimension(p.cols(), q.cols()));
    }
    let (n, m, d) = (p.rows(), q.rows(), p.cols());
    if n <= k || m < k {
        return Err(GapError::TooFewSamples {
            what: "knn sample set",
            needed: k + 1,
            got: n.min(m),
        });
    }
    let kth = |x: &[f64], set: &Array, skip: Option<usize>| -> f64 {
        let mut dists: Vec<f64> = (0..set.rows())
            .filter(|&j| Some(j) != skip)
            .map(|j| {
                set.row(j)
                    .iter()
                    .zip(x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        dists.select_nth_unstable_by(k - 1, f64::total_cmp);
        dists[k - 1].max(1e-300)
    };
    let sum: f64 = (0..n)
        .map(|i| {
            let rho = kth(p.row(i), p, Some(i));
            let nu = kth(p.row(i), q, None);
            (nu / rho).ln()
        })
        .sum();
    Ok(d as f64 / n as f64 * sum + (m as f64 / (n as f64 - 1.0)).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub kl_original: f64,
    pub kl_latent: f64,
    pub kl_ratio: f64,
    pub excluded_original: Vec<usize>,
    pub excluded_latent: Vec<usize>,
    pub floored: bool,
    pub n_real: usize,
    pub n_sim: usize,
    pub knn_original: Option<f64>,
    pub knn_latent: Option<f64>,
}

pub const MIN_KL_SAMPLES: usize = 100;

/// KL(real ‖ sim) in original coordinates and after encoding each set with
/// its own encoder, given the encoded sets directly.
pub fn kl_ratio_encoded(
    real: &Array,
    sim: &Array,
    real_latent: &Array,
    sim_latent: &Array,
    with_knn: bool,
) -> Result<KlReport, GapError> {
    for (what, x) in [("real samples", real), ("sim samples", sim)] {
        if x.rows() < MIN_KL_SAMPLES {
            return Err(GapError::TooFewSamples {
                what,
                needed: MIN_KL_SAMPLES,
                got: x.rows(),
            });
        }
    }
    let original = gaussian_fit_kl(real, sim)?;
    let latent = gaussian_fit_kl(real_latent, sim_latent)?;
    let kl_ratio = latent.kl / original.kl.max(EPS_DIV);
    let (knn_original, knn_latent) = if with_knn {
        (
            Some(knn_kl(real, sim, KNN_K)?),
            Some(knn_kl(real_latent, sim_latent, KNN_K)?),
        )
    } else {
        (None, None)
    };
    Ok(KlReport {
        kl_original: original.kl,
        kl_latent: latent.kl,
        kl_ratio,
        floored: original.floored || latent.floored,
        excluded_original: original.excluded,
        excluded_latent: latent.excluded,
        n_real: real.rows(),
        n_sim: sim.rows(),
        knn_original,
        knn_latent,
    })
}

/// [`kl_ratio_encoded`] with the model's role-matching encoders.
pub fn kl_ratio(model: &LatentModel, real: &Array, sim: &Array, with_knn: bool) -> Result<KlReport, GapError> {
    let zr = model.encode(Role::Real, real)?;
    let zs = model.encode(Role::Sim, sim)?;
    kl_ratio_encoded(real, sim, &zr, &zs, with_knn)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub scale: f64,
    pub m_identity_gap: f64,
    pub kl: KlReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub family: Family,
    pub axis: Perturbation,
    pub cells: Vec<GapCell>,
    pub estimator: String,
    pub eps_div: f64,
    pub seed: u64,
}

impl GapReport {
    pub fn new(family: Family, axis: Perturbation, seed: u64) -> Self {
        Self {
            family,
            axis,
            cells: Vec::new(),
            estimator: "diag-gaussian".into(),
            eps_div: EPS_DIV,
            seed,
        }
    }

    /// One row per metric, one column per scale.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,metric");
        for c in &self.cells {
            out.push_str(&format!(",{}", c.scale));
        }
        out.push('\n');
        type Metric = (&'static str, fn(&GapCell) -> f64);
        let metrics: [Metric; 4] = [
            ("m_identity_gap", |c| c.m_identity_gap),
            ("kl_original", |c| c.kl.kl_original),
            ("kl_latent", |c| c.kl.kl_latent),
            ("kl_ratio", |c| c.kl.kl_ratio),
        ];
        for (name, f) in metrics {
            out.push_str(&format!("{},{name}", self.axis));
            for c in &self.cells {
                out.push_str(&format!(",{}", f(c)));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationCell {
    pub mean: f64,
    pub std: f64,
    /// Mean return for each evaluation seed, in seed order.
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub axis: Perturbation,
    pub cells: Vec<DegradationCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationTable {
    pub family: Family,
    pub scales: Vec<f64>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub rows: Vec<DegradationRow>,
}

impl DegradationTable {
    /// `axis,<scale>...` with `mean±std` cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis");
        for s in &self.scales {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.axis.to_string());
            for c in &row.cells {
                out.push_str(&format!(",{}±{}", c.mean, c.std));
            }
            out.push('\n');
        }
        out
    }

    /// `axis,scale,seed,return`, one line per evaluation.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("axis,scale,seed,return\n");
        for row in &self.rows {
            for (scale, c) in self.scales.iter().zip(&row.cells) {
                for (seed, r) in self.seeds.iter().zip(&c.per_seed) {
                    out.push_str(&format!("{},{scale},{seed},{r}\n", row.axis));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn row(&self, axis: Perturbation) -> Option<&DegradationRow> {
        self.rows.iter().find(|r| r.axis == axis)
    }

    /// Number of seeds whose returns never increase along `scales`
    /// (given as column indices, in order).
    pub fn non_increasing_seeds(&self, axis: Perturbation, columns: &[usize]) -> usize {
        let Some(row) = self.row(axis) else {
            return 0;
        };
        (0..self.seeds.len())
            .filter(|&s| {
                columns
                    .windows(2)
                    .all(|w| row.cells[w[1]].per_seed[s] <= row.cells[w[0]].per_seed[s])
            })
            .count()
    }
}

/// Evaluates a frozen policy, unchanged, on every `(axis, scale)` cell.
/// Each seed drives one evaluation stream shared by all cells.
pub fn degradation_study<P: Policy + ?Sized>(
    policy: &P,
    family: Family,
    axes: &[Perturbation],
    scales: &[f64],
    episodes: usize,
    seeds: &[u64],
) -> Result<DegradationTable, GapError> {
    let mut rows = Vec::with_capacity(axes.len());
    for &axis in axes {
        let mut cells = Vec::with_capacity(scales.len());
        for &scale in scales {
            let env = make_env(&EnvSpec::new(family, axis, scale, Role::Real))?;
            let per_seed = seeds
                .iter()
                .map(|&s| Ok(evaluate_policy(&env, policy, episodes, s)?.mean))
                .collect::<Result<Vec<f64>, GapError>>()?;
            let n = per_seed.len().max(1) as f64;
            let mean = per_seed.iter().sum::<f64>() / n;
            let std = (per_seed.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            cells.push(DegradationCell {
                mean,
                std,
                per_seed,
            });
        }
        rows.push(DegradationRow { axis, cells });
    }
    Ok(DegradationTable {
        family,
        scales: scales.to_vec(),
        seeds: seeds.to_vec(),
        episodes,
        rows,
    })
}
