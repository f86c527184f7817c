//! Closed-form retuning of an MLP output projection.
//!
//! Given the pruned-stream input `X̂`, the intermediate activation `Ẑ` of the
//! tuning site and the dense-model output `X_ref` at that site, each selected
//! row `i` of the output projection is replaced by
//!
//! ```text
//! argmin_w ‖wᵀẐ − r_i‖² + λ‖w − w_i⁰‖²,    r_i = (X_ref − X̂)_i
//! ```
//!
//! i.e. `(ẐẐᵀ + λI) w = Ẑ r_iᵀ + λ w_i⁰`. All rows share the Gram matrix, which
//! is factored once per job. Row indices in this module are 0-based.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, SprintError};
use crate::matrix::{ActivationMatrix, Matrix};
use crate::model::{inner_activation, ModelConfig, SublayerKind, SublayerStack};

/// Pivots below this fraction of the largest diagonal entry send the solve
/// to the minimum-norm path.
const CHOLESKY_REL_PIVOT: f64 = 1e-10;

/// Ridge strength for the row solves.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Ridge {
    /// `1e-4 · trace(ẐẐᵀ) / d_ff`.
    #[default]
    Auto,
    Fixed(f64),
}

impl Ridge {
    pub fn resolve(&self, gram: &Matrix) -> f64 {
        match *self {
            Ridge::Auto => 1e-4 * gram.trace() / gram.rows() as f64,
            Ridge::Fixed(l) => l,
        }
    }
}

impl fmt::Display for Ridge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ridge::Auto => f.write_str("auto"),
            Ridge::Fixed(l) => write!(f, "{l}"),
        }
    }
}

impl FromStr for Ridge {
    type Err = SprintError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Ridge::Auto);
        }
        match s.parse::<f64>() {
            Ok(l) if l.is_finite() && l >= 0.0 => Ok(Ridge::Fixed(l)),
            _ => Err(SprintError::Config(format!("ridge must be `auto` or a nonnegative number, got `{s}`"))),
        }
    }
}

impl Serialize for Ridge {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ridge::Auto => s.serialize_str("auto"),
            Ridge::Fixed(l) => s.serialize_f64(*l),
        }
    }
}

impl<'de> Deserialize<'de> for Ridge {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(l) => Ok(Ridge::Fixed(l)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Default percentage of rows to tune: all rows for small models, 75% for
/// models at the 70B scale (`d_model >= 8192`).
pub fn default_rows_percent(config: &ModelConfig) -> f64 {
    if config.d_model >= 8192 {
        75.0
    } else {
        100.0
    }
}

#[derive(Clone, Debug)]
pub struct TuneJob {
    /// Sublayer index of the MLP being tuned.
    pub site: usize,
    /// Current output projection `d_model x d_ff`.
    pub w_orig: Matrix,
    /// `d_ff x n`.
    pub z_hat: ActivationMatrix,
    /// `d_model x n`, pruned-stream input of the site.
    pub x_hat: ActivationMatrix,
    /// `d_model x n`, dense-model output of the site.
    pub x_ref: ActivationMatrix,
    /// Percentage of rows to tune, in `(0, 100]`.
    pub rows_percent: f64,
}

impl TuneJob {
    pub fn validate(&self) -> Result<()> {
        let n = self.z_hat.cols();
        let d_model = self.w_orig.rows();
        let d_ff = self.w_orig.cols();
        if n == 0 {
            return Err(SprintError::Dimension("tuning job has no tokens".into()));
        }
        if self.x_hat.cols() != n || self.x_ref.cols() != n {
            return Err(SprintError::Dimension("tuning job column counts differ".into()));
        }
        if self.z_hat.rows() != d_ff || self.x_hat.rows() != d_model || self.x_ref.rows() != d_model {
            return Err(SprintError::Dimension(format!(
                "tuning job rows: Ẑ {} (want {d_ff}), X̂ {}, X_ref {} (want {d_model})",
                self.z_hat.rows(),
                self.x_hat.rows(),
                self.x_ref.rows()
            )));
        }
        check_percent(self.rows_percent)
    }

    /// `‖(X̂ + W Ẑ) − X_ref‖_F` for an arbitrary projection `w`.
    pub fn error_with(&self, w: &Matrix) -> Result<f64> {
        let out = w.matmul(&self.z_hat)?.add(&self.x_hat)?;
        out.frobenius_distance(&self.x_ref)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TunedProjection {
    pub site: usize,
    pub weights: Matrix,
    /// Sorted 0-based row indices that were re-solved.
    pub tuned_rows: Vec<usize>,
    /// Objective after the solve.
    pub residual_error: f64,
    /// Objective with the original weights.
    pub pre_error: f64,
    /// Whether the minimum-norm path was used.
    pub min_norm_fallback: bool,
}

fn check_percent(c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 100.0) {
        return Err(SprintError::Config(format!("rows percent must lie in (0, 100], got {c}")));
    }
    Ok(())
}

/// Number of rows tuned for `c` percent of `d_model` rows.
pub fn tuned_row_count(d_model: usize, c: f64) -> usize {
    let exact = c * d_model as f64 / 100.0;
    // absorb float fuzz such as 0.1·30 = 3.0000000000000004
    let count = (exact - 1e-9).ceil() as usize;
    count.clamp(1, d_model)
}

/// Outlier-aware row selection: weight magnitude times the norm of the
/// matching activation channel, summed over each row.
pub fn row_scores(w: &Matrix, z_hat: &ActivationMatrix) -> Result<Vec<f64>> {
    if w.cols() != z_hat.rows() {
        return Err(SprintError::Dimension(format!(
            "projection has {} columns but activation has {} rows",
            w.cols(),
            z_hat.rows()
        )));
    }
    let channel_norms: Vec<f64> =
        (0..z_hat.rows()).map(|j| z_hat.row(j).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok((0..w.rows()).map(|i| w.row(i).iter().zip(&channel_norms).map(|(a, n)| a.abs() * n).sum()).collect())
}

/// Picks the `⌈c·d_model/100⌉` rows with the largest outlier-aware scores;
/// ties go to the lower row index. Returns the rows sorted ascending.
pub fn select_tuned_rows(w: &Matrix, z_hat: &ActivationMatrix, c: f64) -> Result<Vec<usize>> {
    check_percent(c)?;
    let scores = row_scores(w, z_hat)?;
    let k = tuned_row_count(w.rows(), c);
    let mut order: Vec<usize> = (0..w.rows()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

enum Factor {
    /// Lower-triangular Cholesky factor, row-major.
    Cholesky(Vec<f64>),
    /// Moore-Penrose pseudoinverse of a singular system matrix.
    Pinv(Matrix),
}

/// Shared left-hand side `ẐẐᵀ + λI` of every row subproblem.
struct GramSystem {
    dim: usize,
    factor: Factor,
}

impl GramSystem {
    fn new(gram: &Matrix, lambda: f64) -> GramSystem {
        let dim = gram.rows();
        let mut a = gram.clone();
        for i in 0..dim {
            a.set(i, i, a.get(i, i) + lambda);
        }
        match cholesky(&a) {
            Some(l) => GramSystem { dim, factor: Factor::Cholesky(l) },
            None => GramSystem { dim, factor: Factor::Pinv(pseudo_inverse(&a)) },
        }
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        match &self.factor {
            Factor::Cholesky(l) => {
                let mut y = vec![0.0; n];
                for i in 0..n {
                    let mut acc = b[i];
                    for k in 0..i {
                        acc -= l[i * n + k] * y[k];
                    }
                    y[i] = acc / l[i * n + i];
                }
                let mut x = vec![0.0; n];
                for i in (0..n).rev() {
                    let mut acc = y[i];
                    for k in i + 1..n {
                        acc -= l[k * n + i] * x[k];
                    }
                    x[i] = acc / l[i * n + i];
                }
                x
            }
            Factor::Pinv(p) => (0..n).map(|i| p.row(i).iter().zip(b).map(|(a, v)| a * v).sum()).collect(),
        }
    }

    fn is_min_norm(&self) -> bool {
        matches!(self.factor, Factor::Pinv(_))
    }
}

/// Cholesky factorization that refuses near-zero pivots.
fn cholesky(a: &Matrix) -> Option<Vec<f64>> {
    let n = a.rows();
    let max_diag = (0..n).map(|i| a.get(i, i)).fold(0.0, f64::max);
    if max_diag <= 0.0 {
        return None;
    }
    let tol = CHOLESKY_REL_PIVOT * max_diag;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > tol) {
            return None;
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some(l)
}

fn pseudo_inverse(a: &Matrix) -> Matrix {
    let n = a.rows();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, a.data()));
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = n as f64 * f64::EPSILON * max_ev * 1e3;
    let mut out = Matrix::zeros(n, n);
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev <= cutoff {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        for i in 0..n {
            let vi = v[i] / ev;
            for j in 0..n {
                out.set(i, j, out.get(i, j) + vi * v[j]);
            }
        }
    }
    out
}

/// Solves the selected rows of a tuning job. Unselected rows are copied
/// bit-for-bit from the original projection.
///
/// When `ẐẐᵀ + λI` is numerically singular (only possible for `λ = 0`) the
/// minimum-norm least-squares solution is returned instead of failing.
pub fn solve_rows_lstsq(job: &TuneJob, rows: &[usize], ridge: Ridge) -> Result<TunedProjection> {
    job.validate()?;
    let d_model = job.w_orig.rows();
    if let Some(&bad) = rows.iter().find(|&&r| r >= d_model) {
        return Err(SprintError::Dimension(format!("row {bad} outside 0..{d_model}")));
    }
    let gram = job.z_hat.gram();
    let lambda = ridge.resolve(&gram);
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(SprintError::Config(format!("ridge {lambda} must be finite and >= 0")));
    }
    let system = GramSystem::new(&gram, lambda);

    let solved: Vec<(usize, Vec<f64>)> = rows
        .par_iter()
        .map(|&i| {
            let w0 = job.w_orig.row(i);
            let target: Vec<f64> = job.x_ref.row(i).iter().zip(job.x_hat.row(i)).map(|(a, b)| a - b).collect();
            let rhs: Vec<f64> = (0..job.z_hat.rows())
                .map(|j| {
                    let zr: f64 = job.z_hat.row(j).iter().zip(&target).map(|(z, r)| z * r).sum();
                    zr + lambda * w0[j]
                })
                .collect();
            (i, system.solve(&rhs))
        })
        .collect();

    let mut weights = job.w_orig.clone();
    for (i, w) in solved {
        weights.row_mut(i).copy_from_slice(&w);
    }
    let mut tuned_rows = rows.to_vec();
    tuned_rows.sort_unstable();
    tuned_rows.dedup();
    Ok(TunedProjection {
        site: job.site,
        residual_error: job.error_with(&weights)?,
        pre_error: job.error_with(&job.w_orig)?,
        weights,
        tuned_rows,
        min_norm_fallback: system.is_min_norm(),
    })
}

/// Result of retuning the site above a removed candidate.
#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub tuned: TunedProjection,
    /// `X̂_t = X̂ + W_tuned Ẑ`, the tuned output of the site.
    pub x_tuned: ActivationMatrix,
}

/// Builds and solves the tuning job for MLP sublayer `site`, given the
/// pruned-candidate stream `x_hat` entering it and the dense-model output
/// `x_ref` of the same sublayer.
pub fn in_compression_tune(
    model: &SublayerStack,
    site: usize,
    x_hat: &ActivationMatrix,
    x_ref: &ActivationMatrix,
    segments: &[usize],
    rows_percent: f64,
    ridge: Ridge,
) -> Result<TuneOutcome> {
    let layer = model.sublayer(site);
    if layer.kind != SublayerKind::Mlp || layer.pruned {
        return Err(SprintError::Config(format!("tuning site {site} is not a live MLP sublayer")));
    }
    let z_hat = inner_activation(&model.config, layer, x_hat, segments)?;
    let job = TuneJob {
        site,
        w_orig: layer.out_proj.clone(),
        z_hat,
        x_hat: x_hat.clone(),
        x_ref: x_ref.clone(),
        rows_percent,
    };
    let rows = select_tuned_rows(&job.w_orig, &job.z_hat, rows_percent)?;
    let tuned = solve_rows_lstsq(&job, &rows, ridge)?;
    let x_tuned = tuned.weights.matmul(&job.z_hat)?.add(x_hat)?;
    Ok(TuneOutcome { tuned, x_tuned })
}
