//! Low-rank embedding of cross-spectral deep features.
//!
//! A square transform `T` is learned on labeled feature columns so that,
//! after applying it, features of one subject (across both spectra) collapse
//! toward a single low-dimensional subspace while different subjects are
//! pushed toward mutually orthogonal subspaces. The training objective is
//!
//! ```text
//!   f(T) = sum_c ||T Y_c||_*  -  ||T Y||_*
//! ```
//!
//! where `||.||_*` is the nuclear norm (sum of singular values), `Y` the full
//! feature matrix and `Y_c` the columns of class `c`. By the concatenation
//! inequality of the nuclear norm, `f(T) >= 0`, with equality exactly when the
//! transformed class subspaces are pairwise orthogonal.
//!
//! The objective is a difference of convex functions and is minimized with
//! the concave-convex procedure (CCP): the concave term `-||T Y||_*` is
//! linearized at the current iterate and the convex surrogate is driven down
//! by subgradient descent. The true objective is non-increasing across outer
//! iterates by construction.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative singular-value cutoff used when forming nuclear-norm
/// subgradients: directions with sigma <= TAU_RANK * sigma_max are dropped.
pub const TAU_RANK: f64 = 1e-10;

/// Which spectrum a feature column came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Spectrum {
    Nir,
    Vis,
}

/// A d x N matrix of feature columns with per-column subject labels and
/// spectrum tags.
#[derive(Debug, Clone)]
pub struct LabeledFeatureMatrix {
    data: DMatrix<f64>,
    labels: Vec<u32>,
    spectra: Vec<Spectrum>,
}

impl LabeledFeatureMatrix {
    pub fn new(data: DMatrix<f64>, labels: Vec<u32>, spectra: Vec<Spectrum>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput("empty feature matrix".into()));
        }
        if labels.len() != data.ncols() || spectra.len() != data.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} columns but {} labels / {} spectrum tags",
                data.ncols(),
                labels.len(),
                spectra.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "feature matrix contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            data,
            labels,
            spectra,
        })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty matrices
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn spectra(&self) -> &[Spectrum] {
        &self.spectra
    }

    /// Distinct subject labels in first-appearance order.
    pub fn classes(&self) -> Vec<u32> {
        let mut seen = Vec::new();
        for &l in &self.labels {
            if !seen.contains(&l) {
                seen.push(l);
            }
        }
        seen
    }

    /// The submatrix `Y_c` formed by the columns of class `c`.
    pub fn class_submatrix(&self, class: u32) -> DMatrix<f64> {
        let cols: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        self.data.select_columns(&cols)
    }
}

/// The learned d x d embedding transform.
///
/// A freshly constructed transform is the identity, which is also the CCP
/// starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankTransform {
    matrix: DMatrix<f64>,
}

impl LowRankTransform {
    /// Identity transform of the given dimension (untrained state).
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "transform must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "transform contains non-finite entries".into(),
            ));
        }
        Ok(Self { matrix })
    }

    pub fn trained_on_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// Stopping rules and step sizes for the CCP solver.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CcpConfig {
    pub max_outer_iters: usize,
    /// Relative decrease of the true objective below which the outer loop
    /// stops.
    pub outer_tolerance: f64,
    pub inner_max_iters: usize,
    /// Fixed step size of the inner subgradient descent.
    pub inner_step: f64,
    /// Inner loop stops when the surrogate improvement falls below this.
    pub inner_tolerance: f64,
}

impl Default for CcpConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 50,
            outer_tolerance: 1e-6,
            inner_max_iters: 100,
            inner_step: 1e-3,
            inner_tolerance: 0.0,
        }
    }
}

impl CcpConfig {
    fn validate(&self) -> Result<()> {
        if self.max_outer_iters < 1 || self.inner_max_iters < 1 {
            return Err(Error::Contract("iteration counts must be >= 1".into()));
        }
        if self.inner_step <= 0.0 {
            return Err(Error::Contract("inner_step must be positive".into()));
        }
        if self.outer_tolerance < 0.0 || self.inner_tolerance < 0.0 {
            return Err(Error::Contract("tolerances must be >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of [`learn_lowrank_transform`].
#[derive(Debug, Clone)]
pub struct CcpOutcome {
    pub transform: LowRankTransform,
    /// True objective evaluated at the initial transform and at every
    /// accepted outer iterate.
    pub objective_history: Vec<f64>,
    /// False when the outer loop hit `max_outer_iters` without meeting the
    /// tolerance; the best iterate is still returned.
    pub converged: bool,
}

/// Sum of the singular values of `m`.
pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::InvalidInput("empty matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite entries".into()));
    }
    let svd = m.clone().svd(false, false);
    Ok(svd.singular_values.iter().sum())
}

/// Subgradient `U V^T` of the nuclear norm at `m`, from the thin SVD,
/// restricted to singular directions with sigma > [`TAU_RANK`] * sigma_max.
pub fn nuclear_subgradient(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite entries".into()));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let sigma_max = svd.singular_values.max();
    let cutoff = TAU_RANK * sigma_max;
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > cutoff)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    let u_k = u.select_columns(&keep);
    let v_t_k = v_t.select_rows(&keep);
    Ok(u_k * v_t_k)
}

/// The training objective `sum_c ||T Y_c||_* - ||T Y||_*`.
///
/// Mathematically nonnegative; numerically it may dip a hair below zero.
pub fn lowrank_objective(t: &LowRankTransform, y: &LabeledFeatureMatrix) -> Result<f64> {
    if t.trained_on_dim() != y.dim() {
        return Err(Error::DimensionMismatch(format!(
            "transform dim {} vs feature dim {}",
            t.trained_on_dim(),
            y.dim()
        )));
    }
    let mut class_sum = 0.0;
    for c in y.classes() {
        class_sum += nuclear_norm(&(t.matrix() * y.class_submatrix(c)))?;
    }
    let whole = nuclear_norm(&(t.matrix() * y.data()))?;
    Ok(class_sum - whole)
}

/// Learns the low-rank transform by CCP, starting from the identity.
///
/// Each outer iteration linearizes `-||T Y||_*` at the current iterate and
/// runs subgradient descent on the convex surrogate; the inner result is only
/// accepted if it improved the surrogate, which makes the true objective
/// non-increasing across outer iterates. With a single class the objective is
/// identically zero and the identity is returned untouched.
pub fn learn_lowrank_transform(y: &LabeledFeatureMatrix, config: &CcpConfig) -> Result<CcpOutcome> {
    config.validate()?;
    let d = y.dim();
    let classes = y.classes();
    let mut t = DMatrix::<f64>::identity(d, d);

    if classes.len() < 2 {
        let transform = LowRankTransform::from_matrix(t)?;
        let obj = lowrank_objective(&transform, y)?;
        return Ok(CcpOutcome {
            transform,
            objective_history: vec![obj],
            converged: true,
        });
    }

    let class_mats: Vec<DMatrix<f64>> = classes.iter().map(|&c| y.class_submatrix(c)).collect();
    let objective = |m: &DMatrix<f64>| -> Result<f64> {
        let mut s = 0.0;
        for yc in &class_mats {
            s += nuclear_norm(&(m * yc))?;
        }
        Ok(s - nuclear_norm(&(m * y.data()))?)
    };

    let mut history = vec![objective(&t)?];
    let mut converged = false;

    for _outer in 0..config.max_outer_iters {
        // Linearize the concave term at the current iterate:
        //   -||T Y||_*  ->  -<G, T>  with  G = U V^T Y^T  from  T_k Y = U S V^T.
        let lin = nuclear_subgradient(&(&t * y.data()))? * y.data().transpose();
        let surrogate = |m: &DMatrix<f64>| -> Result<f64> {
            let mut s = 0.0;
            for yc in &class_mats {
                s += nuclear_norm(&(m * yc))?;
            }
            Ok(s - lin.dot(m))
        };

        // Inner convex solve: fixed-step subgradient descent, keeping the
        // best surrogate iterate seen.
        let mut cur = t.clone();
        let mut best = t.clone();
        let mut best_val = surrogate(&t)?;
        let mut prev_val = best_val;
        for _inner in 0..config.inner_max_iters {
            let mut grad = -lin.clone();
            for yc in &class_mats {
                grad += nuclear_subgradient(&(&cur * yc))? * yc.transpose();
            }
            cur -= config.inner_step * grad;
            let val = surrogate(&cur)?;
            if val < best_val {
                best_val = val;
                best = cur.clone();
            }
            if (prev_val - val).abs() <= config.inner_tolerance {
                break;
            }
            prev_val = val;
        }

        let prev_obj = *history.last().expect("nonempty history");
        let new_obj = objective(&best)?;
        if new_obj >= prev_obj {
            // No surrogate progress translates into no objective progress;
            // the current iterate is a CCP fixed point for this step size.
            converged = true;
            break;
        }
        t = best;
        history.push(new_obj);
        let rel = (prev_obj - new_obj) / prev_obj.abs().max(f64::MIN_POSITIVE);
        if rel < config.outer_tolerance {
            converged = true;
            break;
        }
    }

    Ok(CcpOutcome {
        transform: LowRankTransform::from_matrix(t)?,
        objective_history: history,
        converged,
    })
}

/// Applies the transform to a d x M column matrix of features.
///
/// No normalization is performed; the downstream cosine matcher is invariant
/// to per-column scale.
pub fn embed(t: &LowRankTransform, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if t.trained_on_dim() != features.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "transform dim {} vs feature dim {}",
            t.trained_on_dim(),
            features.nrows()
        )));
    }
    Ok(t.matrix() * features)
}
