//! Sparse, spatially localized blendshape factorization.
//!
//! Difference vectors `d_i = frame_i - neutral_i` are stacked as the columns
//! of `D` (`3n x m`). The solver looks for spatial components `B` (`3n x h`)
//! and per-sample weights `C` (`h x m`) minimizing
//!
//! ```text
//! ||D - B C||_F^2 + lambda * sum_k ||C_k||_2        (C_k = k-th row of C)
//! ```
//!
//! subject to a per-column max constraint on `B` (`max |B_k| = 1`, or
//! `max B_k = 1` with `B_k >= 0`) and a local support constraint: every
//! component is zero outside a Euclidean ball around its peak vertex on the
//! template, truncated to at most `support_cap * n` vertices.
//!
//! Each outer iteration runs a proximal-gradient pass over `C` followed by a
//! sweep over the components. The sweep re-solves each `(B_k, C_k)` pair in
//! closed form (least squares, support restriction, projection onto the max
//! constraint, then exact group-shrunk weights) and keeps the new pair only
//! when it does not raise the objective, so the recorded objective never
//! increases.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{apply, diff, DeformationField, Mesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintMode {
    /// `max_j |B[j,k]| = 1`; components may deform in both directions.
    UnitMaxAbs,
    /// `max_j B[j,k] = 1` and `B >= 0`.
    UnitMaxNonneg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub h: usize,
    pub sparsity_weight: f64,
    pub local_support_radius: f64,
    pub support_cap: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub tol: f64,
    pub constraint_mode: ConstraintMode,
    pub rng_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            h: 200,
            sparsity_weight: 0.01,
            local_support_radius: 0.5,
            support_cap: 0.3,
            max_outer_iters: 100,
            max_inner_iters: 50,
            tol: 1e-6,
            constraint_mode: ConstraintMode::UnitMaxAbs,
            rng_seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::InvalidInput("component count h must be positive".into()));
        }
        if !(self.sparsity_weight >= 0.0) {
            return Err(Error::InvalidInput("sparsity_weight must be >= 0".into()));
        }
        if !(self.local_support_radius > 0.0) {
            return Err(Error::InvalidInput("local_support_radius must be > 0".into()));
        }
        if !(self.support_cap > 0.0 && self.support_cap <= 1.0) {
            return Err(Error::InvalidInput("support_cap must be in (0, 1]".into()));
        }
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return Err(Error::InvalidInput("iteration caps must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput("tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Column-stacked difference vectors, `3n x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationMatrix {
    data: DMatrix<f64>,
}

impl DeformationMatrix {
    pub fn from_matrix(data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::InvalidInput("deformation matrix needs at least one sample".into()));
        }
        if data.nrows() == 0 || !data.nrows().is_multiple_of(3) {
            return Err(Error::InvalidInput(format!(
                "row count {} is not a positive multiple of 3",
                data.nrows()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("deformation matrix"));
        }
        Ok(DeformationMatrix { data })
    }

    pub fn from_fields(fields: &[DeformationField]) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::InvalidInput("no deformation fields".into()))?;
        let rows = first.len();
        if let Some(bad) = fields.iter().find(|f| f.len() != rows) {
            return Err(Error::LengthMismatch {
                expected: rows,
                actual: bad.len(),
            });
        }
        let data = DMatrix::from_fn(rows, fields.len(), |r, c| fields[c].as_slice()[r]);
        Self::from_matrix(data)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn n_vertices(&self) -> usize {
        self.data.nrows() / 3
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn column_field(&self, j: usize) -> DeformationField {
        DeformationField::new(self.data.column(j).iter().copied().collect())
            .expect("matrix entries are finite")
    }
}

/// Column `i` is `frames[i] - neutrals[i]`.
pub fn build_difference_matrix(frames: &[Mesh], neutrals: &[Mesh]) -> Result<DeformationMatrix> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("no frames".into()));
    }
    if frames.len() != neutrals.len() {
        return Err(Error::LengthMismatch {
            expected: frames.len(),
            actual: neutrals.len(),
        });
    }
    let reference = &frames[0];
    let mut fields = Vec::with_capacity(frames.len());
    for (f, n) in frames.iter().zip(neutrals) {
        f.check_topology(reference)?;
        fields.push(diff(f, n)?);
    }
    DeformationMatrix::from_fields(&fields)
}

/// Per-iteration diagnostics recorded by [`fit_splocs`]. Entry 0 is the
/// state right after initialization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub objective: Vec<f64>,
    pub constraint_violation: Vec<f64>,
    pub max_support_fraction: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SplocsModel {
    basis: DMatrix<f64>,
    weights: DMatrix<f64>,
    template: Mesh,
    constraint_mode: ConstraintMode,
    sparsity_weight: f64,
    trace: FitTrace,
}

impl SplocsModel {
    /// Assembles a model from stored factors, re-checking the constraints.
    pub fn from_parts(
        basis: DMatrix<f64>,
        weights: DMatrix<f64>,
        template: Mesh,
        constraint_mode: ConstraintMode,
        sparsity_weight: f64,
    ) -> Result<Self> {
        if basis.nrows() != 3 * template.n_vertices() {
            return Err(Error::LengthMismatch {
                expected: 3 * template.n_vertices(),
                actual: basis.nrows(),
            });
        }
        if basis.ncols() != weights.nrows() {
            return Err(Error::LengthMismatch {
                expected: basis.ncols(),
                actual: weights.nrows(),
            });
        }
        if basis.iter().chain(weights.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("splocs factors"));
        }
        let model = SplocsModel {
            basis,
            weights,
            template,
            constraint_mode,
            sparsity_weight,
            trace: FitTrace::default(),
        };
        let violation = model.constraint_violation();
        if violation > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "components violate the {constraint_mode:?} constraint by {violation:e}"
            )));
        }
        Ok(model)
    }

    /// Spatial components, `3n x h`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Training weights, `h x m`.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn template(&self) -> &Mesh {
        &self.template
    }

    pub fn constraint_mode(&self) -> ConstraintMode {
        self.constraint_mode
    }

    pub fn sparsity_weight(&self) -> f64 {
        self.sparsity_weight
    }

    pub fn h(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_vertices(&self) -> usize {
        self.template.n_vertices()
    }

    pub fn trace(&self) -> &FitTrace {
        &self.trace
    }

    pub fn objective(&self, d: &DeformationMatrix) -> f64 {
        objective(d.matrix(), &self.basis, &self.weights, self.sparsity_weight)
    }

    /// `||D - BC||_F / ||D||_F` (0 for a zero `D` reproduced exactly).
    pub fn relative_error(&self, d: &DeformationMatrix) -> f64 {
        let resid = (d.matrix() - &self.basis * &self.weights).norm();
        let scale = d.matrix().norm();
        if scale == 0.0 {
            resid
        } else {
            resid / scale
        }
    }

    /// Largest deviation from the max constraint over all components.
    pub fn constraint_violation(&self) -> f64 {
        constraint_violation(&self.basis, self.constraint_mode)
    }

    /// Vertices with a nonzero displacement in component `k`.
    pub fn support(&self, k: usize) -> Vec<usize> {
        support_of(&self.basis, k)
    }

    pub fn max_support_fraction(&self) -> f64 {
        max_support_fraction(&self.basis)
    }

    /// `B * weights`.
    pub fn synthesize(&self, weights: &[f64]) -> Result<DeformationField> {
        if weights.len() != self.h() {
            return Err(Error::LengthMismatch {
                expected: self.h(),
                actual: weights.len(),
            });
        }
        let w = DVector::from_column_slice(weights);
        DeformationField::new((&self.basis * w).iter().copied().collect())
    }

    /// Least-squares weights of `field` in the component basis (normal
    /// equations with a `1e-8` ridge).
    pub fn project(&self, field: &DeformationField) -> Result<Vec<f64>> {
        let expected = self.basis.nrows();
        if field.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: field.len(),
            });
        }
        let projector = self.projector()?;
        Ok(projector.apply(field.as_slice()))
    }

    /// Projects every column of `d`; rows of the result are samples.
    pub fn project_matrix(&self, d: &DeformationMatrix) -> Result<DMatrix<f64>> {
        if d.matrix().nrows() != self.basis.nrows() {
            return Err(Error::LengthMismatch {
                expected: self.basis.nrows(),
                actual: d.matrix().nrows(),
            });
        }
        let projector = self.projector()?;
        let bt_d = self.basis.transpose() * d.matrix();
        Ok(projector.chol.solve(&bt_d).transpose())
    }

    fn projector(&self) -> Result<Projector<'_>> {
        let mut gram = self.basis.transpose() * &self.basis;
        for i in 0..gram.nrows() {
            gram[(i, i)] += PROJECT_RIDGE;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Singular("component Gram matrix".into()))?;
        Ok(Projector {
            basis: &self.basis,
            chol,
        })
    }
}

const PROJECT_RIDGE: f64 = 1e-8;

struct Projector<'a> {
    basis: &'a DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Projector<'_> {
    fn apply(&self, field: &[f64]) -> Vec<f64> {
        let f = DVector::from_column_slice(field);
        let rhs = self.basis.transpose() * f;
        self.chol.solve(&rhs).iter().copied().collect()
    }
}

fn objective(d: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, lambda: f64) -> f64 {
    let fit = (d - b * c).norm_squared();
    fit + lambda * group_norm(c)
}

fn group_norm(c: &DMatrix<f64>) -> f64 {
    c.row_iter().map(|r| r.norm()).sum()
}

fn constraint_violation(b: &DMatrix<f64>, mode: ConstraintMode) -> f64 {
    b.column_iter()
        .map(|col| match mode {
            ConstraintMode::UnitMaxAbs => (col.amax() - 1.0).abs(),
            ConstraintMode::UnitMaxNonneg => {
                let max = col.max();
                let neg = (-col.min()).max(0.0);
                (max - 1.0).abs().max(neg)
            }
        })
        .fold(0.0, f64::max)
}

fn support_of(b: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let col = b.column(k);
    (0..b.nrows() / 3)
        .filter(|&v| (0..3).any(|c| col[3 * v + c] != 0.0))
        .collect()
}

fn max_support_fraction(b: &DMatrix<f64>) -> f64 {
    let n = (b.nrows() / 3).max(1) as f64;
    (0..b.ncols())
        .map(|k| support_of(b, k).len() as f64 / n)
        .fold(0.0, f64::max)
}

/// Fits the localized factorization of `d` relative to `template`.
///
/// `template` supplies vertex positions for the support balls and is stored
/// in the model as the mesh the deformations apply to.
pub fn fit_splocs(d: &DeformationMatrix, template: &Mesh, cfg: &SolverConfig) -> Result<SplocsModel> {
    cfg.validate()?;
    let n = d.n_vertices();
    let m = d.n_samples();
    if template.n_vertices() != n {
        return Err(Error::TopologyMismatch(format!(
            "template has {} vertices, deformation matrix has {n}",
            template.n_vertices()
        )));
    }
    if cfg.h > (3 * n).min(m) {
        log::warn!(
            "h = {} exceeds min(3n, m) = {}; extra components will be degenerate",
            cfg.h,
            (3 * n).min(m)
        );
    }

    let mut solver = Solver::new(d.matrix(), template, cfg);
    solver.initialize();
    solver.record();

    for _ in 0..cfg.max_outer_iters {
        let before = *solver.trace.objective.last().expect("initial entry");
        solver.update_weights();
        solver.update_components();
        solver.refresh_residual();
        solver.record();
        let after = *solver.trace.objective.last().expect("just recorded");
        if before <= 0.0 || (before - after) / before < cfg.tol {
            break;
        }
    }

    Ok(SplocsModel {
        basis: solver.b,
        weights: solver.c,
        template: template.clone(),
        constraint_mode: cfg.constraint_mode,
        sparsity_weight: cfg.sparsity_weight,
        trace: solver.trace,
    })
}

struct Solver<'a> {
    d: &'a DMatrix<f64>,
    positions: &'a [[f64; 3]],
    cfg: &'a SolverConfig,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    residual: DMatrix<f64>,
    max_support: usize,
    rng: ChaCha8Rng,
    trace: FitTrace,
}

impl<'a> Solver<'a> {
    fn new(d: &'a DMatrix<f64>, template: &'a Mesh, cfg: &'a SolverConfig) -> Self {
        let n = template.n_vertices();
        let max_support = ((cfg.support_cap * n as f64).floor() as usize).max(1);
        Solver {
            d,
            positions: template.vertices(),
            cfg,
            b: DMatrix::zeros(d.nrows(), cfg.h),
            c: DMatrix::zeros(cfg.h, d.ncols()),
            residual: d.clone(),
            max_support,
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            trace: FitTrace::default(),
        }
    }

    fn lambda(&self) -> f64 {
        self.cfg.sparsity_weight
    }

    fn record(&mut self) {
        let obj = self.residual.norm_squared() + self.lambda() * group_norm(&self.c);
        self.trace.objective.push(obj);
        self.trace
            .constraint_violation
            .push(constraint_violation(&self.b, self.cfg.constraint_mode));
        self.trace
            .max_support_fraction
            .push(max_support_fraction(&self.b));
    }

    fn refresh_residual(&mut self) {
        self.residual = self.d - &self.b * &self.c;
    }

    /// Seeds components one at a time at the vertex with the largest
    /// residual energy, deflating the residual after each.
    fn initialize(&mut self) {
        for k in 0..self.cfg.h {
            let (b, c) = self.seed_component(&self.residual.clone());
            self.residual -= &b * c.transpose();
            self.b.set_column(k, &b);
            self.c.set_row(k, &c.transpose());
        }
    }

    fn seed_component(&mut self, resid: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = resid.nrows() / 3;
        let energy: Vec<f64> = (0..n)
            .map(|v| (0..3).map(|c| resid.row(3 * v + c).norm_squared()).sum())
            .collect();
        let peak = self.argmax_tiebreak(&energy);
        // strongest coordinate row of the peak vertex drives the first guess
        let row = (0..3)
            .map(|c| 3 * peak + c)
            .max_by(|&a, &b| {
                resid
                    .row(a)
                    .norm_squared()
                    .total_cmp(&resid.row(b).norm_squared())
                    .then(b.cmp(&a))
            })
            .expect("three coordinates");
        let driver: DVector<f64> = resid.row(row).transpose();
        let dn2 = driver.norm_squared();
        if dn2 == 0.0 {
            return self.fallback_component(peak, resid.ncols());
        }
        let b_ls = resid * &driver / dn2;
        self.constrained_component(resid, b_ls)
    }

    /// Unit displacement on the first coordinate of `vertex`, zero weights.
    fn fallback_component(&self, vertex: usize, m: usize) -> (DVector<f64>, DVector<f64>) {
        let mut b = DVector::zeros(self.d.nrows());
        b[3 * vertex] = 1.0;
        (b, DVector::zeros(m))
    }

    /// Projects an unconstrained component estimate onto the feasible set and
    /// solves the matching weight row exactly.
    fn constrained_component(
        &mut self,
        resid: &DMatrix<f64>,
        mut b: DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let n = b.len() / 3;
        let m = resid.ncols();
        let norms: Vec<f64> = (0..n)
            .map(|v| (b[3 * v].powi(2) + b[3 * v + 1].powi(2) + b[3 * v + 2].powi(2)).sqrt())
            .collect();
        let peak = self.argmax_tiebreak(&norms);
        if norms[peak] == 0.0 {
            return self.fallback_component(peak, m);
        }
        let support = self.support_ball(peak);
        let mut keep = vec![false; n];
        for &v in &support {
            keep[v] = true;
        }
        for v in 0..n {
            if !keep[v] {
                b[3 * v] = 0.0;
                b[3 * v + 1] = 0.0;
                b[3 * v + 2] = 0.0;
            }
        }

        let scale = match self.cfg.constraint_mode {
            ConstraintMode::UnitMaxAbs => b.amax(),
            ConstraintMode::UnitMaxNonneg => {
                if (-b.min()) > b.max() {
                    b.neg_mut();
                }
                b.apply(|x| *x = x.max(0.0));
                b.max()
            }
        };
        if !(scale > 0.0) {
            return self.fallback_component(peak, m);
        }
        b /= scale;
        // the peak entry is exactly 1 after division only up to rounding
        let imax = match self.cfg.constraint_mode {
            ConstraintMode::UnitMaxAbs => b.iamax(),
            ConstraintMode::UnitMaxNonneg => b.imax(),
        };
        b[imax] = b[imax].signum();

        let c = self.weight_row(resid, &b);
        (b, c)
    }

    /// `argmin_c ||R - b c^T||^2 + lambda ||c||`.
    fn weight_row(&self, resid: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
        let bn2 = b.norm_squared();
        let c_ls = resid.tr_mul(b) / bn2;
        shrink(c_ls, self.lambda() / (2.0 * bn2))
    }

    fn support_ball(&self, peak: usize) -> Vec<usize> {
        let center = self.positions[peak];
        let r2 = self.cfg.local_support_radius * self.cfg.local_support_radius;
        let mut inside: Vec<(f64, usize)> = self
            .positions
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let d2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2);
                (d2 <= r2).then_some((d2, i))
            })
            .collect();
        if inside.len() > self.max_support {
            inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            inside.truncate(self.max_support);
        }
        inside.into_iter().map(|(_, i)| i).collect()
    }

    fn argmax_tiebreak(&mut self, values: &[f64]) -> usize {
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = (0..values.len()).filter(|&i| values[i] == max).collect();
        if ties.len() == 1 {
            ties[0]
        } else {
            *ties.choose(&mut self.rng).expect("non-empty")
        }
    }

    /// Proximal gradient on `C` with row-group shrinkage, step `1/L`.
    fn update_weights(&mut self) {
        let gram = self.b.tr_mul(&self.b);
        let lipschitz = 2.0 * gram.clone().symmetric_eigenvalues().max();
        if !(lipschitz > 0.0) {
            return;
        }
        let bt_d = self.b.tr_mul(self.d);
        let step = 1.0 / lipschitz;
        let thresh = self.lambda() * step;
        let mut c = self.c.clone();
        for _ in 0..self.cfg.max_inner_iters {
            let grad = (&gram * &c - &bt_d) * 2.0;
            let mut next = &c - grad * step;
            for k in 0..next.nrows() {
                let row: DVector<f64> = next.row(k).transpose();
                next.set_row(k, &shrink(row, thresh).transpose());
            }
            let change = (&next - &c).norm();
            let size = c.norm();
            c = next;
            if change <= 1e-12 * (1.0 + size) {
                break;
            }
        }
        self.c = c;
        self.refresh_residual();
    }

    /// One block sweep over the components. A candidate pair replaces the
    /// current one only if the objective does not increase.
    fn update_components(&mut self) {
        let lambda = self.lambda();
        for k in 0..self.cfg.h {
            let b_old: DVector<f64> = self.b.column(k).into_owned();
            let c_old: DVector<f64> = self.c.row(k).transpose();
            // residual with component k removed
            self.residual += &b_old * c_old.transpose();
            let resid = self.residual.clone();

            let cn2 = c_old.norm_squared();
            let (b_new, c_new) = if cn2 > 0.0 {
                let b_ls = &resid * &c_old / cn2;
                self.constrained_component(&resid, b_ls)
            } else {
                self.seed_component(&resid)
            };

            let local = |b: &DVector<f64>, c: &DVector<f64>| {
                let cross = resid.tr_mul(b).dot(c);
                -2.0 * cross + b.norm_squared() * c.norm_squared() + lambda * c.norm()
            };
            let (b, c) = if local(&b_new, &c_new) <= local(&b_old, &c_old) {
                (b_new, c_new)
            } else {
                (b_old, c_old)
            };
            self.residual -= &b * c.transpose();
            self.b.set_column(k, &b);
            self.c.set_row(k, &c.transpose());
        }
    }
}

/// Group soft-threshold: `v * max(0, 1 - t / ||v||)`.
fn shrink(v: DVector<f64>, t: f64) -> DVector<f64> {
    if t <= 0.0 {
        return v;
    }
    let norm = v.norm();
    if norm <= t {
        DVector::zeros(v.len())
    } else {
        v * (1.0 - t / norm)
    }
}

/// Elementwise mean of equally sized fields.
pub fn mean_field(fields: &[DeformationField]) -> Result<DeformationField> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidInput("mean of zero fields".into()))?;
    let len = first.len();
    let mut acc = vec![0.0; len];
    for f in fields {
        if f.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: f.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(f.as_slice()) {
            *a += x;
        }
    }
    let count = fields.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    DeformationField::new(acc)
}

/// Template displaced by the mean of `fields`.
pub fn mean_shape(fields: &[DeformationField], template: &Mesh) -> Result<Mesh> {
    apply(template, &mean_field(fields)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::grid_surface;
    use rand::Rng;

    fn random_positions(n: usize, seed: u64) -> Mesh {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let verts = (0..n)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        Mesh::new(verts, vec![]).unwrap()
    }

    fn global_cfg(h: usize) -> SolverConfig {
        SolverConfig {
            h,
            sparsity_weight: 0.0,
            local_support_radius: f64::INFINITY,
            support_cap: 1.0,
            max_outer_iters: 500,
            tol: 1e-12,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn rank_one_recovered_exactly() {
        let n = 40;
        let template = random_positions(n, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scales: Vec<f64> = (0..25).map(|j| 0.2 + j as f64 * 0.1).collect();
        let d = DMatrix::from_fn(3 * n, scales.len(), |r, c| shape[r] * scales[c]);
        let d = DeformationMatrix::from_matrix(d).unwrap();
        let model = fit_splocs(&d, &template, &global_cfg(1)).unwrap();
        assert!(model.relative_error(&d) <= 1e-6, "{}", model.relative_error(&d));
        assert!(model.constraint_violation() < 1e-12);
    }

    #[test]
    fn zero_matrix_gives_zero_weights() {
        let template = random_positions(10, 3);
        let d = DeformationMatrix::from_matrix(DMatrix::zeros(30, 7)).unwrap();
        let model = fit_splocs(&d, &template, &global_cfg(3)).unwrap();
        assert!(model.weights().iter().all(|&x| x == 0.0));
        assert_eq!(model.objective(&d), 0.0);
        assert!(model.constraint_violation() < 1e-12);
    }

    #[test]
    fn nonneg_mode_keeps_components_nonnegative() {
        let template = grid_surface(8, 8, |_, _| 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = DMatrix::from_fn(3 * 64, 20, |_, _| rng.random_range(-1.0..1.0));
        let d = DeformationMatrix::from_matrix(d).unwrap();
        let cfg = SolverConfig {
            h: 4,
            constraint_mode: ConstraintMode::UnitMaxNonneg,
            local_support_radius: 0.6,
            max_outer_iters: 20,
            ..SolverConfig::default()
        };
        let model = fit_splocs(&d, &template, &cfg).unwrap();
        assert!(model.basis().iter().all(|&x| x >= 0.0));
        for col in model.basis().column_iter() {
            assert_eq!(col.max(), 1.0);
        }
        for w in model.trace().objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(model.max_support_fraction() <= 0.3 + 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let template = random_positions(2, 0);
        let mut m = DMatrix::zeros(6, 2);
        m[(0, 0)] = f64::NAN;
        assert!(DeformationMatrix::from_matrix(m).is_err());
        let d = DeformationMatrix::from_matrix(DMatrix::zeros(6, 2)).unwrap();
        let cfg = SolverConfig { h: 0, ..SolverConfig::default() };
        assert!(fit_splocs(&d, &template, &cfg).is_err());
        assert!(fit_splocs(&d, &random_positions(3, 0), &global_cfg(1)).is_err());
    }

    #[test]
    fn difference_matrix_examples() {
        let a = grid_surface(3, 3, |_, _| 0.0);
        let b = grid_surface(3, 3, |x, y| x * y);
        let d = build_difference_matrix(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert!(d.matrix().iter().all(|&x| x == 0.0));
        let d = build_difference_matrix(std::slice::from_ref(&b), std::slice::from_ref(&a)).unwrap();
        assert_eq!(d.matrix().ncols(), 1);
        assert_eq!(d.column_field(0), diff(&b, &a).unwrap());
        assert!(build_difference_matrix(&[], &[]).is_err());
        let other = grid_surface(3, 4, |_, _| 0.0);
        assert!(build_difference_matrix(&[a.clone(), other.clone()], &[a, other]).is_err());
    }

    #[test]
    fn synthesize_and_project_check_lengths() {
        let template = random_positions(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = DMatrix::from_fn(15, 6, |_, _| rng.random_range(-1.0..1.0));
        let d = DeformationMatrix::from_matrix(d).unwrap();
        let model = fit_splocs(&d, &template, &global_cfg(2)).unwrap();
        assert!(model.synthesize(&[1.0]).is_err());
        assert!(model.project(&DeformationField::zeros(4)).is_err());
        let zero = model.synthesize(&[0.0, 0.0]).unwrap();
        assert!(zero.as_slice().iter().all(|&x| x == 0.0));
        let w = model.project(&DeformationField::zeros(5)).unwrap();
        assert!(w.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn mean_shape_examples() {
        let template = grid_surface(3, 3, |_, _| 0.0);
        let f = diff(&grid_surface(3, 3, |x, _| x), &template).unwrap();
        assert_eq!(mean_shape(std::slice::from_ref(&f), &template).unwrap(), apply(&template, &f).unwrap());
        assert_eq!(mean_shape(&[f.clone(), f.negated()], &template).unwrap(), template);
        assert!(mean_shape(&[], &template).is_err());
    }

    #[test]
    fn shrink_thresholds_groups() {
        let v = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(shrink(v.clone(), 10.0), DVector::zeros(2));
        let s = shrink(v, 2.5);
        assert!((s.norm() - 2.5).abs() < 1e-12);
    }
}
