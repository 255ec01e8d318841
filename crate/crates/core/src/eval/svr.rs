//! Epsilon-insensitive support vector regression with an RBF kernel,
//! trained in the dual by SMO with maximal-violating-pair selection.
//!
//! The dual is written over `2N` variables `(alpha, alpha*)` as
//! `min 1/2 a^T Q a + p^T a` s.t. `s^T a = 0`, `0 <= a <= C`, with signs
//! `s = (+1...,-1...)`, `Q_ij = s_i s_j K(x_i, x_j)`,
//! `p = (eps - y, eps + y)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvrParams {
    pub gamma: f64,
    pub c: f64,
    pub epsilon: f64,
    /// Stop when the maximal KKT violation drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl SvrParams {
    pub fn new(gamma: f64, c: f64, epsilon: f64) -> Self {
        SvrParams {
            gamma,
            c,
            epsilon,
            tol: 1e-3,
            max_iter: 10_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvrModel {
    support_vectors: DMatrix<f64>,
    dual_coeffs: Vec<f64>,
    bias: f64,
    gamma: f64,
    epsilon: f64,
    c: f64,
    kkt_gap: f64,
    iterations: usize,
}

impl SvrModel {
    pub fn support_vectors(&self) -> &DMatrix<f64> {
        &self.support_vectors
    }

    /// `alpha_i - alpha*_i` for each support vector.
    pub fn dual_coeffs(&self) -> &[f64] {
        &self.dual_coeffs
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// Maximal KKT violation at termination.
    pub fn kkt_gap(&self) -> f64 {
        self.kkt_gap
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.support_vectors.ncols() && self.support_vectors.nrows() > 0 {
            return Err(Error::LengthMismatch {
                expected: self.support_vectors.ncols(),
                actual: x.ncols(),
            });
        }
        Ok((0..x.nrows())
            .map(|r| {
                let row: Vec<f64> = x.row(r).iter().copied().collect();
                self.predict_one(&row)
            })
            .collect())
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        let mut f = self.bias;
        for (i, beta) in self.dual_coeffs.iter().enumerate() {
            let sv = self.support_vectors.row(i);
            let d2: f64 = sv.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            f += beta * (-self.gamma * d2).exp();
        }
        f
    }
}

fn sq_dist(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j).iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

/// `1 / (2 * median^2)` of the pairwise Euclidean distances between rows.
pub fn median_gamma(x: &DMatrix<f64>) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidInput("median heuristic needs two samples".into()));
    }
    let mut d2: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d2.push(sq_dist(x, i, j));
        }
    }
    let med2 = crate::va_grid::median(d2);
    if !(med2 > 0.0) {
        return Err(Error::Degenerate("median pairwise distance is zero".into()));
    }
    Ok(1.0 / (2.0 * med2))
}

pub fn svr_fit(x: &DMatrix<f64>, y: &[f64], params: &SvrParams) -> Result<SvrModel> {
    let l = x.nrows();
    if y.len() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            actual: y.len(),
        });
    }
    if l == 0 {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SVR training data"));
    }
    if !(params.gamma > 0.0 && params.c > 0.0 && params.epsilon >= 0.0 && params.tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "need gamma > 0, C > 0, epsilon >= 0 (got {}, {}, {})",
            params.gamma, params.c, params.epsilon
        )));
    }

    let kernel = DMatrix::from_fn(l, l, |i, j| (-params.gamma * sq_dist(x, i, j)).exp());
    let c = params.c;
    let sign = |t: usize| if t < l { 1.0 } else { -1.0 };
    let q = |s: usize, t: usize| sign(s) * sign(t) * kernel[(s % l, t % l)];

    let mut alpha = vec![0.0; 2 * l];
    let mut grad: Vec<f64> = (0..2 * l)
        .map(|t| if t < l { params.epsilon - y[t] } else { params.epsilon + y[t - l] })
        .collect();

    let mut iterations = 0;
    let gap = loop {
        let (i, j, gap) = select_pair(&alpha, &grad, c, l);
        if gap < params.tol || i.is_none() || j.is_none() {
            break gap;
        }
        if iterations >= params.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                residual: gap,
            });
        }
        let (i, j) = (i.expect("checked"), j.expect("checked"));
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (qii, qjj, qij) = (q(i, i), q(j, j), q(i, j));
        if sign(i) != sign(j) {
            let quad = (qii + qjj + 2.0 * qij).max(1e-12);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (qii + qjj - 2.0 * qij).max(1e-12);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += q(t, i) * di + q(t, j) * dj;
        }
        iterations += 1;
    };

    let rho = compute_rho(&alpha, &grad, c, l);
    let mut rows = Vec::new();
    let mut dual_coeffs = Vec::new();
    for i in 0..l {
        let beta = alpha[i] - alpha[i + l];
        if beta != 0.0 {
            rows.push(x.row(i).into_owned());
            dual_coeffs.push(beta);
        }
    }
    let support_vectors = if rows.is_empty() {
        DMatrix::zeros(0, x.ncols())
    } else {
        DMatrix::from_rows(&rows)
    };
    Ok(SvrModel {
        support_vectors,
        dual_coeffs,
        bias: -rho,
        gamma: params.gamma,
        epsilon: params.epsilon,
        c,
        kkt_gap: gap.max(0.0),
        iterations,
    })
}

/// Maximal violating pair; ties resolve to the lowest index.
fn select_pair(alpha: &[f64], grad: &[f64], c: f64, l: usize) -> (Option<usize>, Option<usize>, f64) {
    let mut up_max = f64::NEG_INFINITY;
    let mut low_min = f64::INFINITY;
    let (mut i_up, mut i_low) = (None, None);
    for t in 0..alpha.len() {
        let positive = t < l;
        let v = if positive { -grad[t] } else { grad[t] };
        let in_up = if positive { alpha[t] < c } else { alpha[t] > 0.0 };
        let in_low = if positive { alpha[t] > 0.0 } else { alpha[t] < c };
        if in_up && v > up_max {
            up_max = v;
            i_up = Some(t);
        }
        if in_low && v < low_min {
            low_min = v;
            i_low = Some(t);
        }
    }
    (i_up, i_low, up_max - low_min)
}

fn compute_rho(alpha: &[f64], grad: &[f64], c: f64, l: usize) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..alpha.len() {
        let positive = t < l;
        let yg = if positive { grad[t] } else { -grad[t] };
        if alpha[t] >= c {
            if positive {
                lb = lb.max(yg);
            } else {
                ub = ub.min(yg);
            }
        } else if alpha[t] <= 0.0 {
            if positive {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            sum_free += yg;
            n_free += 1;
        }
    }
    if n_free > 0 {
        sum_free / n_free as f64
    } else {
        0.5 * (ub + lb)
    }
}
