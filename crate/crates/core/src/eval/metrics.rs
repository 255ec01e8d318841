use crate::error::{Error, Result};

/// Population (1/N) moments of a paired series.
struct Moments {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn moments(x: &[f64], y: &[f64], min_len: usize) -> Result<Moments> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < min_len {
        return Err(Error::InvalidInput(format!(
            "need at least {min_len} samples, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input"));
    }
    let n = x.len() as f64;
    let mean_of = |v: &[f64]| {
        if v.iter().all(|&a| a == v[0]) {
            v[0]
        } else {
            v.iter().sum::<f64>() / n
        }
    };
    let mean_x = mean_of(x);
    let mean_y = mean_of(y);
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    Ok(Moments {
        mean_x,
        mean_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov: cov / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concordance {
    pub value: f64,
    /// Both series constant with equal means; the coefficient is 0/0 and
    /// reported as 0.
    pub degenerate: bool,
}

/// Concordance correlation coefficient with population moments,
/// `2 s_xy / (s_x^2 + s_y^2 + (mean_x - mean_y)^2)`.
pub fn ccc_checked(x: &[f64], y: &[f64]) -> Result<Concordance> {
    let m = moments(x, y, 2)?;
    let denom = m.var_x + m.var_y + (m.mean_x - m.mean_y).powi(2);
    if denom == 0.0 {
        return Ok(Concordance {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Concordance {
        value: (2.0 * m.cov / denom).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    ccc_checked(x, y).map(|c| c.value)
}

/// Pearson correlation; errors when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let m = moments(x, y, 2)?;
    if m.var_x == 0.0 || m.var_y == 0.0 {
        return Err(Error::InvalidInput("pearson correlation of a constant series".into()));
    }
    Ok((m.cov / (m.var_x.sqrt() * m.var_y.sqrt())).clamp(-1.0, 1.0))
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::InvalidInput("mse of empty series".into()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
}
