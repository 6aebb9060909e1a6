//! Augmented Dickey-Fuller regression.
//!
//! OLS fit of `dy_t = alpha + gamma * y_{t-1} + sum_i beta_i * dy_{t-i}`
//! (intercept, no trend term). The reported statistic is the t-value of
//! `gamma`; more negative means stronger stationarity. Critical-value
//! lookup is out of scope.

use super::FeatureError;

#[derive(Clone, Copy, Debug)]
pub struct AdfRegression {
    pub gamma: f64,
    pub se: f64,
    pub t_stat: f64,
    pub n_obs: usize,
    pub max_lag: usize,
}

/// t-statistic of the unit-root coefficient.
pub fn adf_statistic(series: &[f64], max_lag: usize) -> Result<f64, FeatureError> {
    Ok(adf_regression(series, max_lag)?.t_stat)
}

pub fn adf_regression(series: &[f64], max_lag: usize) -> Result<AdfRegression, FeatureError> {
    let n = series.len();
    let k = 2 + max_lag;
    // need positive degrees of freedom: n_obs = n - 1 - max_lag > k
    if n < max_lag + 3 || n - 1 - max_lag <= k {
        return Err(FeatureError::SeriesTooShort { len: n, max_lag });
    }
    let n_obs = n - 1 - max_lag;
    let mut x = vec![0.0; n_obs * k];
    let mut y = vec![0.0; n_obs];
    let dy = |t: usize| series[t] - series[t - 1];
    for (row, t) in (max_lag + 1..n).enumerate() {
        y[row] = dy(t);
        x[row * k] = 1.0;
        x[row * k + 1] = series[t - 1];
        for i in 1..=max_lag {
            x[row * k + 1 + i] = dy(t - i);
        }
    }
    // normal equations
    let mut xtx = vec![0.0; k * k];
    let mut xty = vec![0.0; k];
    for row in 0..n_obs {
        let xr = &x[row * k..(row + 1) * k];
        for a in 0..k {
            xty[a] += xr[a] * y[row];
            for b in 0..k {
                xtx[a * k + b] += xr[a] * xr[b];
            }
        }
    }
    let inv = invert(&xtx, k)?;
    let mut beta = vec![0.0; k];
    for a in 0..k {
        for b in 0..k {
            beta[a] += inv[a * k + b] * xty[b];
        }
    }
    let mut rss = 0.0;
    for row in 0..n_obs {
        let xr = &x[row * k..(row + 1) * k];
        let pred: f64 = xr.iter().zip(&beta).map(|(a, b)| a * b).sum();
        let r = y[row] - pred;
        rss += r * r;
    }
    let s2 = rss / (n_obs - k) as f64;
    let se = (s2 * inv[k + 1]).sqrt(); // inv[1][1]
    let gamma = beta[1];
    let t_stat = if se == 0.0 {
        if gamma < 0.0 {
            f64::NEG_INFINITY
        } else if gamma > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        gamma / se
    };
    Ok(AdfRegression {
        gamma,
        se,
        t_stat,
        n_obs,
        max_lag,
    })
}

/// Gauss-Jordan inverse with partial pivoting for small symmetric systems.
fn invert(m: &[f64], k: usize) -> Result<Vec<f64>, FeatureError> {
    let scale = m.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if scale == 0.0 {
        return Err(FeatureError::SingularRegression);
    }
    let mut a = m.to_vec();
    let mut inv = vec![0.0; k * k];
    for i in 0..k {
        inv[i * k + i] = 1.0;
    }
    for col in 0..k {
        let mut piv = col;
        for r in col + 1..k {
            if a[r * k + col].abs() > a[piv * k + col].abs() {
                piv = r;
            }
        }
        if a[piv * k + col].abs() < 1e-13 * scale {
            return Err(FeatureError::SingularRegression);
        }
        if piv != col {
            for c in 0..k {
                a.swap(col * k + c, piv * k + c);
                inv.swap(col * k + c, piv * k + c);
            }
        }
        let d = a[col * k + col];
        for c in 0..k {
            a[col * k + c] /= d;
            inv[col * k + c] /= d;
        }
        for r in 0..k {
            if r == col {
                continue;
            }
            let f = a[r * k + col];
            if f == 0.0 {
                continue;
            }
            for c in 0..k {
                a[r * k + c] -= f * a[col * k + c];
                inv[r * k + c] -= f * inv[col * k + c];
            }
        }
    }
    Ok(inv)
}
