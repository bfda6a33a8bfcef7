//! Independent numerical reference routines used by the test-suite.
//!
//! Everything here is deliberately written *without* the tensor core or the
//! model code so it can act as a second opinion: dense LU for log-dets,
//! central finite differences for gradients, classical quadrature, and the
//! Kolmogorov-Smirnov machinery for distributional checks.

/// ln|det A| of a dense row-major n x n matrix via LU with partial pivoting.
///
/// Returns negative infinity for a (numerically) singular matrix.
pub fn lu_log_abs_det(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n, "matrix must be n*n");
    let mut m = a.to_vec();
    let mut log_det = 0.0;
    for col in 0..n {
        // pivot on the largest magnitude in this column
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for row in col + 1..n {
            let v = m[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 {
            return f64::NEG_INFINITY;
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
        }
        let diag = m[col * n + col];
        log_det += diag.abs().ln();
        for row in col + 1..n {
            let factor = m[row * n + col] / diag;
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
        }
    }
    log_det
}

/// Central finite-difference gradient of a scalar function of a flat vector.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + eps;
        let plus = f(&x);
        x[i] = x0[i] - eps;
        let minus = f(&x);
        x[i] = x0[i];
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Trapezoid-rule integral of `f` over [a, b] with `n` panels.
pub fn trapezoid(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n > 0);
    let h = (b - a) / n as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for i in 1..n {
        s += f(a + i as f64 * h);
    }
    s * h
}

/// Standard normal CDF via the Abramowitz-Stegun erf approximation
/// (absolute error below 1.5e-7, ample for distributional tests).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Kolmogorov-Smirnov statistic of `samples` against a theoretical CDF.
pub fn ks_statistic(samples: &[f64], cdf: &dyn Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN sample in KS test"));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let c = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((c - lo).abs()).max((hi - c).abs());
    }
    d
}

/// Asymptotic two-sided p-value for a KS statistic `d` at sample size `n`.
///
/// Uses the alternating Kolmogorov series for moderate arguments and its
/// Jacobi-theta dual for small ones, where the alternating form converges
/// too slowly to truncate.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sqrt_n = (n as f64).sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    if lambda < 1e-10 {
        return 1.0;
    }
    if lambda < 0.4 {
        // p = 1 - CDF with CDF = sqrt(2 pi)/lambda * sum exp(-(2k-1)^2 pi^2 / (8 lambda^2))
        let mut cdf = 0.0;
        for k in 1..=10u32 {
            let m = (2 * k - 1) as f64;
            cdf += (-m * m * std::f64::consts::PI * std::f64::consts::PI
                / (8.0 * lambda * lambda))
                .exp();
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut p = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        p += term;
        sign = -sign;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (2.0 * p).clamp(0.0, 1.0)
}
