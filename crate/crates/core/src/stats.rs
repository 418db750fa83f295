//! Summary statistics and the paired Student t-test.

use crate::error::{invalid, mismatch, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator). Zero for fewer than two
/// values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    libm::sqrt(ss / (xs.len() - 1) as f64)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

// Modified Lentz evaluation of the continued fraction for I_x(a, b).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = libm::exp(a * libm::log(x) + b * libm::log1p(-x) - ln_beta(a, b));
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// P(|T| ≥ |t|) for Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    regularized_incomplete_beta(dof / 2.0, 0.5, x).min(1.0)
}

/// Cumulative distribution function of Student's t.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided_p(t, dof);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Result of a paired t-test on `a − b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedStats {
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t: f64,
    pub p: f64,
    /// Cohen's d of the paired differences. Positive when `a` is larger.
    pub d: f64,
    /// The differences have zero variance; t and d are 0 or ±∞.
    pub degenerate: bool,
}

pub fn paired_stats(a: &[f64], b: &[f64]) -> Result<PairedStats> {
    if a.len() != b.len() {
        return Err(mismatch!("paired samples of length {} and {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(invalid!("paired t-test needs at least 2 pairs (got {})", a.len()));
    }
    let diffs: alloc::vec::Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(invalid!("paired samples contain non-finite values"));
    }
    let n = diffs.len();
    let mean_diff = mean(&diffs);
    let sd_diff = std_dev(&diffs);
    if sd_diff == 0.0 {
        let (t, d, p) = if mean_diff == 0.0 {
            (0.0, 0.0, 1.0)
        } else {
            let inf = f64::INFINITY.copysign(mean_diff);
            (inf, inf, 0.0)
        };
        return Ok(PairedStats {
            n,
            mean_diff,
            sd_diff,
            t,
            p,
            d,
            degenerate: true,
        });
    }
    let t = mean_diff / (sd_diff / libm::sqrt(n as f64));
    Ok(PairedStats {
        n,
        mean_diff,
        sd_diff,
        t,
        p: student_t_two_sided_p(t, (n - 1) as f64),
        d: mean_diff / sd_diff,
        degenerate: false,
    })
}
