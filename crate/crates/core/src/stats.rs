//! Rank correlation, Kruskal–Wallis, least squares and Bonferroni.
//!
//! Statistics are computed in the caller's float type; p-values go through
//! `statrs` distributions in `f64`.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("need at least two groups")]
    TooFewGroups,
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("x is constant")]
    ConstantX,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult<T> {
    pub statistic: T,
    pub p_value: T,
    pub n: usize,
    /// The statistic is undefined or trivially zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit<T> {
    pub slope: T,
    pub intercept: T,
    pub r_squared: T,
}

impl<T: Float> LinearFit<T> {
    pub fn predict(&self, x: T) -> T {
        self.intercept + self.slope * x
    }
}

fn cast<T: Float>(x: f64) -> T {
    T::from(x).expect("float literal")
}

fn count<T: Float>(n: usize) -> T {
    T::from(n).expect("count fits in float")
}

pub fn mean<T: Float>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::nan();
    }
    xs.iter().fold(T::zero(), |a, &x| a + x) / count(xs.len())
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn std_dev<T: Float>(xs: &[T]) -> T {
    if xs.len() < 2 {
        return T::zero();
    }
    let m = mean(xs);
    let ss = xs.iter().fold(T::zero(), |a, &x| a + (x - m) * (x - m));
    (ss / count(xs.len() - 1)).sqrt()
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks<T: Float>(xs: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("ranks of NaN"));
    let mut ranks = vec![T::zero(); xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && xs[idx[j]] == xs[idx[i]] {
            j += 1;
        }
        // Positions i..j share the average of ranks i+1..=j.
        let avg = count::<T>(i + j + 1) / cast(2.0);
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn pearson<T: Float>(x: &[T], y: &[T]) -> Option<T> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        sxy = sxy + (a - mx) * (b - my);
        sxx = sxx + (a - mx) * (a - mx);
        syy = syy + (b - my) * (b - my);
    }
    if sxx == T::zero() || syy == T::zero() {
        return None;
    }
    let r = sxy / (sxx * syy).sqrt();
    Some(r.max(-T::one()).min(T::one()))
}

/// Spearman's ρ with a two-sided p-value from the t approximation on n − 2
/// degrees of freedom. Constant input gives a degenerate NaN result.
pub fn spearman<T: Float>(x: &[T], y: &[T]) -> Result<TestResult<T>, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFew { needed: 3, got: n });
    }
    let Some(rho) = pearson(&average_ranks(x), &average_ranks(y)) else {
        return Ok(TestResult {
            statistic: T::nan(),
            p_value: T::nan(),
            n,
            degenerate: true,
        });
    };
    let r = rho.to_f64().expect("finite");
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(TestResult {
        statistic: rho,
        p_value: cast(p),
        n,
        degenerate: false,
    })
}

/// Kruskal–Wallis H with tie correction; p from χ² with k − 1 degrees of
/// freedom. All-equal input gives H = 0, p = 1, flagged degenerate.
pub fn kruskal_wallis<T: Float>(groups: &[Vec<T>]) -> Result<TestResult<T>, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups);
    }
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(StatsError::EmptyGroup(i));
    }
    let all: Vec<T> = groups.iter().flatten().copied().collect();
    let n = all.len();
    let ranks = average_ranks(&all);
    let nf: T = count(n);

    let mut ties = T::zero();
    let mut sorted = all.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in sample"));
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t: T = count(j - i);
        ties = ties + t * t * t - t;
        i = j;
    }
    let correction = T::one() - ties / (nf * nf * nf - nf);
    if correction <= T::zero() {
        return Ok(TestResult {
            statistic: T::zero(),
            p_value: T::one(),
            n,
            degenerate: true,
        });
    }

    let mut offset = 0;
    let mut sum = T::zero();
    for g in groups {
        let r = ranks[offset..offset + g.len()]
            .iter()
            .fold(T::zero(), |a, &x| a + x);
        sum = sum + r * r / count(g.len());
        offset += g.len();
    }
    let twelve: T = cast(12.0);
    let three: T = cast(3.0);
    let h = (twelve / (nf * (nf + T::one())) * sum - three * (nf + T::one())) / correction;
    let h = h.max(T::zero());
    let dist = ChiSquared::new((groups.len() - 1) as f64).expect("positive degrees of freedom");
    let p = dist.sf(h.to_f64().expect("finite")).clamp(0.0, 1.0);
    Ok(TestResult {
        statistic: h,
        p_value: cast(p),
        n,
        degenerate: false,
    })
}

/// Ordinary least squares `y ≈ intercept + slope·x`. R² is 1 when y is
/// constant (the fit is exact).
pub fn ols_fit<T: Float>(x: &[T], y: &[T]) -> Result<LinearFit<T>, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: x.len(),
        });
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx) = (T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        sxy = sxy + (a - mx) * (b - my);
        sxx = sxx + (a - mx) * (a - mx);
    }
    if sxx == T::zero() {
        return Err(StatsError::ConstantX);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (mut ss_res, mut ss_tot) = (T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let e = b - (intercept + slope * a);
        ss_res = ss_res + e * e;
        ss_tot = ss_tot + (b - my) * (b - my);
    }
    let r_squared = if ss_tot == T::zero() {
        T::one()
    } else {
        (T::one() - ss_res / ss_tot).max(T::zero()).min(T::one())
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// `min(1, m·p)` for each of the m p-values.
pub fn bonferroni<T: Float>(p_values: &[T]) -> Vec<T> {
    let m: T = count(p_values.len());
    p_values.iter().map(|&p| (p * m).min(T::one())).collect()
}
