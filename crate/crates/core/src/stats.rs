//! Small numeric and statistical helpers: compensated sums, streaming
//! moments, and a chi-square goodness-of-fit test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Neumaier (improved Kahan) summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut s = CompensatedSum::new();
    for x in values {
        s.add(x);
    }
    s.value()
}

/// Streaming mean, variance and fourth central moment (Welford / Pebay updates).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2 - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n as f64 - 1.0)
        }
    }

    pub fn mean_se(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    /// Large-sample standard error of the sample variance, from the fourth moment.
    pub fn variance_se(&self) -> f64 {
        if self.n < 4 {
            return f64::NAN;
        }
        let n = self.n as f64;
        let mu4 = self.m4 / n;
        let s2 = self.variance();
        ((mu4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
    }

    pub fn summary(&self) -> MomentSummary {
        MomentSummary {
            count: self.n,
            mean: self.mean(),
            mean_se: self.mean_se(),
            variance: self.variance(),
            variance_se: self.variance_se(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub count: u64,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
}

impl MomentSummary {
    /// Number of standard errors between the sample mean and `exact`.
    /// A zero standard error gives `0` on exact agreement and infinity otherwise.
    pub fn mean_z(&self, exact: f64) -> f64 {
        z_score(self.mean - exact, self.mean_se)
    }

    pub fn variance_z(&self, exact: f64) -> f64 {
        z_score(self.variance - exact, self.variance_se)
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se == 0.0 && diff.abs() <= 1e-12 {
        0.0
    } else {
        diff / se
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    /// Number of bins after merging sparse tail bins.
    pub bins: usize,
}

impl ChiSquareResult {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value >= level
    }
}

/// Pearson goodness-of-fit test of `observed[i]` against `probabilities[i]`.
///
/// The last probability is treated as the tail mass (everything at or beyond
/// that category). Adjacent bins are merged from the right until every bin has
/// an expected count of at least `min_expected`.
pub fn chi_square_gof(observed: &[u64], probabilities: &[f64], min_expected: f64) -> ChiSquareResult {
    assert_eq!(observed.len(), probabilities.len());
    let total: u64 = observed.iter().sum();
    let total = total as f64;
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probabilities) {
        acc.0 += o as f64;
        acc.1 += p * total;
        if acc.1 >= min_expected {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.1 > 0.0 || acc.0 > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => bins.push(acc),
        }
    }
    let statistic: f64 = bins.iter().map(|&(o, e)| if e > 0.0 { (o - e) * (o - e) / e } else { 0.0 }).sum();
    let df = bins.len().saturating_sub(1);
    let p_value = if df == 0 {
        1.0
    } else {
        1.0 - ChiSquared::new(df as f64).expect("df > 0").cdf(statistic)
    };
    ChiSquareResult { statistic, degrees_of_freedom: df, p_value, bins: bins.len() }
}

/// `gcd`-reduced non-negative fraction, compared exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0);
        let g = num_integer::gcd(num, den).max(1);
        Self { num: num / g, den: den / g }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}
