//! Streaming moments, two-sample tests and small regression helpers.

use serde::{Deserialize, Serialize};

/// Welford accumulator, mergeable across workers.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Welford {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.n == 0 {
            return f64::INFINITY;
        }
        (self.variance() / self.n as f64).sqrt()
    }

    pub fn estimate(&self) -> Estimate {
        Estimate { value: self.mean, se: self.se() }
    }
}

impl FromIterator<f64> for Welford {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut w = Welford::new();
        for x in iter {
            w.push(x);
        }
        w
    }
}

/// A value with its standard error.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(value: f64, se: f64) -> Self {
        Self { value, se }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, se: 0.0 }
    }

    /// |a - b| measured in combined standard errors.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        let s = (self.se * self.se + other.se * other.se).sqrt();
        let d = (self.value - other.value).abs();
        if s == 0.0 {
            if d == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            d / s
        }
    }

    pub fn rel_se(&self) -> f64 {
        if self.value == 0.0 { f64::INFINITY } else { (self.se / self.value).abs() }
    }

    pub fn scale(&self, c: f64) -> Estimate {
        Estimate { value: self.value * c, se: self.se * c.abs() }
    }

    /// Product of independent estimates (first-order error propagation).
    pub fn mul(&self, o: &Estimate) -> Estimate {
        let v = self.value * o.value;
        let se = ((self.se * o.value).powi(2) + (o.se * self.value).powi(2)).sqrt();
        Estimate { value: v, se }
    }

    pub fn div(&self, o: &Estimate) -> Estimate {
        let v = self.value / o.value;
        let se = ((self.se / o.value).powi(2) + (v * o.se / o.value).powi(2)).sqrt();
        Estimate { value: v, se }
    }
}

impl std::fmt::Display for Estimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6} ± {:.2e}", self.value, self.se)
    }
}

/// Mean and standard error from independent batch values.
pub fn batch_estimate(batches: &[f64]) -> Estimate {
    batches.iter().copied().collect::<Welford>().estimate()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Asymptotic Kolmogorov survival function Q(λ) = 2 Σ (-1)^{k-1} e^{-2k²λ²}.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the Stephens small-sample correction.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.total_cmp(q));
    y.sort_by(|p, q| p.total_cmp(q));
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = if x[i] <= y[j] { x[i] } else { y[j] };
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n as f64 * m as f64) / (n + m) as f64;
    let s = ne.sqrt();
    KsResult { statistic: d, p_value: kolmogorov_q((s + 0.12 + 0.11 / s) * d) }
}

/// One-sample KS test against a continuous CDF.
pub fn ks_one_sample(a: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut x = a.to_vec();
    x.sort_by(|p, q| p.total_cmp(q));
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (k, v) in x.iter().enumerate() {
        let f = cdf(*v);
        d = d.max((k as f64 + 1.0) / n - f).max(f - k as f64 / n);
    }
    let s = n.sqrt();
    KsResult { statistic: d, p_value: kolmogorov_q((s + 0.12 + 0.11 / s) * d) }
}

/// Weighted least squares slope of y on x with weights 1/se², and its standard error.
pub fn wls_slope(x: &[f64], y: &[f64], se: &[f64]) -> Estimate {
    let w: Vec<f64> = se.iter().map(|s| 1.0 / (s * s).max(1e-300)).collect();
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(&w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(&w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    Estimate { value: sxy / sxx, se: (1.0 / sxx).sqrt() }
}

/// Ordinary least squares fit y = a + b x, returns (a, b).
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

pub fn quantile(data: &[f64], q: f64) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(data: &[f64]) -> f64 {
    quantile(data, 0.5)
}

/// Exponential integral E₁(x) for x > 0.
pub fn exp_int_e1(x: f64) -> f64 {
    assert!(x > 0.0);
    if x < 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..60 {
            term *= -x / k as f64;
            sum -= term / k as f64;
        }
        -0.577_215_664_901_532_9 - x.ln() + sum
    } else {
        // Lentz continued fraction.
        let mut b = x + 1.0;
        let mut c = 1.0 / f64::MIN_POSITIVE;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..200 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        h * (-x).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_merge_matches_sequential() {
        let data: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let all: Welford = data.iter().copied().collect();
        let mut a: Welford = data[..40].iter().copied().collect();
        let b: Welford = data[40..].iter().copied().collect();
        a.merge(&b);
        assert_eq!(a.n, all.n);
        assert!((a.mean - all.mean).abs() < 1e-12);
        assert!((a.variance() - all.variance()).abs() < 1e-12);
    }

    #[test]
    fn kolmogorov_known_values() {
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_q(1.6276) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn ks_identical_samples() {
        let a: Vec<f64> = (0..500).map(|i| i as f64).collect();
        let r = ks_two_sample(&a, &a);
        assert_eq!(r.statistic, 0.0);
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn e1_reference() {
        // E1(0.5) = 0.5597735947761608, E1(2) = 0.04890051070806112
        assert!((exp_int_e1(0.5) - 0.559_773_594_776_160_8).abs() < 1e-12);
        assert!((exp_int_e1(2.0) - 0.048_900_510_708_061_12).abs() < 1e-12);
    }

    #[test]
    fn wls_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let s = wls_slope(&x, &y, &[0.1; 4]);
        assert!((s.value - 2.0).abs() < 1e-12);
    }
}
