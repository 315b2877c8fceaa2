//! Offspring/displacement laws of the branching potential and the one-step law of
//! the associated many-to-one walk.
//!
//! Convention: ψ(s) = log E[Σ_{|z|=1} e^{-s V(z)}]. A law is in the boundary case when
//! ψ(1) = ψ'(1) = 0. Only almost surely finite offspring counts are supported.

use crate::error::{domain, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

pub const CALIBRATION_TOL: f64 = 1e-12;
const MAX_NEWTON: usize = 100;
const FD_STEP: f64 = 1e-6;

/// One atom of a tabulated point process: with probability `prob` the parent has
/// `displacements.len()` children with these displacements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub prob: f64,
    pub displacements: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    /// Two children, i.i.d. N(mu, s2) displacements.
    GaussianBinary { mu: f64, s2: f64 },
    /// `n` children, each displacement `d_minus` w.p. `p`, else `d_plus`.
    TwoPoint { n: u32, p: f64, d_minus: f64, d_plus: f64 },
    Tabulated { atoms: Vec<Atom> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffspringLaw {
    #[serde(flatten)]
    pub family: Family,
    pub theta: f64,
    /// σ² = E[Σ V² e^{-V}], filled by calibration.
    pub sigma2: f64,
}

impl OffspringLaw {
    /// Builds a law without calibrating it; σ² is evaluated directly.
    pub fn new(family: Family, theta: f64) -> Result<Self> {
        validate_family(&family)?;
        if !(theta > 0.0) {
            return domain("theta must be positive");
        }
        let mut law = OffspringLaw { family, theta, sigma2: 0.0 };
        law.sigma2 = law.second_moment();
        law.check_moments()?;
        Ok(law)
    }

    /// The reference environment: gaussian-binary with μ = s2 = 2 ln 2.
    pub fn reference() -> Self {
        calibrate_boundary(Family::GaussianBinary { mu: 1.0, s2: 1.0 }, 0.5)
            .expect("reference law calibrates")
    }

    fn check_moments(&self) -> Result<()> {
        let lo = psi_raw(&self.family, -1.0);
        let hi = psi_raw(&self.family, 1.0 + self.theta);
        if !lo.is_finite() || !hi.is_finite() {
            return domain(format!("exponential moments not finite: psi(-1)={lo}, psi(1+theta)={hi}"));
        }
        if self.mean_offspring() <= 1.0 {
            return domain("mean offspring count must exceed 1");
        }
        Ok(())
    }

    pub fn psi(&self, s: f64) -> Result<f64> {
        if !(-1.0..=1.0 + self.theta).contains(&s) {
            return domain(format!("psi evaluated at s={s} outside [-1, {}]", 1.0 + self.theta));
        }
        Ok(psi_raw(&self.family, s))
    }

    pub fn psi_prime(&self, s: f64) -> Result<f64> {
        if !(-1.0..=1.0 + self.theta).contains(&s) {
            return domain(format!("psi' evaluated at s={s} outside [-1, {}]", 1.0 + self.theta));
        }
        Ok(psi_prime_raw(&self.family, s))
    }

    pub fn is_boundary(&self, tol: f64) -> bool {
        psi_raw(&self.family, 1.0).abs() <= tol && psi_prime_raw(&self.family, 1.0).abs() <= tol
    }

    pub fn mean_offspring(&self) -> f64 {
        match &self.family {
            Family::GaussianBinary { .. } => 2.0,
            Family::TwoPoint { n, .. } => *n as f64,
            Family::Tabulated { atoms } => {
                atoms.iter().map(|a| a.prob * a.displacements.len() as f64).sum()
            }
        }
    }

    /// Probability of having no children.
    pub fn extinction_step_prob(&self) -> f64 {
        match &self.family {
            Family::Tabulated { atoms } => {
                atoms.iter().filter(|a| a.displacements.is_empty()).map(|a| a.prob).sum()
            }
            _ => 0.0,
        }
    }

    fn second_moment(&self) -> f64 {
        match &self.family {
            Family::GaussianBinary { mu, s2 } => {
                // 2 E[A² e^{-A}] for A ~ N(mu, s2).
                let m = mu - s2;
                2.0 * (-mu + s2 / 2.0).exp() * (m * m + s2)
            }
            Family::TwoPoint { n, p, d_minus, d_plus } => {
                *n as f64
                    * (p * d_minus * d_minus * (-d_minus).exp()
                        + (1.0 - p) * d_plus * d_plus * (-d_plus).exp())
            }
            Family::Tabulated { atoms } => atoms
                .iter()
                .map(|a| a.prob * a.displacements.iter().map(|x| x * x * (-x).exp()).sum::<f64>())
                .sum(),
        }
    }

    /// Draws the displacements of one family, appending them to `out`.
    pub fn sample_offspring_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        match &self.family {
            Family::GaussianBinary { mu, s2 } => {
                let sd = s2.sqrt();
                for _ in 0..2 {
                    let z: f64 = StandardNormal.sample(rng);
                    out.push(mu + sd * z);
                }
            }
            Family::TwoPoint { n, p, d_minus, d_plus } => {
                for _ in 0..*n {
                    out.push(if rng.random::<f64>() < *p { *d_minus } else { *d_plus });
                }
            }
            Family::Tabulated { atoms } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for a in atoms {
                    acc += a.prob;
                    if u < acc {
                        out.extend_from_slice(&a.displacements);
                        return;
                    }
                }
                if let Some(a) = atoms.last() {
                    out.extend_from_slice(&a.displacements);
                }
            }
        }
    }

    pub fn sample_offspring<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut v = Vec::new();
        self.sample_offspring_into(rng, &mut v);
        v
    }

    /// Law of S₁ in the many-to-one lemma: P(S₁ ∈ dx) = E[Σ e^{-V(z)} 1{V(z) ∈ dx}].
    pub fn step_law(&self) -> StepLaw {
        match &self.family {
            Family::GaussianBinary { mu, s2 } => StepLaw::normal(mu - s2, s2.sqrt()),
            Family::TwoPoint { n, p, d_minus, d_plus } => {
                let k = *n as f64;
                StepLaw::discrete(&[
                    (*d_minus, k * p * (-d_minus).exp()),
                    (*d_plus, k * (1.0 - p) * (-d_plus).exp()),
                ])
            }
            Family::Tabulated { atoms } => {
                let pts: Vec<(f64, f64)> = atoms
                    .iter()
                    .flat_map(|a| a.displacements.iter().map(move |x| (*x, a.prob * (-x).exp())))
                    .collect();
                StepLaw::discrete(&pts)
            }
        }
    }

    /// The step law tilted by e^{x}: displacement of a size-biased uniformly chosen
    /// child. E[e^{S_m} g(S)] = E[N]^m Ẽ[g(S)] with increments from this law.
    pub fn tilted_step_law(&self) -> StepLaw {
        match &self.family {
            Family::GaussianBinary { mu, s2 } => StepLaw::normal(*mu, s2.sqrt()),
            Family::TwoPoint { p, d_minus, d_plus, .. } => {
                StepLaw::discrete(&[(*d_minus, *p), (*d_plus, 1.0 - p)])
            }
            Family::Tabulated { atoms } => {
                let pts: Vec<(f64, f64)> = atoms
                    .iter()
                    .flat_map(|a| a.displacements.iter().map(move |x| (*x, a.prob)))
                    .collect();
                StepLaw::discrete(&pts)
            }
        }
    }
}

pub fn step_law_sample<R: Rng + ?Sized>(law: &OffspringLaw, rng: &mut R) -> f64 {
    law.step_law().sample(rng)
}

fn validate_family(f: &Family) -> Result<()> {
    match f {
        Family::GaussianBinary { s2, .. } if !(*s2 > 0.0) => domain("s2 must be positive"),
        Family::TwoPoint { n, p, .. } if *n == 0 || !(*p > 0.0 && *p < 1.0) => {
            domain("two-point needs n >= 1 and p in (0,1)")
        }
        Family::Tabulated { atoms } => {
            let total: f64 = atoms.iter().map(|a| a.prob).sum();
            if atoms.is_empty() || (total - 1.0).abs() > 1e-9 || atoms.iter().any(|a| a.prob < 0.0) {
                domain("tabulated atoms must carry nonnegative probabilities summing to 1")
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}

fn psi_raw(f: &Family, s: f64) -> f64 {
    match f {
        Family::GaussianBinary { mu, s2 } => LN_2 - s * mu + s * s * s2 / 2.0,
        Family::TwoPoint { n, p, d_minus, d_plus } => {
            (*n as f64).ln() + (p * (-s * d_minus).exp() + (1.0 - p) * (-s * d_plus).exp()).ln()
        }
        Family::Tabulated { atoms } => atoms
            .iter()
            .map(|a| a.prob * a.displacements.iter().map(|x| (-s * x).exp()).sum::<f64>())
            .sum::<f64>()
            .ln(),
    }
}

fn psi_prime_raw(f: &Family, s: f64) -> f64 {
    match f {
        Family::GaussianBinary { mu, s2 } => -mu + s * s2,
        Family::TwoPoint { p, d_minus, d_plus, .. } => {
            let wm = p * (-s * d_minus).exp();
            let wp = (1.0 - p) * (-s * d_plus).exp();
            -(d_minus * wm + d_plus * wp) / (wm + wp)
        }
        Family::Tabulated { atoms } => {
            let (mut z, mut m) = (0.0, 0.0);
            for a in atoms {
                for x in &a.displacements {
                    let w = a.prob * (-s * x).exp();
                    z += w;
                    m += x * w;
                }
            }
            -m / z
        }
    }
}

/// Free parameters moved by calibration.
fn params(f: &Family) -> [f64; 2] {
    match f {
        Family::GaussianBinary { mu, s2 } => [*mu, *s2],
        Family::TwoPoint { d_minus, d_plus, .. } => [*d_minus, *d_plus],
        // affine map x -> scale*x + shift applied to the template
        Family::Tabulated { .. } => [0.0, 1.0],
    }
}

fn with_params(template: &Family, q: [f64; 2]) -> Family {
    match template {
        Family::GaussianBinary { .. } => Family::GaussianBinary { mu: q[0], s2: q[1] },
        Family::TwoPoint { n, p, .. } => Family::TwoPoint { n: *n, p: *p, d_minus: q[0], d_plus: q[1] },
        Family::Tabulated { atoms } => Family::Tabulated {
            atoms: atoms
                .iter()
                .map(|a| Atom {
                    prob: a.prob,
                    displacements: a.displacements.iter().map(|x| q[1] * x + q[0]).collect(),
                })
                .collect(),
        },
    }
}

fn residual(f: &Family) -> [f64; 2] {
    [psi_raw(f, 1.0), psi_prime_raw(f, 1.0)]
}

fn jacobian(template: &Family, q: [f64; 2]) -> [[f64; 2]; 2] {
    match template {
        Family::GaussianBinary { .. } => [[-1.0, 0.5], [-1.0, 1.0]],
        Family::TwoPoint { p, .. } => {
            let (dm, dp) = (q[0], q[1]);
            let wm = p * (-dm).exp();
            let wp = (1.0 - p) * (-dp).exp();
            let z = wm + wp;
            let m = dm * wm + dp * wp;
            let dpsi_m = -wm / z;
            let dpsi_p = -wp / z;
            let dprime_m = -((wm * (1.0 - dm)) * z + m * wm) / (z * z);
            let dprime_p = -((wp * (1.0 - dp)) * z + m * wp) / (z * z);
            [[dpsi_m, dpsi_p], [dprime_m, dprime_p]]
        }
        Family::Tabulated { .. } => {
            let mut j = [[0.0; 2]; 2];
            for k in 0..2 {
                let mut up = q;
                let mut dn = q;
                up[k] += FD_STEP;
                dn[k] -= FD_STEP;
                let ru = residual(&with_params(template, up));
                let rd = residual(&with_params(template, dn));
                for r in 0..2 {
                    j[r][k] = (ru[r] - rd[r]) / (2.0 * FD_STEP);
                }
            }
            j
        }
    }
}

/// Damped 2-D Newton iteration on (ψ(1), ψ'(1)) over the family's free parameters.
pub fn calibrate_boundary(template: Family, theta: f64) -> Result<OffspringLaw> {
    validate_family(&template)?;
    let norm = |r: [f64; 2]| r[0].abs().max(r[1].abs());
    let mut q = params(&template);
    let mut fam = with_params(&template, q);
    let mut r = residual(&fam);
    let mut it = 0;
    while norm(r) > CALIBRATION_TOL {
        if it == MAX_NEWTON {
            return Err(Error::Calibration { iterations: it, residual: norm(r) });
        }
        it += 1;
        let j = jacobian(&template, q);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-300 || !det.is_finite() {
            return Err(Error::Calibration { iterations: it, residual: norm(r) });
        }
        let dx = [
            (j[1][1] * r[0] - j[0][1] * r[1]) / det,
            (-j[1][0] * r[0] + j[0][0] * r[1]) / det,
        ];
        let mut t = 1.0;
        loop {
            let cand = [q[0] - t * dx[0], q[1] - t * dx[1]];
            let f = with_params(&template, cand);
            let valid = validate_family(&f).is_ok();
            let rc = residual(&f);
            if valid && rc.iter().all(|v| v.is_finite()) && (norm(rc) < norm(r) || t < 1e-6) {
                q = cand;
                fam = f;
                r = rc;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::Calibration { iterations: it, residual: norm(r) });
            }
        }
    }
    OffspringLaw::new(fam, theta)
}

/// The many-to-one step law (or any one-dimensional increment law).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepLaw {
    Normal { mean: f64, sd: f64 },
    /// Finite atoms with cumulative probabilities for inversion.
    Discrete { values: Vec<f64>, cdf: Vec<f64> },
}

impl StepLaw {
    pub fn normal(mean: f64, sd: f64) -> Self {
        StepLaw::Normal { mean, sd }
    }

    /// Atoms `(value, mass)`; masses are normalised.
    pub fn discrete(points: &[(f64, f64)]) -> Self {
        let total: f64 = points.iter().map(|p| p.1).sum();
        let mut values = Vec::with_capacity(points.len());
        let mut cdf = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (x, w) in points {
            acc += w / total;
            values.push(*x);
            cdf.push(acc);
        }
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        StepLaw::Discrete { values, cdf }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            StepLaw::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            StepLaw::Discrete { values, cdf } => {
                let u: f64 = rng.random();
                let k = cdf.partition_point(|c| *c <= u).min(values.len() - 1);
                values[k]
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            StepLaw::Normal { mean, .. } => *mean,
            StepLaw::Discrete { .. } => self.atoms().iter().map(|(x, p)| x * p).sum(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            StepLaw::Normal { sd, .. } => sd * sd,
            StepLaw::Discrete { .. } => {
                let m = self.mean();
                self.atoms().iter().map(|(x, p)| p * (x - m).powi(2)).sum()
            }
        }
    }

    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            StepLaw::Normal { .. } => Vec::new(),
            StepLaw::Discrete { values, cdf } => {
                let mut prev = 0.0;
                values
                    .iter()
                    .zip(cdf)
                    .map(|(x, c)| {
                        let p = c - prev;
                        prev = *c;
                        (*x, p)
                    })
                    .collect()
            }
        }
    }

    /// Law of −ξ.
    pub fn negated(&self) -> StepLaw {
        match self {
            StepLaw::Normal { mean, sd } => StepLaw::Normal { mean: -mean, sd: *sd },
            StepLaw::Discrete { .. } => {
                let pts: Vec<(f64, f64)> = self.atoms().iter().map(|(x, p)| (-x, *p)).collect();
                StepLaw::discrete(&pts)
            }
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match self {
            StepLaw::Normal { mean, .. } => *mean == 0.0,
            StepLaw::Discrete { .. } => {
                let mut a = self.atoms();
                let mut b = self.negated().atoms();
                a.sort_by(|p, q| p.0.total_cmp(&q.0));
                b.sort_by(|p, q| p.0.total_cmp(&q.0));
                a.iter().zip(&b).all(|(p, q)| (p.0 - q.0).abs() < 1e-12 && (p.1 - q.1).abs() < 1e-12)
            }
        }
    }

    /// Lebesgue density, available for the Gaussian law only.
    pub fn density(&self, x: f64) -> Option<f64> {
        match self {
            StepLaw::Normal { mean, sd } => Some(crate::stats::normal_pdf((x - mean) / sd) / sd),
            StepLaw::Discrete { .. } => None,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            StepLaw::Normal { mean, sd } => crate::stats::normal_cdf((x - mean) / sd),
            StepLaw::Discrete { .. } => {
                self.atoms().iter().filter(|(v, _)| *v <= x).map(|(_, p)| p).sum()
            }
        }
    }

    /// Quantile of |ξ| at level q (used for rejection envelopes).
    pub fn abs_quantile(&self, q: f64) -> f64 {
        match self {
            StepLaw::Normal { mean, sd } => {
                let (mut lo, mut hi) = (0.0, mean.abs() + 40.0 * sd);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let p = self.cdf(mid) - self.cdf(-mid);
                    if p < q { lo = mid } else { hi = mid }
                }
                hi
            }
            StepLaw::Discrete { values, .. } => {
                let mut a: Vec<(f64, f64)> = self.atoms().iter().map(|(x, p)| (x.abs(), *p)).collect();
                a.sort_by(|p, r| p.0.total_cmp(&r.0));
                let mut acc = 0.0;
                for (x, p) in &a {
                    acc += p;
                    if acc >= q {
                        return *x;
                    }
                }
                values.iter().map(|v| v.abs()).fold(0.0, f64::max)
            }
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, StepLaw::Normal { .. })
    }

    /// E[e^{ξ}] (finite for all supported laws).
    pub fn exp_moment(&self) -> f64 {
        match self {
            StepLaw::Normal { mean, sd } => (mean + sd * sd / 2.0).exp(),
            StepLaw::Discrete { .. } => self.atoms().iter().map(|(x, p)| p * x.exp()).sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::stats::Welford;

    #[test]
    fn gaussian_calibration_closed_form() {
        let law = calibrate_boundary(Family::GaussianBinary { mu: 0.3, s2: 2.0 }, 0.5).unwrap();
        match law.family {
            Family::GaussianBinary { mu, s2 } => {
                assert!((mu - 2.0 * LN_2).abs() < 1e-12);
                assert!((s2 - 2.0 * LN_2).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
        assert!((law.sigma2 - 2.0 * LN_2).abs() < 1e-10);
        assert!(law.psi(1.0).unwrap().abs() < 1e-10);
        assert!((law.psi(0.0).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn calibrated_law_is_a_fixed_point() {
        let law = OffspringLaw::reference();
        let again = calibrate_boundary(law.family.clone(), law.theta).unwrap();
        assert_eq!(law, again);
    }

    #[test]
    fn two_point_calibrates() {
        let law = calibrate_boundary(
            Family::TwoPoint { n: 4, p: 0.2, d_minus: -0.2, d_plus: 4.0 },
            0.5,
        )
        .unwrap();
        assert!(law.psi(1.0).unwrap().abs() < 1e-10);
        assert!(law.psi_prime(1.0).unwrap().abs() < 1e-10);
        assert!(law.sigma2 > 0.0);
    }

    #[test]
    fn tabulated_calibrates_by_affine_map() {
        let atoms = vec![
            Atom { prob: 0.5, displacements: vec![0.0, 1.0] },
            Atom { prob: 0.5, displacements: vec![0.5, 1.5, 2.5] },
        ];
        let law = calibrate_boundary(Family::Tabulated { atoms }, 0.5).unwrap();
        assert!(law.is_boundary(1e-10));
    }

    #[test]
    fn psi_domain_is_enforced() {
        let law = OffspringLaw::reference();
        assert!(law.psi(-1.5).is_err());
        assert!(law.psi(1.6).is_err());
        assert!(law.psi(1.5).is_ok());
    }

    #[test]
    fn step_law_is_centered_normal() {
        let law = OffspringLaw::reference();
        match law.step_law() {
            StepLaw::Normal { mean, sd } => {
                assert!(mean.abs() < 1e-12);
                assert!((sd * sd - 2.0 * LN_2).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
        assert!((law.step_law().exp_moment() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn offspring_moments_by_simulation() {
        let law = OffspringLaw::reference();
        let mut rng = stream_rng(11, 0);
        let mut w = Welford::new();
        let mut d = Welford::new();
        let mut buf = Vec::new();
        for _ in 0..200_000 {
            buf.clear();
            law.sample_offspring_into(&mut rng, &mut buf);
            assert_eq!(buf.len(), 2);
            w.push(buf.iter().map(|a| (-a).exp()).sum());
            d.push(buf.iter().map(|a| a * (-a).exp()).sum());
        }
        assert!((w.mean - 1.0).abs() < 3.5 * w.se());
        assert!(d.mean.abs() < 3.5 * d.se());
    }

    #[test]
    fn discrete_step_law_two_point() {
        let law = calibrate_boundary(
            Family::TwoPoint { n: 4, p: 0.2, d_minus: -0.2, d_plus: 4.0 },
            0.5,
        )
        .unwrap();
        let s = law.step_law();
        assert!(s.mean().abs() < 1e-10);
        assert!((s.variance() - law.sigma2).abs() < 1e-10);
    }
}
