//! The one-dimensional walk S of the many-to-one lemma and everything built on it:
//! ladder heights, the renewal function R, the fluctuation constants, the walk
//! conditioned to stay positive, ℋ_∞, 𝒢_j and the inequality harness.

use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::env_model::{OffspringLaw, StepLaw};
use crate::error::{domain, Error, Result};
use crate::par;
use crate::rng::{combine, purpose, replica_rng, Rng};
use crate::stats::{batch_estimate, ols, wls_slope, Estimate, Welford};

/// Tolerance used for ties so that lattice laws compare levels robustly.
pub const TIE: f64 = 1e-9;
pub const RENEWAL_STEP: f64 = 0.1;
pub const RENEWAL_MAX: f64 = 100.0;
const CHUNK: usize = 2048;

/// Strict descending ladder structure of one path: H₀ = 0 > H₁ > … at epochs 0 < τ₁ < ….
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LadderChain {
    pub heights: Vec<f64>,
    pub epochs: Vec<u64>,
}

impl LadderChain {
    /// Follows the walk until its ladder heights go below `-depth` or `max_steps` elapse.
    pub fn simulate(law: &StepLaw, depth: f64, max_steps: u64, rng: &mut Rng) -> Self {
        let mut c = LadderChain { heights: vec![0.0], epochs: vec![0] };
        let (mut s, mut low) = (0.0, 0.0);
        for t in 1..=max_steps {
            s += law.sample(rng);
            if s < low - TIE {
                low = s;
                c.heights.push(s);
                c.epochs.push(t);
                if s < -depth {
                    break;
                }
            }
        }
        c
    }

    /// #{k : H_k ≥ -u}.
    pub fn count_above(&self, u: f64) -> usize {
        self.heights.iter().filter(|h| **h >= -u).count()
    }
}

/// Iid ladder heights (positive decrements) of a step law.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LadderPool {
    pub heights: Vec<f64>,
    pub escape_level: f64,
    pub escape_rate: f64,
}

impl LadderPool {
    /// Walks from 0 until the first strict descent. Paths climbing above the escape
    /// level are finished with the ladder heights of the previous pass: from height x
    /// the undershoot is Σ H'_i − x at the first partial sum exceeding x. Four passes
    /// make the bias from the first (truncated) pass negligible.
    pub fn build(law: &StepLaw, size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return domain("ladder pool size must be positive");
        }
        let escape = 10.0 * law.variance().sqrt() + law.mean().abs();
        let mut prev: Option<Vec<f64>> = None;
        let mut rate = 0.0;
        for pass in 0..4u64 {
            let parts = par::chunked(size, CHUNK, |ci, len| {
                let mut rng = replica_rng(seed, purpose::LADDER, combine(pass, ci as u64));
                let mut out = Vec::with_capacity(len);
                let mut esc = 0usize;
                for _ in 0..len {
                    let mut x = 0.0;
                    loop {
                        x += law.sample(&mut rng);
                        if x < -TIE {
                            out.push(-x);
                            break;
                        }
                        if x > escape {
                            esc += 1;
                            if let Some(p) = &prev {
                                let mut s = 0.0;
                                while s <= x + TIE {
                                    s += p[rng.random_range(0..p.len())];
                                }
                                out.push(s - x);
                            }
                            break;
                        }
                    }
                }
                (out, esc)
            });
            let mut heights = Vec::with_capacity(size);
            let mut esc = 0;
            for (h, e) in parts {
                heights.extend(h);
                esc += e;
            }
            if heights.is_empty() {
                return Err(Error::Efficiency("no ladder height below the escape level".into()));
            }
            rate = esc as f64 / size as f64;
            prev = Some(heights);
        }
        Ok(LadderPool { heights: prev.unwrap_or_default(), escape_level: escape, escape_rate: rate })
    }

    pub fn mean(&self) -> Estimate {
        self.heights.iter().copied().collect::<Welford>().estimate()
    }
}

/// R on the grid u = 0, 0.1, …, 100 with batch standard errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RenewalTable {
    pub step: f64,
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    /// Slope of R on [40, 100].
    pub c0: Estimate,
    /// 1/E[H₁] from the ladder pool (renewal theorem).
    pub c0_ladder: Estimate,
    pub c_minus: f64,
    pub c_plus: f64,
    pub replicas: usize,
    pub pool_size: usize,
}

const RENEWAL_BATCHES: usize = 50;

impl RenewalTable {
    pub fn build(law: &StepLaw, replicas: usize, pool_size: usize, seed: u64) -> Result<Self> {
        let pool = LadderPool::build(law, pool_size, seed)?;
        Self::from_pool(&pool, replicas, seed)
    }

    /// R(u) = E #{k ≥ 0 : H₁+…+H_k ≤ u}, each replica summing pool draws past the grid end.
    pub fn from_pool(pool: &LadderPool, replicas: usize, seed: u64) -> Result<Self> {
        if replicas < RENEWAL_BATCHES {
            return domain(format!("renewal needs at least {RENEWAL_BATCHES} replicas"));
        }
        let npts = (RENEWAL_MAX / RENEWAL_STEP).round() as usize + 1;
        let per = replicas / RENEWAL_BATCHES;
        let h = &pool.heights;
        let batches: Vec<Vec<f64>> = par::map_range(RENEWAL_BATCHES, |b| {
            let mut rng = replica_rng(seed, purpose::LADDER, combine(0xbead, b as u64));
            let mut diff = vec![0u64; npts + 1];
            for _ in 0..per {
                let mut d = 0.0;
                loop {
                    d += h[rng.random_range(0..h.len())];
                    if d > RENEWAL_MAX {
                        break;
                    }
                    let i = ((d / RENEWAL_STEP) - 1e-12).ceil().max(0.0) as usize;
                    diff[i.min(npts)] += 1;
                }
            }
            let mut acc = 0u64;
            (0..npts)
                .map(|i| {
                    acc += diff[i];
                    1.0 + acc as f64 / per as f64
                })
                .collect()
        });
        let grid: Vec<f64> = (0..npts).map(|i| i as f64 * RENEWAL_STEP).collect();
        let mut values = vec![0.0; npts];
        let mut se = vec![0.0; npts];
        for i in 0..npts {
            let col: Vec<f64> = batches.iter().map(|b| b[i]).collect();
            let e = batch_estimate(&col);
            values[i] = e.value;
            se[i] = e.se;
        }
        let lo = (40.0 / RENEWAL_STEP) as usize;
        let slopes: Vec<f64> = batches.iter().map(|b| ols(&grid[lo..], &b[lo..]).1).collect();
        let c0 = batch_estimate(&slopes);
        let m = pool.mean();
        let c0_ladder = Estimate::new(1.0 / m.value, m.se / (m.value * m.value));
        let hi80 = (80.0 / RENEWAL_STEP) as usize;
        let ratios = (0..=hi80).map(|i| values[i] / (1.0 + grid[i]));
        let (c_minus, c_plus) =
            ratios.fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(r), b.max(r)));
        Ok(RenewalTable {
            step: RENEWAL_STEP,
            values,
            se,
            c0,
            c0_ladder,
            c_minus,
            c_plus,
            replicas: per * RENEWAL_BATCHES,
            pool_size: h.len(),
        })
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| i as f64 * self.step).collect()
    }

    /// Linear interpolation, linear extrapolation with slope ĉ₀ past the grid; 0 for u < 0.
    pub fn eval(&self, u: f64) -> f64 {
        if u < 0.0 {
            return 0.0;
        }
        let last = self.values.len() - 1;
        let x = u / self.step;
        if x >= last as f64 {
            return self.values[last] + self.c0.value * (u - last as f64 * self.step);
        }
        let i = x.floor() as usize;
        let t = x - i as f64;
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }

    pub fn eval_estimate(&self, u: f64) -> Estimate {
        if u < 0.0 {
            return Estimate::exact(0.0);
        }
        let last = self.values.len() - 1;
        let i = ((u / self.step).round() as usize).min(last);
        Estimate::new(self.eval(u), self.se[i])
    }

    /// Relative spread (max − min)/mean of R(u)/u over grid points in [lo, hi].
    pub fn plateau_spread(&self, lo: f64, hi: f64) -> f64 {
        let r: Vec<f64> = self
            .grid()
            .iter()
            .zip(&self.values)
            .filter(|(u, _)| **u >= lo - 1e-9 && **u <= hi + 1e-9 && **u > 0.0)
            .map(|(u, v)| v / u)
            .collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let (mn, mx) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
        (mx - mn) / mean
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluctuationConstants {
    pub c0: Estimate,
    pub c1_plus: Estimate,
    pub c2_plus: Estimate,
    pub sigma2: f64,
    pub grid: Vec<u64>,
    /// √n P(S̲_n ≥ 0) per grid point.
    pub weak: Vec<Estimate>,
    /// √n P(S̲_n > 0) per grid point.
    pub strict: Vec<Estimate>,
    pub replicas: usize,
    pub warnings: Vec<String>,
}

pub fn default_constants_grid() -> Vec<u64> {
    (6..=14).map(|k| 1u64 << k).collect()
}

/// c₁⁺ and c₂⁺ from one batch of paths run until the first strict descent.
pub fn fluctuation_constants(
    law: &StepLaw,
    c0: Estimate,
    grid: &[u64],
    replicas: usize,
    seed: u64,
) -> Result<FluctuationConstants> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] == 0 {
        return domain("n-grid must be positive and strictly increasing");
    }
    if replicas == 0 {
        return domain("replicas must be positive");
    }
    let nmax = *grid.last().unwrap();
    let g = grid.len();
    // counts[i] = #{τ_weak > n_i}, counts[g + i] = #{τ_strict > n_i}.
    let parts = par::chunked(replicas, CHUNK, |ci, len| {
        let mut rng = replica_rng(seed, purpose::CONST, ci as u64);
        let mut counts = vec![0u64; 2 * g];
        for _ in 0..len {
            let (mut s, mut t_strict, mut t_weak) = (0.0, nmax + 1, nmax + 1);
            for t in 1..=nmax {
                s += law.sample(&mut rng);
                if t_strict > nmax && s <= TIE {
                    t_strict = t;
                }
                if s < -TIE {
                    t_weak = t;
                    break;
                }
            }
            for (i, n) in grid.iter().enumerate() {
                counts[i] += (t_weak > *n) as u64;
                counts[g + i] += (t_strict > *n) as u64;
            }
        }
        counts
    });
    let mut counts = vec![0u64; 2 * g];
    for p in parts {
        for (a, b) in counts.iter_mut().zip(p) {
            *a += b;
        }
    }
    let nrep = replicas as f64;
    let est = |k: u64, n: u64| {
        let p = k as f64 / nrep;
        let s = (n as f64).sqrt();
        Estimate::new(s * p, s * (p * (1.0 - p) / nrep).sqrt())
    };
    let weak: Vec<Estimate> = grid.iter().enumerate().map(|(i, n)| est(counts[i], *n)).collect();
    let strict: Vec<Estimate> = grid.iter().enumerate().map(|(i, n)| est(counts[g + i], *n)).collect();
    let mut warnings = Vec::new();
    if replicas < 100_000 {
        warnings.push(format!("only {replicas} replicas (at least 1e5 recommended)"));
    }
    let c1_plus = plateau(&weak, "c1+", &mut warnings);
    let c2_plus = plateau(&strict, "c2+", &mut warnings);
    Ok(FluctuationConstants {
        c0,
        c1_plus,
        c2_plus,
        sigma2: law.variance(),
        grid: grid.to_vec(),
        weak,
        strict,
        replicas,
        warnings,
    })
}

/// Inverse-variance mean over the top half of the grid. The values share paths, so the
/// reported SE is the mean of the point SEs (an upper bound).
fn plateau(v: &[Estimate], name: &str, warnings: &mut Vec<String>) -> Estimate {
    let top = &v[v.len() / 2..];
    let w: Vec<f64> = top.iter().map(|e| 1.0 / (e.se * e.se).max(1e-300)).collect();
    let sw: f64 = w.iter().sum();
    let value = top.iter().zip(&w).map(|(e, w)| e.value * w).sum::<f64>() / sw;
    let se = top.iter().map(|e| e.se).sum::<f64>() / top.len() as f64;
    if top.len() >= 2 {
        let inc = top.windows(2).all(|p| p[1].value >= p[0].value);
        let dec = top.windows(2).all(|p| p[1].value <= p[0].value);
        let (a, b) = (top[0], top[top.len() - 1]);
        if (inc || dec) && a.z_distance(&b) > 3.0 {
            warnings.push(format!("{name}: monotone drift {:.4} across the top half of the grid", b.value - a.value));
        }
    }
    Estimate::new(value, se)
}

/// Doob h-transform of a step law by its renewal function: the walk conditioned to
/// stay non-negative, started from x ≥ 0.
#[derive(Clone, Debug)]
pub struct HTransform<'a> {
    pub law: StepLaw,
    pub r: &'a RenewalTable,
    /// Envelope reach: R(y) ≤ R(x + Δ) for all proposals but a 1e-9 fraction.
    pub delta: f64,
}

const MAX_TRIES_PER_STEP: u64 = 1_000_000;

impl<'a> HTransform<'a> {
    pub fn new(law: &StepLaw, r: &'a RenewalTable) -> Self {
        let delta = law.abs_quantile(1.0 - 1e-9);
        HTransform { law: law.clone(), r, delta }
    }

    /// One step from x: propose x + ξ, accept with probability R(y)/R(x + Δ).
    pub fn step(&self, x: f64, rng: &mut Rng) -> Result<f64> {
        let top = self.r.eval(x + self.delta);
        for _ in 0..MAX_TRIES_PER_STEP {
            let y = x + self.law.sample(rng);
            if y < -TIE {
                continue;
            }
            let y = y.max(0.0);
            if rng.random::<f64>() * top <= self.r.eval(y) {
                return Ok(y);
            }
        }
        Err(Error::Efficiency(format!("h-transform acceptance below 1e-6 at x = {x}")))
    }

    /// ζ₀ = x0, ζ₁, …, ζ_len.
    pub fn path(&self, x0: f64, len: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut p = Vec::with_capacity(len + 1);
        p.push(x0);
        let mut x = x0;
        for _ in 0..len {
            x = self.step(x, rng)?;
            p.push(x);
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ConditionedMode {
    /// Exact conditioning through R, spine started at 0 in coordinates shifted by α.
    HTransform { alpha: f64 },
    /// Raw paths of `horizon` steps kept when S_k > 0 (α = 0) or S_k ≥ −α for all k ≥ 1.
    Rejection { horizon: usize, alpha: f64 },
}

const REJECTION_GIVE_UP: u64 = 100_000;

/// A conditioned path S_0 = 0, …, S_len (unshifted coordinates).
pub fn conditioned_walk(
    mode: ConditionedMode,
    len: usize,
    law: &StepLaw,
    r: Option<&RenewalTable>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    match mode {
        ConditionedMode::HTransform { alpha } => {
            let r = r.ok_or_else(|| Error::Domain("h-transform needs a renewal table".into()))?;
            let h = HTransform::new(law, r);
            let mut p = h.path(alpha, len, rng)?;
            p.iter_mut().for_each(|x| *x -= alpha);
            Ok(p)
        }
        ConditionedMode::Rejection { horizon, alpha } => {
            if horizon < len {
                return domain("rejection horizon shorter than the requested length");
            }
            let mut buf = Vec::with_capacity(horizon + 1);
            for _ in 0..REJECTION_GIVE_UP {
                buf.clear();
                buf.push(0.0);
                let mut s = 0.0;
                let mut ok = true;
                for _ in 0..horizon {
                    s += law.sample(rng);
                    let dead = if alpha == 0.0 { s <= 0.0 } else { s < -alpha };
                    if dead {
                        ok = false;
                        break;
                    }
                    buf.push(s);
                }
                if ok {
                    buf.truncate(len + 1);
                    return Ok(buf.clone());
                }
            }
            Err(Error::Efficiency(format!(
                "rejection acceptance below 1e-5 at horizon {horizon}; use the h-transform mode"
            )))
        }
    }
}

/// Samples of the j-th coordinate of the conditioned walk.
pub fn conditioned_marginal(
    mode: ConditionedMode,
    j: usize,
    samples: usize,
    law: &StepLaw,
    r: Option<&RenewalTable>,
    seed: u64,
) -> Result<Vec<f64>> {
    let parts = par::chunked(samples, CHUNK, |ci, len| -> Result<Vec<f64>> {
        let mut rng = replica_rng(seed, purpose::HSAMPLE, combine(j as u64, ci as u64));
        (0..len).map(|_| conditioned_walk(mode, j, law, r, &mut rng).map(|p| p[j])).collect()
    });
    let mut out = Vec::with_capacity(samples);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HSamples {
    pub values: Vec<f64>,
    pub truncation: usize,
    pub estimate: Estimate,
    /// Mean of Σ_{J/2 < j ≤ J} e^{−ζ_j}: the size of the last retained terms.
    pub tail: f64,
}

/// ℋ_∞ ≈ Σ_{j ≤ J} e^{−ζ_j} along h-transform paths from 0.
pub fn h_infinity(h: &HTransform, samples: usize, truncation: usize, seed: u64) -> Result<HSamples> {
    let parts = par::chunked(samples, CHUNK, |ci, len| -> Result<Vec<(f64, f64)>> {
        let mut rng = replica_rng(seed, purpose::HSAMPLE, combine(0x4819, ci as u64));
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let (mut x, mut sum, mut tail) = (0.0, 1.0, 0.0);
            for j in 1..=truncation {
                x = h.step(x, &mut rng)?;
                let t = (-x).exp();
                sum += t;
                if 2 * j > truncation {
                    tail += t;
                }
            }
            out.push((sum, tail));
        }
        Ok(out)
    });
    let mut values = Vec::with_capacity(samples);
    let mut tail = Welford::new();
    for p in parts {
        for (v, t) in p? {
            values.push(v);
            tail.push(t);
        }
    }
    let estimate = values.iter().copied().collect::<Welford>().estimate();
    Ok(HSamples { values, truncation, estimate, tail: tail.estimate().value })
}

/// 𝒢_j(x) = E[e^{S_j}/(x + Σ_{i≤j} e^{S_i}); S̄_j ≤ 0].
pub fn g_j(law: &StepLaw, j: usize, x: f64, replicas: usize, seed: u64) -> Result<Estimate> {
    Ok(g_j_multi(law, j, &[x], replicas, seed)?[0])
}

/// 𝒢_j at several x on common paths.
pub fn g_j_multi(law: &StepLaw, j: usize, xs: &[f64], replicas: usize, seed: u64) -> Result<Vec<Estimate>> {
    if let Some(x) = xs.iter().find(|x| !(**x >= 1.0)) {
        return domain(format!("G_j(x) needs x >= 1, got {x}"));
    }
    if j == 0 {
        return Ok(xs.iter().map(|x| Estimate::exact(1.0 / x)).collect());
    }
    let parts = par::chunked(replicas, CHUNK, |ci, len| {
        let mut rng = replica_rng(seed, purpose::GSUM, combine(j as u64, ci as u64));
        let mut w = vec![Welford::new(); xs.len()];
        for _ in 0..len {
            let (mut s, mut sum, mut ok) = (0.0, 0.0, true);
            for _ in 0..j {
                s += law.sample(&mut rng);
                if s > TIE {
                    ok = false;
                    break;
                }
                sum += s.exp();
            }
            for (k, x) in xs.iter().enumerate() {
                w[k].push(if ok { s.exp() / (x + sum) } else { 0.0 });
            }
        }
        w
    });
    let mut acc = vec![Welford::new(); xs.len()];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(&p) {
            a.merge(b);
        }
    }
    Ok(acc.iter().map(|w| w.estimate()).collect())
}

/// E[e^{S_j}; S̄_j ≤ 0] for j = 1..=jmax from common paths (index 0 holds j = 0).
pub fn g_bar(law: &StepLaw, jmax: usize, replicas: usize, seed: u64) -> Vec<Estimate> {
    let parts = par::chunked(replicas, CHUNK, |ci, len| {
        let mut rng = replica_rng(seed, purpose::GSUM, combine(0x9b, ci as u64));
        let mut w = vec![Welford::new(); jmax + 1];
        for _ in 0..len {
            let mut s = 0.0;
            let mut alive = true;
            w[0].push(1.0);
            for slot in w.iter_mut().skip(1) {
                if alive {
                    s += law.sample(&mut rng);
                    alive = s <= TIE;
                }
                slot.push(if alive { s.exp() } else { 0.0 });
            }
        }
        w
    });
    let mut acc = vec![Welford::new(); jmax + 1];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(&p) {
            a.merge(b);
        }
    }
    acc.iter().map(|w| w.estimate()).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SumEG {
    /// Σ_{j ≥ 0} E𝒢_j(ℋ_∞) including the fitted tail.
    pub value: Estimate,
    pub truncated: Estimate,
    pub tail: f64,
    pub j_max: usize,
}

/// Σ_j E[𝒢_j(ℋ_∞)]: each replica pairs an ℋ_∞ sample with an independent S-path that is
/// followed until it first goes above 0 or J_max steps elapse. The tail Σ_{j>J} is
/// extrapolated from the c·j^{−3/2} shape fitted to the terms in (J/2, J].
pub fn sum_eg(law: &StepLaw, h: &[f64], j_max: usize, replicas: usize, seed: u64) -> Result<SumEG> {
    if h.is_empty() {
        return domain("sum_EG needs H_infinity samples");
    }
    if j_max == 0 {
        return domain("J_max must be positive");
    }
    let parts = par::chunked(replicas, CHUNK, |ci, len| {
        let mut rng = replica_rng(seed, purpose::GSUM, combine(0x5e, ci as u64));
        let (mut tot, mut half) = (Welford::new(), Welford::new());
        for _ in 0..len {
            let hk = h[rng.random_range(0..h.len())];
            let (mut s, mut es, mut acc, mut tail) = (0.0, 0.0, 1.0 / hk, 0.0);
            for j in 1..=j_max {
                s += law.sample(&mut rng);
                if s > TIE {
                    break;
                }
                es += s.exp();
                let t = s.exp() / (hk + es);
                acc += t;
                if 2 * j > j_max {
                    tail += t;
                }
            }
            tot.push(acc);
            half.push(tail);
        }
        (tot, half)
    });
    let (mut tot, mut half) = (Welford::new(), Welford::new());
    for (a, b) in parts {
        tot.merge(&a);
        half.merge(&b);
    }
    let truncated = tot.estimate();
    let tail = half.estimate().value / (std::f64::consts::SQRT_2 - 1.0);
    Ok(SumEG {
        value: Estimate::new(truncated.value + tail, truncated.se),
        truncated,
        tail,
        j_max,
    })
}

/// E[Σ_{|z|=m} f(V(z₁), …, V(z_m))] = E[N]^m Ẽ[f(X)] with X built from the size-biased
/// displacement law.
pub fn many_to_one_mean<F>(law: &OffspringLaw, m: usize, f: F, replicas: usize, seed: u64) -> Estimate
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let step = law.tilted_step_law();
    let scale = law.mean_offspring().powi(m as i32);
    let parts = par::chunked(replicas, CHUNK, |ci, len| {
        let mut rng = replica_rng(seed, purpose::STEP, combine(m as u64, ci as u64));
        let mut w = Welford::new();
        let mut p = vec![0.0; m];
        for _ in 0..len {
            let mut s = 0.0;
            for x in p.iter_mut() {
                s += step.sample(&mut rng);
                *x = s;
            }
            w.push(f(&p));
        }
        w
    });
    let mut w = Welford::new();
    for p in &parts {
        w.merge(p);
    }
    w.estimate().scale(scale)
}

/// n·E[e^{S_n}/Σ_{j≤n} e^{S_j}; S̄_n ≥ b√n, max drawdown ≤ a√n, S̲_n ≥ −α], which equals
/// √n E[W_n^{(α)}(F_{a√n, b√n})] by the many-to-one lemma.
pub fn wf_many_to_one(law: &StepLaw, n: usize, a: f64, b: f64, alpha: f64, replicas: usize, seed: u64) -> Estimate {
    let sn = (n as f64).sqrt();
    let (an, bn) = (a * sn, b * sn);
    let parts = par::chunked(replicas, CHUNK, |ci, len| {
        let mut rng = replica_rng(seed, purpose::CROSS, combine(n as u64, ci as u64));
        let mut w = Welford::new();
        for _ in 0..len {
            let (mut s, mut mx, mut lse) = (0.0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            let mut ok = true;
            for _ in 0..n {
                s += law.sample(&mut rng);
                if s < -alpha {
                    ok = false;
                    break;
                }
                mx = mx.max(s);
                if mx - s > an {
                    ok = false;
                    break;
                }
                lse = log_add(lse, s);
            }
            w.push(if ok && mx >= bn { (s - lse).exp() } else { 0.0 });
        }
        w
    });
    let mut w = Welford::new();
    for p in &parts {
        w.merge(p);
    }
    w.estimate().scale(n as f64)
}

#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Both sides of the spine identity for a path functional g of (S₁..S_n):
/// h-transform mean of g, and E[g(S)R(α+S_n); S̲_n ≥ −α]/R(α) by raw simulation.
pub fn spine_identity<F>(
    law: &StepLaw,
    r: &RenewalTable,
    alpha: f64,
    n: usize,
    g: F,
    replicas: usize,
    seed: u64,
) -> Result<(Estimate, Estimate)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let h = HTransform::new(law, r);
    let ra = r.eval(alpha);
    let parts = par::chunked(replicas, CHUNK, |ci, len| -> Result<(Welford, Welford)> {
        let mut rng = replica_rng(seed, purpose::HSAMPLE, combine(0x5b1e, ci as u64));
        let (mut wh, mut wr) = (Welford::new(), Welford::new());
        let mut p = vec![0.0; n];
        for _ in 0..len {
            let mut x = alpha;
            for slot in p.iter_mut() {
                x = h.step(x, &mut rng)?;
                *slot = x - alpha;
            }
            wh.push(g(&p));
            let mut s = 0.0;
            let mut ok = true;
            for slot in p.iter_mut() {
                s += law.sample(&mut rng);
                if s < -alpha {
                    ok = false;
                    break;
                }
                *slot = s;
            }
            wr.push(if ok { g(&p) * r.eval(alpha + s) / ra } else { 0.0 });
        }
        Ok((wh, wr))
    });
    let (mut wh, mut wr) = (Welford::new(), Welford::new());
    for p in parts {
        let (a, b) = p?;
        wh.merge(&a);
        wr.merge(&b);
    }
    Ok((wh.estimate(), wr.estimate()))
}

/// Two-sided estimator of E[f(X_n); X_1, …, X_n ≥ 0] for a walk with continuous step
/// law L from X_0 = x0: an h-transformed forward half from x0, an h-transformed
/// backward half (law −L) from an endpoint v ~ q, joined by the step density.
struct Split<'a> {
    fwd: HTransform<'a>,
    bwd: HTransform<'a>,
}

impl<'a> Split<'a> {
    fn new(law: &StepLaw, r_law: &'a RenewalTable, r_neg: &'a RenewalTable) -> Self {
        Split { fwd: HTransform::new(law, r_law), bwd: HTransform::new(&law.negated(), r_neg) }
    }

    /// Path weight given the endpoint v; multiply by f(v)/q(v).
    fn weight(&self, x0: f64, n: usize, v: f64, rng: &mut Rng) -> Result<f64> {
        let m = n / 2;
        let k = n - m - 1;
        let mut x = x0;
        for _ in 0..m {
            x = self.fwd.step(x, rng)?;
        }
        let mut z = v;
        for _ in 0..k {
            z = self.bwd.step(z, rng)?;
        }
        let p = self.fwd.law.density(z - x).unwrap_or(0.0);
        let rf = self.fwd.r;
        let rb = self.bwd.r;
        Ok(rf.eval(x0) * rb.eval(v) * p / (rf.eval(x) * rb.eval(z)))
    }
}

/// Inequality facts of the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FactId {
    MSbd,
    MSSbd,
    MSMSbd,
    MSMSSbd,
    MSMSSbd0,
    MSMSSbdPlus,
    SmSbd,
    MSeSsum,
    MSeS,
    ESMSbd,
    ESMSbdPlus,
    ESbd,
    MSmSbd,
    Ldp,
    Last1,
    ESMSmSbd,
    ESMSMMSmSbd,
    ESMSMSmSbd,
}

impl FactId {
    pub const ALL: [FactId; 18] = [
        FactId::MSbd,
        FactId::MSSbd,
        FactId::MSMSbd,
        FactId::MSMSSbd,
        FactId::MSMSSbd0,
        FactId::MSMSSbdPlus,
        FactId::SmSbd,
        FactId::MSeSsum,
        FactId::MSeS,
        FactId::ESMSbd,
        FactId::ESMSbdPlus,
        FactId::ESbd,
        FactId::MSmSbd,
        FactId::Ldp,
        FactId::Last1,
        FactId::ESMSmSbd,
        FactId::ESMSMMSmSbd,
        FactId::ESMSMSmSbd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FactId::MSbd => "mSbd",
            FactId::MSSbd => "mSSbd",
            FactId::MSMSbd => "mSMSbd",
            FactId::MSMSSbd => "mSMSSbd",
            FactId::MSMSSbd0 => "mSMSSbd0",
            FactId::MSMSSbdPlus => "mSMSSbd+",
            FactId::SmSbd => "SmSbd",
            FactId::MSeSsum => "mSeSsum",
            FactId::MSeS => "mSeS",
            FactId::ESMSbd => "eSMSbd",
            FactId::ESMSbdPlus => "eSMSbd+",
            FactId::ESbd => "eSbd",
            FactId::MSmSbd => "mSmSbd",
            FactId::Ldp => "LDP",
            FactId::Last1 => "Last1",
            FactId::ESMSmSbd => "eSMSmSbd",
            FactId::ESMSMMSmSbd => "eSMSMMSmSbd",
            FactId::ESMSMSmSbd => "eSMSMSmSbd",
        }
    }

    /// Default parameters for the bound's shape.
    pub fn default_params(&self) -> FactParams {
        let mut p = FactParams::default();
        match self {
            FactId::MSSbd => {
                p.u = 1.0;
                p.a = 0.0;
                p.b = 2.0;
            }
            FactId::MSMSSbd => {
                p.a = 0.5;
                p.b = 1.0;
            }
            FactId::MSMSSbd0 => p.big_a = 5.0,
            FactId::MSMSSbdPlus => {
                p.a = 2.0;
                p.big_a = 2.0;
            }
            FactId::MSeSsum => {
                p.a = 1.0;
                p.b = 10.0;
            }
            FactId::MSeS => {
                p.a = 0.0;
                p.b = 1.0;
            }
            FactId::ESMSbdPlus | FactId::ESMSmSbd => p.big_a = 1.0,
            FactId::MSmSbd => p.big_a = 1.0,
            FactId::Ldp => p.delta = 0.2,
            FactId::Last1 => p.a = 1.0,
            FactId::ESMSMMSmSbd => p.big_a = 5.0,
            FactId::ESMSMSmSbd => p.big_a = 2.0,
            _ => {}
        }
        p
    }

    pub fn default_grid(&self) -> Vec<u64> {
        match self {
            FactId::MSbd | FactId::SmSbd | FactId::ESMSbd | FactId::ESbd => half_octaves(6, 14),
            FactId::MSSbd | FactId::MSeS | FactId::ESMSbdPlus | FactId::MSMSbd | FactId::MSeSsum => {
                half_octaves(6, 12)
            }
            FactId::Ldp => (4..=10).map(|k| 1u64 << k).collect(),
            _ => half_octaves(4, 10),
        }
    }

    fn shape(&self, n: f64, p: &FactParams) -> f64 {
        let sn = n.sqrt();
        let n32 = n * sn;
        match self {
            FactId::MSbd => (1.0 + p.u) / sn,
            FactId::MSSbd => (1.0 + p.u) * (1.0 + p.b + p.u) * (1.0 + p.b - p.a) / n32,
            FactId::MSMSbd => (1.0 + p.alpha + p.u) / n,
            FactId::MSMSSbd => (1.0 + p.alpha + p.u) * (p.b - p.a) * sn / n32,
            FactId::MSMSSbd0 => (1.0 + p.alpha) / (p.big_a * sn),
            FactId::MSMSSbdPlus => {
                let m = (n / 2.0).floor();
                (1.0 + p.big_a) * (1.0 + p.a + p.big_a) * (1.0 + p.alpha) / (m.sqrt() * (n - m).powf(1.5))
            }
            FactId::SmSbd => (1.0 + p.alpha).powi(2) / n32,
            FactId::MSeSsum => {
                (1.0 + p.alpha) * (1.0 + p.b.ln()) * (1.0 + p.b.ln() - p.a.ln() + n.ln()) / n
            }
            FactId::MSeS => {
                p.b.exp() * (p.b + p.alpha + 1.0) * (1.0 + p.b - p.a) * (1.0 + p.alpha) / n32
            }
            FactId::ESMSbd => 1.0 / n32,
            FactId::ESMSbdPlus => (1.0 + p.big_a) * p.big_a.exp() / n32,
            FactId::ESbd => 1.0 / sn,
            FactId::MSmSbd => {
                let k1 = (n / 4.0).floor().max(1.0);
                (1.0 + p.big_a) / (p.delta * n * k1).sqrt()
            }
            FactId::Ldp => (-p.theta * n.powf(1.0 + p.delta) / 2.0).exp(),
            FactId::Last1 => n.powf(-p.a * p.a / (2.0 * p.sigma2)),
            FactId::ESMSmSbd => p.big_a.exp() * (1.0 + p.alpha) * (1.0 + p.big_a + p.alpha) / n32,
            FactId::ESMSMMSmSbd => {
                (1.0 + p.alpha) / n.powf(7.0 / 6.0) + (1.0 + p.alpha) / n * (-n / (p.big_a * p.big_a)).exp()
            }
            FactId::ESMSMSmSbd => (1.0 + p.alpha) / (sn * p.big_a),
        }
    }

    fn start(&self, p: &FactParams) -> f64 {
        match self {
            FactId::MSMSbd | FactId::MSMSSbd => p.u,
            _ => 0.0,
        }
    }

    fn horizon(&self, n: u64, p: &FactParams) -> u64 {
        match self {
            FactId::MSmSbd => ((1.0 + p.delta) * n as f64).ceil() as u64,
            _ => n,
        }
    }

    /// True once the path can no longer contribute at any later horizon.
    fn killed(&self, s: f64, st: &PathStats, p: &FactParams) -> bool {
        match self {
            FactId::MSbd | FactId::MSSbd => s < -p.u - TIE,
            FactId::ESMSbd => s > TIE,
            FactId::ESMSbdPlus => s > p.big_a + TIE,
            FactId::ESbd | FactId::Ldp => false,
            FactId::MSmSbd => s < -TIE,
            FactId::ESMSmSbd => s < -p.alpha - TIE || s > p.big_a + TIE,
            FactId::ESMSMMSmSbd => s < -p.alpha - TIE || st.maxdd > p.big_a,
            _ => s < -p.alpha - TIE,
        }
    }

    /// Value at horizon n for a surviving path S_0..S_t (t = horizon(n)).
    fn value(&self, n: u64, path: &[f64], st: &PathStats, p: &FactParams) -> f64 {
        let s = st.s;
        let sn = (n as f64).sqrt();
        let at_max = s >= st.max - TIE;
        match self {
            FactId::MSbd => 1.0,
            FactId::MSSbd => (s >= p.a && s <= p.b) as u8 as f64,
            FactId::MSMSbd => at_max as u8 as f64,
            FactId::MSMSSbd => (at_max && s >= p.a * sn && s <= p.b * sn) as u8 as f64,
            FactId::MSMSSbd0 => (at_max && s >= p.big_a) as u8 as f64,
            FactId::MSMSSbdPlus => {
                let m = (n / 2) as usize;
                let mx_m = path[1..=m].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (at_max && mx_m - s >= -p.big_a && mx_m - path[m] <= p.a) as u8 as f64
            }
            FactId::SmSbd => (s <= st.min + TIE) as u8 as f64,
            FactId::MSeSsum => {
                let v = (st.lse - s).exp();
                (v >= p.a && v <= p.b) as u8 as f64
            }
            FactId::MSeS => {
                if s >= p.a && s <= p.b { s.exp() } else { 0.0 }
            }
            FactId::ESMSbd | FactId::ESMSbdPlus | FactId::ESMSmSbd => s.exp(),
            FactId::ESbd => (s - st.lse).exp(),
            FactId::MSmSbd => {
                let k1 = ((n / 4) as usize).max(1);
                let k2 = ((n / 2) as usize).max(k1 + 1);
                let mn = path[k1..=k2].iter().copied().fold(f64::INFINITY, f64::min);
                (mn <= p.big_a) as u8 as f64
            }
            FactId::Ldp => (st.max >= (n as f64).powf(1.0 + p.delta)) as u8 as f64,
            FactId::Last1 => (st.max >= p.a * ((n as f64) * (n as f64).ln()).sqrt()) as u8 as f64,
            FactId::ESMSMMSmSbd => (s - st.max).exp(),
            FactId::ESMSMSmSbd => {
                if st.max >= p.big_a { (s - st.max).exp() } else { 0.0 }
            }
        }
    }

    fn needs_path(&self) -> bool {
        matches!(self, FactId::MSMSSbdPlus | FactId::MSmSbd)
    }

    pub fn has_split(&self) -> bool {
        matches!(self, FactId::ESMSbd | FactId::ESMSbdPlus | FactId::MSSbd | FactId::MSeS | FactId::SmSbd)
    }
}

impl FromStr for FactId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FactId::ALL
            .iter()
            .find(|f| f.name() == s)
            .copied()
            .ok_or_else(|| Error::Domain(format!("unknown fact id '{s}'")))
    }
}

impl std::fmt::Display for FactId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn half_octaves(lo: u32, hi: u32) -> Vec<u64> {
    let mut v: Vec<u64> = (2 * lo..=2 * hi).map(|k| 2f64.powf(k as f64 / 2.0).round() as u64).collect();
    v.dedup();
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactParams {
    pub u: f64,
    pub alpha: f64,
    pub a: f64,
    pub b: f64,
    pub big_a: f64,
    pub delta: f64,
    pub theta: f64,
    pub sigma2: f64,
}

impl Default for FactParams {
    fn default() -> Self {
        FactParams { u: 0.0, alpha: 1.0, a: 0.0, b: 1.0, big_a: 1.0, delta: 0.5, theta: 1.0, sigma2: 1.0 }
    }
}

#[derive(Clone, Copy, Debug)]
struct PathStats {
    s: f64,
    max: f64,
    min: f64,
    maxdd: f64,
    lse: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AppendixRow {
    pub n: u64,
    pub lhs: Estimate,
    pub shape: f64,
    pub ratio: Estimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AppendixReport {
    pub fact: String,
    pub method: String,
    pub params: FactParams,
    pub replicas: usize,
    pub rows: Vec<AppendixRow>,
    pub c_hat: f64,
    /// WLS slope of log(LHS/shape) on log n over the top octave.
    pub top_octave_slope: Option<Estimate>,
    pub stable: bool,
}

/// Runs one catalog entry: estimates the left-hand side on the grid, fits ĉ and tests
/// the top octave for systematic drift.
pub fn appendix_check(
    fact: &str,
    grid: Option<&[u64]>,
    params: Option<FactParams>,
    law: &StepLaw,
    renewal: Option<(&RenewalTable, &RenewalTable)>,
    replicas: usize,
    seed: u64,
) -> Result<AppendixReport> {
    let id: FactId = fact.parse()?;
    let grid = grid.map(|g| g.to_vec()).unwrap_or_else(|| id.default_grid());
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] == 0 {
        return domain("n-grid must be positive and strictly increasing");
    }
    if replicas == 0 {
        return domain("replicas must be positive");
    }
    let mut p = params.unwrap_or_else(|| id.default_params());
    p.sigma2 = law.variance();
    let seed = combine(seed, id as u64);
    let split = id.has_split() && law.is_continuous() && renewal.is_some();
    let lhs = if split {
        let (r, rn) = renewal.unwrap();
        grid.iter()
            .map(|n| split_fact(id, *n as usize, &p, law, r, rn, replicas, seed))
            .collect::<Result<Vec<_>>>()?
    } else if id == FactId::ESbd {
        reversed_esbd(law, &grid, replicas, seed)
    } else {
        plain_fact(id, &grid, &p, law, replicas, seed)
    };
    let rows: Vec<AppendixRow> = grid
        .iter()
        .zip(lhs)
        .map(|(n, l)| {
            let shape = id.shape(*n as f64, &p);
            AppendixRow { n: *n, lhs: l, shape, ratio: l.scale(1.0 / shape) }
        })
        .collect();
    let c_hat = rows.iter().map(|r| r.ratio.value).fold(0.0, f64::max);
    let nmax = *grid.last().unwrap();
    let top: Vec<&AppendixRow> = rows.iter().filter(|r| 2 * r.n >= nmax && r.lhs.value > 0.0).collect();
    let top_octave_slope = (top.len() >= 2).then(|| {
        let x: Vec<f64> = top.iter().map(|r| (r.n as f64).ln()).collect();
        let y: Vec<f64> = top.iter().map(|r| r.ratio.value.ln()).collect();
        let se: Vec<f64> = top.iter().map(|r| r.ratio.rel_se().max(1e-12)).collect();
        wls_slope(&x, &y, &se)
    });
    let stable = top_octave_slope.map_or(true, |s| s.value.abs() <= 3.0 * s.se);
    Ok(AppendixReport {
        fact: id.name().into(),
        method: if split { "split" } else { "plain" }.into(),
        params: p,
        replicas,
        rows,
        c_hat,
        top_octave_slope,
        stable,
    })
}

fn plain_fact(id: FactId, grid: &[u64], p: &FactParams, law: &StepLaw, replicas: usize, seed: u64) -> Vec<Estimate> {
    let horizons: Vec<u64> = grid.iter().map(|n| id.horizon(*n, p)).collect();
    let tmax = *horizons.iter().max().unwrap();
    let keep = id.needs_path();
    let parts = par::chunked(replicas, CHUNK, |ci, len| {
        let mut rng = replica_rng(seed, purpose::APPENDIX, ci as u64);
        let mut acc = vec![Welford::new(); grid.len()];
        let mut path = Vec::new();
        // Evaluation order by horizon.
        let mut order: Vec<usize> = (0..grid.len()).collect();
        order.sort_by_key(|i| horizons[*i]);
        for _ in 0..len {
            let s0 = id.start(p);
            let mut st = PathStats {
                s: s0,
                max: f64::NEG_INFINITY,
                min: f64::INFINITY,
                maxdd: 0.0,
                lse: f64::NEG_INFINITY,
            };
            path.clear();
            path.push(s0);
            let mut next = 0;
            for t in 1..=tmax {
                st.s += law.sample(&mut rng);
                st.max = st.max.max(st.s);
                st.min = st.min.min(st.s);
                st.maxdd = st.maxdd.max(st.max - st.s);
                st.lse = log_add(st.lse, st.s);
                if keep {
                    path.push(st.s);
                }
                if id.killed(st.s, &st, p) {
                    break;
                }
                while next < order.len() && horizons[order[next]] == t {
                    let i = order[next];
                    acc[i].push(id.value(grid[i], &path, &st, p));
                    next += 1;
                }
            }
            for &i in &order[next..] {
                acc[i].push(0.0);
            }
        }
        acc
    });
    merge_welfords(parts, grid.len())
}

/// E[e^{S_n}/Σ_{i≤n} e^{S_i}] = E[1/Σ_{k<n} e^{−Ŝ_k}] with Ŝ the time-reversed walk (same
/// law). Once the sum exceeds e^{40} later values are frozen at that bound.
fn reversed_esbd(law: &StepLaw, grid: &[u64], replicas: usize, seed: u64) -> Vec<Estimate> {
    let nmax = *grid.last().unwrap();
    let parts = par::chunked(replicas, CHUNK, |ci, len| {
        let mut rng = replica_rng(seed, purpose::APPENDIX, ci as u64);
        let mut acc = vec![Welford::new(); grid.len()];
        for _ in 0..len {
            // k = 0 term.
            let (mut s, mut lse) = (0.0f64, 0.0f64);
            let mut gi = 0;
            let mut k = 1u64;
            while gi < grid.len() {
                while gi < grid.len() && grid[gi] == k {
                    acc[gi].push((-lse).exp());
                    gi += 1;
                }
                if k >= nmax {
                    break;
                }
                if lse > 40.0 {
                    for a in &mut acc[gi..] {
                        a.push((-lse).exp());
                    }
                    break;
                }
                s += law.sample(&mut rng);
                lse = log_add(lse, -s);
                k += 1;
            }
        }
        acc
    });
    merge_welfords(parts, grid.len())
}

fn merge_welfords(parts: Vec<Vec<Welford>>, n: usize) -> Vec<Estimate> {
    let mut acc = vec![Welford::new(); n];
    for p in &parts {
        for (a, b) in acc.iter_mut().zip(p) {
            a.merge(b);
        }
    }
    acc.iter().map(|w| w.estimate()).collect()
}

#[allow(clippy::too_many_arguments)]
fn split_fact(
    id: FactId,
    n: usize,
    p: &FactParams,
    law: &StepLaw,
    r: &RenewalTable,
    r_neg: &RenewalTable,
    replicas: usize,
    seed: u64,
) -> Result<Estimate> {
    let neg = law.negated();
    // (walk law, its renewal, renewal of the negated law, start, constrained steps)
    let (wl, rf, rb, x0, steps) = match id {
        FactId::ESMSbd => (&neg, r_neg, r, 0.0, n),
        FactId::ESMSbdPlus => (&neg, r_neg, r, p.big_a, n),
        FactId::MSSbd => (law, r, r_neg, p.u, n),
        FactId::MSeS => (law, r, r_neg, p.alpha, n),
        FactId::SmSbd => (&neg, r_neg, r, 0.0, n - 1),
        _ => return Err(Error::Internal("no split estimator for this fact".into())),
    };
    if steps == 0 {
        // SmSbd at n = 1: P(S₁ ≥ −α).
        return Ok(Estimate::exact(1.0 - law.cdf(-p.alpha)));
    }
    let split = Split::new(wl, rf, rb);
    let scale = p.alpha + law.variance().sqrt();
    let parts = par::chunked(replicas, CHUNK, |ci, len| -> Result<Welford> {
        let mut rng = replica_rng(seed, purpose::APPENDIX, combine(n as u64, ci as u64));
        let mut w = Welford::new();
        for _ in 0..len {
            // Endpoint v ~ q and the ratio f(v)/q(v).
            let (v, fq) = match id {
                FactId::ESMSbd => (Exp1.sample(&mut rng), 1.0),
                FactId::ESMSbdPlus => (Exp1.sample(&mut rng), p.big_a.exp()),
                FactId::MSSbd => {
                    let lo = (p.a + p.u).max(0.0);
                    let hi = p.b + p.u;
                    (lo + (hi - lo) * rng.random::<f64>(), hi - lo)
                }
                FactId::MSeS => {
                    let lo = (p.a + p.alpha).max(0.0);
                    let hi = p.b + p.alpha;
                    let v = lo + (hi - lo) * rng.random::<f64>();
                    (v, (hi - lo) * (v - p.alpha).exp())
                }
                _ => {
                    let e: f64 = Exp1.sample(&mut rng);
                    let v = e * scale;
                    let f = 1.0 - law.cdf(v - p.alpha);
                    (v, f * scale * e.exp())
                }
            };
            let wt = split.weight(x0, steps, v, &mut rng)?;
            w.push(fq * wt);
        }
        Ok(w)
    });
    let mut acc = Welford::new();
    for p in parts {
        acc.merge(&p?);
    }
    Ok(acc.estimate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::stats::ks_two_sample;

    fn reference() -> StepLaw {
        StepLaw::normal(0.0, (2.0 * std::f64::consts::LN_2).sqrt())
    }

    fn table() -> RenewalTable {
        RenewalTable::build(&reference(), 100_000, 1 << 16, 11).unwrap()
    }

    #[test]
    fn renewal_basics() {
        let r = table();
        assert_eq!(r.values[0], 1.0);
        assert_eq!(r.eval(0.0), 1.0);
        assert!(r.is_monotone());
        assert_eq!(r.eval(-1.0), 0.0);
        // c0 = 1/E[H] with E[H] = σ/√2 for a centred Gaussian walk.
        let c0 = 1.0 / std::f64::consts::LN_2.sqrt();
        assert!((r.c0_ladder.value - c0).abs() < 4.0 * r.c0_ladder.se + 1e-3, "{:?}", r.c0_ladder);
        assert!((r.c0.value - c0).abs() < 0.03 * c0, "{:?}", r.c0);
        assert!(r.c_minus > 0.0 && r.c_plus < 2.0);
    }

    #[test]
    fn pool_matches_direct_ladder_counts() {
        let law = reference();
        let r = table();
        let mut rng = stream_rng(5, 1);
        let w: Welford = (0..20_000)
            .map(|_| LadderChain::simulate(&law, 3.0, 1 << 20, &mut rng).count_above(3.0) as f64)
            .collect();
        let e = w.estimate();
        assert!(e.z_distance(&r.eval_estimate(3.0)) < 4.0, "{e} vs {}", r.eval(3.0));
    }

    #[test]
    fn ladder_chain_is_strictly_decreasing() {
        let mut rng = stream_rng(1, 2);
        let c = LadderChain::simulate(&reference(), 10.0, 1 << 20, &mut rng);
        assert!(c.heights.windows(2).all(|w| w[1] < w[0]));
        assert!(c.epochs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn constants_match_sparre_andersen() {
        let law = reference();
        let fc = fluctuation_constants(&law, Estimate::exact(1.0), &[64, 256, 1024], 200_000, 3).unwrap();
        let target = 1.0 / std::f64::consts::PI.sqrt();
        assert!(fc.c1_plus.value >= fc.c2_plus.value);
        assert!((fc.c1_plus.value - target).abs() < 4.0 * fc.c1_plus.se + 0.01, "{:?}", fc.c1_plus);
        assert!(fluctuation_constants(&law, Estimate::exact(1.0), &[8, 4], 10, 1).is_err());
    }

    #[test]
    fn h_transform_and_rejection_agree() {
        let law = reference();
        let r = table();
        let a = conditioned_marginal(ConditionedMode::HTransform { alpha: 0.0 }, 5, 20_000, &law, Some(&r), 1).unwrap();
        let b = conditioned_marginal(ConditionedMode::Rejection { horizon: 1024, alpha: 0.0 }, 5, 20_000, &law, None, 2)
            .unwrap();
        assert!(a.iter().all(|x| *x > 0.0));
        let ks = ks_two_sample(&a, &b);
        assert!(ks.p_value > 0.001, "{ks:?}");
        let mut rng = stream_rng(3, 3);
        let p = conditioned_walk(ConditionedMode::HTransform { alpha: 0.0 }, 10, &law, Some(&r), &mut rng).unwrap();
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn h_infinity_at_least_one() {
        let law = reference();
        let r = table();
        let h = HTransform::new(&law, &r);
        let s = h_infinity(&h, 2000, 50, 4).unwrap();
        assert!(s.values.iter().all(|v| *v >= 1.0));
        let z = h_infinity(&h, 10, 0, 4).unwrap();
        assert!(z.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn g_j_values() {
        let law = reference();
        assert_eq!(g_j(&law, 0, 2.0, 1, 0).unwrap(), Estimate::exact(0.5));
        assert!(g_j(&law, 3, 0.5, 10, 0).is_err());
        let g = g_j_multi(&law, 4, &[1.0, 2.0, 5.0], 20_000, 1).unwrap();
        assert!(g[0].value >= g[1].value && g[1].value >= g[2].value);
        let gb = g_bar(&law, 4, 20_000, 1);
        assert!(g[0].value <= gb[4].value);
    }

    #[test]
    fn sum_eg_is_positive_and_above_first_term() {
        let law = reference();
        let h = vec![1.0, 1.5, 2.0];
        let s = sum_eg(&law, &h, 500, 20_000, 2).unwrap();
        let first = (1.0 + 1.0 / 1.5 + 0.5) / 3.0;
        assert!(s.value.value > first);
        assert!(s.tail >= 0.0);
    }

    #[test]
    fn many_to_one_total_mass() {
        // E[W_m] = 1 at the boundary, so f = e^{-x_m} has mean 1.
        let law = OffspringLaw::reference();
        let e = many_to_one_mean(&law, 4, |p| (-p[3]).exp(), 100_000, 9);
        assert!((e.value - 1.0).abs() < 4.0 * e.se, "{e}");
    }

    #[test]
    fn spine_identity_holds() {
        let law = reference();
        let r = table();
        let (a, b) = spine_identity(&law, &r, 1.0, 4, |p| (p[3] > 2.0) as u8 as f64, 40_000, 5).unwrap();
        assert!(a.z_distance(&b) < 4.0, "{a} vs {b}");
    }

    #[test]
    fn split_matches_plain_at_small_n() {
        let law = reference();
        let r = table();
        let grid = [16u64];
        for f in ["eSMSbd", "SmSbd", "mSSbd", "mSeS"] {
            let s = appendix_check(f, Some(&grid), None, &law, Some((&r, &r)), 20_000, 1).unwrap();
            let p = appendix_check(f, Some(&grid), None, &law, None, 200_000, 2).unwrap();
            assert_eq!(s.method, "split");
            assert_eq!(p.method, "plain");
            let (a, b) = (s.rows[0].lhs, p.rows[0].lhs);
            assert!(a.z_distance(&b) < 4.0, "{f}: {a} vs {b}");
        }
    }

    #[test]
    fn catalog_is_complete() {
        assert_eq!(FactId::ALL.len(), 18);
        for f in FactId::ALL {
            assert_eq!(f.name().parse::<FactId>().unwrap(), f);
        }
        assert!(appendix_check("nope", None, None, &reference(), None, 10, 0).is_err());
    }

    #[test]
    fn ldp_never_observed() {
        let rep = appendix_check("LDP", Some(&[16, 32]), None, &reference(), None, 100_000, 0).unwrap();
        assert!(rep.rows.iter().all(|r| r.lhs.value == 0.0));
    }

    #[test]
    fn half_octave_grid() {
        let g = half_octaves(6, 8);
        assert_eq!(g, vec![64, 91, 128, 181, 256]);
    }
}
