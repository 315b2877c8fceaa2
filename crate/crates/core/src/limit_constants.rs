//! Limit constants built from Brownian meanders: Ψ^{a,b}, 𝒞_{a,b}, C_{a,b}, 𝒮𝒞_{a,b},
//! λ(γ) and Λ.
//!
//! Each meander enters only through its endpoint e = 𝔪₁, final drawdown
//! d = 𝔪̄₁ − 𝔪₁ and maximal drawdown M = max_s(𝔪̄_s − 𝔪_s) (which equals
//! max_s(𝔪_s − 𝔪̲_{[s,1]})). The nested expectation in 𝒞 is then a two-sample
//! dominance count between an outer and an inner pool of triples.

use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env_model::{OffspringLaw, StepLaw};
use crate::error::{domain, Error, Result};
use crate::onedim::{
    fluctuation_constants, h_infinity, sum_eg, FluctuationConstants, HTransform, RenewalTable, SumEG,
};
use crate::par;
use crate::rng::{combine, purpose, replica_rng, Rng};
use crate::stats::{exp_int_e1, Estimate, Welford};

/// −ζ(1/2)/√(2π): discrete monitoring of a barrier acts like a continuous barrier
/// shifted by this many step standard deviations.
pub const SIEGMUND_BETA: f64 = 0.582_597_157_939_010_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanderMode {
    /// Gaussian walk conditioned on S̲_m > 0, with the barrier continuity correction.
    Rejection,
    /// Rayleigh endpoint and a Bessel(3) bridge.
    BesselBridge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanderPath {
    /// 𝔪 at times k/m, k = 0..=m.
    pub values: Vec<f64>,
    pub generator: MeanderMode,
}

/// Endpoint, final drawdown and maximal drawdown of a path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanderStats {
    pub e: f64,
    pub d: f64,
    pub m: f64,
}

impl MeanderPath {
    pub fn stats(&self) -> MeanderStats {
        path_stats(&self.values)
    }
}

fn path_stats(v: &[f64]) -> MeanderStats {
    let (mut mx, mut dd) = (f64::NEG_INFINITY, 0.0f64);
    for x in v {
        mx = mx.max(*x);
        dd = dd.max(mx - x);
    }
    let e = *v.last().unwrap();
    MeanderStats { e, d: mx - e, m: dd }
}

/// Largest m for which the rejection generator keeps acceptance ≥ 1e-4
/// (P(S̲_m > 0) ≈ 1/√(πm)).
pub const REJECTION_MAX_M: usize = 31_830_988;

pub fn meander_sample(m: usize, mode: MeanderMode, rng: &mut Rng) -> Result<MeanderPath> {
    if m < 64 {
        return domain(format!("meander discretisation must be at least 64, got {m}"));
    }
    let mut values = vec![0.0; m + 1];
    match mode {
        MeanderMode::Rejection => {
            if m > REJECTION_MAX_M {
                return Err(Error::Efficiency(format!(
                    "rejection acceptance below 1e-4 at m = {m}; use the bessel-bridge generator"
                )));
            }
            let scale = 1.0 / (m as f64).sqrt();
            'outer: loop {
                let mut s = 0.0;
                for k in 1..=m {
                    let z: f64 = StandardNormal.sample(rng);
                    s += z;
                    if s <= 0.0 {
                        continue 'outer;
                    }
                    values[k] = (s + SIEGMUND_BETA) * scale;
                }
                break;
            }
        }
        MeanderMode::BesselBridge => {
            let e: f64 = Exp1.sample(rng);
            let x = (2.0 * e).sqrt();
            let dt = 1.0 / m as f64;
            let mut b = [0.0f64; 3];
            for k in 1..=m {
                let t0 = (k - 1) as f64 * dt;
                let t1 = k as f64 * dt;
                if k == m {
                    b = [0.0; 3];
                } else {
                    let shrink = (1.0 - t1) / (1.0 - t0);
                    let sd = (dt * shrink).sqrt();
                    for c in &mut b {
                        let z: f64 = StandardNormal.sample(rng);
                        *c = *c * shrink + sd * z;
                    }
                }
                let p0 = b[0] + t1 * x;
                values[k] = (p0 * p0 + b[1] * b[1] + b[2] * b[2]).sqrt();
            }
        }
    }
    Ok(MeanderPath { values, generator: mode })
}

/// Triples (e, d, M) of independent meanders.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanderPool {
    pub m: usize,
    pub generator: MeanderMode,
    pub stats: Vec<MeanderStats>,
}

impl MeanderPool {
    pub fn build(m: usize, mode: MeanderMode, size: usize, seed: u64) -> Result<Self> {
        let parts = par::chunked(size, 256, |ci, len| -> Result<Vec<MeanderStats>> {
            let mut rng = replica_rng(seed, purpose::MEANDER, combine(mode as u64, ci as u64));
            (0..len).map(|_| meander_sample(m, mode, &mut rng).map(|p| p.stats())).collect()
        });
        let mut stats = Vec::with_capacity(size);
        for p in parts {
            stats.extend(p?);
        }
        Ok(MeanderPool { m, generator: mode, stats })
    }

    pub fn endpoints(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.e).collect()
    }

    pub fn max_drawdowns(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.m).collect()
    }
}

struct Fenwick(Vec<u32>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }
    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }
    /// Number of inserted indices < i.
    fn prefix(&self, mut i: usize) -> u64 {
        let mut s = 0u64;
        while i > 0 {
            s += self.0[i] as u64;
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// For each query (T, U): #{points with e > T and d ≤ U}.
fn dominance_counts(points: &[(f64, f64)], queries: &[(f64, f64)]) -> Vec<u64> {
    let mut ds: Vec<f64> = points.iter().map(|p| p.1).collect();
    ds.sort_by(|a, b| a.total_cmp(b));
    let mut pts: Vec<(f64, usize)> = points
        .iter()
        .map(|p| (p.0, ds.partition_point(|x| *x < p.1)))
        .collect();
    pts.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.sort_by(|a, b| queries[*b].0.total_cmp(&queries[*a].0));
    let mut fw = Fenwick::new(ds.len());
    let mut out = vec![0u64; queries.len()];
    let mut next = 0;
    for qi in order {
        let (t, u) = queries[qi];
        while next < pts.len() && pts[next].0 > t {
            fw.add(pts[next].1);
            next += 1;
        }
        if u >= 0.0 {
            out[qi] = fw.prefix(ds.partition_point(|x| *x <= u));
        }
    }
    out
}

/// Ψ^{a,b}(x, h) from an inner pool, in units where the meander has variance σ².
pub fn psi_functional(x: f64, h: f64, a: f64, b: f64, sigma2: f64, c2_plus: f64, inner: &MeanderPool) -> Estimate {
    let s = sigma2.sqrt();
    let (ap, bp) = (std::f64::consts::SQRT_2 * a / s, std::f64::consts::SQRT_2 * b / s);
    let (x, h) = (x / s, h / s);
    let lo = (bp - x).max(h);
    let dmax = (ap - h).max(0.0).min(x);
    let w: Welford = inner
        .stats
        .iter()
        .map(|t| (t.e > lo && t.d <= dmax && t.m <= ap) as u8 as f64)
        .collect();
    w.estimate().scale(c2_plus)
}

/// E[P_inner(…); outer] for two independent pools, with first-order U-statistic
/// influence values for each pool member.
#[derive(Clone, Debug)]
pub struct PairProbability {
    pub value: f64,
    pub outer_influence: Vec<f64>,
    pub inner_influence: Vec<f64>,
}

impl PairProbability {
    pub fn se(&self) -> f64 {
        let vo: Welford = self.outer_influence.iter().copied().collect();
        let vi: Welford = self.inner_influence.iter().copied().collect();
        (vo.variance() / vo.n as f64 + vi.variance() / vi.n as f64).sqrt()
    }
}

/// P(e' > (b'−e)∨d, d' ≤ (a'−d)₊∧e, M' ≤ a'; M ≤ a') over (outer, inner) meanders with
/// a' = √2a/σ and b' = √2b/σ.
pub fn pair_probability(a: f64, b: f64, sigma2: f64, outer: &MeanderPool, inner: &MeanderPool) -> PairProbability {
    let s = sigma2.sqrt();
    let (ap, bp) = (std::f64::consts::SQRT_2 * a / s, std::f64::consts::SQRT_2 * b / s);
    let no = outer.stats.len() as f64;
    let ni = inner.stats.len() as f64;
    if a <= 0.0 {
        return PairProbability {
            value: 0.0,
            outer_influence: vec![0.0; outer.stats.len()],
            inner_influence: vec![0.0; inner.stats.len()],
        };
    }
    // Outer view: for each outer i, inner k with e_k > max(b'−e_i, d_i), d_k ≤ min(a'−d_i, e_i).
    let inner_pts: Vec<(f64, f64)> =
        inner.stats.iter().map(|t| if t.m <= ap { (t.e, t.d) } else { (f64::NEG_INFINITY, f64::INFINITY) }).collect();
    let oq: Vec<(f64, f64)> = outer
        .stats
        .iter()
        .map(|t| if t.m <= ap { ((bp - t.e).max(t.d), (ap - t.d).min(t.e)) } else { (f64::INFINITY, -1.0) })
        .collect();
    let oc = dominance_counts(&inner_pts, &oq);
    // Inner view: outer i with e_i > max(b'−e_k, d_k) and d_i < min(e_k, a'−d_k).
    let outer_pts: Vec<(f64, f64)> =
        outer.stats.iter().map(|t| if t.m <= ap { (t.e, t.d) } else { (f64::NEG_INFINITY, f64::INFINITY) }).collect();
    let iq: Vec<(f64, f64)> = inner
        .stats
        .iter()
        .map(|t| if t.m <= ap { ((bp - t.e).max(t.d), t.e.min(ap - t.d)) } else { (f64::INFINITY, -1.0) })
        .collect();
    let ic = dominance_counts(&outer_pts, &iq);
    let outer_influence: Vec<f64> = oc.iter().map(|c| *c as f64 / ni).collect();
    let inner_influence: Vec<f64> = ic.iter().map(|c| *c as f64 / no).collect();
    let value = outer_influence.iter().sum::<f64>() / no;
    PairProbability { value, outer_influence, inner_influence }
}

/// Fluctuation-theory inputs shared by every constant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WalkInputs {
    pub sigma2: f64,
    pub c0: Estimate,
    pub c1_plus: Estimate,
    pub c2_plus: Estimate,
    pub sum_eg: Estimate,
}

impl WalkInputs {
    /// Multiplier turning the pair probability into 𝒞: 2c₁⁺c₂⁺.
    fn curly_factor(&self) -> Estimate {
        self.c1_plus.mul(&self.c2_plus).scale(2.0)
    }
}

/// 𝒞_{a,b} = 2c₁⁺ E[Ψ^{a,b}(σ𝔪₁, σ(𝔪̄₁−𝔪₁)); max σ(𝔪̄_s−𝔪_s) ≤ √2a]
///         = 2c₁⁺c₂⁺ P(pair event).
pub fn curly_c(a: f64, b: f64, w: &WalkInputs, outer: &MeanderPool, inner: &MeanderPool) -> Estimate {
    let p = pair_probability(a, b, w.sigma2, outer, inner);
    Estimate::new(p.value, p.se()).mul(&w.curly_factor())
}

/// C_{a,b} = 𝒞_{a,b} Σ_j E𝒢_j(ℋ_∞).
pub fn bold_c(a: f64, b: f64, w: &WalkInputs, outer: &MeanderPool, inner: &MeanderPool) -> Estimate {
    curly_c(a, b, w, outer, inner).mul(&w.sum_eg)
}

/// 𝒮𝒞_{a,b} = c₀ C_{a,b}.
pub fn scr_c(a: f64, b: f64, w: &WalkInputs, outer: &MeanderPool, inner: &MeanderPool) -> Estimate {
    bold_c(a, b, w, outer, inner).mul(&w.c0)
}

/// λ(γ) = 𝒮𝒞_{γ^{-1/2}, γ^{-1/2}}/γ.
pub fn lambda(gamma: f64, w: &WalkInputs, outer: &MeanderPool, inner: &MeanderPool) -> Result<Estimate> {
    if !(gamma > 0.0) {
        return domain("gamma must be positive");
    }
    let a = gamma.powf(-0.5);
    Ok(scr_c(a, a, w, outer, inner).scale(1.0 / gamma))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub gamma: f64,
    pub lambda: Estimate,
    /// False when no pair of meanders realised the event.
    pub resolved: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaIntegral {
    pub points: Vec<LambdaPoint>,
    pub value: Estimate,
    pub body: f64,
    pub tail_small: f64,
    pub tail_large: f64,
    pub tail_share: f64,
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Λ = ∫λ: trapezoid in log γ on the grid plus edge tails,
/// small γ: λ(γ) ≈ A e^{−k/γ}/γ with k = 1/(4σ²), giving A·E₁(k/γ_min);
/// large γ: λ(γ) ≈ B/γ², giving λ(γ_max)γ_max.
/// The SE uses the U-statistic influence values, so correlation across γ is kept.
pub fn lambda_integral(grid: &[f64], w: &WalkInputs, outer: &MeanderPool, inner: &MeanderPool) -> Result<LambdaIntegral> {
    if grid.len() < 2 || grid.windows(2).any(|p| p[1] <= p[0]) || grid[0] <= 0.0 {
        return domain("gamma grid must be positive, increasing, with at least two points");
    }
    let n = grid.len();
    let factor = w.curly_factor().mul(&w.sum_eg).mul(&w.c0);
    let k = 1.0 / (4.0 * w.sigma2);
    // Weight of each grid value of λ(γ)γ in the log-γ trapezoid plus tails.
    let mut weights = vec![0.0; n];
    for i in 0..n - 1 {
        let h = (grid[i + 1] / grid[i]).ln() / 2.0;
        weights[i] += h;
        weights[i + 1] += h;
    }
    let small_w = (k / grid[0]).exp() * exp_int_e1(k / grid[0]);
    let mut points = Vec::with_capacity(n);
    let mut io = vec![0.0; outer.stats.len()];
    let mut ii = vec![0.0; inner.stats.len()];
    let mut pair_vals = vec![0.0; n];
    for (i, g) in grid.iter().enumerate() {
        let a = g.powf(-0.5);
        let p = pair_probability(a, a, w.sigma2, outer, inner);
        // λγ = factor · p.
        let wt = weights[i] + if i == 0 { small_w } else { 0.0 } + if i == n - 1 { 1.0 } else { 0.0 };
        for (x, y) in io.iter_mut().zip(&p.outer_influence) {
            *x += wt * y;
        }
        for (x, y) in ii.iter_mut().zip(&p.inner_influence) {
            *x += wt * y;
        }
        pair_vals[i] = p.value;
        let lam = Estimate::new(p.value, p.se()).mul(&factor).scale(1.0 / g);
        points.push(LambdaPoint { gamma: *g, lambda: lam, resolved: p.value > 0.0 });
    }
    let body: f64 = (0..n).map(|i| weights[i] * pair_vals[i]).sum::<f64>() * factor.value;
    let tail_small = small_w * pair_vals[0] * factor.value;
    let tail_large = pair_vals[n - 1] * factor.value;
    let total_pair = PairProbability { value: 0.0, outer_influence: io, inner_influence: ii };
    let pair_sum: f64 = (0..n).map(|i| weights[i] * pair_vals[i]).sum::<f64>()
        + small_w * pair_vals[0]
        + pair_vals[n - 1];
    let value = Estimate::new(pair_sum, total_pair.se()).mul(&factor);
    let tail_share = if value.value > 0.0 { (tail_small + tail_large) / value.value } else { 0.0 };
    if tail_share > 0.1 {
        return Err(Error::Convergence(format!(
            "gamma grid too narrow: tails carry {:.1}% of Lambda",
            100.0 * tail_share
        )));
    }
    Ok(LambdaIntegral { points, value, body, tail_small, tail_large, tail_share })
}

/// Knobs of the full constants pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsConfig {
    pub seed: u64,
    pub renewal_replicas: usize,
    pub ladder_pool: usize,
    pub constants_grid: Vec<u64>,
    pub constants_replicas: usize,
    pub h_samples: usize,
    pub h_truncation: usize,
    pub geg_j_max: usize,
    pub geg_replicas: usize,
    pub meander_m: usize,
    pub meander_pool: usize,
    pub a_grid: Vec<f64>,
    pub b_grid: Vec<f64>,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub gamma_points: usize,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        ConstantsConfig {
            seed: 1,
            renewal_replicas: 1_000_000,
            ladder_pool: 1 << 20,
            constants_grid: crate::onedim::default_constants_grid(),
            constants_replicas: 400_000,
            h_samples: 20_000,
            h_truncation: 400,
            geg_j_max: 10_000,
            geg_replicas: 200_000,
            meander_m: 4096,
            meander_pool: 100_000,
            a_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
            b_grid: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            gamma_min: 0.02,
            gamma_max: 50.0,
            gamma_points: 60,
        }
    }
}

impl ConstantsConfig {
    /// Small budgets for smoke runs.
    pub fn quick() -> Self {
        ConstantsConfig {
            renewal_replicas: 100_000,
            ladder_pool: 1 << 16,
            constants_grid: vec![64, 128, 256, 512, 1024],
            constants_replicas: 100_000,
            h_samples: 4000,
            h_truncation: 200,
            geg_j_max: 2000,
            geg_replicas: 20_000,
            meander_m: 256,
            meander_pool: 10_000,
            gamma_points: 30,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantsHeader {
    pub sigma2: f64,
    pub c0: Estimate,
    pub c1_plus: Estimate,
    pub c2_plus: Estimate,
    pub sum_eg: Estimate,
    pub h_infinity_mean: Estimate,
    #[serde(rename = "Lambda")]
    pub lambda_integral: Estimate,
    pub seed: u64,
    pub meander_m: usize,
    pub meander_pool: usize,
}

/// All constants, their inputs and the (a, b) tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub header: ConstantsHeader,
    pub config: ConstantsConfig,
    pub renewal: RenewalTable,
    pub fluctuation: FluctuationConstants,
    pub sum_eg: SumEG,
    pub a_grid: Vec<f64>,
    pub b_grid: Vec<f64>,
    /// curly_c[i][j] = 𝒞_{a_i, b_j}.
    pub curly_c: Vec<Vec<Estimate>>,
    pub bold_c: Vec<Vec<Estimate>>,
    pub lambda: LambdaIntegral,
    pub warnings: Vec<String>,
}

impl ConstantsReport {
    pub fn walk_inputs(&self) -> WalkInputs {
        WalkInputs {
            sigma2: self.header.sigma2,
            c0: self.header.c0,
            c1_plus: self.header.c1_plus,
            c2_plus: self.header.c2_plus,
            sum_eg: self.header.sum_eg,
        }
    }

    /// Plot-ready γ, λ, SE table.
    pub fn lambda_csv(&self) -> String {
        let mut s = String::from("gamma,lambda,se,resolved\n");
        for p in &self.lambda.points {
            s.push_str(&format!("{:.6e},{:.6e},{:.6e},{}\n", p.gamma, p.lambda.value, p.lambda.se, p.resolved));
        }
        s
    }

    pub fn curly_c_csv(&self) -> String {
        let mut s = String::from("a,b,curly_c,se,bold_c,bold_c_se\n");
        for (i, a) in self.a_grid.iter().enumerate() {
            for (j, b) in self.b_grid.iter().enumerate() {
                let (c, k) = (self.curly_c[i][j], self.bold_c[i][j]);
                s.push_str(&format!("{a},{b},{:.6e},{:.6e},{:.6e},{:.6e}\n", c.value, c.se, k.value, k.se));
            }
        }
        s
    }
}

/// Intermediate pools, kept so callers can evaluate further constants.
pub struct ConstantsState {
    pub report: ConstantsReport,
    pub outer: MeanderPool,
    pub inner: MeanderPool,
    pub h_values: Vec<f64>,
}

pub fn build_constants(law: &OffspringLaw, cfg: &ConstantsConfig) -> Result<ConstantsState> {
    let step = law.step_law();
    build_constants_for_step(&step, cfg)
}

pub fn build_constants_for_step(step: &StepLaw, cfg: &ConstantsConfig) -> Result<ConstantsState> {
    let seed = cfg.seed;
    let renewal = RenewalTable::build(step, cfg.renewal_replicas, cfg.ladder_pool, combine(seed, 1))?;
    let fluct = fluctuation_constants(step, renewal.c0, &cfg.constants_grid, cfg.constants_replicas, combine(seed, 2))?;
    let ht = HTransform::new(step, &renewal);
    let hs = h_infinity(&ht, cfg.h_samples, cfg.h_truncation, combine(seed, 3))?;
    let seg = sum_eg(step, &hs.values, cfg.geg_j_max, cfg.geg_replicas, combine(seed, 4))?;
    let outer = MeanderPool::build(cfg.meander_m, MeanderMode::BesselBridge, cfg.meander_pool, combine(seed, 5))?;
    let inner = MeanderPool::build(cfg.meander_m, MeanderMode::BesselBridge, cfg.meander_pool, combine(seed, 6))?;
    let w = WalkInputs {
        sigma2: step.variance(),
        c0: renewal.c0,
        c1_plus: fluct.c1_plus,
        c2_plus: fluct.c2_plus,
        sum_eg: seg.value,
    };
    let curly: Vec<Vec<Estimate>> = cfg
        .a_grid
        .iter()
        .map(|a| cfg.b_grid.iter().map(|b| curly_c(*a, *b, &w, &outer, &inner)).collect())
        .collect();
    let bold: Vec<Vec<Estimate>> =
        curly.iter().map(|row| row.iter().map(|c| c.mul(&w.sum_eg)).collect()).collect();
    let grid = log_grid(cfg.gamma_min, cfg.gamma_max, cfg.gamma_points);
    let lam = lambda_integral(&grid, &w, &outer, &inner)?;
    let mut warnings = fluct.warnings.clone();
    let unresolved = lam.points.iter().filter(|p| !p.resolved).count();
    if unresolved > 0 {
        warnings.push(format!("{unresolved} gamma grid points unresolved (no meander pair realised the event)"));
    }
    let header = ConstantsHeader {
        sigma2: w.sigma2,
        c0: w.c0,
        c1_plus: w.c1_plus,
        c2_plus: w.c2_plus,
        sum_eg: w.sum_eg,
        h_infinity_mean: hs.estimate,
        lambda_integral: lam.value,
        seed,
        meander_m: cfg.meander_m,
        meander_pool: cfg.meander_pool,
    };
    let report = ConstantsReport {
        header,
        config: cfg.clone(),
        renewal,
        fluctuation: fluct,
        sum_eg: seg,
        a_grid: cfg.a_grid.clone(),
        b_grid: cfg.b_grid.clone(),
        curly_c: curly,
        bold_c: bold,
        lambda: lam,
        warnings,
    };
    Ok(ConstantsState { report, outer, inner, h_values: hs.values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::stats::ks_two_sample;

    fn brute_pair(a: f64, b: f64, s2: f64, o: &MeanderPool, i: &MeanderPool) -> f64 {
        let s = s2.sqrt();
        let (ap, bp) = (std::f64::consts::SQRT_2 * a / s, std::f64::consts::SQRT_2 * b / s);
        let mut c = 0u64;
        for x in &o.stats {
            if x.m > ap {
                continue;
            }
            for y in &i.stats {
                if y.e > (bp - x.e).max(x.d) && y.d <= (ap - x.d).max(0.0).min(x.e) && y.m <= ap {
                    c += 1;
                }
            }
        }
        c as f64 / (o.stats.len() * i.stats.len()) as f64
    }

    #[test]
    fn dominance_matches_brute_force() {
        let o = MeanderPool::build(64, MeanderMode::BesselBridge, 300, 1).unwrap();
        let i = MeanderPool::build(64, MeanderMode::BesselBridge, 250, 2).unwrap();
        for (a, b) in [(1.0, 1.0), (0.5, 0.0), (2.0, 0.5), (0.3, 2.0)] {
            let p = pair_probability(a, b, 1.3, &o, &i);
            let q = brute_pair(a, b, 1.3, &o, &i);
            assert!((p.value - q).abs() < 1e-12, "{a} {b}: {} vs {q}", p.value);
            let inner_mean = p.inner_influence.iter().sum::<f64>() / p.inner_influence.len() as f64;
            assert!((inner_mean - q).abs() < 1e-12);
        }
    }

    #[test]
    fn meander_paths_are_positive() {
        let mut rng = stream_rng(4, 4);
        for mode in [MeanderMode::Rejection, MeanderMode::BesselBridge] {
            let p = meander_sample(128, mode, &mut rng).unwrap();
            assert_eq!(p.values.len(), 129);
            assert_eq!(p.values[0], 0.0);
            assert!(p.values[1..].iter().all(|x| *x > 0.0));
        }
        assert!(meander_sample(10, MeanderMode::BesselBridge, &mut rng).is_err());
        assert!(matches!(
            meander_sample(REJECTION_MAX_M + 1, MeanderMode::Rejection, &mut rng),
            Err(Error::Efficiency(_))
        ));
    }

    #[test]
    fn rayleigh_endpoint_mean() {
        let p = MeanderPool::build(64, MeanderMode::BesselBridge, 20_000, 3).unwrap();
        let w: Welford = p.endpoints().into_iter().collect();
        let target = (std::f64::consts::PI / 2.0).sqrt();
        assert!((w.mean - target).abs() < 4.0 * w.se());
    }

    #[test]
    fn generators_agree_on_drawdown() {
        let a = MeanderPool::build(256, MeanderMode::Rejection, 8000, 5).unwrap();
        let b = MeanderPool::build(256, MeanderMode::BesselBridge, 8000, 6).unwrap();
        let ks = ks_two_sample(&a.max_drawdowns(), &b.max_drawdowns());
        assert!(ks.p_value > 0.001, "{ks:?}");
        let ks = ks_two_sample(&a.endpoints(), &b.endpoints());
        assert!(ks.p_value > 0.001, "{ks:?}");
    }

    #[test]
    fn psi_bounds() {
        let i = MeanderPool::build(64, MeanderMode::BesselBridge, 2000, 7).unwrap();
        let c2 = 0.56;
        let p = psi_functional(1.0, 0.5, 1.0, 0.5, 1.0, c2, &i);
        assert!(p.value <= c2);
        assert_eq!(psi_functional(1.0, 0.5, 0.0, 0.5, 1.0, c2, &i).value, 0.0);
        let lo = psi_functional(1.0, 0.5, 1.0, 1.5, 1.0, c2, &i);
        assert!(lo.value <= p.value);
    }

    #[test]
    fn curly_c_structure() {
        let o = MeanderPool::build(64, MeanderMode::BesselBridge, 2000, 8).unwrap();
        let i = MeanderPool::build(64, MeanderMode::BesselBridge, 2000, 9).unwrap();
        let w = WalkInputs {
            sigma2: 2.0 * std::f64::consts::LN_2,
            c0: Estimate::exact(1.2),
            c1_plus: Estimate::exact(0.56),
            c2_plus: Estimate::exact(0.56),
            sum_eg: Estimate::exact(1.0),
        };
        assert_eq!(curly_c(0.0, 1.0, &w, &o, &i).value, 0.0);
        let a = [0.25, 0.5, 1.0, 2.0];
        let b = [0.0, 0.5, 1.0, 2.0];
        for bi in b {
            let v: Vec<f64> = a.iter().map(|ai| curly_c(*ai, bi, &w, &o, &i).value).collect();
            assert!(v.windows(2).all(|p| p[1] >= p[0]));
        }
        for ai in a {
            let v: Vec<f64> = b.iter().map(|bi| curly_c(ai, *bi, &w, &o, &i).value).collect();
            assert!(v.windows(2).all(|p| p[1] <= p[0]));
        }
        let l = lambda_integral(&log_grid(0.02, 50.0, 40), &w, &o, &i).unwrap();
        assert!(l.value.value > 0.0 && l.tail_share < 0.1);
        assert!(lambda(0.0, &w, &o, &i).is_err());
    }

    #[test]
    fn grid_helpers() {
        let g = log_grid(0.1, 10.0, 3);
        assert!((g[1] - 1.0).abs() < 1e-12);
        assert_eq!(dominance_counts(&[(1.0, 1.0), (2.0, 0.5)], &[(0.5, 0.7), (1.5, 2.0), (0.0, -1.0)]), vec![1, 1, 0]);
    }
}
