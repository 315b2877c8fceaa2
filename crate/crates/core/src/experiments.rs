//! Scenario runners: walk statistics set against the limit constants.
//!
//! Every table is a trend table. Nothing here decides whether a limit "holds";
//! the acceptance suite and the CLI read the ratios and drifts.

use crate::env_model::OffspringLaw;
use crate::env_tree::{EnvTree, NodeId, RestrictionParams, SetId, ROOT};
use crate::error::{domain, Error, Result};
use crate::limit_constants::{scr_c, ConstantsState};
use crate::onedim::{many_to_one_mean, wf_many_to_one};
use crate::par;
use crate::quenched_exact::{az, w_functionals};
use crate::rng::{combine, purpose};
use crate::stats::{median, quantile, Estimate, Welford};
use crate::walker::{critical_window_mass, run_walk, run_walk_with, WalkConfig, WalkMode, WalkRecord};
use serde::{Deserialize, Serialize};

/// Depth to which a fresh tree must survive before it is used.
const SURVIVAL_DEPTH: u32 = 32;
const SURVIVAL_ATTEMPTS: u32 = 1000;

pub fn tree_seed(master: u64, replica: u64) -> u64 {
    combine(combine(master, purpose::TREE), replica)
}

pub fn walk_seed(master: u64, replica: u64) -> u64 {
    combine(combine(master, purpose::WALK), replica)
}

/// Serialises rows as CSV with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Internal(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

/// Sidecar written next to every table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub version: String,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    /// How per-replica seeds are derived from `seed`.
    pub seed_derivation: String,
    pub files: Vec<String>,
    pub flags: Vec<String>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(experiment: &str, config_hash: &str, seed: u64) -> Self {
        Manifest {
            artifact: "rwre".into(),
            version: crate::VERSION.into(),
            experiment: experiment.into(),
            config_hash: config_hash.into(),
            seed,
            seed_derivation: "tree = combine(combine(seed, TREE), r); walk = combine(combine(seed, WALK), r)"
                .into(),
            files: Vec::new(),
            flags: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }
}

/// Limit constants an experiment compares against.
pub struct Predictions<'a> {
    pub state: &'a ConstantsState,
}

impl Predictions<'_> {
    pub fn sigma2(&self) -> f64 {
        self.state.report.header.sigma2
    }

    pub fn big_lambda(&self) -> Estimate {
        self.state.report.lambda.value
    }

    /// λ(γ) by log-log interpolation on the tabulated grid; `None` off the grid.
    pub fn lambda_at(&self, gamma: f64) -> Option<f64> {
        let pts = &self.state.report.lambda.points;
        let i = pts.iter().position(|p| p.gamma >= gamma)?;
        if i == 0 {
            return (pts[0].gamma == gamma).then_some(pts[0].lambda.value);
        }
        let (p, q) = (&pts[i - 1], &pts[i]);
        if p.lambda.value <= 0.0 || q.lambda.value <= 0.0 {
            let t = (gamma - p.gamma) / (q.gamma - p.gamma);
            return Some(p.lambda.value + t * (q.lambda.value - p.lambda.value));
        }
        let t = (gamma.ln() - p.gamma.ln()) / (q.gamma.ln() - p.gamma.ln());
        Some((p.lambda.value.ln() + t * (q.lambda.value.ln() - p.lambda.value.ln())).exp())
    }

    pub fn scr_c(&self, a: f64, b: f64) -> Estimate {
        let s = self.state;
        scr_c(a, b, &s.report.walk_inputs(), &s.outer, &s.inner)
    }

    /// 𝐂_{a,b} R(α).
    pub fn bold_c_r(&self, a: f64, b: f64, alpha: f64) -> Estimate {
        let s = self.state;
        let c = crate::limit_constants::bold_c(a, b, &s.report.walk_inputs(), &s.outer, &s.inner);
        c.mul(&s.report.renewal.eval_estimate(alpha))
    }
}

fn surviving_tree(law: &OffspringLaw, seed: u64) -> Result<EnvTree> {
    EnvTree::new_surviving(law.clone(), seed, SURVIVAL_DEPTH, SURVIVAL_ATTEMPTS)
}

/// D_m at generation `depth`, or the deepest generation below `max_nodes`.
fn derivative_martingale(tree: &mut EnvTree, depth: u32, max_nodes: usize) -> Result<(u32, f64)> {
    let mut best = None;
    for m in (1..=depth).rev() {
        match w_functionals(tree, m, 0.0, 0.0, None, None, max_nodes) {
            Ok(w) => {
                best = Some((m, w.d));
                break;
            }
            Err(Error::Resource(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| Error::Resource("no generation fits the node budget".into()))
}

fn summary(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    (median(values), quantile(values, 0.25), quantile(values, 0.75))
}

// ---------------------------------------------------------------------------
// critical generation scan

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub n_grid: Vec<u64>,
    pub gamma_grid: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    /// Also run to the n-th return and report K_n(ℓ).
    pub excursions: bool,
    pub max_steps: u64,
    /// Depth of the D_m proxy used in the excursion prediction.
    pub d_depth: u32,
    pub max_nodes: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            n_grid: vec![10_000, 100_000, 1_000_000],
            gamma_grid: vec![0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 20.0],
            replicas: 32,
            seed: 1,
            excursions: false,
            max_steps: 10_000_000,
            d_depth: 14,
            max_nodes: 1 << 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub n: u64,
    pub gamma: f64,
    pub generation: u32,
    /// "N" for (log n)³N_n(ℓ)/n, "K" for (log n)²K_n(ℓ)/n.
    pub statistic: String,
    pub replicas: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub predicted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArgmaxRow {
    pub n: u64,
    pub replicas: usize,
    /// Argmax of the replica-averaged first-visit histogram.
    pub argmax_generation: u32,
    pub argmax_ratio: f64,
    /// Median over replicas of the per-replica argmax / (log n)².
    pub median_replica_ratio: f64,
    /// (log n)³ max_ℓ N_n(ℓ)/n on the averaged histogram; exploratory.
    pub max_normalized: f64,
    pub mean_range: f64,
    pub max_depth: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanTable {
    pub rows: Vec<ScanRow>,
    pub argmax: Vec<ArgmaxRow>,
    pub flags: Vec<String>,
}

struct ScanReplica {
    hist: Option<Vec<u64>>,
    range: u64,
    max_depth: u32,
    k_hist: Option<Vec<u64>>,
    pd: Option<f64>,
    flags: Vec<String>,
}

fn argmax(hist: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in hist.iter().enumerate() {
        if *v > hist[best] {
            best = i;
        }
    }
    best
}

pub fn critical_generation_scan(
    law: &OffspringLaw,
    cfg: &ScanConfig,
    pred: Option<&Predictions>,
) -> Result<ScanTable> {
    let mut table = ScanTable::default();
    if cfg.replicas == 0 {
        return Ok(table);
    }
    for &n in &cfg.n_grid {
        if n < 3 {
            return domain("scan needs n >= 3");
        }
        let nf = n as f64;
        let ln = nf.ln();
        let reps: Vec<Result<ScanReplica>> = par::map_range(cfg.replicas, |r| {
            let r = r as u64;
            let mut tree = surviving_tree(law, tree_seed(cfg.seed, r))?;
            let mut out = ScanReplica { hist: None, range: 0, max_depth: 0, k_hist: None, pd: None, flags: vec![] };
            let mut wc = WalkConfig::new(WalkMode::FixedSteps(n), walk_seed(cfg.seed, r));
            wc.record_returns = false;
            wc.max_steps = Some(cfg.max_steps);
            match run_walk(&mut tree, &wc, &RestrictionParams::new(nf)) {
                Ok(rec) => {
                    out.range = rec.range;
                    out.max_depth = rec.max_depth;
                    out.hist = Some(rec.first_visit_gen_counts);
                }
                Err(p) => out.flags.push(format!("n={n} replica {r}: {}", p.error)),
            }
            if cfg.excursions {
                let mut wc = WalkConfig::new(WalkMode::Excursions(n), walk_seed(cfg.seed ^ 0x4b, r));
                wc.record_returns = false;
                wc.max_steps = Some(cfg.max_steps);
                match run_walk(&mut tree, &wc, &RestrictionParams::new(nf)) {
                    Ok(rec) => out.k_hist = Some(rec.first_visit_gen_counts),
                    Err(p) => out.flags.push(format!("n={n} replica {r} excursions: {}", p.error)),
                }
                let (_, d) = derivative_martingale(&mut tree, cfg.d_depth, cfg.max_nodes)?;
                out.pd = Some(tree.p_root_back()? * d);
            }
            Ok(out)
        });
        let reps: Vec<ScanReplica> = reps.into_iter().collect::<Result<_>>()?;
        for r in &reps {
            table.flags.extend(r.flags.iter().cloned());
        }
        let ok: Vec<&ScanReplica> = reps.iter().filter(|r| r.hist.is_some()).collect();
        if !ok.is_empty() {
            let len = ok.iter().map(|r| r.hist.as_ref().unwrap().len()).max().unwrap();
            let mut mean = vec![0.0; len];
            let mut per = Vec::new();
            for r in &ok {
                let h = r.hist.as_ref().unwrap();
                for (l, c) in h.iter().enumerate() {
                    mean[l] += *c as f64 / ok.len() as f64;
                }
                let hf: Vec<f64> = h.iter().map(|c| *c as f64).collect();
                per.push(argmax(&hf) as f64 / (ln * ln));
            }
            let am = argmax(&mean);
            table.argmax.push(ArgmaxRow {
                n,
                replicas: ok.len(),
                argmax_generation: am as u32,
                argmax_ratio: am as f64 / (ln * ln),
                median_replica_ratio: median(&per),
                max_normalized: ln.powi(3) * mean[am] / nf,
                mean_range: ok.iter().map(|r| r.range as f64).sum::<f64>() / ok.len() as f64,
                max_depth: ok.iter().map(|r| r.max_depth).max().unwrap(),
            });
        }
        let pds: Vec<f64> = reps.iter().filter_map(|r| r.pd).collect();
        for &g in &cfg.gamma_grid {
            let l = (g * ln * ln).ceil() as u32;
            let lam = pred.and_then(|p| p.lambda_at(g));
            let vals: Vec<f64> = ok
                .iter()
                .map(|r| {
                    let c = r.hist.as_ref().unwrap().get(l as usize).copied().unwrap_or(0);
                    ln.powi(3) * c as f64 / nf
                })
                .collect();
            let (med, q25, q75) = summary(&vals);
            table.rows.push(ScanRow {
                n,
                gamma: g,
                generation: l,
                statistic: "N".into(),
                replicas: vals.len(),
                median: med,
                q25,
                q75,
                predicted: lam.zip(pred).map(|(x, p)| x * p.sigma2() / 4.0),
            });
            if cfg.excursions {
                let vals: Vec<f64> = reps
                    .iter()
                    .filter_map(|r| r.k_hist.as_ref())
                    .map(|h| ln * ln * h.get(l as usize).copied().unwrap_or(0) as f64 / nf)
                    .collect();
                let (med, q25, q75) = summary(&vals);
                table.rows.push(ScanRow {
                    n,
                    gamma: g,
                    generation: l,
                    statistic: "K".into(),
                    replicas: vals.len(),
                    median: med,
                    q25,
                    q75,
                    predicted: lam.filter(|_| !pds.is_empty()).map(|x| x * median(&pds)),
                });
            }
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// local time at the root

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTimeConfig {
    pub tree_seed: u64,
    pub n_grid: Vec<u64>,
    pub walks: usize,
    pub seed: u64,
    pub d_depth: u32,
    pub max_nodes: usize,
    pub max_steps: u64,
    /// α of the second D_∞ proxy D^{(α)}_m / c₀.
    pub alpha: f64,
}

impl Default for LocalTimeConfig {
    fn default() -> Self {
        LocalTimeConfig {
            tree_seed: 1,
            n_grid: vec![100, 1_000, 10_000, 100_000],
            walks: 16,
            seed: 2,
            d_depth: 16,
            max_nodes: 1 << 18,
            max_steps: 100_000_000,
            alpha: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeRow {
    pub n: u64,
    pub walks: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub predicted: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeTable {
    pub p_hat: f64,
    pub d_hat: f64,
    pub d_depth: u32,
    pub d_alpha_hat: Option<f64>,
    pub rows: Vec<LocalTimeRow>,
    /// Last ratio minus first ratio.
    pub drift: f64,
    pub flags: Vec<String>,
}

/// D̂ and p̂ on a frozen tree; the α-restricted proxy only when constants are given.
fn quenched_inputs(
    tree: &mut EnvTree,
    depth: u32,
    max_nodes: usize,
    alpha: f64,
    pred: Option<&Predictions>,
) -> Result<(f64, f64, u32, Option<f64>)> {
    let (m, d) = derivative_martingale(tree, depth, max_nodes)?;
    let p = tree.p_root_back()?;
    let da = match pred {
        Some(pr) => {
            let r = &pr.state.report.renewal;
            let f = |x: f64| r.eval(x);
            let w = w_functionals(tree, m, 0.0, 0.0, Some(alpha), Some(&f), max_nodes)?;
            w.d_alpha.map(|x| x / r.c0.value)
        }
        None => None,
    };
    Ok((p, d, m, da))
}

pub fn local_time_check(law: &OffspringLaw, cfg: &LocalTimeConfig, pred: Option<&Predictions>) -> Result<LocalTimeTable> {
    let grid: Vec<u64> = cfg.n_grid.iter().copied().filter(|n| *n > 1).collect();
    let mut tree = surviving_tree(law, cfg.tree_seed)?;
    let (p, d, depth, da) = quenched_inputs(&mut tree, cfg.d_depth, cfg.max_nodes, cfg.alpha, pred)?;
    let sigma2 = law.step_law().variance();
    let predicted = 4.0 * d * p / sigma2;
    let n_max = grid.iter().copied().max().unwrap_or(0);
    let mut table = LocalTimeTable {
        p_hat: p,
        d_hat: d,
        d_depth: depth,
        d_alpha_hat: da,
        rows: vec![],
        drift: f64::NAN,
        flags: vec![],
    };
    if n_max == 0 || cfg.walks == 0 {
        return Ok(table);
    }
    let walks: Vec<(Vec<u64>, Option<String>)> = par::map_range(cfg.walks, |w| {
        let mut t = tree.clone();
        let mut wc = WalkConfig::new(WalkMode::Excursions(n_max), walk_seed(cfg.seed, w as u64));
        wc.max_steps = Some(cfg.max_steps);
        match run_walk(&mut t, &wc, &RestrictionParams::new(n_max as f64)) {
            Ok(rec) => (rec.return_times, None),
            Err(e) => (e.record.return_times, Some(format!("walk {w}: {}", e.error))),
        }
    });
    for (_, f) in &walks {
        table.flags.extend(f.clone());
    }
    for &n in &grid {
        let nf = n as f64;
        let vals: Vec<f64> = walks
            .iter()
            .filter_map(|(rt, _)| rt.get(n as usize - 1))
            .map(|t| *t as f64 / (nf * nf.ln()))
            .collect();
        let (med, q25, q75) = summary(&vals);
        table.rows.push(LocalTimeRow { n, walks: vals.len(), median: med, q25, q75, predicted, ratio: med / predicted });
    }
    if let (Some(a), Some(b)) = (table.rows.first(), table.rows.last()) {
        table.drift = b.ratio - a.ratio;
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// range

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeConfig {
    pub n_grid: Vec<u64>,
    pub replicas: usize,
    pub seed: u64,
    pub epsilons: Vec<f64>,
    /// Quenched R_{T_φ^n} rows only for n up to this value.
    pub excursion_n_max: u64,
    pub d_depth: u32,
    pub max_nodes: usize,
    pub max_steps: u64,
}

impl Default for RangeConfig {
    fn default() -> Self {
        RangeConfig {
            n_grid: vec![10_000, 100_000, 1_000_000],
            replicas: 64,
            seed: 3,
            epsilons: vec![0.5, 0.2, 0.1],
            excursion_n_max: 10_000,
            d_depth: 14,
            max_nodes: 1 << 16,
            max_steps: 100_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeRow {
    pub n: u64,
    pub replicas: usize,
    /// Median of (log n) R_n / n.
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub mean: f64,
    pub se: f64,
    /// σ²Λ̂/4.
    pub predicted: Option<f64>,
    pub ratio: Option<f64>,
    /// Median over trees of (R_{T_φ^n}/n) / (Λ̂ p̂ D̂).
    pub quenched_ratio: Option<f64>,
    pub max_range_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub n: u64,
    pub epsilon: f64,
    pub below: f64,
    pub inside: f64,
    pub above: f64,
    /// below + above, averaged over replicas.
    pub outside: f64,
    pub outside_se: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RangeTable {
    pub rows: Vec<RangeRow>,
    pub windows: Vec<WindowRow>,
    /// |ratio − 1| nonincreasing along the n-grid.
    pub drift_toward_one: Option<bool>,
    pub flags: Vec<String>,
}

struct RangeReplica {
    rec: Option<WalkRecord>,
    quenched: Option<f64>,
    flags: Vec<String>,
}

pub fn range_check(law: &OffspringLaw, cfg: &RangeConfig, pred: Option<&Predictions>) -> Result<RangeTable> {
    let mut table = RangeTable::default();
    for &n in &cfg.n_grid {
        if n < 3 {
            return domain("range_check needs n >= 3");
        }
        let nf = n as f64;
        let ln = nf.ln();
        let reps: Vec<Result<RangeReplica>> = par::map_range(cfg.replicas, |r| {
            let r = r as u64;
            let mut tree = surviving_tree(law, tree_seed(cfg.seed, r))?;
            let mut out = RangeReplica { rec: None, quenched: None, flags: vec![] };
            let mut wc = WalkConfig::new(WalkMode::FixedSteps(n), walk_seed(cfg.seed, r));
            wc.record_returns = false;
            wc.max_steps = Some(cfg.max_steps);
            match run_walk(&mut tree, &wc, &RestrictionParams::new(nf)) {
                Ok(rec) => out.rec = Some(rec),
                Err(p) => out.flags.push(format!("n={n} replica {r}: {}", p.error)),
            }
            if let (Some(p), true) = (pred, n <= cfg.excursion_n_max) {
                let mut wc = WalkConfig::new(WalkMode::Excursions(n), walk_seed(cfg.seed ^ 0x52, r));
                wc.record_returns = false;
                wc.max_steps = Some(cfg.max_steps);
                match run_walk(&mut tree, &wc, &RestrictionParams::new(nf)) {
                    Ok(rec) => {
                        let (_, d) = derivative_martingale(&mut tree, cfg.d_depth, cfg.max_nodes)?;
                        let target = p.big_lambda().value * tree.p_root_back()? * d;
                        out.quenched = Some(rec.range as f64 / nf / target);
                    }
                    Err(e) => out.flags.push(format!("n={n} replica {r} excursions: {}", e.error)),
                }
            }
            Ok(out)
        });
        let reps: Vec<RangeReplica> = reps.into_iter().collect::<Result<_>>()?;
        for r in &reps {
            table.flags.extend(r.flags.iter().cloned());
        }
        let recs: Vec<&WalkRecord> = reps.iter().filter_map(|r| r.rec.as_ref()).collect();
        let vals: Vec<f64> = recs.iter().map(|r| ln * r.range as f64 / nf).collect();
        let mut w = Welford::new();
        vals.iter().for_each(|v| w.push(*v));
        let (med, q25, q75) = summary(&vals);
        let predicted = pred.map(|p| p.sigma2() * p.big_lambda().value / 4.0);
        let qs: Vec<f64> = reps.iter().filter_map(|r| r.quenched).collect();
        table.rows.push(RangeRow {
            n,
            replicas: vals.len(),
            median: med,
            q25,
            q75,
            mean: w.mean,
            se: w.se(),
            predicted,
            ratio: predicted.map(|p| med / p),
            quenched_ratio: (!qs.is_empty()).then(|| median(&qs)),
            max_range_fraction: recs.iter().map(|r| r.range as f64 / nf).fold(0.0, f64::max),
        });
        for &eps in &cfg.epsilons {
            let (mut b, mut i, mut a) = (0.0, 0.0, 0.0);
            let mut out = Welford::new();
            for rec in &recs {
                let m = critical_window_mass(rec, eps, nf)?;
                let tot = rec.range.max(1) as f64;
                b += m.below as f64 / tot;
                i += m.inside as f64 / tot;
                a += m.above as f64 / tot;
                out.push((m.below + m.above) as f64 / tot);
            }
            let k = recs.len().max(1) as f64;
            table.windows.push(WindowRow {
                n,
                epsilon: eps,
                below: b / k,
                inside: i / k,
                above: a / k,
                outside: out.mean,
                outside_se: out.se(),
            });
        }
    }
    let ratios: Vec<f64> = table.rows.iter().filter_map(|r| r.ratio).collect();
    if ratios.len() == table.rows.len() && ratios.len() >= 2 {
        table.drift_toward_one = Some(ratios.windows(2).all(|w| (w[1] - 1.0).abs() <= (w[0] - 1.0).abs()));
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// environment profile

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub tree_seed: u64,
    pub n: u64,
    pub walks: usize,
    pub seed: u64,
    pub a0_grid: Vec<f64>,
    pub a1: f64,
    pub delta: f64,
    pub alpha: f64,
    pub quenched_max_nodes: usize,
    pub max_steps: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            tree_seed: 1,
            n: 100_000,
            walks: 8,
            seed: 4,
            a0_grid: vec![2.0, 4.0, 8.0, 16.0],
            a1: 4.0,
            delta: 0.5,
            alpha: 1.0,
            quenched_max_nodes: 1 << 18,
            max_steps: 200_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub a0: f64,
    pub walks: usize,
    /// Mean fraction of R_{T_φ^n} in A₁∩A₂∩A₃.
    pub fraction: f64,
    pub fraction_se: f64,
    /// Σ_ℓ Σ_{|z|=ℓ, z∈A} (1 − (1 − a_z)^n) over the enumerable generations.
    pub quenched_mean: f64,
    /// Same sum without restriction, for scale.
    pub quenched_mean_all: f64,
    pub quenched_generations: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationProfile {
    pub generation: u32,
    /// Mean number of first-visited sites per walk.
    pub visited: f64,
    pub mean_vbar: f64,
    pub mean_drawdown: f64,
    pub mean_v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentProfile {
    pub n: u64,
    pub rows: Vec<ProfileRow>,
    pub generations: Vec<GenerationProfile>,
    pub mean_range: f64,
    pub flags: Vec<String>,
}

fn in_a123(tree: &EnvTree, z: NodeId, p: &RestrictionParams) -> bool {
    tree.in_set(z, SetId::A1, p) && tree.in_set(z, SetId::A2, p) && tree.in_set(z, SetId::A3, p)
}

fn profile_params(cfg: &ProfileConfig, a0: f64) -> RestrictionParams {
    RestrictionParams { n: cfg.n as f64, alpha: cfg.alpha, delta: cfg.delta, a0, a1: cfg.a1, g_of_n: None }
}

pub fn environment_profile(law: &OffspringLaw, cfg: &ProfileConfig) -> Result<EnvironmentProfile> {
    let tree = surviving_tree(law, cfg.tree_seed)?;
    profile_on_tree(tree, cfg)
}

/// As [`environment_profile`] on a given tree (hand-built controls included).
pub fn profile_on_tree(mut tree: EnvTree, cfg: &ProfileConfig) -> Result<EnvironmentProfile> {
    if cfg.n < 3 {
        return domain("profile needs n >= 3");
    }
    let params: Vec<RestrictionParams> = cfg.a0_grid.iter().map(|a| profile_params(cfg, *a)).collect();
    for p in &params {
        p.validate()?;
    }
    tree.expand(ROOT)?;
    struct Out {
        range: u64,
        hits: Vec<u64>,
        gens: Vec<[f64; 4]>,
        flag: Option<String>,
    }
    let outs: Vec<Out> = par::map_range(cfg.walks, |w| {
        let mut t = tree.clone();
        let mut hits = vec![0u64; params.len()];
        let mut gens: Vec<[f64; 4]> = Vec::new();
        let mut wc = WalkConfig::new(WalkMode::Excursions(cfg.n), walk_seed(cfg.seed, w as u64));
        wc.record_returns = false;
        wc.max_steps = Some(cfg.max_steps);
        let res = run_walk_with(&mut t, &wc, &params[0], |tr, z, _| {
            for (k, p) in params.iter().enumerate() {
                if in_a123(tr, z, p) {
                    hits[k] += 1;
                }
            }
            let nd = tr.node(z);
            let l = nd.depth as usize;
            if gens.len() <= l {
                gens.resize(l + 1, [0.0; 4]);
            }
            let g = &mut gens[l];
            g[0] += 1.0;
            g[1] += nd.vbar;
            g[2] += nd.drawdown_max;
            g[3] += nd.v;
        });
        let (range, flag) = match res {
            Ok(r) => (r.range, None),
            Err(e) => (e.record.range, Some(format!("walk {w}: {}", e.error))),
        };
        Out { range, hits, gens, flag }
    });
    let mut prof = EnvironmentProfile { n: cfg.n, rows: vec![], generations: vec![], mean_range: 0.0, flags: vec![] };
    let ok: Vec<&Out> = outs.iter().filter(|o| o.flag.is_none()).collect();
    prof.flags.extend(outs.iter().filter_map(|o| o.flag.clone()));
    let k = ok.len().max(1) as f64;
    prof.mean_range = ok.iter().map(|o| o.range as f64).sum::<f64>() / k;

    // quenched sums over every generation that fits the node budget
    let nf = cfg.n as f64;
    let mut gens_done = 0;
    let mut qa = vec![0.0; params.len()];
    let mut q_all = 0.0;
    for l in 1..=64u32 {
        let g = match tree.enumerate_generation(l, cfg.quenched_max_nodes) {
            Ok(g) => g,
            Err(Error::Resource(_)) => break,
            Err(e) => return Err(e),
        };
        if g.is_empty() {
            gens_done = l;
            break;
        }
        for z in g {
            let a = az(&mut tree, z)?;
            let hit = -(nf * (-a).ln_1p()).exp_m1();
            q_all += hit;
            for (k, p) in params.iter().enumerate() {
                if in_a123(&tree, z, p) {
                    qa[k] += hit;
                }
            }
        }
        gens_done = l;
    }
    for (i, a0) in cfg.a0_grid.iter().enumerate() {
        let mut w = Welford::new();
        for o in &ok {
            w.push(o.hits[i] as f64 / o.range.max(1) as f64);
        }
        prof.rows.push(ProfileRow {
            a0: *a0,
            walks: ok.len(),
            fraction: w.mean,
            fraction_se: w.se(),
            quenched_mean: qa[i],
            quenched_mean_all: q_all,
            quenched_generations: gens_done,
        });
    }
    let depth = ok.iter().map(|o| o.gens.len()).max().unwrap_or(0);
    for l in 1..depth {
        let mut s = [0.0; 4];
        for o in &ok {
            if let Some(g) = o.gens.get(l) {
                for j in 0..4 {
                    s[j] += g[j];
                }
            }
        }
        if s[0] == 0.0 {
            continue;
        }
        prof.generations.push(GenerationProfile {
            generation: l as u32,
            visited: s[0] / k,
            mean_vbar: s[1] / s[0],
            mean_drawdown: s[2] / s[0],
            mean_v: s[3] / s[0],
        });
    }
    Ok(prof)
}

// ---------------------------------------------------------------------------
// W_m(F) convergence

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WmConfig {
    pub m_grid: Vec<u32>,
    pub a: f64,
    pub b: f64,
    pub beta_grid: Vec<f64>,
    pub trees: usize,
    pub seed: u64,
    pub max_nodes: usize,
    /// n-grid of the many-to-one mean check; empty disables it.
    pub mean_grid: Vec<u64>,
    pub mean_alpha: f64,
    pub mean_replicas: usize,
}

impl Default for WmConfig {
    fn default() -> Self {
        WmConfig {
            m_grid: vec![4, 6, 8, 10, 12, 14, 16, 18],
            a: 1.0,
            b: 1.0,
            beta_grid: vec![0.5, 1.0, 2.0, 4.0],
            trees: 16,
            seed: 5,
            max_nodes: 1 << 20,
            mean_grid: vec![64, 128, 256, 512, 1024],
            mean_alpha: 5.0,
            mean_replicas: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmRow {
    pub tree: usize,
    pub m: u32,
    /// √m W_m(F_{a√m,b√m}) / D_M; NaN when m exceeds the enumerated depth.
    pub value: f64,
    pub w_f: f64,
    pub d_top: f64,
    pub over_cap: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmSummaryRow {
    pub m: u32,
    pub trees: usize,
    pub median: f64,
    pub predicted: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FSumRow {
    pub tree: usize,
    pub beta: f64,
    pub depth: u32,
    /// Σ_{m≤M} W_m(F_{β,β})/√m divided by D_M.
    pub value: f64,
    pub predicted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmMeanRow {
    pub n: u64,
    /// √n E[W_n^{(α)}(F_{a√n,b√n})].
    pub value: f64,
    pub se: f64,
    pub predicted: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WmTable {
    pub rows: Vec<WmRow>,
    pub summary: Vec<WmSummaryRow>,
    pub fsum: Vec<FSumRow>,
    pub mean: Vec<WmMeanRow>,
    pub flags: Vec<String>,
}

struct TreeSums {
    depth: u32,
    d_top: f64,
    wf: Vec<f64>,
    fsum: Vec<f64>,
}

/// One pass over a fully expanded tree of depth `depth`.
fn tree_sums(tree: &EnvTree, depth: u32, cfg: &WmConfig) -> TreeSums {
    let mut wf = vec![0.0; cfg.m_grid.len()];
    let mut fsum = vec![0.0; cfg.beta_grid.len()];
    let mut d_top = 0.0;
    for id in 1..tree.len() {
        let nd = tree.node(id as NodeId);
        if nd.depth > depth {
            continue;
        }
        let inv = 1.0 / nd.prefix_exp;
        if nd.depth == depth {
            d_top += nd.v * (-nd.v).exp();
        }
        for (k, m) in cfg.m_grid.iter().enumerate() {
            if *m == nd.depth {
                let s = (*m as f64).sqrt();
                if nd.vbar >= cfg.b * s && nd.drawdown_max <= cfg.a * s {
                    wf[k] += s * inv;
                }
            }
        }
        for (k, beta) in cfg.beta_grid.iter().enumerate() {
            if nd.vbar >= *beta && nd.drawdown_max <= *beta {
                fsum[k] += inv;
            }
        }
    }
    TreeSums { depth, d_top, wf, fsum }
}

pub fn wm_convergence(law: &OffspringLaw, cfg: &WmConfig, pred: Option<&Predictions>) -> Result<WmTable> {
    let mut table = WmTable::default();
    if cfg.m_grid.iter().any(|m| *m == 0) {
        return domain("m-grid entries must be positive");
    }
    let target = cfg.m_grid.iter().copied().max().unwrap_or(0);
    let sums: Vec<Result<TreeSums>> = par::map_range(cfg.trees, |t| {
        let mut tree = surviving_tree(law, tree_seed(cfg.seed, t as u64))?;
        let mut depth = 0;
        for m in 1..=target {
            match tree.expand_to_depth(m, cfg.max_nodes) {
                Ok(_) => depth = m,
                Err(Error::Resource(_)) => break,
                Err(e) => return Err(e),
            }
        }
        Ok(tree_sums(&tree, depth, cfg))
    });
    let sums: Vec<TreeSums> = sums.into_iter().collect::<Result<_>>()?;
    let sc = pred.map(|p| p.scr_c(cfg.a, cfg.b).value);
    let lam = pred.map(|p| p.big_lambda().value);
    for (t, s) in sums.iter().enumerate() {
        if s.depth < target {
            table.flags.push(format!("tree {t}: enumeration stopped at depth {} (cap {})", s.depth, cfg.max_nodes));
        }
        for (k, m) in cfg.m_grid.iter().enumerate() {
            let over = *m > s.depth;
            table.rows.push(WmRow {
                tree: t,
                m: *m,
                value: if over { f64::NAN } else { s.wf[k] / s.d_top },
                w_f: s.wf[k] / (*m as f64).sqrt(),
                d_top: s.d_top,
                over_cap: over,
            });
        }
        for (k, beta) in cfg.beta_grid.iter().enumerate() {
            table.fsum.push(FSumRow { tree: t, beta: *beta, depth: s.depth, value: s.fsum[k] / s.d_top, predicted: lam });
        }
    }
    for m in &cfg.m_grid {
        let vals: Vec<f64> = table.rows.iter().filter(|r| r.m == *m && !r.over_cap).map(|r| r.value).collect();
        let med = if vals.is_empty() { f64::NAN } else { median(&vals) };
        table.summary.push(WmSummaryRow { m: *m, trees: vals.len(), median: med, predicted: sc, ratio: sc.map(|c| med / c) });
    }
    if cfg.mean_replicas > 0 {
        let step = law.step_law();
        for &n in &cfg.mean_grid {
            let e = wf_many_to_one(&step, n as usize, cfg.a, cfg.b, cfg.mean_alpha, cfg.mean_replicas, combine(cfg.seed, n));
            let p = pred.map(|p| p.bold_c_r(cfg.a, cfg.b, cfg.mean_alpha).value);
            table.mean.push(WmMeanRow { n, value: e.value, se: e.se, predicted: p, ratio: p.map(|x| e.value / x) });
        }
    }
    Ok(table)
}

/// Annealed mean of K̃_n(m)/(n p̂) = Σ_{|z|=m} 1/Σ_{φ<y≤z} e^{V(y)} over `trees`
/// trees, paired with the many-to-one estimate of the same functional.
pub fn annealed_vs_many_to_one(
    law: &OffspringLaw,
    m: u32,
    trees: usize,
    replicas: usize,
    seed: u64,
) -> Result<(Estimate, Estimate)> {
    if m == 0 {
        return domain("m must be positive");
    }
    let vals: Vec<Result<f64>> = par::map_range(trees, |t| {
        let mut tree = EnvTree::new(law.clone(), tree_seed(seed, t as u64));
        let g = tree.enumerate_generation(m, 1 << 24)?;
        let p = tree.p_root_back()?;
        let mut s = 0.0;
        for z in g {
            s += az(&mut tree, z)? / p;
        }
        Ok(s)
    });
    let mut w = Welford::new();
    for v in vals {
        w.push(v?);
    }
    let mto = many_to_one_mean(
        law,
        m as usize,
        |path: &[f64]| 1.0 / path.iter().map(|v| v.exp()).sum::<f64>(),
        replicas,
        combine(seed, purpose::CROSS),
    );
    Ok((w.estimate(), mto))
}
