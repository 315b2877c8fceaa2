//! The quenched walk on a realised environment.
//!
//! From a site z the walk moves to a child u with probability
//! e^{−V(u)} / (e^{−V(z)} + Σ_{children} e^{−V(v)}) and to the parent otherwise. The
//! root's parent is a virtual site ←φ that always steps back to φ. Sites are counted
//! when first visited at a time m ≥ 1; ←φ is never counted.

use crate::env_tree::{EnvTree, NodeId, RestrictionParams, SetId, ROOT};
use crate::error::{domain, Error, Result};
use crate::rng::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Position of the walker: a tree node or the virtual parent of the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pos {
    Back,
    At(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum WalkMode {
    /// n steps, counting steps spent at ←φ.
    FixedSteps(u64),
    /// Stop at the n-th return to φ.
    Excursions(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub mode: WalkMode,
    pub seed: u64,
    #[serde(default)]
    pub track_sets: Vec<SetId>,
    /// Compute the largest fully visited generation (bounded by 64).
    #[serde(default)]
    pub full_front: bool,
    #[serde(default = "yes")]
    pub record_returns: bool,
    /// Abort with a partial record after this many steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

fn yes() -> bool {
    true
}

impl WalkConfig {
    pub fn new(mode: WalkMode, seed: u64) -> Self {
        WalkConfig { mode, seed, track_sets: Vec::new(), full_front: false, record_returns: true, max_steps: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkRecord {
    pub mode: WalkMode,
    pub seed: u64,
    pub steps_taken: u64,
    pub return_times: Vec<u64>,
    pub returns: u64,
    /// Index ℓ holds the number of distinct generation-ℓ sites visited.
    pub first_visit_gen_counts: Vec<u64>,
    pub range: u64,
    pub max_depth: u32,
    pub full_front: Option<u32>,
    pub restricted_counts: BTreeMap<String, Vec<u64>>,
}

impl WalkRecord {
    fn empty(cfg: &WalkConfig) -> Self {
        WalkRecord {
            mode: cfg.mode,
            seed: cfg.seed,
            steps_taken: 0,
            return_times: Vec::new(),
            returns: 0,
            first_visit_gen_counts: Vec::new(),
            range: 0,
            max_depth: 0,
            full_front: None,
            restricted_counts: cfg
                .track_sets
                .iter()
                .map(|s| (s.name().to_string(), Vec::new()))
                .collect(),
        }
    }

    pub fn gen_count(&self, l: usize) -> u64 {
        self.first_visit_gen_counts.get(l).copied().unwrap_or(0)
    }

    pub fn restricted(&self, set: SetId, l: usize) -> u64 {
        self.restricted_counts
            .get(set.name())
            .and_then(|v| v.get(l))
            .copied()
            .unwrap_or(0)
    }
}

/// A walk interrupted by a resource error, with what was recorded so far.
#[derive(Debug)]
pub struct PartialWalk {
    pub record: WalkRecord,
    pub error: Error,
}

impl From<PartialWalk> for Error {
    fn from(p: PartialWalk) -> Self {
        p.error
    }
}

/// Transition probabilities out of `z` as (p_parent, [(child, p)]).
pub fn transition_probs(tree: &mut EnvTree, z: NodeId) -> Result<(f64, Vec<(NodeId, f64)>)> {
    let r = tree.expand(z)?;
    let w: Vec<(NodeId, f64)> = r.map(|c| (c, (-tree.node(c).displacement).exp())).collect();
    let total = 1.0 + w.iter().map(|x| x.1).sum::<f64>();
    Ok((1.0 / total, w.into_iter().map(|(c, x)| (c, x / total)).collect()))
}

/// One step of the quenched walk.
#[inline]
pub fn step(tree: &mut EnvTree, cur: Pos, rng: &mut Rng) -> Result<Pos> {
    let z = match cur {
        Pos::Back => return Ok(Pos::At(ROOT)),
        Pos::At(z) => z,
    };
    let r = tree.expand(z)?;
    // weights relative to the parent weight e^{−V(z)}
    let mut total = 1.0;
    for c in r.clone() {
        total += (-tree.node(c).displacement).exp();
    }
    let mut u = rng.random::<f64>() * total - 1.0;
    if u < 0.0 {
        return Ok(match tree.node(z).parent {
            Some(p) => Pos::At(p),
            None => Pos::Back,
        });
    }
    let last = r.end - 1;
    for c in r {
        u -= (-tree.node(c).displacement).exp();
        if u < 0.0 {
            return Ok(Pos::At(c));
        }
    }
    Ok(Pos::At(last))
}

fn bump(v: &mut Vec<u64>, l: usize) {
    if v.len() <= l {
        v.resize(l + 1, 0);
    }
    v[l] += 1;
}

pub fn run_walk(
    tree: &mut EnvTree,
    cfg: &WalkConfig,
    params: &RestrictionParams,
) -> std::result::Result<WalkRecord, PartialWalk> {
    run_walk_with(tree, cfg, params, |_, _, _| {})
}

/// Runs the walk and calls `on_first_visit(tree, node, time)` at each first visit.
pub fn run_walk_with<F>(
    tree: &mut EnvTree,
    cfg: &WalkConfig,
    params: &RestrictionParams,
    mut on_first_visit: F,
) -> std::result::Result<WalkRecord, PartialWalk>
where
    F: FnMut(&EnvTree, NodeId, u64),
{
    let mut rec = WalkRecord::empty(cfg);
    let mut rng = crate::rng::stream_rng(cfg.seed, crate::rng::purpose::WALK);
    tree.new_epoch();
    let (limit, by_returns) = match cfg.mode {
        WalkMode::FixedSteps(n) => (n, false),
        WalkMode::Excursions(n) => (n, true),
    };
    let mut pos = Pos::At(ROOT);
    let mut t: u64 = 0;
    let done = |t: u64, returns: u64| if by_returns { returns >= limit } else { t >= limit };
    let budget = cfg.max_steps.unwrap_or(u64::MAX);
    while !done(t, rec.returns) {
        if t >= budget {
            rec.steps_taken = t;
            return Err(PartialWalk {
                record: rec,
                error: Error::Resource(format!("step budget {budget} exhausted")),
            });
        }
        pos = match step(tree, pos, &mut rng) {
            Ok(p) => p,
            Err(error) => {
                rec.steps_taken = t;
                return Err(PartialWalk { record: rec, error });
            }
        };
        t += 1;
        if let Pos::At(z) = pos {
            if z == ROOT {
                rec.returns += 1;
                if cfg.record_returns {
                    rec.return_times.push(t);
                }
            }
            if tree.mark_visited(z) {
                let l = tree.node(z).depth as usize;
                bump(&mut rec.first_visit_gen_counts, l);
                rec.range += 1;
                rec.max_depth = rec.max_depth.max(l as u32);
                for s in &cfg.track_sets {
                    if tree.in_set(z, *s, params) {
                        bump(rec.restricted_counts.get_mut(s.name()).unwrap(), l);
                    }
                }
                on_first_visit(tree, z, t);
            }
        }
    }
    rec.steps_taken = t;
    if cfg.full_front {
        match full_front(tree) {
            Ok(m) => rec.full_front = Some(m),
            Err(error) => return Err(PartialWalk { record: rec, error }),
        }
    }
    Ok(rec)
}

/// Largest generation ℓ ≤ 64 whose sites were all visited in the current epoch
/// (the root counts as visited at time 0).
fn full_front(tree: &mut EnvTree) -> Result<u32> {
    let mut cur = vec![ROOT];
    let mut m = 0;
    for l in 1..=64u32 {
        let mut next = Vec::new();
        for &id in &cur {
            next.extend(tree.expand(id)?);
        }
        if next.is_empty() || !next.iter().all(|c| tree.is_visited(*c)) {
            break;
        }
        m = l;
        cur = next;
    }
    Ok(m)
}

/// Mass of the range below, inside and above the window [ε(log n)², (log n)²/ε].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMass {
    pub inside: u64,
    pub below: u64,
    pub above: u64,
}

pub fn critical_window_mass(record: &WalkRecord, epsilon: f64, n: f64) -> Result<WindowMass> {
    if !(epsilon > 0.0) {
        return domain("epsilon must be positive");
    }
    let l2 = n.ln().powi(2);
    let (lo, hi) = (epsilon * l2, l2 / epsilon);
    let mut m = WindowMass { inside: 0, below: 0, above: 0 };
    for (l, c) in record.first_visit_gen_counts.iter().enumerate() {
        let lf = l as f64;
        if lf < lo {
            m.below += c;
        } else if lf > hi {
            m.above += c;
        } else {
            m.inside += c;
        }
    }
    Ok(m)
}

/// Number of excursions, out of `n`, that hit `target` before returning to φ.
pub fn count_hitting_excursions(tree: &mut EnvTree, target: NodeId, n: u64, rng: &mut Rng) -> Result<u64> {
    let mut hits = 0;
    for _ in 0..n {
        let mut pos = step(tree, Pos::At(ROOT), rng)?;
        loop {
            match pos {
                Pos::At(z) if z == target => {
                    hits += 1;
                    break;
                }
                Pos::At(ROOT) => break,
                _ => pos = step(tree, pos, rng)?,
            }
        }
    }
    Ok(hits)
}

/// Occupation counts over `steps` steps from φ; the last slot counts ←φ.
pub fn occupation(tree: &mut EnvTree, steps: u64, rng: &mut Rng) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; tree.len() + 1];
    let mut pos = Pos::At(ROOT);
    for _ in 0..steps {
        pos = step(tree, pos, rng)?;
        if counts.len() < tree.len() + 1 {
            counts.resize(tree.len() + 1, 0);
        }
        match pos {
            Pos::At(z) => counts[z as usize] += 1,
            Pos::Back => *counts.last_mut().unwrap() += 1,
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::OffspringLaw;
    use crate::env_tree::Nested;
    use crate::rng::stream_rng;

    #[test]
    fn root_transition_probabilities() {
        let mut t = EnvTree::from_nested(&[Nested::leaf(1.0), Nested::leaf(2.0)]);
        let (pb, kids) = transition_probs(&mut t, ROOT).unwrap();
        assert!((pb - 0.665_240_955_774_821_2).abs() < 1e-9);
        assert!((kids[0].1 - 0.244_728_471_054_797_6).abs() < 1e-9);
        assert!((kids[1].1 - 0.090_030_573_170_380_5).abs() < 1e-9);
    }

    #[test]
    fn virtual_parent_and_leaves() {
        let mut t = EnvTree::chain(&[0.0]);
        let mut rng = stream_rng(1, 1);
        assert_eq!(step(&mut t, Pos::Back, &mut rng).unwrap(), Pos::At(ROOT));
        let z1 = t.children(ROOT).unwrap().start;
        for _ in 0..20 {
            assert_eq!(step(&mut t, Pos::At(z1), &mut rng).unwrap(), Pos::At(ROOT));
        }
    }

    #[test]
    fn zero_steps() {
        let mut t = EnvTree::new(OffspringLaw::reference(), 1);
        let r = run_walk(&mut t, &WalkConfig::new(WalkMode::FixedSteps(0), 1), &RestrictionParams::new(10.0))
            .unwrap();
        assert_eq!(r.range, 0);
        assert!(r.return_times.is_empty());
    }

    #[test]
    fn record_invariants() {
        let mut t = EnvTree::new(OffspringLaw::reference(), 8);
        let mut cfg = WalkConfig::new(WalkMode::Excursions(50), 3);
        cfg.track_sets = vec![SetId::B1];
        cfg.full_front = true;
        let r = run_walk(&mut t, &cfg, &RestrictionParams::new(100.0)).unwrap();
        assert_eq!(r.returns, 50);
        assert_eq!(r.return_times.len(), 50);
        assert_eq!(*r.return_times.last().unwrap(), r.steps_taken);
        assert!(r.return_times.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(r.range, r.first_visit_gen_counts.iter().sum::<u64>());
        for (l, c) in r.first_visit_gen_counts.iter().enumerate() {
            assert!(*c <= 1u64 << l);
            assert!(r.restricted(SetId::B1, l) <= *c);
        }
        assert!(r.full_front.unwrap() >= 1);
    }

    #[test]
    fn replay_is_identical() {
        let cfg = WalkConfig::new(WalkMode::FixedSteps(5000), 77);
        let p = RestrictionParams::new(5000.0);
        let a = run_walk(&mut EnvTree::new(OffspringLaw::reference(), 4), &cfg, &p).unwrap();
        let b = run_walk(&mut EnvTree::new(OffspringLaw::reference(), 4), &cfg, &p).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn window_mass_thresholds() {
        let mut cfg_rec = WalkRecord::empty(&WalkConfig::new(WalkMode::FixedSteps(1), 0));
        cfg_rec.first_visit_gen_counts = vec![0, 5];
        cfg_rec.range = 5;
        let m = critical_window_mass(&cfg_rec, 0.5, 10f64.exp()).unwrap();
        assert_eq!((m.below, m.inside, m.above), (5, 0, 0));
        let all = critical_window_mass(&cfg_rec, 1e-6, 10f64.exp()).unwrap();
        assert_eq!(all.inside, 5);
        assert!(critical_window_mass(&cfg_rec, 0.0, 10.0).is_err());
    }

    #[test]
    fn range_never_exceeds_steps() {
        let mut t = EnvTree::new(OffspringLaw::reference(), 12);
        let r = run_walk(&mut t, &WalkConfig::new(WalkMode::FixedSteps(20_000), 5), &RestrictionParams::new(2e4))
            .unwrap();
        assert!(r.range <= 20_000);
    }
}
