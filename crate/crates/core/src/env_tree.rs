//! Lazily expanded environment tree.
//!
//! Nodes live in an arena with integer handles; the children of a node occupy a
//! contiguous range. Children are drawn from a ChaCha8 stream addressed by the tree
//! seed and a hash of the node path, so expansion order never changes the tree.

use crate::env_model::OffspringLaw;
use crate::error::{domain, Error, Result};
use crate::rng::{combine, key_bytes, mix64, stream_rng_from_key};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub type NodeId = u32;
pub const ROOT: NodeId = 0;
const NONE: u32 = u32::MAX;
pub const DEFAULT_NODE_CAP: usize = 1 << 28;
const ROOT_KEY: u64 = 0x5eed_0f_7233;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvNode {
    pub parent: Option<NodeId>,
    pub depth: u32,
    /// Position among the parent's children.
    pub child_index: u32,
    pub key: u64,
    /// A(z).
    pub displacement: f64,
    /// V(z) = Σ_{φ<y≤z} A(y).
    pub v: f64,
    /// V̄(z) = max_{φ<y≤z} V(y); −∞ at the root.
    pub vbar: f64,
    /// V̲(z) = min_{φ<y≤z} V(y); +∞ at the root.
    pub vmin: f64,
    /// max_{φ<y≤z} (V̄(y) − V(y)).
    pub drawdown_max: f64,
    /// Σ_{φ<y≤z} e^{V(y)}.
    pub prefix_exp: f64,
    /// max_{φ<y≤z} prefix_exp(y) e^{−V(y)}.
    pub conductance_max: f64,
    first_child: u32,
    n_children: u32,
    visit_epoch: u32,
}

impl EnvNode {
    fn root() -> Self {
        EnvNode {
            parent: None,
            depth: 0,
            child_index: 0,
            key: ROOT_KEY,
            displacement: 0.0,
            v: 0.0,
            vbar: f64::NEG_INFINITY,
            vmin: f64::INFINITY,
            drawdown_max: 0.0,
            prefix_exp: 0.0,
            conductance_max: 0.0,
            first_child: 0,
            n_children: NONE,
            visit_epoch: 0,
        }
    }

    fn child(parent_id: NodeId, p: &EnvNode, index: u32, a: f64) -> Self {
        let v = p.v + a;
        let vbar = p.vbar.max(v);
        let prefix_exp = p.prefix_exp + v.exp();
        EnvNode {
            parent: Some(parent_id),
            depth: p.depth + 1,
            child_index: index,
            key: combine(p.key, index as u64),
            displacement: a,
            v,
            vbar,
            vmin: p.vmin.min(v),
            drawdown_max: p.drawdown_max.max(vbar - v),
            prefix_exp,
            conductance_max: p.conductance_max.max(prefix_exp * (-v).exp()),
            first_child: 0,
            n_children: NONE,
            visit_epoch: 0,
        }
    }

    pub fn is_expanded(&self) -> bool {
        self.n_children != NONE
    }
}

/// Explicit subtree description for hand-built environments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nested {
    pub a: f64,
    #[serde(default)]
    pub children: Vec<Nested>,
}

impl Nested {
    pub fn leaf(a: f64) -> Self {
        Nested { a, children: Vec::new() }
    }
}

#[derive(Clone, Debug)]
enum Source {
    Law { law: OffspringLaw, depth_cap: Option<u32> },
    Explicit,
}

#[derive(Clone, Debug)]
pub struct EnvTree {
    nodes: Vec<EnvNode>,
    source: Source,
    seed: u64,
    key: [u8; 32],
    cap: usize,
    epoch: u32,
    buf: Vec<f64>,
}

impl EnvTree {
    pub fn new(law: OffspringLaw, seed: u64) -> Self {
        Self::build(Source::Law { law, depth_cap: None }, seed)
    }

    /// Tree whose nodes at depth `depth` have no children: leaves reflect the walk.
    pub fn frozen(law: OffspringLaw, seed: u64, depth: u32) -> Self {
        Self::build(Source::Law { law, depth_cap: Some(depth) }, seed)
    }

    fn build(source: Source, seed: u64) -> Self {
        EnvTree {
            nodes: vec![EnvNode::root()],
            source,
            seed,
            key: key_bytes(seed),
            cap: DEFAULT_NODE_CAP,
            epoch: 1,
            buf: Vec::new(),
        }
    }

    /// Conditions on survival to `depth` by trying seeds `(seed, attempt)`.
    pub fn new_surviving(law: OffspringLaw, seed: u64, depth: u32, max_attempts: u32) -> Result<Self> {
        for attempt in 0..max_attempts {
            let s = if attempt == 0 { seed } else { combine(seed, attempt as u64) };
            let mut t = EnvTree::new(law.clone(), s);
            if t.survives_to(depth)? {
                return Ok(t);
            }
        }
        Err(Error::Resource(format!("no surviving tree to depth {depth} in {max_attempts} attempts")))
    }

    /// Builds a fully explicit tree below the root.
    pub fn from_nested(root_children: &[Nested]) -> Self {
        let mut t = Self::build(Source::Explicit, 0);
        let mut queue: std::collections::VecDeque<(NodeId, &[Nested])> = Default::default();
        queue.push_back((ROOT, root_children));
        while let Some((id, kids)) = queue.pop_front() {
            let first = t.nodes.len() as u32;
            for (i, k) in kids.iter().enumerate() {
                let c = EnvNode::child(id, &t.nodes[id as usize], i as u32, k.a);
                t.nodes.push(c);
            }
            t.nodes[id as usize].first_child = first;
            t.nodes[id as usize].n_children = kids.len() as u32;
            for (i, k) in kids.iter().enumerate() {
                queue.push_back((first + i as u32, &k.children));
            }
        }
        t
    }

    /// Single ray φ → z₁ → … with the given potentials V(z₁), V(z₂), ….
    pub fn chain(potentials: &[f64]) -> Self {
        let mut nested: Option<Nested> = None;
        for i in (0..potentials.len()).rev() {
            let prev = if i == 0 { 0.0 } else { potentials[i - 1] };
            let mut n = Nested::leaf(potentials[i] - prev);
            if let Some(c) = nested.take() {
                n.children.push(c);
            }
            nested = Some(n);
        }
        Self::from_nested(&nested.into_iter().collect::<Vec<_>>())
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap.min(NONE as usize - 1);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn law(&self) -> Option<&OffspringLaw> {
        match &self.source {
            Source::Law { law, .. } => Some(law),
            Source::Explicit => None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn node(&self, id: NodeId) -> &EnvNode {
        &self.nodes[id as usize]
    }

    /// Children of an already expanded node, `None` otherwise.
    #[inline]
    pub fn children(&self, id: NodeId) -> Option<std::ops::Range<NodeId>> {
        let n = &self.nodes[id as usize];
        if n.n_children == NONE {
            None
        } else {
            Some(n.first_child..n.first_child + n.n_children)
        }
    }

    /// Realises the children of `id` (idempotent) and returns their handle range.
    pub fn expand(&mut self, id: NodeId) -> Result<std::ops::Range<NodeId>> {
        if let Some(r) = self.children(id) {
            return Ok(r);
        }
        let (law, cap) = match &self.source {
            Source::Law { law, depth_cap } => (law, *depth_cap),
            Source::Explicit => {
                self.nodes[id as usize].n_children = 0;
                return Ok(0..0);
            }
        };
        let parent = &self.nodes[id as usize];
        self.buf.clear();
        if cap.is_none_or(|c| parent.depth < c) {
            let mut rng = stream_rng_from_key(&self.key, parent.key);
            law.sample_offspring_into(&mut rng, &mut self.buf);
        }
        if self.nodes.len() + self.buf.len() > self.cap {
            return Err(Error::Resource(format!(
                "node arena cap {} exceeded at depth {}",
                self.cap, parent.depth
            )));
        }
        let first = self.nodes.len() as u32;
        let parent = parent.clone();
        for (i, a) in self.buf.iter().enumerate() {
            self.nodes.push(EnvNode::child(id, &parent, i as u32, *a));
        }
        let p = &mut self.nodes[id as usize];
        p.first_child = first;
        p.n_children = self.buf.len() as u32;
        Ok(first..first + p.n_children)
    }

    pub fn expand_children(&mut self, id: NodeId) -> Result<Vec<NodeId>> {
        Ok(self.expand(id)?.collect())
    }

    /// All nodes of generation `m` in lexicographic child-index order.
    pub fn enumerate_generation(&mut self, m: u32, max_nodes: usize) -> Result<Vec<NodeId>> {
        let mut cur = vec![ROOT];
        for depth in 0..m {
            let mut next = Vec::with_capacity(cur.len() * 2);
            for &id in &cur {
                next.extend(self.expand(id)?);
                if next.len() > max_nodes {
                    return Err(Error::Resource(format!(
                        "generation budget {max_nodes} exceeded while enumerating depth {}",
                        depth + 1
                    )));
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Expands every node up to depth `depth`; returns the total node count.
    pub fn expand_to_depth(&mut self, depth: u32, max_nodes: usize) -> Result<usize> {
        let mut cur = vec![ROOT];
        let mut total = 1;
        for _ in 0..depth {
            let mut next = Vec::new();
            for &id in &cur {
                next.extend(self.expand(id)?);
            }
            total += next.len();
            if total > max_nodes {
                return Err(Error::Resource(format!("tree exceeds {max_nodes} nodes")));
            }
            cur = next;
        }
        Ok(total)
    }

    /// Expands every reachable node; fails if the tree has more than `max_nodes`.
    pub fn expand_all(&mut self, max_nodes: usize) -> Result<usize> {
        let mut i = 0;
        while i < self.nodes.len() {
            self.expand(i as NodeId)?;
            if self.nodes.len() > max_nodes {
                return Err(Error::Resource(format!("tree exceeds {max_nodes} nodes")));
            }
            i += 1;
        }
        Ok(self.nodes.len())
    }

    pub fn survives_to(&mut self, depth: u32) -> Result<bool> {
        let mut stack = vec![ROOT];
        while let Some(id) = stack.pop() {
            if self.nodes[id as usize].depth >= depth {
                return Ok(true);
            }
            let r = self.expand(id)?;
            stack.extend(r.rev());
        }
        Ok(false)
    }

    /// Child indices from the root to `id`.
    pub fn path(&self, id: NodeId) -> Vec<u32> {
        let mut p = Vec::new();
        let mut cur = id;
        while let Some(par) = self.nodes[cur as usize].parent {
            p.push(self.nodes[cur as usize].child_index);
            cur = par;
        }
        p.reverse();
        p
    }

    /// Ancestor of `id` at the given depth (≤ depth of `id`).
    pub fn ancestor_at(&self, id: NodeId, depth: u32) -> NodeId {
        let mut cur = id;
        while self.nodes[cur as usize].depth > depth {
            cur = self.nodes[cur as usize].parent.expect("non-root has a parent");
        }
        cur
    }

    /// Latest common ancestor.
    pub fn lca(&self, a: NodeId, b: NodeId) -> NodeId {
        let (mut x, mut y) = (a, b);
        let dx = self.nodes[x as usize].depth;
        let dy = self.nodes[y as usize].depth;
        if dx > dy {
            x = self.ancestor_at(x, dy);
        } else {
            y = self.ancestor_at(y, dx);
        }
        while x != y {
            x = self.nodes[x as usize].parent.unwrap();
            y = self.nodes[y as usize].parent.unwrap();
        }
        x
    }

    /// p(φ, ←φ) = 1 / (1 + Σ_{children} e^{−V}); the root must be expanded.
    pub fn p_root_back(&mut self) -> Result<f64> {
        let r = self.expand(ROOT)?;
        let s: f64 = r.map(|c| (-self.nodes[c as usize].v).exp()).sum();
        Ok(1.0 / (1.0 + s))
    }

    pub fn new_epoch(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            for n in &mut self.nodes {
                n.visit_epoch = 0;
            }
            self.epoch = 1;
        }
    }

    #[inline]
    pub fn is_visited(&self, id: NodeId) -> bool {
        self.nodes[id as usize].visit_epoch == self.epoch
    }

    /// Marks `id` visited; returns true on the first visit in the current epoch.
    #[inline]
    pub fn mark_visited(&mut self, id: NodeId) -> bool {
        let n = &mut self.nodes[id as usize];
        if n.visit_epoch == self.epoch {
            false
        } else {
            n.visit_epoch = self.epoch;
            true
        }
    }

    /// One line per realised node: path, displacement, V.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut order: Vec<NodeId> = (0..self.nodes.len() as u32).collect();
        order.sort_by_key(|id| self.path(*id));
        for id in order {
            let p = self.path(id);
            let ps = if p.is_empty() {
                "root".to_string()
            } else {
                p.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(".")
            };
            let n = &self.nodes[id as usize];
            let _ = writeln!(out, "{ps}\t{:.17e}\t{:.17e}", n.displacement, n.v);
        }
        out
    }

    pub fn in_set(&self, id: NodeId, set: SetId, p: &RestrictionParams) -> bool {
        let n = self.node(id);
        let ln = p.log_n();
        let lln = p.log_log_n();
        match set {
            SetId::All => true,
            SetId::U => n.vbar >= ln + lln,
            SetId::LDelta => n.drawdown_max <= ln - (1.0 + p.delta) * lln,
            SetId::B1 => n.vmin >= -p.alpha,
            SetId::B2 => n.conductance_max <= p.n,
            SetId::B2Delta => n.conductance_max <= p.s_n(),
            SetId::A1 => {
                n.drawdown_max >= ln / p.a0 && n.drawdown_max <= ln + p.g()
            }
            SetId::A2 => n.vbar >= ln + lln && n.vbar <= p.a1 * ln * lln.max(0.0).sqrt(),
            SetId::A3 => {
                if n.depth == 0 {
                    return false;
                }
                let d = n.depth as f64;
                let cutoff = (d - d.cbrt()).floor().max(0.0) as u32;
                let anc = self.ancestor_at(id, cutoff);
                // max over ancestors y with |y| ≤ cutoff, root included (V(φ) = 0)
                let m = self.node(anc).vbar.max(0.0);
                n.vbar > m
            }
        }
    }

    /// Mixed hash of the realised structure, for determinism checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = mix64(self.seed);
        for n in &self.nodes {
            h = combine(h, n.key ^ n.v.to_bits());
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SetId {
    #[serde(rename = "all")]
    All,
    U,
    #[serde(rename = "L_delta")]
    LDelta,
    B1,
    B2,
    #[serde(rename = "B2_delta")]
    B2Delta,
    A1,
    A2,
    A3,
}

impl SetId {
    pub const ALL: [SetId; 9] = [
        SetId::All,
        SetId::U,
        SetId::LDelta,
        SetId::B1,
        SetId::B2,
        SetId::B2Delta,
        SetId::A1,
        SetId::A2,
        SetId::A3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SetId::All => "all",
            SetId::U => "U",
            SetId::LDelta => "L_delta",
            SetId::B1 => "B1",
            SetId::B2 => "B2",
            SetId::B2Delta => "B2_delta",
            SetId::A1 => "A1",
            SetId::A2 => "A2",
            SetId::A3 => "A3",
        }
    }
}

impl std::str::FromStr for SetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SetId::ALL
            .iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::Domain(format!("unknown set id {s}")))
    }
}

/// Parameters of the restriction sets. `n` is real so that e.g. n = e^e is admissible.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictionParams {
    pub n: f64,
    pub alpha: f64,
    pub delta: f64,
    pub a0: f64,
    pub a1: f64,
    /// g(n); defaults to 2 log log n.
    pub g_of_n: Option<f64>,
}

impl RestrictionParams {
    pub fn new(n: f64) -> Self {
        RestrictionParams { n, alpha: 1.0, delta: 0.5, a0: 4.0, a1: 4.0, g_of_n: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n > 1.0) {
            return domain("n must exceed 1");
        }
        if self.alpha < 0.0 || !(self.delta > 0.0) || !(self.a0 > 1.0) || !(self.a1 > 0.0) {
            return domain("need alpha >= 0, delta > 0, a0 > 1, a1 > 0");
        }
        Ok(())
    }

    pub fn log_n(&self) -> f64 {
        self.n.ln()
    }

    pub fn log_log_n(&self) -> f64 {
        self.n.ln().ln()
    }

    pub fn g(&self) -> f64 {
        self.g_of_n.unwrap_or(2.0 * self.log_log_n())
    }

    /// s_n = n (log n)^{−1−δ}.
    pub fn s_n(&self) -> f64 {
        self.n * self.log_n().powf(-1.0 - self.delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_tree(seed: u64) -> EnvTree {
        EnvTree::new(OffspringLaw::reference(), seed)
    }

    #[test]
    fn expansion_is_idempotent_and_binary() {
        let mut t = reference_tree(3);
        let a = t.expand_children(ROOT).unwrap();
        let va: Vec<f64> = a.iter().map(|c| t.node(*c).v).collect();
        let b = t.expand_children(ROOT).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        let vb: Vec<f64> = b.iter().map(|c| t.node(*c).v).collect();
        assert_eq!(va, vb);
    }

    #[test]
    fn expansion_order_does_not_matter() {
        let mut t1 = reference_tree(9);
        let mut t2 = reference_tree(9);
        t1.enumerate_generation(6, 1 << 10).unwrap();
        // expand t2 depth-first, right to left
        let mut stack = vec![ROOT];
        while let Some(id) = stack.pop() {
            if t2.node(id).depth < 6 {
                stack.extend(t2.expand(id).unwrap());
            }
        }
        let g1 = t1.enumerate_generation(6, 1 << 10).unwrap();
        let g2 = t2.enumerate_generation(6, 1 << 10).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(t1.path(*a), t2.path(*b));
            assert_eq!(t1.node(*a).v, t2.node(*b).v);
            assert_eq!(t1.node(*a).conductance_max, t2.node(*b).conductance_max);
        }
    }

    #[test]
    fn generation_sizes() {
        let mut t = reference_tree(1);
        assert_eq!(t.enumerate_generation(0, 10).unwrap(), vec![ROOT]);
        assert_eq!(t.enumerate_generation(10, 1 << 11).unwrap().len(), 1024);
        assert!(t.enumerate_generation(12, 100).is_err());
    }

    #[test]
    fn chain_b2_hand_evaluation() {
        let t = EnvTree::chain(&[1.0, 2.0]);
        let z2 = t.children(t.children(ROOT).unwrap().start).unwrap().start;
        let expected = (1f64.exp() + 2f64.exp()) * (-2f64).exp();
        assert!((t.node(z2).conductance_max - expected).abs() < 1e-12);
        assert!(t.in_set(z2, SetId::B2, &RestrictionParams::new(3.0)));
    }

    #[test]
    fn simple_set_examples() {
        let t = EnvTree::chain(&[0.0]);
        let z1 = t.children(ROOT).unwrap().start;
        let p = RestrictionParams::new(std::f64::consts::E.exp());
        assert!(!t.in_set(z1, SetId::U, &p));
        let mut q = RestrictionParams::new(10.0);
        q.alpha = 1.0;
        assert!(t.in_set(z1, SetId::B1, &q));
    }

    #[test]
    fn arena_cap_is_a_resource_error() {
        let mut t = reference_tree(2).with_cap(50);
        assert!(matches!(t.enumerate_generation(8, 1 << 20), Err(Error::Resource(_))));
    }

    #[test]
    fn frozen_tree_has_leaves() {
        let mut t = EnvTree::frozen(OffspringLaw::reference(), 5, 3);
        let g = t.enumerate_generation(3, 100).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(t.expand(g[0]).unwrap().len(), 0);
    }

    #[test]
    fn dump_has_one_line_per_node() {
        let mut t = reference_tree(4);
        t.enumerate_generation(3, 100).unwrap();
        let d = t.dump();
        assert_eq!(d.lines().count(), t.len());
        assert!(d.starts_with("root\t"));
    }
}
