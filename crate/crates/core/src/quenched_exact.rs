//! Closed-form and linear-solve quenched quantities on a fixed environment.
//!
//! a_z = P_φ(T_z < T_φ) = p(φ, ←φ) / Σ_{φ<y≤z} e^{V(y)}. The oracle below solves the
//! harmonic system on a finite tree by a leaf-to-root sweep and is used to check
//! every closed form in this module.

use crate::env_tree::{EnvTree, NodeId, RestrictionParams, SetId, ROOT};
use crate::error::{domain, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const ORACLE_MAX_NODES: usize = 10_000;

pub fn az(tree: &mut EnvTree, node: NodeId) -> Result<f64> {
    if node == ROOT {
        return domain("a_z is undefined at the root");
    }
    let p = tree.p_root_back()?;
    Ok(p / tree.node(node).prefix_exp)
}

/// P(T_v ∧ T_z < T_φ) for one excursion, from the series/parallel reduction at the
/// latest common ancestor w: the walk must reach w, after which only the three
/// branches towards φ, v and z matter.
pub fn a_pair(tree: &mut EnvTree, v: NodeId, z: NodeId) -> Result<f64> {
    if v == z {
        return az(tree, v);
    }
    let w = tree.lca(v, z);
    if w == v {
        return az(tree, v);
    }
    if w == z {
        return az(tree, z);
    }
    if w == ROOT {
        return Ok(az(tree, v)? + az(tree, z)?);
    }
    let pw = tree.node(w).prefix_exp;
    let gv = 1.0 / (tree.node(v).prefix_exp - pw);
    let gz = 1.0 / (tree.node(z).prefix_exp - pw);
    Ok(az(tree, w)? * (gv + gz) / (1.0 / pw + gv + gz))
}

/// P_w(T_v < T_φ) for an ancestor w of v (Σ₁/(Σ₁+Σ₃) in prefix-sum form).
pub fn hit_from_ancestor(tree: &EnvTree, w: NodeId, v: NodeId) -> f64 {
    tree.node(w).prefix_exp / tree.node(v).prefix_exp
}

#[derive(Clone, Debug)]
pub struct HittingSolution {
    /// P_φ(T_targets < T_φ) for one excursion.
    pub from_root: f64,
    /// h[x] = P_x(T_targets < T_φ); h[φ] holds `from_root`.
    pub h: Vec<f64>,
}

/// Solves the harmonic system h = P h with h = 1 on the targets and h(φ) = 0 by
/// eliminating from the leaves up. The tree is expanded completely first.
pub fn hitting_oracle(tree: &mut EnvTree, targets: &[NodeId]) -> Result<HittingSolution> {
    if targets.contains(&ROOT) {
        return domain("the root cannot be a target");
    }
    let n = tree.expand_all(ORACLE_MAX_NODES)?;
    let mut is_target = vec![false; n];
    for t in targets {
        is_target[*t as usize] = true;
    }
    // h(x) = alpha[x] + beta[x] h(parent(x))
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    // parents have smaller handles than their children
    for x in (1..n).rev() {
        if is_target[x] {
            alpha[x] = 1.0;
            continue;
        }
        let kids = tree.children(x as NodeId).unwrap();
        let mut total = 1.0;
        for c in kids.clone() {
            total += (-tree.node(c).displacement).exp();
        }
        let (mut sa, mut sb) = (0.0, 0.0);
        for c in kids {
            let p = (-tree.node(c).displacement).exp() / total;
            sa += p * alpha[c as usize];
            sb += p * beta[c as usize];
        }
        let denom = 1.0 - sb;
        if !(denom > 0.0) {
            return Err(Error::Internal("singular elimination step".into()));
        }
        alpha[x] = sa / denom;
        beta[x] = (1.0 / total) / denom;
    }
    let kids = tree.children(ROOT).unwrap();
    let mut total = 1.0;
    for c in kids.clone() {
        total += (-tree.node(c).v).exp();
    }
    let from_root: f64 = kids.map(|c| (-tree.node(c).v).exp() / total * alpha[c as usize]).sum();
    let mut h = vec![0.0; n];
    h[0] = from_root;
    for x in 1..n {
        let par = tree.node(x as NodeId).parent.unwrap();
        let hp = if par == ROOT { 0.0 } else { h[par as usize] };
        h[x] = alpha[x] + beta[x] * hp;
    }
    Ok(HittingSolution { from_root, h })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchedMean {
    /// Σ (1 − (1 − a_z)^n) over the restricted generation.
    pub k_mean: f64,
    /// n Σ a_z over the restricted generation.
    pub k_tilde: f64,
}

/// (1 − a)^n computed through log1p.
#[inline]
fn pow_comp(a: f64, n: f64) -> f64 {
    (n * (-a).ln_1p()).exp()
}

fn members(
    tree: &mut EnvTree,
    l: u32,
    set: SetId,
    params: &RestrictionParams,
    max_nodes: usize,
) -> Result<Vec<NodeId>> {
    let g = tree.enumerate_generation(l, max_nodes)?;
    Ok(g.into_iter().filter(|z| *z != ROOT && tree.in_set(*z, set, params)).collect())
}

pub fn quenched_mean(
    tree: &mut EnvTree,
    l: u32,
    n: f64,
    set: SetId,
    params: &RestrictionParams,
    max_nodes: usize,
) -> Result<QuenchedMean> {
    let zs = members(tree, l, set, params, max_nodes)?;
    let mut q = QuenchedMean { k_mean: 0.0, k_tilde: 0.0 };
    for z in zs {
        let a = az(tree, z)?;
        q.k_mean += -(n * (-a).ln_1p()).exp_m1();
        q.k_tilde += n * a;
    }
    Ok(q)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchedVariance {
    pub variance: f64,
    pub upper_bound: f64,
    pub mean: QuenchedMean,
}

/// Exact quenched variance of K_n^A(ℓ) and its simple upper bound.
pub fn quenched_variance(
    tree: &mut EnvTree,
    l: u32,
    n: f64,
    set: SetId,
    params: &RestrictionParams,
    max_nodes: usize,
) -> Result<QuenchedVariance> {
    let zs = members(tree, l, set, params, max_nodes)?;
    let mean = quenched_mean(tree, l, n, set, params, max_nodes)?;
    let a: Vec<f64> = zs.iter().map(|z| az(tree, *z)).collect::<Result<_>>()?;
    let qn: Vec<f64> = a.iter().map(|x| pow_comp(*x, n)).collect();
    let mut var = 0.0;
    let mut bound = 0.0;
    for i in 0..zs.len() {
        var += qn[i] - qn[i] * qn[i];
        bound += n * a[i];
    }
    for i in 0..zs.len() {
        for j in (i + 1)..zs.len() {
            let (z, v) = (zs[i], zs[j]);
            let avz = a_pair(tree, v, z)?;
            var += 2.0 * (pow_comp(avz, n) - qn[i] * qn[j]);
            let w = tree.lca(z, v);
            let pv = hit_from_ancestor(tree, w, v);
            let pz = hit_from_ancestor(tree, w, z);
            bound += 2.0 * n * (a[i] * pv + a[j] * pz);
        }
    }
    if var > bound * (1.0 + 1e-12) + 1e-15 {
        return Err(Error::Internal(format!("variance {var} exceeds its bound {bound}")));
    }
    Ok(QuenchedVariance { variance: var.max(0.0), upper_bound: bound, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WFunctionals {
    pub w: f64,
    pub d: f64,
    /// W_m(F_{a,b}).
    pub w_f: f64,
    /// W_m^{(α)}(F_{a,b}), W_m^{(α)} and D_m^{(α)} when α is given.
    pub w_f_restricted: Option<f64>,
    pub w_alpha: Option<f64>,
    pub d_alpha: Option<f64>,
}

/// Generation-m sums; `renewal` supplies R for D^{(α)}.
pub fn w_functionals(
    tree: &mut EnvTree,
    m: u32,
    a: f64,
    b: f64,
    alpha: Option<f64>,
    renewal: Option<&dyn Fn(f64) -> f64>,
    max_nodes: usize,
) -> Result<WFunctionals> {
    let g = tree.enumerate_generation(m, max_nodes)?;
    let sm = (m as f64).sqrt();
    let mut out = WFunctionals {
        w: 0.0,
        d: 0.0,
        w_f: 0.0,
        w_f_restricted: alpha.map(|_| 0.0),
        w_alpha: alpha.map(|_| 0.0),
        d_alpha: alpha.and(renewal).map(|_| 0.0),
    };
    for z in g {
        let nd = tree.node(z);
        let e = (-nd.v).exp();
        out.w += e;
        out.d += nd.v * e;
        if m == 0 {
            continue;
        }
        let f = if nd.vbar >= b && nd.drawdown_max <= a { sm / nd.prefix_exp } else { 0.0 };
        out.w_f += f;
        if let Some(al) = alpha {
            if nd.vmin >= -al {
                *out.w_f_restricted.as_mut().unwrap() += f;
                *out.w_alpha.as_mut().unwrap() += e;
                if let (Some(r), Some(d)) = (renewal, out.d_alpha.as_mut()) {
                    *d += r(al + nd.v) * e;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuenchedSummary {
    pub generation: u32,
    pub n: f64,
    pub set: SetId,
    /// a_z keyed by dotted child-index path.
    pub a_z: BTreeMap<String, f64>,
    pub k_mean: f64,
    pub k_tilde: f64,
    pub variance: Option<f64>,
    pub variance_bound: Option<f64>,
    pub w_m: f64,
    pub d_m: f64,
    pub w_m_f: f64,
}

/// Everything above for one (ℓ, n, set); the variance only when the generation is
/// small enough for pairwise enumeration.
#[allow(clippy::too_many_arguments)]
pub fn summarize(
    tree: &mut EnvTree,
    l: u32,
    n: f64,
    set: SetId,
    params: &RestrictionParams,
    a: f64,
    b: f64,
    max_nodes: usize,
) -> Result<QuenchedSummary> {
    let zs = members(tree, l, set, params, max_nodes)?;
    let mut map = BTreeMap::new();
    for z in &zs {
        let key = tree.path(*z).iter().map(|i| i.to_string()).collect::<Vec<_>>().join(".");
        map.insert(key, az(tree, *z)?);
    }
    let mean = quenched_mean(tree, l, n, set, params, max_nodes)?;
    let var = if zs.len() <= 1 << 10 {
        Some(quenched_variance(tree, l, n, set, params, max_nodes)?)
    } else {
        None
    };
    let wf = w_functionals(tree, l, a, b, None, None, max_nodes)?;
    Ok(QuenchedSummary {
        generation: l,
        n,
        set,
        a_z: map,
        k_mean: mean.k_mean,
        k_tilde: mean.k_tilde,
        variance: var.map(|v| v.variance),
        variance_bound: var.map(|v| v.upper_bound),
        w_m: wf.w,
        d_m: wf.d,
        w_m_f: wf.w_f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::OffspringLaw;
    use crate::env_tree::Nested;

    #[test]
    fn chain_examples() {
        let mut t = EnvTree::chain(&[0.0]);
        let z1 = t.children(ROOT).unwrap().start;
        assert!((az(&mut t, z1).unwrap() - 0.5).abs() < 1e-15);
        let mut t = EnvTree::chain(&[0.0, 0.0]);
        let z1 = t.children(ROOT).unwrap().start;
        let z2 = t.children(z1).unwrap().start;
        assert!((az(&mut t, z2).unwrap() - 0.25).abs() < 1e-15);
        let o = hitting_oracle(&mut t, &[z2]).unwrap();
        assert!((o.from_root - 0.25).abs() < 1e-15);
        assert!(az(&mut t, ROOT).is_err());
    }

    #[test]
    fn siblings_pair_probability() {
        let mut t = EnvTree::from_nested(&[Nested::leaf(0.0), Nested::leaf(0.0)]);
        let (v, z) = (1, 2);
        let o = hitting_oracle(&mut t, &[v, z]).unwrap();
        assert!((o.from_root - 2.0 / 3.0).abs() < 1e-15);
        assert!((a_pair(&mut t, v, z).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let one = hitting_oracle(&mut t, &[v]).unwrap();
        assert!((one.from_root - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_node_variance() {
        let mut t = EnvTree::chain(&[0.0, 0.0]);
        let p = RestrictionParams::new(10.0);
        let v = quenched_variance(&mut t, 2, 1.0, SetId::All, &p, 100).unwrap();
        assert!((v.variance - 3.0 / 16.0).abs() < 1e-15);
        assert!((v.mean.k_mean - 0.25).abs() < 1e-15);
        assert!((v.mean.k_tilde - 0.25).abs() < 1e-15);
        let e = quenched_variance(&mut t, 5, 1.0, SetId::All, &p, 100).unwrap();
        assert_eq!(e.variance, 0.0);
    }

    #[test]
    fn closed_forms_match_oracle_on_random_trees() {
        for seed in 0..10 {
            let mut t = EnvTree::frozen(OffspringLaw::reference(), seed, 5);
            t.expand_all(ORACLE_MAX_NODES).unwrap();
            let nodes: Vec<NodeId> = (1..t.len() as NodeId).collect();
            for &z in nodes.iter().step_by(7) {
                let o = hitting_oracle(&mut t, &[z]).unwrap();
                assert!((o.from_root - az(&mut t, z).unwrap()).abs() < 1e-12);
            }
            let (v, z) = (nodes[nodes.len() - 1], nodes[nodes.len() - 5]);
            let o = hitting_oracle(&mut t, &[v, z]).unwrap();
            assert!((o.from_root - a_pair(&mut t, v, z).unwrap()).abs() < 1e-12);
            let w = t.lca(v, z);
            if w != ROOT {
                let ov = hitting_oracle(&mut t, &[v]).unwrap();
                assert!((ov.h[w as usize] - hit_from_ancestor(&t, w, v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn az_below_exp_minus_vbar() {
        let mut t = EnvTree::new(OffspringLaw::reference(), 21);
        let g = t.enumerate_generation(8, 1 << 9).unwrap();
        for z in g {
            let a = az(&mut t, z).unwrap();
            let p = t.p_root_back().unwrap();
            assert!(a <= p + 1e-15);
            assert!(a <= (-t.node(z).vbar).exp() + 1e-15);
        }
    }

    #[test]
    fn m1_functionals() {
        let mut t = EnvTree::from_nested(&[Nested::leaf(0.3), Nested::leaf(-0.4)]);
        let f = w_functionals(&mut t, 1, 1.0, 0.0, None, None, 10).unwrap();
        let w = (-0.3f64).exp() + 0.4f64.exp();
        let d = 0.3 * (-0.3f64).exp() - 0.4 * 0.4f64.exp();
        assert!((f.w - w).abs() < 1e-15);
        assert!((f.d - d).abs() < 1e-15);
    }
}
