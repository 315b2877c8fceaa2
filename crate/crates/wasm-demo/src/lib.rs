//! Three operations exposed to the static page in `www/`. Everything crosses the
//! boundary as JSON strings; errors come back as `{"error": "..."}`.

use rwre_core::env_model::{calibrate_boundary, Family};
use rwre_core::env_tree::{EnvTree, RestrictionParams, SetId};
use rwre_core::quenched_exact::summarize;
use rwre_core::walker::{run_walk, WalkConfig, WalkMode};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn render(r: rwre_core::Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

/// Calibrates a gaussian-binary template N(mu, s2) to the boundary case.
#[wasm_bindgen]
pub fn calibrate(mu: f64, s2: f64) -> String {
    render((|| {
        let law = calibrate_boundary(Family::GaussianBinary { mu, s2 }, 0.5)?;
        Ok(json!({ "law": law, "psi_1": law.psi(1.0)?, "psi_prime_1": law.psi_prime(1.0)? }))
    })())
}

/// One walk on a fresh reference tree; returns the first-visit histogram.
#[wasm_bindgen]
pub fn walk(n: u32, excursions: bool, seed: u32) -> String {
    render((|| {
        let law = rwre_core::env_model::OffspringLaw::reference();
        let mut tree = EnvTree::new(law, seed as u64);
        let mode = if excursions { WalkMode::Excursions(n as u64) } else { WalkMode::FixedSteps(n as u64) };
        let mut cfg = WalkConfig::new(mode, seed as u64 ^ 0x9e37);
        cfg.record_returns = false;
        cfg.max_steps = Some(50_000_000);
        let rec = run_walk(&mut tree, &cfg, &RestrictionParams::new((n as f64).max(3.0))).map_err(|p| p.error)?;
        let ln = (n.max(3) as f64).ln();
        Ok(json!({
            "steps": rec.steps_taken,
            "range": rec.range,
            "max_depth": rec.max_depth,
            "histogram": rec.first_visit_gen_counts,
            "log_n_squared": ln * ln,
        }))
    })())
}

/// Exact quenched summary of generation `generation` on a frozen depth-`depth` tree.
#[wasm_bindgen]
pub fn quenched(depth: u32, generation: u32, n: f64, seed: u32) -> String {
    render((|| {
        if depth > 10 {
            return Err(rwre_core::Error::Domain("depth is capped at 10 in the demo".into()));
        }
        let law = rwre_core::env_model::OffspringLaw::reference();
        let mut tree = EnvTree::frozen(law, seed as u64, depth);
        let p = RestrictionParams::new(n.max(3.0));
        let s = summarize(&mut tree, generation, n, SetId::All, &p, 1.0, 1.0, 1 << 12)?;
        Ok(serde_json::to_value(s).unwrap())
    })())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrate_reference() {
        let v: Value = serde_json::from_str(&calibrate(1.0, 1.0)).unwrap();
        let mu = v["law"]["mu"].as_f64().unwrap();
        assert!((mu - 2.0 * std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn walk_histogram_sums_to_range() {
        let v: Value = serde_json::from_str(&walk(5000, false, 3)).unwrap();
        let h: u64 = v["histogram"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).sum();
        assert_eq!(h, v["range"].as_u64().unwrap());
    }

    #[test]
    fn errors_are_json() {
        let v: Value = serde_json::from_str(&quenched(12, 3, 100.0, 1)).unwrap();
        assert!(v["error"].is_string());
        let v: Value = serde_json::from_str(&quenched(6, 3, 100.0, 1)).unwrap();
        assert!(v["k_mean"].as_f64().unwrap() > 0.0);
    }
}
