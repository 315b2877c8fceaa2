use crate::config::{self, Config, PredictionSource, WalkModeName};
use crate::output::{self, ensure_dir, json_line, write, write_csv, write_json, Fail, Meta};
use crate::{Cli, Cmd};
use rwre_core::env_model::{Family, OffspringLaw};
use rwre_core::env_tree::EnvTree;
use rwre_core::experiments::{self as ex, to_csv, Manifest, Predictions};
use rwre_core::limit_constants::{build_constants, ConstantsConfig, ConstantsState};
use rwre_core::onedim::{appendix_check, FactId, RenewalTable};
use rwre_core::par;
use rwre_core::quenched_exact::summarize;
use rwre_core::walker::{run_walk, WalkConfig, WalkMode, WalkRecord};
use serde::Serialize;
use serde_json::json;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

struct Ctx {
    cfg: Config,
    meta: Meta,
    strict: bool,
}

impl Ctx {
    fn law(&self) -> Result<OffspringLaw, Fail> {
        Ok(self.cfg.law.build()?)
    }

    fn manifest(&self, experiment: &str) -> Manifest {
        Manifest::new(experiment, &self.meta.config_hash, self.cfg.seed)
    }
}

/// Subcommand flags become config overrides so that the hash covers them.
fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut o = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push(format!("{k}={v}"));
        }
    };
    push("seed", cli.seed.map(|s| s.to_string()));
    push("workers", cli.workers.map(|s| s.to_string()));
    match &cli.cmd {
        Cmd::Calibrate { theta, .. } => push("law.theta", theta.map(|x| format!("{x:?}"))),
        Cmd::Walk { mode, n, replicas, tree_seed, .. } => {
            push("walk.mode", mode.as_ref().map(|m| format!("\"{m}\"")));
            push("walk.n", n.map(|x| x.to_string()));
            push("walk.replicas", replicas.map(|x| x.to_string()));
            push("walk.tree_seed", tree_seed.map(|x| x.to_string()));
        }
        Cmd::Quenched { depth, generation, n, trees, set, .. } => {
            push("quenched.depth", depth.map(|x| x.to_string()));
            push("quenched.generation", generation.map(|x| x.to_string()));
            push("quenched.n", n.map(|x| format!("{x:?}")));
            push("quenched.trees", trees.map(|x| x.to_string()));
            push("quenched.set", set.as_ref().map(|s| format!("\"{s}\"")));
        }
        Cmd::Appendix { replicas, .. } => push("appendix.replicas", replicas.map(|x| x.to_string())),
        _ => {}
    }
    o
}

fn template_for(family: &str) -> Result<Family, Fail> {
    match family {
        "gaussian-binary" => Ok(Family::GaussianBinary { mu: 1.0, s2: 1.0 }),
        "two-point" => Ok(Family::TwoPoint { n: 4, p: 0.2, d_minus: -0.2, d_plus: 4.0 }),
        other => Err(Fail::config(format!("unknown family `{other}` (tabulated laws need a config file)"))),
    }
}

pub fn run(cli: Cli) -> Result<u8, Fail> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Fail::io(e, p))?,
        None => String::new(),
    };
    let mut overrides = flag_overrides(&cli);
    overrides.extend(cli.overrides.iter().cloned());
    let mut cfg = config::load(&text, &overrides)?;
    if let Cmd::Calibrate { family: Some(f), .. } = &cli.cmd {
        cfg.law.template = template_for(f)?;
    }
    if let Cmd::Constants { quick: true, .. } = &cli.cmd {
        cfg.constants = ConstantsConfig { seed: cfg.constants.seed, ..ConstantsConfig::quick() };
    }
    if cfg.workers > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let meta = Meta::new(cfg.hash(), cfg.seed);
    let ctx = Ctx { cfg, meta, strict: cli.strict };
    match &cli.cmd {
        Cmd::Calibrate { .. } => calibrate(&ctx),
        Cmd::Constants { out, .. } => constants(&ctx, &out.dir),
        Cmd::Walk { out, .. } => walk(&ctx, out.as_deref()),
        Cmd::Quenched { out, .. } => quenched(&ctx, out.as_deref()),
        Cmd::Experiment { name, out } => experiment(&ctx, name, &out.dir),
        Cmd::Appendix { facts, out, .. } => appendix(&ctx, facts, &out.dir),
        Cmd::Report { dir } => report(dir),
    }
}

fn calibrate(ctx: &Ctx) -> Result<u8, Fail> {
    let law = ctx.law()?;
    let v = json!({
        "meta": ctx.meta,
        "law": law,
        "psi_1": law.psi(1.0)?,
        "psi_prime_1": law.psi_prime(1.0)?,
    });
    println!("{}", serde_json::to_string_pretty(&v).unwrap());
    Ok(0)
}

fn emit_lines(out: Option<&Path>, lines: &[String]) -> Result<(), Fail> {
    let mut text = lines.join("\n");
    text.push('\n');
    match out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn refuse_collisions(seeds: &[u64], what: &str) -> Result<(), Fail> {
    let mut seen = HashSet::new();
    for s in seeds {
        if !seen.insert(*s) {
            return Err(Fail::config(format!("seed collision among {what} seeds ({s})")));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct WalkLine<'a> {
    replica: usize,
    tree_seed: u64,
    record: &'a WalkRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn walk(ctx: &Ctx, out: Option<&Path>) -> Result<u8, Fail> {
    let w = &ctx.cfg.walk;
    let law = ctx.law()?;
    let seed = ctx.cfg.seed;
    let tree_seeds: Vec<u64> = (0..w.replicas as u64).map(|r| w.tree_seed.unwrap_or_else(|| ex::tree_seed(seed, r))).collect();
    let walk_seeds: Vec<u64> = (0..w.replicas as u64).map(|r| ex::walk_seed(seed, r)).collect();
    refuse_collisions(&walk_seeds, "walk")?;
    if w.tree_seed.is_none() {
        refuse_collisions(&tree_seeds, "tree")?;
    }
    let mode = match w.mode {
        WalkModeName::FixedSteps => WalkMode::FixedSteps(w.n),
        WalkModeName::Excursions => WalkMode::Excursions(w.n),
    };
    let params = ctx.cfg.restriction.params((w.n as f64).max(3.0));
    params.validate()?;
    let results = par::map_range(w.replicas, |r| {
        let mut tree = EnvTree::new(law.clone(), tree_seeds[r]);
        let wc = WalkConfig {
            track_sets: w.track_sets.clone(),
            full_front: w.full_front,
            record_returns: w.record_returns,
            max_steps: w.max_steps,
            ..WalkConfig::new(mode, walk_seeds[r])
        };
        match run_walk(&mut tree, &wc, &params) {
            Ok(rec) => (rec, None),
            Err(p) => (p.record, Some(p.error.to_string())),
        }
    });
    let mut lines = vec![json_line(&json!({ "meta": ctx.meta, "walk": w }))?];
    let mut partial = false;
    for (r, (rec, err)) in results.iter().enumerate() {
        partial |= err.is_some();
        lines.push(json_line(&WalkLine { replica: r, tree_seed: tree_seeds[r], record: rec, error: err.clone() })?);
    }
    emit_lines(out, &lines)?;
    Ok(if partial { output::EXIT_RESOURCE } else { 0 })
}

fn quenched(ctx: &Ctx, out: Option<&Path>) -> Result<u8, Fail> {
    let q = &ctx.cfg.quenched;
    let law = ctx.law()?;
    let seeds: Vec<u64> = (0..q.trees as u64).map(|t| ex::tree_seed(ctx.cfg.seed, t)).collect();
    refuse_collisions(&seeds, "tree")?;
    let params = ctx.cfg.restriction.params(q.n);
    params.validate()?;
    let mut lines = vec![json_line(&json!({ "meta": ctx.meta, "quenched": q }))?];
    for (t, s) in seeds.iter().enumerate() {
        let mut tree = EnvTree::frozen(law.clone(), *s, q.depth);
        let sum = summarize(&mut tree, q.generation, q.n, q.set, &params, q.a, q.b, q.max_nodes)?;
        lines.push(json_line(&json!({ "tree": t, "tree_seed": s, "summary": sum }))?);
    }
    emit_lines(out, &lines)?;
    Ok(0)
}

fn constants(ctx: &Ctx, dir: &Path) -> Result<u8, Fail> {
    let law = ctx.law()?;
    let state = build_constants(&law, &ctx.cfg.constants)?;
    ensure_dir(dir)?;
    let rep = &state.report;
    write_json(&dir.join("constants.json"), &json!({ "meta": ctx.meta, "report": rep }))?;
    write_csv(&dir.join("lambda.csv"), &ctx.meta, &rep.lambda_csv())?;
    write_csv(&dir.join("curly_c.csv"), &ctx.meta, &rep.curly_c_csv())?;
    let mut m = ctx.manifest("constants");
    m.files = vec!["constants.json".into(), "lambda.csv".into(), "curly_c.csv".into()];
    m.flags = rep.warnings.clone();
    m.summary = serde_json::to_value(&rep.header).unwrap();
    write_json(&dir.join("constants.manifest.json"), &m)?;
    println!("{}", serde_json::to_string_pretty(&rep.header).unwrap());
    Ok(if ctx.strict && !rep.warnings.is_empty() { output::EXIT_CONVERGENCE } else { 0 })
}

fn predictions(ctx: &Ctx, law: &OffspringLaw) -> Result<Option<ConstantsState>, Fail> {
    let cc = match ctx.cfg.experiments.predictions {
        PredictionSource::None => return Ok(None),
        PredictionSource::Quick => ConstantsConfig { seed: ctx.cfg.constants.seed, ..ConstantsConfig::quick() },
        PredictionSource::Config => ctx.cfg.constants.clone(),
    };
    Ok(Some(build_constants(law, &cc)?))
}

struct Written {
    files: Vec<String>,
}

impl Written {
    fn csv<T: Serialize>(&mut self, dir: &Path, meta: &Meta, name: &str, rows: &[T]) -> Result<(), Fail> {
        write_csv(&dir.join(name), meta, &to_csv(rows)?)?;
        self.files.push(name.into());
        Ok(())
    }
}

const EXPERIMENTS: [&str; 5] = ["scan", "local-time", "range", "profile", "wm"];

fn experiment(ctx: &Ctx, name: &str, dir: &Path) -> Result<u8, Fail> {
    let names: Vec<&str> = if name == "all" {
        EXPERIMENTS.to_vec()
    } else if EXPERIMENTS.contains(&name) {
        vec![name]
    } else {
        return Err(Fail::config(format!("unknown experiment `{name}`; expected one of {EXPERIMENTS:?} or all")));
    };
    let law = ctx.law()?;
    let state = predictions(ctx, &law)?;
    let pred = state.as_ref().map(|s| Predictions { state: s });
    let pred = pred.as_ref();
    ensure_dir(dir)?;
    let e = &ctx.cfg.experiments;
    let meta = &ctx.meta;
    let mut any_flag = false;
    for n in names {
        let mut w = Written { files: vec![] };
        let mut m = ctx.manifest(n);
        match n {
            "scan" => {
                let t = ex::critical_generation_scan(&law, &e.scan, pred)?;
                w.csv(dir, meta, "scan.csv", &t.rows)?;
                w.csv(dir, meta, "scan_argmax.csv", &t.argmax)?;
                m.flags = t.flags;
                m.summary = json!({ "argmax": t.argmax });
            }
            "local-time" => {
                let t = ex::local_time_check(&law, &e.local_time, pred)?;
                w.csv(dir, meta, "local_time.csv", &t.rows)?;
                m.summary = json!({
                    "p_hat": t.p_hat, "d_hat": t.d_hat, "d_depth": t.d_depth,
                    "d_alpha_hat": t.d_alpha_hat, "drift": t.drift,
                });
                m.flags = t.flags;
            }
            "range" => {
                let t = ex::range_check(&law, &e.range, pred)?;
                w.csv(dir, meta, "range.csv", &t.rows)?;
                w.csv(dir, meta, "range_windows.csv", &t.windows)?;
                m.summary = json!({ "drift_toward_one": t.drift_toward_one });
                m.flags = t.flags;
            }
            "profile" => {
                let t = ex::environment_profile(&law, &e.profile)?;
                w.csv(dir, meta, "profile.csv", &t.rows)?;
                w.csv(dir, meta, "profile_generations.csv", &t.generations)?;
                m.summary = json!({ "n": t.n, "mean_range": t.mean_range });
                m.flags = t.flags;
            }
            "wm" => {
                let t = ex::wm_convergence(&law, &e.wm, pred)?;
                w.csv(dir, meta, "wm.csv", &t.rows)?;
                w.csv(dir, meta, "wm_summary.csv", &t.summary)?;
                w.csv(dir, meta, "wm_fsum.csv", &t.fsum)?;
                w.csv(dir, meta, "wm_mean.csv", &t.mean)?;
                m.summary = json!({ "summary": t.summary });
                m.flags = t.flags;
            }
            _ => unreachable!(),
        }
        if let Some(s) = &state {
            if let serde_json::Value::Object(o) = &mut m.summary {
                o.insert("constants".into(), serde_json::to_value(&s.report.header).unwrap());
            }
        }
        any_flag |= !m.flags.is_empty();
        m.files = w.files;
        write_json(&dir.join(format!("{}.manifest.json", n.replace('-', "_"))), &m)?;
    }
    Ok(if ctx.strict && any_flag { output::EXIT_RESOURCE } else { 0 })
}

#[derive(Serialize)]
struct AppendixCsvRow {
    n: u64,
    lhs: f64,
    lhs_se: f64,
    shape: f64,
    ratio: f64,
    ratio_se: f64,
}

fn appendix(ctx: &Ctx, facts: &[String], dir: &Path) -> Result<u8, Fail> {
    let a = &ctx.cfg.appendix;
    let law = ctx.law()?;
    let step = law.step_law();
    let mut names: Vec<String> = if !facts.is_empty() { facts.to_vec() } else { a.facts.clone() };
    if names.is_empty() {
        names = FactId::ALL.iter().map(|f| f.name().to_string()).collect();
    }
    let ids: Vec<FactId> = names.iter().map(|n| n.parse::<FactId>()).collect::<Result<_, _>>()?;
    let needs_split = step.is_continuous() && ids.iter().any(|f| f.has_split());
    let tables = if needs_split {
        let seed = ctx.cfg.seed;
        let r = RenewalTable::build(&step, a.renewal_replicas, a.ladder_pool, seed)?;
        let rn = if step.is_symmetric() {
            r.clone()
        } else {
            RenewalTable::build(&step.negated(), a.renewal_replicas, a.ladder_pool, seed ^ 1)?
        };
        Some((r, rn))
    } else {
        None
    };
    ensure_dir(dir)?;
    let mut m = ctx.manifest("appendix");
    let mut summary = Vec::new();
    let mut unstable = false;
    for id in ids {
        let reps = if id.has_split() && tables.is_some() { a.split_replicas } else { a.replicas };
        let rep = appendix_check(
            id.name(),
            a.grid.as_deref(),
            None,
            &step,
            tables.as_ref().map(|(r, rn)| (r, rn)),
            reps,
            ctx.cfg.seed,
        )?;
        let rows: Vec<AppendixCsvRow> = rep
            .rows
            .iter()
            .map(|r| AppendixCsvRow {
                n: r.n,
                lhs: r.lhs.value,
                lhs_se: r.lhs.se,
                shape: r.shape,
                ratio: r.ratio.value,
                ratio_se: r.ratio.se,
            })
            .collect();
        let file = format!("appendix_{}.csv", rep.fact);
        write_csv(&dir.join(&file), &ctx.meta, &to_csv(&rows)?)?;
        m.files.push(file);
        if !rep.stable {
            unstable = true;
            m.flags.push(format!("{}: top-octave slope not within 3 SE of 0", rep.fact));
        }
        summary.push(json!({
            "fact": rep.fact, "method": rep.method, "replicas": rep.replicas,
            "c_hat": rep.c_hat, "top_octave_slope": rep.top_octave_slope, "stable": rep.stable,
        }));
    }
    m.summary = json!(summary);
    write_json(&dir.join("appendix.manifest.json"), &m)?;
    Ok(if ctx.strict && unstable { output::EXIT_CONVERGENCE } else { 0 })
}

#[derive(Serialize)]
struct ReportRow {
    manifest: String,
    experiment: String,
    version: String,
    config_hash: String,
    seed: u64,
    files: usize,
    flags: usize,
    summary: String,
}

fn report(dir: &Path) -> Result<u8, Fail> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Fail::io(e, dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in &paths {
        let text = std::fs::read_to_string(p).map_err(|e| Fail::io(e, p))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Fail::config(format!("{}: not a manifest: {e}", p.display())))?;
        rows.push(ReportRow {
            manifest: p.file_name().unwrap().to_string_lossy().into_owned(),
            experiment: m.experiment,
            version: m.version,
            config_hash: m.config_hash,
            seed: m.seed,
            files: m.files.len(),
            flags: m.flags.len(),
            summary: m.summary.to_string(),
        });
    }
    if rows.is_empty() {
        return Err(Fail::config(format!("no manifests in {}", dir.display())));
    }
    let csv = to_csv(&rows)?;
    write(&dir.join("report.csv"), &csv)?;
    print!("{csv}");
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collisions_are_refused() {
        assert!(refuse_collisions(&[1, 2, 3], "walk").is_ok());
        let e = refuse_collisions(&[1, 2, 1], "walk").unwrap_err();
        assert_eq!(e.code, output::EXIT_CONFIG);
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let s: Vec<u64> = (0..100_000).map(|r| ex::walk_seed(7, r)).collect();
        assert!(refuse_collisions(&s, "walk").is_ok());
    }
}
