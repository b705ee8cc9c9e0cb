use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use fedhug::metrics::s_distribution;
use fedhug::pipeline::FinalEval;

use crate::commands::{read_manifest, FINAL_EVAL, MANIFEST};

struct SeedResult {
    seed: u64,
    eval: FinalEval,
}

struct Method {
    name: String,
    seeds: Vec<SeedResult>,
}

fn seed_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join(MANIFEST).exists() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading run directory {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("{} contains no finished runs", path.display());
    }
    Ok(dirs)
}

fn load_method(path: &Path) -> Result<Method> {
    let mut name = None;
    let mut seeds = Vec::new();
    for dir in seed_dirs(path)? {
        let manifest = read_manifest(&dir)?;
        let file = dir.join(FINAL_EVAL);
        let bytes = fs::read(&file).with_context(|| format!("{} is missing; did the run finish?", file.display()))?;
        let eval: FinalEval = serde_json::from_slice(&bytes)?;
        let run_name = manifest.name.unwrap_or_else(|| path.display().to_string());
        match &name {
            None => name = Some(run_name),
            Some(n) if *n != run_name => log::warn!("{} mixes runs {n} and {run_name}", path.display()),
            _ => {}
        }
        seeds.push(SeedResult {
            seed: manifest.seed,
            eval,
        });
    }
    seeds.sort_by_key(|s| s.seed);
    Ok(Method {
        name: name.unwrap_or_default(),
        seeds,
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let methods: Vec<Method> = runs.iter().map(|p| load_method(p)).collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let mut text = String::new();

    let mut metrics =
        String::from("method,seeds,mae_mean,mae_sd,sd_mean,rmse_mean,rmse_sd,pearson_mean,pearson_sd,tail_mae_mean\n");
    let mut per_seed = String::from("method,seed,mae,sd,rmse,pearson,tail_mae\n");
    writeln!(
        text,
        "# Target metrics\n\n| method | seeds | MAE | SD | RMSE | p | tail MAE |\n|---|---|---|---|---|---|---|"
    )?;
    for m in &methods {
        let col = |f: &dyn Fn(&FinalEval) -> f64| m.seeds.iter().map(|s| f(&s.eval)).collect::<Vec<_>>();
        let (mae, mae_sd) = mean_sd(&col(&|e| e.target.mae));
        let (sd, _) = mean_sd(&col(&|e| e.target.sd));
        let (rmse, rmse_sd) = mean_sd(&col(&|e| e.target.rmse));
        let (p, p_sd) = mean_sd(&col(&|e| e.target.pearson));
        let tails: Vec<f64> = m.seeds.iter().filter_map(|s| s.eval.tail.tail_mae).collect();
        let tail = (!tails.is_empty()).then(|| mean_sd(&tails).0);
        let tail_s = tail.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            metrics,
            "{},{},{mae},{mae_sd},{sd},{rmse},{rmse_sd},{p},{p_sd},{tail_s}",
            m.name,
            m.seeds.len()
        )?;
        writeln!(
            text,
            "| {} | {} | {mae:.3} ± {mae_sd:.3} | {sd:.3} | {rmse:.3} ± {rmse_sd:.3} | {p:.3} ± {p_sd:.3} | {} |",
            m.name,
            m.seeds.len(),
            tail.map(|t| format!("{t:.3}")).unwrap_or_else(|| "-".into())
        )?;
        for s in &m.seeds {
            let t = &s.eval.target;
            let tail = s.eval.tail.tail_mae.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                per_seed,
                "{},{},{},{},{},{},{tail}",
                m.name, s.seed, t.mae, t.sd, t.rmse, t.pearson
            )?;
        }
    }
    fs::write(out.join("metrics.csv"), metrics)?;
    fs::write(out.join("per_seed.csv"), per_seed)?;

    // Interval table: mean MAE across seeds for every bin any run reports.
    let mut tails = String::from("method,interval,lo,hi,seeds,mae_mean\n");
    writeln!(text, "\n# MAE by heart-rate interval\n")?;
    let mut table: BTreeMap<(i64, i64), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for m in &methods {
        for s in &m.seeds {
            for b in &s.eval.tail.bins {
                if let Some(mae) = b.mae {
                    table
                        .entry((b.lo.round() as i64, b.hi.round() as i64))
                        .or_default()
                        .entry(m.name.clone())
                        .or_default()
                        .push(mae);
                }
            }
        }
        for (label, pick) in [("lower_tail", 0), ("upper_tail", 1)] {
            let v: Vec<f64> = m
                .seeds
                .iter()
                .filter_map(|s| {
                    if pick == 0 {
                        s.eval.tail.lower_tail.mae
                    } else {
                        s.eval.tail.upper_tail.mae
                    }
                })
                .collect();
            if !v.is_empty() {
                writeln!(tails, "{},{label},,,{},{}", m.name, v.len(), mean_sd(&v).0)?;
            }
        }
    }
    write!(text, "| interval |")?;
    for m in &methods {
        write!(text, " {} |", m.name)?;
    }
    write!(text, "\n|---|{}\n", "---|".repeat(methods.len()))?;
    for ((lo, hi), row) in &table {
        write!(text, "| {lo}-{hi} |")?;
        for m in &methods {
            match row.get(&m.name) {
                Some(v) => {
                    let mean = mean_sd(v).0;
                    writeln!(tails, "{},bin,{lo},{hi},{},{mean}", m.name, v.len())?;
                    write!(text, " {mean:.2} |")?;
                }
                None => write!(text, " - |")?,
            }
        }
        writeln!(text)?;
    }
    fs::write(out.join("tail_intervals.csv"), tails)?;

    // Score distributions pooled over seeds.
    let s_dir = out.join("s_distributions");
    fs::create_dir_all(&s_dir)?;
    writeln!(text, "\n# Consistency score medians (initial -> final)\n")?;
    for m in &methods {
        let mut pooled: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for s in &m.seeds {
            for c in &s.eval.s_initial {
                pooled.entry(c.id).or_default().0.extend(&c.scores);
            }
            for c in &s.eval.s_final {
                pooled.entry(c.id).or_default().1.extend(&c.scores);
            }
        }
        for (id, (init, fin)) in &pooled {
            let mut medians = Vec::new();
            for (tag, v) in [("initial", init), ("final", fin)] {
                if v.is_empty() {
                    continue;
                }
                let d = s_distribution(v)?;
                fs::write(s_dir.join(format!("{}_client{id}_{tag}.csv", m.name)), d.to_csv())?;
                medians.push(format!("{:.4}", d.median));
            }
            writeln!(text, "- {} client {id}: {}", m.name, medians.join(" -> "))?;
        }
    }

    // Paired differences against the first run given.
    if methods.len() > 1 {
        let base = &methods[0];
        let mut paired = String::from("method,seed,reference_mae,mae,diff\n");
        let mut summary = String::from("method,reference,pairs,mean_diff,negative,positive\n");
        writeln!(text, "\n# Paired differences vs {}\n", base.name)?;
        let base_seeds: BTreeMap<u64, f64> = base.seeds.iter().map(|s| (s.seed, s.eval.target.mae)).collect();
        for m in &methods[1..] {
            let seeds: BTreeSet<u64> = m.seeds.iter().map(|s| s.seed).collect();
            if seeds != base_seeds.keys().copied().collect() {
                log::warn!(
                    "{} and {} cover different seeds; pairing only the common ones",
                    base.name,
                    m.name
                );
            }
            let diffs: Vec<f64> = m
                .seeds
                .iter()
                .filter_map(|s| {
                    let r = base_seeds.get(&s.seed)?;
                    let d = r - s.eval.target.mae;
                    writeln!(paired, "{},{},{r},{},{}", m.name, s.seed, s.eval.target.mae, -d).ok()?;
                    Some(-d)
                })
                .collect();
            if diffs.is_empty() {
                writeln!(text, "- {}: no common seeds", m.name)?;
                continue;
            }
            let neg = diffs.iter().filter(|d| **d < 0.0).count();
            let pos = diffs.iter().filter(|d| **d > 0.0).count();
            let mean = mean_sd(&diffs).0;
            writeln!(summary, "{},{},{},{mean},{neg},{pos}", m.name, base.name, diffs.len())?;
            writeln!(
                text,
                "- {} - {}: mean {mean:+.3} bpm over {} seeds ({neg} negative, {pos} positive)",
                m.name,
                base.name,
                diffs.len()
            )?;
        }
        fs::write(out.join("paired.csv"), paired)?;
        fs::write(out.join("paired_summary.csv"), summary)?;
    }
    fs::write(out.join("report.md"), text)?;
    Ok(())
}
