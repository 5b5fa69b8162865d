//! Subcommand implementations: plan, propagate, verify, report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::json;
use tangents::arch::{ArchSpec, Modality};
use tangents::kernel::{propagate_kernels, KernelTrace, PropagationSettings};
use tangents::ntk::{propagate_ntk_with_kernels, NtkTrace};
use tangents::plan::{make_plan, ScalingPlan};

use crate::checks::{CheckParams, Verdict, VerifyOutputs};
use crate::config::RunConfig;
use crate::svg::{fit_slope, LinePlot, Series};

/// Writes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct SymbolicJson {
    coeff: f64,
    n_exp: f64,
    n_in_exp: f64,
    n_out_exp: f64,
    m_exp: f64,
    rendered: String,
}

fn symbolic_json(sym: &tangents::plan::Symbolic, arch: &ArchSpec) -> SymbolicJson {
    SymbolicJson {
        coeff: sym.coeff,
        n_exp: sym.n_exp,
        n_in_exp: sym.n_in_exp,
        n_out_exp: sym.n_out_exp,
        m_exp: sym.m_exp,
        rendered: sym.render(arch),
    }
}

/// Plan JSON with groups in stem-to-head order under stable keys.
fn plan_json(arch: &ArchSpec, plan: &ScalingPlan<f64>) -> serde_json::Value {
    let mut groups = serde_json::Map::new();
    for (group, row) in &plan.groups {
        groups.insert(
            group.name().to_string(),
            json!({
                "init_var": row.init_var,
                "init_std": row.init_var.sqrt(),
                "sgd_factor": row.sgd_factor,
                "adamw_factor": row.adamw_factor,
                "init_std_symbolic": serde_json::to_value(symbolic_json(&row.init_std_symbolic, arch)).expect("serializable"),
                "sgd_symbolic": serde_json::to_value(symbolic_json(&row.sgd_symbolic, arch)).expect("serializable"),
                "adamw_symbolic": serde_json::to_value(symbolic_json(&row.adamw_symbolic, arch)).expect("serializable"),
            }),
        );
    }
    json!({
        "modality": arch.modality,
        "n": arch.n,
        "n_in": arch.n_in,
        "n_out": arch.n_out,
        "mlp_multiplier": arch.mlp_multiplier,
        "strategy": plan.strategy,
        "s": plan.s,
        "n_rescale": plan.n_rescale,
        "n_rescale_symbolic": serde_json::to_value(symbolic_json(&plan.n_rescale_symbolic, arch)).expect("serializable"),
        "groups": serde_json::Value::Object(groups),
        "constants": serde_json::to_value(&plan.constants).expect("serializable"),
    })
}

/// Human-readable table mirroring the usual scaling-table layout.
fn plan_table(arch: &ArchSpec, plan: &ScalingPlan<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scaling plan — {} model, n={}, n_in={}, n_out={}, M={}, strategy s={}",
        match arch.modality {
            Modality::Vision => "vision",
            Modality::Language => "language",
        },
        arch.n,
        arch.n_in,
        arch.n_out,
        arch.mlp_multiplier,
        plan.s
    );
    let _ = writeln!(out, "{:<22}{:<22}{:<26}{}", "group", "initial std", "sgd lr factor", "adamw lr factor");
    for (group, row) in &plan.groups {
        let _ = writeln!(
            out,
            "{:<22}{:<22}{:<26}{}",
            group.name(),
            row.init_std_symbolic.render(arch),
            row.sgd_symbolic.render(arch),
            row.adamw_symbolic.render(arch)
        );
    }
    let _ = writeln!(out, "output rescale: {}", plan.n_rescale_symbolic.render(arch));
    out
}

pub fn cmd_plan(config: &RunConfig, out_dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    let arch = config.arch.to_arch();
    let strategy = config.strategy.to_strategy()?;
    let constants = config.constants.to_constants(&strategy)?;
    let plan = make_plan::<f64>(&arch, &strategy, &constants).map_err(|e| anyhow::anyhow!("{e}"))?;
    let json = serde_json::to_string_pretty(&plan_json(&arch, &plan))?;
    write_atomic(&out_dir.join("plan.json"), &(json + "\n"))?;
    write_atomic(&out_dir.join("plan.txt"), &plan_table(&arch, &plan))?;
    println!("wrote {}", out_dir.join("plan.json").display());
    println!("{}", plan_table(&arch, &plan));
    Ok(())
}

fn kernels_csv(trace: &KernelTrace<f64>) -> String {
    let mut out = String::from("block,label,pair1,pair2,g,f\n");
    for block in &trace.blocks {
        for p in 0..block.g.dim() {
            for q in 0..block.g.dim() {
                let f = block.f.as_ref().map(|f| f.get(p, q).to_string()).unwrap_or_default();
                let _ = writeln!(out, "{},{},{p},{q},{},{f}", block.index, block.label, block.g.get(p, q));
            }
        }
    }
    out
}

fn ntk_csv(trace: &NtkTrace<f64>) -> String {
    let mut out = String::from("block,label,pair1,pair2,theta,group,group_additive\n");
    for block in &trace.blocks {
        for p in 0..block.theta.dim() {
            for q in 0..block.theta.dim() {
                for (group, add) in &block.additive {
                    let _ = writeln!(
                        out,
                        "{},{},{p},{q},{},{},{}",
                        block.index,
                        block.label,
                        block.theta.get(p, q),
                        group.name(),
                        add.get(p, q)
                    );
                }
            }
        }
    }
    out
}

pub fn cmd_propagate(config: &RunConfig, out_dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    let arch = config.arch.to_arch();
    let strategy = config.strategy.to_strategy()?;
    let constants = config.constants.to_constants(&strategy)?;
    let plan = make_plan::<f64>(&arch, &strategy, &constants).map_err(|e| anyhow::anyhow!("{e}"))?;
    let batch = config.inputs.to_batch(&arch)?;
    let settings = PropagationSettings {
        moment_samples: config.propagation.moment_samples,
        quad_order: config.propagation.quad_order,
        seed: config.propagation.seed,
    };
    let kernels = propagate_kernels(&arch, &plan, &batch, &settings).map_err(|e| anyhow::anyhow!("{e}"))?;
    let ntk = propagate_ntk_with_kernels(&arch, &plan, &kernels).map_err(|e| anyhow::anyhow!("{e}"))?;
    write_atomic(&out_dir.join("kernels.csv"), &kernels_csv(&kernels))?;
    write_atomic(&out_dir.join("ntk.csv"), &ntk_csv(&ntk))?;
    println!("wrote {} and {}", out_dir.join("kernels.csv").display(), out_dir.join("ntk.csv").display());
    Ok(())
}

fn verify_csv(outputs: &VerifyOutputs) -> String {
    let mut out = String::from("name,value,tolerance,stderr,verdict\n");
    for c in &outputs.checks {
        let se = c.stderr.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{se},{}", c.name, c.value, c.tolerance, c.verdict);
    }
    out
}

fn grads_csv(outputs: &VerifyOutputs) -> String {
    let mut out = String::from("group,width,mean_abs_grad,stderr\n");
    for r in &outputs.grad_rows {
        let _ = writeln!(out, "{},{},{},{}", r.group, r.width, r.mean_abs_grad, r.stderr);
    }
    out
}

fn probe_csv(outputs: &VerifyOutputs) -> String {
    let mut out = String::from("optimizer,factors,width,lr,mean_abs_delta,stderr\n");
    for r in &outputs.probe_rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.optimizer, r.factors, r.width, r.lr, r.mean_abs_delta, r.stderr);
    }
    out
}

/// Runs the verification suite; returns true iff no check failed
/// (inconclusive checks are reported but do not fail the run).
pub fn cmd_verify(config: &RunConfig, out_dir: &Path, widths_override: Option<Vec<usize>>) -> anyhow::Result<bool> {
    fs::create_dir_all(out_dir)?;
    let mut verify = config.verify.clone();
    if let Some(widths) = widths_override {
        if !widths.windows(2).all(|w| w[0] < w[1]) || widths.is_empty() {
            bail!("--widths must be strictly increasing and nonempty");
        }
        verify.widths = widths;
    }
    if verify.widths.len() < 2 {
        bail!("verification needs at least two widths");
    }
    let params = CheckParams::from_verify(&verify);
    let outputs = crate::checks::run_all(&params);

    for c in &outputs.checks {
        println!("{:<28} {:<12} value {:.4} (tolerance {:.4}) — {}", c.name, c.verdict.to_string(), c.value, c.tolerance, c.details);
    }

    let passed = outputs.checks.iter().filter(|c| c.verdict == Verdict::Pass).count();
    let failed = outputs.checks.iter().filter(|c| c.verdict == Verdict::Fail).count();
    let inconclusive = outputs.checks.iter().filter(|c| c.verdict == Verdict::Inconclusive).count();
    let report = json!({
        "checks": serde_json::to_value(&outputs.checks)?,
        "passed": passed,
        "failed": failed,
        "inconclusive": inconclusive,
        "all_pass": failed == 0,
    });
    write_atomic(&out_dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_atomic(&out_dir.join("verify.csv"), &verify_csv(&outputs))?;
    write_atomic(&out_dir.join("grads.csv"), &grads_csv(&outputs))?;
    write_atomic(&out_dir.join("probe.csv"), &probe_csv(&outputs))?;
    println!(
        "verification: {passed} passed, {failed} failed, {inconclusive} inconclusive — report at {}",
        out_dir.join("report.json").display()
    );
    Ok(failed == 0)
}

fn read_csv(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        rows.push(line.split(',').map(|s| s.to_string()).collect());
    }
    if rows.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(field: &str, path: &Path) -> anyhow::Result<T> {
    field.parse::<T>().map_err(|_| anyhow::anyhow!("malformed field `{field}` in {}", path.display()))
}

pub fn cmd_report(in_dir: &Path, out_dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut produced = 0usize;

    let kernels = in_dir.join("kernels.csv");
    if kernels.exists() {
        let rows = read_csv(&kernels)?;
        // Diagonal entries per pair index across blocks.
        let mut per_pair: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = std::collections::BTreeMap::new();
        for row in &rows {
            if row.len() < 6 {
                bail!("kernels.csv row has {} fields", row.len());
            }
            let block: usize = parse(&row[0], &kernels)?;
            let p: usize = parse(&row[2], &kernels)?;
            let q: usize = parse(&row[3], &kernels)?;
            if p == q {
                let g: f64 = parse(&row[4], &kernels)?;
                per_pair.entry(p).or_default().push((block as f64, g));
            }
        }
        let mut plot = LinePlot::new("kernel diagonal vs depth", "block", "G diagonal");
        for (pair, points) in per_pair {
            plot.series.push(Series { label: format!("pair {pair}"), points });
        }
        write_atomic(&out_dir.join("kernel_diag_vs_depth.svg"), &plot.render())?;
        produced += 1;
    }

    let grads = in_dir.join("grads.csv");
    if grads.exists() {
        let rows = read_csv(&grads)?;
        let mut per_group: std::collections::BTreeMap<String, Vec<(f64, f64)>> = std::collections::BTreeMap::new();
        for row in &rows {
            if row.len() < 4 {
                bail!("grads.csv row has {} fields", row.len());
            }
            let width: f64 = parse(&row[1], &grads)?;
            let g: f64 = parse(&row[2], &grads)?;
            per_group.entry(row[0].clone()).or_default().push((width, g));
        }
        let mut plot = LinePlot::new("mean |g| vs width", "width n", "mean |g|");
        plot.log_x = true;
        plot.log_y = true;
        for (group, mut points) in per_group {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let logs: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.1 > 0.0)
                .map(|p| (p.0.log10(), p.1.log10()))
                .collect();
            let label = if logs.len() >= 2 {
                format!("{group} (slope {:+.2})", fit_slope(&logs))
            } else {
                group.clone()
            };
            plot.series.push(Series { label, points });
        }
        write_atomic(&out_dir.join("grad_magnitude_vs_width.svg"), &plot.render())?;
        produced += 1;
    }

    let probe = in_dir.join("probe.csv");
    if probe.exists() {
        let rows = read_csv(&probe)?;
        let mut per_run: std::collections::BTreeMap<String, Vec<(f64, f64)>> = std::collections::BTreeMap::new();
        for row in &rows {
            if row.len() < 6 {
                bail!("probe.csv row has {} fields", row.len());
            }
            let width: f64 = parse(&row[2], &probe)?;
            let lr: f64 = parse(&row[3], &probe)?;
            let delta: f64 = parse(&row[4], &probe)?;
            per_run.entry(format!("{}+{}", row[0], row[1])).or_default().push((width, delta / lr));
        }
        let mut plot = LinePlot::new("one-step update size vs width", "width n", "|Δf| / lr");
        for (label, mut points) in per_run {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            plot.series.push(Series { label, points });
        }
        write_atomic(&out_dir.join("update_size_vs_width.svg"), &plot.render())?;
        produced += 1;
    }

    if produced == 0 {
        bail!("no known CSV files (kernels.csv, grads.csv, probe.csv) in {}", in_dir.display());
    }
    println!("wrote {produced} plot(s) to {}", out_dir.display());
    Ok(())
}

pub fn resolve_out(path: &Path) -> PathBuf {
    path.to_path_buf()
}
