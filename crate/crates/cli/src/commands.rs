//! `synth`, `filter`, `report` and `checkgrad`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use sgcd::dataset::{generate_synthetic, load_bundle, load_dictionary, save_bundle, save_dictionary, SyntheticConfig};
use sgcd::losses::KdMode;
use sgcd::pipeline::filter_teacher;
use sgcd::spectral::{save_report, EigenMode, SpectralReport};
use sgcd::trainer::{check_gradients, GradCheckOptions, TrainConfig};
use sgcd::{Error, Result};

use crate::config::{resolve, ConfigFile, FilterConfig, Overrides};
use crate::manifest::{create_dir, manifest_beside, write_json, RunManifest, Runtime};

/// Analytic gradients must agree with finite differences to this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for teacher/student bundles, dictionaries and truth.json.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    n_concepts: Option<usize>,
    /// Concepts that carry class signal; the rest are distractors.
    #[arg(long)]
    n_relevant: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    n_views: Option<usize>,
    /// Fraction of Old-class samples that are labeled.
    #[arg(long)]
    label_fraction: Option<f64>,
    /// Fraction of classes that are Old.
    #[arg(long)]
    old_fraction: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    student_noise: Option<f64>,
    #[arg(long)]
    student_gap: Option<f64>,
    #[arg(long)]
    student_jitter: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn synth(args: &SynthArgs, file: &ConfigFile, rt: &Runtime) -> Result<()> {
    let mut flags = Overrides::default();
    flags
        .set("n_samples", args.n_samples)
        .set("n_classes", args.n_classes)
        .set("n_concepts", args.n_concepts)
        .set("n_relevant", args.n_relevant)
        .set("embed_dim", args.embed_dim)
        .set("n_views", args.n_views)
        .set("label_fraction", args.label_fraction)
        .set("old_fraction", args.old_fraction)
        .set("noise_scale", args.noise_scale)
        .set("student_noise", args.student_noise)
        .set("student_gap", args.student_gap)
        .set("student_jitter", args.student_jitter)
        .set("seed", args.seed);
    let (cfg, recorded) = resolve(&SyntheticConfig::default(), file.section("synth"), &flags)?;
    let data = generate_synthetic(&cfg)?;

    let dir = &args.out_dir;
    create_dir(dir)?;
    let mut run = RunManifest::new("synth", recorded, Some(cfg.seed), rt);
    for (name, bundle) in [("teacher.bundle", &data.teacher), ("student.bundle", &data.student)] {
        let p = dir.join(name);
        save_bundle(bundle, &p)?;
        run.output(&p);
    }
    for (name, dict) in [("teacher.dict", &data.teacher_dict), ("student.dict", &data.student_dict)] {
        let p = dir.join(name);
        save_dictionary(dict, &p)?;
        run.output(&p);
    }
    let truth = dir.join("truth.json");
    write_json(&truth, &data.truth)?;
    run.output(&truth);
    run.write(&dir.join("run.json"))?;
    println!(
        "wrote {} samples, {} classes ({} old), {} concepts ({} relevant) to {}",
        cfg.n_samples,
        cfg.n_classes,
        cfg.n_old(),
        cfg.n_concepts,
        cfg.n_relevant,
        dir.display()
    );
    Ok(())
}

/// Threshold flags shared by `filter` and `report --sweep`.
#[derive(Debug, Args)]
pub struct FilterFlags {
    /// Explained-variance threshold for the number of eigenvectors kept.
    #[arg(long)]
    beta_e: Option<f64>,
    /// Cumulative-importance threshold for the retained concepts.
    #[arg(long)]
    beta_c: Option<f64>,
    /// CLIP logit temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Use the low-rank eigensolver with this many leading pairs.
    #[arg(long, value_name = "K")]
    top_k: Option<usize>,
}

impl FilterFlags {
    fn resolve(&self, file: &ConfigFile) -> Result<(FilterConfig, serde_json::Value)> {
        let mut flags = Overrides::default();
        flags
            .set("beta_e", self.beta_e)
            .set("beta_c", self.beta_c)
            .set("tau", self.tau)
            .set("top_k", self.top_k);
        resolve(&FilterConfig::default(), file.section("filter"), &flags)
    }
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long, value_name = "BUNDLE")]
    teacher: PathBuf,
    /// Teacher concept dictionary.
    #[arg(long, value_name = "DICT")]
    dict: PathBuf,
    /// Report path; the payload goes to `<out>.bin`.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    thresholds: FilterFlags,
}

fn run_filter(teacher: &Path, dict: &Path, cfg: &FilterConfig) -> Result<SpectralReport> {
    let teacher = load_bundle(teacher)?;
    let dict = load_dictionary(dict)?;
    filter_teacher(&teacher, &dict, cfg.tau, cfg.beta_e, cfg.beta_c, EigenMode::from_top_k(cfg.top_k))
}

pub fn filter(args: &FilterArgs, file: &ConfigFile, rt: &Runtime) -> Result<()> {
    let (cfg, recorded) = args.thresholds.resolve(file)?;
    let report = run_filter(&args.teacher, &args.dict, &cfg)?;
    save_report(&report, &args.out)?;
    let mut run = RunManifest::new("filter", recorded, None, rt);
    run.input("teacher", &args.teacher)?;
    run.input("dictionary", &args.dict)?;
    run.output(&args.out);
    run.write(&manifest_beside(&args.out))?;
    println!(
        "k* = {} ({:.4} of variance), retained {} of {} concepts -> {}",
        report.k_star,
        report.explained_variance(),
        report.retained_indices.len(),
        report.m_concepts(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Eval JSON files, one table row each.
    #[arg(long = "eval", value_name = "FILE")]
    evals: Vec<PathBuf>,
    /// Threshold sweep such as `beta_c=0.9,0.95,0.99`; needs --teacher and --dict.
    #[arg(long, value_name = "PARAM=V1,V2,...")]
    sweep: Option<String>,
    #[arg(long, value_name = "BUNDLE", requires = "sweep")]
    teacher: Option<PathBuf>,
    #[arg(long, value_name = "DICT", requires = "sweep")]
    dict: Option<PathBuf>,
    #[command(flatten)]
    thresholds: FilterFlags,
    /// Also write the rendered table here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// The fields of an eval report that the table shows.
#[derive(Debug, Deserialize)]
struct EvalRow {
    acc_all: f64,
    acc_old: f64,
    acc_new: f64,
    spearman_mean: f64,
}

fn parse_sweep(text: &str) -> Result<(String, Vec<f64>)> {
    let bad = || Error::Invalid(format!("--sweep expects beta_e=... or beta_c=... with comma-separated values, got {text:?}"));
    let (param, values) = text.split_once('=').ok_or_else(bad)?;
    let param = param.trim().replace('-', "_");
    if param != "beta_e" && param != "beta_c" {
        return Err(bad());
    }
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(bad());
    }
    Ok((param, values))
}

fn eval_table(paths: &[PathBuf]) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{:<28} {:>7} {:>7} {:>7} {:>9}", "run", "All", "Old", "New", "Spearman").unwrap();
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let row: EvalRow = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        writeln!(
            out,
            "{:<28} {:>7.1} {:>7.1} {:>7.1} {:>9.3}",
            name,
            100.0 * row.acc_all,
            100.0 * row.acc_old,
            100.0 * row.acc_new,
            row.spearman_mean
        )
        .unwrap();
    }
    Ok(out)
}

fn sweep_table(teacher: &Path, dict: &Path, base: &FilterConfig, param: &str, values: &[f64]) -> Result<String> {
    let teacher = load_bundle(teacher)?;
    let dict = load_dictionary(dict)?;
    let mut out = String::new();
    writeln!(out, "{:>7} {:>7} {:>6} {:>9} {:>9} {:>7}", "beta_e", "beta_c", "k*", "explained", "retained", "of").unwrap();
    for &v in values {
        let mut cfg = base.clone();
        if param == "beta_e" {
            cfg.beta_e = v;
        } else {
            cfg.beta_c = v;
        }
        let r = filter_teacher(&teacher, &dict, cfg.tau, cfg.beta_e, cfg.beta_c, EigenMode::from_top_k(cfg.top_k))?;
        writeln!(
            out,
            "{:>7} {:>7} {:>6} {:>9.4} {:>9} {:>7}",
            cfg.beta_e,
            cfg.beta_c,
            r.k_star,
            r.explained_variance(),
            r.retained_indices.len(),
            r.m_concepts()
        )
        .unwrap();
    }
    Ok(out)
}

pub fn report(args: &ReportArgs, file: &ConfigFile, rt: &Runtime) -> Result<()> {
    if args.evals.is_empty() && args.sweep.is_none() {
        return Err(Error::Invalid("report needs --eval files or a --sweep".into()));
    }
    let (base, recorded) = args.thresholds.resolve(file)?;
    let mut text = String::new();
    let mut run = RunManifest::new("report", recorded, None, rt);
    if !args.evals.is_empty() {
        text.push_str(&eval_table(&args.evals)?);
        for p in &args.evals {
            run.input("eval", p)?;
        }
    }
    if let Some(sweep) = &args.sweep {
        let (param, values) = parse_sweep(sweep)?;
        let (Some(teacher), Some(dict)) = (&args.teacher, &args.dict) else {
            return Err(Error::Invalid("--sweep needs --teacher and --dict".into()));
        };
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&sweep_table(teacher, dict, &base, &param, &values)?);
        run.input("teacher", teacher)?;
        run.input("dictionary", dict)?;
    }
    print!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, &text).map_err(|e| Error::io(out, e))?;
        run.output(out);
        run.write(&manifest_beside(out))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct CheckgradArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Distillation directions: both, forward, reverse or none.
    #[arg(long)]
    kd: Option<KdMode>,
    #[arg(long)]
    symmetric_unsup_con: bool,
    /// Perturb the analytic gradients to confirm the check can fail.
    #[arg(long, hide = true)]
    corrupt: bool,
    /// Write the per-term report as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub fn checkgrad(args: &CheckgradArgs, file: &ConfigFile, rt: &Runtime) -> Result<()> {
    let mut flags = Overrides::default();
    flags
        .set("lambda", args.lambda)
        .set("epsilon", args.epsilon)
        .set("kd", args.kd)
        .set("symmetric_unsup_con", args.symmetric_unsup_con.then_some(true));
    let (cfg, recorded) = resolve(&TrainConfig::default(), file.section("train"), &flags)?;
    let seed = args.seed.unwrap_or(0);
    let report = check_gradients(
        &cfg.loss,
        GradCheckOptions {
            seed,
            corrupt: args.corrupt,
        },
    )?;
    for t in &report.terms {
        let worst = t.tensors.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map_or("-", |(n, _)| n.as_str());
        println!("{:<12} {:>10.3e}  (worst tensor {worst})", t.term, t.max_rel_error);
    }
    println!("max relative error {:.3e} (tolerance {GRAD_TOLERANCE:.0e})", report.max_rel_error);
    if let Some(out) = &args.out {
        write_json(out, &report)?;
        let mut run = RunManifest::new("checkgrad", recorded, Some(seed), rt);
        run.output(out);
        run.write(&manifest_beside(out))?;
    }
    if report.max_rel_error.is_finite() && report.max_rel_error < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:.3e} >= {GRAD_TOLERANCE:.0e}",
            report.max_rel_error
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_specs() {
        assert_eq!(parse_sweep("beta_c=0.9,0.95").unwrap(), ("beta_c".into(), vec![0.9, 0.95]));
        assert_eq!(parse_sweep("beta-e= 0.8").unwrap().0, "beta_e");
        assert!(parse_sweep("lambda=0.3").is_err());
        assert!(parse_sweep("beta_c").is_err());
        assert!(parse_sweep("beta_c=0.9,x").is_err());
    }
}
