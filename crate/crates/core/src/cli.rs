//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{RunConfig, Scale};
use crate::data::{load_dataset, write_dataset, DatasetManifest, SynthClass, SynthKind, SyntheticTextureSpec};
use crate::ensemble::{AggregatorKind, MethodSelection};
use crate::error::{Error, Result};
use crate::experiments::report::{self, AblationRow};
use crate::experiments::{ensure_splits, rf_importance, run_ablation, run_selection, ImportanceReport};
use crate::gradcheck::{layer_suite, GradCheckConfig};
use crate::training::{aggregate, append_metrics};

#[derive(Debug, Parser)]
#[command(name = "texton", version, about = "Texture-extraction ensembles: training, ablation and feature importance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one method selection on every split of a dataset.
    Train(RunArgs),
    /// Train all fifteen method selections.
    Ablate(RunArgs),
    /// Random-forest method importance from an ablation table.
    Importance(ImportanceArgs),
    /// Write a synthetic texture dataset.
    Synth(SynthArgs),
    /// Check every layer's gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Importance table and chart for an existing results directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file with `section.key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root (one directory per class).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "TEXTON_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Comma-separated subset of deepten,gap,histogram,fap.
    #[arg(long)]
    pub methods: Option<String>,
    /// concat or bilinear.
    #[arg(long)]
    pub aggregator: Option<String>,
    /// Base preset: paper or desk.
    #[arg(long)]
    pub scale: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    /// Ablation table; defaults to `ablation.csv` in the output directory.
    #[arg(long)]
    pub accuracies: Option<PathBuf>,
    #[arg(long, env = "TEXTON_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub trees: usize,
    /// Forest seeds 0..N.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, env = "TEXTON_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated `name=kind` classes, e.g. `smooth=fbm:0.8,rough=fbm:0.2`.
    /// Defaults to four easy families.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 128)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results directory holding `ablation.csv`.
    #[arg(long, env = "TEXTON_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub trees: usize,
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
}

const DEFAULT_OUT: &str = "results";

/// Metadata written next to every result set.
#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    workers: usize,
    dataset: Option<String>,
    /// Resolved configuration in config-file syntax; feeding it back with
    /// `--config` reproduces the run.
    config: String,
    result: T,
}

fn write_record<T: Serialize>(dir: &Path, command: &str, cfg: &RunConfig, result: T) -> Result<()> {
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        workers: cfg.workers,
        dataset: cfg.data.dataset.as_ref().map(|p| p.display().to_string()),
        config: cfg.to_text(),
        result,
    };
    report::write_json(&dir.join("run.json"), &record)
}

fn out_dir(flag: Option<&PathBuf>, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = flag.cloned().or_else(|| cfg.and_then(|c| c.output.clone())).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

impl RunArgs {
    /// File, then flags, then `--set` overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let scale: Option<Scale> = self.scale.as_deref().map(str::parse).transpose()?;
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path, scale)?,
            None => RunConfig::preset(scale.unwrap_or_default()),
        };
        if let Some(p) = &self.dataset {
            cfg.data.dataset = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.output = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(m) = &self.methods {
            cfg.model.selection = m.parse::<MethodSelection>()?;
        }
        if let Some(a) = &self.aggregator {
            cfg.model.aggregator = a.parse::<AggregatorKind>()?;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_with_splits(cfg: &RunConfig) -> Result<(DatasetManifest, String)> {
    let root = cfg.data.dataset.as_ref().ok_or_else(|| Error::Config("no dataset given (--dataset or data.dataset)".into()))?;
    let mut manifest = load_dataset(root)?;
    if manifest.n_classes() < 2 {
        return Err(Error::InvalidArgument(format!("{} has fewer than two classes", root.display())));
    }
    ensure_splits(&mut manifest, cfg)?;
    let name = root.file_name().map_or_else(|| root.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok((manifest, name))
}

fn prepare(args: &RunArgs) -> Result<(RunConfig, PathBuf, DatasetManifest, String)> {
    let cfg = args.resolve()?;
    let out = out_dir(None, Some(&cfg))?;
    let (manifest, name) = load_with_splits(&cfg)?;
    log::info!("{name}: {} images, {} classes, {} split(s)", manifest.len(), manifest.n_classes(), manifest.splits.len());
    std::fs::write(out.join("config.resolved"), cfg.to_text()).map_err(|e| Error::io(out.join("config.resolved"), e))?;
    Ok((cfg, out, manifest, name))
}

fn fresh_file(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    selection: String,
    split_accuracies: Vec<f64>,
    mean_acc: f64,
    std_acc: f64,
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let (cfg, out, manifest, _) = prepare(args)?;
    let run = run_selection(&manifest, &cfg, cfg.model.selection)?;
    let metrics = out.join("metrics.csv");
    fresh_file(&metrics)?;
    for s in &run.splits {
        append_metrics(&metrics, &s.run_id, &s.history)?;
    }
    let accs = run.accuracies();
    let (mean, std) = aggregate(&accs)?;
    println!("{}: {mean:.2} +- {std:.2} over {} split(s)", cfg.model.selection, accs.len());
    let summary = TrainSummary { selection: cfg.model.selection.to_string(), split_accuracies: accs, mean_acc: mean, std_acc: std };
    write_record(&out, "train", &cfg, summary)
}

fn importance_of(rows: &[AblationRow], trees: usize, seeds: &[u64]) -> Result<ImportanceReport> {
    let design: Vec<_> = rows.iter().filter(|r| r.mean_acc.is_finite()).map(|r| (r.selection.methods(), r.mean_acc)).collect();
    if design.len() < rows.len() {
        log::warn!("{} cell(s) without an accuracy left out of the importance analysis", rows.len() - design.len());
    }
    rf_importance(&design, trees, seeds)
}

fn emit_importance(out: &Path, report: &ImportanceReport) -> Result<()> {
    report::write_importance_csv(&out.join("importance.csv"), report)?;
    report::write_importance_svg(&out.join("importance.svg"), report)?;
    report::write_json(&out.join("importance.json"), report)?;
    let ranking: Vec<&str> = report.ranking.iter().map(|m| m.name()).collect();
    println!("ranking: {} ({} of {} seeds)", ranking.join(" > "), report.ranking_votes, report.seeds.len());
    for &m in &report.ranking {
        println!("  {:<10} {:.4}", m.name(), report.importance(m));
    }
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let (cfg, out, manifest, name) = prepare(args)?;
    let result = run_ablation(&manifest, &cfg, &name, Some(&out.join("checkpoints")))?;
    let rows: Vec<AblationRow> = result.cells.iter().map(AblationRow::from).collect();
    report::write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    let metrics = out.join("metrics.csv");
    fresh_file(&metrics)?;
    for run in result.runs.iter().flatten() {
        for s in &run.splits {
            append_metrics(&metrics, &s.run_id, &s.history)?;
        }
    }
    for c in &result.cells {
        let mark = if c.proposed { " *" } else { "" };
        match &c.error {
            None => println!("{:<28} {:6.2} +- {:5.2}{mark}", c.selection.to_string(), c.mean, c.std),
            Some(e) => println!("{:<28} failed: {e}", c.selection.to_string()),
        }
    }
    let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
    if failed < result.cells.len() {
        let report = importance_of(&rows, cfg.forest.n_trees, &cfg.forest.seeds)?;
        emit_importance(&out, &report)?;
    }
    write_record(&out, "ablate", &cfg, &result.cells)?;
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} of {} cells failed", result.cells.len())));
    }
    Ok(())
}

fn forest_record(trees: usize, seeds: &[u64]) -> RunConfig {
    let mut cfg = RunConfig::preset(Scale::Paper);
    cfg.forest.n_trees = trees;
    cfg.forest.seeds = seeds.to_vec();
    cfg
}

fn cmd_importance(args: &ImportanceArgs) -> Result<()> {
    let out = out_dir(args.out.as_ref(), None)?;
    let table = args.accuracies.clone().unwrap_or_else(|| out.join("ablation.csv"));
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let rows = report::read_ablation_csv(&table)?;
    let report = importance_of(&rows, args.trees, &seeds)?;
    emit_importance(&out, &report)?;
    write_record(&out, "importance", &forest_record(args.trees, &seeds), &report)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let out = out_dir(args.out.as_ref(), None)?;
    let rows = report::read_ablation_csv(&out.join("ablation.csv"))?;
    for r in &rows {
        let spread = r.std_acc.map(|s| format!(" +- {s:.2}")).unwrap_or_default();
        println!("{:<28} {:6.2}{spread}", r.selection.to_string(), r.mean_acc);
    }
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let report = importance_of(&rows, args.trees, &seeds)?;
    emit_importance(&out, &report)
}

fn parse_classes(text: &str) -> Result<Vec<SynthClass>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (name, kind) = item.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("class '{item}' is not NAME=KIND")))?;
            Ok(SynthClass { name: name.trim().to_string(), kind: kind.parse::<SynthKind>()? })
        })
        .collect()
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let out = out_dir(args.out.as_ref(), None)?;
    let mut spec = SyntheticTextureSpec::easy(args.per_class, args.size, args.seed);
    if let Some(c) = &args.classes {
        spec.classes = parse_classes(c)?;
    }
    if let Some(n) = args.noise {
        spec.noise_std = n;
    }
    let manifest = spec.generate()?;
    write_dataset(&manifest, &out)?;
    report::write_json(&out.join("synth.json"), &spec)?;
    println!("wrote {} images in {} classes to {}", manifest.len(), manifest.n_classes(), out.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig { max_coords: args.coords, tolerance: args.tolerance, seed: args.seed, ..Default::default() };
    let reports = layer_suite(&cfg)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<16} {status:<4} max rel err {:.3e} over {} coords", r.name, r.max_rel_error, r.coords_checked);
        if !r.passed() {
            if let Some(f) = &r.failure {
                println!("    {f}");
            } else if let Some(w) = &r.worst {
                println!("    worst at {w}");
            }
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Importance(a) => cmd_importance(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report(a) => cmd_report(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("texton").chain(args.iter().copied()))
    }

    #[test]
    fn flags_override_the_preset() {
        let cli = parse(&["train", "--scale", "desk", "--seed", "7", "--methods", "gap,fap", "--set", "train.epochs=2"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let cfg = a.resolve().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.model.selection.to_string(), "gap,fap");
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(parse(&["frobnicate"]).is_err());
        assert!(parse(&["train", "--no-such-flag"]).is_err());
        let Command::Train(a) = parse(&["train", "--aggregator", "bilinear"]).unwrap().command else { panic!() };
        assert!(a.resolve().is_err());
    }

    #[test]
    fn class_list() {
        let c = parse_classes("smooth=fbm:0.8, rough=fbm:0.2").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].name, "rough");
        assert!(parse_classes("smooth").is_err());
    }
}
