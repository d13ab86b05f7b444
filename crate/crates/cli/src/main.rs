use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cubing_core::basis::eigen_basis;
use cubing_core::cubing::cube_search;
use cubing_core::harness::{
    load_replicate, load_tabular_dataset, prepare_replicate, report, run_baseline, run_replicate, run_study, score_table, Design,
    ExperimentConfig, Variant,
};
use cubing_core::io::{save_dataset_csv, TabularOptions};
use cubing_core::scoring::BaselineJson;
use cubing_core::spatial_sim::{build_cov_matrix, simulate_dataset};
use cubing_core::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cubing", version, about = "Spatial MC dropout experiments with cube-based hyperparameter search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override `seed_root`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Setting number (1-based).
    #[arg(long, default_value_t = 1)]
    setting: usize,
    /// Basis dimension; defaults to the first configured one.
    #[arg(long)]
    m: Option<usize>,
    /// Restrict to one variant (EU, FA or LA).
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, default_value_t = 0)]
    replicate: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one replicate's dataset and write it as CSV.
    Simulate(Common),
    /// Compute the eigenvector basis for one replicate.
    Basis(Common),
    /// Run the Bayesian baseline for one replicate.
    Baseline(Common),
    /// Train and score the hyperparameter grid for one replicate.
    Grid(Common),
    /// Run the cube search on a persisted replicate.
    Cube(Common),
    /// Run every missing replicate and write the reports.
    Study(Common),
    /// Regenerate reports from persisted replicates.
    Report(Common),
    /// Validate a tabular dataset and print a summary.
    Load {
        #[command(flatten)]
        common: Common,
        /// Input CSV.
        #[arg(long)]
        input: PathBuf,
        /// Replace the response by its natural logarithm.
        #[arg(long)]
        log_response: bool,
        /// Draw a fresh split with this training fraction.
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    setting: usize,
    m: usize,
    replicate: usize,
}

impl Common {
    fn resolve(&self) -> Result<Ctx> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed_root = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(v) = self.variant {
            cfg.variants = vec![v];
        }
        if let Some(m) = self.m {
            if !cfg.basis_dims.contains(&m) {
                cfg.basis_dims = vec![m];
            }
        }
        cfg.validate()?;
        if self.setting == 0 || self.setting > cfg.settings.len() {
            return Err(Error::IndexOutOfRange { index: self.setting, len: cfg.settings.len() });
        }
        if self.replicate >= cfg.replicates {
            return Err(Error::IndexOutOfRange { index: self.replicate, len: cfg.replicates });
        }
        let m = self.m.unwrap_or(cfg.basis_dims[0]);
        Ok(Ctx { cfg, setting: self.setting - 1, m, replicate: self.replicate })
    }
}

fn print(value: serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let ctx = c.resolve()?;
            let sim = ctx.cfg.sim_for(ctx.setting, ctx.replicate)?;
            let ds = simulate_dataset::<f64>(&sim)?;
            fs::create_dir_all(&ctx.cfg.output_dir)?;
            let path = ctx.cfg.output_dir.join(format!("setting{}_rep{}_dataset.csv", ctx.setting + 1, ctx.replicate));
            save_dataset_csv(&path, &ds)?;
            print(json!({ "path": path, "n_total": ds.len(), "n_train": ds.split.train.len(), "seed": sim.seed }))
        }
        Command::Basis(c) => {
            let ctx = c.resolve()?;
            let sim = ctx.cfg.sim_for(ctx.setting, ctx.replicate)?;
            let ds = simulate_dataset::<f64>(&sim)?;
            let cov = build_cov_matrix(ds.locations.view(), &sim.matern()?)?;
            let basis = eigen_basis(cov.view(), ctx.m)?;
            fs::create_dir_all(&ctx.cfg.output_dir)?;
            let path = ctx.cfg.output_dir.join(format!("setting{}_rep{}_m{}_basis.bin", ctx.setting + 1, ctx.replicate, ctx.m));
            basis.save(&path)?;
            let ev: Vec<f64> = basis.eigenvalues.iter().copied().take(10).collect();
            print(json!({ "path": path, "m": ctx.m, "leading_eigenvalues": ev }))
        }
        Command::Baseline(c) => {
            let ctx = c.resolve()?;
            let data = prepare_replicate(&ctx.cfg, ctx.setting, ctx.replicate)?;
            let design = Design::new(&data, ctx.m)?;
            let rec = run_baseline(&ctx.cfg, &design, ctx.cfg.model_seed(ctx.setting, ctx.m, ctx.replicate))?;
            let dir = ctx.cfg.replicate_dir(ctx.setting, ctx.m, ctx.replicate);
            fs::create_dir_all(&dir)?;
            let b = BaselineJson::from(&rec);
            let mut w = BufWriter::new(File::create(dir.join("baseline.json"))?);
            serde_json::to_writer_pretty(&mut w, &b)?;
            writeln!(w)?;
            w.flush()?;
            print(serde_json::to_value(b)?)
        }
        Command::Grid(c) => {
            let ctx = c.resolve()?;
            let out = run_replicate(&ctx.cfg, ctx.setting, ctx.m, ctx.replicate, None)?;
            let best: Vec<_> = out
                .scores
                .iter()
                .map(|(v, rows)| {
                    let r = rows.iter().min_by(|a, b| a.mis.total_cmp(&b.mis)).expect("non-empty grid");
                    json!({ "variant": v, "best_mis": r.mis, "lambda": r.lambda, "dropout": r.dropout, "k": r.k })
                })
                .collect();
            print(json!({
                "dir": ctx.cfg.replicate_dir(ctx.setting, ctx.m, ctx.replicate),
                "baseline": out.baseline,
                "best": best,
            }))
        }
        Command::Cube(c) => {
            let ctx = c.resolve()?;
            let rep = load_replicate(&ctx.cfg, ctx.setting, ctx.m, ctx.replicate)?;
            let mut summary = Vec::new();
            for (v, rows) in &rep.scores {
                let table = score_table(&ctx.cfg.grid, rows, rep.baseline.mis)?;
                let result = cube_search(&table, &ctx.cfg.cube)?;
                let path = ctx.cfg.replicate_dir(ctx.setting, ctx.m, ctx.replicate).join(v.name()).join("cube_log.jsonl");
                let mut w = BufWriter::new(File::create(&path)?);
                result.write_jsonl(&mut w)?;
                w.flush()?;
                let top: Vec<_> = result
                    .ranked
                    .iter()
                    .map(|c| json!({ "id": c.id, "depth": c.depth, "bounds": cubing_core::cubing::LogBounds::from(&c.bounds), "o": c.stats.map(|s| s.o) }))
                    .collect();
                summary.push(json!({ "variant": v, "rounds": result.rounds, "finished": result.finished, "log": path, "top": top }));
            }
            print(json!(summary))
        }
        Command::Study(c) => {
            let ctx = c.resolve()?;
            let files = run_study(&ctx.cfg)?;
            print(json!({ "written": files }))
        }
        Command::Report(c) => {
            let ctx = c.resolve()?;
            let files = report(&ctx.cfg)?;
            print(json!({ "written": files }))
        }
        Command::Load { common, input, log_response, train_fraction, split_seed } => {
            let ctx = common.resolve()?;
            let opts = TabularOptions { log_response, resplit: train_fraction.map(|f| (f, split_seed)) };
            let ds = load_tabular_dataset(&input, &opts)?;
            fs::create_dir_all(&ctx.cfg.output_dir)?;
            let path = ctx.cfg.output_dir.join("loaded_dataset.csv");
            save_dataset_csv(&path, &ds)?;
            print(json!({
                "path": path,
                "n_total": ds.len(),
                "n_train": ds.split.train.len(),
                "n_test": ds.split.test.len(),
                "n_covariates": ds.n_covariates(),
            }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
