use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use dualcf::pipeline::{configure_threads, grid_assignments, inspect_artifact, load_data, Pipeline};
use dualcf::{run_ablation, run_theory_lab, Error, PipelineConfig, Result, Stage};

#[derive(Parser, Debug)]
#[command(name = "dualcf", version, about = "Aligned sparse + dense collaborative filtering")]
struct Cli {
    /// TOML configuration file; relative data paths resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` applied on top of the configuration file (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log verbosity: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every stage; `--stage` resumes from a stage using persisted upstream artifacts.
    Run {
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Train and evaluate every ablation variant in memory.
    Ablate,
    /// Fit the sparse view on the training matrix.
    TrainSparse,
    /// Propose sparse-view pseudo-positives for the dense view.
    AlignS2d,
    /// Train the dense view on the augmented matrix.
    TrainDense,
    /// Propose dense-view pseudo-positives and refit the sparse view.
    AlignD2s,
    /// Select the fusion weight and evaluate fused and single views.
    FuseEval,
    /// Estimate per-bucket margin SNR and view correlation.
    SnrReport,
    /// Run the full pipeline once per grid point.
    Sweep {
        /// `section.key=v1,v2,...` (repeatable); the grid is their cartesian product.
        #[arg(long, required = true)]
        grid: Vec<String>,
    },
    /// Numerical checks of the fusion SNR analysis.
    TheoryLab,
    /// Print header and summary statistics of artifacts.
    Inspect {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

impl Cli {
    fn config(&self, extra: &[String]) -> Result<PipelineConfig> {
        let mut overrides = self.overrides.clone();
        overrides.extend_from_slice(extra);
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path, &overrides)?,
            None => PipelineConfig::from_toml_str("", Path::new("."), &overrides)?,
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        Ok(cfg)
    }
}

fn single_stage(cli: &Cli, stage: Stage) -> Result<()> {
    let cfg = cli.config(&[])?;
    configure_threads(cfg.threads)?;
    let ds = load_data(&cfg)?;
    let mut p = Pipeline::new(&cfg, &ds)?;
    p.run(stage, stage)?;
    report_state(&p);
    Ok(())
}

fn report_state(p: &Pipeline) {
    if let Some(search) = &p.state.search {
        println!("beta={}", search.best_beta);
    }
    for m in &p.state.metrics {
        for line in m.to_kv().lines() {
            println!("{}.{line}", m.label);
        }
    }
    if let Some(snr) = &p.state.snr {
        print_prefixed("snr", &snr.to_kv());
    }
}

fn print_prefixed(prefix: &str, kv: &str) {
    for line in kv.lines() {
        println!("{prefix}.{line}");
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { stage } => {
            let cfg = cli.config(&[])?;
            configure_threads(cfg.threads)?;
            let ds = load_data(&cfg)?;
            let mut p = Pipeline::new(&cfg, &ds)?;
            p.run(stage.unwrap_or(Stage::Sparse), Stage::Snr)?;
            report_state(&p);
            info!("artifacts in {}", cfg.out_dir.display());
        }
        Command::Ablate => {
            let cfg = cli.config(&[])?;
            configure_threads(cfg.threads)?;
            let ds = load_data(&cfg)?;
            let ab = run_ablation(&cfg, &ds)?;
            let k = cfg.eval.tune_k;
            ab.write(&cfg.out_dir.join("ablation"), k)?;
            print!("{}", ab.to_tsv(k));
            print_prefixed("snr.sad_wo_align", &ab.snr_unaligned.to_kv());
            print_prefixed("snr.sad", &ab.snr_aligned.to_kv());
        }
        Command::TrainSparse => single_stage(cli, Stage::Sparse)?,
        Command::AlignS2d => single_stage(cli, Stage::S2d)?,
        Command::TrainDense => single_stage(cli, Stage::Dense)?,
        Command::AlignD2s => single_stage(cli, Stage::D2s)?,
        Command::FuseEval => single_stage(cli, Stage::Fuse)?,
        Command::SnrReport => single_stage(cli, Stage::Snr)?,
        Command::Sweep { grid } => {
            let base = cli.config(&[])?;
            configure_threads(base.threads)?;
            let ds = load_data(&base)?;
            let combos = grid_assignments(grid)?;
            let k = base.eval.tune_k;
            let mut table = format!("run\tassignment\tbeta\ttuning_recall@{k}\ttest_recall@{k}\n");
            for (n, combo) in combos.iter().enumerate() {
                let mut cfg = cli.config(combo)?;
                cfg.out_dir = base.out_dir.join(format!("sweep/{n:03}"));
                info!("sweep {}/{}: {}", n + 1, combos.len(), combo.join(" "));
                let mut p = Pipeline::new(&cfg, &ds)?;
                p.run(Stage::Sparse, Stage::Fuse)?;
                let search = p.state.search.as_ref().expect("fusion stage ran");
                let tuning = search.curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
                let test = p.state.metrics[0].recall_at(k).unwrap_or(f64::NAN);
                let row = format!("{n:03}\t{}\t{}\t{tuning:.6}\t{test:.6}\n", combo.join(" "), search.best_beta);
                print!("{row}");
                table.push_str(&row);
            }
            fs::create_dir_all(&base.out_dir)?;
            fs::write(base.out_dir.join("sweep.tsv"), table)?;
        }
        Command::TheoryLab => {
            let seed = cli.seed.unwrap_or(2024);
            if let Some(t) = cli.threads {
                configure_threads(t)?;
            }
            let report = run_theory_lab(seed)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("theory.txt"), &text)?;
            }
            if !report.all_passed() {
                let failed = report.checks.iter().filter(|c| !c.passed).count();
                return Err(Error::Verification(format!("{failed} theory check(s) failed")));
            }
        }
        Command::Inspect { paths } => {
            for p in paths {
                print!("{}", inspect_artifact(p)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&std::env::var("RUST_LOG").unwrap_or_else(|_| cli.log.clone()))
        .format_timestamp_secs()
        .init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
