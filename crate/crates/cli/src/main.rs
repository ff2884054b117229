use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lnpt_core::data::ScoreSampling;
use lnpt_core::distill::DistillMode;
use lnpt_core::harness::{self, ExperimentConfig, HarnessError, Overrides};
use lnpt_core::pruning::{Criterion, LnptHessian};

#[derive(Parser)]
#[command(name = "lnpt", version, about = "Prune a student at initialization and distill it from a teacher without labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense teacher with true labels.
    TrainTeacher(Common),
    /// Score and mask one student per seed.
    Prune(Common),
    /// Distill each pruned student and write the run summary.
    Distill(Common),
    /// Merge run directories into comparison tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Teacher checkpoint; defaults to `<output>/teacher.ckpt`.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student preset.
    #[arg(long)]
    student: Option<String>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    criterion: Option<Criterion>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed list, comma separated. For train-teacher, the first value seeds the teacher.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    mode: Option<DistillMode>,
    #[arg(long)]
    score_sampling: Option<ScoreSampling>,
    #[arg(long)]
    lnpt_hessian: Option<LnptHessian>,
    /// Output root; `LNPT_OUT` takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output roots of finished runs.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Directory for `long.csv` and `table.csv`.
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Append the bundled published accuracies.
    #[arg(long)]
    reference: bool,
}

impl Common {
    fn config(&self, teacher_stage: bool) -> harness::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.student {
            cfg.student.preset = s.clone();
        }
        let mut seeds = self.seed.clone();
        if teacher_stage {
            if let Some(first) = seeds.take().and_then(|s| s.first().copied()) {
                cfg.teacher.seed = first;
            }
            if let Some(e) = self.epochs {
                cfg.teacher.epochs = e;
            }
        }
        cfg.apply(&Overrides {
            ratio: self.ratio,
            criterion: self.criterion,
            alpha: self.alpha,
            temperature: self.temp,
            epochs: if teacher_stage { None } else { self.epochs },
            seeds,
            mode: self.mode,
            score_sampling: self.score_sampling,
            lnpt_hessian: self.lnpt_hessian,
            output: self.out.clone(),
        })?;
        Ok(cfg)
    }

    fn teacher_path(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.teacher.clone().unwrap_or_else(|| cfg.teacher_path())
    }
}

fn run(cli: Cli) -> harness::Result<()> {
    match cli.command {
        Command::TrainTeacher(c) => {
            let cfg = c.config(true)?;
            let splits = harness::load_splits(&cfg)?;
            let dir = match &c.teacher {
                Some(p) => p.parent().map(PathBuf::from).unwrap_or_default(),
                None => cfg.output.clone(),
            };
            let rep = harness::train_teacher(&cfg, &splits, &dir)?;
            if let Some(p) = &c.teacher {
                if *p != rep.path {
                    std::fs::rename(&rep.path, p).map_err(|e| HarnessError::io(p, e))?;
                }
            }
            println!(
                "teacher {} trained for {} epochs: test accuracy {:.2}%",
                rep.spec.name, cfg.teacher.epochs, rep.test_accuracy
            );
            println!("wrote {}", c.teacher.as_ref().unwrap_or(&rep.path).display());
        }
        Command::Prune(c) => {
            let cfg = c.config(false)?;
            let splits = harness::load_splits(&cfg)?;
            for r in harness::run_prune(&cfg, &splits, &c.teacher_path(&cfg))? {
                println!(
                    "seed {}: kept {}/{} prunable weights (density {:.4}), mask {}",
                    r.seed, r.kept, r.total, r.density, r.checksum
                );
                for l in &r.layers {
                    let tag = if l.prunable { "" } else { " (never pruned)" };
                    println!("  {:<12} {:>8}/{:<8}{tag}", l.name, l.kept, l.total);
                }
            }
        }
        Command::Distill(c) => {
            let cfg = c.config(false)?;
            let splits = harness::load_splits(&cfg)?;
            let s = harness::run_distill(&cfg, &splits, &c.teacher_path(&cfg))?;
            for r in &s.seeds {
                println!(
                    "seed {}: final accuracy {:.2}%, L_m {:.4e} -> {:.4e}",
                    r.seed, r.final_accuracy, r.initial_loss_m, r.final_loss_m
                );
            }
            println!(
                "{} at ratio {}: {:.2} ± {:.2} over {} seeds",
                s.method,
                s.ratio,
                s.mean_accuracy,
                s.std_accuracy,
                s.seeds.len()
            );
        }
        Command::Report(r) => {
            let out = harness::report(&r.runs, &r.out, r.reference)?;
            print!("{}", out.text);
            println!("wrote {} and {}", out.long_csv.display(), out.table_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
