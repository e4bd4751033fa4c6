use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use firenet::data::{self, AugmentPlan, Split, SynthSpec};
use firenet::harness::{self, ExperimentConfig, InputSize, TrainOptions, TransferOptions};
use firenet::metrics::{self, Metric, ReportedPercentages};
use firenet::nn::count_params;
use firenet::zoo::{self, ModelId};
use firenet::{Error, Result};

#[derive(Parser)]
#[command(name = "firenet", version, about = "Wildfire image classifiers: training, evaluation and reports")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory [default: runs/<model>_seed<seed>]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on one split of a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        /// Input size HxW [default: from the run's config.json]
        #[arg(long)]
        input: Option<InputSize>,
    },
    /// Print parameter counts.
    Params {
        #[arg(long)]
        model: ModelId,
        /// Input size HxW [default: the model's reference size]
        #[arg(long)]
        input: Option<InputSize>,
    },
    /// Apply a sampled augmentation plan to every image in a directory.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `standard` or e.g. rotate=20,translate=0.1,scale=0.9:1.1,brightness=0.2,noise=0.05
        #[arg(long)]
        ops: AugmentPlan,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic fire / non-fire corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        size: InputSize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-trained versus from-scratch comparison over seeds.
    Transfer {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Recover a confusion matrix from published counts and percentages.
    Reconcile {
        #[arg(long)]
        tp: u64,
        #[arg(long)]
        pos: u64,
        #[arg(long)]
        neg: u64,
        #[arg(long)]
        acc: f64,
        #[arg(long)]
        prec: f64,
        #[arg(long)]
        rec: f64,
    },
    /// Comparison tables over run directories.
    Report {
        #[arg(long, num_args = 1.., required_unless_present = "reference")]
        runs: Vec<PathBuf>,
        /// Tabulate the published results instead of local runs.
        #[arg(long, conflicts_with = "runs")]
        reference: bool,
        /// Also write the CSV form here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn pct(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| format!("{:.2}%", v * 100.0))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out, quiet } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}_seed{}", cfg.model_id, cfg.seed))
            });
            let art = harness::train(
                &cfg,
                &TrainOptions {
                    out_dir: Some(out.clone()),
                    stop_at_train_accuracy: None,
                    verbose: !quiet,
                },
            )?;
            println!("run directory {}", out.display());
            println!("best epoch {}", art.best_epoch);
            for (split, cm) in &art.final_confusion {
                println!("{split}: {cm}  accuracy {}", pct(metrics::derive(cm).accuracy));
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            input,
        } => {
            let split: Split = split.parse()?;
            let ev = harness::evaluate(&checkpoint, &data, split, input)?;
            println!("{} {}: {}", ev.model_id, ev.split, ev.confusion);
            for m in Metric::ALL {
                println!("{:<9} {}", m.as_str(), pct(ev.metrics.get(m)));
            }
        }
        Command::Params { model, input } => {
            let shape = input.map_or(model.default_input(), |i| i.shape());
            let spec = zoo::build(model, shape)?;
            let count = count_params(&spec)?;
            println!("{} ({}) input {}x{}x{}", model, model.display_name(), shape[0], shape[1], shape[2]);
            println!("total {}", thousands(count.total));
            println!("trainable {}", thousands(count.trainable));
            println!("frozen {}", thousands(count.frozen));
        }
        Command::Augment {
            input,
            out,
            ops,
            seed,
        } => {
            let n = augment_dir(&input, &out, &ops, seed)?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::Synth {
            out,
            per_class,
            size,
            seed,
        } => {
            let manifest = data::write_synth(
                &out,
                &SynthSpec {
                    per_class,
                    height: size.height,
                    width: size.width,
                    seed,
                },
            )?;
            for split in Split::ALL {
                println!("{split}: {} images", manifest.split_len(split));
            }
        }
        Command::Transfer {
            source,
            target,
            seeds,
            out,
            quiet,
        } => {
            let report = harness::transfer_experiment(
                &ExperimentConfig::load(&source)?,
                &ExperimentConfig::load(&target)?,
                &seeds,
                &TransferOptions {
                    out_dir: out,
                    verbose: !quiet,
                },
            )?;
            print!("{}", report.to_text());
        }
        Command::Reconcile {
            tp,
            pos,
            neg,
            acc,
            prec,
            rec,
        } => {
            let cm = metrics::reconcile(
                tp,
                (pos, neg),
                ReportedPercentages {
                    accuracy: acc,
                    precision: prec,
                    recall: rec,
                },
            )?;
            println!("{cm}");
        }
        Command::Report { runs, reference, csv } => {
            let table = if reference {
                harness::reference_report()?
            } else {
                harness::report(&runs)?
            };
            print!("{}", table.to_text());
            if let Some(path) = csv {
                fs::write(&path, table.to_csv()).map_err(|e| Error::Storage { path, source: e })?;
            }
        }
    }
    Ok(())
}

fn augment_dir(input: &Path, out: &Path, plan: &AugmentPlan, seed: u64) -> Result<usize> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::Storage { path: p, source: e }
    };
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(io(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no png or ppm images in {}", input.display())));
    }
    files.sort();
    fs::create_dir_all(out).map_err(io(out))?;
    for (i, path) in files.iter().enumerate() {
        let img = data::read_image(path)?;
        let aug = plan.apply(&img, data::mix(seed, i as u64))?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        data::write_png(&aug, &out.join(format!("{stem}.png")))?;
    }
    Ok(files.len())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
