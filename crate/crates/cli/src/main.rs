use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use evomd::baselines::{self, Hyperparams, Model, ModelKind};
use evomd::bins::BinEdges;
use evomd::dataset::{
    self, DatasetRecord, HistoryRange, InstructionRecord, PredictionSample, Split, Task, TemplateSet,
};
use evomd::eval::{self, EvalReport, PredictionEntry, ScoreConfig};
use evomd::event_stream::{self, FilterBand, MolecularEvent, StageCounts};
use evomd::jsonl;
use evomd::kmc::{self, ReactionNetwork};
use evomd::pipeline::{self, PipelineConfig, PipelineError};
use evomd::seed;
use evomd::trajectory_io::{self, BondThreshold};
use evomd::Error;

#[derive(Parser)]
#[command(name = "evomd", version, about = "Reactive MD frames to species event datasets, baselines and scores")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// Root seed.
    #[arg(long, env = seed::SEED_ENV, default_value_t = seed::DEFAULT_ROOT_SEED)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a frames file and write per-trajectory manifests.
    Ingest {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        bo_min: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract species events from frames.
    Extract {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        bo_min: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep events whose duration lies in [tau-min, tau-max].
    Filter {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 10)]
        tau_min: u64,
        #[arg(long, default_value_t = 500)]
        tau_max: u64,
        #[arg(long)]
        out: PathBuf,
        /// Stage report as JSON; also printed as text.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Cap every (species, duration bin) stratum.
    Balance {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [10u64, 50, 150, 500])]
        bins: Vec<u64>,
        #[arg(long, default_value_t = 200)]
        cap: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build sliding-window samples for one task.
    Windows {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 3)]
        history_min: usize,
        #[arg(long, default_value_t = 5)]
        history_max: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trajectory-disjoint train/test split.
    Split {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_frac: f64,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render split samples as instruction records.
    Format {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interleave Q&A records into a dataset.
    Mix {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        /// Q&A records per forecast record.
        #[arg(long)]
        ratio: f64,
        /// Mix only train-split forecast records.
        #[arg(long)]
        train_only: bool,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic trajectories from a reaction network.
    Simulate {
        #[arg(long)]
        network: PathBuf,
        #[arg(long, default_value_t = 10)]
        trajectories: usize,
        #[arg(long, default_value_t = 1000)]
        events_per: usize,
        #[command(flatten)]
        seed: SeedArg,
        /// Output file; frames or events depending on --format.
        #[arg(long)]
        out: PathBuf,
        /// Defaults to events when the file name mentions events, else frames.
        #[arg(long, value_enum)]
        format: Option<SimFormat>,
    },
    /// Fit or apply a baseline model.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Score a prediction file against a dataset.
    Eval {
        #[arg(long)]
        task: Task,
        /// One file per run; several files add a mean/std summary.
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        /// Dataset JSONL with test-split records.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 50)]
        dur_tol: u64,
        #[arg(long, default_value = "eval")]
        out_dir: PathBuf,
    },
    /// Run every stage from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the SHA-256 of each built-in template.
    Templates,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimFormat {
    Frames,
    Events,
}

#[derive(Subcommand)]
enum BaselineCommand {
    Fit {
        /// Split samples (JSONL); train-split samples of --task are used.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value = "forward_1")]
        task: Task,
        #[arg(long, default_value = "markov")]
        kind: ModelKind,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-3)]
        lambda: f64,
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [10u64, 50, 150, 500])]
        bins: Vec<u64>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Split samples (JSONL); test-split samples of --task are predicted.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| {
        PipelineError::Io {
            path: path.to_owned(),
            source,
        }
        .into()
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    PipelineError::Invalid(msg.into()).into()
}

fn threshold(bo_min: f64) -> Result<BondThreshold, Error> {
    Ok(BondThreshold::new(bo_min)?)
}

fn select(samples: &[PredictionSample], task: Task, split: Split) -> Vec<&PredictionSample> {
    samples
        .iter()
        .filter(|s| s.task == task && s.split == Some(split))
        .collect()
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Ingest { frames, bo_min, out } => {
            let manifests = trajectory_io::ingest(trajectory_io::parse_frames(&frames, threshold(bo_min)?)?)?;
            jsonl::write_json(&out, &manifests)?;
            for m in &manifests {
                println!(
                    "{}: {} frames, interval {} ps, {} atoms",
                    m.trajectory_id, m.frame_count, m.interval_ps, m.atom_count
                );
            }
        }
        Command::Extract { frames, bo_min, out } => {
            let events = event_stream::extract_events(trajectory_io::parse_frames(&frames, threshold(bo_min)?)?)?;
            jsonl::write(&out, &events)?;
            println!("{} events", events.len());
        }
        Command::Filter {
            events,
            tau_min,
            tau_max,
            out,
            stats,
        } => {
            let band = FilterBand::new(tau_min, tau_max)?;
            let events: Vec<MolecularEvent> = jsonl::read(&events)?;
            let filtered = event_stream::bandpass_filter(&events, band);
            jsonl::write(&out, &filtered)?;
            let report = event_stream::pipeline_stats(StageCounts::from_events(&events, band), &filtered);
            if let Some(stats) = stats {
                jsonl::write_json(&stats, &report)?;
            }
            print!("{}", report.render());
        }
        Command::Balance {
            events,
            bins,
            cap,
            seed,
            out,
        } => {
            let bins = BinEdges::new(bins)?;
            let events: Vec<MolecularEvent> = jsonl::read(&events)?;
            let balanced = dataset::balance(&events, &bins, cap, seed.seed)?;
            jsonl::write(&out, &balanced)?;
            println!("{} of {} events kept", balanced.len(), events.len());
        }
        Command::Windows {
            events,
            task,
            history_min,
            history_max,
            seed,
            out,
        } => {
            let range = HistoryRange::new(history_min, history_max)?;
            let events: Vec<MolecularEvent> = jsonl::read(&events)?;
            let outcome = dataset::build_windows(&event_stream::group_sequences(&events), task, range, seed.seed);
            jsonl::write(&out, &outcome.windows)?;
            println!(
                "{} samples; {} sequences used, {} skipped ({} events)",
                outcome.windows.len(),
                outcome.skipped.sequences_used,
                outcome.skipped.sequences_skipped,
                outcome.skipped.events_in_skipped
            );
        }
        Command::Split {
            samples,
            test_frac,
            seed,
            out,
            report,
        } => {
            let samples: Vec<PredictionSample> = jsonl::read(&samples)?;
            let outcome = dataset::split_disjoint(samples, test_frac, seed.seed)?;
            jsonl::write(&out, outcome.train.iter().chain(&outcome.test))?;
            if let Some(report) = report {
                jsonl::write_json(&report, &outcome.report)?;
            }
            println!(
                "train {} samples / {} trajectories, test {} / {}, {} duplicate windows dropped",
                outcome.train.len(),
                outcome.report.train_trajectories.len(),
                outcome.test.len(),
                outcome.report.test_trajectories.len(),
                outcome.report.dropped_duplicates
            );
        }
        Command::Format { samples, out } => {
            let samples: Vec<PredictionSample> = jsonl::read(&samples)?;
            let records = dataset::format_instructions(&samples, &TemplateSet::builtin())?;
            jsonl::write(&out, &records)?;
            println!("{} records", records.len());
        }
        Command::Mix {
            dataset: path,
            qa,
            ratio,
            train_only,
            seed,
            out,
        } => {
            let mut records: Vec<DatasetRecord> = jsonl::read(&path)?;
            if train_only {
                records.retain(|r| r.split == Split::Train);
            }
            let qa: Vec<InstructionRecord> = jsonl::read(&qa)?;
            let forecast = records.len();
            let mixed = dataset::interleave_qa(records, qa, ratio, seed.seed)?;
            jsonl::write(&out, &mixed)?;
            println!("{} records ({} forecast, {} Q&A)", mixed.len(), forecast, mixed.len() - forecast);
        }
        Command::Simulate {
            network,
            trajectories,
            events_per,
            seed,
            out,
            format,
        } => {
            let network = ReactionNetwork::from_path(&network)?;
            let generated = kmc::generate_many(&network, trajectories, events_per, seed.seed)?;
            let format = format.unwrap_or_else(|| {
                let name = out.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
                if name.contains("event") {
                    SimFormat::Events
                } else {
                    SimFormat::Frames
                }
            });
            match format {
                SimFormat::Events => {
                    jsonl::write(&out, generated.iter().flat_map(|t| &t.events))?;
                }
                SimFormat::Frames => {
                    let maps = network.atom_maps()?;
                    let mut writer = BufWriter::new(File::create(&out).map_err(io(&out))?);
                    for t in &generated {
                        let frames = kmc::expand_to_frames(t, &network, &maps)?;
                        trajectory_io::write_frames(&mut writer, &frames).map_err(io(&out))?;
                    }
                    writer.flush().map_err(io(&out))?;
                }
            }
            println!("{} trajectories x {} events", generated.len(), events_per);
        }
        Command::Baseline(BaselineCommand::Fit {
            samples,
            task,
            kind,
            order,
            alpha,
            lambda,
            window,
            bins,
            seed,
            out,
        }) => {
            let samples: Vec<PredictionSample> = jsonl::read(&samples)?;
            let train: Vec<PredictionSample> = select(&samples, task, Split::Train).into_iter().cloned().collect();
            let hyperparams = Hyperparams {
                order,
                alpha,
                lambda,
                duration_bins: BinEdges::new(bins)?,
                window,
            };
            let model = baselines::fit(kind, &train, &hyperparams, seed.seed)?;
            model.save(&out)?;
            println!("{kind} model on {} {task} train samples", train.len());
        }
        Command::Baseline(BaselineCommand::Predict {
            model,
            samples,
            task,
            k,
            out,
        }) => {
            let model = Model::load(&model)?;
            let samples: Vec<PredictionSample> = jsonl::read(&samples)?;
            let test = select(&samples, task, Split::Test);
            let entries = test
                .iter()
                .map(|s| pipeline::predict_entry(&model, task, s, k))
                .collect::<Result<Vec<_>, _>>()?;
            jsonl::write(&out, &entries)?;
            println!("{} predictions", entries.len());
        }
        Command::Eval {
            task,
            pred,
            truth,
            k,
            dur_tol,
            out_dir,
        } => {
            let records: Vec<DatasetRecord> = jsonl::read(&truth)?;
            let truth = eval::truth_from_dataset(&records, task);
            if truth.is_empty() {
                return Err(invalid(format!("no test records for task {task}")));
            }
            let config = ScoreConfig {
                k,
                duration_tolerance_ps: dur_tol,
                ..ScoreConfig::default()
            };
            let mut report = EvalReport::default();
            for path in &pred {
                let entries: Vec<PredictionEntry> = jsonl::read(path)?;
                report.tasks.push(eval::score_task(&entries, &truth, Some(task), &config)?);
            }
            if report.tasks.len() > 1 {
                report.across_seeds = eval::summarize_seeds(&report.tasks);
            }
            eval::emit_report(&report, &out_dir)?;
            print!("{}", eval::render_summary(&report));
        }
        Command::Run { config } => {
            let config = PipelineConfig::from_path(&config)?;
            let summary = pipeline::run_pipeline(&config)?;
            for stage in &summary.manifest.stages {
                let state = if summary.skipped.contains(&stage.name) {
                    "skipped"
                } else {
                    "done"
                };
                let counts: Vec<String> = stage.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{:<9} {:<8} {}", stage.name, state, counts.join(" "));
            }
            if let Some(report) = &summary.manifest.report {
                print!("\n{}", report.render());
            }
        }
        Command::Templates => {
            let hashes: BTreeMap<String, String> = TemplateSet::builtin().hashes();
            for (name, hash) in hashes {
                println!("{hash}  {name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
