use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use respir_hht::dbn;
use respir_hht::features::FeatureSource;
use respir_hht::pipeline::{self, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "respir-hht", version, about = "Hilbert-Huang lung-sound features and DBN asthma classification")]
struct Cli {
    /// Seed for every random stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON pipeline configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic normal/asthmatic dataset with a manifest.
    Synth {
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sample_rate: Option<u32>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        wheeze_freq: Option<f64>,
        #[arg(long)]
        wheeze_ms: Option<f64>,
        #[arg(long)]
        wheeze_gain: Option<f64>,
    },
    /// Decompose one WAV file into IMF and residual CSV files.
    Decompose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise instantaneous amplitude and frequency of a decomposition.
    Hsa {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4000)]
        rate: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the feature CSV for every recording of a manifest.
    Features {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        feature_source: Option<FeatureSource>,
    },
    /// Train one network on a feature CSV.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subject-disjoint k-fold cross-validation over a manifest.
    Cv {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        k: Option<usize>,
        /// Directory for features.csv and per-fold models.
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        feature_source: Option<FeatureSource>,
        /// Add a per-subject majority-vote section to the report.
        #[arg(long)]
        subject_vote: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a cross-validation report as a text table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Hidden layer widths, e.g. 160,130.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    arch: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    cd_steps: Option<usize>,
    /// Use softmax outputs with cross-entropy instead of sigmoid outputs
    /// with squared error.
    #[arg(long)]
    cross_entropy: bool,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(a) = &self.arch {
            cfg.arch = a.clone();
        }
        let t = &mut cfg.train;
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            t.fine_tune_epochs = v;
        }
        if let Some(v) = self.pretrain_epochs {
            t.pretrain_epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.cd_steps {
            t.cd_steps = v;
        }
        if self.cross_entropy {
            t.loss = dbn::Loss::CrossEntropy;
        }
    }
}

fn write_text(path: &Path, contents: String) -> Result<(), String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    }
    std::fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

enum Failure {
    Pipeline(PipelineError),
    Usage(String),
    Internal(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }

    match cli.command {
        Command::Synth {
            n_per_class,
            out,
            sample_rate,
            duration,
            wheeze_freq,
            wheeze_ms,
            wheeze_gain,
        } => {
            let s = &mut cfg.synth;
            if let Some(v) = sample_rate {
                s.sample_rate_hz = v;
            }
            if let Some(v) = duration {
                s.duration_s = v;
            }
            if let Some(v) = wheeze_freq {
                s.wheeze_freq_hz = v;
            }
            if let Some(v) = wheeze_ms {
                s.wheeze_duration_ms = v;
            }
            if let Some(v) = wheeze_gain {
                s.wheeze_gain = v;
            }
            let n = n_per_class.unwrap_or(cfg.n_per_class);
            let manifest = pipeline::synthesize(&cfg.synth, n, &out)?;
            println!("wrote {} recordings and {}", manifest.entries.len(), out.join("manifest.json").display());
        }
        Command::Decompose { input, out } => {
            let summary = pipeline::decompose_file(&input, &out, &cfg.sift)?;
            println!("{} IMFs written to {}", summary.imf_count, out.display());
        }
        Command::Hsa { input, rate, out } => {
            let summary = pipeline::hsa_dir(&input, rate)?;
            let json = serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n";
            write_text(&out, json).map_err(Failure::Internal)?;
        }
        Command::Features {
            manifest,
            out,
            feature_source,
        } => {
            if let Some(m) = manifest {
                cfg.manifest = Some(m);
            }
            if let Some(fs) = feature_source {
                cfg.feature_source = fs;
            }
            let path = cfg
                .manifest
                .clone()
                .ok_or_else(|| Failure::Usage("features needs --manifest or a config with a manifest".into()))?;
            let instances = pipeline::features_from_manifest(&path, &cfg.sift, cfg.feature_source)?;
            pipeline::write_features(&out, &instances)?;
            println!("{} instances written to {}", instances.len(), out.display());
        }
        Command::Train { features, train, out } => {
            train.apply(&mut cfg);
            cfg.validate()?;
            let instances = pipeline::read_features(&features)?;
            let (model, history) = pipeline::train_model(&instances, &cfg.arch, &cfg.train)?;
            pipeline::save_model(&model, &out)?;
            println!(
                "model written to {}; final loss {:.6}; training accuracy {:.4}",
                out.display(),
                history.fine_tune.loss.last().copied().unwrap_or(f64::NAN),
                pipeline::accuracy_on(&model, &instances)?
            );
        }
        Command::Cv {
            manifest,
            train,
            k,
            workdir,
            feature_source,
            subject_vote,
            out,
        } => {
            train.apply(&mut cfg);
            if let Some(m) = manifest {
                cfg.manifest = Some(m);
            }
            if let Some(v) = k {
                cfg.k = v;
            }
            if let Some(fs) = feature_source {
                cfg.feature_source = fs;
            }
            if subject_vote {
                cfg.subject_vote = true;
            }
            if let Some(o) = out {
                if workdir.is_none() && cli.config.is_none() {
                    cfg.workdir = o.parent().filter(|d| !d.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf);
                }
                cfg.report = Some(o);
            }
            if let Some(w) = workdir {
                cfg.workdir = w;
            }
            let output = pipeline::run_pipeline(&cfg)?;
            print!("{}", output.report.to_text(&pipeline::arch_label(&cfg.arch)));
            println!("report written to {}", output.report_path.display());
        }
        Command::Report { input, out } => {
            let report = pipeline::load_report(&input)?;
            let text = report.to_text(&pipeline::report_arch(&report));
            match out {
                Some(p) => write_text(&p, text).map_err(Failure::Internal)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
