//! `protoprobe`: dataless evaluation of image classifiers from the command
//! line. Exit codes: 0 success, 1 internal error, 2 input-file error,
//! 3 evaluation impossible, 4 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use protoprobe_core::adversary::{attack_set, save_adversaries, AttackConfig};
use protoprobe_core::data::{gen_synthetic_dataset, load_idx, save_idx, Dataset};
use protoprobe_core::error::Error;
use protoprobe_core::harness::{
    reference_spec, render_study_csv, run_study, train, StudyConfig, StudySchedule, TrainConfig,
    REFERENCE_DIFFICULTY, REFERENCE_SHAPE, REFERENCE_TEST_PER_CLASS, REFERENCE_TRAIN_PER_CLASS,
};
use protoprobe_core::io::{fingerprint, load_model, save_model};
use protoprobe_core::metrics::{evaluate_metrics, render_report, MetricReport, Thresholds};
use protoprobe_core::network::ModelState;
use protoprobe_core::profile::{build_profile, render_profile_csv};
use protoprobe_core::synth::{synthesize_set, PrototypeSet, SynthConfig};

const EXIT_INTERNAL: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_IMPOSSIBLE: u8 = 3;
const EXIT_USAGE: u8 = 4;

#[derive(Parser)]
#[command(name = "protoprobe", version, about = "Dataless image-classifier evaluation")]
struct Cli {
    /// Base seed for every seeded computation.
    #[arg(long, global = true, env = "PROTOPROBE_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of prototype synthesis seeds per class.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Prototype synthesis learning rate.
    #[arg(long, default_value_t = 0.1)]
    proto_lr: f64,
    /// Prototype synthesis iteration cap.
    #[arg(long, default_value_t = 1000)]
    proto_iters: usize,
    /// Target class confidence at which synthesis stops.
    #[arg(long, default_value_t = 0.999)]
    confidence: f64,
}

/// Synthesis flags for `study`: a fixed iteration budget (the confidence
/// target is effectively unreachable) so every checkpoint's prototypes get
/// the same number of update steps.
#[derive(Args)]
struct StudySynthArgs {
    /// Number of prototype synthesis seeds per class.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Prototype synthesis learning rate.
    #[arg(long, default_value_t = 0.1)]
    proto_lr: f64,
    /// Prototype synthesis iteration cap.
    #[arg(long, default_value_t = 120)]
    proto_iters: usize,
    /// Target class confidence at which synthesis stops.
    #[arg(long, default_value_t = 0.999_999_999_999)]
    confidence: f64,
}

impl StudySynthArgs {
    fn as_synth(&self) -> SynthArgs {
        SynthArgs {
            seeds: self.seeds,
            proto_lr: self.proto_lr,
            proto_iters: self.proto_iters,
            confidence: self.confidence,
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    /// DeepFool overshoot eta.
    #[arg(long, default_value_t = 0.02)]
    overshoot: f64,
    /// DeepFool iteration cap.
    #[arg(long, default_value_t = 50)]
    attack_iters: usize,
}

#[derive(Args)]
struct ThresholdArgs {
    /// Verdict threshold on M_g.
    #[arg(long, default_value_t = 0.8)]
    threshold_g: f64,
    /// Verdict threshold on M_adv.
    #[arg(long, default_value_t = 0.35)]
    threshold_adv: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a model from its file alone: prototypes, adversaries, M_g, M_adv.
    Evaluate {
        model: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        attack: AttackArgs,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate several models and rank them by M_g.
    Compare {
        #[arg(num_args = 2..)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        attack: AttackArgs,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train under a growing data-fraction schedule and correlate metrics with accuracy.
    Study {
        /// Comma-separated strictly increasing data fractions in (0,1].
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.4, 0.6, 0.7, 0.8, 0.9, 1.0])]
        fractions: Vec<f64>,
        /// Training epochs per schedule stage.
        #[arg(long, default_value_t = 25)]
        epochs: usize,
        /// Synthetic dataset difficulty.
        #[arg(long, default_value_t = REFERENCE_DIFFICULTY)]
        difficulty: f64,
        #[command(flatten)]
        synth: StudySynthArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Directory for the study CSV and per-stage model checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the feature-activation profile CSV for one class.
    Profile {
        model: PathBuf,
        /// Class index to profile.
        #[arg(long)]
        class: usize,
        #[command(flatten)]
        synth: SynthArgs,
        /// IDX image file for the training-data IQR overlay.
        #[arg(long, requires = "idx_labels")]
        idx_images: Option<PathBuf>,
        /// IDX label file for the training-data IQR overlay.
        #[arg(long, requires = "idx_images")]
        idx_labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the reference model on the synthetic task and save it.
    Train {
        /// Destination model file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = REFERENCE_DIFFICULTY)]
        difficulty: f64,
        /// Training examples per class.
        #[arg(long, default_value_t = REFERENCE_TRAIN_PER_CLASS)]
        per_class: usize,
    },
    /// Generate the synthetic dataset as IDX files.
    GenData {
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = REFERENCE_TRAIN_PER_CLASS)]
        per_class: usize,
        #[arg(long, default_value_t = REFERENCE_TEST_PER_CLASS)]
        test_per_class: usize,
        #[arg(long, default_value_t = REFERENCE_DIFFICULTY)]
        difficulty: f64,
    },
    /// Synthesize prototypes and attack them, saving the adversary table.
    Attack {
        model: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// Destination directory for adversaries.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::NotAModelFile
            | Error::UnsupportedVersion(_)
            | Error::CorruptFile(_)
            | Error::NotAnIdxFile(_)
            | Error::CorruptIdx(_)
            | Error::Io(_) => EXIT_INPUT,
            Error::NoAdversaries => EXIT_IMPOSSIBLE,
            _ => EXIT_INTERNAL,
        };
        Self { code, message: err.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap's own help/version output is a success, not a usage error.
            if err.use_stderr() {
                eprintln!("{err}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

/// Prototype seeds derived from the base seed: base+1 .. base+count.
fn proto_seeds(base: u64, count: usize) -> Vec<u64> {
    (1..=count as u64).map(|i| base.wrapping_add(i)).collect()
}

fn synth_config(args: &SynthArgs, base_seed: u64) -> Result<(SynthConfig, Vec<u64>), Failure> {
    if args.seeds == 0 {
        return Err(Failure::usage("--seeds must be >= 1"));
    }
    let config = SynthConfig {
        learning_rate: args.proto_lr,
        max_iterations: args.proto_iters,
        confidence_target: args.confidence,
        seed: base_seed,
        clip_to_unit_box: true,
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok((config, proto_seeds(base_seed, args.seeds)))
}

fn attack_config(args: &AttackArgs) -> Result<AttackConfig, Failure> {
    let config = AttackConfig {
        max_iterations: args.attack_iters,
        overshoot: args.overshoot,
        clip_to_unit_box: true,
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(config)
}

fn thresholds(args: &ThresholdArgs) -> Result<Thresholds, Failure> {
    if !args.threshold_g.is_finite() || !args.threshold_adv.is_finite() {
        return Err(Failure::usage("thresholds must be finite"));
    }
    Ok(Thresholds { m_g: args.threshold_g, m_adv: args.threshold_adv })
}

fn timestamp_line() -> String {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("generated_at={now}")
}

/// Effective configuration header: every report must be reproducible from its
/// own header, so all defaults and overrides appear here.
fn config_header(
    base_seed: u64,
    synth: &SynthConfig,
    seeds: &[u64],
    attack: Option<&AttackConfig>,
    thresholds: Option<&Thresholds>,
) -> Vec<String> {
    let mut lines = vec![
        timestamp_line(),
        format!("seed={base_seed}"),
        format!(
            "proto_seeds={}",
            seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        ),
        format!(
            "proto_lr={} proto_iters={} confidence={}",
            synth.learning_rate, synth.max_iterations, synth.confidence_target
        ),
    ];
    if let Some(a) = attack {
        lines.push(format!("overshoot={} attack_iters={}", a.overshoot, a.max_iterations));
    }
    if let Some(t) = thresholds {
        lines.push(format!("threshold_g={} threshold_adv={}", t.m_g, t.m_adv));
    }
    lines
}

fn write_out(path: Option<&Path>, body: &str) -> Result<(), Failure> {
    if let Some(path) = path {
        std::fs::write(path, body).map_err(Error::from)?;
    }
    Ok(())
}

fn evaluate_model(
    model: &ModelState,
    synth: &SynthConfig,
    seeds: &[u64],
    attack: &AttackConfig,
    thresholds: Thresholds,
) -> Result<(MetricReport, PrototypeSet), Failure> {
    let protos = synthesize_set(model, seeds, synth)?;
    let adversaries = attack_set(model, &protos, attack)?;
    let report = evaluate_metrics(model, &protos, &adversaries, thresholds)?;
    Ok((report, protos))
}

fn load_model_input(path: &Path) -> Result<ModelState, Failure> {
    load_model(path).map_err(|e| {
        let mut failure = Failure::from(e);
        failure.message = format!("{}: {}", path.display(), failure.message);
        if failure.code == EXIT_INTERNAL {
            failure.code = EXIT_INPUT;
        }
        failure
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Evaluate { model, synth, attack, thresholds: th, out } => {
            let (synth_cfg, seeds) = synth_config(&synth, cli.seed)?;
            let attack_cfg = attack_config(&attack)?;
            let th = thresholds(&th)?;
            let model = load_model_input(&model)?;
            let (report, _) = evaluate_model(&model, &synth_cfg, &seeds, &attack_cfg, th)?;
            let header = config_header(cli.seed, &synth_cfg, &seeds, Some(&attack_cfg), Some(&th));
            let body = render_report(&report, &header);
            print!("{body}");
            write_out(out.as_deref(), &body)
        }
        Command::Compare { models, synth, attack, thresholds: th, out } => {
            let (synth_cfg, seeds) = synth_config(&synth, cli.seed)?;
            let attack_cfg = attack_config(&attack)?;
            let th = thresholds(&th)?;
            if models.len() < 2 {
                return Err(Failure::usage("compare needs at least two model files"));
            }
            let loaded: Vec<(PathBuf, ModelState)> = models
                .into_iter()
                .map(|p| load_model_input(&p).map(|m| (p, m)))
                .collect::<Result<_, _>>()?;
            let class_count = loaded[0].1.class_count();
            for (path, model) in &loaded {
                if model.class_count() != class_count {
                    return Err(Failure::usage(format!(
                        "{}: class count {} differs from {} — prototypes are not comparable",
                        path.display(),
                        model.class_count(),
                        class_count
                    )));
                }
            }
            let mut rows = Vec::new();
            for (path, model) in &loaded {
                let (report, _) = evaluate_model(model, &synth_cfg, &seeds, &attack_cfg, th)?;
                rows.push((path.display().to_string(), report));
            }
            rows.sort_by(|a, b| b.1.m_g.partial_cmp(&a.1.m_g).unwrap());
            let best_g = rows[0].0.clone();
            let best_adv = rows
                .iter()
                .max_by(|a, b| a.1.m_adv.partial_cmp(&b.1.m_adv).unwrap())
                .unwrap()
                .0
                .clone();
            let mut body = String::new();
            for line in config_header(cli.seed, &synth_cfg, &seeds, Some(&attack_cfg), Some(&th)) {
                body.push_str(&format!("# {line}\n"));
            }
            body.push_str("rank,model,fingerprint,m_g,m_adv,verdict_accuracy,verdict_robustness\n");
            for (rank, (name, report)) in rows.iter().enumerate() {
                body.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{},{}\n",
                    rank + 1,
                    name,
                    report.fingerprint,
                    report.m_g,
                    report.m_adv,
                    report.verdict_accuracy,
                    report.verdict_robustness
                ));
            }
            body.push_str(&format!("best_by_m_g={best_g}\nbest_by_m_adv={best_adv}\n"));
            print!("{body}");
            write_out(out.as_deref(), &body)
        }
        Command::Study { fractions, epochs, difficulty, synth, attack, out } => {
            let (synth_cfg, seeds) = synth_config(&synth.as_synth(), cli.seed)?;
            let attack_cfg = attack_config(&attack)?;
            let schedule = StudySchedule {
                fractions,
                epochs_per_stage: epochs,
                ..Default::default()
            };
            schedule.validate().map_err(|e| Failure::usage(e.to_string()))?;
            if !(difficulty >= 0.0) {
                return Err(Failure::usage("difficulty must be >= 0"));
            }
            let train_set = gen_synthetic_dataset(
                8,
                REFERENCE_TRAIN_PER_CLASS,
                REFERENCE_SHAPE,
                difficulty,
                cli.seed.wrapping_add(100),
            )?;
            let test_set = gen_synthetic_dataset(
                8,
                REFERENCE_TEST_PER_CLASS,
                REFERENCE_SHAPE,
                difficulty,
                cli.seed.wrapping_add(9100),
            )?;
            let config = StudyConfig {
                schedule,
                synth: synth_cfg.clone(),
                attack: attack_cfg.clone(),
                proto_seeds: seeds.clone(),
                train_seed: cli.seed,
                batch_size: 64,
            };
            let study = run_study(&reference_spec(), &train_set, &test_set, &config)?;
            let mut header =
                config_header(cli.seed, &synth_cfg, &seeds, Some(&attack_cfg), None);
            header.push(format!("difficulty={difficulty} epochs_per_stage={epochs}"));
            let body = render_study_csv(&study, &header);
            print!("{body}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(Error::from)?;
                std::fs::write(dir.join("study.csv"), &body).map_err(Error::from)?;
                for (record, checkpoint) in study.records.iter().zip(&study.checkpoints) {
                    let name = format!("checkpoint_{:.2}.model", record.fraction);
                    save_model(checkpoint, dir.join(name))?;
                }
            }
            Ok(())
        }
        Command::Profile { model, class, synth, idx_images, idx_labels, out } => {
            let (synth_cfg, seeds) = synth_config(&synth, cli.seed)?;
            let model = load_model_input(&model)?;
            if class >= model.class_count() {
                return Err(Failure::usage(format!(
                    "class {class} out of range for a {}-class model",
                    model.class_count()
                )));
            }
            let train_inputs: Option<Vec<_>> = match (idx_images, idx_labels) {
                (Some(images), Some(labels)) => {
                    let dataset: Dataset = load_idx(&images, &labels)?;
                    if dataset.class_count > model.class_count() {
                        return Err(Failure::usage(format!(
                            "dataset labels reach class {}, model has {} classes",
                            dataset.class_count - 1,
                            model.class_count()
                        )));
                    }
                    Some(
                        dataset
                            .inputs
                            .iter()
                            .zip(&dataset.labels)
                            .filter(|(_, &l)| l == class)
                            .map(|(x, _)| x.clone())
                            .collect(),
                    )
                }
                _ => None,
            };
            let protos = synthesize_set(&model, &seeds, &synth_cfg)?;
            let class_protos: Vec<_> =
                (0..seeds.len()).map(|s| protos.get(class, s)).collect();
            let profile =
                build_profile(&model, class, &class_protos, train_inputs.as_deref())?;
            let mut header = config_header(cli.seed, &synth_cfg, &seeds, None, None);
            header.push(format!("model={}", protos.fingerprint));
            let body = render_profile_csv(&profile, &header);
            print!("{body}");
            write_out(out.as_deref(), &body)
        }
        Command::Train { out, epochs, difficulty, per_class } => {
            if epochs == 0 {
                return Err(Failure::usage("--epochs must be >= 1"));
            }
            if per_class < 2 {
                return Err(Failure::usage("--per-class must be >= 2"));
            }
            let dataset = gen_synthetic_dataset(
                8,
                per_class,
                REFERENCE_SHAPE,
                difficulty,
                cli.seed.wrapping_add(100),
            )?;
            let mut model = ModelState::random_init(reference_spec(), cli.seed)?;
            let config = TrainConfig { epochs, seed: cli.seed, ..Default::default() };
            let stats = train(&mut model, &dataset, &config)?;
            for s in &stats {
                println!(
                    "epoch={} lr={:.6} loss={:.6} train_acc={:.4}",
                    s.epoch, s.lr, s.mean_loss, s.train_accuracy
                );
            }
            save_model(&model, &out)?;
            println!("saved model={} to {}", fingerprint(&model)?, out.display());
            Ok(())
        }
        Command::GenData { out, classes, per_class, test_per_class, difficulty } => {
            if classes < 2 {
                return Err(Failure::usage("--classes must be >= 2"));
            }
            if per_class < 2 || test_per_class < 2 {
                return Err(Failure::usage("--per-class and --test-per-class must be >= 2"));
            }
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            let train_set = gen_synthetic_dataset(
                classes,
                per_class,
                REFERENCE_SHAPE,
                difficulty,
                cli.seed.wrapping_add(100),
            )?;
            let test_set = gen_synthetic_dataset(
                classes,
                test_per_class,
                REFERENCE_SHAPE,
                difficulty,
                cli.seed.wrapping_add(9100),
            )?;
            save_idx(&train_set, out.join("train-images.idx"), out.join("train-labels.idx"))?;
            save_idx(&test_set, out.join("test-images.idx"), out.join("test-labels.idx"))?;
            println!(
                "wrote {} train and {} test examples to {}",
                train_set.len(),
                test_set.len(),
                out.display()
            );
            Ok(())
        }
        Command::Attack { model, synth, attack, out } => {
            let (synth_cfg, seeds) = synth_config(&synth, cli.seed)?;
            let attack_cfg = attack_config(&attack)?;
            let model = load_model_input(&model)?;
            let protos = synthesize_set(&model, &seeds, &synth_cfg)?;
            let results = attack_set(&model, &protos, &attack_cfg)?;
            if results.iter().all(|r| !r.success) {
                return Err(Error::NoAdversaries.into());
            }
            for line in config_header(cli.seed, &synth_cfg, &seeds, Some(&attack_cfg), None) {
                println!("# {line}");
            }
            for r in &results {
                println!(
                    "class={} seed={} success={} l2={:.6} iters={} label {}->{}",
                    r.class_index,
                    r.seed,
                    r.success,
                    r.l2_norm,
                    r.iterations_used,
                    r.original_label,
                    r.adversarial_label
                );
            }
            if let Some(dir) = out {
                save_adversaries(&results, &dir)?;
                println!("saved adversaries to {}", dir.display());
            }
            Ok(())
        }
    }
}
