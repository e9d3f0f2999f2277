//! Command-line surface: extract, subset, train, convert, evaluate.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wastargan::config::{load_config, RunConfig};
use wastargan::convert::{convert_batch, ConversionManifest};
use wastargan::data;
use wastargan::error::{Error, Result};
use wastargan::eval;
use wastargan::models::checkpoint::load_checkpoint;
use wastargan::training;

#[derive(Parser)]
#[command(
    name = "wastargan",
    about = "Many-to-many non-parallel voice conversion with weight adaptive instance normalization",
    version
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override applied to training and classifier sections.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dotted-key config override, e.g. training.batch_size=4 (repeatable).
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory override (paths.out_dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a manifest from speaker/utterance.wav audio and cache features.
    #[command(long_about = "Build a manifest from a speaker/utterance.wav tree and run vocoder \
analysis plus mel-cepstral encoding into per-utterance cache files.\n\nConfig keys read: \
features.sample_rate, features.frame_period_ms, features.fft_size, features.mcep_order, \
paths.audio_root, paths.cache_dir (env WASTARGAN_CACHE_DIR overrides), paths.manifest.")]
    Extract(ExtractArgs),

    /// Carve a holdout split and a low-resource training subset.
    #[command(long_about = "Split a per-speaker holdout from a manifest, then sample the \
low-resource training subset (N speakers, M utterances each). Writes the training manifest \
and its evaluation companion.\n\nConfig keys read: features.* (for F0 statistics refresh), \
paths.manifest, paths.out_dir.")]
    Subset(SubsetArgs),

    /// Train the model on a manifest with cached features.
    #[command(long_about = "Run (or resume) adversarial training.\n\nConfig keys read: \
generator.* (base_channels, n_bottleneck_blocks, bottleneck_kernel), discriminator.base_channels, \
encoder.* (channels, embedding_dim, kernel), features.mcep_order, training.* (batch_size, \
segment_frames, g_lr, d_lr, e_lr, adam_beta1, adam_beta2, total_iterations, checkpoint_every, \
d_steps, seed, weights.lambda_cyc, weights.lambda_spk, weights.lambda_id, weights.use_identity), \
paths.manifest, paths.out_dir.")]
    Train(TrainArgs),

    /// Convert utterances to target speakers through a checkpoint.
    #[command(long_about = "Convert source utterances to target speakers: generator over the \
cached MCEPs, linear log-F0 transform with the manifest's per-speaker statistics, envelope \
decoding, vocoder synthesis, loudness normalization, WAV output, and a conversion manifest \
for evaluation.\n\nConfig keys read: features.*, convert.target_lufs, convert.preserve_energy, \
paths.out_dir.")]
    Convert(ConvertArgs),

    /// Objective evaluation (speaker identification ACC, verification EER).
    #[command(long_about = "Train the evaluation speaker classifier on the real manifest's \
training split, then compute identification accuracy over a conversion manifest and the \
verification equal error rate from cosine trials.\n\nConfig keys read: classifier.* (channels, \
embedding_dim, kernel, train_steps, batch_size, segment_frames, lr, seed), paths.out_dir.")]
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Root directory with speaker/utterance.wav layout (overrides paths.audio_root).
    #[arg(long)]
    audio_root: Option<PathBuf>,
    /// Where to write the manifest (overrides paths.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Feature cache directory (overrides paths.cache_dir and the env var).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SubsetArgs {
    /// Input manifest (overrides paths.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of speakers to keep.
    #[arg(long)]
    n_speakers: usize,
    /// Training utterances per speaker, or "full".
    #[arg(long, default_value = "full")]
    m_samples: String,
    /// Per-speaker holdout fraction carved before subsetting.
    #[arg(long, default_value_t = 0.1)]
    holdout_fraction: f64,
    /// Seed for the holdout split.
    #[arg(long, default_value_t = 0)]
    holdout_seed: u64,
    /// Seed for speaker/utterance sampling.
    #[arg(long, default_value_t = 0)]
    subset_seed: u64,
    /// Output path of the training-subset manifest.
    #[arg(long)]
    train_out: PathBuf,
    /// Output path of the evaluation companion manifest.
    #[arg(long)]
    eval_out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest (overrides paths.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Checkpoint to convert with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training manifest carrying speaker table and F0 statistics.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Manifest the source utterances live in (defaults to --manifest).
    #[arg(long)]
    source_manifest: Option<PathBuf>,
    /// Source utterance ids (comma separated); "all" converts every source
    /// manifest utterance.
    #[arg(long)]
    source: String,
    /// Target speaker labels (comma separated); "all" converts to every speaker.
    #[arg(long)]
    target: String,
    /// Reference utterance id for the target embedding (default: the target
    /// speaker's longest training utterance).
    #[arg(long)]
    reference: Option<String>,
    /// Where to write WAVs, converted features, and the conversion manifest.
    #[arg(long)]
    conversions_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Real (training) manifest for classifier training and enrollment.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Conversion manifest produced by `convert`.
    #[arg(long)]
    conversions: PathBuf,
    /// Report output path (JSON; a text table goes to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn required_path(
    flag: Option<PathBuf>,
    from_config: Option<PathBuf>,
    what: &str,
) -> Result<PathBuf> {
    flag.or(from_config)
        .ok_or_else(|| Error::Config(format!("{what} required (flag or config paths section)")))
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(
        cli.config.as_deref(),
        &cli.overrides,
        cli.seed,
        cli.out_dir.as_deref(),
    )?;

    match cli.command {
        Command::Extract(args) => {
            let audio_root =
                required_path(args.audio_root, cfg.paths.audio_root.clone(), "--audio-root")?;
            let manifest_path =
                required_path(args.manifest, cfg.paths.manifest.clone(), "--manifest")?;
            let cache_dir = args.cache_dir.unwrap_or_else(|| cfg.cache_dir());

            let mut manifest = data::build_manifest(&audio_root, &cfg.features)?;
            let analyzed = data::cache_features(&mut manifest, &cfg.features, &cache_dir)?;
            manifest.save(&manifest_path)?;
            println!(
                "extracted {} utterances ({} analyzed, {} cached) over {} speakers; {} skipped",
                manifest.records.len(),
                analyzed,
                manifest.records.len() - analyzed,
                manifest.n_speakers(),
                manifest.skipped.len()
            );
            for s in &manifest.skipped {
                eprintln!("skipped {}: {}", s.path.display(), s.reason);
            }
            println!("manifest written to {}", manifest_path.display());
            Ok(())
        }
        Command::Subset(args) => {
            let manifest_path =
                required_path(args.manifest, cfg.paths.manifest.clone(), "--manifest")?;
            let manifest = data::Manifest::load(&manifest_path)?;
            let m_samples = match args.m_samples.as_str() {
                "full" => None,
                other => Some(other.parse::<usize>().map_err(|_| {
                    Error::Config(format!("--m-samples must be an integer or \"full\", got {other:?}"))
                })?),
            };
            let held = data::split_holdout(&manifest, args.holdout_fraction, args.holdout_seed);
            let mut subset =
                data::subset_low_resource(&held, args.n_speakers, m_samples, args.subset_seed)?;
            let mut eval_m = data::eval_companion(&held, &subset);
            data::recompute_f0_stats(&mut subset)?;
            eval_m.f0_stats = subset.f0_stats.clone();
            subset.save(&args.train_out)?;
            eval_m.save(&args.eval_out)?;
            println!(
                "subset: {} speakers, {} training utterances -> {}",
                subset.n_speakers(),
                subset.records.len(),
                args.train_out.display()
            );
            println!(
                "eval companion: {} utterances -> {}",
                eval_m.records.len(),
                args.eval_out.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            let manifest_path =
                required_path(args.manifest, cfg.paths.manifest.clone(), "--manifest")?;
            let manifest = data::Manifest::load(&manifest_path)?;
            let model_config = cfg.model_config(manifest.n_speakers());
            let dir = out_dir(&cfg);
            let final_ck = training::train(
                &manifest,
                &model_config,
                &cfg.training,
                &dir,
                args.resume.as_deref(),
            )?;
            println!("final checkpoint: {}", final_ck.display());
            Ok(())
        }
        Command::Convert(args) => {
            let manifest_path =
                required_path(args.manifest, cfg.paths.manifest.clone(), "--manifest")?;
            let manifest = data::Manifest::load(&manifest_path)?;
            let source_manifest = match &args.source_manifest {
                Some(p) => data::Manifest::load(p)?,
                None => manifest.clone(),
            };
            let ck = load_checkpoint(&args.checkpoint, None)?;
            if ck.speaker_table != manifest.speaker_table {
                return Err(Error::Checkpoint(
                    "checkpoint speaker table does not match the manifest".into(),
                ));
            }

            let sources: Vec<&data::UtteranceRecord> = if args.source == "all" {
                source_manifest.records.iter().collect()
            } else {
                args.source
                    .split(',')
                    .map(|id| source_manifest.record(id.trim()))
                    .collect::<Result<Vec<_>>>()?
            };
            let targets: Vec<String> = if args.target == "all" {
                manifest.speaker_table.clone()
            } else {
                let labels: Vec<String> =
                    args.target.split(',').map(|t| t.trim().to_string()).collect();
                for l in &labels {
                    manifest.speaker_index(l)?;
                }
                labels
            };

            let dir = args
                .conversions_out
                .unwrap_or_else(|| out_dir(&cfg).join("conversions"));
            let conv = convert_batch(
                &ck.generator,
                &ck.encoder,
                &manifest,
                &sources,
                &targets,
                args.reference.as_deref(),
                &cfg.features,
                &cfg.convert,
                &dir,
            )?;
            let conv_path = dir.join("conversions.jsonl");
            conv.save(&conv_path)?;
            println!(
                "{} conversions written under {} (manifest {})",
                conv.records.len(),
                dir.display(),
                conv_path.display()
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            let manifest_path =
                required_path(args.manifest, cfg.paths.manifest.clone(), "--manifest")?;
            let manifest = data::Manifest::load(&manifest_path)?;
            let conversions = ConversionManifest::load(&args.conversions)?;
            let report = eval::evaluate_conversions(&manifest, &conversions, &cfg.classifier)?;
            let report_path = args
                .report
                .unwrap_or_else(|| out_dir(&cfg).join("eval_report.json"));
            if let Some(parent) = report_path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
                .map_err(|e| Error::io(&report_path, e))?;
            print!("{}", report.render_table());
            println!("protocol: {}", report.protocol);
            println!("report written to {}", report_path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
