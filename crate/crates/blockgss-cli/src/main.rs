//! Command-line entry point.

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use blockgss::diarization::{parse_segments, segments_to_activities, ActivityMatrix};
use blockgss::eval::{generate_scene, measured_overlap, SceneSpec};
use blockgss::offline::OfflineConfig;
use blockgss::online::{OnlineConfig, UpdateStrategy};
use blockgss::stft::StftConfig;

use blockgss_cli::driver::{self, EmittedUtterance, MemorySource, RunOutcome};
use blockgss_cli::report::{RunReport, UttRecord};
use blockgss_cli::scenes;
use blockgss_cli::wav;

#[derive(Parser)]
#[command(
    name = "blockgss",
    version,
    about = "Guided source separation for multichannel recordings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Separate a session into per-utterance enhanced WAVs
    Run(RunArgs),
    /// Time both modes on a synthetic scene and report the speedup
    Bench(BenchArgs),
    /// Write a synthetic scene to disk
    Scene(SceneArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Online,
    Offline,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Accumulation,
    Decay,
}

#[derive(Args)]
struct EngineArgs {
    /// Frames per online block
    #[arg(long, default_value_t = 150)]
    block_frames: usize,
    /// Context frames carried between online blocks
    #[arg(long, default_value_t = 150)]
    context_frames: usize,
    /// Online statistics update
    #[arg(long, value_enum, default_value_t = StrategyArg::Decay)]
    strategy: StrategyArg,
    /// Forgetting factor for the decay strategy
    #[arg(long, default_value_t = 0.9)]
    eta: f64,
    /// EM iterations per block while the online context queue is filling
    #[arg(long, default_value_t = 4)]
    warmup_iterations: usize,
    /// Context seconds on each side of an utterance in offline mode
    #[arg(long, default_value_t = 10.0)]
    offline_context_sec: f64,
    /// EM iterations per utterance in offline mode
    #[arg(long, default_value_t = 20)]
    em_iterations: usize,
    /// Worker threads for per-frequency parallelism (results do not depend
    /// on this)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl EngineArgs {
    fn online_config(&self) -> OnlineConfig {
        OnlineConfig {
            block_len: self.block_frames,
            context_len: self.context_frames,
            strategy: match self.strategy {
                StrategyArg::Accumulation => UpdateStrategy::Accumulation,
                StrategyArg::Decay => UpdateStrategy::Decay,
            },
            eta: self.eta,
            warmup_iterations: self.warmup_iterations,
            ..OnlineConfig::default()
        }
    }

    fn offline_config(&self) -> OfflineConfig {
        OfflineConfig {
            context_sec: self.offline_context_sec,
            em_iterations: self.em_iterations,
            ..OfflineConfig::default()
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads.max(1))
            .build()
            .context("cannot build the worker pool")
    }

    fn describe(&self, mode: ModeArg) -> Vec<(String, String)> {
        match mode {
            ModeArg::Online => vec![
                ("block_frames".into(), self.block_frames.to_string()),
                ("context_frames".into(), self.context_frames.to_string()),
                (
                    "strategy".into(),
                    match self.strategy {
                        StrategyArg::Accumulation => "accumulation".into(),
                        StrategyArg::Decay => "decay".into(),
                    },
                ),
                ("eta".into(), format!("{}", self.eta)),
                (
                    "warmup_iterations".into(),
                    self.warmup_iterations.to_string(),
                ),
            ],
            ModeArg::Offline => vec![
                (
                    "offline_context_sec".into(),
                    format!("{}", self.offline_context_sec),
                ),
                ("em_iterations".into(), self.em_iterations.to_string()),
            ],
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Multichannel input WAV (or use repeated --ch)
    input: Option<PathBuf>,
    /// Mono WAV for one channel; repeat per channel
    #[arg(long = "ch")]
    ch: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Online)]
    mode: ModeArg,
    /// Diarization file with `label start end` lines
    #[arg(long)]
    segments: PathBuf,
    /// Directory for enhanced utterance WAVs
    #[arg(long)]
    out: PathBuf,
    /// Also write the report here (it always goes to stdout)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory with `<speaker>.wav` references for SI-SDR
    #[arg(long)]
    refs: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct SceneParams {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 120.0)]
    duration_sec: f64,
    /// Target overlapped-speech ratio
    #[arg(long, default_value_t = 0.3)]
    overlap: f64,
    /// Noise level; `inf` for a noiseless scene
    #[arg(long, default_value_t = 15.0)]
    snr_db: f64,
    /// Drift speaker positions over time
    #[arg(long)]
    moving: bool,
}

impl SceneParams {
    fn spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            num_speakers: self.speakers,
            num_channels: self.channels,
            duration_sec: self.duration_sec,
            overlap_ratio: self.overlap,
            snr_db: self.snr_db,
            moving: self.moving,
            sample_rate_hz: wav::REQUIRED_SAMPLE_RATE,
        }
    }

    fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("scene_seed".into(), self.seed.to_string()),
            ("scene_speakers".into(), self.speakers.to_string()),
            ("scene_channels".into(), self.channels.to_string()),
            ("scene_duration_sec".into(), format!("{}", self.duration_sec)),
            ("scene_overlap_target".into(), format!("{}", self.overlap)),
            ("scene_snr_db".into(), format!("{}", self.snr_db)),
            ("scene_moving".into(), self.moving.to_string()),
        ]
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    scene: SceneParams,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SceneArgs {
    #[command(flatten)]
    scene: SceneParams,
    /// Directory to write mixture.wav, segments.txt and refs/
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Bench(args) => bench(args),
        Command::Scene(args) => scene(args),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let channels = wav::read_session(args.input.as_deref(), &args.ch)?;
    let text = std::fs::read_to_string(&args.segments)
        .with_context(|| format!("cannot read {}", args.segments.display()))?;
    let segments = parse_segments(&text)?;
    let stft = StftConfig::default_16k();
    let frames = stft.num_frames(channels[0].len());
    let activity = segments_to_activities(&segments, &stft, frames);

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;

    let pool = args.engine.pool()?;
    let outcome = pool.install(|| -> Result<RunOutcome> {
        match args.mode {
            ModeArg::Online => {
                let mut source = MemorySource::new(channels.clone());
                driver::run_online(&mut source, &activity, &stft, &args.engine.online_config())
            }
            ModeArg::Offline => driver::run_offline(
                &channels,
                &activity,
                &stft,
                &args.engine.offline_config(),
                &blockgss::dereverb::WpeConfig::default_online(),
            ),
        }
    })?;

    let references = match &args.refs {
        Some(dir) => Some(load_references(dir, &activity)?),
        None => None,
    };

    let mut records = Vec::with_capacity(outcome.utterances.len());
    for utterance in &outcome.utterances {
        let path = args.out.join(utterance_file_name(utterance, &stft));
        wav::write_wav_mono(&path, &utterance.samples, stft.sample_rate_hz)?;
        let si_sdr_db = references
            .as_ref()
            .and_then(|refs| refs.get(&utterance.speaker))
            .and_then(|reference| driver::score_utterance(utterance, reference));
        records.push(UttRecord {
            speaker: utterance.speaker.clone(),
            start_sec: utterance.start_sec(&stft),
            end_sec: utterance.end_sec(&stft),
            path: Some(path),
            si_sdr_db,
        });
    }

    let mode_name = match args.mode {
        ModeArg::Online => "online",
        ModeArg::Offline => "offline",
    };
    let mut extras = vec![
        ("channels".into(), channels.len().to_string()),
        ("threads".into(), args.engine.threads.to_string()),
    ];
    extras.extend(args.engine.describe(args.mode));
    let report = RunReport {
        mode: mode_name.into(),
        audio_duration_sec: outcome.audio_sec,
        speech_duration_sec: outcome.speech_sec,
        processing_sec: outcome.processing_sec,
        lookahead_violations: outcome.lookahead_violations,
        extras,
        records,
    };
    print!("{}", report.render());
    if let Some(path) = &args.report {
        report.write(path)?;
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let spec = args.scene.spec();
    let scene = generate_scene(&spec)?;
    let stft = StftConfig::default_16k();
    let frames = stft.num_frames(scene.mixture[0].len());
    let activity = segments_to_activities(&scene.segments, &stft, frames);
    let reference_by_label: HashMap<String, &Vec<f64>> = scene
        .segments
        .speakers()
        .into_iter()
        .zip(&scene.references)
        .collect();

    let mut online_config = args.engine.online_config();
    online_config.reference_channel = Some(0);
    let mut offline_config = args.engine.offline_config();
    offline_config.reference_channel = Some(0);

    let pool = args.engine.pool()?;
    let online = pool.install(|| {
        let mut source = MemorySource::new(scene.mixture.clone());
        driver::run_online(&mut source, &activity, &stft, &online_config)
    })?;
    let offline = pool.install(|| {
        driver::run_offline(
            &scene.mixture,
            &activity,
            &stft,
            &offline_config,
            &blockgss::dereverb::WpeConfig::default_online(),
        )
    })?;

    let score_mean = |outcome: &RunOutcome| -> Option<f64> {
        let scores: Vec<f64> = outcome
            .utterances
            .iter()
            .filter_map(|utt| {
                reference_by_label
                    .get(&utt.speaker)
                    .and_then(|reference| driver::score_utterance(utt, reference))
            })
            .collect();
        if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    };
    let online_mean = score_mean(&online);
    let offline_mean = score_mean(&offline);
    let speedup = online.processing_sec.max(f64::MIN_POSITIVE);
    let speedup = offline.processing_sec / speedup;

    let mut extras = args.scene.describe();
    extras.push((
        "scene_overlap_measured".into(),
        format!("{:.4}", measured_overlap(&scene.segments)),
    ));
    extras.push(("threads".into(), args.engine.threads.to_string()));
    extras.push((
        "online_processing_sec".into(),
        format!("{:.6}", online.processing_sec),
    ));
    extras.push((
        "offline_processing_sec".into(),
        format!("{:.6}", offline.processing_sec),
    ));
    extras.push(("speedup".into(), format!("{speedup:.3}")));
    if let Some(rtf) = offline_rtf(&offline) {
        extras.push(("offline_rtf".into(), format!("{rtf:.6}")));
    }
    if let Some(mean) = online_mean {
        extras.push(("mean_si_sdr_online".into(), format!("{mean:.3}")));
    }
    if let Some(mean) = offline_mean {
        extras.push(("mean_si_sdr_offline".into(), format!("{mean:.3}")));
    }

    let records = online
        .utterances
        .iter()
        .map(|utt| UttRecord {
            speaker: utt.speaker.clone(),
            start_sec: utt.start_sec(&stft),
            end_sec: utt.end_sec(&stft),
            path: None,
            si_sdr_db: reference_by_label
                .get(&utt.speaker)
                .and_then(|reference| driver::score_utterance(utt, reference)),
        })
        .collect();

    let report = RunReport {
        mode: "bench".into(),
        audio_duration_sec: online.audio_sec,
        speech_duration_sec: online.speech_sec,
        processing_sec: online.processing_sec,
        lookahead_violations: online.lookahead_violations,
        extras,
        records,
    };
    print!("{}", report.render());
    if let Some(path) = &args.report {
        report.write(path)?;
    }
    Ok(())
}

fn offline_rtf(outcome: &RunOutcome) -> Option<f64> {
    if outcome.speech_sec > 0.0 {
        Some(outcome.processing_sec / outcome.speech_sec)
    } else {
        None
    }
}

fn scene(args: SceneArgs) -> Result<()> {
    let spec = args.scene.spec();
    let scene = generate_scene(&spec)?;
    let paths = scenes::write_scene(&args.out, &scene)?;
    for (key, value) in args.scene.describe() {
        println!("{key}={value}");
    }
    println!(
        "scene_overlap_measured={:.4}",
        measured_overlap(&scene.segments)
    );
    println!("utterance_count={}", scene.segments.entries.len());
    println!("mixture={}", paths.mixture.display());
    println!("segments={}", paths.segments.display());
    for (speaker, path) in &paths.references {
        println!("reference_{speaker}={}", path.display());
    }
    Ok(())
}

fn load_references(
    dir: &std::path::Path,
    activity: &ActivityMatrix,
) -> Result<HashMap<String, Vec<f64>>> {
    let mut references = HashMap::new();
    for label in activity.labels() {
        let path = dir.join(format!("{label}.wav"));
        if !path.exists() {
            bail!("no reference for speaker '{label}' at {}", path.display());
        }
        let (channels, rate) = wav::read_wav(&path)?;
        if rate != wav::REQUIRED_SAMPLE_RATE {
            bail!("{}: sample rate {rate} Hz", path.display());
        }
        if channels.len() != 1 {
            bail!("{}: references must be mono", path.display());
        }
        references.insert(label.clone(), channels.into_iter().next().unwrap());
    }
    Ok(references)
}

fn utterance_file_name(utterance: &EmittedUtterance, stft: &StftConfig) -> String {
    let start_ms = (utterance.start_sec(stft) * 1000.0).round() as u64;
    let end_ms = (utterance.end_sec(stft) * 1000.0).round() as u64;
    let speaker: String = utterance
        .speaker
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect();
    format!("{speaker}_{start_ms}_{end_ms}.wav")
}
