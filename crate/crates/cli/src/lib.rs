//! Command surface: corpus generation, training, synthesis, evaluation,
//! timestep ablation and plot-data export.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use diffgan_tts::analysis::{ablate_timesteps, export_plot_data, format_ablation_table, griffin_lim, PlotPair};
use diffgan_tts::config::RunConfig;
use diffgan_tts::corpus::{
    generate_synthetic_corpus, load_dataset, save_dataset, write_matrix, CorpusSpec, Dataset, MelConfig,
};
use diffgan_tts::engine::{
    build_vocab, evaluate_mel_mae, evaluate_style, fit, load_checkpoint, load_model, synthesize, synthesize_batch,
    warm_start_style, Model, ModelConfig, StyleSource, SynthesisRequest, TrainState,
};
use diffgan_tts::generator::PhonemeSequence;
use diffgan_tts::style::STYLE_DIM;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "diffgan-tts",
    version,
    about = "Few-step diffusion-GAN TTS with style prompts",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic style-factored corpus
    GenCorpus(GenCorpusArgs),
    /// Train on a dataset directory
    Train(TrainArgs),
    /// Synthesize a mel-spectrogram from phonemes and a style prompt
    Synthesize(SynthesizeArgs),
    /// Score style accuracy and mel error on an evaluation set
    Evaluate(EvalArgs),
    /// Evaluate the same checkpoint with several sampling step counts
    Ablate(AblateArgs),
    /// Export pitch/energy curves and mel matrices for plotting
    ExportPlots(ExportArgs),
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    noise_std: f64,
    #[arg(long, default_value_t = 40)]
    phoneme_vocab: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Micro,
    Full,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run config; a preset is used when absent
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Dataset directory (overrides `data.train`)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Style-encoder classification steps before GAN training (fresh runs only)
    #[arg(long)]
    style_pretrain_steps: Option<u64>,
    /// Diffusion steps T
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from this checkpoint directory
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required_unless_present = "style_embedding", conflicts_with = "style_embedding")]
    prompt: Option<String>,
    /// File of 128 whitespace-separated floats
    #[arg(long)]
    style_embedding: Option<PathBuf>,
    /// File of whitespace-separated phoneme ids
    #[arg(long)]
    text_phonemes: PathBuf,
    /// Output mel matrix (rows = frames)
    #[arg(long)]
    out: PathBuf,
    /// Sampling steps (defaults to the trained T)
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a Griffin-Lim waveform here
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    gl_iters: usize,
}

#[derive(Args, Debug)]
struct EvalCommon {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation dataset directory
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Report directory (defaults to `reports/` of the checkpoint's run)
    #[arg(long)]
    reports: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    timesteps: Vec<usize>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long)]
    steps: Option<usize>,
    /// Export at most this many utterances
    #[arg(long, default_value_t = 4)]
    limit: usize,
    /// Also write PGM heatmaps
    #[arg(long)]
    heatmaps: bool,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                _ => {
                    eprintln!("{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportPlots(a) => export(a),
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let spec = CorpusSpec {
        n_utterances: a.n,
        seed: a.seed,
        noise_std: a.noise_std,
        phoneme_vocab_size: a.phoneme_vocab,
        ..Default::default()
    };
    let utts = generate_synthetic_corpus(&spec)?;
    save_dataset(&utts, &MelConfig::default(), &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} utterances to {}", utts.len(), a.out.display());
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let from_file = a.config.is_some();
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_model(match a.preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::Micro => ModelConfig::micro(),
            Preset::Full => ModelConfig::full(),
        }),
    };
    if let Some(d) = a.data {
        cfg.data.train = Some(d);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.train.checkpoint_every = c;
    }
    if let Some(n) = a.style_pretrain_steps {
        cfg.train.style_pretrain_steps = n;
    }
    if let Some(t) = a.steps {
        cfg.schedule.steps = t;
    }
    let data_dir = cfg.data.train.clone().context("no training data: pass --data or set data.train")?;
    let data = load_data(&data_dir)?;
    if data.utterances.is_empty() {
        bail!("dataset {} is empty", data_dir.display());
    }
    let bins = data.utterances[0].mel.bins;
    if !from_file && cfg.generator.mel_bins != bins {
        cfg.generator.mel_bins = bins;
        cfg.discriminator.mel_bins = bins;
    }

    let state = match &a.resume {
        Some(ckpt) => {
            let mut s = load_checkpoint(ckpt)?;
            s.train.max_steps = cfg.train.max_steps;
            s.train.checkpoint_every = cfg.train.checkpoint_every;
            let m = &s.model.cfg;
            cfg.schedule = m.schedule;
            cfg.generator = m.generator.clone();
            cfg.discriminator = m.discriminator.clone();
            cfg.style = m.style.clone();
            cfg.train = s.train.clone();
            s
        }
        None => {
            let mut model_cfg = cfg.model();
            model_cfg.calibrate(&data.utterances);
            cfg.generator = model_cfg.generator.clone();
            cfg.validate()?;
            let model = Model::new(&model_cfg, build_vocab(&data.utterances), cfg.seed(), DType::F32)?;
            let state = TrainState::new(model, cfg.train.clone())?;
            if let Some(last) = warm_start_style(&state, &data.utterances)?.last() {
                println!("style encoder pretrained for {} steps: loss {last:.4}", cfg.train.style_pretrain_steps);
            }
            state
        }
    };
    fs::create_dir_all(&a.run_dir).with_context(|| format!("creating {}", a.run_dir.display()))?;
    cfg.save(&a.run_dir.join("config.toml"))?;
    let start = state.step;
    let out = fit(state, &data.utterances, Some(&a.run_dir))?;
    match out.metrics.last() {
        Some(m) => println!(
            "trained steps {}..{}: loss_g {:.4} mel {:.4} loss_d {:.4}",
            start + 1,
            out.state.step,
            m.loss_g,
            m.mel,
            m.loss_d
        ),
        None => println!("nothing to do: checkpoint is already at step {}", out.state.step),
    }
    Ok(())
}

fn read_numbers<T: std::str::FromStr>(path: &Path) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|w| w.parse::<T>().with_context(|| format!("{}: bad value `{w}`", path.display())))
        .collect()
}

fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec =
        hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).with_context(|| format!("creating {}", path.display()))?;
    let peak = samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    let gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    for s in samples {
        w.write_sample((s * gain * i16::MAX as f32) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

fn synthesize_cmd(a: SynthesizeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ids: Vec<u32> = read_numbers(&a.text_phonemes)?;
    let style = match (&a.prompt, &a.style_embedding) {
        (Some(p), _) => StyleSource::Prompt(p.clone()),
        (None, Some(path)) => {
            let v: Vec<f32> = read_numbers(path)?;
            if v.len() != STYLE_DIM {
                bail!("{}: expected {STYLE_DIM} values, found {}", path.display(), v.len());
            }
            StyleSource::Embedding(v)
        }
        (None, None) => unreachable!("clap requires one style source"),
    };
    let mel = synthesize(&model, &PhonemeSequence::new(ids), style, a.steps, a.seed)?;
    write_matrix(&a.out, mel.frames, mel.bins, &mel.data)?;
    println!("wrote {}x{} mel to {}", mel.frames, mel.bins, a.out.display());
    if let Some(wav) = &a.wav {
        let mel_cfg = MelConfig { mel_bins: mel.bins, ..MelConfig::default() };
        let samples = griffin_lim(&mel, &mel_cfg, a.gl_iters)?;
        write_wav(wav, &samples, mel_cfg.sample_rate)?;
        println!("wrote {} samples to {}", samples.len(), wav.display());
    }
    Ok(())
}

/// `run/checkpoints/step-N` reports into `run/reports`; anything else into `./reports`.
fn report_dir(common: &EvalCommon) -> PathBuf {
    if let Some(r) = &common.reports {
        return r.clone();
    }
    let parent = common.checkpoint.parent();
    match parent.and_then(|p| p.file_name()).and_then(|n| n.to_str()) {
        Some("checkpoints") => parent.and_then(Path::parent).unwrap_or(Path::new(".")).join("reports"),
        _ => PathBuf::from("reports"),
    }
}

fn write_report(dir: &Path, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn open(common: &EvalCommon) -> Result<(Model, Dataset)> {
    let model = load_model(&common.checkpoint).with_context(|| format!("loading {}", common.checkpoint.display()))?;
    let data = load_data(&common.data)?;
    if data.utterances.is_empty() {
        bail!("dataset {} is empty", common.data.display());
    }
    Ok((model, data))
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let c = &a.common;
    let (model, data) = open(c)?;
    let (report, _) = evaluate_style(&model, &data.utterances, a.steps, c.seed, c.batch)?;
    let mae = evaluate_mel_mae(&model, &data.utterances, a.steps, c.seed, c.batch)?;
    for (f, acc) in &report.per_factor {
        println!("{f:>8}  {acc:.4}");
    }
    println!("{:>8}  {:.4}  (n = {})", "mean", report.mean, report.n);
    println!("mel MAE {mae:.5}");
    let value =
        serde_json::json!({ "style": report, "mel_mae": mae, "steps": a.steps.unwrap_or(model.schedule.steps()) });
    let path = write_report(&report_dir(c), "evaluation.json", &value)?;
    println!("report: {}", path.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let c = &a.common;
    let (model, data) = open(c)?;
    let rows = ablate_timesteps(&model, &data.utterances, &a.timesteps, c.seed, c.batch)?;
    let table = format_ablation_table(&rows);
    print!("{table}");
    let dir = report_dir(c);
    let path = write_report(&dir, "ablation.json", &serde_json::to_value(&rows)?)?;
    fs::write(dir.join("ablation.txt"), &table).with_context(|| format!("writing {}", dir.display()))?;
    println!("report: {}", path.display());
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let c = &a.common;
    let (model, data) = open(c)?;
    let utts = &data.utterances[..a.limit.min(data.utterances.len())];
    let mut pairs = Vec::with_capacity(utts.len());
    for (k, chunk) in utts.chunks(c.batch.max(1)).enumerate() {
        let reqs: Vec<SynthesisRequest> = chunk
            .iter()
            .map(|u| SynthesisRequest {
                phonemes: u.phonemes.clone(),
                style: StyleSource::Prompt(u.prompt.text.clone()),
                targets: Some(u.variance()),
            })
            .collect();
        let out = synthesize_batch(&model, &reqs, a.steps, c.seed.wrapping_add(k as u64))?;
        pairs.extend(out.into_iter().zip(chunk).map(|(o, u)| PlotPair {
            id: u.id.clone(),
            generated: o.mel,
            ground_truth: u.mel.clone(),
        }));
    }
    let dir = report_dir(c).join("plots");
    let files = export_plot_data(&pairs, &dir, a.heatmaps)?;
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}
