use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use corrnet::config::KvConfig;
use corrnet::css::{run_css, second_stage_examples, separate_waveform, ChunkSchedule, Separator, TwoStage};
use corrnet::eval::{breakdown_by_kind, costs_per_second, evaluate, CostReport, RunMode};
use corrnet::mixsim::{generate_dataset, read_manifest, SceneConfig, MANIFEST_FILE};
use corrnet::model::{HeadMode, ModelConfig, TfCorrNet};
use corrnet::stft::StftConfig;
use corrnet::training::{load_model, Checkpoint, Example, TrainConfig, Trainer};
use corrnet::wav::{read_wav, write_wav, WavFormat};
use corrnet::{Error, Result};

#[derive(Parser)]
#[command(name = "corrnet", version, about = "Correlation-input multi-channel speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic reverberant dataset with a manifest.
    Simulate(SimulateArgs),
    /// Train a first-stage separator or a second-stage enhancer.
    Train(TrainArgs),
    /// Separate one multi-channel WAV file.
    Separate(SeparateArgs),
    /// Score a checkpoint on a dataset and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Show a checkpoint's configuration and the cost of a configuration.
    Inspect(InspectArgs),
}

/// `--config` file with `--set` overrides on top.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<KvConfig> {
        let mut kv = match &self.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory; one subdirectory per example plus `manifest.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    First,
    Second,
}

#[derive(Args)]
struct TrainArgs {
    /// Training set directory (with `manifest.jsonl`).
    #[arg(long)]
    data: PathBuf,
    /// Validation set directory; drives the plateau schedule.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Stage::First)]
    stage: Stage,
    /// Trained first-stage checkpoint (second stage only).
    #[arg(long)]
    first: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Single,
    Css,
}

#[derive(Args, Clone)]
struct SeparatorArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Second-stage checkpoint; enables beamforming plus enhancement.
    #[arg(long)]
    second: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Single)]
    mode: Mode,
    /// CSS window history, seconds.
    #[arg(long, default_value_t = 1.2)]
    history: f64,
    /// CSS emitted block (window hop), seconds.
    #[arg(long, default_value_t = 0.8)]
    current: f64,
    /// CSS look-ahead, seconds.
    #[arg(long, default_value_t = 0.4)]
    future: f64,
}

impl SeparatorArgs {
    fn schedule(&self) -> ChunkSchedule {
        ChunkSchedule {
            history: self.history,
            current: self.current,
            future: self.future,
        }
    }

    fn run_mode(&self) -> RunMode {
        match self.mode {
            Mode::Single => RunMode::Single,
            Mode::Css => RunMode::Css(self.schedule()),
        }
    }
}

#[derive(Args)]
struct SeparateArgs {
    #[command(flatten)]
    sep: SeparatorArgs,
    /// Multi-channel input WAV.
    #[arg(long)]
    input: PathBuf,
    /// Directory for `stream{k}.wav` (and `css_log.jsonl` in CSS mode).
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    sep: SeparatorArgs,
    /// Dataset directory (with `manifest.jsonl`).
    #[arg(long)]
    data: PathBuf,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reference microphone scored against the targets.
    #[arg(long, default_value_t = 0)]
    reference: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to describe; otherwise the configuration from `--config`/`--set`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sample rate for the per-second cost figures.
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    /// STFT hop for the per-second cost figures.
    #[arg(long, default_value_t = 128)]
    hop: usize,
    /// Print the cost report as JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Separate(a) => separate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = SceneConfig::from_kv(&a.cfg.load()?)?;
    let t = Instant::now();
    let records = generate_dataset(&a.out, &cfg, a.count, a.seed)?;
    eprintln!(
        "wrote {} examples to {} in {:.1} s",
        records.len(),
        a.out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_set(dir: &Path) -> Result<Vec<(String, Example)>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Config(format!("no {MANIFEST_FILE} in {}", dir.display())));
    }
    read_manifest(&path)?
        .into_iter()
        .map(|r| Ok((r.id.clone(), r.load(dir)?)))
        .collect()
}

fn examples(set: Vec<(String, Example)>) -> Vec<Example> {
    set.into_iter().map(|(_, e)| e).collect()
}

/// Fill geometry keys the user left unset from the data.
fn default_geometry(kv: &mut KvConfig, data: &[Example]) {
    if let Some(ex) = data.first() {
        if kv.raw("mics").is_none() {
            kv.set("mics", ex.mixture.channels());
        }
        if kv.raw("sources").is_none() {
            kv.set("sources", ex.targets.len());
        }
        if kv.raw("sample_rate").is_none() {
            kv.set("sample_rate", ex.mixture.sample_rate());
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut kv = a.cfg.load()?;
    if let Some(s) = a.steps {
        kv.set("steps", s);
    }
    if let Some(s) = a.seed {
        kv.set("seed", s);
    }
    let mut train_set = examples(load_set(&a.data)?);
    let mut val_set = match &a.val {
        Some(d) => examples(load_set(d)?),
        None => Vec::new(),
    };

    let mut trainer: Trainer<f32> = if let Some(path) = &a.resume {
        let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
        // only the schedule length may change on resume
        if let Some(s) = kv.get::<usize>("steps")? {
            t.cfg.steps = s;
        }
        t
    } else {
        let tc = TrainConfig::from_kv(&kv)?;
        if a.stage == Stage::Second {
            let first_path = a
                .first
                .as_ref()
                .ok_or_else(|| Error::Config("--stage second needs --first".into()))?;
            let first = load_model::<f32>(&Checkpoint::load(first_path)?)?;
            kv.set("mics", first.config().mics + 1);
            kv.set("sources", 1);
            kv.set("head_mode", HeadMode::Miso.as_str());
            eprintln!("beamforming {} training and {} validation examples", train_set.len(), val_set.len());
            train_set = second_stage_examples(&first, &train_set, tc.stft, 0)?;
            val_set = second_stage_examples(&first, &val_set, tc.stft, 0)?;
        } else {
            default_geometry(&mut kv, &train_set);
        }
        let model = TfCorrNet::<f32>::new(ModelConfig::from_kv(&kv)?, tc.seed)?;
        Trainer::new(model, tc)
    };
    eprintln!(
        "training {} parameters for {} steps on {} examples",
        trainer.model.num_params(),
        trainer.cfg.steps,
        train_set.len()
    );
    let start = Instant::now();
    let (mut acc, mut n) = (0.0, 0usize);
    let log_every = a.log_every.max(1);
    trainer.fit(&train_set, &val_set, |r, val| {
        acc += r.loss;
        n += 1;
        if r.step as usize % log_every == 0 || val.is_some() {
            let v = val.map(|v| format!(" val {v:.4}")).unwrap_or_default();
            eprintln!(
                "step {:>6} loss {:.4}{v} grad {:.3} lr {:.2e} {:.0} s",
                r.step,
                acc / n as f64,
                r.grad_norm,
                r.lr,
                start.elapsed().as_secs_f64()
            );
            (acc, n) = (0.0, 0);
        }
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    trainer.to_checkpoint().save(&a.out)?;
    eprintln!("saved {}", a.out.display());
    Ok(())
}

/// Models named by the separator flags, plus the checkpoint's STFT.
struct Loaded {
    first: TfCorrNet<f32>,
    second: Option<TfCorrNet<f32>>,
    stft: StftConfig,
}

impl Loaded {
    fn open(a: &SeparatorArgs) -> Result<Self> {
        let ck = Checkpoint::load(&a.checkpoint)?;
        let stft = TrainConfig::from_kv(&ck.config)?.stft;
        let first = load_model(&ck)?;
        let second = match &a.second {
            Some(p) => Some(load_model(&Checkpoint::load(p)?)?),
            None => None,
        };
        Ok(Self { first, second, stft })
    }

    fn with<R>(&self, f: impl FnOnce(&(dyn Separator + Sync)) -> Result<R>) -> Result<R> {
        match &self.second {
            Some(second) => f(&TwoStage::new(&self.first, second)?),
            None => f(&self.first),
        }
    }
}

fn separate(a: SeparateArgs) -> Result<()> {
    let models = Loaded::open(&a.sep)?;
    let x = read_wav(&a.input)?;
    fs::create_dir_all(&a.out_dir)?;
    let streams = models.with(|sep| match a.sep.mode {
        Mode::Single => separate_waveform(sep, &x, models.stft),
        Mode::Css => {
            let out = run_css(sep, &x, models.stft, a.sep.schedule())?;
            fs::write(a.out_dir.join("css_log.jsonl"), out.log_jsonl()?)?;
            out.waveforms()
        }
    })?;
    for (k, s) in streams.iter().enumerate() {
        write_wav(a.out_dir.join(format!("stream{k}.wav")), s, WavFormat::Float32)?;
    }
    eprintln!("wrote {} streams to {}", streams.len(), a.out_dir.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let models = Loaded::open(&a.sep)?;
    let data = load_set(&a.data)?;
    let report = models.with(|sep| evaluate(sep, &data, models.stft, a.sep.run_mode(), a.reference, a.threads))?;
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    eprintln!(
        "{} examples: SDR {:.2} dB, SDRi {:.2} dB, SI-SDR {:.2} dB",
        report.examples.len(),
        report.mean_sdr,
        report.mean_sdri,
        report.mean_si_sdr
    );
    Ok(())
}

fn print_costs(r: &CostReport, sample_rate: u32, hop: usize) {
    println!(
        "parameters {:.3} M, {:.2} G MACs per second ({} frames per second at {} Hz, hop {})",
        r.params as f64 / 1e6,
        r.macs_per_second / 1e9,
        r.frames,
        sample_rate,
        hop
    );
    for m in breakdown_by_kind(r) {
        println!("  {:<10} {:>10} params {:>9.3} G/s", m.name, m.params, m.macs as f64 / 1e9);
    }
}

fn inspect(a: InspectArgs) -> Result<()> {
    let cfg = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            print!("{}", ck.config.to_text());
            let stored: usize = ck
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with("param/"))
                .map(|(_, t)| t.shape().iter().product::<usize>())
                .sum();
            println!("# {} entries, {} stored parameters", ck.entries.len(), stored);
            ModelConfig::from_kv(&ck.config)?
        }
        None => ModelConfig::from_kv(&a.cfg.load()?)?,
    };
    let report = costs_per_second(&cfg, a.sample_rate, a.hop);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_costs(&report, a.sample_rate, a.hop);
    }
    Ok(())
}
