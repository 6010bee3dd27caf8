//! Command-line surface: feature extraction, both training loops, schedule
//! search, vocoding, evaluation and benchmarking.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Logs go to
//! stderr, data only to user-specified paths.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::audio::stft::StftConfig;
use crate::audio::{read_wav, write_wav, AudioBuffer, FeatureExtractor};
use crate::config::CliConfig;
use crate::diffusion::{
    align_schedule, noise_schedule_search, ConstRatio, NoiseRatio, SamplingSchedule, ScheduleFile,
    ScheduleSource, SchedulerHyper,
};
use crate::error::{Error, Result};
use crate::metrics::{metrics, ndb_jsd};
use crate::phi::{NoisePredictor, PhiConfig, PhiRatio};
use crate::refiner::{Refiner, RefinerConfig, RefinerEps};
use crate::rng::Rng;
use crate::sample::{rtf_bench, sample, SampleMode};
use crate::tensor::Tensor;
use crate::train::{
    load_checkpoint, load_wav_dir, save_checkpoint, store_checksum, train_noise_predictor,
    train_refiner, write_loss_csv, Checkpoint,
};

#[derive(Parser)]
#[command(
    name = "diffvox",
    version,
    about = "Conditional diffusion vocoder: train, search schedules, synthesize, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract a log-mel conditioning file from a WAV
    Mel(MelArgs),
    /// Train the refinement network
    TrainRefiner(TrainRefinerArgs),
    /// Train the noise-schedule predictor against a frozen refiner
    TrainScheduler(TrainSchedulerArgs),
    /// Run the iterative noise-schedule search and write an aligned schedule
    SearchSchedule(SearchArgs),
    /// Synthesize a waveform from a mel file
    Vocode(VocodeArgs),
    /// Compare a generated waveform against a reference
    Eval(EvalArgs),
    /// Benchmark synthesis speed
    Bench(BenchArgs),
}

#[derive(Args)]
struct MelArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, default_value_t = 1024)]
    fft: usize,
    #[arg(long, default_value_t = 1024)]
    win: usize,
    #[arg(long, default_value_t = 256)]
    hop: usize,
    #[arg(long, default_value_t = 80)]
    bands: usize,
    #[arg(long, default_value_t = 0.0)]
    fmin: f64,
    #[arg(long, default_value_t = 8000.0)]
    fmax: f64,
}

#[derive(Args)]
struct TrainRefinerArgs {
    /// Directory of training WAV files
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path
    #[arg(long = "out")]
    output: PathBuf,
    /// TOML/JSON config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_len: Option<usize>,
    /// Refiner hidden channels (architecture override)
    #[arg(long)]
    hidden: Option<usize>,
    /// Train on continuous noise levels instead of discrete steps
    #[arg(long)]
    continuous: bool,
    /// Loss trace CSV path (default: <out>.loss.csv)
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSchedulerArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained refiner checkpoint (stays frozen)
    #[arg(long)]
    theta: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    theta: PathBuf,
    /// Trained predictor checkpoint
    #[arg(long, conflicts_with = "phi_const")]
    phi: Option<PathBuf>,
    /// Constant stand-in ratio instead of a trained predictor
    #[arg(long)]
    phi_const: Option<f64>,
    /// Seed utterance for the search context (silence when omitted)
    #[arg(long)]
    seed_wav: Option<PathBuf>,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 0.54)]
    alpha_hat: f64,
    #[arg(long, default_value_t = 0.70)]
    beta_hat: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(alias = "discrete_aligned")]
    DiscreteAligned,
    #[value(alias = "discrete_full")]
    DiscreteFull,
    Continuous,
}

impl From<ModeArg> for SampleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::DiscreteAligned => SampleMode::DiscreteAligned,
            ModeArg::DiscreteFull => SampleMode::DiscreteFull,
            ModeArg::Continuous => SampleMode::Continuous,
        }
    }
}

#[derive(Args)]
struct VocodeArgs {
    #[arg(long)]
    mel: PathBuf,
    #[arg(long)]
    theta: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "discrete-aligned")]
    mode: ModeArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "gen")]
    generated: PathBuf,
    /// Directory of training WAVs for the NDB/JSD diversity pair
    #[arg(long)]
    ndb_train: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    ndb_k: usize,
    #[arg(long, default_value_t = 0.05)]
    ndb_alpha: f64,
    /// Write the JSON report here instead of stdout
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    theta: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long)]
    mel: PathBuf,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, value_enum, default_value = "discrete-aligned")]
    mode: ModeArg,
}

/// Entry point returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Mel(a) => cmd_mel(a),
        Cmd::TrainRefiner(a) => cmd_train_refiner(a),
        Cmd::TrainScheduler(a) => cmd_train_scheduler(a),
        Cmd::SearchSchedule(a) => cmd_search_schedule(a),
        Cmd::Vocode(a) => cmd_vocode(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::UnsupportedFormat(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn require_input(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<CliConfig> {
    match path {
        Some(p) => {
            require_input(p)?;
            CliConfig::load(p)
        }
        None => Ok(CliConfig::default()),
    }
}

fn load_refiner_checkpoint(path: &Path) -> Result<(Refiner, Checkpoint)> {
    require_input(path)?;
    let ck = load_checkpoint(path)?;
    if ck.kind != "refiner" {
        return Err(Error::InvalidConfig(format!(
            "{} holds a '{}' checkpoint, expected 'refiner'",
            path.display(),
            ck.kind
        )));
    }
    let cfg: RefinerConfig = ck.typed_config()?;
    let refiner = Refiner::new(cfg)?;
    let expected = {
        let mut rng = Rng::seed_from_u64(0);
        refiner.init_params(&mut rng, true)
    };
    ck.verify_against(&expected)?;
    Ok((refiner, ck))
}

fn load_phi_checkpoint(path: &Path) -> Result<(NoisePredictor, Checkpoint)> {
    require_input(path)?;
    let ck = load_checkpoint(path)?;
    if ck.kind != "noise_predictor" {
        return Err(Error::InvalidConfig(format!(
            "{} holds a '{}' checkpoint, expected 'noise_predictor'",
            path.display(),
            ck.kind
        )));
    }
    let cfg: PhiConfig = ck.typed_config()?;
    let phi = NoisePredictor::new(cfg)?;
    Ok((phi, ck))
}

fn cmd_mel(a: MelArgs) -> Result<()> {
    require_input(&a.input)?;
    let buf = read_wav(&a.input)?;
    let stft = StftConfig {
        fft_size: a.fft,
        win_size: a.win,
        hop_size: a.hop,
        window: crate::audio::stft::WindowKind::Hann,
    };
    let features = FeatureExtractor::new(stft, a.bands, buf.sample_rate_hz, a.fmin, a.fmax)?;
    let mel = features.extract(&buf)?;
    crate::audio::mel::write_mel(&mel, &a.output)?;
    println!("frames: {}", mel.num_frames);
    Ok(())
}

fn cmd_train_refiner(a: TrainRefinerArgs) -> Result<()> {
    require_input(&a.data)?;
    let mut cfg = load_config(&a.config)?;
    if let Some(h) = a.hidden {
        cfg.refiner.hidden_channels = h;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.clip_len {
        cfg.train.clip_len = v;
    }
    if a.continuous {
        cfg.train.continuous = true;
    }
    cfg.validate()?;

    let dataset = load_wav_dir(&a.data)?;
    let sr = dataset[0].sample_rate_hz;
    let features = FeatureExtractor::new(
        cfg.stft,
        cfg.refiner.mel_bands,
        sr,
        cfg.features.fmin_hz,
        cfg.features.fmax_hz,
    )?;
    let sched = cfg.schedule.build()?;
    let refiner = Refiner::new(cfg.refiner.clone())?;
    let mut rng = Rng::seed_from_u64(cfg.train.seed);
    let mut store = refiner.init_params(&mut rng, true);

    log::info!(
        "training refiner: {} clips, {} steps, {} parameters",
        dataset.len(),
        cfg.train.steps,
        store.num_scalars()
    );
    let trace = train_refiner(&dataset, &refiner, &mut store, &sched, &features, &cfg.train)?;
    save_checkpoint(
        &store,
        "refiner",
        serde_json::to_value(&cfg.refiner).expect("config serializes"),
        cfg.train.steps as u64,
        &a.output,
    )?;
    let csv = a
        .loss_csv
        .unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", a.output.display())));
    write_loss_csv(&trace, &csv)?;
    if let Some((step, loss)) = trace.last() {
        println!("final step {step} loss {loss:.6}");
    }
    println!("checkpoint: {}", a.output.display());
    Ok(())
}

fn cmd_train_scheduler(a: TrainSchedulerArgs) -> Result<()> {
    require_input(&a.data)?;
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.tau {
        cfg.train.tau = v;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }

    let (refiner, theta_ck) = load_refiner_checkpoint(&a.theta)?;
    let theta_store = theta_ck.store;
    let checksum_before = store_checksum(&theta_store);
    println!("theta checksum before: {checksum_before:#010x}");

    let dataset = load_wav_dir(&a.data)?;
    let sr = dataset[0].sample_rate_hz;
    let features = FeatureExtractor::new(
        cfg.stft,
        refiner.cfg.mel_bands,
        sr,
        cfg.features.fmin_hz,
        cfg.features.fmax_hz,
    )?;
    let sched = cfg.schedule.build()?;
    let phi = NoisePredictor::new(cfg.phi.clone())?;
    let mut rng = Rng::seed_from_u64(cfg.train.seed);
    let mut phi_store = phi.init_params(&mut rng);

    let trace = train_noise_predictor(
        &dataset,
        &phi,
        &mut phi_store,
        &refiner,
        &theta_store,
        &sched,
        &features,
        &cfg.train,
    )?;
    let checksum_after = store_checksum(&theta_store);
    println!("theta checksum after:  {checksum_after:#010x}");
    if checksum_before != checksum_after {
        return Err(Error::Constraint(
            "refiner parameters changed during predictor training".into(),
        ));
    }
    save_checkpoint(
        &phi_store,
        "noise_predictor",
        serde_json::to_value(&cfg.phi).expect("config serializes"),
        cfg.train.steps as u64,
        &a.output,
    )?;
    let csv = a
        .loss_csv
        .unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", a.output.display())));
    write_loss_csv(&trace, &csv)?;
    if let Some((step, loss)) = trace.last() {
        println!("final step {step} loss {loss:.6}");
    }
    println!("checkpoint: {}", a.output.display());
    Ok(())
}

fn cmd_search_schedule(a: SearchArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (refiner, theta_ck) = load_refiner_checkpoint(&a.theta)?;
    let train_sched = cfg.schedule.build()?;
    let hyper = SchedulerHyper {
        tau: cfg.train.tau,
        alpha_hat_n: a.alpha_hat,
        beta_hat_n: a.beta_hat,
        n: a.n,
    };

    // seed context: a real utterance, or one second of silence
    let seed_audio = match &a.seed_wav {
        Some(p) => {
            require_input(p)?;
            read_wav(p)?
        }
        None => AudioBuffer::new(vec![0.0; 22050], 22050)?,
    };
    let features = FeatureExtractor::new(
        cfg.stft,
        refiner.cfg.mel_bands,
        seed_audio.sample_rate_hz,
        cfg.features.fmin_hz,
        cfg.features.fmax_hz,
    )?;
    let mel = features.extract(&seed_audio)?;
    let target_len = mel.paired_samples();
    let mut samples = seed_audio.samples.clone();
    samples.resize(target_len, 0.0);
    let x0 = Tensor::new(vec![1, target_len], samples)?;
    let cond = mel.to_conditioning_tensor();

    let mut rng = Rng::seed_from_u64(a.seed);
    let eps = rng.normal_tensor(x0.shape());
    let mut x_init = x0.scale(a.alpha_hat);
    x_init.axpy((1.0 - a.alpha_hat * a.alpha_hat).sqrt(), &eps);

    let theta = RefinerEps {
        refiner: &refiner,
        store: &theta_ck.store,
        cond: &cond,
    };
    let phi_ck;
    let stub;
    let phi_fn: &dyn NoiseRatio = match (&a.phi, a.phi_const) {
        (Some(p), None) => {
            phi_ck = load_phi_checkpoint(p)?;
            Box::leak(Box::new(PhiRatio {
                phi: Box::leak(Box::new(phi_ck.0)),
                store: &phi_ck.1.store,
            }))
        }
        (None, Some(c)) => {
            if !(0.0 < c && c < 1.0) {
                return Err(Error::InvalidConfig(
                    "--phi-const must lie in (0, 1)".into(),
                ));
            }
            stub = ConstRatio(c);
            &stub
        }
        _ => {
            return Err(Error::InvalidConfig(
                "exactly one of --phi / --phi-const is required".into(),
            ))
        }
    };

    let beta_hat =
        noise_schedule_search(&theta, phi_fn, &hyper, &train_sched, &x_init, &mut rng)?;
    let aligned = align_schedule(&beta_hat, &train_sched)?;
    let file = ScheduleFile {
        t: cfg.schedule.t,
        beta_lo: cfg.schedule.beta_lo,
        beta_hi: cfg.schedule.beta_hi,
        beta_hat: aligned.beta_hat.clone(),
        t_m: aligned.t_m.clone().expect("aligned above"),
        source: ScheduleSource::Predictor,
    };
    file.save(&a.output)?;
    println!("schedule length: {}", file.beta_hat.len());
    for (s, (b, t)) in file.beta_hat.iter().zip(&file.t_m).enumerate() {
        println!("  s={} beta_hat={b:.6e} t_m={t:.3}", s + 1);
    }
    println!("written: {}", a.output.display());
    Ok(())
}

fn cmd_vocode(a: VocodeArgs) -> Result<()> {
    require_input(&a.mel)?;
    require_input(&a.schedule)?;
    let (refiner, theta_ck) = load_refiner_checkpoint(&a.theta)?;
    let mel = crate::audio::mel::read_mel(&a.mel)?;
    let file = ScheduleFile::load(&a.schedule)?;
    let mode: SampleMode = a.mode.into();
    let sched = match mode {
        SampleMode::DiscreteFull => SamplingSchedule::from_training(&file.training_schedule()?),
        _ => file.sampling_schedule()?,
    };
    let (audio, stats) = sample(&refiner, &theta_ck.store, &mel, &sched, a.seed, mode)?;
    write_wav(&audio, &a.output)?;
    let rtf = stats.wall.as_secs_f64() / audio.duration_secs();
    println!(
        "steps: {}  rtf: {:.4}  samples: {}",
        stats.refiner_evals,
        rtf,
        audio.len()
    );
    Ok(())
}

fn mel_frames_of_dir(dir: &Path, stft: StftConfig, bands: usize) -> Result<Vec<Vec<f64>>> {
    let clips = load_wav_dir(dir)?;
    let mut frames = Vec::new();
    for clip in &clips {
        let features = FeatureExtractor::with_defaults(stft, bands, clip.sample_rate_hz)?;
        let mel = features.extract(clip)?;
        for f in 0..mel.num_frames {
            frames.push(mel.frame(f).to_vec());
        }
    }
    Ok(frames)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    require_input(&a.reference)?;
    require_input(&a.generated)?;
    let reference = read_wav(&a.reference)?;
    let generated = read_wav(&a.generated)?;
    let n = reference.len().min(generated.len());
    let reference = AudioBuffer::new(reference.samples[..n].to_vec(), reference.sample_rate_hz)?;
    let generated = AudioBuffer::new(generated.samples[..n].to_vec(), generated.sample_rate_hz)?;
    let mut report = metrics(&reference, &generated)?;

    if let Some(train_dir) = &a.ndb_train {
        require_input(train_dir)?;
        let stft = StftConfig::default();
        let train_frames = mel_frames_of_dir(train_dir, stft, 80)?;
        let features = FeatureExtractor::with_defaults(stft, 80, generated.sample_rate_hz)?;
        let gen_mel = features.extract(&generated)?;
        let gen_frames: Vec<Vec<f64>> = (0..gen_mel.num_frames)
            .map(|f| gen_mel.frame(f).to_vec())
            .collect();
        let k = a.ndb_k.min(train_frames.len());
        let (ndb, jsd) = ndb_jsd(&train_frames, &gen_frames, k, a.ndb_alpha, 0)?;
        report.ndb = Some(ndb);
        report.jsd = Some(jsd);
    }
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Other(format!("report serialization: {e}")))?;
    match &a.output {
        Some(p) => std::fs::write(p, &json).map_err(|e| Error::io(p, e))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    require_input(&a.mel)?;
    require_input(&a.schedule)?;
    let (refiner, theta_ck) = load_refiner_checkpoint(&a.theta)?;
    let mel = crate::audio::mel::read_mel(&a.mel)?;
    let file = ScheduleFile::load(&a.schedule)?;
    let mode: SampleMode = a.mode.into();
    let sched = match mode {
        SampleMode::DiscreteFull => SamplingSchedule::from_training(&file.training_schedule()?),
        _ => file.sampling_schedule()?,
    };
    let report = rtf_bench(&refiner, &theta_ck.store, &mel, &sched, mode, a.repeats)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Other(format!("report serialization: {e}")))?;
    println!("{json}");
    Ok(())
}
