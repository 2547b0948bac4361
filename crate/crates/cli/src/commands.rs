use std::fs;
use std::path::Path;
use std::process::ExitCode;

use ehdr_core::dataset::{capture_from_sequence, Capture, Sample, SampleConfig};
use ehdr_core::gradsuite::{run_gradient_suite, GRAD_TOLERANCE};
use ehdr_core::hdr::{merge_hdr, mu_law_image, TriangleWeights};
use ehdr_core::io::{
    list_sample_dirs, load_checkpoint, read_capture, read_frames, read_ldr, read_pfm, save_checkpoint, write_capture,
    write_events, write_ldr, write_pfm, write_png_rgb, Config,
};
use ehdr_core::metrics::{evaluate_pairs, psnr_mu, Report};
use ehdr_core::model::{EhdrConfig, EhdrModel, ModelInput};
use ehdr_core::scene::{make_dynamic_scene, Motion};
use ehdr_core::sim::{
    calibrate_threshold, simulate_events, synthesize_bracket, BracketSpec, NoiseModel, SimulatorConfig, TimedFrame,
};
use ehdr_core::training::{train, TrainConfig};
use ehdr_core::{EhdrError, HdrImage, Result};
use log::{info, warn};

use crate::{
    BracketsArgs, Cli, Command, EvaluateArgs, InferArgs, MergeArgs, SelftestArgs, SimulateArgs, TonemapArgs, TrainArgs,
};

const CHECKPOINT_DIR: &str = "checkpoint";
// Threshold search interval for rate calibration.
const THRESHOLD_RANGE: (f64, f64) = (0.01, 4.0);

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    match &cli.command {
        Command::Simulate(a) => simulate(a, &cfg, cli.seed),
        Command::Brackets(a) => brackets(a, &cfg, cli.seed),
        Command::MergeHdr(a) => merge(a),
        Command::Tonemap(a) => tonemap(a),
        Command::Train(a) => train_cmd(a, &cfg, cli.seed),
        Command::Infer(a) => infer(a, &cfg),
        Command::Evaluate(a) => evaluate(a, &cfg),
        Command::Gradcheck => gradcheck(cli.seed),
        Command::Selftest(a) => selftest(a, &cfg, cli.seed),
    }
}

fn usage(msg: &str) -> Result<ExitCode> {
    eprintln!("error: {msg}\n\nFor more information, try '--help'.");
    Ok(ExitCode::from(1))
}

fn noise_model(cfg: &Config, noiseless: bool) -> Result<NoiseModel> {
    let d = if noiseless { NoiseModel::noiseless() } else { NoiseModel::default() };
    Ok(NoiseModel {
        read_noise_sigma: cfg.parse_or("noise", "read_noise_sigma", d.read_noise_sigma)?,
        shot_noise_scale: cfg.parse_or("noise", "shot_noise_scale", d.shot_noise_scale)?,
        quantization_bits: cfg.parse_or("noise", "quantization_bits", d.quantization_bits)?,
    })
}

fn sample_config(cfg: &Config) -> Result<SampleConfig> {
    let d = SampleConfig::default();
    Ok(SampleConfig {
        width: cfg.parse_or("data", "width", d.width)?,
        height: cfg.parse_or("data", "height", d.height)?,
        noise: noise_model(cfg, false)?,
        sim: SimulatorConfig {
            contrast_threshold: cfg.parse_or("sim", "contrast_threshold", d.sim.contrast_threshold)?,
            log_eps: cfg.parse_or("sim", "log_eps", d.sim.log_eps)?,
            frame_skip: cfg.parse_or("sim", "frame_skip", d.sim.frame_skip)?,
        },
        chunks_per_window: cfg.parse_or("data", "chunks_per_window", d.chunks_per_window)?,
        speed: cfg.parse_or("data", "speed", d.speed)?,
        ..d
    })
}

fn model_config(cfg: &Config, flag: Option<usize>) -> Result<EhdrConfig> {
    let base = cfg.parse_or("model", "base_channels", EhdrConfig::default().base_channels)?;
    Ok(EhdrConfig {
        base_channels: flag.unwrap_or(base),
    })
}

// ---------------------------------------------------------------- simulate

fn simulate(a: &SimulateArgs, cfg: &Config, seed: u64) -> Result<ExitCode> {
    let mut scfg = sample_config(cfg)?;
    if let Some(c) = a.threshold {
        scfg.sim.contrast_threshold = c;
    }
    fs::create_dir_all(&a.out)?;
    if let Some(dir) = &a.frames {
        if a.count.is_some() || a.width.is_some() || a.height.is_some() || a.speed.is_some() || a.noiseless {
            return usage("--count, --width, --height, --speed and --noiseless apply to synthetic captures only");
        }
        let frames = read_frames(dir)?;
        if let Some(rate) = a.target_rate {
            scfg.sim.contrast_threshold = calibrate(&frames, &scfg.sim, rate)?;
        }
        let events = simulate_events(&frames, &scfg.sim)?;
        write_events(a.out.join("events.ehev"), &events)?;
        println!(
            "{} events from {} frames at C = {:.4} ({:.1} per frame interval)",
            events.len(),
            frames.len(),
            scfg.sim.contrast_threshold,
            events.len() as f64 / (frames.len() - 1) as f64
        );
        return Ok(ExitCode::SUCCESS);
    }
    scfg.width = a.width.unwrap_or(scfg.width);
    scfg.height = a.height.unwrap_or(scfg.height);
    scfg.speed = a.speed.unwrap_or(scfg.speed);
    if a.noiseless {
        scfg.noise = NoiseModel::noiseless();
    }
    for i in 0..a.count.unwrap_or(1) {
        let s = seed.wrapping_add(i as u64);
        let seq = make_dynamic_scene(s, scfg.width, scfg.height, Motion::random(s, scfg.speed), scfg.sim.frame_skip)?;
        let mut sim = scfg.clone();
        if let Some(rate) = a.target_rate {
            // calibrate on the radiance scale the events are simulated at
            let spec = BracketSpec::anchored(scfg.fstops.to_vec(), seq.bracket_frame(1))?;
            let k = spec.exposure_scale(spec.shortest_fstop());
            let frames: Vec<TimedFrame> = seq
                .frames
                .iter()
                .map(|f| TimedFrame {
                    t_us: f.t_us,
                    image: f.image.map(|v| v * k),
                })
                .collect();
            sim.sim.contrast_threshold = calibrate(&frames, &scfg.sim, rate)?;
        }
        let capture = capture_from_sequence(&seq, &sim, s)?;
        let dir = a.out.join(format!("capture_{i:03}"));
        write_capture(&dir, &capture)?;
        println!(
            "{}: {}x{}, {} events at C = {:.4}",
            dir.display(),
            scfg.width,
            scfg.height,
            capture.events.len(),
            sim.sim.contrast_threshold
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn calibrate(frames: &[TimedFrame], sim: &SimulatorConfig, rate: f64) -> Result<f64> {
    let c = calibrate_threshold(frames, sim, rate, THRESHOLD_RANGE.0, THRESHOLD_RANGE.1)?;
    info!(
        "calibrated C = {:.5} for {rate} events/frame (got {:.2} after {} steps)",
        c.threshold, c.rate, c.iterations
    );
    Ok(c.threshold)
}

// ---------------------------------------------------------------- brackets, merge, tonemap

fn brackets(a: &BracketsArgs, cfg: &Config, seed: u64) -> Result<ExitCode> {
    let hdr = read_pfm(&a.input)?;
    let spec = BracketSpec::anchored(a.fstops.clone(), &hdr)?;
    let noise = noise_model(cfg, a.noiseless)?;
    fs::create_dir_all(&a.out)?;
    for (i, &f) in a.fstops.iter().enumerate() {
        let ldr = synthesize_bracket(&hdr, f, &spec, &noise, seed.wrapping_add(i as u64))?;
        let path = a.out.join(format!("bracket_{f:+}.png"));
        write_ldr(&path, &ldr)?;
        println!("{} (exposure time {})", path.display(), ldr.exposure_time);
    }
    write_pfm(a.out.join("reference_normalized.pfm"), &spec.normalize(&hdr))?;
    Ok(ExitCode::SUCCESS)
}

fn merge(a: &MergeArgs) -> Result<ExitCode> {
    let brackets = a.inputs.iter().map(read_ldr).collect::<Result<Vec<_>>>()?;
    let merged = merge_hdr(&brackets, &TriangleWeights::for_brackets(&brackets))?;
    write_pfm(&a.out, &merged)?;
    Ok(ExitCode::SUCCESS)
}

fn tonemap(a: &TonemapArgs) -> Result<ExitCode> {
    if !(a.mu > 0.0) {
        return usage("--mu must be positive");
    }
    let img = read_pfm(&a.input)?;
    write_tonemapped(&a.out, &img, a.mu)?;
    Ok(ExitCode::SUCCESS)
}

fn write_tonemapped(path: &Path, img: &HdrImage, mu: f32) -> Result<()> {
    let t = mu_law_image(img, mu);
    write_png_rgb(path, t.width, t.height, &t.pixels)
}

// ---------------------------------------------------------------- train, infer, evaluate

fn load_dir(dir: &Path, chunks: u64) -> Result<Vec<(String, Capture, Option<Sample>)>> {
    let dirs = list_sample_dirs(dir)?;
    if dirs.is_empty() {
        return Err(EhdrError::Input(format!("no captures (events.ehev) under {}", dir.display())));
    }
    dirs.iter()
        .map(|d| {
            let capture = read_capture(d)?;
            let sample = if capture.ground_truth.is_some() { Some(capture.to_sample(chunks)?) } else { None };
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, capture, sample))
        })
        .collect()
}

fn train_cmd(a: &TrainArgs, cfg: &Config, seed: u64) -> Result<ExitCode> {
    let scfg = sample_config(cfg)?;
    let data: Vec<Sample> = match (&a.data, a.synthetic) {
        (Some(dir), _) => load_dir(dir, scfg.chunks_per_window)?
            .into_iter()
            .filter_map(|(name, _, s)| {
                if s.is_none() {
                    warn!("{name} has no ground truth; skipped");
                }
                s
            })
            .collect(),
        (None, Some(n)) => (0..n as u64)
            .map(|i| ehdr_core::dataset::build_sample(seed.wrapping_add(i), &scfg))
            .collect::<Result<_>>()?,
        (None, None) => return usage("train needs --data DIR or --synthetic N"),
    };
    if data.is_empty() {
        return Err(EhdrError::Input("no training captures with ground truth".into()));
    }
    let d = TrainConfig::default();
    let mut tcfg = TrainConfig {
        lr: a.lr.unwrap_or(cfg.parse_or("train", "lr", d.lr)?),
        lr_halving_period: a
            .lr_halving_period
            .unwrap_or(cfg.parse_or("train", "lr_halving_period", d.lr_halving_period)?),
        batch_size: a.batch_size.unwrap_or(cfg.parse_or("train", "batch_size", d.batch_size)?),
        epochs: a.epochs.unwrap_or(cfg.parse_or("train", "epochs", d.epochs)?),
        crop: a.crop.unwrap_or(cfg.parse_or("train", "crop", d.crop)?),
        seed,
        l1_weight: cfg.parse_or("train", "l1_weight", d.l1_weight)?,
        augment: !a.no_augment && cfg.parse_or("train", "augment", d.augment)?,
    };
    let smallest = data.iter().map(|s| s.width().min(s.height())).min().unwrap_or(0);
    if tcfg.augment && tcfg.crop > smallest {
        let crop = smallest / 4 * 4;
        warn!("crop {} exceeds the smallest capture; using {crop}", tcfg.crop);
        tcfg.crop = crop;
    }
    let mut model = match &a.resume {
        Some(dir) => load_checkpoint(dir)?,
        None => EhdrModel::new(model_config(cfg, a.base_channels)?, seed)?,
    };
    info!(
        "training {} parameters on {} captures for {} epochs",
        model.params.num_scalars(),
        data.len(),
        tcfg.epochs
    );
    fs::create_dir_all(&a.out)?;
    let log = train(&mut model, &data, &tcfg, Some(&a.out))?;
    save_checkpoint(a.out.join(CHECKPOINT_DIR), &model)?;
    let losses = log.losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("{} steps, loss {first:.5} -> {last:.5}", losses.len());
    }
    println!("checkpoint written to {}", a.out.join(CHECKPOINT_DIR).display());
    Ok(ExitCode::SUCCESS)
}

fn predict(model: &EhdrModel<f32>, capture: &Capture, chunks: u64) -> Result<HdrImage> {
    model.predict(&ModelInput::from_stream(&capture.brackets, &capture.events, chunks)?)
}

fn infer(a: &InferArgs, cfg: &Config) -> Result<ExitCode> {
    let chunks = sample_config(cfg)?.chunks_per_window;
    let model = load_checkpoint(&a.checkpoint)?;
    let capture = read_capture(&a.capture)?;
    let pred = predict(&model, &capture, chunks)?;
    fs::create_dir_all(&a.out)?;
    write_pfm(a.out.join("prediction.pfm"), &pred)?;
    write_tonemapped(&a.out.join("prediction.png"), &pred, ehdr_core::hdr::MU)?;
    if let Some(gt) = &capture.ground_truth {
        println!("PSNR-mu {:.3} dB", psnr_mu(&pred, gt)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(a: &EvaluateArgs, cfg: &Config) -> Result<ExitCode> {
    let chunks = sample_config(cfg)?.chunks_per_window;
    let model = a.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let mut pairs = Vec::new();
    for (name, capture, _) in load_dir(&a.data, chunks)? {
        let pred = match &model {
            Some(m) => predict(m, &capture, chunks)?,
            None => naive_merge(&capture.brackets)?,
        };
        pairs.push((name, pred, capture.ground_truth));
    }
    let report = evaluate_pairs(&pairs, a.border)?;
    write_report(&a.out, &report)?;
    Ok(ExitCode::SUCCESS)
}

fn naive_merge(brackets: &[ehdr_core::LdrImage]) -> Result<HdrImage> {
    Ok(merge_hdr(brackets, &TriangleWeights::for_brackets(brackets))?.map(|v| v.clamp(0.0, 1.0)))
}

fn write_report(out: &Path, report: &Report) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    println!("{}", report.summary());
    Ok(())
}

// ---------------------------------------------------------------- gradcheck, selftest

fn gradcheck(seed: u64) -> Result<ExitCode> {
    let cases = run_gradient_suite(seed)?;
    let mut ok = true;
    for c in &cases {
        let verdict = if c.passes() { "ok" } else { "FAILED" };
        println!("{:<22} max relative error {:.2e}  {verdict}", c.name, c.worst());
        ok &= c.passes();
    }
    println!(
        "{} of {} checks within {GRAD_TOLERANCE:e}",
        cases.iter().filter(|c| c.passes()).count(),
        cases.len()
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn selftest(a: &SelftestArgs, cfg: &Config, seed: u64) -> Result<ExitCode> {
    let scfg = SampleConfig {
        width: 32,
        height: 32,
        ..sample_config(cfg)?
    };
    let seq = make_dynamic_scene(seed, scfg.width, scfg.height, Motion::random(seed, scfg.speed), scfg.sim.frame_skip)?;
    let mut capture = capture_from_sequence(&seq, &scfg, seed)?;
    println!("scene: {} frames, {} events", seq.frames.len(), capture.events.len());
    if let Some(out) = &a.out {
        let dir = out.join("capture");
        write_capture(&dir, &capture)?;
        capture = read_capture(&dir)?;
    }
    let sample = capture.to_sample(scfg.chunks_per_window)?;
    let naive = sample.naive_merge()?;
    println!("naive merge PSNR-mu {:.3} dB", psnr_mu(&naive, &sample.ground_truth)?);

    let mut model = EhdrModel::new(model_config(cfg, None)?, seed)?;
    let tcfg = TrainConfig {
        lr: 1e-3,
        epochs: a.steps,
        batch_size: 1,
        crop: 32,
        seed,
        augment: false,
        ..TrainConfig::default()
    };
    let log = train(&mut model, std::slice::from_ref(&sample), &tcfg, a.out.as_deref())?;
    let losses = log.losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("trained {} steps, loss {first:.5} -> {last:.5}", losses.len());
    }
    let pred = model.predict(&ModelInput::from_sample(&sample)?)?;
    let report = evaluate_pairs(
        &[
            ("naive_merge".to_string(), naive, Some(sample.ground_truth.clone())),
            ("model".to_string(), pred.clone(), Some(sample.ground_truth.clone())),
        ],
        0,
    )?;
    for s in &report.samples {
        println!("{:<12} PSNR-mu {:.3} dB  SSIM-mu {:.4}", s.name, s.psnr_mu, s.ssim_mu);
    }
    if let Some(out) = &a.out {
        fs::write(out.join("metrics.csv"), report.to_csv())?;
        write_pfm(out.join("prediction.pfm"), &pred)?;
        save_checkpoint(out.join(CHECKPOINT_DIR), &model)?;
    }
    println!("selftest complete");
    Ok(ExitCode::SUCCESS)
}
