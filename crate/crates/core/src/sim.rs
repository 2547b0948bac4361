//! Event synthesis from HDR frame sequences and bracket synthesis with sensor noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{EhdrError, Result};
use crate::events::{Event, EventStream};
use crate::hdr::GAMMA;
use crate::image::{HdrImage, LdrImage};

/// Exposure the reference bracket's median luminance is mapped to.
pub const MIDDLE_GREY: f32 = 0.18;

/// An HDR frame with its capture time.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedFrame {
    pub t_us: u64,
    pub image: HdrImage,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulatorConfig {
    /// Log-intensity change per event, shared by both polarities.
    pub contrast_threshold: f64,
    pub log_eps: f64,
    /// Video frames skipped between consecutive brackets.
    pub frame_skip: usize,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.2,
            log_eps: 1e-3,
            frame_skip: 2,
        }
    }
}

impl SimulatorConfig {
    pub fn with_threshold(self, c: f64) -> Self {
        Self {
            contrast_threshold: c,
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.contrast_threshold > 0.0) || !(self.log_eps > 0.0) {
            return Err(EhdrError::input(
                "contrast threshold and log epsilon must be positive",
            ));
        }
        Ok(())
    }
}

fn validate_frames(frames: &[TimedFrame]) -> Result<()> {
    if frames.len() < 2 {
        return Err(EhdrError::input("event simulation needs at least two frames"));
    }
    let first = &frames[0].image;
    for (i, pair) in frames.windows(2).enumerate() {
        if pair[1].t_us <= pair[0].t_us {
            return Err(EhdrError::input(format!(
                "frame timestamps must increase strictly (frame {})",
                i + 1
            )));
        }
        if !pair[1].image.same_size(first) {
            return Err(EhdrError::input("all frames must share one resolution"));
        }
    }
    if frames
        .iter()
        .any(|f| f.image.pixels.iter().any(|v| !v.is_finite()))
    {
        return Err(EhdrError::input("frames contain non-finite values"));
    }
    Ok(())
}

// Absorbs f32 storage rounding so an exact threshold crossing still fires.
const CROSSING_SLACK: f64 = 1e-6;

/// Per-pixel contrast-threshold event generation.
///
/// Each pixel keeps a reference log level; whenever the (linearly interpolated) log
/// luminance moves a full threshold away from it, one event is emitted at the
/// interpolated crossing time and the reference moves by one threshold.
pub fn simulate_events(frames: &[TimedFrame], cfg: &SimulatorConfig) -> Result<EventStream> {
    validate_frames(frames)?;
    cfg.validate()?;
    let (w, h) = (frames[0].image.width, frames[0].image.height);
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(EhdrError::input("sensor resolution exceeds u16 coordinates"));
    }
    let logs: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            f.image
                .luminance_plane()
                .into_iter()
                .map(|l| (l as f64 + cfg.log_eps).ln())
                .collect()
        })
        .collect();
    let c = cfg.contrast_threshold;
    let mut events = Vec::new();
    for pixel in 0..w * h {
        let (x, y) = ((pixel % w) as u16, (pixel / w) as u16);
        let mut reference = logs[0][pixel];
        let mut last_t: Option<u64> = None;
        for k in 0..frames.len() - 1 {
            let (la, lb) = (logs[k][pixel], logs[k + 1][pixel]);
            let (ta, tb) = (frames[k].t_us, frames[k + 1].t_us);
            let mut emit = |target: f64, p: i8, last_t: &mut Option<u64>| {
                let frac = ((target - la) / (lb - la)).clamp(0.0, 1.0);
                let mut t = ta + (frac * (tb - ta) as f64).round() as u64;
                if let Some(prev) = *last_t {
                    if t <= prev {
                        t = prev + 1;
                    }
                }
                *last_t = Some(t);
                events.push(Event::new(t, x, y, p));
            };
            while lb - reference >= c - CROSSING_SLACK {
                reference += c;
                emit(reference, 1, &mut last_t);
            }
            while reference - lb >= c - CROSSING_SLACK {
                reference -= c;
                emit(reference, -1, &mut last_t);
            }
        }
    }
    events.sort_by_key(Event::sort_key);
    EventStream::new(w as u16, h as u16, events)
}

/// Events per frame interval produced at threshold `c`.
pub fn simulated_rate(frames: &[TimedFrame], cfg: &SimulatorConfig, c: f64) -> Result<f64> {
    let stream = simulate_events(frames, &cfg.with_threshold(c))?;
    Ok(stream.len() as f64 / (frames.len() - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub threshold: f64,
    pub rate: f64,
    pub iterations: usize,
}

pub const CALIBRATION_TOLERANCE: f64 = 0.05;
pub const CALIBRATION_MAX_ITERS: usize = 32;

/// Bisects the contrast threshold in `[lo, hi]` until the simulated event rate is within 5%
/// of `target_rate` (or 32 iterations pass).
pub fn calibrate_threshold(
    frames: &[TimedFrame],
    cfg: &SimulatorConfig,
    target_rate: f64,
    lo: f64,
    hi: f64,
) -> Result<Calibration> {
    if !(lo > 0.0 && hi > lo) {
        return Err(EhdrError::Calibration(format!(
            "invalid threshold interval [{lo}, {hi}]"
        )));
    }
    let close = |rate: f64| (rate - target_rate).abs() <= CALIBRATION_TOLERANCE * target_rate;
    let (rate_lo, rate_hi) = (
        simulated_rate(frames, cfg, lo)?,
        simulated_rate(frames, cfg, hi)?,
    );
    if close(rate_lo) {
        return Ok(Calibration {
            threshold: lo,
            rate: rate_lo,
            iterations: 0,
        });
    }
    if close(rate_hi) {
        return Ok(Calibration {
            threshold: hi,
            rate: rate_hi,
            iterations: 0,
        });
    }
    if target_rate > rate_lo || target_rate < rate_hi {
        return Err(EhdrError::Calibration(format!(
            "target rate {target_rate} outside [{rate_hi}, {rate_lo}] reachable in [{lo}, {hi}]"
        )));
    }
    let (mut a, mut b) = (lo, hi);
    let mut best = Calibration {
        threshold: lo,
        rate: rate_lo,
        iterations: 0,
    };
    for it in 1..=CALIBRATION_MAX_ITERS {
        let mid = 0.5 * (a + b);
        let rate = simulated_rate(frames, cfg, mid)?;
        best = Calibration {
            threshold: mid,
            rate,
            iterations: it,
        };
        if close(rate) {
            break;
        }
        if rate > target_rate {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(best)
}

/// Additive read noise plus signal-dependent shot noise, then quantisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub read_noise_sigma: f32,
    /// Shot-noise variance per unit of (normalised) signal.
    pub shot_noise_scale: f32,
    pub quantization_bits: u32,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            read_noise_sigma: 0.01,
            shot_noise_scale: 0.005,
            quantization_bits: 8,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            read_noise_sigma: 0.0,
            shot_noise_scale: 0.0,
            quantization_bits: 8,
        }
    }

    pub fn levels(&self) -> f32 {
        ((1u64 << self.quantization_bits) - 1) as f32
    }
}

/// Exposure bracket set with the scene-to-sensor scale of the reference (0 f-stop) bracket.
#[derive(Clone, Debug, PartialEq)]
pub struct BracketSpec {
    pub fstops: Vec<i32>,
    pub reference_exposure: f32,
}

impl BracketSpec {
    /// Anchors the exposure so the reference frame's median luminance maps to 0.18.
    pub fn anchored(fstops: Vec<i32>, reference: &HdrImage) -> Result<Self> {
        let mut lum = reference.luminance_plane();
        if lum.is_empty() {
            return Err(EhdrError::input("reference frame is empty"));
        }
        lum.sort_by(f32::total_cmp);
        let median = lum[lum.len() / 2];
        if !(median > 0.0) {
            return Err(EhdrError::input("reference frame median luminance is zero"));
        }
        Self::with_exposure(fstops, MIDDLE_GREY / median)
    }

    pub fn with_exposure(fstops: Vec<i32>, reference_exposure: f32) -> Result<Self> {
        if fstops.iter().filter(|&&f| f == 0).count() != 1 {
            return Err(EhdrError::input("bracket set needs exactly one 0 f-stop reference"));
        }
        if !(reference_exposure > 0.0 && reference_exposure.is_finite()) {
            return Err(EhdrError::input("reference exposure must be positive"));
        }
        Ok(Self {
            fstops,
            reference_exposure,
        })
    }

    pub fn shortest_fstop(&self) -> i32 {
        *self.fstops.iter().min().expect("non-empty by construction")
    }

    /// Exposure time relative to the shortest bracket.
    pub fn exposure_time(&self, fstop: i32) -> f32 {
        2f32.powi(fstop - self.shortest_fstop())
    }

    /// Radiance-to-sensor scale of a bracket.
    pub fn exposure_scale(&self, fstop: i32) -> f32 {
        self.reference_exposure * 2f32.powi(fstop)
    }

    /// Scene radiance in the units exposure compensation recovers, clipped to the
    /// recoverable range `[0, 1]` (1 = saturation of the shortest bracket).
    pub fn normalize(&self, radiance: &HdrImage) -> HdrImage {
        let s = self.exposure_scale(self.shortest_fstop());
        radiance.map(|v| (v * s).clamp(0.0, 1.0))
    }
}

/// Renders one gamma-encoded, quantised bracket of `hdr`.
pub fn synthesize_bracket(
    hdr: &HdrImage,
    fstop: i32,
    spec: &BracketSpec,
    noise: &NoiseModel,
    seed: u64,
) -> Result<LdrImage> {
    let scale = spec.exposure_scale(fstop);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let read = Normal::new(0.0f32, noise.read_noise_sigma.max(0.0))
        .map_err(|e| EhdrError::input(e.to_string()))?;
    let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
    let levels = noise.levels();
    let pixels = hdr
        .pixels
        .iter()
        .map(|&r| {
            let mut v = r * scale;
            if noise.shot_noise_scale > 0.0 {
                v += unit.sample(&mut rng) * (v.max(0.0) * noise.shot_noise_scale).sqrt();
            }
            if noise.read_noise_sigma > 0.0 {
                v += read.sample(&mut rng);
            }
            let g = v.clamp(0.0, 1.0).powf(1.0 / GAMMA);
            (g * levels).round() / levels
        })
        .collect();
    LdrImage::new(
        hdr.width,
        hdr.height,
        pixels,
        spec.exposure_time(fstop),
        fstop,
    )
}
