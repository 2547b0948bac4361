//! Training samples: three brackets, voxelised event windows and normalised ground truth.

use log::warn;

use crate::error::{EhdrError, Result};
use crate::events::{chunk_stream, voxelize, Direction, EventStream, VoxelGrid, VOXEL_BINS};
use crate::hdr::{merge_hdr, TriangleWeights};
use crate::image::{HdrImage, LdrImage};
use crate::scene::{make_dynamic_scene, Motion, SceneSequence};
use crate::sim::{simulate_events, synthesize_bracket, BracketSpec, NoiseModel, SimulatorConfig, TimedFrame};

/// One network input/target pair.
///
/// `brackets` are in time order (previous, reference, next). `forward` holds the
/// voxelised chunks from the reference toward the next bracket, `backward` those from
/// the reference toward the previous one (time-reversed).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub brackets: [LdrImage; 3],
    pub forward: Vec<VoxelGrid>,
    pub backward: Vec<VoxelGrid>,
    pub ground_truth: HdrImage,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.brackets[1].width
    }

    pub fn height(&self) -> usize {
        self.brackets[1].height
    }

    /// Same sample with every voxel grid zeroed, for event ablations.
    pub fn without_events(&self) -> Self {
        let zero = |g: &VoxelGrid| VoxelGrid::zeros(g.bins, g.width, g.height);
        Self {
            forward: self.forward.iter().map(zero).collect(),
            backward: self.backward.iter().map(zero).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        if self.brackets.iter().any(|b| b.width != w || b.height != h) {
            return Err(EhdrError::input("brackets differ in size"));
        }
        if self.ground_truth.width != w || self.ground_truth.height != h {
            return Err(EhdrError::input("ground truth differs in size from the brackets"));
        }
        if self.forward.is_empty() || self.backward.is_empty() {
            return Err(EhdrError::input("each event window needs at least one chunk"));
        }
        for g in self.forward.iter().chain(&self.backward) {
            if g.width != w || g.height != h || g.bins != VOXEL_BINS {
                return Err(EhdrError::input("voxel grid geometry does not match the brackets"));
            }
        }
        Ok(())
    }

    /// Triangle-weighted merge of the (unaligned) brackets.
    pub fn naive_merge(&self) -> Result<HdrImage> {
        let merged = merge_hdr(&self.brackets, &TriangleWeights::for_brackets(&self.brackets))?;
        Ok(merged.map(|v| v.clamp(0.0, 1.0)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub width: usize,
    pub height: usize,
    /// F-stops in time order; the middle one must be 0.
    pub fstops: [i32; 3],
    pub noise: NoiseModel,
    pub sim: SimulatorConfig,
    pub chunks_per_window: u64,
    /// Object speed in pixels per video frame.
    pub speed: f32,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fstops: [-3, 0, 3],
            noise: NoiseModel::default(),
            sim: SimulatorConfig::default(),
            chunks_per_window: 4,
            speed: 1.0,
        }
    }
}

/// Voxelised chunks from `t0` toward `t1`; an empty window yields zero grids.
pub fn window_voxels(
    events: &EventStream,
    t0: u64,
    t1: u64,
    chunks: u64,
    direction: Direction,
) -> Result<Vec<VoxelGrid>> {
    if chunks == 0 {
        return Err(EhdrError::input("need at least one chunk per window"));
    }
    let tau = t0.abs_diff(t1).div_ceil(chunks).max(1);
    let grids: Vec<VoxelGrid> = chunk_stream(events, t0, t1, tau, direction)?
        .iter()
        .map(voxelize)
        .collect();
    if grids.iter().all(|g| g.data.iter().all(|&v| v == 0.0)) {
        warn!("no events between {t0} and {t1} us; using zero voxel grids");
    }
    Ok(grids)
}

/// Assembles a sample from brackets, their timestamps and the event stream covering them.
pub fn assemble_sample(
    brackets: [LdrImage; 3],
    times: [u64; 3],
    events: &EventStream,
    chunks: u64,
    ground_truth: HdrImage,
) -> Result<Sample> {
    if !(times[0] < times[1] && times[1] < times[2]) {
        return Err(EhdrError::input("bracket timestamps must increase"));
    }
    let sample = Sample {
        forward: window_voxels(events, times[1], times[2], chunks, Direction::Forward)?,
        backward: window_voxels(events, times[1], times[0], chunks, Direction::Backward)?,
        brackets,
        ground_truth,
    };
    sample.validate()?;
    Ok(sample)
}

/// Brackets with their raw event stream, before voxelisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub brackets: [LdrImage; 3],
    pub events: EventStream,
    pub ground_truth: Option<HdrImage>,
}

impl Capture {
    /// Voxelises both windows using the bracket timestamps.
    pub fn to_sample(&self, chunks: u64) -> Result<Sample> {
        let gt = self
            .ground_truth
            .clone()
            .ok_or_else(|| EhdrError::input("capture has no ground truth"))?;
        let times = [0, 1, 2].map(|i| self.brackets[i].timestamp_us);
        assemble_sample(self.brackets.clone(), times, &self.events, chunks, gt)
    }
}

/// Brackets, events and ground truth for a rendered sequence. Events are simulated on
/// radiance expressed in normalised units (shortest-bracket saturation = 1), unclipped.
pub fn capture_from_sequence(seq: &SceneSequence, cfg: &SampleConfig, seed: u64) -> Result<Capture> {
    let reference = seq.bracket_frame(1);
    let spec = BracketSpec::anchored(cfg.fstops.to_vec(), reference)?;
    let mut brackets = Vec::with_capacity(3);
    for (i, &fstop) in cfg.fstops.iter().enumerate() {
        let ldr = synthesize_bracket(
            seq.bracket_frame(i),
            fstop,
            &spec,
            &cfg.noise,
            seed.wrapping_mul(31).wrapping_add(i as u64),
        )?;
        brackets.push(ldr.with_timestamp(seq.bracket_time(i)));
    }
    let scale = spec.exposure_scale(spec.shortest_fstop());
    let frames: Vec<TimedFrame> = seq
        .frames
        .iter()
        .map(|f| TimedFrame {
            t_us: f.t_us,
            image: f.image.map(|v| v * scale),
        })
        .collect();
    Ok(Capture {
        brackets: brackets.try_into().expect("three brackets"),
        events: simulate_events(&frames, &cfg.sim)?,
        ground_truth: Some(spec.normalize(&seq.ground_truth)),
    })
}

pub fn sample_from_sequence(seq: &SceneSequence, cfg: &SampleConfig, seed: u64) -> Result<Sample> {
    capture_from_sequence(seq, cfg, seed)?.to_sample(cfg.chunks_per_window)
}

/// Renders a dynamic scene and captures it.
pub fn synthesize_capture(seed: u64, cfg: &SampleConfig) -> Result<Capture> {
    let seq = make_dynamic_scene(
        seed,
        cfg.width,
        cfg.height,
        Motion::random(seed, cfg.speed),
        cfg.sim.frame_skip,
    )?;
    capture_from_sequence(&seq, cfg, seed)
}

/// Renders a dynamic scene and builds its sample.
pub fn build_sample(seed: u64, cfg: &SampleConfig) -> Result<Sample> {
    synthesize_capture(seed, cfg)?.to_sample(cfg.chunks_per_window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr_mu;

    fn small() -> SampleConfig {
        SampleConfig {
            width: 32,
            height: 32,
            ..SampleConfig::default()
        }
    }

    #[test]
    fn sample_geometry() {
        let s = build_sample(4, &small()).unwrap();
        assert_eq!(s.forward.len(), 4);
        assert_eq!(s.backward.len(), 4);
        assert_eq!(s.brackets.each_ref().map(|b| b.fstop), [-3, 0, 3]);
        assert!(s.brackets[0].exposure_time < s.brackets[2].exposure_time);
        assert!(s.ground_truth.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn moving_scene_has_events_in_both_windows() {
        let s = build_sample(5, &small()).unwrap();
        let mass = |g: &[VoxelGrid]| g.iter().map(|v| v.data.iter().map(|x| x.abs()).sum::<f32>()).sum::<f32>();
        assert!(mass(&s.forward) > 0.0 && mass(&s.backward) > 0.0);
        let ablated = s.without_events();
        assert_eq!(mass(&ablated.forward), 0.0);
        assert_eq!(ablated.brackets, s.brackets);
    }

    #[test]
    fn static_noiseless_merge_matches_ground_truth() {
        let cfg = SampleConfig {
            noise: NoiseModel::noiseless(),
            speed: 0.0,
            ..small()
        };
        let s = build_sample(2, &cfg).unwrap();
        assert!(psnr_mu(&s.naive_merge().unwrap(), &s.ground_truth).unwrap() > 40.0);
    }

    #[test]
    fn building_is_deterministic() {
        assert_eq!(build_sample(9, &small()).unwrap(), build_sample(9, &small()).unwrap());
    }
}
