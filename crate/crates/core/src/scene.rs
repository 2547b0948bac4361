//! Procedural dynamic HDR scenes used as a stand-in for HDR video.
//!
//! A textured background with a horizontal radiance gradient spanning more than
//! four decades, a bright disc and a dark square. The camera translates the whole
//! view; each object additionally moves on its own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EhdrError, Result};
use crate::image::HdrImage;
use crate::sim::TimedFrame;

/// Per-frame translations in pixels, `(dx, dy)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Motion {
    pub camera: (f32, f32),
    pub disc: (f32, f32),
    pub square: (f32, f32),
}

impl Motion {
    pub fn still() -> Self {
        Self::default()
    }

    /// Random camera and object motion of roughly `speed` pixels per frame.
    pub fn random(seed: u64, speed: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7469_6f6e);
        let mut dir = |scale: f32| {
            let a: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            (scale * a.cos(), scale * a.sin())
        };
        Self {
            camera: dir(0.5 * speed),
            disc: dir(speed),
            square: dir(speed),
        }
    }
}

const BG_LOG_MIN: f32 = -3.6;
const BG_LOG_SPAN: f32 = 3.4;
const DISC_RADIANCE: f32 = 6.0;
const SQUARE_RADIANCE: f32 = 2e-4;

/// Scene layout; rendering is a pure function of the (fractional) frame index.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicScene {
    pub width: usize,
    pub height: usize,
    pub motion: Motion,
    disc_center: (f32, f32),
    disc_radius: f32,
    square_center: (f32, f32),
    square_half: f32,
    texture_freq: (f32, f32),
    texture_phase: (f32, f32),
    disc_tint: [f32; 3],
    bg_tint: [f32; 3],
}

impl DynamicScene {
    pub fn new(seed: u64, width: usize, height: usize, motion: Motion) -> Result<Self> {
        if width < 32 || height < 32 {
            return Err(EhdrError::input(format!(
                "scenes must be at least 32x32, got {width}x{height}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width as f32, height as f32);
        let scale = w.min(h);
        Ok(Self {
            width,
            height,
            motion,
            disc_center: (rng.gen_range(0.3..0.7) * w, rng.gen_range(0.3..0.7) * h),
            disc_radius: rng.gen_range(0.09..0.15) * scale,
            square_center: (rng.gen_range(0.25..0.75) * w, rng.gen_range(0.25..0.75) * h),
            square_half: rng.gen_range(0.08..0.13) * scale,
            texture_freq: (rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4)),
            texture_phase: (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)),
            disc_tint: [1.0, rng.gen_range(0.7..0.95), rng.gen_range(0.4..0.7)],
            bg_tint: [rng.gen_range(0.8..1.0), 1.0, rng.gen_range(0.75..1.0)],
        })
    }

    pub fn disc_center(&self, frame: f32) -> (f32, f32) {
        let m = self.motion;
        (
            self.disc_center.0 + frame * (m.disc.0 + m.camera.0),
            self.disc_center.1 + frame * (m.disc.1 + m.camera.1),
        )
    }

    pub fn square_center(&self, frame: f32) -> (f32, f32) {
        let m = self.motion;
        (
            self.square_center.0 + frame * (m.square.0 + m.camera.0),
            self.square_center.1 + frame * (m.square.1 + m.camera.1),
        )
    }

    fn radiance(&self, x: f32, y: f32, frame: f32) -> [f32; 3] {
        let (dx, dy) = self.disc_center(frame);
        if (x - dx).powi(2) + (y - dy).powi(2) <= self.disc_radius.powi(2) {
            return self.disc_tint.map(|t| DISC_RADIANCE * t);
        }
        let (sx, sy) = self.square_center(frame);
        if (x - sx).abs() <= self.square_half && (y - sy).abs() <= self.square_half {
            return [SQUARE_RADIANCE; 3];
        }
        // background lives in world coordinates, so it shifts with the camera
        let u = x - frame * self.motion.camera.0;
        let v = y - frame * self.motion.camera.1;
        let gradient = 10f32.powf(BG_LOG_MIN + BG_LOG_SPAN * (u / self.width as f32).clamp(-0.2, 1.2));
        let texture = 1.0
            + 0.6
                * (self.texture_freq.0 * u + self.texture_phase.0).sin()
                * (self.texture_freq.1 * v + self.texture_phase.1).sin();
        self.bg_tint.map(|t| t * gradient * texture)
    }

    /// Renders the view at a fractional frame index with 2x2 supersampling.
    pub fn render(&self, frame: f32) -> HdrImage {
        let mut img = HdrImage::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = [0.0f32; 3];
                for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    let r = self.radiance(x as f32 + ox, y as f32 + oy, frame);
                    acc.iter_mut().zip(r).for_each(|(a, v)| *a += 0.25 * v);
                }
                for (c, v) in acc.into_iter().enumerate() {
                    img.set(x, y, c, v);
                }
            }
        }
        img
    }
}

/// Frame sequence covering three brackets, with the middle bracket as reference.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub scene: DynamicScene,
    pub frames: Vec<TimedFrame>,
    /// Frame indices of the brackets in time order (short, reference, long).
    pub bracket_frames: [usize; 3],
    /// Exact render at the reference bracket time.
    pub ground_truth: HdrImage,
}

impl SceneSequence {
    pub fn bracket_time(&self, i: usize) -> u64 {
        self.frames[self.bracket_frames[i]].t_us
    }

    pub fn bracket_frame(&self, i: usize) -> &HdrImage {
        &self.frames[self.bracket_frames[i]].image
    }
}

pub const FRAME_INTERVAL_US: u64 = 10_000;

/// Renders `2 * (frame_skip + 1) + 1` frames: brackets sit at frames
/// `0`, `frame_skip + 1` and `2 * (frame_skip + 1)`.
pub fn make_dynamic_scene(
    seed: u64,
    width: usize,
    height: usize,
    motion: Motion,
    frame_skip: usize,
) -> Result<SceneSequence> {
    let scene = DynamicScene::new(seed, width, height, motion)?;
    let gap = frame_skip + 1;
    let frames: Vec<TimedFrame> = (0..=2 * gap)
        .map(|i| TimedFrame {
            t_us: i as u64 * FRAME_INTERVAL_US,
            image: scene.render(i as f32),
        })
        .collect();
    let ground_truth = frames[gap].image.clone();
    Ok(SceneSequence {
        scene,
        frames,
        bracket_frames: [0, gap, 2 * gap],
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_scene_frames_are_identical() {
        let seq = make_dynamic_scene(1, 32, 32, Motion::still(), 2).unwrap();
        assert_eq!(seq.frames.len(), 7);
        assert!(seq.frames.iter().all(|f| f.image == seq.ground_truth));
    }

    #[test]
    fn objects_move_by_their_translation() {
        let motion = Motion {
            camera: (2.0, 0.0),
            ..Motion::still()
        };
        let scene = DynamicScene::new(3, 48, 40, motion).unwrap();
        let (a, b) = (scene.disc_center(1.0), scene.disc_center(2.0));
        assert!((b.0 - a.0 - 2.0).abs() < 1e-5 && (b.1 - a.1).abs() < 1e-5);
        let (a, b) = (scene.square_center(4.0), scene.square_center(5.0));
        assert!((b.0 - a.0 - 2.0).abs() < 1e-5);
    }

    #[test]
    fn radiance_spans_four_decades() {
        for seed in 0..20 {
            let seq = make_dynamic_scene(seed, 32, 32, Motion::random(seed, 1.5), 2).unwrap();
            for f in &seq.frames {
                let max = f.image.pixels.iter().cloned().fold(0.0f32, f32::max);
                let min = f.image.pixels.iter().cloned().fold(f32::MAX, f32::min);
                assert!(min > 0.0 && max / min >= 1e4, "seed {seed}: {max} / {min}");
            }
        }
    }

    #[test]
    fn rejects_small_scenes() {
        assert!(make_dynamic_scene(0, 31, 64, Motion::still(), 2).is_err());
    }
}
