//! Geometric and colour augmentation applied consistently to every spatial map of a sample.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Sample;
use crate::error::{EhdrError, Result};
use crate::events::VoxelGrid;
use crate::image::{HdrImage, LdrImage};

pub const SCALE_FACTORS: [f32; 3] = [1.0, 0.75, 0.5];

/// One draw of the augmentation pipeline: scale, crop, rotate, flip, swap colour channels.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub scale: f32,
    /// Top-left corner of the crop in the scaled image.
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop: usize,
    /// Counter-clockwise quarter turns, `(x, y) -> (H - 1 - y, x)` each.
    pub rot90: u8,
    pub flip_h: bool,
    pub flip_v: bool,
    pub channels: [usize; 3],
}

impl AugmentPlan {
    /// Leaves a `crop x crop` sample untouched.
    pub fn identity(crop: usize) -> Self {
        Self {
            scale: 1.0,
            crop_x: 0,
            crop_y: 0,
            crop,
            rot90: 0,
            flip_h: false,
            flip_v: false,
            channels: [0, 1, 2],
        }
    }

    /// Draws a plan for a `width x height` sample. Scale factors that would shrink the
    /// image below the crop are not drawn.
    pub fn random(seed: u64, width: usize, height: usize, crop: usize) -> Result<Self> {
        if crop == 0 || crop > width || crop > height {
            return Err(EhdrError::input(format!(
                "crop {crop} does not fit a {width}x{height} sample"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales: Vec<f32> = SCALE_FACTORS
            .into_iter()
            .filter(|&f| scaled(width, f) >= crop && scaled(height, f) >= crop)
            .collect();
        let scale = *scales.choose(&mut rng).expect("factor 1 always fits");
        let (w, h) = (scaled(width, scale), scaled(height, scale));
        let mut channels = [0, 1, 2];
        channels.shuffle(&mut rng);
        Ok(Self {
            scale,
            crop_x: rng.gen_range(0..=w - crop),
            crop_y: rng.gen_range(0..=h - crop),
            crop,
            rot90: rng.gen_range(0..4),
            flip_h: rng.gen(),
            flip_v: rng.gen(),
            channels,
        })
    }

    pub fn apply(&self, s: &Sample) -> Result<Sample> {
        let (w, h) = (s.width(), s.height());
        let (sw, sh) = (scaled(w, self.scale), scaled(h, self.scale));
        if self.crop_x + self.crop > sw || self.crop_y + self.crop > sh {
            return Err(EhdrError::input(format!(
                "crop {} at ({}, {}) exceeds the {sw}x{sh} scaled sample",
                self.crop, self.crop_x, self.crop_y
            )));
        }
        let rgb = |pixels: &[f32]| -> Vec<f32> {
            let planes = self.transform(&to_planes(pixels, 3), 3, w, h);
            let mut out = from_planes(&planes, 3);
            for px in out.chunks_exact_mut(3) {
                let orig = [px[0], px[1], px[2]];
                for c in 0..3 {
                    px[c] = orig[self.channels[c]];
                }
            }
            out
        };
        let grid = |g: &VoxelGrid| VoxelGrid {
            bins: g.bins,
            width: self.crop,
            height: self.crop,
            data: self.transform(&g.data, g.bins, w, h),
        };
        let bracket = |b: &LdrImage| LdrImage {
            width: self.crop,
            height: self.crop,
            pixels: rgb(&b.pixels).into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..b.clone()
        };
        let out = Sample {
            brackets: [bracket(&s.brackets[0]), bracket(&s.brackets[1]), bracket(&s.brackets[2])],
            forward: s.forward.iter().map(grid).collect(),
            backward: s.backward.iter().map(grid).collect(),
            ground_truth: HdrImage::new(self.crop, self.crop, rgb(&s.ground_truth.pixels))?,
        };
        out.validate()?;
        Ok(out)
    }

    /// Scale, crop, rotate and flip `channels` planar `w x h` maps.
    fn transform(&self, planes: &[f32], channels: usize, w: usize, h: usize) -> Vec<f32> {
        let (sw, sh) = (scaled(w, self.scale), scaled(h, self.scale));
        let n = self.crop;
        let mut out = Vec::with_capacity(channels * n * n);
        for c in 0..channels {
            let plane = &planes[c * w * h..(c + 1) * w * h];
            let resized = if (sw, sh) == (w, h) {
                plane.to_vec()
            } else {
                resize(plane, w, h, sw, sh)
            };
            let mut tile: Vec<f32> = (0..n * n)
                .map(|i| resized[(self.crop_y + i / n) * sw + self.crop_x + i % n])
                .collect();
            for _ in 0..self.rot90 {
                tile = rotate(&tile, n);
            }
            if self.flip_h {
                tile = (0..n * n).map(|i| tile[(i / n) * n + n - 1 - i % n]).collect();
            }
            if self.flip_v {
                tile = (0..n * n).map(|i| tile[(n - 1 - i / n) * n + i % n]).collect();
            }
            out.extend(tile);
        }
        out
    }
}

fn scaled(size: usize, factor: f32) -> usize {
    (size as f32 * factor).round() as usize
}

// (x, y) -> (n - 1 - y, x) on an n x n tile.
fn rotate(tile: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[x * n + (n - 1 - y)] = tile[y * n + x];
        }
    }
    out
}

/// Bilinear resampling with half-pixel centres and edge clamping.
fn resize(plane: &[f32], w: usize, h: usize, w2: usize, h2: usize) -> Vec<f32> {
    let coord = |o: usize, from: usize, to: usize| -> (usize, usize, f32) {
        let s = ((o as f32 + 0.5) * from as f32 / to as f32 - 0.5).clamp(0.0, (from - 1) as f32);
        let i = s.floor() as usize;
        (i, (i + 1).min(from - 1), s - i as f32)
    };
    let mut out = Vec::with_capacity(w2 * h2);
    for y in 0..h2 {
        let (y0, y1, fy) = coord(y, h, h2);
        for x in 0..w2 {
            let (x0, x1, fx) = coord(x, w, w2);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn to_planes(pixels: &[f32], channels: usize) -> Vec<f32> {
    let n = pixels.len() / channels;
    (0..pixels.len()).map(|i| pixels[(i % n) * channels + i / n]).collect()
}

fn from_planes(planes: &[f32], channels: usize) -> Vec<f32> {
    let n = planes.len() / channels;
    (0..planes.len()).map(|i| planes[(i % channels) * n + i / channels]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_sample, SampleConfig};

    fn sample() -> Sample {
        build_sample(
            3,
            &SampleConfig {
                width: 40,
                height: 32,
                ..SampleConfig::default()
            },
        )
        .unwrap()
    }

    fn crop_plan(s: &Sample) -> AugmentPlan {
        AugmentPlan {
            crop_x: 4,
            crop_y: 0,
            ..AugmentPlan::identity(s.height())
        }
    }

    #[test]
    fn identity_leaves_square_samples_unchanged() {
        let s = build_sample(1, &SampleConfig { width: 32, height: 32, ..SampleConfig::default() }).unwrap();
        assert_eq!(AugmentPlan::identity(32).apply(&s).unwrap(), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = crop_plan(&sample()).apply(&sample()).unwrap();
        let flip = AugmentPlan {
            flip_h: true,
            ..AugmentPlan::identity(32)
        };
        assert_eq!(flip.apply(&flip.apply(&s).unwrap()).unwrap(), s);
        let four = AugmentPlan {
            rot90: 2,
            ..AugmentPlan::identity(32)
        };
        assert_eq!(four.apply(&four.apply(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn rotation_moves_a_marker_consistently() {
        let mut s = crop_plan(&sample()).apply(&sample()).unwrap();
        let n = 32;
        let (x, y) = (5, 9);
        s.ground_truth.set(x, y, 0, 0.987);
        s.brackets[0].pixels[(y * n + x) * 3] = 0.123;
        s.forward[2].data[(1 * n + y) * n + x] = 42.0;
        let r = AugmentPlan {
            rot90: 1,
            ..AugmentPlan::identity(n)
        }
        .apply(&s)
        .unwrap();
        let (rx, ry) = (n - 1 - y, x);
        assert_eq!(r.ground_truth.get(rx, ry, 0), 0.987);
        assert_eq!(r.brackets[0].get(rx, ry, 0), 0.123);
        assert_eq!(r.forward[2].get(1, rx, ry), 42.0);
    }

    #[test]
    fn channel_swap_touches_images_only() {
        let s = crop_plan(&sample()).apply(&sample()).unwrap();
        let swap = AugmentPlan {
            channels: [2, 0, 1],
            ..AugmentPlan::identity(32)
        };
        let t = swap.apply(&s).unwrap();
        assert_eq!(t.ground_truth.get(3, 4, 0), s.ground_truth.get(3, 4, 2));
        assert_eq!(t.brackets[1].get(3, 4, 1), s.brackets[1].get(3, 4, 0));
        assert_eq!(t.forward, s.forward);
    }

    #[test]
    fn random_plans_produce_valid_samples() {
        let s = build_sample(2, &SampleConfig { width: 64, height: 64, ..SampleConfig::default() }).unwrap();
        for seed in 0..12 {
            let plan = AugmentPlan::random(seed, 64, 64, 32).unwrap();
            let a = plan.apply(&s).unwrap();
            assert_eq!((a.width(), a.height()), (32, 32));
            assert!(a.ground_truth.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(a.brackets.iter().all(|b| b.pixels.iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn oversized_crop_is_an_error() {
        assert!(AugmentPlan::random(0, 32, 32, 48).is_err());
        assert!(AugmentPlan::identity(48).apply(&sample()).is_err());
    }
}
