//! Gamma linearisation, exposure compensation, triangle-weighted merging and mu-law tonemapping.

use crate::error::{EhdrError, Result};
use crate::image::{HdrImage, LdrImage};

pub const GAMMA: f32 = 2.2;
pub const MU: f32 = 5000.0;

/// Inverse camera response, approximated by a power curve.
pub fn linearize(v: f32, gamma: f32) -> f32 {
    v.powf(gamma)
}

pub fn delinearize(v: f32, gamma: f32) -> f32 {
    v.powf(1.0 / gamma)
}

pub fn linearize_image(ldr: &LdrImage, gamma: f32) -> HdrImage {
    HdrImage {
        width: ldr.width,
        height: ldr.height,
        pixels: ldr.pixels.iter().map(|&v| linearize(v, gamma)).collect(),
    }
}

/// `linearize(I) / t`: brings brackets of different exposure to a common radiance scale.
pub fn exposure_compensate(ldr: &LdrImage) -> Result<HdrImage> {
    if !(ldr.exposure_time > 0.0) {
        return Err(EhdrError::input(format!(
            "exposure time must be positive, got {}",
            ldr.exposure_time
        )));
    }
    let inv_t = 1.0 / ldr.exposure_time;
    Ok(HdrImage {
        width: ldr.width,
        height: ldr.height,
        pixels: ldr
            .pixels
            .iter()
            .map(|&v| linearize(v, GAMMA) * inv_t)
            .collect(),
    })
}

/// Position of a bracket in the exposure ordering of its stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExposureRank {
    Shortest,
    Middle,
    Longest,
}

/// Piecewise-linear confidence of an LDR value, with breakpoints at 0.5.
pub fn triangle_weight(v: f32, rank: ExposureRank) -> f32 {
    let v = v.clamp(0.0, 1.0);
    match rank {
        ExposureRank::Shortest => (v / 0.5).min(1.0),
        ExposureRank::Longest => ((1.0 - v) / 0.5).min(1.0),
        ExposureRank::Middle => 1.0 - (v - 0.5).abs() / 0.5,
    }
}

/// Weight function assignment for each bracket of a stack, in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleWeights {
    pub ranks: Vec<ExposureRank>,
}

impl TriangleWeights {
    /// Ranks brackets by exposure time; ties keep input order.
    pub fn for_brackets(brackets: &[LdrImage]) -> Self {
        let mut order: Vec<usize> = (0..brackets.len()).collect();
        order.sort_by(|&a, &b| {
            brackets[a]
                .exposure_time
                .total_cmp(&brackets[b].exposure_time)
        });
        let mut ranks = vec![ExposureRank::Middle; brackets.len()];
        if let (Some(&first), Some(&last)) = (order.first(), order.last()) {
            ranks[first] = ExposureRank::Shortest;
            ranks[last] = ExposureRank::Longest;
        }
        Self { ranks }
    }
}

/// Weighted average of exposure-compensated brackets.
///
/// Where every weight vanishes (doubly clipped pixels) the bracket whose value is
/// farthest from both 0 and 1 is used alone.
pub fn merge_hdr(brackets: &[LdrImage], weights: &TriangleWeights) -> Result<HdrImage> {
    if brackets.len() < 2 {
        return Err(EhdrError::input("merging needs at least two brackets"));
    }
    if weights.ranks.len() != brackets.len() {
        return Err(EhdrError::input(format!(
            "{} weight functions for {} brackets",
            weights.ranks.len(),
            brackets.len()
        )));
    }
    let first = &brackets[0];
    for b in &brackets[1..] {
        if !b.same_size(first) {
            return Err(EhdrError::Shape {
                op: "merge_hdr",
                left: vec![first.height, first.width, 3],
                right: vec![b.height, b.width, 3],
            });
        }
    }
    let compensated = brackets
        .iter()
        .map(exposure_compensate)
        .collect::<Result<Vec<_>>>()?;
    let mut out = HdrImage::zeros(first.width, first.height);
    for (i, px) in out.pixels.iter_mut().enumerate() {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (b, (ldr, comp)) in brackets.iter().zip(&compensated).enumerate() {
            let a = triangle_weight(ldr.pixels[i], weights.ranks[b]) as f64;
            num += a * comp.pixels[i] as f64;
            den += a;
        }
        *px = if den > 0.0 {
            (num / den) as f32
        } else {
            let best = (0..brackets.len())
                .max_by(|&a, &b| {
                    let conf = |k: usize| {
                        let v = brackets[k].pixels[i];
                        v.min(1.0 - v)
                    };
                    // prefer the earlier bracket on ties
                    conf(a).total_cmp(&conf(b)).then(b.cmp(&a))
                })
                .expect("at least two brackets");
            compensated[best].pixels[i]
        };
    }
    Ok(out)
}

/// `log(1 + mu h) / log(1 + mu)` with `h` clamped to 1.
pub fn mu_law(h: f32, mu: f32) -> Result<f32> {
    if !(h >= 0.0) {
        return Err(EhdrError::input(format!(
            "mu-law needs non-negative input, got {h}"
        )));
    }
    Ok(mu_law_f64(h as f64, mu as f64) as f32)
}

/// Double-precision μ-law of a non-negative value.
pub fn mu_law_f64(h: f64, mu: f64) -> f64 {
    (mu * h.min(1.0)).ln_1p() / mu.ln_1p()
}

pub fn mu_law_image(h: &HdrImage, mu: f32) -> HdrImage {
    h.map(|v| mu_law(v, mu).expect("HdrImage values are non-negative"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ldr(v: f32, t: f32) -> LdrImage {
        LdrImage::new(1, 1, vec![v; 3], t, 0).unwrap()
    }

    #[test]
    fn linearize_spot_values() {
        assert_eq!(linearize(0.0, GAMMA), 0.0);
        assert_eq!(linearize(1.0, GAMMA), 1.0);
        assert!((linearize(0.5, GAMMA) - 0.217_637_64).abs() < 1e-6);
        for i in 0..=100 {
            let v = i as f32 / 100.0;
            assert!((delinearize(linearize(v, GAMMA), GAMMA) - v).abs() < 1e-6);
        }
    }

    #[test]
    fn compensation_spot_values() {
        assert_eq!(exposure_compensate(&ldr(1.0, 1.0)).unwrap().pixels[0], 1.0);
        let v = exposure_compensate(&ldr(0.5, 4.0)).unwrap().pixels[0];
        assert!((v - 0.054_409_41).abs() < 1e-6);
        let mut bad = ldr(0.5, 1.0);
        bad.exposure_time = 0.0;
        assert!(exposure_compensate(&bad).is_err());
    }

    #[test]
    fn triangle_spot_values() {
        assert_eq!(triangle_weight(0.5, ExposureRank::Middle), 1.0);
        assert_eq!(triangle_weight(0.0, ExposureRank::Middle), 0.0);
        assert_eq!(triangle_weight(1.0, ExposureRank::Middle), 0.0);
        assert_eq!(triangle_weight(0.25, ExposureRank::Shortest), 0.5);
        assert_eq!(triangle_weight(0.9, ExposureRank::Shortest), 1.0);
        assert_eq!(triangle_weight(0.2, ExposureRank::Longest), 1.0);
        assert!((triangle_weight(0.75, ExposureRank::Longest) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn duplicated_brackets_merge_to_their_value() {
        let stack = [ldr(0.4, 2.0), ldr(0.4, 2.0)];
        let w = TriangleWeights::for_brackets(&stack);
        let merged = merge_hdr(&stack, &w).unwrap();
        let expected = exposure_compensate(&stack[0]).unwrap().pixels[0];
        assert!((merged.pixels[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn saturated_long_exposure_is_excluded() {
        // true compensated radiance 0.3 seen by short (t=1) and mid (t=2); long (t=8) clips
        let r: f32 = 0.3;
        let v = |t: f32| delinearize(r * t, GAMMA);
        let stack = [ldr(v(1.0), 1.0), ldr(v(2.0), 2.0), ldr(1.0, 8.0)];
        let w = TriangleWeights::for_brackets(&stack);
        assert_eq!(w.ranks[2], ExposureRank::Longest);
        let merged = merge_hdr(&stack, &w).unwrap();
        assert!((merged.pixels[0] - r).abs() < 1e-6);
    }

    #[test]
    fn doubly_clipped_pixels_fall_back() {
        // short is black (weight 0 as shortest), long is white (weight 0 as longest)
        let stack = [ldr(0.0, 1.0), ldr(1.0, 4.0)];
        let merged = merge_hdr(&stack, &TriangleWeights::for_brackets(&stack)).unwrap();
        assert_eq!(merged.pixels[0], 0.0);
    }

    #[test]
    fn merge_rejects_mismatched_shapes() {
        let a = ldr(0.5, 1.0);
        let b = LdrImage::new(2, 1, vec![0.5; 6], 2.0, 1).unwrap();
        let w = TriangleWeights::for_brackets(&[a.clone(), b.clone()]);
        assert!(matches!(merge_hdr(&[a, b], &w), Err(EhdrError::Shape { .. })));
    }

    #[test]
    fn mu_law_spot_values() {
        assert_eq!(mu_law(0.0, MU).unwrap(), 0.0);
        assert_eq!(mu_law(1.0, MU).unwrap(), 1.0);
        assert_eq!(mu_law(7.0, MU).unwrap(), 1.0);
        let expected = (501.0f64).ln() / (5001.0f64).ln();
        assert!((mu_law(0.1, MU).unwrap() as f64 - expected).abs() < 1e-6);
        assert!((expected - 0.72988).abs() < 1e-4);
        assert!(mu_law(-0.1, MU).is_err());
    }
}
