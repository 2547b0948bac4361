//! PSNR and SSIM on μ-law tonemapped images, and per-sample evaluation reports.

use std::fmt::Write as _;

use log::warn;

use crate::dataset::Sample;
use crate::error::{EhdrError, Result};
use crate::model::{EhdrModel, ModelInput};
use crate::hdr::{mu_law_f64, MU};
use crate::image::{HdrImage, LUMA_709};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_pair(op: &'static str, a: &HdrImage, b: &HdrImage) -> Result<()> {
    if !a.same_size(b) {
        return Err(EhdrError::Shape {
            op,
            left: vec![a.height, a.width, 3],
            right: vec![b.height, b.width, 3],
        });
    }
    Ok(())
}

fn mu(h: f32) -> f64 {
    mu_law_f64(h as f64, MU as f64)
}

/// Peak-1 PSNR of the μ-law images, capped at 99 dB.
pub fn psnr_mu(pred: &HdrImage, gt: &HdrImage) -> Result<f64> {
    check_pair("psnr_mu", pred, gt)?;
    let sse: f64 = pred
        .pixels
        .iter()
        .zip(&gt.pixels)
        .map(|(&a, &b)| (mu(a) - mu(b)).powi(2))
        .sum();
    Ok(psnr_from_mse(sse / pred.pixels.len().max(1) as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

// Valid-only separable filtering of a w x h plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn mu_luminance(img: &HdrImage) -> Vec<f64> {
    img.pixels
        .chunks_exact(3)
        .map(|p| (0..3).map(|c| LUMA_709[c] as f64 * mu(p[c])).sum())
        .collect()
}

/// Mean SSIM over Gaussian windows of the μ-law luminance.
pub fn ssim_mu(pred: &HdrImage, gt: &HdrImage) -> Result<f64> {
    ssim_mu_with(pred, gt, &SsimParams::default())
}

pub fn ssim_mu_with(pred: &HdrImage, gt: &HdrImage, p: &SsimParams) -> Result<f64> {
    check_pair("ssim_mu", pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < p.window || h < p.window {
        return Err(EhdrError::input(format!(
            "image {w}x{h} is smaller than the {} px SSIM window",
            p.window
        )));
    }
    let (a, b) = (mu_luminance(pred), mu_luminance(gt));
    let k = gaussian(p.window, p.sigma);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
    let (ma, mb) = (filter(&a, w, h, &k), filter(&b, w, h, &k));
    let (saa, sbb, sab) = (
        filter(&prod(&a, &a), w, h, &k),
        filter(&prod(&b, &b), w, h, &k),
        filter(&prod(&a, &b), w, h, &k),
    );
    let (c1, c2) = (p.k1 * p.k1, p.k2 * p.k2);
    let mut total = 0.0;
    for i in 0..ma.len() {
        let (mx, my) = (ma[i], mb[i]);
        let vx = saa[i] - mx * mx;
        let vy = sbb[i] - my * my;
        let cov = sab[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / ma.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub name: String,
    pub psnr_mu: f64,
    pub ssim_mu: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub samples: Vec<SampleScore>,
}

impl Report {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.psnr_mu))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.ssim_mu))
    }

    /// `sample,psnr_mu,ssim_mu` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,psnr_mu,ssim_mu\n");
        for s in &self.samples {
            writeln!(out, "{},{:.6},{:.6}", s.name, s.psnr_mu, s.ssim_mu).expect("string write");
        }
        writeln!(out, "mean,{:.6},{:.6}", self.mean_psnr(), self.mean_ssim()).expect("string write");
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{} samples: PSNR-mu {:.3} dB, SSIM-mu {:.4}",
            self.samples.len(),
            self.mean_psnr(),
            self.mean_ssim()
        )
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Scores each prediction against its ground truth after cropping `border` pixels.
/// Samples without ground truth are skipped with a warning.
pub fn evaluate_pairs(
    pairs: &[(String, HdrImage, Option<HdrImage>)],
    border: usize,
) -> Result<Report> {
    let mut report = Report::default();
    for (name, pred, gt) in pairs {
        let Some(gt) = gt else {
            warn!("sample {name} has no ground truth; skipped");
            continue;
        };
        let (p, g) = (pred.crop_border(border)?, gt.crop_border(border)?);
        report.samples.push(SampleScore {
            name: name.clone(),
            psnr_mu: psnr_mu(&p, &g)?,
            ssim_mu: ssim_mu(&p, &g)?,
        });
    }
    Ok(report)
}

/// Runs the model on every sample and scores it against the sample's ground truth.
pub fn evaluate_model(model: &EhdrModel<f32>, samples: &[(String, Sample)], border: usize) -> Result<Report> {
    let mut pairs = Vec::with_capacity(samples.len());
    for (name, s) in samples {
        let pred = model.predict(&ModelInput::from_sample(s)?)?;
        pairs.push((name.clone(), pred, Some(s.ground_truth.clone())));
    }
    evaluate_pairs(&pairs, border)
}
