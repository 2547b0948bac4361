//! μ-law L1 loss, Adam, and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ehdr_tensor::{ParamStore, Scalar, Tape, TensorError, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::AugmentPlan;
use crate::dataset::Sample;
use crate::error::{EhdrError, Result};
use crate::hdr::{mu_law_image, MU};
use crate::image::HdrImage;
use crate::model::{AlignControl, EhdrModel, ModelInput};

/// Mean absolute difference of the μ-law images, recorded on `tape`.
pub fn mu_l1<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let a = tape.mu_law(pred, MU as f64)?;
    let b = tape.mu_law(gt, MU as f64)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    Ok(tape.mean(d)?)
}

pub fn mu_l1_loss(pred: &HdrImage, gt: &HdrImage) -> Result<f64> {
    if !pred.same_size(gt) {
        return Err(EhdrError::Shape {
            op: "mu_l1_loss",
            left: vec![pred.height, pred.width, 3],
            right: vec![gt.height, gt.width, 3],
        });
    }
    let (a, b) = (mu_law_image(pred, MU), mu_law_image(gt, MU));
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(sum / a.pixels.len() as f64)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Updates every parameter from its accumulated `grad`.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let (lr_c1, c2) = (T::of(lr / c1), T::of(c2));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                *w = *w - lr_c1 * *mi / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs between learning-rate halvings; 0 keeps the rate constant.
    pub lr_halving_period: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop: usize,
    pub seed: u64,
    pub l1_weight: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_halving_period: 0,
            batch_size: 2,
            epochs: 500,
            crop: 64,
            seed: 0,
            l1_weight: 1.0,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule on a multi-bracket video dataset.
    pub fn full_scale_video() -> Self {
        Self {
            batch_size: 4,
            epochs: 60,
            lr_halving_period: 15,
            crop: 256,
            ..Self::default()
        }
    }

    /// Full-scale schedule on a small real event/RGB dataset.
    pub fn full_scale_event_rgb() -> Self {
        Self {
            batch_size: 4,
            epochs: 1500,
            lr_halving_period: 300,
            crop: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.crop == 0 || self.crop % 4 != 0 {
            return Err(EhdrError::input(
                "training needs lr > 0, a positive batch size and a crop divisible by 4",
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_halving_period {
            0 => self.lr,
            p => self.lr * 0.5f64.powi((epoch / p) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss\n");
        for r in &self.records {
            writeln!(out, "{},{},{:e},{:.8}", r.step, r.epoch, r.lr, r.loss).expect("string write");
        }
        out
    }
}

/// Forward and backward pass of one sample; gradients are added to the parameters.
pub fn accumulate_sample(model: &mut EhdrModel<f32>, sample: &Sample, weight: f64) -> Result<f64> {
    let input = ModelInput::from_sample(sample)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &p, &input, &AlignControl::default())?;
    let gt = tape.constant(sample.ground_truth.to_tensor());
    let loss = mu_l1(&mut tape, out.output, gt)?;
    let loss = tape.scale(loss, weight)?;
    tape.backward(loss)?;
    model.params.collect_grads(&tape, &p);
    Ok(tape.value(loss).data()[0] as f64)
}

fn grads_finite(params: &ParamStore<f32>) -> bool {
    params.iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
}

fn dump_divergence(out: Option<&Path>, step: usize, batch: &[usize], log: &TrainLog, msg: &str) -> EhdrError {
    if let Some(dir) = out {
        let mut text = format!("step {step}: {msg}\nbatch samples: {batch:?}\n");
        text.push_str(&log.to_csv());
        if let Err(e) = fs::write(dir.join(format!("diverged_step{step}.txt")), text) {
            warn!("could not write divergence dump: {e}");
        }
    }
    EhdrError::Diverged {
        step,
        msg: format!("{msg} (batch samples {batch:?})"),
    }
}

/// Optimiser state carried across epochs.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub log: TrainLog,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &EhdrModel<f32>, samples: usize, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if samples == 0 {
            return Err(EhdrError::input("training needs at least one sample"));
        }
        Ok(Self {
            adam: Adam::new(&model.params),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: (0..samples).collect(),
            epoch: 0,
            log: TrainLog::default(),
            cfg,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Runs one pass over `data`. A non-finite loss or gradient aborts with a dump of
    /// the offending batch written to `out`.
    pub fn run_epoch(&mut self, model: &mut EhdrModel<f32>, data: &[Sample], out: Option<&Path>) -> Result<()> {
        if data.len() != self.order.len() {
            return Err(EhdrError::input("dataset size changed between epochs"));
        }
        let (epoch, lr) = (self.epoch, self.cfg.lr_at(self.epoch));
        self.order.shuffle(&mut self.rng);
        for batch in self.order.chunks(self.cfg.batch_size) {
            let step = self.log.records.len();
            model.params.zero_grads();
            let mut loss = 0.0;
            for &i in batch {
                let sample = if self.cfg.augment {
                    let s = &data[i];
                    AugmentPlan::random(self.rng.gen(), s.width(), s.height(), self.cfg.crop)?.apply(s)?
                } else {
                    data[i].clone()
                };
                match accumulate_sample(model, &sample, self.cfg.l1_weight / batch.len() as f64) {
                    Ok(l) => loss += l,
                    Err(EhdrError::Tensor(TensorError::NonFinite { op })) => {
                        let msg = format!("non-finite value in {op}");
                        return Err(dump_divergence(out, step, batch, &self.log, &msg));
                    }
                    Err(e) => return Err(e),
                }
            }
            if !loss.is_finite() || !grads_finite(&model.params) {
                return Err(dump_divergence(out, step, batch, &self.log, "non-finite loss or gradient"));
            }
            self.adam.step(&mut model.params, lr);
            self.log.records.push(LossRecord { step, epoch, lr, loss });
            if step % 100 == 0 {
                info!("step {step} epoch {epoch} lr {lr:e} loss {loss:.6}");
            }
        }
        self.epoch += 1;
        Ok(())
    }
}

/// Trains in place for `cfg.epochs` epochs. With `out`, writes `loss.csv` there.
pub fn train(model: &mut EhdrModel<f32>, data: &[Sample], cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainLog> {
    let mut trainer = Trainer::new(model, data.len(), cfg.clone())?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch(model, data, out)?;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("loss.csv"), trainer.log.to_csv())?;
    }
    Ok(trainer.log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ehdr_tensor::{Init, Tensor};

    #[test]
    fn loss_spot_values() {
        let z = HdrImage::zeros(4, 4);
        let one = z.map(|_| 1.0);
        assert_eq!(mu_l1_loss(&z, &z).unwrap(), 0.0);
        assert!((mu_l1_loss(&z, &one).unwrap() - 1.0).abs() < 1e-6);
        assert!(mu_l1_loss(&z, &HdrImage::zeros(4, 5)).is_err());
    }

    #[test]
    fn tape_loss_matches_image_loss() {
        let a = HdrImage::new(2, 2, (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        let b = a.map(|v| (v * 0.7 + 0.05).min(1.0));
        let mut tape = Tape::<f64>::new();
        let (x, y) = (tape.constant(a.to_tensor()), tape.constant(b.to_tensor()));
        let l = mu_l1(&mut tape, x, y).unwrap();
        assert!((tape.value(l).data()[0] - mu_l1_loss(&a, &b).unwrap()).abs() < 1e-6);
    }

    fn store(values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = s.add("w", &[values.len()], Init::Zeros, &mut rng);
        s.set(id, Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut s = store(&[1.0, -2.0]);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 0.1);
        assert_eq!(s.iter().next().unwrap().value.data(), [1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut s = store(&[1.0, 1.0, 1.0]);
        s.iter_mut().next().unwrap().grad = vec![3.0, -0.5, 1e-3];
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 0.01);
        let w = s.iter().next().unwrap().value.data().to_vec();
        for (wi, sign) in w.iter().zip([1.0f32, -1.0, 1.0]) {
            assert!((1.0 - wi - 0.01 * sign).abs() < 1e-5, "{wi}");
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut s = store(&[3.0]);
        let mut adam = Adam::new(&s);
        let f = |w: f32| (w - 1.0) * (w - 1.0);
        let start = f(3.0);
        for _ in 0..100 {
            let w = s.iter().next().unwrap().value.data()[0];
            s.iter_mut().next().unwrap().grad = vec![2.0 * (w - 1.0)];
            adam.step(&mut s, 0.05);
        }
        assert!(f(s.iter().next().unwrap().value.data()[0]) < 0.1 * start);
    }

    #[test]
    fn lr_halves_on_period_boundaries() {
        let cfg = TrainConfig {
            lr: 1e-3,
            lr_halving_period: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(9), 1e-3);
        assert_eq!(cfg.lr_at(10), 5e-4);
        assert_eq!(cfg.lr_at(25), 2.5e-4);
        assert_eq!(TrainConfig::default().lr_at(1000), 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { crop: 30, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
