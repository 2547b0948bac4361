//! Pairwise blending attention and the multi-scale spatial attention pyramid.

use ehdr_tensor::{Bindings, Scalar, Tape, Var};

use super::layers::{Builder, Conv};
use crate::error::{EhdrError, Result};

/// Keeps the weighted average defined where every weight vanishes.
pub const BLEND_EPS: f64 = 1e-6;

/// One block scores every input against the reference; the scores weight a per-pixel,
/// per-channel average.
#[derive(Clone, Copy, Debug)]
pub struct PairwiseAttention {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl PairwiseAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            conv1: b.conv("pairwise.attn", 0, 2 * channels, channels, 1),
            conv2: b.conv("pairwise.attn", 1, channels, channels, 1),
        }
    }

    /// Attention weights `a_j` for each of `features` (all `1 x C x H x W`).
    pub fn weights<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, reference: Var, features: &[Var]) -> Result<Var> {
        let stacked = tape.stack(features)?;
        let refs = tape.stack(&vec![reference; features.len()])?;
        let joint = tape.concat(&[stacked, refs])?;
        let y = self.conv1.apply_lrelu(tape, p, joint)?;
        let y = self.conv2.apply(tape, p, y)?;
        Ok(tape.sigmoid(y)?)
    }

    /// `sum_j a_j F_j / (sum_j a_j + eps)` over `j` in (reference, previous, next).
    pub fn fuse<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, reference: Var, minus: Var, plus: Var) -> Result<Var> {
        for v in [minus, plus] {
            if tape.shape(v) != tape.shape(reference) {
                return Err(EhdrError::Shape {
                    op: "pairwise_attention",
                    left: tape.shape(reference).to_vec(),
                    right: tape.shape(v).to_vec(),
                });
            }
        }
        let features = [reference, minus, plus];
        let a = self.weights(tape, p, reference, &features)?;
        let stacked = tape.stack(&features)?;
        let weighted = tape.mul(a, stacked)?;
        let (mut num, mut den) = (tape.select_batch(weighted, 0)?, tape.select_batch(a, 0)?);
        for j in 1..features.len() {
            let wj = tape.select_batch(weighted, j)?;
            num = tape.add(num, wj)?;
            let aj = tape.select_batch(a, j)?;
            den = tape.add(den, aj)?;
        }
        let den = tape.add_scalar(den, BLEND_EPS)?;
        Ok(tape.div(num, den)?)
    }
}

/// Sigmoid mask built from full, half and quarter resolution branches; coarser
/// logits are upsampled and added to finer ones.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAttention {
    feat: [Conv; 3],
    logit: [Conv; 3],
    out: Conv,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        let feat = [0, 1, 2].map(|l| b.conv(&format!("spatial.feat_l{}", l + 1), 0, channels, channels, if l == 0 { 1 } else { 2 }));
        let logit = [0, 1, 2].map(|l| b.conv(&format!("spatial.logit_l{}", l + 1), 0, channels, channels, 1));
        let out = b.conv("spatial.out", 0, channels, channels, 1);
        Self { feat, logit, out }
    }

    pub fn mask<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, fused: Var) -> Result<Var> {
        let a1 = self.feat[0].apply_lrelu(tape, p, fused)?;
        let a2 = self.feat[1].apply_lrelu(tape, p, a1)?;
        let a3 = self.feat[2].apply_lrelu(tape, p, a2)?;
        let mut logit = self.logit[2].apply(tape, p, a3)?;
        for (l, a) in [(1, a2), (0, a1)] {
            let up = tape.upsample2x(logit)?;
            let own = self.logit[l].apply(tape, p, a)?;
            logit = tape.add(own, up)?;
        }
        Ok(tape.sigmoid(logit)?)
    }

    /// `m + conv(m)` with `m = fused * mask`.
    pub fn modulate<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, fused: Var, mask: Var) -> Result<Var> {
        let m = tape.mul(fused, mask)?;
        let r = self.out.apply(tape, p, m)?;
        Ok(tape.add(m, r)?)
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, fused: Var) -> Result<Var> {
        let mask = self.mask(tape, p, fused)?;
        self.modulate(tape, p, fused, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ehdr_tensor::{ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const C: usize = 4;

    fn modules(zero: bool) -> (ParamStore<f64>, PairwiseAttention, SpatialAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let (pw, sp) = (PairwiseAttention::new(&mut b, C), SpatialAttention::new(&mut b, C));
        if zero {
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.get(id).value.shape().to_vec();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        (store, pw, sp)
    }

    fn random(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, C, 8, 8], |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn identical_inputs_pass_through() {
        let (store, pw, _) = modules(false);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = tape.constant(random(1));
        let out = pw.fuse(&mut tape, &p, f, f, f).unwrap();
        assert!(tape.value(out).max_abs_diff(&random(1)).unwrap() < 1e-5);
    }

    #[test]
    fn zero_parameters_average_the_inputs() {
        let (store, pw, _) = modules(true);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let ts = [random(1), random(2), random(3)];
        let v = ts.clone().map(|t| tape.constant(t));
        let out = pw.fuse(&mut tape, &p, v[0], v[1], v[2]).unwrap();
        let shrink = 1.5 / (1.5 + BLEND_EPS);
        for (i, &got) in tape.value(out).data().iter().enumerate() {
            let mean = (ts[0].data()[i] + ts[1].data()[i] + ts[2].data()[i]) / 3.0;
            assert!((got - mean * shrink).abs() < 1e-12);
        }
    }

    #[test]
    fn blend_stays_within_the_inputs() {
        let (store, pw, _) = modules(false);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let ts = [random(4), random(5), random(6)];
        let v = ts.clone().map(|t| tape.constant(t));
        let out = pw.fuse(&mut tape, &p, v[0], v[1], v[2]).unwrap();
        for (i, &got) in tape.value(out).data().iter().enumerate() {
            let vals = ts.each_ref().map(|t| t.data()[i]);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
            assert!(got >= lo - 1e-9 && got <= hi + 1e-9);
        }
        let a = pw.weights(&mut tape, &p, v[0], &v).unwrap();
        assert!(tape.value(a).data().iter().all(|&w| w > 0.0 && w < 1.0));
        let wrong = tape.constant(Tensor::zeros(&[1, C, 4, 4]));
        assert!(pw.fuse(&mut tape, &p, v[0], wrong, v[2]).is_err());
    }

    #[test]
    fn spatial_attention_with_zero_parameters_halves() {
        let (store, _, sp) = modules(true);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = tape.constant(random(7));
        let out = sp.apply(&mut tape, &p, f).unwrap();
        let want = random(7).map(|v| 0.5 * v);
        assert!(tape.value(out).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn spatial_mask_is_a_probability_map() {
        let (store, _, sp) = modules(false);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = tape.constant(random(9));
        let m = sp.mask(&mut tape, &p, f).unwrap();
        assert_eq!(tape.shape(m), [1, C, 8, 8]);
        assert!(tape.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
