//! Event-conditioned pyramid deformable alignment.
//!
//! Levels are indexed from 0 (full resolution) to 2 (quarter). Alignment runs
//! coarse to fine: each level predicts a residual on top of the doubled,
//! upsampled offsets of the level below it.

use ehdr_tensor::{Bindings, ConvGeom, Scalar, Tape, Tensor, Var};

use super::encoder::Pyramid;
use super::layers::{Builder, Conv, LEAKY_SLOPE};
use crate::error::{EhdrError, Result};

/// Taps of the 3x3 deformable kernel.
pub const TAPS: usize = 9;
pub const LEVELS: usize = 3;

/// `offsets` has `2K` channels (`dx, dy` per tap), `masks` has `K` channels in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformField {
    pub offsets: Var,
    pub masks: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DeformPredictor {
    convs: [Conv; 3],
    emit: Conv,
    takes_coarser: bool,
}

impl DeformPredictor {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, takes_coarser: bool) -> Self {
        let cin = 3 * channels + if takes_coarser { 2 * TAPS } else { 0 };
        Self {
            convs: [
                b.conv(name, 0, cin, channels, 1),
                b.conv(name, 1, channels, channels, 1),
                b.conv(name, 2, channels, channels, 1),
            ],
            emit: b.conv_zero(name, 3, channels, 3 * TAPS),
            takes_coarser,
        }
    }

    pub fn emit_conv(&self) -> Conv {
        self.emit
    }

    /// Predicts the field from reference, non-reference and event features. `coarser`
    /// holds the offsets of the next coarser level, when propagation is enabled.
    pub fn predict<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        f_ref: Var,
        f_nonref: Var,
        f_events: Var,
        coarser: Option<Var>,
    ) -> Result<DeformField> {
        let (n, _, h, w) = tape.value(f_ref).dims4()?;
        let prior = match coarser {
            Some(c) => {
                let up = tape.upsample2x(c)?;
                Some(tape.scale(up, 2.0)?)
            }
            None => None,
        };
        let mut parts = vec![f_ref, f_nonref, f_events];
        if self.takes_coarser {
            parts.push(match prior {
                Some(v) => v,
                None => tape.constant(Tensor::zeros(&[n, 2 * TAPS, h, w])),
            });
        } else if prior.is_some() {
            return Err(EhdrError::input("the coarsest level takes no coarser field"));
        }
        let mut x = tape.concat(&parts)?;
        for conv in &self.convs {
            x = conv.apply_lrelu(tape, p, x)?;
        }
        let out = self.emit.apply(tape, p, x)?;
        let residual = tape.slice_channels(out, 0, 2 * TAPS)?;
        let logits = tape.slice_channels(out, 2 * TAPS, TAPS)?;
        let offsets = match prior {
            Some(v) => tape.add(residual, v)?,
            None => residual,
        };
        Ok(DeformField {
            offsets,
            masks: tape.sigmoid(logits)?,
        })
    }
}

/// Per-call switches of the alignment cascade.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlignControl {
    /// Feed each level's offsets to the next finer level.
    pub skip_propagation: bool,
    /// Replace the predicted fields (finest level first).
    pub fields: Option<[DeformField; LEVELS]>,
}

#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    /// Fused aligned features at full resolution.
    pub aligned: Var,
    /// Raw deformable-convolution outputs per level.
    pub deformed: [Var; LEVELS],
    pub fields: [DeformField; LEVELS],
}

#[derive(Clone, Debug)]
pub struct Aligner {
    predictors: [DeformPredictor; LEVELS],
    deform: [Conv; LEVELS],
    /// Merges a level's deformed features with the upsampled coarser result (levels 0 and 1).
    fuse: [Conv; 2],
}

impl Aligner {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        let predictors = [0, 1, 2].map(|l| DeformPredictor::new(b, &format!("align.predict_l{}", l + 1), channels, l < 2));
        let deform = [0, 1, 2].map(|l| b.conv(&format!("align.deform_l{}", l + 1), 0, channels, channels, 1));
        let fuse = [0, 1].map(|l| b.conv(&format!("align.fuse_l{}", l + 1), 0, 2 * channels, channels, 1));
        Self {
            predictors,
            deform,
            fuse,
        }
    }

    pub fn predictor(&self, level: usize) -> &DeformPredictor {
        &self.predictors[level]
    }

    pub fn deform_conv(&self, level: usize) -> Conv {
        self.deform[level]
    }

    pub fn fuse_conv(&self, level: usize) -> Conv {
        self.fuse[level]
    }

    /// Aligns `nonref` to `reference`, guided by the integrated event features per level.
    pub fn align<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        reference: &Pyramid,
        nonref: &Pyramid,
        events: &[Var; LEVELS],
        ctl: &AlignControl,
    ) -> Result<Alignment> {
        let mut fields: [Option<DeformField>; LEVELS] = [None; LEVELS];
        let mut deformed = [reference.level(0); LEVELS];
        let mut aligned: Option<Var> = None;
        for l in (0..LEVELS).rev() {
            let field = match &ctl.fields {
                Some(f) => f[l],
                None => {
                    let coarser = if ctl.skip_propagation {
                        None
                    } else {
                        fields.get(l + 1).copied().flatten().map(|f| f.offsets)
                    };
                    self.predictors[l].predict(tape, p, reference.level(l), nonref.level(l), events[l], coarser)?
                }
            };
            let conv = self.deform[l];
            let d = tape.deform_conv(
                nonref.level(l),
                field.offsets,
                field.masks,
                p[conv.weight],
                Some(p[conv.bias]),
                ConvGeom::SAME3,
            )?;
            deformed[l] = d;
            fields[l] = Some(field);
            aligned = Some(match aligned {
                None => tape.leaky_relu(d, LEAKY_SLOPE)?,
                Some(coarse) => {
                    let up = tape.upsample2x(coarse)?;
                    let joint = tape.concat(&[d, up])?;
                    let y = self.fuse[l].apply(tape, p, joint)?;
                    if l == 0 {
                        y
                    } else {
                        tape.leaky_relu(y, LEAKY_SLOPE)?
                    }
                }
            });
        }
        Ok(Alignment {
            aligned: aligned.expect("at least one level"),
            deformed,
            fields: fields.map(|f| f.expect("every level visited")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ehdr_tensor::{ParamId, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const C: usize = 4;

    fn aligner() -> (ParamStore<f64>, Aligner) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Aligner::new(&mut Builder { store: &mut store, rng: &mut rng }, C);
        (store, a)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn pyramid(tape: &mut Tape<f64>, n: usize, size: usize, seed: u64) -> Pyramid {
        Pyramid([0, 1, 2].map(|l| tape.constant(random(&[n, C, size >> l, size >> l], seed + l as u64))))
    }

    // Centre-tap identity from the first `cout` input channels.
    fn identity_weight(store: &mut ParamStore<f64>, id: ParamId) {
        let shape = store.get(id).value.shape().to_vec();
        let mut w = Tensor::zeros(&shape);
        for o in 0..shape[0] {
            w.data_mut()[((o * shape[1] + o) * 3 + 1) * 3 + 1] = 1.0;
        }
        store.set(id, w).unwrap();
    }

    #[test]
    fn zero_emit_gives_zero_offsets_and_half_masks() {
        let (store, a) = aligner();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (r, n, e) = (pyramid(&mut tape, 2, 16, 1), pyramid(&mut tape, 2, 16, 5), pyramid(&mut tape, 2, 16, 9));
        let f = a.predictor(2).predict(&mut tape, &p, r.level(2), n.level(2), e.level(2), None).unwrap();
        assert_eq!(tape.shape(f.offsets), [2, 2 * TAPS, 4, 4]);
        assert_eq!(tape.shape(f.masks), [2, TAPS, 4, 4]);
        assert!(tape.value(f.offsets).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(f.masks).data().iter().all(|&v| v == 0.5));
        assert_eq!(store.get(a.predictor(0).emit_conv().weight).value.shape(), [3 * TAPS, C, 3, 3]);
    }

    #[test]
    fn coarser_offsets_are_upsampled_and_doubled() {
        let (store, a) = aligner();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (r, n, e) = (pyramid(&mut tape, 1, 16, 1), pyramid(&mut tape, 1, 16, 5), pyramid(&mut tape, 1, 16, 9));
        let coarse = tape.constant(Tensor::from_fn(&[1, 2 * TAPS, 4, 4], |i| if (i / 16) % 2 == 0 { 1.0 } else { 0.0 }));
        let f = a.predictor(1).predict(&mut tape, &p, r.level(1), n.level(1), e.level(1), Some(coarse)).unwrap();
        let off = tape.value(f.offsets);
        assert_eq!(off.shape(), [1, 2 * TAPS, 8, 8]);
        for (i, &v) in off.data().iter().enumerate() {
            let want = if (i / 64) % 2 == 0 { 2.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "entry {i}: {v}");
        }
        assert!(a.predictor(2).predict(&mut tape, &p, r.level(2), n.level(2), e.level(2), Some(coarse)).is_err());
    }

    #[test]
    fn oracle_field_recovers_a_two_pixel_shift() {
        let (mut store, a) = aligner();
        for l in 0..LEVELS {
            identity_weight(&mut store, a.deform_conv(l).weight);
        }
        identity_weight(&mut store, a.fuse_conv(0).weight);
        let size = 16;
        let reference = random(&[1, C, size, size], 3);
        // content moved 2 px to the right
        let shifted = Tensor::from_fn(&[1, C, size, size], |i| {
            let (x, rest) = (i % size, i / size);
            if x >= 2 { reference.data()[rest * size + x - 2] } else { 0.0 }
        });
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let r = pyramid(&mut tape, 1, size, 20);
        let n = pyramid(&mut tape, 1, size, 30);
        let refs = Pyramid([tape.constant(reference.clone()), r.level(1), r.level(2)]);
        let nonref = Pyramid([tape.constant(shifted), n.level(1), n.level(2)]);
        let events = pyramid(&mut tape, 1, size, 40).0;
        let fields = [0, 1, 2].map(|l| {
            let s = size >> l;
            DeformField {
                offsets: tape.constant(Tensor::from_fn(&[1, 2 * TAPS, s, s], |i| if (i / (s * s)) % 2 == 0 { 2.0 } else { 0.0 })),
                masks: tape.constant(Tensor::full(&[1, TAPS, s, s], 1.0)),
            }
        });
        let ctl = AlignControl {
            fields: Some(fields),
            ..AlignControl::default()
        };
        let out = a.align(&mut tape, &p, &refs, &nonref, &events, &ctl).unwrap();
        let got = tape.value(out.aligned);
        let mut worst = 0.0f64;
        for c in 0..C {
            for y in 0..size {
                for x in 0..size - 2 {
                    worst = worst.max((got.at(0, c, y, x) - reference.at(0, c, y, x)).abs());
                }
            }
        }
        assert!(worst < 1e-5, "max error {worst}");
    }

    #[test]
    fn propagation_changes_the_fine_offsets() {
        let (mut store, a) = aligner();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for l in 0..LEVELS {
            let id = a.predictor(l).emit_conv().weight;
            let shape = store.get(id).value.shape().to_vec();
            store.set(id, Tensor::from_fn(&shape, |_| rng.gen_range(-0.3..0.3))).unwrap();
        }
        let run = |skip: bool| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let (r, n, e) = (pyramid(&mut tape, 2, 16, 1), pyramid(&mut tape, 2, 16, 5), pyramid(&mut tape, 2, 16, 9));
            let ctl = AlignControl {
                skip_propagation: skip,
                fields: None,
            };
            let out = a.align(&mut tape, &p, &r, &n, &e.0, &ctl).unwrap();
            assert_eq!(tape.shape(out.aligned), [2, C, 16, 16]);
            (tape.value(out.fields[0].offsets).clone(), tape.value(out.fields[2].offsets).clone())
        };
        let (fine_on, coarse_on) = run(false);
        let (fine_off, coarse_off) = run(true);
        assert_eq!(coarse_on, coarse_off);
        assert!(fine_on.max_abs_diff(&fine_off).unwrap() > 1e-3);
    }
}
