//! The EHDR network: image and event encoders, event-guided deformable alignment with
//! ConvLSTM integration, pairwise and spatial attention, and reconstruction.
//!
//! Parameter names follow `module.block.index.kind`, e.g. `image_encoder.res3.1.weight`
//! is the second convolution of the fourth residual block of the image encoder.
//!
//! Data layout of one forward pass:
//! * images: `3 x 6 x H x W` in time order (previous, reference, next); channels are the
//!   gamma-encoded bracket followed by its exposure-compensated linear version;
//! * events: `2S x 5 x H x W`, step-major; item `2k` is chunk `k` of the window toward the
//!   previous bracket, item `2k + 1` chunk `k` of the window toward the next one.
//!
//! Both non-reference brackets are aligned together as a batch of two, so every
//! alignment tensor has batch index 0 = previous and 1 = next.

pub mod align;
pub mod attention;
pub mod convlstm;
pub mod encoder;
pub mod layers;
pub mod reconstruct;

use ehdr_tensor::{Bindings, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{window_voxels, Sample};
use crate::error::{EhdrError, Result};
use crate::events::{Direction, EventStream, VoxelGrid, VOXEL_BINS};
use crate::hdr::exposure_compensate;
use crate::image::{HdrImage, LdrImage};

pub use align::{AlignControl, Aligner, Alignment, DeformField, DeformPredictor, LEVELS, TAPS};
pub use attention::{PairwiseAttention, SpatialAttention, BLEND_EPS};
pub use convlstm::{ConvLstm, ConvLstmState};
pub use encoder::{Encoder, Pyramid};
pub use layers::{Builder, Conv, ResBlock, LEAKY_SLOPE};
pub use reconstruct::Reconstruction;

pub const IMAGE_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EhdrConfig {
    pub base_channels: usize,
}

impl Default for EhdrConfig {
    fn default() -> Self {
        Self { base_channels: 8 }
    }
}

impl EhdrConfig {
    /// Width used by the full-scale network.
    pub fn full_scale() -> Self {
        Self { base_channels: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(EhdrError::input("base_channels must be at least 4"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EhdrModel<T> {
    pub cfg: EhdrConfig,
    pub params: ParamStore<T>,
    pub image_encoder: Encoder,
    pub event_encoder: Encoder,
    /// One ConvLSTM per pyramid level, shared by both temporal directions.
    pub lstm: [ConvLstm; LEVELS],
    pub aligner: Aligner,
    pub pairwise: PairwiseAttention,
    pub spatial: SpatialAttention,
    pub recon: Reconstruction,
}

/// Network input tensors, padded so height and width are multiples of 4.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    pub images: Tensor<T>,
    pub events: Tensor<T>,
    pub steps: usize,
    pub width: usize,
    pub height: usize,
}

/// Values exposed by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `1 x 3 x H x W`, normalised HDR in `[0, 1]`.
    pub output: Var,
    pub image_features: Pyramid,
    pub event_features: Pyramid,
    /// Integrated event features per level, batch of two (previous, next).
    pub integrated: [Var; LEVELS],
    pub alignment: Alignment,
    pub fused: Var,
    pub attended: Var,
}

fn padded(n: usize) -> usize {
    n.div_ceil(4) * 4
}

// Reflects rows/columns past the bottom/right edge.
fn reflect_pad<T: Scalar>(t: &Tensor<T>, h2: usize, w2: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4()?;
    if (h2, w2) == (h, w) {
        return Ok(t.clone());
    }
    if h2 - h >= h || w2 - w >= w {
        return Err(EhdrError::input(format!("{h}x{w} input too small to reflect-pad")));
    }
    let src = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
    Ok(Tensor::from_fn(&[n, c, h2, w2], |i| {
        let (x, y, plane) = (i % w2, (i / w2) % h2, i / (w2 * h2));
        t.data()[(plane * h + src(y, h)) * w + src(x, w)]
    }))
}

fn bracket_tensor<T: Scalar>(b: &LdrImage) -> Result<Tensor<T>> {
    let lin = exposure_compensate(b)?;
    let (h, w) = (b.height, b.width);
    let plane = h * w;
    Ok(Tensor::from_fn(&[1, IMAGE_CHANNELS, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        let v = if c < 3 { b.pixels[p * 3 + c] } else { lin.pixels[p * 3 + c - 3] };
        T::of(v as f64)
    }))
}

fn batch<T: Scalar>(items: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let mut shape = items[0].shape().to_vec();
    shape[0] = items.len();
    let data = items.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(shape, data)?)
}

impl<T: Scalar> ModelInput<T> {
    pub fn from_parts(brackets: &[LdrImage; 3], forward: &[VoxelGrid], backward: &[VoxelGrid]) -> Result<Self> {
        let (w, h) = (brackets[1].width, brackets[1].height);
        if brackets.iter().any(|b| !b.same_size(&brackets[1])) {
            return Err(EhdrError::input("brackets differ in size"));
        }
        if forward.is_empty() || forward.len() != backward.len() {
            return Err(EhdrError::input(format!(
                "both event windows need the same, non-zero chunk count (got {} and {})",
                backward.len(),
                forward.len()
            )));
        }
        for g in forward.iter().chain(backward) {
            if g.width != w || g.height != h || g.bins != VOXEL_BINS {
                return Err(EhdrError::input("voxel grid geometry does not match the brackets"));
            }
        }
        let (h2, w2) = (padded(h), padded(w));
        let images = brackets
            .iter()
            .map(|b| reflect_pad(&bracket_tensor::<T>(b)?, h2, w2))
            .collect::<Result<Vec<_>>>()?;
        let mut events = Vec::with_capacity(2 * forward.len());
        for (b, f) in backward.iter().zip(forward) {
            events.push(reflect_pad(&b.to_tensor::<T>(), h2, w2)?);
            events.push(reflect_pad(&f.to_tensor::<T>(), h2, w2)?);
        }
        Ok(Self {
            images: batch(images)?,
            events: batch(events)?,
            steps: forward.len(),
            width: w,
            height: h,
        })
    }

    pub fn from_sample(s: &Sample) -> Result<Self> {
        Self::from_parts(&s.brackets, &s.forward, &s.backward)
    }

    /// Chunks and voxelises both event windows from the bracket timestamps.
    pub fn from_stream(brackets: &[LdrImage; 3], events: &EventStream, chunks: u64) -> Result<Self> {
        let t = [0, 1, 2].map(|i| brackets[i].timestamp_us);
        if !(t[0] < t[1] && t[1] < t[2]) {
            return Err(EhdrError::input("bracket timestamps must increase"));
        }
        let forward = window_voxels(events, t[1], t[2], chunks, Direction::Forward)?;
        let backward = window_voxels(events, t[1], t[0], chunks, Direction::Backward)?;
        Self::from_parts(brackets, &forward, &backward)
    }
}

impl<T: Scalar> EhdrModel<T> {
    pub fn new(cfg: EhdrConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let image_encoder = Encoder::new(&mut b, "image_encoder", IMAGE_CHANNELS, c);
        let event_encoder = Encoder::new(&mut b, "event_encoder", VOXEL_BINS, c);
        let lstm = [0, 1, 2].map(|l| ConvLstm::new(&mut b, &format!("lstm.l{}", l + 1), c));
        let aligner = Aligner::new(&mut b, c);
        let pairwise = PairwiseAttention::new(&mut b, c);
        let spatial = SpatialAttention::new(&mut b, c);
        let recon = Reconstruction::new(&mut b, c);
        Ok(Self {
            cfg,
            params: store,
            image_encoder,
            event_encoder,
            lstm,
            aligner,
            pairwise,
            spatial,
            recon,
        })
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> EhdrModel<U> {
        EhdrModel {
            cfg: self.cfg,
            params: self.params.cast(),
            image_encoder: self.image_encoder.clone(),
            event_encoder: self.event_encoder.clone(),
            lstm: self.lstm,
            aligner: self.aligner.clone(),
            pairwise: self.pairwise,
            spatial: self.spatial,
            recon: self.recon.clone(),
        }
    }

    /// Integrates the event features of one level; `features` is step-major with two
    /// items (previous, next) per step.
    pub fn integrate_events(&self, tape: &mut Tape<T>, p: &Bindings, level: usize, features: Var, steps: usize) -> Result<Var> {
        let chunks = (0..steps)
            .map(|k| tape.slice_batch(features, 2 * k, 2))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        self.lstm[level].integrate(tape, p, &chunks)
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bindings, input: &ModelInput<T>, ctl: &AlignControl) -> Result<Forward> {
        let images = tape.constant(input.images.clone());
        let events = tape.constant(input.events.clone());
        let image_features = self.image_encoder.apply(tape, p, images)?;
        let event_features = self.event_encoder.apply(tape, p, events)?;
        let mut integrated = [images; LEVELS];
        for (l, slot) in integrated.iter_mut().enumerate() {
            *slot = self.integrate_events(tape, p, l, event_features.level(l), input.steps)?;
        }
        let reference = image_features.slice(tape, 1, 1)?;
        let mut refs = reference.0;
        let mut nonref = reference.0;
        for l in 0..LEVELS {
            refs[l] = tape.stack(&[reference.level(l), reference.level(l)])?;
            let prev = tape.select_batch(image_features.level(l), 0)?;
            let next = tape.select_batch(image_features.level(l), 2)?;
            nonref[l] = tape.stack(&[prev, next])?;
        }
        let alignment = self
            .aligner
            .align(tape, p, &Pyramid(refs), &Pyramid(nonref), &integrated, ctl)?;
        let minus = tape.select_batch(alignment.aligned, 0)?;
        let plus = tape.select_batch(alignment.aligned, 1)?;
        let ref_l1 = reference.level(0);
        let fused = self.pairwise.fuse(tape, p, ref_l1, minus, plus)?;
        let attended = self.spatial.apply(tape, p, fused)?;
        let mut output = self.recon.apply(tape, p, attended, ref_l1)?;
        if tape.shape(output)[2..] != [input.height, input.width] {
            output = tape.crop(output, 0, 0, input.height, input.width)?;
        }
        Ok(Forward {
            output,
            image_features,
            event_features,
            integrated,
            alignment,
            fused,
            attended,
        })
    }

    /// Normalised HDR prediction.
    pub fn predict(&self, input: &ModelInput<T>) -> Result<HdrImage> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, input, &AlignControl::default())?;
        HdrImage::from_tensor(tape.value(out.output))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_sample, SampleConfig};

    fn sample(seed: u64, size: usize) -> Sample {
        build_sample(
            seed,
            &SampleConfig {
                width: size,
                height: size,
                ..SampleConfig::default()
            },
        )
        .unwrap()
    }

    fn model() -> EhdrModel<f32> {
        EhdrModel::new(EhdrConfig { base_channels: 4 }, 9).unwrap()
    }

    #[test]
    fn parameter_names_follow_the_scheme() {
        let m = model();
        for name in [
            "image_encoder.res3.1.weight",
            "event_encoder.first.0.bias",
            "lstm.l2.0.weight",
            "align.predict_l1.3.weight",
            "align.deform_l3.0.weight",
            "align.fuse_l1.0.weight",
            "pairwise.attn.0.weight",
            "spatial.feat_l2.0.weight",
            "recon.res9.1.bias",
            "recon.out.0.weight",
        ] {
            assert!(m.params.find(name).is_some(), "{name}");
        }
        assert!(m.params.find("align.fuse_l3.0.weight").is_none());
        assert!(EhdrModel::<f32>::new(EhdrConfig { base_channels: 2 }, 0).is_err());
    }

    #[test]
    fn same_seed_same_prediction() {
        let s = sample(2, 32);
        let input = ModelInput::from_sample(&s).unwrap();
        let a = model().predict(&input).unwrap();
        let b = model().predict(&input).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        let other = EhdrModel::<f32>::new(EhdrConfig { base_channels: 4 }, 10).unwrap();
        assert_ne!(other.predict(&input).unwrap(), a);
    }

    #[test]
    fn input_layout() {
        let s = sample(1, 32);
        let input = ModelInput::<f32>::from_sample(&s).unwrap();
        assert_eq!(input.images.shape(), [3, IMAGE_CHANNELS, 32, 32]);
        assert_eq!(input.events.shape(), [2 * s.forward.len(), VOXEL_BINS, 32, 32]);
        assert_eq!(input.events.data()[..32 * 32 * VOXEL_BINS], s.backward[0].to_tensor::<f32>().data()[..]);
        let short = [s.brackets[0].clone(), s.brackets[1].clone(), s.brackets[2].clone()];
        assert!(ModelInput::<f32>::from_parts(&short, &s.forward, &s.backward[..1]).is_err());
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let s = build_sample(3, &SampleConfig { width: 38, height: 34, ..SampleConfig::default() }).unwrap();
        let input = ModelInput::<f32>::from_sample(&s).unwrap();
        assert_eq!(input.images.shape()[2..], [36, 40]);
        let out = model().predict(&input).unwrap();
        assert_eq!((out.width, out.height), (38, 34));
    }

    #[test]
    fn event_path_ignores_the_brackets() {
        let m = model();
        let s = sample(4, 32);
        let mut t = s.clone();
        t.brackets[0].pixels.iter_mut().for_each(|v| *v = 1.0 - *v);
        t.brackets[2].pixels.iter_mut().for_each(|v| *v *= 0.5);
        let run = |s: &Sample| {
            let mut tape = Tape::new();
            let p = m.params.bind_frozen(&mut tape);
            let f = m.forward(&mut tape, &p, &ModelInput::from_sample(s).unwrap(), &AlignControl::default()).unwrap();
            let ev = f.integrated.map(|v| tape.value(v).clone());
            let r = f.image_features.slice(&mut tape, 1, 1).unwrap();
            let ref_l1 = tape.value(r.level(0)).clone();
            let out = tape.value(f.output).clone();
            (ev, ref_l1, out)
        };
        let (ev_a, ref_a, out_a) = run(&s);
        let (ev_b, ref_b, out_b) = run(&t);
        assert_eq!(ev_a, ev_b);
        assert_eq!(ref_a, ref_b);
        assert_ne!(out_a, out_b);
    }

    #[test]
    fn ablations_keep_the_output_shape() {
        let m = model();
        let s = sample(5, 32);
        let full = m.predict(&ModelInput::from_sample(&s).unwrap()).unwrap();
        let blind = m.predict(&ModelInput::from_sample(&s.without_events()).unwrap()).unwrap();
        assert_eq!((full.width, full.height), (blind.width, blind.height));
        let mut tape = Tape::new();
        let p = m.params.bind_frozen(&mut tape);
        let ctl = AlignControl {
            skip_propagation: true,
            fields: None,
        };
        let f = m.forward(&mut tape, &p, &ModelInput::from_sample(&s).unwrap(), &ctl).unwrap();
        assert_eq!(tape.shape(f.output), [1, 3, 32, 32]);
        assert_eq!(tape.shape(f.fused), [1, 4, 32, 32]);
    }

    #[test]
    fn double_precision_matches_single() {
        let m = model();
        let s = sample(6, 32);
        let a = m.predict(&ModelInput::from_sample(&s).unwrap()).unwrap();
        let b = m.cast::<f64>().predict(&ModelInput::from_sample(&s).unwrap()).unwrap();
        let worst = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst < 1e-4, "{worst}");
    }
}
