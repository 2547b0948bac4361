use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source row/column taps of a half-pixel-centred 2x bilinear upsample.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(out: usize, size: usize) -> Vec<Tap> {
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(size - 1);
            Tap {
                lo,
                hi: (lo + 1).min(size - 1),
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let (ty, tx) = (taps(oh, h), taps(ow, w));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks(h * w) {
        for t in &ty {
            let (fy, gy) = (T::of(t.frac), T::of(1.0 - t.frac));
            let r0 = &plane[t.lo * w..(t.lo + 1) * w];
            let r1 = &plane[t.hi * w..(t.hi + 1) * w];
            for s in &tx {
                let (fx, gx) = (T::of(s.frac), T::of(1.0 - s.frac));
                out.push(gy * (gx * r0[s.lo] + fx * r0[s.hi]) + fy * (gx * r1[s.lo] + fx * r1[s.hi]));
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn upsample2x_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &[T],
    grad_in: &mut [T],
) {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let (ty, tx) = (taps(oh, h), taps(ow, w));
    for (gplane, iplane) in grad_out.chunks(oh * ow).zip(grad_in.chunks_mut(h * w)) {
        for (oy, t) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(t.frac), T::of(1.0 - t.frac));
            for (ox, s) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(s.frac), T::of(1.0 - s.frac));
                let g = gplane[oy * ow + ox];
                iplane[t.lo * w + s.lo] += g * gy * gx;
                iplane[t.lo * w + s.hi] += g * gy * fx;
                iplane[t.hi * w + s.lo] += g * fy * gx;
                iplane[t.hi * w + s.hi] += g * fy * fx;
            }
        }
    }
}
