//! Modulated deformable convolution.
//!
//! Output location `p` sums, over kernel taps `k`, the weight times the input
//! bilinearly sampled at `p + p_k + offset_k(p)`, scaled by `mask_k(p)`.
//! Offsets carry `2K` channels laid out as `(dx_0, dy_0, dx_1, dy_1, ...)`;
//! masks carry `K` channels. One offset group is shared by all input channels.

use crate::conv::{ConvGeom, ConvShape};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bilinear sampling footprint of a fractional coordinate.
#[derive(Clone, Copy, Debug)]
struct Footprint<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

impl<T: Scalar> Footprint<T> {
    fn at(x: T, y: T) -> Self {
        let (xf, yf) = (x.floor(), y.floor());
        Self {
            x0: xf.to_isize().unwrap_or(isize::MIN / 2),
            y0: yf.to_isize().unwrap_or(isize::MIN / 2),
            fx: x - xf,
            fy: y - yf,
        }
    }

    /// Flat indices of the four neighbours (`None` when outside) in the order
    /// `(x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1)`.
    fn neighbours(&self, h: usize, w: usize) -> [Option<usize>; 4] {
        let idx = |dx: isize, dy: isize| {
            let (x, y) = (self.x0 + dx, self.y0 + dy);
            (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h)
                .then(|| y as usize * w + x as usize)
        };
        [idx(0, 0), idx(1, 0), idx(0, 1), idx(1, 1)]
    }

    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fx) * (one - self.fy),
            self.fx * (one - self.fy),
            (one - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }
}

#[inline]
fn fetch<T: Scalar>(plane: &[T], idx: Option<usize>) -> T {
    idx.map_or(T::zero(), |i| plane[i])
}

/// Bilinearly interpolates channel `channel` of batch item `batch` at `(x, y)`.
///
/// Neighbours outside the image read as zero, so samples far outside return 0.
pub fn bilinear_sample<T: Scalar>(
    input: &Tensor<T>,
    x: T,
    y: T,
    channel: usize,
    batch: usize,
) -> T {
    let (_, c, h, w) = input.dims4().expect("bilinear_sample needs a 4-D tensor");
    let plane = &input.data()[(batch * c + channel) * h * w..][..h * w];
    let fp = Footprint::at(x, y);
    fp.neighbours(h, w)
        .into_iter()
        .zip(fp.weights())
        .map(|(i, wt)| wt * fetch(plane, i))
        .sum()
}

pub(crate) struct DeformShape {
    pub conv: ConvShape,
}

impl DeformShape {
    pub fn check<T: Scalar>(
        input: &Tensor<T>,
        offsets: &Tensor<T>,
        masks: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: ConvGeom,
    ) -> Result<Self> {
        let conv = ConvShape::check("deform_conv", input, weight, bias, geom)?;
        let k = conv.taps();
        let want_off = [conv.n, 2 * k, conv.oh, conv.ow];
        let want_mask = [conv.n, k, conv.oh, conv.ow];
        if offsets.shape() != want_off {
            return Err(TensorError::ShapeMismatch {
                op: "deform_conv offsets",
                left: want_off.to_vec(),
                right: offsets.shape().to_vec(),
            });
        }
        if masks.shape() != want_mask {
            return Err(TensorError::ShapeMismatch {
                op: "deform_conv masks",
                left: want_mask.to_vec(),
                right: masks.shape().to_vec(),
            });
        }
        Ok(Self { conv })
    }

    /// Sampling footprint for tap `k` at output pixel `p` of batch item `n`.
    #[inline]
    fn footprint<T: Scalar>(&self, offsets: &[T], n: usize, k: usize, p: usize) -> Footprint<T> {
        let s = &self.conv;
        let np = s.out_pixels();
        let base = n * 2 * s.taps() * np;
        let dx = offsets[base + 2 * k * np + p];
        let dy = offsets[base + (2 * k + 1) * np + p];
        let (oy, ox) = (p / s.ow, p % s.ow);
        let (ky, kx) = (k / s.kw, k % s.kw);
        let stride = s.geom.stride as isize;
        let pad = s.geom.pad as isize;
        let bx = (ox as isize * stride - pad + kx as isize) as f64;
        let by = (oy as isize * stride - pad + ky as isize) as f64;
        Footprint::at(T::of(bx) + dx, T::of(by) + dy)
    }
}

/// Builds the modulated, deformed patch matrix of one batch item.
fn deform_cols<T: Scalar>(
    ds: &DeformShape,
    input: &Tensor<T>,
    offsets: &[T],
    masks: &[T],
    n: usize,
    cols: &mut [T],
) {
    let s = &ds.conv;
    let (np, taps, hw) = (s.out_pixels(), s.taps(), s.h * s.w);
    let image = &input.data()[n * s.cin * hw..(n + 1) * s.cin * hw];
    let mask_base = n * taps * np;
    for k in 0..taps {
        for p in 0..np {
            let fp = ds.footprint(offsets, n, k, p);
            let nb = fp.neighbours(s.h, s.w);
            let wt = fp.weights();
            let m = masks[mask_base + k * np + p];
            for c in 0..s.cin {
                let plane = &image[c * hw..(c + 1) * hw];
                let v = wt[0] * fetch(plane, nb[0])
                    + wt[1] * fetch(plane, nb[1])
                    + wt[2] * fetch(plane, nb[2])
                    + wt[3] * fetch(plane, nb[3]);
                cols[(c * taps + k) * np + p] = v * m;
            }
        }
    }
}

pub(crate) fn deform_forward<T: Scalar>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    masks: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let ds = DeformShape::check(input, offsets, masks, weight, bias, geom)?;
    let s = ds.conv;
    let (k, p) = (s.patch_len(), s.out_pixels());
    let mut out = vec![T::zero(); s.n * s.cout * p];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..s.n {
        deform_cols(&ds, input, offsets.data(), masks.data(), n, &mut cols);
        let dst = &mut out[n * s.cout * p..(n + 1) * s.cout * p];
        if let Some(b) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        T::gemm(
            s.cout,
            k,
            p,
            T::one(),
            weight.data(),
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            T::one(),
            dst,
            (p as isize, 1),
        );
    }
    Tensor::new(s.out_shape(), out)
}

/// Gradient buffers requested from [`deform_backward`].
pub(crate) struct DeformGrads<'a, T> {
    pub input: Option<&'a mut [T]>,
    pub offsets: Option<&'a mut [T]>,
    pub masks: Option<&'a mut [T]>,
    pub weight: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

pub(crate) fn deform_backward<T: Scalar>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    masks: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeom,
    grad_out: &[T],
    mut grads: DeformGrads<'_, T>,
) -> Result<()> {
    let ds = DeformShape::check(input, offsets, masks, weight, None, geom)?;
    let s = ds.conv;
    let (kdim, np, taps, hw) = (s.patch_len(), s.out_pixels(), s.taps(), s.h * s.w);
    let mut cols = vec![T::zero(); kdim * np];
    let mut gcols = vec![T::zero(); kdim * np];
    let need_sampling =
        grads.input.is_some() || grads.offsets.is_some() || grads.masks.is_some();
    for n in 0..s.n {
        let g = &grad_out[n * s.cout * np..(n + 1) * s.cout * np];
        if let Some(gw) = grads.weight.as_deref_mut() {
            deform_cols(&ds, input, offsets.data(), masks.data(), n, &mut cols);
            T::gemm(
                s.cout,
                np,
                kdim,
                T::one(),
                g,
                (np as isize, 1),
                &cols,
                (1, np as isize),
                T::one(),
                gw,
                (kdim as isize, 1),
            );
        }
        if let Some(gb) = grads.bias.as_deref_mut() {
            for (o, row) in g.chunks(np).enumerate() {
                gb[o] += row.iter().copied().sum();
            }
        }
        if !need_sampling {
            continue;
        }
        T::gemm(
            kdim,
            s.cout,
            np,
            T::one(),
            weight.data(),
            (1, kdim as isize),
            g,
            (np as isize, 1),
            T::zero(),
            &mut gcols,
            (np as isize, 1),
        );
        let image = &input.data()[n * s.cin * hw..(n + 1) * s.cin * hw];
        let off_base = n * 2 * taps * np;
        let mask_base = n * taps * np;
        for k in 0..taps {
            for p in 0..np {
                let fp = ds.footprint(offsets.data(), n, k, p);
                let nb = fp.neighbours(s.h, s.w);
                let wt = fp.weights();
                let m = masks.data()[mask_base + k * np + p];
                let one = T::one();
                let (mut g_mask, mut g_x, mut g_y) = (T::zero(), T::zero(), T::zero());
                for c in 0..s.cin {
                    let gc = gcols[(c * taps + k) * np + p];
                    if gc == T::zero() {
                        continue;
                    }
                    let plane = &image[c * hw..(c + 1) * hw];
                    let v = [
                        fetch(plane, nb[0]),
                        fetch(plane, nb[1]),
                        fetch(plane, nb[2]),
                        fetch(plane, nb[3]),
                    ];
                    let sample = wt[0] * v[0] + wt[1] * v[1] + wt[2] * v[2] + wt[3] * v[3];
                    g_mask += gc * sample;
                    g_x += gc * ((one - fp.fy) * (v[1] - v[0]) + fp.fy * (v[3] - v[2]));
                    g_y += gc * ((one - fp.fx) * (v[2] - v[0]) + fp.fx * (v[3] - v[1]));
                    if let Some(gi) = grads.input.as_deref_mut() {
                        let plane_grad = &mut gi[(n * s.cin + c) * hw..][..hw];
                        for (idx, w) in nb.iter().zip(wt) {
                            if let Some(i) = idx {
                                plane_grad[*i] += gc * m * w;
                            }
                        }
                    }
                }
                if let Some(gm) = grads.masks.as_deref_mut() {
                    gm[mask_base + k * np + p] += g_mask;
                }
                if let Some(go) = grads.offsets.as_deref_mut() {
                    go[off_base + 2 * k * np + p] += g_x * m;
                    go[off_base + (2 * k + 1) * np + p] += g_y * m;
                }
            }
        }
    }
    Ok(())
}
