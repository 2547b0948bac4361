use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const SAME3: ConvGeom = ConvGeom { stride: 1, pad: 1 };

    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    pub fn out_dim(&self, size: usize, kernel: usize) -> Option<usize> {
        let padded = size + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// Validated shapes of a convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvShape {
    pub fn check<T: Scalar>(
        op: &'static str,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: ConvGeom,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op,
                left: input.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    left: weight.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        let (Some(oh), Some(ow)) = (geom.out_dim(h, kh), geom.out_dim(w, kw)) else {
            return Err(TensorError::ShapeMismatch {
                op,
                left: input.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            geom,
        })
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.taps()
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }

    /// Input coordinate touched by output index `o` and kernel index `k`, if inside the image.
    #[inline]
    pub fn source(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.geom.stride + k) as isize - self.geom.pad as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

/// Output indices `lo..hi` whose tap `k` lands inside `0..size`.
fn valid_range(s: &ConvShape, k: usize, size: usize, out: usize) -> (usize, usize) {
    let (stride, pad) = (s.geom.stride, s.geom.pad);
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k { ((size + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one batch item into a `(cin * kh * kw) x (oh * ow)` patch matrix.
fn im2col<T: Scalar>(s: &ConvShape, image: &[T], cols: &mut [T]) {
    let p = s.out_pixels();
    let stride = s.geom.stride;
    for c in 0..s.cin {
        let plane = &image[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = &mut cols[((c * s.kh + ky) * s.kw + kx) * p..][..p];
                let (lo, hi) = valid_range(s, kx, s.w, s.ow);
                for oy in 0..s.oh {
                    let dst = &mut row[oy * s.ow..(oy + 1) * s.ow];
                    match s.source(oy, ky, s.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * s.w..(iy + 1) * s.w];
                            dst[..lo].fill(T::zero());
                            dst[hi..].fill(T::zero());
                            if hi > lo {
                                let first = lo * stride + kx - s.geom.pad;
                                if stride == 1 {
                                    dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                                } else {
                                    for (i, d) in dst[lo..hi].iter_mut().enumerate() {
                                        *d = src[first + i * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image gradient.
fn col2im<T: Scalar>(s: &ConvShape, cols: &[T], image_grad: &mut [T]) {
    let p = s.out_pixels();
    let stride = s.geom.stride;
    for c in 0..s.cin {
        let plane = &mut image_grad[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = &cols[((c * s.kh + ky) * s.kw + kx) * p..][..p];
                let (lo, hi) = valid_range(s, kx, s.w, s.ow);
                if hi <= lo {
                    continue;
                }
                let first = lo * stride + kx - s.geom.pad;
                for oy in 0..s.oh {
                    let Some(iy) = s.source(oy, ky, s.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * s.w..(iy + 1) * s.w];
                    let src = &row[oy * s.ow + lo..oy * s.ow + hi];
                    if stride == 1 {
                        for (d, &g) in dst[first..first + src.len()].iter_mut().zip(src) {
                            *d += g;
                        }
                    } else {
                        for (i, &g) in src.iter().enumerate() {
                            dst[first + i * stride] += g;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let s = ConvShape::check("conv2d", input, weight, bias, geom)?;
    let (k, p) = (s.patch_len(), s.out_pixels());
    let mut out = vec![T::zero(); s.n * s.cout * p];
    let mut cols = vec![T::zero(); k * p];
    let in_item = s.cin * s.h * s.w;
    for n in 0..s.n {
        im2col(&s, &input.data()[n * in_item..(n + 1) * in_item], &mut cols);
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

/// Accumulates convolution gradients into whichever buffers are requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeom,
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) -> Result<()> {
    let s = ConvShape::check("conv2d", input, weight, None, geom)?;
    let (k, p) = (s.patch_len(), s.out_pixels());
    let in_item = s.cin * s.h * s.w;
    let mut cols = vec![T::zero(); k * p];
    for n in 0..s.n {
        let g = &grad_out[n * s.cout * p..(n + 1) * s.cout * p];
        if let Some(gw) = grad_weight.as_deref_mut() {
            im2col(&s, &input.data()[n * in_item..(n + 1) * in_item], &mut cols);
            // gw (cout x k) += g (cout x p) * cols^T (p x k)
            T::gemm(
                s.cout,
                p,
                k,
                T::one(),
                g,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                T::one(),
                gw,
                (k as isize, 1),
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // cols (k x p) = w^T (k x cout) * g (cout x p)
            T::gemm(
                k,
                s.cout,
                p,
                T::one(),
                weight.data(),
                (1, k as isize),
                g,
                (p as isize, 1),
                T::zero(),
                &mut cols,
                (p as isize, 1),
            );
            col2im(&s, &cols, &mut gi[n * in_item..(n + 1) * in_item]);
        }
    }
    if let Some(gb) = grad_bias {
        for n in 0..s.n {
            for (o, row) in grad_out[n * s.cout * p..(n + 1) * s.cout * p]
                .chunks(p)
                .enumerate()
            {
                gb[o] += row.iter().copied().sum();
            }
        }
    }
    Ok(())
}
