//! Convolution layers and residual blocks over a shared [`ParamStore`].

use ehdr_tensor::{Bindings, ConvGeom, Init, ParamId, ParamStore, Scalar, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.1;

/// Registers parameters under a common name prefix.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    /// 3x3 convolution named `{block}.{index}.weight` / `.bias`.
    pub fn conv(&mut self, block: &str, index: usize, cin: usize, cout: usize, stride: usize) -> Conv {
        self.conv_init(block, index, cin, cout, stride, Init::FanIn)
    }

    /// 3x3 convolution whose weights start at zero.
    pub fn conv_zero(&mut self, block: &str, index: usize, cin: usize, cout: usize) -> Conv {
        self.conv_init(block, index, cin, cout, 1, Init::Zeros)
    }

    fn conv_init(&mut self, block: &str, index: usize, cin: usize, cout: usize, stride: usize, init: Init) -> Conv {
        let weight = self
            .store
            .add(format!("{block}.{index}.weight"), &[cout, cin, 3, 3], init, self.rng);
        let bias = self
            .store
            .add(format!("{block}.{index}.bias"), &[cout], Init::Zeros, self.rng);
        Conv {
            weight,
            bias,
            geom: ConvGeom::new(stride, 1),
        }
    }

    /// `x + conv(relu(conv(x)))` named `{block}.0` and `{block}.1`.
    pub fn res_block(&mut self, block: &str, channels: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(block, 0, channels, channels, 1),
            conv2: self.conv(block, 1, channels, channels, 1),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, p[self.weight], Some(p[self.bias]), self.geom)?)
    }

    pub fn apply_lrelu<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = self.apply(tape, p, x)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = self.conv1.apply(tape, p, x)?;
        let y = tape.relu(y)?;
        let y = self.conv2.apply(tape, p, y)?;
        Ok(tape.add(x, y)?)
    }
}
