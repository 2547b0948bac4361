//! Three-level feature pyramid encoder shared by images and event voxel grids.

use ehdr_tensor::{Bindings, Scalar, Tape, Var};

use super::layers::{Builder, Conv, ResBlock};
use crate::error::Result;

pub const ENCODER_RES_BLOCKS: usize = 5;

/// Feature maps at full, half and quarter resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pyramid(pub [Var; 3]);

impl Pyramid {
    pub fn level(&self, l: usize) -> Var {
        self.0[l]
    }

    /// Batch items `start..start + len` of every level.
    pub fn slice<T: Scalar>(&self, tape: &mut Tape<T>, start: usize, len: usize) -> Result<Self> {
        let mut out = self.0;
        for v in &mut out {
            *v = tape.slice_batch(*v, start, len)?;
        }
        Ok(Self(out))
    }
}

/// Downsampling block: strided conv then conv, each followed by LeakyReLU.
#[derive(Clone, Copy, Debug)]
struct Down {
    stride: Conv,
    conv: Conv,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    first: Conv,
    blocks: Vec<ResBlock>,
    down: [Down; 2],
}

impl Encoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, module: &str, in_channels: usize, channels: usize) -> Self {
        let first = b.conv(&format!("{module}.first"), 0, in_channels, channels, 1);
        let blocks = (0..ENCODER_RES_BLOCKS)
            .map(|i| b.res_block(&format!("{module}.res{i}"), channels))
            .collect();
        let mut down = |i: usize| {
            let name = format!("{module}.down{i}");
            Down {
                stride: b.conv(&name, 0, channels, channels, 2),
                conv: b.conv(&name, 1, channels, channels, 1),
            }
        };
        let down = [down(0), down(1)];
        Self { first, blocks, down }
    }

    /// Encodes an `N x C_in x H x W` batch; `H` and `W` must be divisible by 4.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Pyramid> {
        let mut l1 = self.first.apply_lrelu(tape, p, x)?;
        for block in &self.blocks {
            l1 = block.apply(tape, p, l1)?;
        }
        let mut levels = [l1; 3];
        for (i, d) in self.down.iter().enumerate() {
            let y = d.stride.apply_lrelu(tape, p, levels[i])?;
            levels[i + 1] = d.conv.apply_lrelu(tape, p, y)?;
        }
        Ok(Pyramid(levels))
    }
}
