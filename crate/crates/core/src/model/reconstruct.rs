//! Residual decoder from attended features to a normalised HDR image.

use ehdr_tensor::{Bindings, Scalar, Tape, Var};

use super::layers::{Builder, Conv, ResBlock};
use crate::error::Result;

pub const RECON_RES_BLOCKS: usize = 10;

#[derive(Clone, Debug)]
pub struct Reconstruction {
    blocks: Vec<ResBlock>,
    out: Conv,
}

impl Reconstruction {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            blocks: (0..RECON_RES_BLOCKS)
                .map(|i| b.res_block(&format!("recon.res{i}"), channels))
                .collect(),
            out: b.conv("recon.out", 0, channels, 3, 1),
        }
    }

    pub fn blocks(&self) -> &[ResBlock] {
        &self.blocks
    }

    pub fn out_conv(&self) -> Conv {
        self.out
    }

    /// Residual blocks, skip from the reference features, then conv to RGB and sigmoid.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, attended: Var, ref_l1: Var) -> Result<Var> {
        let mut x = attended;
        for block in &self.blocks {
            x = block.apply(tape, p, x)?;
        }
        let x = tape.add(x, ref_l1)?;
        let y = self.out.apply(tape, p, x)?;
        Ok(tape.sigmoid(y)?)
    }
}
