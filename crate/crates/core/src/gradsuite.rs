//! Finite-difference verification of every differentiable building block, run in `f64`.

use ehdr_tensor::gradcheck::{check_gradients, GradCheckConfig, GradReport};
use ehdr_tensor::{Bindings, ConvGeom, ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EhdrError, Result};
use crate::model::{Builder, ConvLstm, PairwiseAttention, SpatialAttention};
use crate::training::mu_l1;

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Small enough that LeakyReLU kinks are rarely straddled and the μ-law curvature
/// leaves the central difference accurate well below the tolerance.
pub const GRAD_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub reports: Vec<GradReport>,
}

impl GradCase {
    pub fn worst(&self) -> f64 {
        self.reports.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.reports.iter().all(|r| r.passes(GRAD_TOLERANCE))
    }
}

fn lift(e: EhdrError) -> TensorError {
    TensorError::InvalidArgument {
        op: "gradsuite",
        msg: e.to_string(),
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

// Contracts an output with a fixed random tensor so every entry matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> ehdr_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(uniform(&shape, &mut rng, -1.0, 1.0));
    let y = tape.mul(y, w)?;
    tape.sum(y)
}

fn params(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|p| p.value.clone()).collect()
}

/// Runs every case with the given seed.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let cfg = GradCheckConfig {
        eps: GRAD_STEP,
        max_entries: 256,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut add = |name, reports| cases.push(GradCase { name, reports });

    for (name, geom) in [("conv2d", ConvGeom::SAME3), ("conv2d stride 2", ConvGeom::new(2, 1))] {
        let inputs = [
            uniform(&[2, 3, 7, 6], &mut rng, -1.0, 1.0),
            uniform(&[4, 3, 3, 3], &mut rng, -1.0, 1.0),
            uniform(&[4], &mut rng, -1.0, 1.0),
        ];
        let r = check_gradients(
            &inputs,
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], Some(v[2]), geom)?;
                probe(tape, y, seed)
            },
            cfg,
        )?;
        add(name, r);
    }

    let inputs = [
        uniform(&[1, 2, 6, 5], &mut rng, -1.0, 1.0),
        uniform(&[1, 18, 6, 5], &mut rng, -1.3, 1.3),
        uniform(&[1, 9, 6, 5], &mut rng, 0.1, 0.9),
        uniform(&[3, 2, 3, 3], &mut rng, -1.0, 1.0),
        uniform(&[3], &mut rng, -1.0, 1.0),
    ];
    let r = check_gradients(
        &inputs,
        |tape, v| {
            let y = tape.deform_conv(v[0], v[1], v[2], v[3], Some(v[4]), ConvGeom::SAME3)?;
            probe(tape, y, seed)
        },
        cfg,
    )?;
    add("deform_conv", r);

    let mut store = ParamStore::new();
    let lstm = ConvLstm::new(&mut Builder { store: &mut store, rng: &mut rng }, "lstm", 3);
    let mut inputs = params(&store);
    let n = inputs.len();
    for _ in 0..4 {
        inputs.push(uniform(&[2, 3, 5, 5], &mut rng, -1.0, 1.0));
    }
    let r = check_gradients(
        &inputs,
        |tape, v| {
            let p = Bindings::from_vars(v[..n].to_vec());
            let h = lstm.integrate(tape, &p, &v[n..]).map_err(lift)?;
            probe(tape, h, seed)
        },
        cfg,
    )?;
    add("ConvLSTM, 4 steps", r);

    let mut store = ParamStore::new();
    let attn = PairwiseAttention::new(&mut Builder { store: &mut store, rng: &mut rng }, 3);
    let mut inputs = params(&store);
    let n = inputs.len();
    for _ in 0..3 {
        inputs.push(uniform(&[1, 3, 6, 6], &mut rng, -1.0, 1.0));
    }
    let r = check_gradients(
        &inputs,
        |tape, v| {
            let p = Bindings::from_vars(v[..n].to_vec());
            let f = attn.fuse(tape, &p, v[n], v[n + 1], v[n + 2]).map_err(lift)?;
            probe(tape, f, seed)
        },
        cfg,
    )?;
    add("pairwise attention", r);

    let mut store = ParamStore::new();
    let spatial = SpatialAttention::new(&mut Builder { store: &mut store, rng: &mut rng }, 2);
    let mut inputs = params(&store);
    let n = inputs.len();
    inputs.push(uniform(&[1, 2, 8, 8], &mut rng, -1.0, 1.0));
    let r = check_gradients(
        &inputs,
        |tape, v| {
            let p = Bindings::from_vars(v[..n].to_vec());
            let y = spatial.apply(tape, &p, v[n]).map_err(lift)?;
            probe(tape, y, seed)
        },
        cfg,
    )?;
    add("spatial attention", r);

    let gt = uniform(&[1, 3, 8, 8], &mut rng, 0.0, 1.0);
    let r = check_gradients(
        &[uniform(&[1, 3, 8, 8], &mut rng, 0.0, 1.0)],
        |tape, v| {
            let g = tape.constant(gt.clone());
            mu_l1(tape, v[0], g).map_err(lift)
        },
        cfg,
    )?;
    add("mu-law L1 loss", r);

    Ok(cases)
}
