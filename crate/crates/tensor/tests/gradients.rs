//! Finite-difference checks of every differentiable op, in f64.

mod common;

use common::{random, rng};
use ehdr_tensor::gradcheck::{check_gradients, GradCheckConfig};
use ehdr_tensor::{ConvGeom, Tape, Tensor, Var};
use rand::Rng;

const TOL: f64 = 1e-4;

fn assert_grads<F>(inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> ehdr_tensor::Result<Var>,
{
    let reports = check_gradients(inputs, f, GradCheckConfig::default()).unwrap();
    for r in reports {
        assert!(r.grad_norm > 0.0, "input {} has an all-zero gradient", r.input);
        assert!(r.passes(TOL), "input {}: rel error {:e}", r.input, r.rel_error);
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> ehdr_tensor::Result<Var> {
    let mut r = rng(seed);
    let w = tape.constant(random(tape.shape(y), &mut r));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn sum_of_conv_weight_gradient() {
    let mut r = rng(1);
    let x = random::<f64>(&[1, 2, 5, 5], &mut r);
    let w = random(&[3, 2, 3, 3], &mut r);
    assert_grads(&[w], |t, v| {
        let xv = t.constant(x.clone());
        let y = t.conv2d(xv, v[0], None, ConvGeom::SAME3)?;
        t.sum(y)
    });
}

#[test]
fn conv_all_arguments() {
    let mut r = rng(2);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let inputs = [random(&[2, 3, 6, 5], &mut r), random(&[4, 3, 3, 3], &mut r), random(&[4], &mut r)];
        assert_grads(&inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(stride, pad))?;
            probe(t, y, 9)
        });
    }
}

/// Offsets whose sample positions stay at least 0.1 px away from integer grid lines.
fn fractional_offsets(shape: &[usize], r: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let whole = r.gen_range(-2..2) as f64;
        whole + r.gen_range(0.1..0.9)
    })
}

#[test]
fn deform_conv_all_four_argument_classes() {
    let mut r = rng(3);
    let (n, cin, cout, h, w) = (1, 2, 3, 5, 6);
    let inputs = [
        random(&[n, cin, h, w], &mut r),
        fractional_offsets(&[n, 18, h, w], &mut r),
        Tensor::from_fn(&[n, 9, h, w], |_| r.gen_range(0.0..1.0)),
        random(&[cout, cin, 3, 3], &mut r),
        random(&[cout], &mut r),
    ];
    assert_grads(&inputs, |t, v| {
        let y = t.deform_conv(v[0], v[1], v[2], v[3], Some(v[4]), ConvGeom::SAME3)?;
        probe(t, y, 10)
    });
}

#[test]
fn elementwise_maps() {
    let mut r = rng(4);
    let a = random::<f64>(&[2, 2, 3, 3], &mut r);
    let b = Tensor::from_fn(&[2, 2, 3, 3], |_| r.gen_range(0.5..2.0));
    let away_from_zero = a.map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    assert_grads(&[away_from_zero.clone(), b.clone()], |t, v| {
        let m = t.mul(v[0], v[1])?;
        let d = t.div(m, v[1])?;
        let d = t.div(d, v[1])?;
        let s = t.sub(d, v[1])?;
        let l = t.leaky_relu(s, 0.1)?;
        let q = t.relu(v[0])?;
        let sg = t.sigmoid(l)?;
        let th = t.tanh(q)?;
        let ab = t.abs(v[0])?;
        let sum = t.add(sg, th)?;
        let sum = t.add(sum, ab)?;
        let sum = t.scale(sum, 0.7)?;
        let sum = t.add_scalar(sum, 0.1)?;
        let m = t.mean(sum)?;
        let p = probe(t, sum, 11)?;
        t.add(m, p)
    });
}

#[test]
fn mu_law_derivative() {
    let mut r = rng(5);
    let x = Tensor::from_fn(&[1, 3, 4, 4], |_| r.gen_range(0.01..0.95));
    assert_grads(&[x], |t, v| {
        let y = t.mu_law(v[0], 5000.0)?;
        probe(t, y, 12)
    });
}

#[test]
fn resampling_and_plumbing() {
    let mut r = rng(6);
    let inputs = [random(&[2, 2, 3, 4], &mut r), random(&[2, 3, 3, 4], &mut r)];
    assert_grads(&inputs, |t, v| {
        let cat = t.concat(&[v[0], v[1]])?;
        let up = t.upsample2x(cat)?;
        let crop = t.crop(up, 1, 2, 4, 5)?;
        let sl = t.slice_channels(crop, 1, 3)?;
        let b0 = t.select_batch(sl, 1)?;
        let b1 = t.select_batch(sl, 0)?;
        let st = t.stack(&[b0, b1, b0])?;
        let tail = t.slice_batch(st, 1, 2)?;
        let both = t.stack(&[st, tail])?;
        probe(t, both, 13)
    });
}
