//! Central finite-difference checks of every differentiable op.

use dsk_tensor::{Result, Tape, Tensor, Var, GROUP_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const PROBES: usize = 12;
const TOL: f64 = 1e-5;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Loss = <op(inputs), r> for a fixed random `r`, so every output element
/// contributes with a distinct weight.
fn loss_of(build: &Build, inputs: &[Tensor], seed: u64) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random(&mut rng, &shape));
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod).unwrap();
    (tape, vars, loss)
}

fn eval(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let (tape, _, loss) = loss_of(build, inputs, seed);
    tape.value(loss).item().unwrap()
}

fn check(name: &str, build: &Build, inputs: Vec<Tensor>) {
    let seed = 0xfeed;
    let (tape, vars, loss) = loss_of(build, &inputs, seed);
    let grads = tape.backward(loss).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 31 + 5);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let n = inputs[i].numel();
        let probes: Vec<usize> = if n <= PROBES {
            (0..n).collect()
        } else {
            (0..PROBES).map(|_| rng.random_range(0..n)).collect()
        };
        for j in probes {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(build, &plus, seed) - eval(build, &minus, seed)) / (2.0 * H);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                rel < TOL,
                "{name}: input {i} element {j}: analytic {a} numeric {numeric} rel {rel}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 5]);
    let b = random(&mut rng, &[3, 5]);
    let s = random(&mut rng, &[]);
    check("add", &|t, v| t.add(v[0], v[1]), vec![a.clone(), b.clone()]);
    check("sub", &|t, v| t.sub(v[0], v[1]), vec![a.clone(), b.clone()]);
    check("mul", &|t, v| t.mul(v[0], v[1]), vec![a.clone(), b.clone()]);
    check("mul_scalar", &|t, v| t.mul(v[0], v[1]), vec![a.clone(), s.clone()]);
    check("sub_scalar_left", &|t, v| t.sub(v[1], v[0]), vec![a.clone(), s]);
    check("scale", &|t, v| t.scale(v[0], -1.7), vec![a.clone()]);
    check("gelu", &|t, v| t.gelu(v[0]), vec![a.clone()]);
    let batched = random(&mut rng, &[3, 2, 4]);
    check("scale_batch", &|t, v| t.scale_batch(v[0], &[0.5, -2.0, 3.0]), vec![batched]);
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[4, 6]);
    check("sum", &|t, v| t.sum(v[0]), vec![a.clone()]);
    check("mean", &|t, v| t.mean(v[0]), vec![a.clone()]);
    check("sum_sq", &|t, v| t.sum_sq(v[0]), vec![a]);
}

#[test]
fn conv1d_unbatched_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 12]);
    let w = random(&mut rng, &[4, 3, 3]);
    let b = random(&mut rng, &[4]);
    check(
        "conv",
        &|t, v| t.conv1d_circular(v[0], v[1], Some(v[2]), 1),
        vec![x, w.clone(), b.clone()],
    );
    let xb = random(&mut rng, &[2, 3, 12]);
    check(
        "conv_batched_stride2",
        &|t, v| t.conv1d_circular(v[0], v[1], Some(v[2]), 2),
        vec![xb, w, b],
    );
    let xk5 = random(&mut rng, &[2, 2, 10]);
    let w5 = random(&mut rng, &[3, 2, 5]);
    check("conv_k5", &|t, v| t.conv1d_circular(v[0], v[1], None, 1), vec![xk5, w5]);
}

#[test]
fn group_norm_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 4, 6]);
    let g = random(&mut rng, &[4]);
    let b = random(&mut rng, &[4]);
    check(
        "group_norm",
        &|t, v| t.group_norm(v[0], 2, v[1], v[2], GROUP_NORM_EPS),
        vec![x, g, b],
    );
}

#[test]
fn linear_and_channel_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 4]);
    let w = random(&mut rng, &[5, 4]);
    let b = random(&mut rng, &[5]);
    check("linear", &|t, v| t.linear(v[0], v[1], Some(v[2])), vec![x, w.clone(), b]);
    let x1 = random(&mut rng, &[4]);
    check("linear_vec", &|t, v| t.linear(v[0], v[1], None), vec![x1, w]);

    let xc = random(&mut rng, &[2, 3, 5]);
    let shift = random(&mut rng, &[2, 3]);
    check("add_channel", &|t, v| t.add_channel(v[0], v[1]), vec![xc.clone(), shift]);
    let shared = random(&mut rng, &[3]);
    check("add_channel_shared", &|t, v| t.add_channel(v[0], v[1]), vec![xc.clone(), shared]);

    let other = random(&mut rng, &[2, 2, 5]);
    check("concat", &|t, v| t.concat_channels(v[0], v[1]), vec![xc.clone(), other]);
    check("upsample", &|t, v| t.upsample_nearest(v[0], 2), vec![xc.clone()]);
    check("select", &|t, v| t.select_last(v[0], &[4, 0, 2, 2]), vec![xc]);
}

#[test]
fn composite_residual_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[2, 4, 8]);
    let g = random(&mut rng, &[4]);
    let b = random(&mut rng, &[4]);
    let w = random(&mut rng, &[4, 4, 3]);
    let emb = random(&mut rng, &[2, 6]);
    let we = random(&mut rng, &[4, 6]);
    check(
        "resblock",
        &|t, v| {
            let h = t.group_norm(v[0], 2, v[1], v[2], GROUP_NORM_EPS)?;
            let h = t.gelu(h)?;
            let h = t.conv1d_circular(h, v[3], None, 1)?;
            let e = t.linear(v[4], v[5], None)?;
            let h = t.add_channel(h, e)?;
            let h = t.upsample_nearest(h, 2)?;
            let down = t.conv1d_circular(h, v[3], None, 2)?;
            t.add(down, v[0])
        },
        vec![x, g, b, w, emb, we],
    );
}
