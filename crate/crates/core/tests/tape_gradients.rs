//! Every tape operation's adjoint against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urbanflow::numerics::fd::relative_error;
use urbanflow::numerics::{GridTensor, Tape, Var};
use urbanflow::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> GridTensor {
    GridTensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Builds `loss = Σ w ⊙ f(inputs)` with fixed random weights `w` and compares
/// the tape gradient of each input with central differences.
fn check<F>(name: &str, inputs: Vec<GridTensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let weights = GridTensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));
    let eval = |xs: &[GridTensor]| -> (f64, Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let wv = tape.constant(weights.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        (tape.value(loss).item(), tape, vars, loss)
    };
    let (_, tape, vars, loss) = eval(&inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[k]);
        for i in 0..x.numel() {
            let mut xs = inputs.clone();
            xs[k].data_mut()[i] += H;
            let plus = eval(&xs).0;
            xs[k].data_mut()[i] -= 2.0 * H;
            let minus = eval(&xs).0;
            let numeric = (plus - minus) / (2.0 * H);
            worst = worst.max(relative_error(g.data()[i], numeric, 1e-3));
        }
    }
    println!("{name}: max relative error {worst:.3e}");
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check("exp", vec![a.clone()], |t, v| Ok(t.exp(v[0])));
    check("tanh", vec![a.clone()], |t, v| Ok(t.tanh(v[0])));
    check("gelu", vec![a.clone()], |t, v| Ok(t.gelu(v[0])));
    check("square", vec![a.clone()], |t, v| Ok(t.square(v[0])));
    check("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
    check("add_scalar", vec![a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3)));
    check("soft_clamp", vec![a.clone()], |t, v| Ok(t.soft_clamp(v[0], 1.5)));
    let pos = a.map(|x| x.abs() + 0.5);
    check("log", vec![pos.clone()], |t, v| Ok(t.log(v[0])));
    check("powf", vec![pos], |t, v| Ok(t.powf(v[0], -0.5)));
    let mask = GridTensor::from_fn(&[3, 4], |i| (i % 2) as f64);
    check("mul_const", vec![a.clone()], move |t, v| {
        t.mul_const(v[0], mask.clone())
    });
    check("mul_scalar_var", vec![a.clone(), GridTensor::scalar(0.7)], |t, v| {
        t.mul_scalar_var(v[0], v[1])
    });
}

#[test]
fn matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let row = rand_tensor(&mut rng, &[1, 4]);
    check("matmul", vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]));
    check("add_row", vec![a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]));
    check("mul_row", vec![a.clone(), row], |t, v| t.mul_row(v[0], v[1]));
    check("mean_rows", vec![a.clone()], |t, v| t.mean_rows(v[0]));
    check("sum_cols", vec![a.clone()], |t, v| t.sum_cols(v[0]));
    check("slice_cols", vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 3));
    let c = rand_tensor(&mut rng, &[3, 2]);
    check("concat_cols", vec![a.clone(), c], |t, v| t.concat_cols(&[v[0], v[1]]));
    check("permute_cols", vec![a.clone()], |t, v| {
        t.permute_cols(v[0], &[3, 0, 2, 1])
    });
    check("softmax", vec![a.clone()], |t, v| Ok(t.softmax(v[0])));
    check("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[2, 6]));
    let x3 = rand_tensor(&mut rng, &[2, 3, 4]);
    check("mean_axis", vec![x3], |t, v| t.mean_axis(v[0], 1));
    let w = rand_tensor(&mut rng, &[2, 3]);
    let vv = rand_tensor(&mut rng, &[2, 4]);
    check("batch_outer", vec![w, vv], |t, v| t.batch_outer(v[0], v[1]));
    let labels = GridTensor::from_fn(&[2, 5], |_| rng.random_range(-0.5..3.5));
    check("soft_masks", vec![labels], |t, v| t.soft_masks(v[0], 4, 3.0));
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 4, 5, 5]);
    let k = rand_tensor(&mut rng, &[6, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[6]);
    check("conv2d_grouped", vec![x.clone(), k, b], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 2)
    });
    let kd = rand_tensor(&mut rng, &[4, 1, 3, 3]);
    let bd = rand_tensor(&mut rng, &[4]);
    check("conv2d_depthwise", vec![x.clone(), kd, bd], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 4)
    });
    let x4 = rand_tensor(&mut rng, &[2, 4, 4, 4]);
    let ks = rand_tensor(&mut rng, &[8, 4, 2, 2]);
    let bs = rand_tensor(&mut rng, &[8]);
    check("conv2d_stride2", vec![x4, ks, bs], |t, v| {
        t.conv2d(v[0], v[1], v[2], 2, 1)
    });
    let g = rand_tensor(&mut rng, &[4]);
    let be = rand_tensor(&mut rng, &[4]);
    check("layer_norm_channels", vec![x.clone(), g.clone(), be.clone()], |t, v| {
        t.layer_norm(v[0], 1, v[1], v[2], 1e-5)
    });
    let m = rand_tensor(&mut rng, &[3, 4]);
    check("layer_norm_rows", vec![m, g.clone(), be], |t, v| {
        t.layer_norm(v[0], 1, v[1], v[2], 1e-5)
    });
    check("global_avg_pool", vec![x.clone()], |t, v| t.global_avg_pool(v[0]));
    check("mul_channel", vec![x, g], |t, v| t.mul_channel(v[0], v[1]));
}

#[test]
fn attention_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = rand_tensor(&mut rng, &[6, 4]);
    let k = rand_tensor(&mut rng, &[6, 4]);
    let v = rand_tensor(&mut rng, &[6, 4]);
    check("attention", vec![q, k, v], |t, x| {
        t.attention(x[0], x[1], x[2], 2, 3, 2)
    });
}

#[test]
fn shared_parameter_accumulates() {
    let mut tape = Tape::new();
    let p = GridTensor::vector(vec![1.5, -0.5]);
    let a = tape.param("w", &p);
    let b = tape.param("w", &p);
    assert_eq!(a, b);
    let y = tape.mul(a, b).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap().params();
    assert_eq!(g.get("w").unwrap().data(), &[3.0, -1.0]);
}
