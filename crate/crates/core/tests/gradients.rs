//! Reverse-mode gradients against central finite differences.

use flowstep_core::autodiff::{Tape, Var};
use flowstep_core::rng::{normal_tensor, seeded, uniform, Rng};
use flowstep_core::{Result, Tensor};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Builds a scalar from the given inputs. Upstream gradients are made
/// non-uniform by weighting the output with a fixed random tensor.
type Graph = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn weighted_sum(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(normal_tensor(&mut seeded(rng_seed), &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn eval(graph: &Graph, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = graph(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Relative error `|g - g_fd| / (|g| + |g_fd|)` over all inputs jointly.
fn gradient_error(graph: &Graph, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = graph(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[k].numel()],
        };
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(graph, &plus) - eval(graph, &minus)) / (2.0 * H);
            diff += (analytic[i] - numeric).powi(2);
            norm_a += analytic[i].powi(2);
            norm_n += numeric.powi(2);
        }
    }
    let denom = norm_a.sqrt() + norm_n.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    normal_tensor(rng, shape)
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| 0.5 + 1.5 * uniform(rng))
}

fn check(name: &str, graph: &Graph, inputs: &[Tensor]) {
    let err = gradient_error(graph, inputs);
    assert!(err < TOL, "{name}: relative gradient error {err:e}");
}

macro_rules! unary {
    ($test:ident, $op:ident, $gen:ident) => {
        #[test]
        fn $test() {
            let mut rng = seeded(11);
            let x = $gen(&mut rng, &[3, 4]);
            let g = |t: &mut Tape, v: &[Var]| {
                let y = t.$op(v[0]);
                weighted_sum(t, y, 1)
            };
            check(stringify!($op), &g, &[x]);
        }
    };
}

macro_rules! binary {
    ($test:ident, $op:ident, $gen_b:ident) => {
        #[test]
        fn $test() {
            let mut rng = seeded(12);
            let a = randn(&mut rng, &[3, 4]);
            let b = $gen_b(&mut rng, &[3, 4]);
            let g = |t: &mut Tape, v: &[Var]| {
                let y = t.$op(v[0], v[1])?;
                weighted_sum(t, y, 2)
            };
            check(stringify!($op), &g, &[a, b]);
        }
    };
}

unary!(tanh_matches_fd, tanh, randn);
unary!(silu_matches_fd, silu, randn);
unary!(sin_matches_fd, sin, randn);
unary!(cos_matches_fd, cos, randn);
unary!(exp_matches_fd, exp, randn);
unary!(ln_matches_fd, ln, positive);
unary!(sqrt_matches_fd, sqrt, positive);
unary!(softplus_matches_fd, softplus, randn);
unary!(recip_matches_fd, recip, positive);
unary!(square_matches_fd, square, randn);

binary!(add_matches_fd, add, randn);
binary!(sub_matches_fd, sub, randn);
binary!(mul_matches_fd, mul, randn);
binary!(div_matches_fd, div, positive);

#[test]
fn matmul_matches_fd() {
    let mut rng = seeded(13);
    let a = randn(&mut rng, &[3, 5]);
    let b = randn(&mut rng, &[5, 2]);
    let g = |t: &mut Tape, v: &[Var]| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 3)
    };
    check("matmul", &g, &[a, b]);
}

#[test]
fn add_bias_matches_fd() {
    let mut rng = seeded(14);
    let a = randn(&mut rng, &[4, 3]);
    let b = randn(&mut rng, &[1, 3]);
    let g = |t: &mut Tape, v: &[Var]| {
        let y = t.add_bias(v[0], v[1])?;
        weighted_sum(t, y, 4)
    };
    check("add_bias", &g, &[a, b]);
}

#[test]
fn scale_by_matches_fd() {
    let mut rng = seeded(15);
    let a = randn(&mut rng, &[4, 3]);
    let s = randn(&mut rng, &[1]);
    let g = |t: &mut Tape, v: &[Var]| {
        let y = t.scale_by(v[0], v[1])?;
        weighted_sum(t, y, 5)
    };
    check("scale_by", &g, &[a, s]);
}

#[test]
fn scale_sum_mean_sum_cols_match_fd() {
    let mut rng = seeded(16);
    let a = randn(&mut rng, &[4, 3]);
    let scale = |t: &mut Tape, v: &[Var]| {
        let y = t.scale(v[0], -2.5);
        weighted_sum(t, y, 6)
    };
    check("scale", &scale, std::slice::from_ref(&a));
    let sum = |t: &mut Tape, v: &[Var]| {
        let y = t.square(v[0]);
        Ok(t.sum(y))
    };
    check("sum", &sum, std::slice::from_ref(&a));
    let mean = |t: &mut Tape, v: &[Var]| {
        let y = t.square(v[0]);
        Ok(t.mean(y))
    };
    check("mean", &mean, std::slice::from_ref(&a));
    let sum_cols = |t: &mut Tape, v: &[Var]| {
        let y = t.sum_cols(v[0])?;
        weighted_sum(t, y, 7)
    };
    check("sum_cols", &sum_cols, &[a]);
}

#[test]
fn concat_and_slice_match_fd() {
    let mut rng = seeded(17);
    let a = randn(&mut rng, &[3, 2]);
    let b = randn(&mut rng, &[3, 4]);
    let g = |t: &mut Tape, v: &[Var]| {
        let c = t.concat(&[v[0], v[1]])?;
        let s = t.slice_cols(c, 1, 5)?;
        let y = t.tanh(s);
        weighted_sum(t, y, 8)
    };
    check("concat/slice_cols", &g, &[a, b]);
}

#[test]
fn detached_input_gets_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    // d(x * stop(x))/dx = stop(x)
    assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn reused_node_accumulates_gradient() {
    let mut rng = seeded(18);
    let a = randn(&mut rng, &[2, 3]);
    let g = |t: &mut Tape, v: &[Var]| {
        let y = t.mul(v[0], v[0])?;
        let z = t.add(y, v[0])?;
        weighted_sum(t, z, 9)
    };
    check("fan-out", &g, &[a]);
}

/// Four SiLU layers with biases, squared-error head.
fn mlp(t: &mut Tape, v: &[Var]) -> Result<Var> {
    let (x, target) = (v[0], v[1]);
    let mut h = x;
    for layer in 0..4 {
        let w = v[2 + 2 * layer];
        let b = v[3 + 2 * layer];
        let z = t.matmul(h, w)?;
        let z = t.add_bias(z, b)?;
        h = if layer < 3 { t.silu(z) } else { z };
    }
    let r = t.sub(h, target)?;
    let sq = t.square(r);
    Ok(t.mean(sq))
}

#[test]
fn random_four_layer_mlp_matches_fd() {
    let mut rng = seeded(19);
    let dims = [3, 8, 8, 8, 2];
    let mut inputs = vec![randn(&mut rng, &[5, 3]), randn(&mut rng, &[5, 2])];
    for l in 0..4 {
        let scale = 1.0 / (dims[l] as f64).sqrt();
        inputs.push(randn(&mut rng, &[dims[l], dims[l + 1]]).scale(scale));
        inputs.push(randn(&mut rng, &[1, dims[l + 1]]).scale(0.1));
    }
    let started = std::time::Instant::now();
    check("mlp", &mlp, &inputs);
    assert!(started.elapsed().as_secs_f64() < 10.0);
}
