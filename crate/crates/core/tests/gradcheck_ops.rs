//! Every tape operator against central finite differences (h = 1e-5, 64-bit).

use hrtf_latent::numerics::gradcheck::max_relative_error;
use hrtf_latent::numerics::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: usize = 100;

/// Contracts the output with fixed random weights so every element matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum(p)
}

fn check<F>(name: &str, make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let inputs = make_inputs(&mut rng);
        let err = max_relative_error(&inputs, H, |g, v| {
            let y = build(g, v);
            weighted_sum(g, y, trial as u64)
        });
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Standard normal values pushed away from zero (for kinks and poles).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = Tensor::randn(shape, rng);
    t.map(|v| {
        if v.abs() < 0.1 {
            v.signum() * 0.1 + v
        } else {
            v
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

#[test]
fn elementwise_binary_with_broadcasting() {
    check(
        "add",
        |r| vec![randn(r, &[3, 4]), randn(r, &[4])],
        |g, v| g.add(v[0], v[1]),
    );
    check(
        "sub",
        |r| vec![randn(r, &[3, 1]), randn(r, &[3, 4])],
        |g, v| g.sub(v[0], v[1]),
    );
    check(
        "mul",
        |r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 1, 4])],
        |g, v| g.mul(v[0], v[1]),
    );
    check(
        "div",
        |r| vec![randn(r, &[3, 4]), positive(r, &[3, 4])],
        |g, v| g.div(v[0], v[1]),
    );
    check(
        "div_scalar_rhs",
        |r| vec![randn(r, &[5]), positive(r, &[1])],
        |g, v| g.div(v[0], v[1]),
    );
}

#[test]
fn elementwise_unary() {
    let shape = [3, 5];
    check("exp", |r| vec![randn(r, &shape)], |g, v| g.exp(v[0]));
    check("log", |r| vec![positive(r, &shape)], |g, v| g.log(v[0]));
    check("sin", |r| vec![randn(r, &shape)], |g, v| g.sin(v[0]));
    check("cos", |r| vec![randn(r, &shape)], |g, v| g.cos(v[0]));
    check("tanh", |r| vec![randn(r, &shape)], |g, v| g.tanh(v[0]));
    check(
        "softplus",
        |r| vec![randn(r, &shape)],
        |g, v| g.softplus(v[0]),
    );
    check("mish", |r| vec![randn(r, &shape)], |g, v| g.mish(v[0]));
    check(
        "relu",
        |r| vec![away_from_zero(r, &shape)],
        |g, v| g.relu(v[0]),
    );
    check("silu", |r| vec![randn(r, &shape)], |g, v| g.silu(v[0]));
    check(
        "sigmoid",
        |r| vec![randn(r, &shape)],
        |g, v| g.sigmoid(v[0]),
    );
    check("sqrt", |r| vec![positive(r, &shape)], |g, v| g.sqrt(v[0]));
    check("square", |r| vec![randn(r, &shape)], |g, v| g.square(v[0]));
    check("neg", |r| vec![randn(r, &shape)], |g, v| g.neg(v[0]));
    check(
        "scale",
        |r| vec![randn(r, &shape)],
        |g, v| g.scale(v[0], -2.5),
    );
    check(
        "add_scalar",
        |r| vec![randn(r, &shape)],
        |g, v| g.add_scalar(v[0], 0.7),
    );
}

#[test]
fn linear_algebra() {
    check(
        "matmul",
        |r| vec![randn(r, &[2, 3, 4]), randn(r, &[4, 5])],
        |g, v| g.matmul(v[0], v[1]),
    );
    check(
        "bmm",
        |r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 5])],
        |g, v| g.bmm(v[0], v[1], false),
    );
    check(
        "bmm_trans_b",
        |r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 5, 4])],
        |g, v| g.bmm(v[0], v[1], true),
    );
}

#[test]
fn normalization_and_softmax() {
    check(
        "layer_norm",
        |r| vec![randn(r, &[4, 6])],
        |g, v| g.layer_norm(v[0]),
    );
    check(
        "group_norm",
        |r| vec![randn(r, &[2, 4, 3])],
        |g, v| g.group_norm(v[0], 2),
    );
    check(
        "softmax",
        |r| vec![randn(r, &[3, 5])],
        |g, v| g.softmax(v[0]),
    );
}

#[test]
fn convolution_and_resampling() {
    check(
        "conv1d_stride1",
        |r| vec![randn(r, &[2, 3, 8]), randn(r, &[4, 3, 3]), randn(r, &[4])],
        |g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 1),
    );
    check(
        "conv1d_stride2",
        |r| vec![randn(r, &[2, 3, 8]), randn(r, &[4, 3, 3])],
        |g, v| g.conv1d(v[0], v[1], None, 2, 1),
    );
    check(
        "upsample_linear2",
        |r| vec![randn(r, &[2, 3, 5])],
        |g, v| g.upsample_linear2(v[0]),
    );
}

#[test]
fn reductions_and_structure() {
    check(
        "sum",
        |r| vec![randn(r, &[3, 4])],
        |g, v| {
            let s = g.sum(v[0]);
            g.square(s)
        },
    );
    check(
        "mean",
        |r| vec![randn(r, &[3, 4])],
        |g, v| {
            let s = g.mean(v[0]);
            g.square(s)
        },
    );
    check(
        "sum_axis",
        |r| vec![randn(r, &[2, 3, 4])],
        |g, v| g.sum_axis(v[0], 1),
    );
    check(
        "mean_axis",
        |r| vec![randn(r, &[2, 3, 4])],
        |g, v| g.mean_axis(v[0], 0),
    );
    check(
        "concat",
        |r| vec![randn(r, &[2, 3]), randn(r, &[2, 2])],
        |g, v| g.concat(&[v[0], v[1]], 1),
    );
    check(
        "slice",
        |r| vec![randn(r, &[3, 6])],
        |g, v| g.slice(v[0], 1, 2, 5),
    );
    check(
        "index_select",
        |r| vec![randn(r, &[4, 3])],
        |g, v| g.index_select(v[0], 0, &[3, 0, 3, 1]),
    );
    check(
        "reshape",
        |r| vec![randn(r, &[2, 6])],
        |g, v| {
            let y = g.reshape(v[0], &[3, 4]);
            g.square(y)
        },
    );
    check(
        "permute",
        |r| vec![randn(r, &[2, 3, 4])],
        |g, v| g.permute(v[0], &[2, 0, 1]),
    );
    check(
        "broadcast_to",
        |r| vec![randn(r, &[3, 1])],
        |g, v| g.broadcast_to(v[0], &[2, 3, 4]),
    );
}

#[test]
fn composite_chains() {
    check(
        "mlp_chain",
        |r| vec![randn(r, &[4, 3]), randn(r, &[3, 5]), randn(r, &[5])],
        |g, v| {
            let h = g.matmul(v[0], v[1]);
            let h = g.add(h, v[2]);
            let h = g.layer_norm(h);
            g.mish(h)
        },
    );
}

#[test]
fn mish_slope_at_origin() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(0.0));
    let y = g.mish(x);
    let grads = g.backward(y).unwrap();
    let analytic = grads.wrt(x).unwrap().item();
    // tanh(ln 2) = 0.6
    assert!((analytic - 0.6).abs() < 1e-12);

    let h = 1e-6;
    let f = |v: f64| {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::scalar(v));
        let y = g.mish(x);
        g.value(y).item()
    };
    let fd = (f(h) - f(-h)) / (2.0 * h);
    assert!((fd - 0.6).abs() < 1e-9, "finite difference {fd}");
}

#[test]
fn loss_independent_of_param_yields_zeros() {
    let mut g = Graph::new();
    let p = g.input(Tensor::from_vec(vec![1.0, 2.0]));
    let q = g.input(Tensor::from_vec(vec![3.0]));
    let _unused = g.square(p);
    let loss = g.sum(q);
    let grads = g.backward(loss).unwrap();
    let gp = grads.wrt(p).cloned().unwrap_or_else(|| Tensor::zeros(&[2]));
    assert_eq!(gp.data(), &[0.0, 0.0]);
}

#[test]
fn forward_is_deterministic_given_seed() {
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[8, 8], &mut rng);
        let mut g = Graph::training(seed);
        let v = g.constant(x);
        let d = g.dropout(v, 0.3);
        let y = g.mish(d);
        g.value(y).clone()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}
