//! Central finite-difference gradient checking.

use super::{Graph, ParamStore, Tensor, Var};

pub const ZERO_GRAD_NORM: f64 = 1e-8;

/// Worst relative error over all inputs between the tape gradient and central differences.
///
/// `build` must map the input leaves to a scalar loss. Relative error per input is
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)`.
pub fn max_relative_error<F>(inputs: &[Tensor], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g
            .backward(loss)
            .expect("backward failed during gradient check");
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect::<Vec<_>>()
    };
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff2 += (a.data()[j] - numeric).powi(2);
            num2 += numeric * numeric;
        }
        let denom = a.sq_norm().sqrt().max(num2.sqrt()).max(1e-12);
        worst = worst.max(diff2.sqrt() / denom);
    }
    worst
}

/// Like [`max_relative_error`], but also checks every parameter of `store`.
///
/// Returns the worst relative error over inputs and parameter tensors. A tensor whose
/// analytic and numeric gradients both have norm below `ZERO_GRAD_NORM` counts as
/// exact: some parameters (key biases under softmax) have an identically zero gradient,
/// where the ratio would only measure finite-difference noise.
pub fn max_relative_error_with_params<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    h: f64,
    build: F,
) -> f64
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
{
    let (analytic_inputs, analytic_params) = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, store, &vars);
        let grads = g
            .backward(loss)
            .expect("backward failed during gradient check");
        let gi: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        (gi, grads.for_store(store))
    };
    let eval = |s: &ParamStore, ins: &[Tensor]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, s, &vars);
        g.value(loss).item()
    };
    let rel = |a: &Tensor, numeric: &[f64]| {
        let diff: f64 = a
            .data()
            .iter()
            .zip(numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        if a.sq_norm().sqrt().max(nn) < ZERO_GRAD_NORM {
            return 0.0;
        }
        diff / a.sq_norm().sqrt().max(nn).max(1e-12)
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, a) in analytic_inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(store, &work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(store, &work);
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel(a, &numeric));
    }
    let mut ps = store.clone();
    for (p, a) in analytic_params.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let orig = ps.entries()[p].value.data()[j];
            ps.entries_mut()[p].value.data_mut()[j] = orig + h;
            let up = eval(&ps, inputs);
            ps.entries_mut()[p].value.data_mut()[j] = orig - h;
            let down = eval(&ps, inputs);
            ps.entries_mut()[p].value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel(a, &numeric));
    }
    worst
}
