#![allow(dead_code)]

pub mod gradient_checks;
pub mod oracle_checks;

use glfcr::{Graph, ParamStore, Tensor, Var};

/// Deterministic values in (-1, 1), never exactly zero, from a xorshift stream.
pub fn noise(dims: impl Into<Vec<usize>>, seed: u64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(dims, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % 1_000_003) as f64 / 500_001.5 - 1.0
    })
}

/// Scalar `sum(out * w)` with a fixed random `w`, so every output element
/// contributes with a distinct weight.
pub fn probe(g: &Graph<f64>, out: Var) -> Var {
    let w = g.constant(noise(g.dims(out), 0xF00D));
    g.sum(g.mul(out, w).unwrap())
}

/// Loss and, when asked, the gradient of every input tensor.
pub type Eval<'a> = dyn Fn(&[Tensor<f64>], bool) -> (f64, Vec<Tensor<f64>>) + 'a;

/// Build `eval` for a closure over leaf variables.
pub fn leaf_eval<'a>(f: impl Fn(&Graph<f64>, &[Var]) -> Var + 'a) -> Box<Eval<'a>> {
    Box::new(move |inputs, grad| {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let loss = probe(&g, out);
        let value = g.value(loss).item();
        if !grad {
            return (value, Vec::new());
        }
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.dims(v))))
            .collect();
        (value, gs)
    })
}

/// Parameters of `store` followed by `inputs`, for [`store_eval`].
pub fn store_tensors(store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, p)| p.value.clone()).chain(inputs.iter().cloned()).collect()
}

/// Build `eval` for a parameterized forward pass; the tensors are the
/// store's parameters in order followed by the inputs.
pub fn store_eval<'a>(store: &'a ParamStore<f64>, f: impl Fn(&Graph<f64>, &glfcr::params::Bound, &[Var]) -> Var + 'a) -> Box<Eval<'a>> {
    Box::new(move |tensors, grad| {
        let mut s = store.clone();
        let names: Vec<String> = s.iter().map(|(n, _)| n.to_string()).collect();
        for (n, t) in names.iter().zip(tensors) {
            s.set(n, t.clone()).unwrap();
        }
        let g = Graph::new();
        let p = s.bind(&g);
        let inputs: Vec<Var> = tensors[names.len()..].iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &p, &inputs);
        let loss = probe(&g, out);
        let value = g.value(loss).item();
        if !grad {
            return (value, Vec::new());
        }
        let grads = g.backward(loss).unwrap();
        let gs = p
            .vars()
            .iter()
            .chain(&inputs)
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.dims(v))))
            .collect();
        (value, gs)
    })
}

/// Small enough that a step rarely crosses a ReLU kink, large enough to
/// stay clear of f64 roundoff.
pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-8;

/// Largest element-wise relative error `|a - n| / max(|a|, |n|, 1e-8)`
/// between the analytic gradient and central differences, with the index
/// of the tensor where it occurs. At most `cap` evenly spaced coordinates
/// are checked per tensor.
pub fn fd_error(eval: &Eval<'_>, tensors: &[Tensor<f64>], cap: usize) -> (f64, usize) {
    let (_, analytic) = eval(tensors, true);
    let mut worst = 0.0f64;
    let mut worst_tensor = 0;
    for (ti, t) in tensors.iter().enumerate() {
        let n = t.numel();
        let stride = n.div_ceil(cap).max(1);
        for i in (0..n).step_by(stride) {
            let mut plus = tensors.to_vec();
            plus[ti].data_mut()[i] += FD_STEP;
            let mut minus = tensors.to_vec();
            minus[ti].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            let a = analytic[ti].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            if rel > worst {
                worst = rel;
                worst_tensor = ti;
            }
        }
    }
    (worst, worst_tensor)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
