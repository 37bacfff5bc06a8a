//! Central finite-difference checks of every differentiable operation, the
//! two fusion blocks and the full network, in f64.

use std::sync::Arc;

use super::{fd_error, leaf_eval, noise, store_eval, store_tensors, Eval};
use glfcr::attention::AttentionGate;
use glfcr::blocks::{sgci_forward, slfc_forward, BlockShape, SgciLayout, SgciParams, SlfcParams, WindowPlan};
use glfcr::training::l1_loss;
use glfcr::{GlfcrModel, Graph, ModelConfig, ParamStore, Tensor};

const TOL: f64 = 1e-4;

fn check(name: &str, eval: &Eval<'_>, tensors: &[Tensor<f64>], cap: usize) {
    let (err, which) = fd_error(eval, tensors, cap);
    assert!(err < TOL, "{name}: relative error {err:.3e} in tensor {which}");
}

fn ops(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&Graph<f64>, &[glfcr::Var]) -> glfcr::Var) {
    check(name, &leaf_eval(f), inputs, usize::MAX);
}

pub fn elementwise_ops() {
    let a = noise(vec![2, 3, 4], 1);
    let b = noise(vec![2, 3, 4], 2);
    let row = noise(vec![4], 3);
    ops("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    ops("add broadcast", &[a.clone(), row.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    ops("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    ops("sub broadcast", &[row.clone(), a.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    ops("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    ops("mul broadcast", &[a.clone(), noise(vec![2, 1, 4], 4)], |g, v| {
        g.mul(v[0], v[1]).unwrap()
    });
    ops("affine", std::slice::from_ref(&a), |g, v| g.affine(v[0], -1.5, 0.25));
    ops("scale", std::slice::from_ref(&a), |g, v| g.scale(v[0], 0.7));
    ops("relu", std::slice::from_ref(&a), |g, v| g.relu(v[0]));
    ops("gelu", &[a.map(|x| 3.0 * x)], |g, v| g.gelu(v[0]));
    ops("abs", std::slice::from_ref(&a), |g, v| g.abs(v[0]));
    ops("sum", std::slice::from_ref(&a), |g, v| g.sum(v[0]));
    ops("mean", std::slice::from_ref(&a), |g, v| g.mean(v[0]));
    ops("l1_loss", &[a, b], |g, v| l1_loss(g, v[0], v[1]).unwrap());
}

pub fn matrix_ops() {
    ops("matmul batched", &[noise(vec![2, 3, 4], 1), noise(vec![2, 4, 5], 2)], |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
    ops("matmul shared", &[noise(vec![2, 3, 4], 3), noise(vec![4, 5], 4)], |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
    ops("matmul_nt", &[noise(vec![2, 3, 4], 5), noise(vec![2, 5, 4], 6)], |g, v| {
        g.matmul_nt(v[0], v[1]).unwrap()
    });
}

pub fn layout_ops() {
    let x = noise(vec![2, 3, 4], 1);
    let index: Arc<Vec<usize>> = Arc::new((0..30).map(|i| (i * 7) % 24).collect());
    ops("gather with repeats", std::slice::from_ref(&x), move |g, v| {
        g.gather(v[0], index.clone(), vec![5, 6]).unwrap()
    });
    ops("reshape", std::slice::from_ref(&x), |g, v| g.reshape(v[0], vec![4, 6]).unwrap());
    ops("permute", std::slice::from_ref(&x), |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    ops("narrow", std::slice::from_ref(&x), |g, v| g.narrow(v[0], 2, 1, 2).unwrap());
    ops("concat", &[x.clone(), noise(vec![2, 2, 4], 2)], |g, v| {
        g.concat(&[v[0], v[1]], 1).unwrap()
    });
    ops("softmax last", &[x.map(|v| 3.0 * v)], |g, v| g.softmax(v[0], 2).unwrap());
    ops("softmax inner", &[x.map(|v| 3.0 * v)], |g, v| g.softmax(v[0], 1).unwrap());
    ops("layer_norm", &[x, noise(vec![4], 3), noise(vec![4], 4)], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
}

pub fn convolution_ops() {
    let x = noise(vec![2, 3, 5, 6], 1);
    for (k, pad) in [(3, 1), (3, 0), (1, 0), (5, 2)] {
        let w = noise(vec![4, 3, k, k], 2);
        let b = noise(vec![4], 3);
        ops(&format!("conv2d k{k} pad{pad}"), &[x.clone(), w, b], move |g, v| {
            g.conv2d(v[0], v[1], v[2], pad).unwrap()
        });
    }
    for k in [1, 3, 5] {
        let f = noise(vec![2, 5, 6, 3, k, k], 4);
        ops(&format!("dynamic_filter k{k}"), &[x.clone(), f], |g, v| {
            g.dynamic_filter(v[0], v[1]).unwrap()
        });
    }
}

fn attention_inputs(seed: u64) -> Vec<Tensor<f64>> {
    // [windows, heads, tokens, d]; the bias is scaled up so the softmax is peaked.
    vec![
        noise(vec![4, 2, 9, 3], seed),
        noise(vec![4, 2, 9, 3], seed + 1),
        noise(vec![4, 2, 9, 3], seed + 2),
        noise(vec![2, 9, 9], seed + 3).map(|v| 2.0 * v),
    ]
}

fn mask() -> Tensor<f64> {
    Tensor::from_fn(vec![2, 9, 9], |i| if (i / 9 + i % 9) % 4 == 1 { -1.0e4 } else { 0.0 })
}

pub fn attention_ops() {
    for masked in [false, true] {
        let m = masked.then(mask);
        ops(&format!("attention masked={masked}"), &attention_inputs(1), move |g, v| {
            g.attention(v[0], v[1], v[2], v[3], m.as_ref()).unwrap()
        });
        let mut inputs = attention_inputs(10);
        inputs.extend(attention_inputs(20));
        inputs.push(noise(vec![2, 2, 1, 1], 30).map(|v| 2.0 * v));
        inputs.push(noise(vec![2], 31));
        let m = masked.then(mask);
        ops(&format!("guided attention masked={masked}"), &inputs, move |g, v| {
            g.guided_attention([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]], [v[8], v[9]], m.as_ref())
                .unwrap()
        });
    }
}

/// Replace zero-initialized biases and unit gains with noise so every
/// parameter has a generic value.
fn perturb(store: &mut ParamStore<f64>, seed: u64) {
    let names: Vec<(String, Vec<usize>)> = store.iter().map(|(n, p)| (n.to_string(), p.value.dims().to_vec())).collect();
    for (i, (n, dims)) in names.into_iter().enumerate() {
        let base = store.by_name(&n).unwrap().value.clone();
        let jitter = noise(dims, seed + i as u64);
        let v = base.zip_map(&jitter, |a, b| a + 0.1 * b).unwrap();
        store.set(&n, v).unwrap();
    }
}

pub fn sgci_block() {
    let shape = BlockShape {
        channels: 2,
        dense: 2,
        window: 4,
        heads: 2,
        mlp_ratio: 2,
        filter: 3,
    };
    let layout = SgciLayout {
        two_stream: true,
        attention: true,
        guided: true,
    };
    let mut store = ParamStore::<f64>::new(3);
    let params = SgciParams::new(&mut store, "b", shape, layout).unwrap();
    perturb(&mut store, 100);
    let plan = WindowPlan::new(8, 8, 4, true).unwrap();
    let inputs = [noise(vec![1, 2, 8, 8], 1), noise(vec![1, 2, 8, 8], 2)];
    let eval = store_eval(&store, |g, p, v| {
        let (o, s) = sgci_forward(g, p, &params, &plan, v[0], Some(v[1])).unwrap();
        g.concat(&[o, s.unwrap()], 1).unwrap()
    });
    check("sgci", &eval, &store_tensors(&store, &inputs), usize::MAX);
}

pub fn stl_pair_layer() {
    let mut store = ParamStore::<f64>::new(7);
    let opt = glfcr::attention::StlParams::new(&mut store, "o", 4, 2, 4, 2).unwrap();
    let sar = glfcr::attention::StlParams::new(&mut store, "s", 4, 2, 4, 2).unwrap();
    let gate = AttentionGate::new(&mut store, "g", 2).unwrap();
    perturb(&mut store, 500);
    let grid = glfcr::attention::WindowGrid::new(8, 8, 4, 2).unwrap();
    let inputs = [noise(vec![1, 4, 8, 8], 9), noise(vec![1, 4, 8, 8], 10)];
    let eval = store_eval(&store, |g, p, v| {
        let (a, b) = glfcr::attention::stl_pair_forward(g, p, &opt, &sar, Some(&gate), &grid, v[0], v[1]).unwrap();
        g.concat(&[a, b], 1).unwrap()
    });
    check("stl pair", &eval, &store_tensors(&store, &inputs), usize::MAX);
}

pub fn slfc_block() {
    let mut store = ParamStore::<f64>::new(4);
    let params = SlfcParams::new(&mut store, "f", 2, 3, true, false).unwrap();
    perturb(&mut store, 200);
    let inputs = [noise(vec![1, 2, 8, 8], 3), noise(vec![1, 2, 8, 8], 4)];
    let eval = store_eval(&store, |g, p, v| {
        let out = slfc_forward(g, p, &params, v[0], v[1]).unwrap();
        g.concat(&[out.opt, out.sar], 1).unwrap()
    });
    check("slfc", &eval, &store_tensors(&store, &inputs), usize::MAX);
}

pub fn attention_gate() {
    let mut store = ParamStore::<f64>::new(5);
    let gate = AttentionGate::new(&mut store, "g", 3).unwrap();
    perturb(&mut store, 300);
    let inputs = [noise(vec![2, 3, 4, 4], 5), noise(vec![2, 3, 4, 4], 6)];
    let eval = store_eval(&store, |g, p, v| {
        glfcr::attention::attention_refine(g, p, &gate, v[0], v[1]).unwrap()
    });
    check("attention_refine", &eval, &store_tensors(&store, &inputs), usize::MAX);
}

pub fn full_network() {
    let cfg = ModelConfig {
        channels: 4,
        heads: 2,
        blocks: 1,
        dense: 2,
        ..ModelConfig::desk()
    };
    let mut model = GlfcrModel::<f64>::new(cfg, 6).unwrap();
    perturb(&mut model.params, 400);
    let inputs = [
        noise(vec![1, 13, 8, 8], 7).map(|v| 0.5 + 0.5 * v),
        noise(vec![1, 2, 8, 8], 8).map(|v| 0.5 + 0.5 * v),
    ];
    let store = model.params.clone();
    let eval = store_eval(&store, |g, p, v| model.forward(g, p, v[0], Some(v[1])).unwrap());
    check("network", &eval, &store_tensors(&store, &inputs), usize::MAX);
}

/// Every check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("elementwise_ops", elementwise_ops),
    ("matrix_ops", matrix_ops),
    ("layout_ops", layout_ops),
    ("convolution_ops", convolution_ops),
    ("attention_ops", attention_ops),
    ("sgci_block", sgci_block),
    ("stl_pair_layer", stl_pair_layer),
    ("slfc_block", slfc_block),
    ("attention_gate", attention_gate),
    ("full_network", full_network),
];
