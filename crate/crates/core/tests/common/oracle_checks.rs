//! Kernels against nested-loop oracles, exact structural identities, and
//! the fused f32 network against an unfused f64 composition.

use super::{max_abs, noise};
use glfcr::attention::{
    self, attention_refine, stl_pair_forward_composed, window_attention, window_merge, window_partition, AttentionGate, RelPosBias,
    StlParams, WindowGrid,
};
use glfcr::blocks::{dynamic_filter_apply, sgci_forward, slfc_forward, BlockShape, SgciLayout, SgciParams, SlfcParams, WindowPlan};
use glfcr::params::Bound;
use glfcr::{GlfcrModel, Graph, ModelConfig, ParamStore, Tensor, Var, Variant};

const ORACLE_TOL: f64 = 1e-10;

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (nb, ci, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (co, k) = (w.dims()[0], w.dims()[2]);
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut out = Tensor::zeros(vec![nb, co, oh, ow]);
    for n in 0..nb {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.at(&[o]);
                    for c in 0..ci {
                        for i in 0..k {
                            for j in 0..k {
                                let (sy, sx) = (y + i, xx + j);
                                if sy < pad || sx < pad || sy - pad >= h || sx - pad >= wd {
                                    continue;
                                }
                                acc += w.at(&[o, c, i, j]) * x.at(&[n, c, sy - pad, sx - pad]);
                            }
                        }
                    }
                    out.data_mut()[((n * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn conv2d_matches_loop_oracle() {
    let x = noise(vec![2, 3, 7, 6], 1);
    for (k, pad) in [(3, 1), (3, 0), (1, 0), (5, 2), (5, 1)] {
        let w = noise(vec![4, 3, k, k], 2);
        let b = noise(vec![4], 3);
        let g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, pad).unwrap();
        let oracle = conv_oracle(&x, &w, &b, pad);
        assert_eq!(g.dims(y), oracle.dims());
        assert!(g.tensor(y).max_abs_diff(&oracle) <= ORACLE_TOL, "k {k} pad {pad}");
    }
}

pub fn dynamic_filter_matches_loop_oracle() {
    for k in [1, 3, 5] {
        let (nb, c, h, w) = (2, 3, 6, 5);
        let x = noise(vec![nb, c, h, w], 4);
        let f = noise(vec![nb, h, w, c, k, k], 5);
        let r = k as isize / 2;
        let mut oracle = Tensor::zeros(vec![nb, c, h, w]);
        for b in 0..nb {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                let sy = y as isize + i as isize - r;
                                let sx = xx as isize + j as isize - r;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += f.at(&[b, y, xx, ch, i, j]) * x.at(&[b, ch, sy as usize, sx as usize]);
                            }
                        }
                        oracle.data_mut()[((b * c + ch) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        let g = Graph::new();
        let y = dynamic_filter_apply(&g, g.constant(x), g.constant(f)).unwrap();
        assert!(g.tensor(y).max_abs_diff(&oracle) <= ORACLE_TOL, "k {k}");
    }
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let names: Vec<(String, Vec<usize>)> = store.iter().map(|(n, p)| (n.to_string(), p.value.dims().to_vec())).collect();
    for (i, (n, dims)) in names.into_iter().enumerate() {
        store.set(&n, noise(dims, seed + i as u64).map(|v| scale * v)).unwrap();
    }
}

fn softmax(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row.iter_mut().for_each(|v| *v = (*v - m).exp() / s);
}

/// Per-window scores `Q K^T / sqrt(d) + B` from first principles:
/// `[windows][heads][N*N]`, plus values `[windows][heads][N][d]`.
#[allow(clippy::type_complexity)]
fn scores_oracle(
    store: &ParamStore<f64>,
    prefix: &str,
    tokens: &Tensor<f64>,
    heads: usize,
    m: usize,
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<Vec<f64>>>>) {
    let (nw, n, c) = (tokens.dims()[0], tokens.dims()[1], tokens.dims()[2]);
    let d = c / heads;
    let wq = &store.by_name(&format!("{prefix}.qkv.weight")).unwrap().value;
    let bq = &store.by_name(&format!("{prefix}.qkv.bias")).unwrap().value;
    let table = &store.by_name(&format!("{prefix}.attn.rel_bias")).unwrap().value;
    let proj = |w: usize, t: usize, part: usize, h: usize, e: usize| -> f64 {
        let col = part * c + h * d + e;
        bq.at(&[col]) + (0..c).map(|ch| tokens.at(&[w, t, ch]) * wq.at(&[ch, col])).sum::<f64>()
    };
    let side = 2 * m - 1;
    let mut scores = vec![vec![vec![0.0; n * n]; heads]; nw];
    let mut values = vec![vec![vec![vec![0.0; d]; n]; heads]; nw];
    for w in 0..nw {
        for h in 0..heads {
            for i in 0..n {
                for e in 0..d {
                    values[w][h][i][e] = proj(w, i, 2, h, e);
                }
                for j in 0..n {
                    let dot: f64 = (0..d).map(|e| proj(w, i, 0, h, e) * proj(w, j, 1, h, e)).sum();
                    let (yi, xi, yj, xj) = (i / m, i % m, j / m, j % m);
                    let row = (yi + m - 1 - yj) * side + (xi + m - 1 - xj);
                    scores[w][h][i * n + j] = dot / (d as f64).sqrt() + table.at(&[row, h]);
                }
            }
        }
    }
    (scores, values)
}

/// `proj(concat_h softmax(M + mask) V)` in token layout.
fn attend_oracle(
    store: &ParamStore<f64>,
    prefix: &str,
    scores: &[Vec<Vec<f64>>],
    values: &[Vec<Vec<Vec<f64>>>],
    mask: Option<&Tensor<f64>>,
) -> Vec<f64> {
    let (nw, heads, n, d) = (values.len(), values[0].len(), values[0][0].len(), values[0][0][0].len());
    let c = heads * d;
    let wp = &store.by_name(&format!("{prefix}.proj.weight")).unwrap().value;
    let bp = &store.by_name(&format!("{prefix}.proj.bias")).unwrap().value;
    let mut out = Vec::with_capacity(nw * n * c);
    for w in 0..nw {
        let mut heads_out = vec![vec![0.0; c]; n];
        for h in 0..heads {
            for i in 0..n {
                let mut row: Vec<f64> = (0..n)
                    .map(|j| scores[w][h][i * n + j] + mask.map_or(0.0, |mk| mk.data()[((w % mk.dims()[1]) * n + i) * n + j]))
                    .collect();
                softmax(&mut row);
                for e in 0..d {
                    heads_out[i][h * d + e] = (0..n).map(|j| row[j] * values[w][h][j][e]).sum();
                }
            }
        }
        for tok in heads_out {
            for o in 0..c {
                out.push(bp.at(&[o]) + (0..c).map(|k| tok[k] * wp.at(&[k, o])).sum::<f64>());
            }
        }
    }
    out
}

pub fn window_attention_matches_direct_evaluation() {
    let (c, heads, m) = (8, 2, 4);
    let mut store = ParamStore::<f64>::new(7);
    let stl = StlParams::new(&mut store, "s", c, heads, m, 2).unwrap();
    randomize(&mut store, 50, 0.6);
    for shift in [0, 2] {
        let grid = WindowGrid::new(8, 8, m, shift).unwrap();
        let tokens = noise(vec![2 * grid.num_windows(), m * m, c], 9);
        let mask = grid.mask_tensor::<f64>();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let mv = mask.clone().map(|t| g.constant(t));
        let (y, s) = window_attention(&g, &p, &stl, g.constant(tokens.clone()), mv).unwrap();
        let (scores, values) = scores_oracle(&store, "s", &tokens, heads, m);
        let flat: Vec<f64> = scores.iter().flatten().flatten().copied().collect();
        assert!(max_abs(g.value(s).data(), &flat) <= ORACLE_TOL, "scores, shift {shift}");
        let oracle = attend_oracle(&store, "s", &scores, &values, mask.as_ref());
        assert!(max_abs(g.value(y).data(), &oracle) <= ORACLE_TOL, "output, shift {shift}");
    }
}

pub fn guided_attention_matches_direct_evaluation() {
    // Refined optical scores: M_opt + (M_sar - M_opt) * softmax_heads(W (M_sar - M_opt) + b).
    let (c, heads, m) = (8, 4, 4);
    let mut store = ParamStore::<f64>::new(8);
    let opt = StlParams::new(&mut store, "o", c, heads, m, 2).unwrap();
    let sar = StlParams::new(&mut store, "s", c, heads, m, 2).unwrap();
    let gate = AttentionGate::new(&mut store, "g", heads).unwrap();
    randomize(&mut store, 80, 0.6);
    let grid = WindowGrid::new(8, 8, m, 2).unwrap();
    let x_opt = noise(vec![1, c, 8, 8], 11);
    let x_sar = noise(vec![1, c, 8, 8], 12);

    // Tokens after the first norm, taken from the library's own partition
    // and layer norm (both checked independently elsewhere).
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let norm = |stl: &StlParams, x: &Tensor<f64>| {
        let t = window_partition(&g, g.constant(x.clone()), &grid).unwrap();
        g.tensor(stl.norm1.forward(&g, &p, t).unwrap())
    };
    let (n_opt, n_sar) = (norm(&opt, &x_opt), norm(&sar, &x_sar));
    let (m_opt, v_opt) = scores_oracle(&store, "o", &n_opt, heads, m);
    let (m_sar, v_sar) = scores_oracle(&store, "s", &n_sar, heads, m);
    let gw = &store.by_name("g.weight").unwrap().value;
    let gb = &store.by_name("g.bias").unwrap().value;
    let n2 = (m * m) * (m * m);
    let mut refined = m_opt.clone();
    for w in 0..m_opt.len() {
        for pos in 0..n2 {
            let r: Vec<f64> = (0..heads).map(|h| m_sar[w][h][pos] - m_opt[w][h][pos]).collect();
            let mut gate_row: Vec<f64> = (0..heads)
                .map(|h| gb.at(&[h]) + (0..heads).map(|k| gw.at(&[h, k, 0, 0]) * r[k]).sum::<f64>())
                .collect();
            softmax(&mut gate_row);
            for h in 0..heads {
                refined[w][h][pos] = m_opt[w][h][pos] + r[h] * gate_row[h];
            }
        }
    }
    let mask = grid.mask_tensor::<f64>();
    let y_opt = attend_oracle(&store, "o", &refined, &v_opt, mask.as_ref());
    let y_sar = attend_oracle(&store, "s", &m_sar, &v_sar, mask.as_ref());

    // Library: fused guided attention, reduced to the attended tokens.
    let mv = mask.map(|t| g.constant(t));
    let (so, vo) = attention::attention_scores(&g, &p, &opt, g.constant(n_opt)).unwrap();
    let (ss, vs) = attention::attention_scores(&g, &p, &sar, g.constant(n_sar)).unwrap();
    let hat = attention_refine(&g, &p, &gate, so, ss).unwrap();
    let yo = attention::attend(&g, &p, &opt, hat, vo, mv).unwrap();
    let ys = attention::attend(&g, &p, &sar, ss, vs, mv).unwrap();
    assert!(max_abs(g.value(yo).data(), &y_opt) <= ORACLE_TOL);
    assert!(max_abs(g.value(ys).data(), &y_sar) <= ORACLE_TOL);

    // And the fused pair layer agrees with the composed one.
    let g2 = Graph::new();
    let p2 = store.bind_frozen(&g2);
    let (xo, xs) = (g2.constant(x_opt), g2.constant(x_sar));
    let (fa, fb) = attention::stl_pair_forward(&g2, &p2, &opt, &sar, Some(&gate), &grid, xo, xs).unwrap();
    let (ca, cb) = stl_pair_forward_composed(&g2, &p2, &opt, &sar, Some(&gate), &grid, xo, xs).unwrap();
    assert!(g2.tensor(fa).max_abs_diff(&g2.tensor(ca)) <= ORACLE_TOL);
    assert!(g2.tensor(fb).max_abs_diff(&g2.tensor(cb)) <= ORACLE_TOL);
}

pub fn relative_bias_lookup_matches_offsets() {
    let mut store = ParamStore::<f64>::new(1);
    let rpb = RelPosBias::new(&mut store, "r", 3, 2).unwrap();
    randomize(&mut store, 5, 1.0);
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let b = g.tensor(rpb.forward(&g, &p).unwrap());
    let table = &store.by_name("r.rel_bias").unwrap().value;
    for h in 0..2 {
        for i in 0..9 {
            for j in 0..9 {
                let dy = (i / 3) as isize - (j / 3) as isize + 2;
                let dx = (i % 3) as isize - (j % 3) as isize + 2;
                assert_eq!(b.at(&[h, i, j]), table.at(&[(dy * 5 + dx) as usize, h]));
            }
        }
    }
}

pub fn partition_merge_roundtrip_is_bitwise() {
    for shift in [0, 4] {
        let grid = WindowGrid::new(16, 24, 8, shift).unwrap();
        let x = noise(vec![2, 3, 16, 24], 3);
        let g = Graph::new();
        let t = window_partition(&g, g.constant(x.clone()), &grid).unwrap();
        assert_eq!(g.dims(t), vec![2 * 6, 64, 3]);
        let back = window_merge(&g, t, &grid).unwrap();
        assert_eq!(g.tensor(back), x, "shift {shift}");
    }
}

pub fn zero_head_returns_the_input_bitwise() {
    for v in Variant::ALL {
        let mut model = GlfcrModel::<f64>::new(
            ModelConfig {
                variant: v,
                ..ModelConfig::desk()
            },
            3,
        )
        .unwrap();
        model.zero_head();
        let cloudy = noise(vec![1, 13, 16, 16], 1).map(|x| 0.5 + 0.5 * x);
        let sar = noise(vec![1, 2, 16, 16], 2).map(|x| 0.5 + 0.5 * x);
        let g = Graph::new();
        let p = model.params.bind(&g);
        let s = v.uses_sar().then(|| g.constant(sar));
        let y = model.forward(&g, &p, g.constant(cloudy.clone()), s).unwrap();
        assert_eq!(g.tensor(y), cloudy, "{v}");
    }
}

pub fn refinement_identities_are_exact() {
    for heads in [1, 3] {
        let mut store = ParamStore::<f64>::new(2);
        let gate = AttentionGate::new(&mut store, "g", heads).unwrap();
        randomize(&mut store, 9, 1.0);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let m_opt = noise(vec![4, heads, 9, 9], 3);
        let m_sar = noise(vec![4, heads, 9, 9], 4);
        // equal scores: nothing to refine
        let same = attention_refine(&g, &p, &gate, g.constant(m_opt.clone()), g.constant(m_opt.clone())).unwrap();
        assert_eq!(g.tensor(same), m_opt);
        // a single head gets gate 1 and takes the SAR scores
        let hat = attention_refine(&g, &p, &gate, g.constant(m_opt), g.constant(m_sar.clone())).unwrap();
        if heads == 1 {
            assert_eq!(g.tensor(hat), m_sar);
        } else {
            assert_ne!(g.tensor(hat), m_sar);
        }
    }
}

pub fn single_channel_slfc_takes_the_filtered_sar_feature() {
    for c in [1, 3] {
        let mut store = ParamStore::<f64>::new(4);
        let params = SlfcParams::new(&mut store, "f", c, 3, true, false).unwrap();
        randomize(&mut store, 20, 0.5);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let fo = g.constant(noise(vec![1, c, 8, 8], 1));
        let fs = g.constant(noise(vec![1, c, 8, 8], 2));
        let out = slfc_forward(&g, &p, &params, fo, fs).unwrap();
        let (opt, filtered) = (g.tensor(out.opt), g.tensor(out.filtered_sar));
        if c == 1 {
            assert_eq!(opt, filtered);
        } else {
            assert_ne!(opt, filtered);
        }
    }
}

pub fn guidance_is_inert_when_both_streams_coincide() {
    let shape = BlockShape {
        channels: 8,
        dense: 2,
        window: 4,
        heads: 2,
        mlp_ratio: 2,
        filter: 3,
    };
    let layout = |guided| SgciLayout {
        two_stream: true,
        attention: true,
        guided,
    };
    let mut full = ParamStore::<f64>::new(5);
    let full_params = SgciParams::new(&mut full, "b", shape, layout(true)).unwrap();
    randomize(&mut full, 60, 0.4);
    // mirror every optical parameter into the SAR stream
    let names: Vec<String> = full.iter().map(|(n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.contains(".sar.")) {
        let src = full.by_name(&n.replace(".sar.", ".opt.")).unwrap().value.clone();
        full.set(n, src).unwrap();
    }
    let mut plain = ParamStore::<f64>::new(5);
    let plain_params = SgciParams::new(&mut plain, "b", shape, layout(false)).unwrap();
    let plain_names: Vec<String> = plain.iter().map(|(n, _)| n.to_string()).collect();
    for n in &plain_names {
        plain.set(n, full.by_name(n).unwrap().value.clone()).unwrap();
    }

    let plan = WindowPlan::new(8, 8, 4, true).unwrap();
    let x = noise(vec![1, 8, 8, 8], 7);
    let run = |store: &ParamStore<f64>, params: &SgciParams| {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let xv = g.constant(x.clone());
        let (o, s) = sgci_forward(&g, &p, params, &plan, xv, Some(xv)).unwrap();
        (g.tensor(o), g.tensor(s.unwrap()))
    };
    let (fo, fs) = run(&full, &full_params);
    let (po, ps) = run(&plain, &plain_params);
    assert!(fo.max_abs_diff(&po) <= 1e-12);
    assert!(fs.max_abs_diff(&ps) <= 1e-12);
    assert!(fo.max_abs_diff(&fs) <= 1e-12);
}

/// Network forward rebuilt from unfused pieces: composed attention, the
/// refinement spelled out, dense stages and fusion written out here.
fn composed_forward(model: &GlfcrModel<f64>, g: &Graph<f64>, p: &Bound, cloudy: Var, sar: Var) -> Var {
    let cfg = &model.config;
    let plan = WindowPlan::new(g.dims(cloudy)[2], g.dims(cloudy)[3], cfg.window, cfg.shift).unwrap();
    let mut f_opt = model.sfe_opt.forward(g, p, cloudy).unwrap();
    let mut f_sar = model.sfe_sar.as_ref().unwrap().forward(g, p, sar).unwrap();
    let mut outs = Vec::new();
    for block in &model.blocks {
        let sg = &block.sgci;
        let sar_stream = sg.sar.as_ref().unwrap();
        let (mut ho, mut hs) = (vec![f_opt], vec![f_sar]);
        for j in 0..cfg.dense {
            let o = g.relu(sg.opt.convs[j].forward(g, p, g.concat(&ho, 1).unwrap()).unwrap());
            let s = g.relu(sar_stream.convs[j].forward(g, p, g.concat(&hs, 1).unwrap()).unwrap());
            let (o, s) = stl_pair_forward_composed(g, p, &sg.opt_stl[j], &sg.sar_stl[j], Some(&sg.gates[j]), plan.stage(j), o, s).unwrap();
            ho.push(o);
            hs.push(s);
        }
        let o = g
            .add(sg.opt.fuse.forward(g, p, g.concat(&ho[1..], 1).unwrap()).unwrap(), ho[0])
            .unwrap();
        let s = g
            .add(sar_stream.fuse.forward(g, p, g.concat(&hs[1..], 1).unwrap()).unwrap(), hs[0])
            .unwrap();
        let out = slfc_forward(g, p, block.slfc.as_ref().unwrap(), o, s).unwrap();
        f_opt = out.opt;
        f_sar = out.sar;
        outs.push(f_opt);
    }
    let x = g.relu(model.head_fuse.forward(g, p, g.concat(&outs, 1).unwrap()).unwrap());
    let x = model.head_out.forward(g, p, x).unwrap();
    g.add(cloudy, x).unwrap()
}

pub fn fused_f32_network_matches_composed_f64_reference() {
    let cfg = ModelConfig {
        channels: 8,
        blocks: 2,
        ..ModelConfig::desk()
    };
    let model32 = GlfcrModel::<f32>::new(cfg.clone(), 12).unwrap();
    let mut model64 = GlfcrModel::<f64>::new(cfg, 12).unwrap();
    for (n, p) in model32.params.iter() {
        model64.params.set(n, p.value.cast()).unwrap();
    }
    let cloudy = noise(vec![1, 13, 16, 16], 1).map(|x| 0.5 + 0.4 * x).cast::<f32>();
    let sar = noise(vec![1, 2, 16, 16], 2).map(|x| 0.5 + 0.4 * x).cast::<f32>();

    let g = Graph::<f32>::new();
    let p = model32.params.bind_frozen(&g);
    let fast = model32
        .forward(&g, &p, g.constant(cloudy.clone()), Some(g.constant(sar.clone())))
        .unwrap();
    let fast: Tensor<f64> = g.tensor(fast).cast();

    let g = Graph::<f64>::new();
    let p = model64.params.bind_frozen(&g);
    let reference = composed_forward(&model64, &g, &p, g.constant(cloudy.cast()), g.constant(sar.cast()));
    let reference = g.tensor(reference);
    let d = fast.max_abs_diff(&reference);
    assert!(d <= 1e-4, "max deviation {d:.3e}");
}

/// Every check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("conv2d_matches_loop_oracle", conv2d_matches_loop_oracle),
    ("dynamic_filter_matches_loop_oracle", dynamic_filter_matches_loop_oracle),
    (
        "window_attention_matches_direct_evaluation",
        window_attention_matches_direct_evaluation,
    ),
    (
        "guided_attention_matches_direct_evaluation",
        guided_attention_matches_direct_evaluation,
    ),
    ("relative_bias_lookup_matches_offsets", relative_bias_lookup_matches_offsets),
    ("partition_merge_roundtrip_is_bitwise", partition_merge_roundtrip_is_bitwise),
    ("zero_head_returns_the_input_bitwise", zero_head_returns_the_input_bitwise),
    ("refinement_identities_are_exact", refinement_identities_are_exact),
    (
        "single_channel_slfc_takes_the_filtered_sar_feature",
        single_channel_slfc_takes_the_filtered_sar_feature,
    ),
    (
        "guidance_is_inert_when_both_streams_coincide",
        guidance_is_inert_when_both_streams_coincide,
    ),
    (
        "fused_f32_network_matches_composed_f64_reference",
        fused_f32_network_matches_composed_f64_reference,
    ),
];
