//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p glfcr --test acceptance -- 4 5`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{gradient_checks, oracle_checks};
use glfcr::checkpoint;
use glfcr::data::{self, SceneTriplet, SynthConfig};
use glfcr::metrics::{self, BIN_COUNT};
use glfcr::training::{fit, validation_l1, RunPaths, TrainConfig, Trainer};
use glfcr::{GlfcrModel, ModelConfig, Tensor, Variant};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_checks(checks: &[(&str, fn())], names: &[&str]) -> Outcome {
    let mut failed = Vec::new();
    for (name, check) in checks.iter().filter(|(n, _)| names.contains(n)) {
        if catch_unwind(*check).is_err() {
            failed.push(*name);
        }
    }
    ensure(failed.is_empty(), format!("{} checks, failed: {failed:?}", names.len()))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let names: Vec<&str> = gradient_checks::ALL.iter().map(|(n, _)| *n).collect();
    let res = run_checks(gradient_checks::ALL, &names)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("{res}, {secs:.1} s (limit 60 s)"))
}

fn oracle_equivalence() -> Outcome {
    run_checks(
        oracle_checks::ALL,
        &[
            "conv2d_matches_loop_oracle",
            "dynamic_filter_matches_loop_oracle",
            "window_attention_matches_direct_evaluation",
            "guided_attention_matches_direct_evaluation",
            "relative_bias_lookup_matches_offsets",
        ],
    )
}

fn exact_identities() -> Outcome {
    run_checks(
        oracle_checks::ALL,
        &[
            "partition_merge_roundtrip_is_bitwise",
            "zero_head_returns_the_input_bitwise",
            "refinement_identities_are_exact",
            "single_channel_slfc_takes_the_filtered_sar_feature",
        ],
    )
}

fn metric_closed_forms() -> Outcome {
    let x = common::noise(vec![3, 16, 16], 1).map(|v| 0.45 + 0.45 * v);
    let psnr = metrics::psnr(&x.map(|v| v + 0.1), &x).map_err(|e| e.to_string())?;
    let ssim = metrics::ssim(&x, &x).map_err(|e| e.to_string())?;
    let a = Tensor::from_fn(vec![4, 3, 3], |i| if (i / 9) % 2 == 0 { 0.7 } else { 0.0 });
    let b = Tensor::from_fn(vec![4, 3, 3], |i| if (i / 9) % 2 == 1 { 0.2 } else { 0.0 });
    let sam = metrics::sam(&a, &b).map_err(|e| e.to_string())?;
    let mae = metrics::mae(&x.map(|v| v + 0.05), &x).map_err(|e| e.to_string())?;
    ensure(
        (psnr - 20.0).abs() <= 1e-6 && (ssim - 1.0).abs() <= 1e-12 && (sam - 90.0).abs() <= 1e-8 && (mae - 0.05).abs() <= 1e-12,
        format!("psnr {psnr:.9} ssim {ssim:.15} sam {sam:.12} mae {mae:.15}"),
    )
}

fn normalization_endpoints() -> Outcome {
    let vv = Tensor::new(vec![1, 2], vec![-25.0, 0.0]).unwrap();
    let vh = Tensor::new(vec![1, 2], vec![-32.5, 0.0]).unwrap();
    let sar = data::normalize_sar(&vv, &vh).map_err(|e| e.to_string())?;
    let opt = data::normalize_optical(&Tensor::new(vec![2], vec![0.0, 10000.0]).unwrap());
    let sar32 = data::normalize_sar(&vv.cast::<f32>(), &vh.cast::<f32>()).map_err(|e| e.to_string())?;
    let opt32 = data::normalize_optical(&Tensor::new(vec![2], vec![0.0f32, 10000.0]).unwrap());
    ensure(
        sar.data() == [0.0, 1.0, 0.0, 1.0]
            && opt.data() == [0.0, 1.0]
            && sar32.data() == [0.0, 1.0, 0.0, 1.0]
            && opt32.data() == [0.0, 1.0],
        format!("sar {:?} optical {:?}", sar.data(), opt.data()),
    )
}

fn overfit_single_scene() -> Outcome {
    let start = Instant::now();
    let scene: SceneTriplet<f32> = data::synth_scene(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let scenes = [scene];
    let model = GlfcrModel::<f32>::new(ModelConfig::desk(), 0).map_err(|e| e.to_string())?;
    let initial = validation_l1(&model, &scenes).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 1,
        batch: 1,
        crop: 64,
        samples_per_epoch: Some(200),
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(model, cfg).map_err(|e| e.to_string())?;
    let rows = fit(&mut trainer, &scenes, None).map_err(|e| e.to_string())?;
    let fin = validation_l1(&trainer.model, &scenes).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ratio = fin / initial;
    ensure(
        rows.len() == 200 && ratio < 0.2 && secs < 300.0,
        format!(
            "{} steps, L1 {initial:.5} -> {fin:.5}, ratio {ratio:.3} (limit 0.2), {secs:.0} s (limit 300 s)",
            rows.len()
        ),
    )
}

fn ablation_data() -> (Vec<SceneTriplet<f32>>, Vec<SceneTriplet<f32>>) {
    let train_cfg = SynthConfig {
        seed: 100,
        coverage: (0.3, 0.7),
        looks: 1.0,
        ..SynthConfig::default()
    };
    let val_cfg = SynthConfig {
        seed: 200,
        ..train_cfg.clone()
    };
    let train = (0..64).map(|i| data::synth_scene_at(&train_cfg, i).unwrap()).collect();
    let val = (0..16).map(|i| data::synth_scene_at(&val_cfg, i).unwrap()).collect();
    (train, val)
}

fn ablation_l1(variant: Variant, seed: u64, train: &[SceneTriplet<f32>], val: &[SceneTriplet<f32>]) -> glfcr::Result<f64> {
    let model = GlfcrModel::<f32>::new(
        ModelConfig {
            variant,
            ..ModelConfig::desk()
        },
        seed,
    )?;
    let cfg = TrainConfig {
        lr0: 1e-3,
        seed,
        epochs: 5,
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(model, cfg)?;
    fit(&mut trainer, train, None)?;
    validation_l1(&trainer.model, val)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn mechanism_value() -> Outcome {
    let start = Instant::now();
    let (train, val) = ablation_data();
    let mut medians = Vec::new();
    for v in [Variant::NoSar, Variant::Concat, Variant::Full] {
        let l1s = [1, 2, 3]
            .into_iter()
            .map(|seed| ablation_l1(v, seed, &train, &val))
            .collect::<glfcr::Result<Vec<f64>>>()
            .map_err(|e| e.to_string())?;
        println!("    {v:<8} val L1 per seed {l1s:.5?}, median {:.5}", median(l1s.to_vec()));
        medians.push(median(l1s.to_vec()));
    }
    let gated = start.elapsed();
    // Finer ablations are reported, not gated; one seed each.
    for v in [Variant::NoGf, Variant::NoDf, Variant::NoStl] {
        let l1 = ablation_l1(v, 1, &train, &val).map_err(|e| e.to_string())?;
        println!("    {v:<8} val L1 seed 1 {l1:.5} (not gated)");
    }
    let (no_sar, concat, full) = (medians[0], medians[1], medians[2]);
    ensure(
        full < no_sar && full < concat && gated < Duration::from_secs(30 * 60),
        format!(
            "median L1 full {full:.5}, no_sar {no_sar:.5}, concat {concat:.5}; gated runs {:.0} s (limit 1800 s)",
            gated.as_secs_f64()
        ),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig {
        height: 32,
        width: 32,
        seed: 42,
        ..SynthConfig::default()
    };
    let run = |name: &str, resume_from: Option<&Path>| -> glfcr::Result<RunPaths> {
        let root = tmp.path().join(format!("{name}_data"));
        data::synth_dataset(&root, &synth, 4)?;
        let scenes = data::load_dataset::<f64>(&root)?;
        let out = RunPaths::new(tmp.path().join(name));
        let mut trainer = match resume_from {
            Some(ckpt) => {
                std::fs::create_dir_all(&out.dir).unwrap();
                std::fs::copy(ckpt.with_file_name("trace.tsv"), out.trace()).unwrap();
                checkpoint::load(ckpt)?.trainer(None)?
            }
            None => {
                let cfg = TrainConfig {
                    epochs: 3,
                    batch: 2,
                    crop: 32,
                    seed: 7,
                    ..TrainConfig::desk()
                };
                Trainer::new(GlfcrModel::<f64>::new(ModelConfig::desk(), 3)?, cfg)?
            }
        };
        fit(&mut trainer, &scenes, Some(&out))?;
        Ok(out)
    };
    let a = run("a", None).map_err(|e| e.to_string())?;
    let b = run("b", None).map_err(|e| e.to_string())?;
    let c = run("c", Some(&a.checkpoint(1))).map_err(|e| e.to_string())?;
    let read = |p: &Path| std::fs::read(p).unwrap();
    let manifests_equal =
        read(&tmp.path().join("a_data").join(data::MANIFEST_FILE)) == read(&tmp.path().join("b_data").join(data::MANIFEST_FILE));
    let traces_equal = read(&a.trace()) == read(&b.trace());
    let resumed_equal = read(&a.trace()) == read(&c.trace())
        && checkpoint::load(&a.last()).map_err(|e| e.to_string())?.entries
            == checkpoint::load(&c.last()).map_err(|e| e.to_string())?.entries;
    let steps = glfcr::training::read_trace(&a.trace()).map_err(|e| e.to_string())?.len();
    ensure(
        manifests_equal && traces_equal && resumed_equal,
        format!("{steps} steps; manifests equal {manifests_equal}, traces equal {traces_equal}, resume equal {resumed_equal}"),
    )
}

fn binned_report() -> Outcome {
    let cfg = SynthConfig {
        seed: 9,
        coverage: (0.0, 1.0),
        ..SynthConfig::default()
    };
    let model = GlfcrModel::<f32>::new(ModelConfig::desk(), 5).map_err(|e| e.to_string())?;
    let mut scenes = Vec::new();
    for i in 0..25 {
        let s: SceneTriplet<f32> = data::synth_scene_at(&cfg, i).map_err(|e| e.to_string())?;
        let pred = glfcr::training::predict_scene(&model, &s).map_err(|e| e.to_string())?;
        scenes.push((
            metrics::evaluate(&pred, &s.s2_cloudfree, None).map_err(|e| e.to_string())?,
            s.coverage(),
        ));
    }
    let report = metrics::binned_report(&scenes).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = report.bins.iter().map(|b| b.count).collect();
    let mut worst = 0.0f64;
    for k in 0..4 {
        let weighted: f64 = report
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.means[k] * b.count as f64)
            .sum();
        worst = worst.max((weighted / scenes.len() as f64 - report.overall.means[k]).abs());
    }
    ensure(
        report.bins.len() == BIN_COUNT && counts.iter().sum::<usize>() == scenes.len() && worst <= 1e-12,
        format!(
            "bin counts {counts:?} over {} scenes, worst weighted-mean gap {worst:.1e}",
            scenes.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("exact identities", exact_identities),
        ("metric closed forms", metric_closed_forms),
        ("normalization endpoints", normalization_endpoints),
        ("overfit sanity", overfit_single_scene),
        ("mechanism value", mechanism_value),
        ("determinism", determinism),
        ("binned report consistency", binned_report),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} {name}: PASS ({d}) [{secs:.1} s]"),
            Err(d) => {
                failures += 1;
                println!("criterion {n} {name}: FAIL ({d}) [{secs:.1} s]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
