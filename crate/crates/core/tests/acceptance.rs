//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned here.
//!
//! Criteria 4, 5 and 8 read the committed reference results in
//! `reference/compare.json`. Set `DAGAN_ACCEPTANCE_FULL=1` to regenerate them
//! from `reference/config.json` instead (about an hour single-core) and to run
//! the determinism check on the reference configuration.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use dagan::detector::{build_detector, detector_forward_on, detector_loss_on, DetectorSpec};
use dagan::gan::*;
use dagan::gradcheck::{grad_check, GradCheckConfig};
use dagan::metrics::*;
use dagan::nets::*;
use dagan::pipeline::{compare, parse_config, CompareTable, PipelineConfig, Regime};
use dagan::tensor::{Conv2d, ConvTranspose2d, Padding, Tape, Tensor, Var};
use dagan::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
/// Composed losses pass thousands of units through ReLU kinks; a 1e-5 step
/// straddles one now and then, a 1e-7 step practically never.
const COMPOSED_STEP: f64 = 1e-7;
const ORACLE_INSTANCES: usize = 50;
/// Real-valued metrics may differ from their oracles by summation order only.
const ORACLE_TOL: f64 = 1e-12;
const WORKED_AP_TOL: f64 = 1e-9;
const CHANCE_TOL: f64 = 1e-9;
/// Criteria that cannot be met at desk scale. Each is reported red and still
/// printed; see the README.
const KNOWN_RED: &[u8] = &[4, 5];

type Outcome = std::result::Result<String, String>;

fn full_run() -> bool {
    std::env::var("DAGAN_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn reference_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../reference")
}

fn randn(shape: impl Into<Vec<usize>>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn weighted_sum(tape: &mut Tape<f64>, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = randn(tape.shape(out).to_vec(), &mut rng);
    let w = tape.leaf(w, false);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

// ---- criterion 1 ----

struct GradSuite {
    checks: usize,
    worst: f64,
    failures: Vec<String>,
}

impl GradSuite {
    fn run(&mut self, name: &str, seed: u64, step: f64, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
        let cfg = GradCheckConfig {
            step,
            tolerance: GRAD_TOL,
        };
        let r = grad_check(f, inputs, cfg);
        self.checks += 1;
        self.worst = self.worst.max(r.worst());
        if !r.passed {
            let worst = r.worst();
            self.failures.push(format!("{name} seed {seed}: {}", r.error.unwrap_or_else(|| format!("{worst:.2e}"))));
        }
    }
}

fn primitive_checks(s: &mut GradSuite, seed: u64) {
    let h = GradCheckConfig::default().step;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;

    // convolutions over random geometry
    let (b, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let k = r.random_range(1..5);
    let stride = r.random_range(1..3);
    let (ih, iw) = (r.random_range(k.max(2)..8), r.random_range(k.max(2)..8));
    let zp = r.random_range(0..k);
    let rp = r.random_range(0..k.min(ih.min(iw) - 1) + 1).min(ih.min(iw) - 1);
    let x = randn([b, cin, ih, iw], r);
    let w = randn([cout, cin, k, k], r);
    let bias = randn([cout], r);
    for (name, pad) in [("conv2d zero pad", Padding::Zero(zp)), ("conv2d reflect pad", Padding::Reflect(rp))] {
        s.run(name, seed, h, &[x.clone(), w.clone(), bias.clone()], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], Conv2d::new(stride, pad))?;
            weighted_sum(t, y, seed)
        });
    }
    let kt = r.random_range(1..5);
    let tp = r.random_range(0..=(kt - 1) / 2);
    let xt = randn([b, cin, r.random_range(2..5), r.random_range(2..5)], r);
    let wt = randn([cin, cout, kt, kt], r);
    s.run("conv2d_transpose", seed, h, &[xt, wt, bias.clone()], |t, v| {
        let y = t.conv2d_transpose(v[0], v[1], v[2], ConvTranspose2d { stride, padding: tp })?;
        weighted_sum(t, y, seed)
    });

    // pointwise and reductions
    let shape = [r.random_range(1..3), r.random_range(1..4), r.random_range(2..5), r.random_range(2..5)];
    let (a, c) = (randn(shape, r), randn(shape, r));
    let slope = r.random_range(0.01..0.5);
    let k_scale = r.random_range(-3.0..3.0);
    s.run("relu", seed, h, std::slice::from_ref(&a), |t, v| {
        let y = t.relu(v[0])?;
        weighted_sum(t, y, seed)
    });
    s.run("leaky_relu", seed, h, std::slice::from_ref(&a), |t, v| {
        let y = t.leaky_relu(v[0], slope)?;
        weighted_sum(t, y, seed)
    });
    s.run("tanh", seed, h, std::slice::from_ref(&a), |t, v| {
        let y = t.tanh(v[0])?;
        weighted_sum(t, y, seed)
    });
    s.run("sigmoid", seed, h, std::slice::from_ref(&a), |t, v| {
        let y = t.sigmoid(v[0])?;
        weighted_sum(t, y, seed)
    });
    let gain = randn([shape[1]], r);
    let shift = randn([shape[1]], r);
    s.run("instance_norm", seed, h, &[a.clone(), gain, shift], |t, v| {
        let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, seed)
    });
    s.run("add sub mul scale", seed, h, &[a.clone(), c.clone()], |t, v| {
        let p = t.add(v[0], v[1])?;
        let q = t.sub(v[0], v[1])?;
        let m = t.mul(p, q)?;
        let m = t.scale(m, k_scale)?;
        weighted_sum(t, m, seed)
    });
    s.run("sum mean add_all", seed, h, &[a.clone(), c.clone()], |t, v| {
        let sa = t.sum(v[0])?;
        let mc = t.mean(v[1])?;
        let sq = t.mul(v[0], v[0])?;
        let msq = t.mean(sq)?;
        t.add_all(&[sa, mc, msq])
    });
    let n = a.numel();
    let idx: Vec<usize> = (0..r.random_range(1..2 * n)).map(|_| r.random_range(0..n)).collect();
    let m = idx.len();
    s.run("gather", seed, h, std::slice::from_ref(&a), move |t, v| {
        let y = t.gather(v[0], idx.clone(), [m])?;
        weighted_sum(t, y, seed)
    });
    s.run("l1_loss", seed, h, &[a.clone(), c.clone()], |t, v| t.l1_loss(v[0], v[1]));

    let logits = Tensor::from_fn([r.random_range(1..12)], |_| r.random_range(-6.0..6.0));
    let targets: Vec<f64> = (0..logits.numel()).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
    s.run("bce_from_logits", seed, h, std::slice::from_ref(&logits), |t, v| t.bce_from_logits(v[0], &targets));
    let flag = r.random_bool(0.5);
    s.run("bce_with_target", seed, h, &[logits], |t, v| t.bce_with_target(v[0], flag));
    let (rows, classes) = (r.random_range(1..5), r.random_range(2..5));
    let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
    let z = Tensor::from_fn([rows, classes], |_| r.random_range(-4.0..4.0));
    s.run("softmax_cross_entropy", seed, h, &[z], |t, v| t.softmax_cross_entropy(v[0], &labels));
}

fn composed_checks(s: &mut GradSuite, seed: u64, detector_scene: &(Tensor<f64>, Vec<Annotation>)) {
    let h = COMPOSED_STEP;
    let gs = GeneratorSpec {
        base_width: 2,
        n_resblocks: 1,
        ..GeneratorSpec::default()
    };
    let ds = DiscriminatorSpec {
        base_width: 2,
        n_layers: 2,
        ..DiscriminatorSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut g = build_generator::<f64>(&gs, seed).unwrap();
    let mut f = build_generator::<f64>(&gs, seed + 100).unwrap();
    let mut dx = build_patch_discriminator::<f64>(&ds, seed + 200).unwrap();
    let mut dy = build_patch_discriminator::<f64>(&ds, seed + 300).unwrap();
    for (i, p) in [&mut g, &mut f, &mut dx, &mut dy].into_iter().enumerate() {
        jitter_biases(p, seed * 10 + i as u64);
    }
    let (x, y) = (randn([1, 3, 16, 16], &mut rng), randn([1, 3, 16, 16], &mut rng));

    // full generator objective through both generators and both discriminators
    let names = ["stem.conv.bias", "down0.conv.weight", "res0.norm1.gain", "res0.norm2.bias", "up1.conv.bias", "out.conv.bias"];
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| g.get(n).unwrap().clone())
        .chain(names.iter().map(|n| f.get(n).unwrap().clone()))
        .collect();
    s.run("generator objective", seed, h, &inputs, |t, v| {
        let (mut gb, mut fb) = (g.bind(t, false), f.bind(t, false));
        for (i, n) in names.iter().enumerate() {
            gb.rebind(n, v[i])?;
            fb.rebind(n, v[i + names.len()])?;
        }
        let (dxb, dyb) = (dx.bind(t, false), dy.bind(t, false));
        let (xv, yv) = (t.leaf(x.clone(), false), t.leaf(y.clone(), false));
        let fake_y = generator_forward_on(t, &gs, &gb, xv)?;
        let fake_x = generator_forward_on(t, &gs, &fb, yv)?;
        let adv_g = generator_adv_loss_on(t, &ds, &dyb, fake_y)?;
        let adv_f = generator_adv_loss_on(t, &ds, &dxb, fake_x)?;
        let cyc_f = cycle_loss_on(t, &gs, &gb, &fb, xv)?;
        let cyc_b = cycle_loss_on(t, &gs, &fb, &gb, yv)?;
        let cyc = t.add(cyc_f, cyc_b)?;
        let cyc = t.scale(cyc, 10.0)?;
        t.add_all(&[adv_g, adv_f, cyc])
    });

    // discriminator loss over every discriminator parameter
    let d_names: Vec<String> = dy.iter().map(|(k, _)| k.clone()).collect();
    let d_inputs: Vec<Tensor<f64>> = d_names.iter().map(|n| dy.get(n).unwrap().clone()).collect();
    let (real, fake) = (randn([1, 3, 8, 8], &mut rng), randn([1, 3, 8, 8], &mut rng));
    s.run("discriminator loss", seed, h, &d_inputs, |t, v| {
        let mut b = dy.bind(t, false);
        for (n, &var) in d_names.iter().zip(v) {
            b.rebind(n, var)?;
        }
        let (r, fk) = (t.leaf(real.clone(), false), t.leaf(fake.clone(), false));
        discriminator_loss_on(t, &ds, &b, r, fk)
    });

    // detector loss on a rendered scene
    let spec = DetectorSpec {
        base_width: 2,
        ..DetectorSpec::default()
    };
    let mut p = build_detector::<f64>(&spec, seed).unwrap();
    jitter_biases(&mut p, seed * 10 + 9);
    let det_names = ["block0.conv.bias", "block3.conv.bias", "neck.conv.bias", "head.conv.weight", "head.conv.bias"];
    let det_inputs: Vec<Tensor<f64>> = det_names.iter().map(|n| p.get(n).unwrap().clone()).collect();
    let (img, boxes) = detector_scene;
    s.run("detector loss", seed, h, &det_inputs, |t, v| {
        let mut b = p.bind(t, false);
        for (n, &var) in det_names.iter().zip(v) {
            b.rebind(n, var)?;
        }
        let xv = t.leaf(img.clone(), false);
        let head = detector_forward_on(t, &spec, &b, xv)?;
        detector_loss_on(t, &spec, head, std::slice::from_ref(boxes))
    });
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut s = GradSuite {
        checks: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    for seed in 0..GRAD_SEEDS {
        let scene = dagan::data::generate_scene(
            &dagan::data::CorpusConfig {
                seed,
                ..Default::default()
            },
            dagan::data::Split::SourceTrain,
            0,
        )
        .unwrap();
        let scene = (scene.image.cast::<f64>().reshape([1, 3, 64, 64]).unwrap(), scene.boxes);
        primitive_checks(&mut s, seed);
        composed_checks(&mut s, seed, &scene);
    }
    let took = start.elapsed();
    let detail = format!(
        "{} checks over {GRAD_SEEDS} seeds, worst error {:.1e} (tol {GRAD_TOL:.0e}), {:.1} s (limit {} s)",
        s.checks,
        s.worst,
        took.as_secs_f64(),
        GRAD_BUDGET.as_secs()
    );
    if s.failures.is_empty() && took < GRAD_BUDGET {
        Ok(detail)
    } else {
        Err(format!("{detail}; failures: {:?}", s.failures))
    }
}

// ---- criterion 2 ----

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORACLE_TOL
}

fn criterion_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = ORACLE_INSTANCES;
    let mut bad = Vec::new();
    for i in 0..n {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        if (iou(&a, &b) - raster_iou(&a, &b)).abs() > ORACLE_TOL {
            bad.push(format!("iou #{i}"));
        }
        let gts: Vec<_> = (0..rng.random_range(0..4)).map(|_| random_box(&mut rng)).collect();
        let dets: Vec<_> = (0..rng.random_range(0..6))
            .map(|_| if !gts.is_empty() && rng.random_bool(0.6) { gts[rng.random_range(0..gts.len())] } else { random_box(&mut rng) })
            .collect();
        if match_detections(&dets, &gts, PASCAL_IOU).verdicts != oracle_match(&dets, &gts, PASCAL_IOU) {
            bad.push(format!("match_detections #{i}"));
        }
        let v: Vec<Verdict> = (0..rng.random_range(0..10)).map(|_| if rng.random_bool(0.5) { Verdict::Tp } else { Verdict::Fp }).collect();
        let tp = v.iter().filter(|x| **x == Verdict::Tp).count();
        let n_gt = tp + rng.random_range(0..3usize).max(usize::from(tp == 0));
        if !close(average_precision(&v, n_gt, ApMode::AllPoint).unwrap(), oracle_ap_all_point(&v, n_gt))
            || !close(average_precision(&v, n_gt, ApMode::Voc11).unwrap(), oracle_ap_voc11(&v, n_gt))
        {
            bad.push(format!("average_precision #{i}"));
        }
        let scene = random_scene(&mut rng, 3);
        let s = evaluate(&scene.dets, &scene.gts, 3, &EvalConfig::default()).unwrap();
        let (aps, map, cl) = oracle_map(&scene, 3);
        let same = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => close(x, y),
            (x, y) => x.is_none() && y.is_none(),
        };
        if !s.per_class_ap.iter().zip(&aps).all(|(a, b)| same(*a, *b)) || !close(s.map, map) {
            bad.push(format!("mean_ap #{i}"));
        }
        if !same(s.corloc, cl) {
            bad.push(format!("corloc #{i}"));
        }
        let m = random_mask(&mut rng);
        if mask_to_bbox(&m).unwrap() != oracle_mask_bbox(&m) {
            bad.push(format!("mask_to_bbox #{i}"));
        }
    }
    let worked = average_precision(&[Verdict::Tp, Verdict::Fp, Verdict::Tp], 2, ApMode::AllPoint).unwrap();
    let worked_ok = (worked - 0.8333333333).abs() < WORKED_AP_TOL;
    let detail = format!("6 metrics x {n} instances agree (boxes and verdicts exact, reals to {ORACLE_TOL:.0e}), worked AP {worked:.10}");
    if bad.is_empty() && worked_ok {
        Ok(detail)
    } else {
        Err(format!("{detail}; mismatches: {bad:?}"))
    }
}

// ---- criterion 3 ----

fn criterion_loss_formulas() -> Outcome {
    let total = total_objective(0.7, 0.7, 0.1, 0.2, 10.0);
    let ds = DiscriminatorSpec::default();
    let mut d = build_patch_discriminator::<f64>(&ds, 0).unwrap();
    for n in ["out.conv.weight", "out.conv.bias"] {
        d.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (randn([2, 3, 32, 32], &mut rng), randn([2, 3, 32, 32], &mut rng));
    let d_loss = discriminator_loss(&ds, &d, &a, &b).unwrap();
    let g_loss = generator_adv_loss(&ds, &d, &b).unwrap();
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(a, false);
    let cyc = cycle_loss_with(&mut tape, x, |_, v| Ok(v), |_, v| Ok(v)).unwrap();
    let cyc = tape.value(cyc).item();
    let ln2 = std::f64::consts::LN_2;
    let detail = format!("total {total}, D at zero logits {d_loss:.12}, G {g_loss:.12}, identity cycle {cyc}");
    if total == 4.4 && (d_loss - 2.0 * ln2).abs() < CHANCE_TOL && (g_loss - ln2).abs() < CHANCE_TOL && cyc == 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- criteria 4, 5, 8: reference results ----

fn reference_table() -> std::result::Result<(CompareTable, PipelineConfig, &'static str), String> {
    let dir = reference_dir();
    let cfg = parse_config(Some(&dir.join("config.json")), &[]).map_err(|e| e.to_string())?;
    if full_run() {
        let out = std::env::temp_dir().join("dagan-acceptance-reference");
        let t = compare(&cfg, &out, true).map_err(|e| e.to_string())?;
        return Ok((t, cfg, "fresh run"));
    }
    let text = std::fs::read_to_string(dir.join("compare.json")).map_err(|e| format!("reference/compare.json: {e}"))?;
    let t = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok((t, cfg, "reference/compare.json"))
}

fn reference_scale_ok(cfg: &PipelineConfig, t: &CompareTable) -> std::result::Result<(), String> {
    let c = &cfg.corpus;
    if c.n_train_source < 200 || c.n_train_target < 200 || c.n_test_target < 100 || c.n_classes != 3 || c.image_side != 64 {
        return Err(format!("reference corpus below the required scale: {c:?}"));
    }
    if t.seeds.len() < 3 {
        return Err(format!("only {} seeds", t.seeds.len()));
    }
    Ok(())
}

fn criterion_directional(t: &CompareTable, cfg: &PipelineConfig, src: &str) -> Outcome {
    reference_scale_ok(cfg, t)?;
    let get = |r: &Regime| t.median(r).ok_or(format!("{} missing", r.key()));
    let (raw, cyc, fwd) = (get(&Regime::RawSource)?, get(&Regime::CycleGan)?, get(&Regime::ForwardGan)?);
    let margin = cyc - raw;
    let detail = format!(
        "median mAP over {} seeds ({src}): raw {raw:.4} < cycle {cyc:.4} (margin {margin:+.4}), forward {fwd:.4}",
        t.seeds.len()
    );
    if margin > 0.0 && cyc >= fwd {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_augment(t: &CompareTable) -> Outcome {
    let cyc = t.median(&Regime::CycleGan).ok_or("cycle_gan missing")?;
    let best = t.best_augment().ok_or("no augmentation regimes")?;
    let n = t.rows.iter().filter(|r| matches!(r.regime, Regime::ClassicAugment(_))).count();
    let detail = format!("best of {n} augmentations {} {:.4} <= cycle {cyc:.4}", best.key, best.median_map);
    if best.median_map <= cyc {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_structure(t: &CompareTable) -> Outcome {
    if t.structure.is_empty() {
        return Err("no structure rows".into());
    }
    let n = t.structure.len() as f64;
    let cyc = t.structure.iter().map(|r| r.cycle_l1).sum::<f64>() / n;
    let fwd = t.structure.iter().map(|r| r.forward_l1).sum::<f64>() / n;
    let per_seed = t.structure.iter().filter(|r| r.cycle_l1 < r.forward_l1).count();
    let detail = format!("mean L1 to source: cycle {cyc:.4} < forward {fwd:.4} ({per_seed}/{} seeds)", t.structure.len());
    if cyc < fwd {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- criteria 6 and 7: reduced pipeline runs ----

const REDUCED: &str = r#"{
  "corpus": {"n_train_source": 12, "n_train_target": 12, "n_test_target": 6, "n_test_source": 2},
  "gan": {"total_steps": 4, "resize_to": 20, "crop_to": 16,
          "generator": {"base_width": 4, "n_resblocks": 1},
          "discriminator": {"base_width": 4, "n_layers": 2}},
  "detector": {"base_width": 4},
  "detector_train": {"epochs": 2},
  "compare": {"seeds": [0, 1], "augment_grid": [{"kind": "noise", "sigma": 0.05}, {"kind": "blur", "kernel": 3, "sigma": 0.5}]}
}"#;

fn reduced_config(dir: &Path) -> PipelineConfig {
    let p = dir.join("reduced.json");
    std::fs::write(&p, REDUCED).unwrap();
    parse_config(Some(&p), &[]).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_audit(work: &Path, reference: Option<&CompareTable>) -> Outcome {
    let cfg = reduced_config(work);
    let with = compare(&cfg, &work.join("audit_flag"), true).map_err(|e| e.to_string())?;
    let without = compare(&cfg, &work.join("audit_noflag"), false).map_err(|e| e.to_string())?;
    let reads = |t: &CompareTable, scope: &str| t.target_box_reads.get(scope).copied().unwrap_or(0);
    let train_reads = |t: &CompareTable| -> usize {
        t.target_box_reads.iter().filter(|(k, _)| k.starts_with("train/")).map(|(_, n)| n).sum()
    };
    let ub = reads(&with, "train/upper_bound");
    let mut problems = Vec::new();
    if !with.audit_violations().is_empty() || !without.audit_violations().is_empty() {
        problems.push("violations in reduced runs".to_string());
    }
    // the counter must see the flagged regime, or silence proves nothing
    if ub == 0 || train_reads(&with) != ub {
        problems.push(format!("upper bound reads {ub}, all training reads {}", train_reads(&with)));
    }
    if train_reads(&without) != 0 || without.row(&Regime::UpperBound).is_some() {
        problems.push("training read target boxes without the flag".into());
    }
    let mut detail = format!("reduced runs: upper bound read {ub} target boxes, every other regime 0");
    if let Some(t) = reference {
        let v = t.audit_violations();
        if !v.is_empty() {
            problems.push(format!("reference violations {v:?}"));
        }
        detail += &format!("; reference run: upper bound {}, others 0", reads(t, "train/upper_bound"));
    }
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {problems:?}"))
    }
}

fn criterion_determinism(work: &Path) -> Outcome {
    let (cfg, label) = if full_run() {
        (parse_config(Some(&reference_dir().join("config.json")), &[]).map_err(|e| e.to_string())?, "reference config")
    } else {
        (reduced_config(work), "reduced config")
    };
    let (a, b) = (work.join("det_a"), work.join("det_b"));
    compare(&cfg, &a, true).map_err(|e| e.to_string())?;
    compare(&cfg, &b, true).map_err(|e| e.to_string())?;
    let (ta, tb) = (tree(&a), tree(&b));
    let count = |ext: &str| ta.keys().filter(|p| p.extension().is_some_and(|e| e == ext)).count();
    let detail = format!(
        "two {label} runs: {} files ({} checkpoints, {} loss/table CSVs) identical",
        ta.len(),
        count("dagn"),
        count("csv")
    );
    let differing: Vec<_> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    if ta.keys().eq(tb.keys()) && differing.is_empty() && count("dagn") > 0 && ta.contains_key(Path::new("compare.json")) {
        Ok(detail)
    } else {
        Err(format!("{detail}; differing: {differing:?}"))
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    let reference = reference_table();
    let table = reference.as_ref().ok().map(|(t, _, _)| t);
    let missing = |e: &String| Err(format!("reference results unavailable: {e}"));

    let results: Vec<(u8, &str, Outcome)> = vec![
        (1, "gradient suite", guarded(criterion_gradients)),
        (2, "metric oracles", guarded(criterion_metric_oracles)),
        (3, "loss formulas", guarded(criterion_loss_formulas)),
        (
            4,
            "directional ordering",
            match &reference {
                Ok((t, cfg, src)) => guarded(|| criterion_directional(t, cfg, src)),
                Err(e) => missing(e),
            },
        ),
        (
            5,
            "augmentation does not beat adaptation",
            match &reference {
                Ok((t, _, _)) => guarded(|| criterion_augment(t)),
                Err(e) => missing(e),
            },
        ),
        (6, "unsupervised audit", guarded(|| criterion_audit(work.path(), table))),
        (7, "determinism", guarded(|| criterion_determinism(work.path()))),
        (
            8,
            "structure preservation",
            match &reference {
                Ok((t, _, _)) => guarded(|| criterion_structure(t)),
                Err(e) => missing(e),
            },
        ),
    ];

    let mut unexpected = Vec::new();
    for (id, name, r) in &results {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        // straight to the handle so the lines survive test output capture
        writeln!(std::io::stderr(), "criterion {id} {tag} {name}: {detail}").unwrap();
        if r.is_err() != KNOWN_RED.contains(id) {
            unexpected.push(*id);
        }
    }
    assert!(unexpected.is_empty(), "criteria with unexpected status: {unexpected:?}");
}
