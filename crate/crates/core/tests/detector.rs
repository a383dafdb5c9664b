use dagan::data::{gen_synthetic_corpus, generate_scene, CorpusConfig, DatasetManifest, Split};
use dagan::detector::*;
use dagan::gradcheck::{grad_check, GradCheckConfig};
use dagan::metrics::{iou, Annotation, BoundingBox, Detection};
use dagan::params::ParamSet;
use dagan::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> DetectorSpec {
    DetectorSpec {
        base_width: 4,
        ..DetectorSpec::default()
    }
}

fn zero_head(params: &mut ParamSet<f32>) {
    for name in ["head.conv.weight", "head.conv.bias"] {
        params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn build_is_seeded_and_shapes_match() {
    let spec = DetectorSpec::default();
    let a = build_detector::<f32>(&spec, 7).unwrap();
    assert_eq!(a, build_detector::<f32>(&spec, 7).unwrap());
    assert_ne!(a, build_detector::<f32>(&spec, 8).unwrap());

    // closed form against a sum over the stored tensors
    assert_eq!(spec.param_count(), a.num_scalars());
    for s in [tiny(), DetectorSpec { n_classes: 1, anchors: vec![0.3], base_width: 8, grid: 2 }] {
        assert_eq!(s.param_count(), build_detector::<f32>(&s, 0).unwrap().num_scalars());
    }

    let x = Tensor::<f32>::zeros([2, 3, 64, 64]);
    let head = detector_forward(&spec, &a, &x).unwrap();
    assert_eq!(head.shape(), &[2, 2 * (5 + 3), 4, 4]);
    let wrong = Tensor::<f32>::zeros([1, 3, 32, 32]);
    assert!(detector_forward(&spec, &a, &wrong).is_err());
}

#[test]
fn empty_ground_truth_is_all_negative() {
    let a = match_anchors(&[], &DetectorSpec::default());
    assert!(a.labels.iter().all(|l| *l == AnchorLabel::Negative));
}

#[test]
fn anchor_shaped_ground_truth_claims_that_anchor() {
    let spec = DetectorSpec::default();
    for a in [0, 5, 17, 31] {
        let m = match_anchors(&[spec.anchor_box(a)], &spec);
        assert_eq!(m.labels[a], AnchorLabel::Positive(0));
    }
}

#[test]
fn every_scene_box_gets_a_positive_anchor() {
    let spec = DetectorSpec::default();
    let anchors = spec.anchor_boxes();
    let cfg = CorpusConfig::default();
    for i in 0..300 {
        let scene = generate_scene(&cfg, Split::SourceTrain, i).unwrap();
        let gt: Vec<BoundingBox> = scene.boxes.iter().map(|a| a.bbox).collect();
        let m = match_anchors(&gt, &spec);
        for g in 0..gt.len() {
            assert!(m.positives().any(|(_, pg)| pg == g), "scene {i} box {g}");
        }
        // brute force: thresholds and argmax ownership; below-threshold
        // positives are the forced ones, at most one per box
        let mut forced = 0;
        for (a, anchor) in anchors.iter().enumerate() {
            let ious: Vec<f64> = gt.iter().map(|g| iou(anchor, g)).collect();
            let best = ious.iter().copied().fold(0.0, f64::max);
            match m.labels[a] {
                AnchorLabel::Positive(g) if best >= 0.5 && ious[g] == best => {}
                AnchorLabel::Positive(g) => {
                    assert!(ious[g] > 0.0);
                    forced += 1;
                }
                AnchorLabel::Ignore => assert!((0.4..0.5).contains(&best)),
                AnchorLabel::Negative => assert!(best < 0.4),
            }
        }
        assert!(forced <= gt.len());
    }
}

fn loss_value(spec: &DetectorSpec, params: &ParamSet<f64>, x: &Tensor<f64>, gt: &[Vec<Annotation>]) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), false);
    let head = detector_forward_on(&mut tape, spec, &bound, xv).unwrap();
    let loss = detector_loss_on(&mut tape, spec, head, gt).unwrap();
    tape.value(loss).item()
}

fn scene_batch(seed: u64) -> (Tensor<f64>, Vec<Annotation>) {
    let s = generate_scene(&CorpusConfig { seed, ..CorpusConfig::default() }, Split::SourceTrain, 0).unwrap();
    (s.image.cast::<f64>().reshape([1, 3, 64, 64]).unwrap(), s.boxes)
}

#[test]
fn loss_without_ground_truth_is_the_negative_objectness_term() {
    let spec = tiny();
    let params = build_detector::<f64>(&spec, 3).unwrap();
    let (x, _) = scene_batch(1);
    let head = detector_forward(&spec, &params, &x).unwrap();
    let by_hand: f64 = (0..spec.n_anchors())
        .map(|a| {
            let l = head.data()[spec.head_index(0, a, 0)];
            l.max(0.0) + (-l.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / spec.n_anchors() as f64;
    assert!((loss_value(&spec, &params, &x, &[vec![]]) - by_hand).abs() < 1e-12);
}

#[test]
fn saturated_exact_predictions_drive_loss_to_zero() {
    let spec = tiny();
    // a box equal to anchor 10: zero offsets are exact and only that anchor
    // clears the positive threshold
    let gt = vec![vec![Annotation { class_id: 2, bbox: spec.anchor_box(10) }]];
    assert_eq!(match_anchors(&[spec.anchor_box(10)], &spec).positives().count(), 1);
    let mut head = vec![0.0; spec.head_channels() * 16];
    for a in 0..spec.n_anchors() {
        head[spec.head_index(0, a, 0)] = if a == 10 { 40.0 } else { -40.0 };
    }
    head[spec.head_index(0, 10, 5 + 2)] = 40.0;
    let mut tape = Tape::<f64>::new();
    let head = tape.leaf(Tensor::new([1, spec.head_channels(), 4, 4], head).unwrap(), false);
    let loss = detector_loss_on(&mut tape, &spec, head, &gt).unwrap();
    assert!(tape.value(loss).item() < 1e-15, "{}", tape.value(loss).item());
}

#[test]
fn loss_ignores_ground_truth_order() {
    let spec = tiny();
    let params = build_detector::<f64>(&spec, 5).unwrap();
    let cfg = CorpusConfig::default();
    for i in 0..20 {
        let s = generate_scene(&cfg, Split::SourceTrain, i).unwrap();
        let x = s.image.cast::<f64>().reshape([1, 3, 64, 64]).unwrap();
        let mut rev = s.boxes.clone();
        rev.reverse();
        let a = loss_value(&spec, &params, &x, std::slice::from_ref(&s.boxes));
        let b = loss_value(&spec, &params, &x, &[rev]);
        assert!((a - b).abs() < 1e-12, "scene {i}: {a} vs {b}");
    }
}

#[test]
fn loss_passes_gradient_check_end_to_end() {
    let spec = tiny();
    let (x, boxes) = scene_batch(2);
    let names = ["block0.conv.weight", "block3.conv.bias", "neck.conv.bias", "head.conv.weight", "head.conv.bias"];
    for seed in 0..3 {
        let params = build_detector::<f64>(&spec, seed).unwrap();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let mut bound = params.bind(tape, false);
                for (n, &v) in names.iter().zip(vars) {
                    bound.rebind(n, v)?;
                }
                let xv = tape.leaf(x.clone(), false);
                let head = detector_forward_on(tape, &spec, &bound, xv)?;
                detector_loss_on(tape, &spec, head, std::slice::from_ref(&boxes))
            },
            &inputs,
            GradCheckConfig::default(),
        );
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn zeroed_head_scores_every_anchor_at_one_half() {
    let spec = DetectorSpec::default();
    let mut params = build_detector::<f32>(&spec, 0).unwrap();
    zero_head(&mut params);
    let img = generate_scene(&CorpusConfig::default(), Split::SourceTrain, 0).unwrap().image;
    let head = detector_forward(&spec, &params, &img.clone().reshape([1, 3, 64, 64]).unwrap()).unwrap();
    let raw = decode_detections(&spec, &head, 0, DEFAULT_CONF_THRESHOLD, 1.0).unwrap();
    assert_eq!(raw.len(), spec.n_anchors());
    assert!(raw.iter().all(|d| d.confidence == 0.5 && d.class_id == 0));
    let dets = detect(&spec, &params, &img, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU).unwrap();
    assert_eq!(dets, nms(raw, DEFAULT_NMS_IOU));
    assert!(!dets.is_empty() && dets.len() <= spec.n_anchors());
}

#[test]
fn detections_stay_inside_the_image() {
    let spec = DetectorSpec::default();
    let mut params = build_detector::<f32>(&spec, 1).unwrap();
    // inflate the size offsets so decoded boxes overflow before clamping
    let bias = params.get_mut("head.conv.bias").unwrap().data_mut();
    for k in 0..2 {
        bias[k * 8 + 3] = 2.0;
        bias[k * 8 + 4] = 2.0;
    }
    for i in 0..10 {
        let img = generate_scene(&CorpusConfig::default(), Split::TargetTest, i).unwrap().image;
        for d in detect(&spec, &params, &img, 0.0, DEFAULT_NMS_IOU).unwrap() {
            let b = d.bbox;
            assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 64.0 && b.y_max <= 64.0);
            assert!((0.0..=1.0).contains(&d.confidence));
        }
    }
}

fn greedy_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    // repeatedly take the best remaining, delete everything it suppresses
    let mut pool: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for j in 1..pool.len() {
            let (bi, bd) = pool[best];
            let (ji, jd) = pool[j];
            if jd.confidence > bd.confidence || (jd.confidence == bd.confidence && ji < bi) {
                best = j;
            }
        }
        let (_, keep) = pool.remove(best);
        pool.retain(|(_, d)| d.class_id != keep.class_id || iou(&d.bbox, &keep.bbox) <= thr);
        out.push(keep);
    }
    out
}

fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..40.0);
            let y = rng.random_range(0.0..40.0);
            Detection {
                bbox: BoundingBox::new(x, y, x + rng.random_range(4.0..24.0), y + rng.random_range(4.0..24.0)).unwrap(),
                class_id: rng.random_range(0..2),
                // coarse scores so ties occur
                confidence: (rng.random_range(0..10) as f64) / 10.0,
            }
        })
        .collect()
}

#[test]
fn nms_matches_greedy_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let n = rng.random_range(0..30);
        let dets = random_dets(&mut rng, n);
        let thr = rng.random_range(0.1..0.9);
        assert_eq!(nms(dets.clone(), thr), greedy_oracle(&dets, thr));
    }
}

proptest! {
    #[test]
    fn nms_is_idempotent(seed in any::<u64>(), n in 0usize..40, thr in 0.05f64..0.95) {
        let dets = random_dets(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let once = nms(dets, thr);
        prop_assert_eq!(nms(once.clone(), thr), once);
    }

    #[test]
    fn encode_then_decode_is_identity(
        a in 0usize..32,
        cx in 0.0f64..64.0, cy in 0.0f64..64.0,
        w in 2.0f64..60.0, h in 2.0f64..60.0,
    ) {
        let spec = DetectorSpec::default();
        let anchor = spec.anchor_box(a);
        let b = BoundingBox::from_center(cx, cy, w, h).unwrap();
        let back = decode_box(encode_box(&b, &anchor), &anchor).unwrap();
        for (p, q) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }
}

fn tiny_manifest(dir: &std::path::Path) -> DatasetManifest {
    let cfg = CorpusConfig {
        n_train_source: 6,
        n_train_target: 1,
        n_test_target: 1,
        n_test_source: 1,
        ..CorpusConfig::default()
    };
    gen_synthetic_corpus(&cfg, dir).unwrap().source_train
}

#[test]
fn training_is_seeded_and_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path());
    let cfg = DetectorTrainConfig {
        epochs: 3,
        batch_size: 4,
        ..DetectorTrainConfig::default()
    };
    let a = train_detector(&m, &tiny(), &cfg).unwrap();
    let b = train_detector(&m, &tiny(), &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.epoch_losses.len(), 3);
    let csv = a.loss_csv();
    assert!(csv.starts_with("epoch,loss\n"));
    assert_eq!(csv.lines().count(), 4);

    let empty = DatasetManifest::new(dir.path(), m.classes.clone(), "none");
    assert!(matches!(train_detector(&empty, &tiny(), &cfg), Err(dagan::Error::Empty(_))));
}

#[test]
fn detection_files_use_the_documented_lines() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path());
    let mut dets = vec![Vec::new(); m.len()];
    dets[1].push(Detection {
        bbox: BoundingBox::new(1.0, 2.0, 10.0, 12.0).unwrap(),
        class_id: 2,
        confidence: 0.75,
    });
    let path = dir.path().join("dets.jsonl");
    write_detections(&path, &m, &dets).unwrap();
    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&path).unwrap().trim()).unwrap();
    assert_eq!(line["image"], m.samples[1].image.as_str());
    assert_eq!(line["class"], 2);
    assert_eq!(line["confidence"], 0.75);
    assert_eq!(line["box"], serde_json::json!([1.0, 2.0, 10.0, 12.0]));
    assert_eq!(read_detections(&path, &m).unwrap(), dets);

    std::fs::write(&path, "{\"image\":\"nope.ppm\",\"class\":0,\"confidence\":0.5,\"box\":[0,0,1,1]}\n").unwrap();
    assert!(read_detections(&path, &m).is_err());
}
