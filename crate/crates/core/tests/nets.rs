mod common;

use common::jitter_biases;
use dagan::checkpoint::Checkpoint;
use dagan::gan::{discriminator_loss, generator_adv_loss};
use dagan::gradcheck::{grad_check, GradCheckConfig};
use dagan::nets::*;
use dagan::params::ParamSet;
use dagan::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(b: usize, s: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([b, 3, s, s], |_| rng.random_range(-1.0..1.0))
}

fn zero(params: &mut ParamSet<f32>, names: &[&str]) {
    for n in names {
        params.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn generator_preserves_size_and_range() {
    let spec = GeneratorSpec::default();
    let g = build_generator::<f32>(&spec, 1).unwrap();
    assert_eq!(g.num_scalars(), spec.param_count());
    for s in [16, 32, 64] {
        let y = generator_forward(&spec, &g, &image(2, s, s as u64)).unwrap();
        assert_eq!(y.shape(), &[2, 3, s, s]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(generator_forward(&spec, &g, &image(1, 30, 0)).is_err());
}

#[test]
fn init_is_seeded() {
    let spec = GeneratorSpec::default();
    assert_eq!(build_generator::<f32>(&spec, 4).unwrap(), build_generator::<f32>(&spec, 4).unwrap());
    assert_ne!(build_generator::<f32>(&spec, 4).unwrap(), build_generator::<f32>(&spec, 5).unwrap());
    let w = build_generator::<f64>(&spec, 4).unwrap();
    let sd = {
        let d = w.get("res0.conv1.weight").unwrap().data();
        (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
    };
    assert!((sd - INIT_STD).abs() < 0.002, "{sd}");
}

#[test]
fn zero_final_layer_gives_a_zero_image() {
    let spec = GeneratorSpec::default();
    let mut g = build_generator::<f32>(&spec, 2).unwrap();
    zero(&mut g, &["out.conv.weight", "out.conv.bias"]);
    let y = generator_forward(&spec, &g, &image(1, 32, 3)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn silenced_residual_blocks_are_identities() {
    let spec = GeneratorSpec {
        n_resblocks: 2,
        ..GeneratorSpec::default()
    };
    let mut g = build_generator::<f32>(&spec, 6).unwrap();
    zero(&mut g, &["res0.norm2.gain", "res0.norm2.bias", "res1.norm2.gain", "res1.norm2.bias"]);
    let mut plain = ParamSet::new();
    for (k, v) in g.iter().filter(|(k, _)| !k.starts_with("res")) {
        plain.insert(k.clone(), v.clone());
    }
    let no_res = GeneratorSpec {
        n_resblocks: 0,
        ..spec
    };
    let x = image(1, 32, 7);
    assert_eq!(generator_forward(&spec, &g, &x).unwrap(), generator_forward(&no_res, &plain, &x).unwrap());
}

#[test]
fn discriminator_grids() {
    let spec = DiscriminatorSpec::default();
    let d = build_patch_discriminator::<f32>(&spec, 0).unwrap();
    assert_eq!(d.num_scalars(), spec.param_count());
    for (s, p) in [(32, 4), (128, 16)] {
        assert_eq!(spec.patch_grid(s), p);
        assert_eq!(discriminator_forward(&spec, &d, &image(1, s, 0)).unwrap().shape(), &[1, 1, p, p]);
    }
    assert!(discriminator_forward(&spec, &d, &image(1, 4, 0)).is_err());
}

#[test]
fn silent_discriminator_scores_chance() {
    let spec = DiscriminatorSpec::default();
    let mut d = build_patch_discriminator::<f64>(&spec, 0).unwrap();
    for n in ["out.conv.weight", "out.conv.bias"] {
        d.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (a, b) = (image(2, 32, 1).cast::<f64>(), image(2, 32, 2).cast::<f64>());
    let ln2 = std::f64::consts::LN_2;
    assert!((discriminator_loss(&spec, &d, &a, &b).unwrap() - 2.0 * ln2).abs() < 1e-9);
    assert!((generator_adv_loss(&spec, &d, &b).unwrap() - ln2).abs() < 1e-9);
}

#[test]
fn discriminator_on_generator_passes_gradient_check() {
    let g_spec = GeneratorSpec {
        base_width: 2,
        n_resblocks: 1,
        ..GeneratorSpec::default()
    };
    let d_spec = DiscriminatorSpec {
        base_width: 2,
        ..DiscriminatorSpec::default()
    };
    let names = ["stem.conv.weight", "res0.norm1.gain", "up0.conv.weight", "out.conv.bias"];
    for seed in 0..3 {
        let mut g = build_generator::<f64>(&g_spec, seed).unwrap();
        let mut d = build_patch_discriminator::<f64>(&d_spec, seed + 10).unwrap();
        jitter_biases(&mut g, seed);
        jitter_biases(&mut d, seed + 10);
        let x = image(1, 16, seed).cast::<f64>();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| g.get(n).unwrap().clone()).collect();
        let report = grad_check(
            |tape: &mut Tape<f64>, vars| {
                let mut gb = g.bind(tape, false);
                for (n, &v) in names.iter().zip(vars) {
                    gb.rebind(n, v)?;
                }
                let db = d.bind(tape, false);
                let xv = tape.leaf(x.clone(), false);
                let fake = generator_forward_on(tape, &g_spec, &gb, xv)?;
                let logits = discriminator_forward_on(tape, &d_spec, &db, fake)?;
                tape.bce_with_target(logits, true)
            },
            &inputs,
            // a 1e-5 step straddles a kink somewhere in the composed stack
            GradCheckConfig {
                step: 1e-7,
                ..GradCheckConfig::default()
            },
        );
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = build_generator::<f32>(&GeneratorSpec::default(), 9).unwrap();
    let path = dir.path().join("g.dagn");
    Checkpoint::new(g.clone()).with_meta("note", "x").save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back.params, g);
    assert_eq!(back.metadata["note"], "x");
    assert!(matches!(
        Checkpoint::<f32>::load(dir.path().join("none.dagn")),
        Err(dagan::Error::MissingArtifact(_))
    ));
}

proptest! {
    #[test]
    fn checkpoint_bytes_round_trip_bitwise(
        tensors in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z]{1,4})?", prop::collection::vec(-1e30f32..1e30, 1..20), 1..5),
    ) {
        let mut p = ParamSet::new();
        for (k, v) in &tensors {
            p.insert(k.clone(), Tensor::new([v.len()], v.clone()).unwrap());
        }
        let bytes = Checkpoint::new(p.clone()).to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        for (k, v) in p.iter() {
            let b = back.params.get(k).unwrap();
            prop_assert!(v.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(back.params.len(), p.len());
    }
}
