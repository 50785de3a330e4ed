//! Finite-difference gradient checks across seeds.

use std::time::{Duration, Instant};

use stm_unet::gradcheck::grad_check;
use stm_unet::gradsuite::{self, OP_TOLERANCE};
use stm_unet::rng::{SeededRng, Stream};
use stm_unet::Tensor;

const SEEDS: u64 = 10;

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

#[test]
fn suite_passes_for_ten_seeds_within_budget() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..SEEDS {
        for entry in gradsuite::run(seed).unwrap() {
            if !entry.passed() {
                failures.push(format!("seed {seed} {}: {:e}", entry.name, entry.report.max_rel_error));
            }
            assert!(entry.report.checked > 0, "{} checked nothing", entry.name);
        }
    }
    let elapsed = start.elapsed();
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(elapsed < Duration::from_secs(120), "suite took {elapsed:?}");
}

#[test]
fn suite_covers_every_differentiable_operation() {
    let names: Vec<&str> = gradsuite::run(0).unwrap().iter().map(|e| e.name).collect();
    for required in [
        "conv2d",
        "maxpool2d",
        "bilinear_upsample",
        "layer_norm",
        "linear",
        "relu",
        "gelu",
        "sigmoid",
        "softmax_last",
        "wmsa",
        "swin_pair",
        "axial_shift_height",
        "axial_shift_width",
        "parallel_conv",
        "pcas_block",
        "bce_dice_loss",
        "model_end_to_end",
    ] {
        assert!(names.contains(&required), "missing {required}");
    }
}

#[test]
fn named_small_instances() {
    let mut rng = SeededRng::new(1, Stream::Test);
    let (x, w, b) = (random(&mut rng, &[2, 3]), random(&mut rng, &[3, 4]), random(&mut rng, &[4]));
    let r = grad_check(|v| v[0].linear(v[1], Some(v[2])), &[x, w, b], 1).unwrap();
    assert!(r.max_rel_error < OP_TOLERANCE, "linear {:e}", r.max_rel_error);

    let (x, w) = (random(&mut rng, &[1, 2, 5, 5]), random(&mut rng, &[2, 2, 3, 3]));
    let r = grad_check(|v| v[0].conv2d(v[1], None, 1, 1), &[x, w], 1).unwrap();
    assert!(r.max_rel_error < OP_TOLERANCE, "conv2d {:e}", r.max_rel_error);

    let x = random(&mut rng, &[4]);
    let r = grad_check(|v| v[0].softmax(0), &[x], 1).unwrap();
    assert!(r.max_rel_error < OP_TOLERANCE, "softmax {:e}", r.max_rel_error);
}

#[test]
fn relu_away_from_kink() {
    let mut rng = SeededRng::new(2, Stream::Test);
    let data: Vec<f64> = (0..40)
        .map(|_| {
            let m = rng.uniform(1e-2, 1.0);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor::new(&[40], data).unwrap();
    let r = grad_check(|v| Ok(v[0].relu()), &[x], 2).unwrap();
    assert_eq!(r.checked, 40);
    assert!(r.max_rel_error < OP_TOLERANCE);
}
