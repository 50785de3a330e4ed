//! Finite-difference checks of every differentiable operation on small
//! random f64 instances, shared by the `gradcheck` command and the tests.

use crate::autograd::Var;
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
use crate::model::{ModelConfig, StmUNet};
use crate::params::{Graph, ParamBuilder, ParamStore};
use crate::pcas::{AxialShiftSpec, ParallelConv, PcasBlock, PcasConfig, ShiftAxis};
use crate::rng::{SeededRng, Stream};
use crate::swin::{build_shift_mask, wmsa, SwinConfig, SwinPair, WmsaWeights};
use crate::tensor::Tensor;

/// Relative-error bound for single operations and blocks.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Relative-error bound for the end-to-end model spot check.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Parameter elements checked in the end-to-end check.
pub const MODEL_SAMPLES: usize = 20;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn random(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("shape and data agree")
}

/// Values bounded away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(0.1, 1.5);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut SeededRng, scale: f64) {
    for p in store.iter_mut() {
        p.value = random(rng, p.value.shape(), -scale, scale);
    }
}

/// Checks `forward` with respect to its input, with the module produced by
/// `build` holding random weights. Weight gradients are covered by the
/// primitive checks and the end-to-end model check.
fn module_check<M, B, F>(rng: &mut SeededRng, seed: u64, x: Tensor<f64>, build: B, forward: F) -> Result<GradCheckReport>
where
    B: FnOnce(&mut ParamBuilder<'_, f64>) -> Result<M>,
    F: for<'t> Fn(&M, &Graph<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut store = ParamStore::new();
    let mut init = SeededRng::new(seed, Stream::Init);
    let module = build(&mut ParamBuilder::new(&mut store, &mut init))?;
    randomize(&mut store, rng, 0.5);
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|p| p.value.clone()));
    grad_check_with(
        |v| {
            let g = Graph::from_vars(v[0].tape(), v[1..].to_vec());
            forward(&module, &g, v[0])
        },
        &inputs,
        &GradCheckOptions {
            seed,
            inputs: Some(vec![0]),
            ..GradCheckOptions::default()
        },
    )
}

/// Runs every check; entries come back in a fixed order.
pub fn run(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = SeededRng::new(seed, Stream::GradCheck);
    let mut out = Vec::new();
    let mut push = |name, report, tolerance| {
        out.push(SuiteEntry {
            name,
            report,
            tolerance,
        })
    };

    let x = random(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
    let w = random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = random(&mut rng, &[4], -0.5, 0.5);
    push(
        "conv2d",
        grad_check(|v| v[0].conv2d(v[1], Some(v[2]), 1, 1), &[x.clone(), w.clone(), b.clone()], seed)?,
        OP_TOLERANCE,
    );
    push(
        "conv2d_stride2",
        grad_check(|v| v[0].conv2d(v[1], Some(v[2]), 2, 0), &[x, w, b], seed)?,
        OP_TOLERANCE,
    );

    let x = random(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
    let w = random(&mut rng, &[3, 1, 3, 3], -0.5, 0.5);
    let b = random(&mut rng, &[3], -0.5, 0.5);
    push(
        "depthwise_conv2d",
        grad_check(|v| v[0].depthwise_conv2d(v[1], Some(v[2])), &[x, w, b], seed)?,
        OP_TOLERANCE,
    );

    let x = random(&mut rng, &[2, 2, 4, 6], -1.0, 1.0);
    push("maxpool2d", grad_check(|v| v[0].maxpool2d(), &[x], seed)?, OP_TOLERANCE);

    let x = random(&mut rng, &[1, 2, 3, 4], -1.0, 1.0);
    push("bilinear_upsample", grad_check(|v| v[0].upsample2x(), &[x], seed)?, OP_TOLERANCE);

    let x = random(&mut rng, &[3, 4, 6], -2.0, 2.0);
    let gamma = random(&mut rng, &[6], 0.5, 1.5);
    let beta = random(&mut rng, &[6], -0.5, 0.5);
    push(
        "layer_norm",
        grad_check(|v| v[0].layer_norm(v[1], v[2], crate::nn::LN_EPS), &[x, gamma, beta], seed)?,
        OP_TOLERANCE,
    );

    let x = random(&mut rng, &[2, 3, 5], -1.0, 1.0);
    let w = random(&mut rng, &[5, 4], -0.5, 0.5);
    let b = random(&mut rng, &[4], -0.5, 0.5);
    push("linear", grad_check(|v| v[0].linear(v[1], Some(v[2])), &[x, w, b], seed)?, OP_TOLERANCE);

    let a = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let c = random(&mut rng, &[2, 4, 5], -1.0, 1.0);
    push("matmul", grad_check(|v| v[0].matmul(v[1]), &[a, c], seed)?, OP_TOLERANCE);

    let x = away_from_zero(&mut rng, &[2, 3, 4]);
    push("relu", grad_check(|v| Ok(v[0].relu()), &[x], seed)?, OP_TOLERANCE);
    let x = random(&mut rng, &[2, 3, 4], -3.0, 3.0);
    push("gelu", grad_check(|v| Ok(v[0].gelu()), std::slice::from_ref(&x), seed)?, OP_TOLERANCE);
    push("sigmoid", grad_check(|v| Ok(v[0].sigmoid()), &[x], seed)?, OP_TOLERANCE);

    let x = random(&mut rng, &[2, 3, 5], -2.0, 2.0);
    push("softmax_last", grad_check(|v| v[0].softmax(2), std::slice::from_ref(&x), seed)?, OP_TOLERANCE);
    push("softmax_middle", grad_check(|v| v[0].softmax(1), &[x], seed)?, OP_TOLERANCE);

    // 4×4 map, window 2: four windows, shifted-window mask applied
    let cfg = SwinConfig {
        heads: 2,
        ..SwinConfig::new(4, 2)
    };
    let mask = build_shift_mask(4, 4, 2)?;
    let tokens = random(&mut rng, &[4, 4, 4], -1.0, 1.0);
    push(
        "wmsa",
        module_check(
            &mut rng,
            seed,
            tokens,
            |b| WmsaWeights::build(b, &cfg),
            |w, g, x| Ok(wmsa(g, x, &cfg, w, Some(&mask))?.0),
        )?,
        OP_TOLERANCE,
    );

    let pair_cfg = SwinConfig {
        heads: 2,
        ..SwinConfig::new(8, 2)
    };
    let x = random(&mut rng, &[1, 8, 4, 4], -1.0, 1.0);
    push(
        "swin_pair",
        module_check(&mut rng, seed, x, |b| SwinPair::build(b, pair_cfg), |p, g, x| p.forward(g, x))?,
        OP_TOLERANCE,
    );

    let x = random(&mut rng, &[1, 5, 4, 4], -1.0, 1.0);
    for (name, axis) in [("axial_shift_height", ShiftAxis::Height), ("axial_shift_width", ShiftAxis::Width)] {
        let spec = AxialShiftSpec::new(5, axis)?;
        push(
            name,
            grad_check(|v| v[0].axial_shift(&spec), std::slice::from_ref(&x), seed)?,
            OP_TOLERANCE,
        );
    }

    let x = random(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
    push(
        "parallel_conv",
        module_check(&mut rng, seed, x, |b| ParallelConv::build(b, 3), |p, g, x| p.forward(g, x))?,
        OP_TOLERANCE,
    );

    let pcfg = PcasConfig {
        dim: 6,
        shift_size: 3,
        expand_ratio: 2,
        parallel_conv: true,
    };
    let x = random(&mut rng, &[1, 6, 5, 5], -1.0, 1.0);
    push(
        "pcas_block",
        module_check(&mut rng, seed, x, |b| PcasBlock::build(b, pcfg), |p, g, x| p.forward(g, x))?,
        OP_TOLERANCE,
    );

    let logits = random(&mut rng, &[2, 1, 3, 3], -2.0, 2.0);
    let target = Tensor::new(
        &[2, 1, 3, 3],
        (0..18).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect(),
    )?;
    push(
        "bce_dice_loss",
        grad_check(|v| v[0].bce_dice_loss(&target), &[logits], seed)?,
        OP_TOLERANCE,
    );

    push("model_end_to_end", model_spot_check(&mut rng, seed)?, MODEL_TOLERANCE);
    Ok(out)
}

/// Loss gradient of the tiny configuration, at its seeded initialization,
/// for randomly sampled parameter elements.
fn model_spot_check(rng: &mut SeededRng, seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::tiny()
    };
    let (h, w) = cfg.input_size;
    let model = StmUNet::<f64>::build(cfg)?;
    let x = random(rng, &[1, 3, h, w], 0.0, 1.0);
    let target = Tensor::new(
        &[1, 1, h, w],
        (0..h * w).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect(),
    )?;
    let mut inputs = vec![x];
    inputs.extend(model.params().iter().map(|p| p.value.clone()));
    let opts = GradCheckOptions {
        seed,
        inputs: Some((1..inputs.len()).collect()),
        sample: Some(MODEL_SAMPLES),
        resolve_to: Some(MODEL_TOLERANCE),
        ..GradCheckOptions::default()
    };
    grad_check_with(
        |v| {
            let g = Graph::from_vars(v[0].tape(), v[1..].to_vec());
            model.forward(&g, v[0])?.bce_dice_loss(&target)
        },
        &inputs,
        &opts,
    )
}
