//! Kernels against naive loop oracles on random small instances.

use stm_unet::nn::{bilinear_upsample, conv2d, depthwise_conv2d, layer_norm, linear, maxpool2d, Conv2dParams, LayerNormParams};
use stm_unet::params::{Graph, ParamBuilder, ParamStore};
use stm_unet::pcas::{axial_shift, AxialShiftSpec, ParallelConv, ShiftAxis};
use stm_unet::rng::{SeededRng, Stream};
use stm_unet::swin::{window_partition, window_reverse};
use stm_unet::{Tape, Tensor};

const INSTANCES: u64 = 50;

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn between(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, kh, kw] = w.shape().try_into().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = Vec::with_capacity(n * co * ho * wo);
    for b_ in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b_ * ci + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * ci + c) * kh + ky) * kw + kx;
                                acc += xd[xi] * wdat[wi];
                            }
                        }
                    }
                    out.push(acc + b.map_or(0.0, |b| b.data()[o]));
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out).unwrap()
}

fn depthwise_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let k = w.shape()[2];
    let pad = (k / 2) as isize;
    let mut out = Vec::with_capacity(x.numel());
    for b_ in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.data()[(ch * k + ky) * k + kx]
                                * x.data()[((b_ * c + ch) * h + iy as usize) * wd + ix as usize];
                        }
                    }
                    out.push(acc + b.data()[ch]);
                }
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

#[test]
fn conv2d_matches_six_loop_oracle() {
    let mut rng = SeededRng::new(11, Stream::Test);
    for _ in 0..INSTANCES {
        let k = [1, 3, 5][rng.below(3)];
        let stride = between(&mut rng, 1, 2);
        let pad = between(&mut rng, 0, k / 2);
        let (n, ci, co) = (between(&mut rng, 1, 2), between(&mut rng, 1, 4), between(&mut rng, 1, 4));
        let (h, w) = (between(&mut rng, k, 8), between(&mut rng, k, 8));
        let x = random(&mut rng, &[n, ci, h, w]);
        let weight = random(&mut rng, &[co, ci, k, k]);
        let bias = rng.bernoulli(0.5).then(|| random(&mut rng, &[co]));
        let expected = conv_oracle(&x, &weight, bias.as_ref(), stride, pad);
        let got = conv2d(
            &x,
            &Conv2dParams {
                weight,
                bias,
                stride,
                padding: pad,
            },
        )
        .unwrap();
        assert_eq!(got, expected, "k={k} stride={stride} pad={pad}");
    }
}

#[test]
fn conv2d_named_instance() {
    let mut rng = SeededRng::new(12, Stream::Test);
    let x = random(&mut rng, &[1, 2, 6, 6]);
    let weight = random(&mut rng, &[3, 2, 3, 3]);
    let got = conv2d(
        &x,
        &Conv2dParams {
            weight: weight.clone(),
            bias: None,
            stride: 1,
            padding: 1,
        },
    )
    .unwrap();
    assert_eq!(got, conv_oracle(&x, &weight, None, 1, 1));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SeededRng::new(13, Stream::Test);
    for i in 0..INSTANCES {
        let (m, k, p) = (between(&mut rng, 1, 6), between(&mut rng, 1, 6), between(&mut rng, 1, 6));
        let batch = if i == 0 { 1 } else { between(&mut rng, 1, 3) };
        let (m, k, p) = if i == 0 { (3, 4, 5) } else { (m, k, p) };
        let a = random(&mut rng, &[batch, m, k]);
        let b = random(&mut rng, &[batch, k, p]);
        let mut expected = Vec::new();
        for bi in 0..batch {
            for r in 0..m {
                for c in 0..p {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a.data()[(bi * m + r) * k + kk] * b.data()[(bi * k + kk) * p + c];
                    }
                    expected.push(acc);
                }
            }
        }
        assert_eq!(a.matmul(&b).unwrap().data(), &expected[..]);
    }
}

#[test]
fn linear_is_matmul_plus_broadcast_bias() {
    let mut rng = SeededRng::new(14, Stream::Test);
    for _ in 0..INSTANCES {
        let (rows, d_in, d_out) = (between(&mut rng, 1, 5), between(&mut rng, 1, 5), between(&mut rng, 1, 5));
        let x = random(&mut rng, &[rows, d_in]);
        let w = random(&mut rng, &[d_in, d_out]);
        let b = random(&mut rng, &[d_out]);
        let expected = x.matmul(&w).unwrap().add(&b).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap(), expected);
    }
}

#[test]
fn maxpool_matches_block_max() {
    let mut rng = SeededRng::new(15, Stream::Test);
    for _ in 0..INSTANCES {
        let (c, h, w) = (between(&mut rng, 1, 3), 2 * between(&mut rng, 1, 4), 2 * between(&mut rng, 1, 4));
        let x = random(&mut rng, &[1, c, h, w]);
        let got = maxpool2d(&x).unwrap();
        let mut expected = Vec::new();
        for ch in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let at = |dy: usize, dx: usize| x.data()[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                    expected.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                }
            }
        }
        assert_eq!(got.data(), &expected[..]);
    }
}

fn source_coord(d: usize, size: usize) -> (usize, usize, f64) {
    let s = ((d as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (size - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(size - 1);
    (lo, hi, s - lo as f64)
}

#[test]
fn bilinear_upsample_matches_per_pixel_formula() {
    let mut rng = SeededRng::new(16, Stream::Test);
    for i in 0..INSTANCES {
        let (h, w) = if i == 0 { (3, 3) } else { (between(&mut rng, 1, 5), between(&mut rng, 1, 5)) };
        let x = random(&mut rng, &[1, 1, h, w]);
        let got = bilinear_upsample(&x).unwrap();
        assert_eq!(got.shape(), &[1, 1, 2 * h, 2 * w]);
        let at = |y: usize, xx: usize| x.data()[y * w + xx];
        for oy in 0..2 * h {
            let (y0, y1, fy) = source_coord(oy, h);
            for ox in 0..2 * w {
                let (x0, x1, fx) = source_coord(ox, w);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                let expected = top * (1.0 - fy) + bottom * fy;
                assert!((got.data()[oy * 2 * w + ox] - expected).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn layer_norm_matches_population_formula() {
    let mut rng = SeededRng::new(17, Stream::Test);
    for _ in 0..INSTANCES {
        let (rows, width) = (between(&mut rng, 1, 4), between(&mut rng, 2, 7));
        let x = random(&mut rng, &[rows, width]);
        let gamma = random(&mut rng, &[width]);
        let beta = random(&mut rng, &[width]);
        let eps = 1e-5;
        let got = layer_norm(
            &x,
            &LayerNormParams {
                gamma: gamma.clone(),
                beta: beta.clone(),
                epsilon: eps,
            },
        )
        .unwrap();
        for r in 0..rows {
            let row = &x.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            for (j, v) in row.iter().enumerate() {
                let expected = (v - mean) / (var + eps).sqrt() * gamma.data()[j] + beta.data()[j];
                assert!((got.data()[r * width + j] - expected).abs() < 1e-12);
            }
        }
    }
}

/// Group sizes and strides computed directly from the channel count.
fn group_strides(c: usize, s: usize) -> Vec<isize> {
    let half = (s / 2) as isize;
    let mut out = Vec::with_capacity(c);
    for g in 0..s {
        let len = c / s + usize::from(g < c % s);
        out.extend(std::iter::repeat_n(g as isize - half, len));
    }
    out
}

fn shift_oracle(x: &Tensor<f64>, s: usize, axis: ShiftAxis) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let strides = group_strides(c, s);
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let (sy, sx) = match axis {
                        ShiftAxis::Height => (y as isize - strides[ch], xx as isize),
                        ShiftAxis::Width => (y as isize, xx as isize - strides[ch]),
                    };
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        out[((b * c + ch) * h + y) * w + xx] = x.data()[((b * c + ch) * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

#[test]
fn axial_shift_matches_index_oracle() {
    let mut rng = SeededRng::new(18, Stream::Test);
    for _ in 0..INSTANCES {
        let s = [1, 3, 5, 7][rng.below(4)];
        let c = between(&mut rng, s, s + 9);
        let shape = [between(&mut rng, 1, 2), c, between(&mut rng, 1, 7), between(&mut rng, 1, 7)];
        let x = random(&mut rng, &shape);
        for axis in [ShiftAxis::Height, ShiftAxis::Width] {
            let spec = AxialShiftSpec::new(s, axis).unwrap();
            assert_eq!(axial_shift(&x, &spec).unwrap(), shift_oracle(&x, s, axis), "s={s} c={c} {axis:?}");
        }
    }
}

#[test]
fn five_group_stride_pattern() {
    let spec = AxialShiftSpec::new(5, ShiftAxis::Width).unwrap();
    assert_eq!(spec.strides(), vec![-2, -1, 0, 1, 2]);
    // channel g holds one row [1, 2, 3, 4, 5]
    let x = Tensor::<f64>::new(&[1, 5, 1, 5], (0..25).map(|i| (i % 5 + 1) as f64).collect()).unwrap();
    let y = axial_shift(&x, &spec).unwrap();
    let expected: [[f64; 5]; 5] = [
        [3.0, 4.0, 5.0, 0.0, 0.0],
        [2.0, 3.0, 4.0, 5.0, 0.0],
        [1.0, 2.0, 3.0, 4.0, 5.0],
        [0.0, 1.0, 2.0, 3.0, 4.0],
        [0.0, 0.0, 1.0, 2.0, 3.0],
    ];
    assert_eq!(y.data(), expected.concat());
}

#[test]
fn three_group_hand_example() {
    let x = Tensor::<f64>::new(&[1, 3, 1, 3], (1..=9).map(f64::from).collect()).unwrap();
    let y = axial_shift(&x, &AxialShiftSpec::new(3, ShiftAxis::Width).unwrap()).unwrap();
    assert_eq!(y.data(), &[2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 0.0, 7.0, 8.0]);
}

#[test]
fn window_partition_matches_index_oracle_and_roundtrips() {
    let mut rng = SeededRng::new(19, Stream::Test);
    for i in 0..INSTANCES {
        let m = if i == 0 { 4 } else { between(&mut rng, 1, 4) };
        let (gh, gw) = if i == 0 { (2, 2) } else { (between(&mut rng, 1, 3), between(&mut rng, 1, 3)) };
        let (n, c) = (between(&mut rng, 1, 2), between(&mut rng, 1, 3));
        let (h, w) = (gh * m, gw * m);
        let x = random(&mut rng, &[n, h, w, c]);
        let win = window_partition(&x, m).unwrap();
        assert_eq!(win.shape(), &[n * gh * gw, m * m, c]);
        for b in 0..n {
            for ty in 0..gh {
                for tx in 0..gw {
                    for iy in 0..m {
                        for ix in 0..m {
                            for ch in 0..c {
                                let wi = (((b * gh + ty) * gw + tx) * m * m + iy * m + ix) * c + ch;
                                let xi = ((b * h + ty * m + iy) * w + tx * m + ix) * c + ch;
                                assert_eq!(win.data()[wi].to_bits(), x.data()[xi].to_bits());
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(window_reverse(&win, m, h, w).unwrap(), x);
    }
}

#[test]
fn token_two_three_lands_in_window_three_position_one() {
    let x = Tensor::<f64>::new(&[1, 4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
    let win = window_partition(&x, 2).unwrap();
    assert_eq!(win.data()[3 * 4 + 1], (2 * 4 + 3) as f64);
}

#[test]
fn parallel_conv_is_sum_of_three_depthwise_convs() {
    let mut rng = SeededRng::new(20, Stream::Test);
    for seed in 0..INSTANCES {
        let c = between(&mut rng, 1, 4);
        let shape = [between(&mut rng, 1, 2), c, between(&mut rng, 1, 7), between(&mut rng, 1, 7)];
        let x = random(&mut rng, &shape);
        let mut store = ParamStore::<f64>::new();
        let mut init = SeededRng::new(seed, Stream::Init);
        let module = ParallelConv::build(&mut ParamBuilder::new(&mut store, &mut init), c).unwrap();
        for p in store.iter_mut() {
            p.value = random(&mut rng, p.value.shape());
        }
        let tape = Tape::inference();
        let g = store.bind(&tape);
        let got = module.forward(&g, g.input(x.clone())).unwrap().value();

        let branch = |i: usize| {
            let b = &module.branches[i];
            depthwise_oracle(&x, &store.get(b.weight).value, &store.get(b.bias).value)
        };
        let expected = branch(0).add(&branch(1)).unwrap().add(&branch(2)).unwrap();
        assert_eq!(*got, expected);

        let b = &module.branches[1];
        let direct = depthwise_conv2d(&x, &store.get(b.weight).value, Some(&store.get(b.bias).value)).unwrap();
        assert_eq!(direct, branch(1));
    }
}

#[test]
fn graph_binding_matches_plain_ops() {
    let mut rng = SeededRng::new(21, Stream::Test);
    let x = random(&mut rng, &[1, 2, 4, 4]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let tape = Tape::inference();
    let g = Graph::from_vars(&tape, vec![tape.leaf(w.clone())]);
    let y = g.input(x.clone()).conv2d(g.vars()[0], None, 1, 1).unwrap();
    assert_eq!(*y.value(), conv_oracle(&x, &w, None, 1, 1));
}
