#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seistile::data::{
    generate_synthetic_volume, preprocess_rescale, split_blocks, tile_volume, MaskVolume, Split, SplitConfig,
    SynthConfig, TileConfig, TileSet, Volume,
};
use seistile::nn::{
    residual_unit, same_padding, transposed_residual_unit, BatchNorm, Direction, ForwardCtx, Parameterized,
    ResidualUnit,
};
use seistile::tensor::{grad_check, Tape, Tensor, Var};
use seistile::topology::{preset, Model, TopologySpec};
use seistile::train::{
    batch_tensors, pixel_accuracy, train, train_step, OptimizerConfig, RmsProp, TrainConfig, TrainOutcome, Validation,
};
use seistile::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Small integers, so every sum is exact in f64.
pub fn integer_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-4i32..=4) as f64)
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let weights = random_tensor(&mut r, tape.value(y).shape());
    let w = tape.constant(weights);
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

/// Direct six-loop convolution with half padding. `w` is `Kh x Kw x Cin x Cout`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [n, h, wd, cin] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [kh, kw, _, cout] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let (ho, pt) = same_padding(h, kh, stride);
    let (wo, pl) = same_padding(wd, kw, stride);
    let mut out = vec![0.0; n * ho * wo * cout];
    for b_ in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                for co in 0..cout {
                    let mut acc = b[co];
                    for di in 0..kh {
                        for dj in 0..kw {
                            let r = (i * stride + di) as isize - pt as isize;
                            let c = (j * stride + dj) as isize - pl as isize;
                            if r < 0 || c < 0 || r >= h as isize || c >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.data()[((b_ * h + r as usize) * wd + c as usize) * cin + ci]
                                    * w.data()[((di * kw + dj) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((b_ * ho + i) * wo + j) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, ho, wo, cout], out).unwrap()
}

/// Scatter form of the transposed convolution. `w` is `Kh x Kw x Cout x Cin`
/// (the forward kernel from the `Cout`-channel output back to `Cin`).
pub fn naive_conv_transposed(y: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [n, h, wd, cin] = <[usize; 4]>::try_from(y.shape()).unwrap();
    let [kh, kw, cout, _] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let (ho, wo) = (h * stride, wd * stride);
    let (_, pt) = same_padding(ho, kh, stride);
    let (_, pl) = same_padding(wo, kw, stride);
    let mut out = vec![0.0; n * ho * wo * cout];
    for b_ in 0..n {
        for i in 0..h {
            for j in 0..wd {
                for di in 0..kh {
                    for dj in 0..kw {
                        let r = (i * stride + di) as isize - pt as isize;
                        let c = (j * stride + dj) as isize - pl as isize;
                        if r < 0 || c < 0 || r >= ho as isize || c >= wo as isize {
                            continue;
                        }
                        for co in 0..cout {
                            for ci in 0..cin {
                                out[((b_ * ho + r as usize) * wo + c as usize) * cout + co] += y.data()
                                    [((b_ * h + i) * wd + j) * cin + ci]
                                    * w.data()[((di * kw + dj) * cout + co) * cin + ci];
                            }
                        }
                    }
                }
            }
        }
    }
    for px in out.chunks_exact_mut(cout) {
        px.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
    }
    Tensor::new(&[n, ho, wo, cout], out).unwrap()
}

/// danet-fcn2 with hidden widths divided by 8.
pub fn reduced_fcn2() -> TopologySpec {
    preset("danet-fcn2").unwrap().with_width_divisor(8, 4)
}

/// Desk-scale data: a 24 x 160 x 240 synthetic survey, rescaled, split
/// into 5 blocks with one training slice each and 6 test slices.
pub struct DeskData {
    pub volume: Volume,
    pub masks: MaskVolume,
    pub split: Split,
    pub train_tiles: TileSet,
}

pub const DESK_SEED: u64 = 7;

pub fn desk_data(seed: u64) -> DeskData {
    let synth = SynthConfig {
        slices: 24,
        height: 160,
        width: 240,
        num_classes: 7,
        ..Default::default()
    };
    let (raw, masks) = generate_synthetic_volume(&synth, seed).unwrap();
    let volume = preprocess_rescale(&raw, 1.0, 99.0).unwrap();
    let split_cfg = SplitConfig {
        n_blocks: 5,
        slice_limit: Some(5),
        test_count: 6,
        ..Default::default()
    };
    let split = split_blocks(volume.slices(), &split_cfg, seed).unwrap();
    let train_tiles = tile_volume(&volume, &masks, &split.train, &TileConfig::new(80, 120, 0.5)).unwrap();
    DeskData {
        volume,
        masks,
        split,
        train_tiles,
    }
}

pub fn desk_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_epochs: epochs,
        ..Default::default()
    }
}

/// Trains the reduced danet-fcn2 on the desk data.
pub fn desk_train(data: &DeskData, epochs: usize, seed: u64) -> TrainOutcome<f32> {
    let mut model = Model::<f32>::build(&reduced_fcn2(), seed).unwrap();
    model.set_bn_momentum(0.9).unwrap();
    let val = Validation {
        volume: &data.volume,
        masks: &data.masks,
        slices: &data.split.val,
        tile_h: 80,
        tile_w: 120,
    };
    train(
        model,
        &data.train_tiles,
        &val,
        &desk_train_config(epochs),
        &OptimizerConfig::default(),
        seed,
    )
    .unwrap()
}

/// Worst relative error between tape and central-difference gradients of
/// `weighted_sum(layer(x))` over every parameter of `layer`.
fn layer_param_error<L, F>(layer: &mut L, x: &Tensor<f64>, seed: u64, forward: F) -> f64
where
    L: Parameterized<f64>,
    F: Fn(&L, &mut Tape<f64>, Var, &mut ForwardCtx<f64>) -> Result<Var>,
{
    let loss = |layer: &L| -> (f64, Tape<f64>, Vec<Var>) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::train();
        let y = forward(layer, &mut tape, xv, &mut ctx).unwrap();
        let l = weighted_sum(&mut tape, y, seed).unwrap();
        (tape.value(l)[0], tape, std::iter::once(l).chain(ctx.params).collect())
    };
    let (_, mut tape, vars) = loss(layer);
    tape.backward(vars[0]).unwrap();
    let analytic: Vec<Vec<f64>> = vars[1..].iter().map(|&v| tape.grad(v).unwrap().into_data()).collect();
    let step = 1e-6;
    let mut worst = 0f64;
    for (p, grad) in analytic.iter().enumerate() {
        for (i, &analytic) in grad.iter().enumerate() {
            let nudge = |layer: &mut L, delta: f64| {
                let mut ps = Vec::new();
                layer.params_mut("", &mut ps);
                ps[p].tensor.data_mut()[i] += delta;
            };
            nudge(layer, step);
            let plus = loss(layer).0;
            nudge(layer, -2.0 * step);
            let minus = loss(layer).0;
            nudge(layer, step);
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        }
    }
    worst
}

fn input_error(x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> f64 {
    grad_check(f, x, 1e-6).unwrap().max_relative_error
}

/// Gradient checks for every differentiable op, one set per seed.
pub fn gradient_cases(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut cases = Vec::new();
    for stride in [1, 2] {
        let x = random_tensor(&mut r, &[2, 4, 6, 2]);
        let w = random_tensor(&mut r, &[3, 3, 2, 3]);
        let b = random_tensor(&mut r, &[3]);
        let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
        cases.push((
            "conv/input",
            input_error(&x, |t, v| {
                let (k, bb) = (t.constant(wc.clone()), t.constant(bc.clone()));
                let y = t.conv2d(v, k, bb, stride)?;
                weighted_sum(t, y, seed)
            }),
        ));
        cases.push((
            "conv/kernel",
            input_error(&w, |t, v| {
                let (xx, bb) = (t.constant(xc.clone()), t.constant(bc.clone()));
                let y = t.conv2d(xx, v, bb, stride)?;
                weighted_sum(t, y, seed)
            }),
        ));

        let y = random_tensor(&mut r, &[2, 3, 2, 3]);
        let wt = random_tensor(&mut r, &[3, 3, 2, 3]);
        let bt = random_tensor(&mut r, &[2]);
        let (yc, wtc, btc) = (y.clone(), wt.clone(), bt.clone());
        cases.push((
            "tconv/input",
            input_error(&y, |t, v| {
                let (k, bb) = (t.constant(wtc.clone()), t.constant(btc.clone()));
                let o = t.conv2d_transposed(v, k, bb, stride)?;
                weighted_sum(t, o, seed)
            }),
        ));
        cases.push((
            "tconv/kernel",
            input_error(&wt, |t, v| {
                let (yy, bb) = (t.constant(yc.clone()), t.constant(btc.clone()));
                let o = t.conv2d_transposed(yy, v, bb, stride)?;
                weighted_sum(t, o, seed)
            }),
        ));
        cases.push((
            "tconv/bias",
            input_error(&bt, |t, v| {
                let (yy, k) = (t.constant(yc.clone()), t.constant(wtc.clone()));
                let o = t.conv2d_transposed(yy, k, v, stride)?;
                weighted_sum(t, o, seed)
            }),
        ));
    }

    let x = random_tensor(&mut r, &[2, 3, 3, 4]).map(|v| 3.0 * v + 1.0);
    let mut bn = BatchNorm::<f64>::new(4);
    bn.gamma = random_tensor(&mut r, &[4]);
    bn.beta = random_tensor(&mut r, &[4]);
    let bnc = bn.clone();
    cases.push((
        "bn-train/input",
        input_error(&x, |t, v| {
            let y = bnc.forward(t, v, &mut ForwardCtx::train())?;
            weighted_sum(t, y, seed)
        }),
    ));
    cases.push((
        "bn-train/affine",
        layer_param_error(&mut bn, &x, seed, |l, t, v, c| l.forward(t, v, c)),
    ));

    let mut ru = ResidualUnit::<f64>::new(2, 3, 2, Direction::Forward, &mut r);
    ru.conv1.bias = random_tensor(&mut r, &[3]);
    let x = random_tensor(&mut r, &[2, 4, 4, 2]);
    let ruc = ru.clone();
    cases.push((
        "ru/input",
        input_error(&x, |t, v| {
            let y = residual_unit(t, v, &ruc, &mut ForwardCtx::train())?;
            weighted_sum(t, y, seed)
        }),
    ));
    cases.push((
        "ru/params",
        layer_param_error(&mut ru, &x, seed, |l, t, v, c| residual_unit(t, v, l, c)),
    ));

    let mut tru = ResidualUnit::<f64>::new(3, 2, 2, Direction::Transposed, &mut r);
    let x = random_tensor(&mut r, &[2, 2, 2, 3]);
    let truc = tru.clone();
    cases.push((
        "tru/input",
        input_error(&x, |t, v| {
            let y = transposed_residual_unit(t, v, &truc, &mut ForwardCtx::train())?;
            weighted_sum(t, y, seed)
        }),
    ));
    cases.push((
        "tru/params",
        layer_param_error(&mut tru, &x, seed, |l, t, v, c| transposed_residual_unit(t, v, l, c)),
    ));

    let logits = random_tensor(&mut r, &[2, 3, 2, 7]).map(|v| 4.0 * v);
    let labels: Vec<u8> = (0..12).map(|_| r.random_range(0..7)).collect();
    cases.push((
        "cross-entropy/logits",
        input_error(&logits, |t, v| t.softmax_cross_entropy(v, &labels)),
    ));
    cases
}

/// Four synthetic training tiles.
pub fn probe_tiles(seed: u64) -> TileSet {
    let synth = SynthConfig {
        slices: 2,
        height: 80,
        width: 240,
        num_classes: 7,
        ..Default::default()
    };
    let (raw, masks) = generate_synthetic_volume(&synth, seed).unwrap();
    let volume = preprocess_rescale(&raw, 1.0, 99.0).unwrap();
    tile_volume(&volume, &masks, &[0, 1], &TileConfig::new(80, 120, 0.0)).unwrap()
}

/// Repeated steps on one fixed batch. Returns per-step losses and the
/// final training-mode pixel accuracy.
pub fn overfit_probe(steps: usize, seed: u64) -> (Vec<f64>, f64) {
    let tiles = probe_tiles(seed);
    let mut model = Model::<f32>::build(&reduced_fcn2(), seed).unwrap();
    model.set_bn_momentum(0.9).unwrap();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.len()).collect();
    let mut opt = RmsProp::new(OptimizerConfig::default(), &sizes);
    let idx: Vec<usize> = (0..tiles.len()).collect();
    let (x, labels) = batch_tensors::<f32>(&tiles, &idx).unwrap();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(train_step(&mut model, &mut opt, x.clone(), &labels, 0.01).unwrap());
    }
    (losses, pixel_accuracy(&model, &tiles).unwrap())
}
