//! Brute-force reference implementations shared by the integration tests.
//!
//! Everything here is written directly from the operator definitions, in
//! f64, with the plainest loops possible. Nothing calls into the library's
//! kernels, so agreement between the two is evidence rather than tautology.
#![allow(dead_code, clippy::too_many_arguments, clippy::needless_range_loop)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unet_edge::model::{UNetConfig, UpsampleMode};
use unet_edge::storage::WeightStore;
use unet_edge::Tensor;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// Dense NCHW activation in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Nchw {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Nchw {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Nchw {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Nchw {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            data: t.dequantize().as_f32().unwrap().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = ((n * self.c + c) * self.h + y) * self.w + x;
        &mut self.data[i]
    }
}

/// Direct 2D cross-correlation. `w` is `[o][c][kh][kw]`. With `same`, the
/// output is `ceil(in / stride)` and any odd leftover padding goes at the
/// bottom/right.
pub fn conv2d(x: &Nchw, w: &[f64], o: usize, kh: usize, kw: usize, stride: usize, same: bool, bias: &[f64]) -> Nchw {
    let (oh, ow, pt, pl) = if same {
        let oh = x.h.div_ceil(stride);
        let ow = x.w.div_ceil(stride);
        let ph = ((oh - 1) * stride + kh).saturating_sub(x.h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(x.w);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((x.h - kh) / stride + 1, (x.w - kw) / stride + 1, 0, 0)
    };
    let mut y = Nchw::zeros(x.n, o, oh, ow);
    for n in 0..x.n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..x.c {
                        for a in 0..kh {
                            for b in 0..kw {
                                let yy = (i * stride + a) as isize - pt as isize;
                                let xx = (j * stride + b) as isize - pl as isize;
                                if yy < 0 || xx < 0 || yy >= x.h as isize || xx >= x.w as isize {
                                    continue;
                                }
                                acc += x.at(n, ic, yy as usize, xx as usize)
                                    * w[((oc * x.c + ic) * kh + a) * kw + b];
                            }
                        }
                    }
                    *y.at_mut(n, oc, i, j) = acc;
                }
            }
        }
    }
    y
}

/// 2x2 stride-2 transposed convolution written as a scatter: every input
/// pixel adds `x * w[o][c]` onto its 2x2 output block.
pub fn tconv2(x: &Nchw, w: &[f64], o: usize, bias: &[f64]) -> Nchw {
    let mut y = Nchw::zeros(x.n, o, 2 * x.h, 2 * x.w);
    for n in 0..x.n {
        for oc in 0..o {
            for i in 0..2 * x.h {
                for j in 0..2 * x.w {
                    *y.at_mut(n, oc, i, j) = bias[oc];
                }
            }
        }
        for ic in 0..x.c {
            for i in 0..x.h {
                for j in 0..x.w {
                    let v = x.at(n, ic, i, j);
                    for oc in 0..o {
                        for a in 0..2 {
                            for b in 0..2 {
                                *y.at_mut(n, oc, 2 * i + a, 2 * j + b) += v * w[((oc * x.c + ic) * 2 + a) * 2 + b];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn maxpool2(x: &Nchw) -> Nchw {
    let mut y = Nchw::zeros(x.n, x.c, x.h / 2, x.w / 2);
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..x.h / 2 {
                for j in 0..x.w / 2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, b)| x.at(n, c, 2 * i + a, 2 * j + b))
                        .fold(f64::NEG_INFINITY, f64::max);
                    *y.at_mut(n, c, i, j) = m;
                }
            }
        }
    }
    y
}

pub fn upsample2(x: &Nchw) -> Nchw {
    let mut y = Nchw::zeros(x.n, x.c, 2 * x.h, 2 * x.w);
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..2 * x.h {
                for j in 0..2 * x.w {
                    *y.at_mut(n, c, i, j) = x.at(n, c, i / 2, j / 2);
                }
            }
        }
    }
    y
}

pub fn concat(a: &Nchw, b: &Nchw) -> Nchw {
    let mut y = Nchw::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        for c in 0..a.c + b.c {
            for i in 0..a.h {
                for j in 0..a.w {
                    *y.at_mut(n, c, i, j) = if c < a.c { a.at(n, c, i, j) } else { b.at(n, c - a.c, i, j) };
                }
            }
        }
    }
    y
}

pub fn relu(mut x: Nchw) -> Nchw {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn weights(store: &WeightStore, name: &str) -> Vec<f64> {
    let t = store.get(name).unwrap_or_else(|| panic!("fixture lacks {name}"));
    t.to_f32_tensor(name)
        .unwrap()
        .as_f32()
        .unwrap()
        .iter()
        .map(|&v| v as f64)
        .collect()
}

/// Whole-network forward from the architecture description: per encoder
/// block conv+ReLU twice, keep the skip, pool; two middle convs; per decoder
/// block a linear up-step, concat `[up, skip]`, conv+ReLU twice; 1x1 head;
/// logistic output.
pub fn unet_forward(cfg: &UNetConfig, store: &WeightStore, x: &Nchw) -> Nchw {
    let width = |d: usize| cfg.base_channels << d;
    let conv3 = |name: &str, h: &Nchw, o: usize| {
        relu(conv2d(
            h,
            &weights(store, &format!("{name}.weight")),
            o,
            3,
            3,
            1,
            true,
            &weights(store, &format!("{name}.bias")),
        ))
    };
    let mut h = x.clone();
    let mut skips = Vec::new();
    for b in 0..cfg.blocks {
        h = conv3(&format!("enc{b}.conv0"), &h, width(b));
        h = conv3(&format!("enc{b}.conv1"), &h, width(b));
        skips.push(h.clone());
        h = maxpool2(&h);
    }
    h = conv3("mid.conv0", &h, width(cfg.blocks));
    h = conv3("mid.conv1", &h, width(cfg.blocks));
    for b in (0..cfg.blocks).rev() {
        let w = weights(store, &format!("dec{b}.up.weight"));
        let bias = weights(store, &format!("dec{b}.up.bias"));
        h = match cfg.upsample {
            UpsampleMode::TransposedConv => tconv2(&h, &w, width(b), &bias),
            UpsampleMode::NnUpsampleConv => conv2d(&upsample2(&h), &w, width(b), 2, 2, 1, true, &bias),
        };
        h = concat(&h, &skips[b]);
        h = conv3(&format!("dec{b}.conv0"), &h, width(b));
        h = conv3(&format!("dec{b}.conv1"), &h, width(b));
    }
    let mut y = conv2d(
        &h,
        &weights(store, "final.conv.weight"),
        cfg.out_channels,
        1,
        1,
        1,
        true,
        &weights(store, "final.conv.bias"),
    );
    y.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
    y
}

/// One weighted layer in the closed-form cost model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    /// "enc", "mid", "dec" or "final".
    pub path: &'static str,
    pub params: u64,
    pub macs: u64,
}

/// Cost of every weighted layer straight from the block rule: kernel `k`
/// mapping `i -> o` channels at output size `s x s` costs `(i*k*k + 1) * o`
/// parameters and `i*k*k*o*s*s` MACs.
pub fn closed_form_costs(blocks: u32, base: u64, cin: u64, cout: u64, size: u64) -> Vec<CostRow> {
    let row = |path, i: u64, o: u64, k: u64, s: u64| CostRow {
        path,
        params: (i * k * k + 1) * o,
        macs: i * k * k * o * s * s,
    };
    let wd = |d: u32| base * 2u64.pow(d);
    let sz = |d: u32| size / 2u64.pow(d);
    let mut rows = Vec::new();
    for b in 0..blocks {
        let i = if b == 0 { cin } else { wd(b - 1) };
        rows.push(row("enc", i, wd(b), 3, sz(b)));
        rows.push(row("enc", wd(b), wd(b), 3, sz(b)));
    }
    rows.push(row("mid", wd(blocks - 1), wd(blocks), 3, sz(blocks)));
    rows.push(row("mid", wd(blocks), wd(blocks), 3, sz(blocks)));
    for b in (0..blocks).rev() {
        rows.push(row("dec", wd(b + 1), wd(b), 2, sz(b)));
        rows.push(row("dec", 2 * wd(b), wd(b), 3, sz(b)));
        rows.push(row("dec", wd(b), wd(b), 3, sz(b)));
    }
    rows.push(row("final", wd(0), cout, 1, size));
    rows
}

pub fn closed_form_totals(blocks: u32, base: u64) -> (u64, u64) {
    let rows = closed_form_costs(blocks, base, 3, 1, 256);
    (rows.iter().map(|r| r.params).sum(), rows.iter().map(|r| r.macs).sum())
}

/// Fraction of the total taken by the encoder and middle rows.
pub fn closed_form_encoder_middle_share(rows: &[CostRow], value: impl Fn(&CostRow) -> u64) -> f64 {
    let total: u64 = rows.iter().map(&value).sum();
    let part: u64 = rows
        .iter()
        .filter(|r| r.path == "enc" || r.path == "mid")
        .map(&value)
        .sum();
    part as f64 / total as f64
}

/// Confusion counts `(tp, fp, fn, tn)` by direct counting.
pub fn confusion(pred: &[u8], gt: &[u8]) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.0 += 1,
            (1, 0) => c.1 += 1,
            (0, 1) => c.2 += 1,
            _ => c.3 += 1,
        }
    }
    c
}

/// Tile-averaged raster: every pixel is the mean of the tile values that
/// cover it, found by scanning all tiles.
pub fn stitch_by_coverage(
    h: usize,
    w: usize,
    tile: usize,
    origins: &[(usize, usize)],
    maps: &[Vec<f32>],
) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut n = 0;
            for (k, &(oy, ox)) in origins.iter().enumerate() {
                if (oy..oy + tile).contains(&y) && (ox..ox + tile).contains(&x) {
                    sum += maps[k][(y - oy) * tile + (x - ox)] as f64;
                    n += 1;
                }
            }
            assert!(n > 0, "pixel ({y}, {x}) not covered");
            out[y * w + x] = sum / n as f64;
        }
    }
    out
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_f32(vec![n, c, h, w], uniform(rng, n * c * h * w, -1.0, 1.0)).unwrap()
}

/// Random small convolution instance checked against [`conv2d`]; returns the
/// max abs difference.
pub fn check_random_conv(rng: &mut ChaCha8Rng) -> f64 {
    use unet_edge::ops::{self, ConvSpec, Padding};
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=4);
    let o = rng.gen_range(1..=4);
    let k = [1, 2, 3, 5][rng.gen_range(0..4)];
    let stride = rng.gen_range(1..=2);
    let same = rng.gen_bool(0.5);
    let h = rng.gen_range(k..=k + 7);
    let w = rng.gen_range(k..=k + 7);
    let x = random_input(rng, n, c, h, w);
    let wt = uniform(rng, o * c * k * k, -1.0, 1.0);
    let bias = uniform(rng, o, -0.5, 0.5);
    let spec = ConvSpec {
        in_channels: c,
        out_channels: o,
        kernel: (k, k),
        stride,
        padding: if same { Padding::Same } else { Padding::Valid },
        bias: bias.clone(),
    };
    let w_t = Tensor::from_f32(vec![o, c, k, k], wt.clone()).unwrap();
    let got = ops::conv2d(&x, &w_t, &spec).unwrap();
    let want = conv2d(&Nchw::from_tensor(&x), &f64s(&wt), o, k, k, stride, same, &f64s(&bias));
    assert_eq!(got.shape(), &[want.n, want.c, want.h, want.w]);
    max_abs_diff(got.as_f32().unwrap(), &want.data)
}

pub fn check_random_tconv(rng: &mut ChaCha8Rng) -> f64 {
    use unet_edge::ops::{self, ConvSpec};
    let (n, c, o) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let x = random_input(rng, n, c, h, w);
    let wt = uniform(rng, o * c * 4, -1.0, 1.0);
    let bias = uniform(rng, o, -0.5, 0.5);
    let w_t = Tensor::from_f32(vec![o, c, 2, 2], wt.clone()).unwrap();
    let got = ops::tconv2d(&x, &w_t, &ConvSpec::up2(c, o, bias.clone())).unwrap();
    let want = tconv2(&Nchw::from_tensor(&x), &f64s(&wt), o, &f64s(&bias));
    assert_eq!(got.shape(), &[n, o, 2 * h, 2 * w]);
    max_abs_diff(got.as_f32().unwrap(), &want.data)
}

pub fn check_random_pool(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
    let (h, w) = (2 * rng.gen_range(1..=5), 2 * rng.gen_range(1..=5));
    let x = random_input(rng, n, c, h, w);
    let got = unet_edge::ops::maxpool2(&x).unwrap();
    max_abs_diff(got.as_f32().unwrap(), &maxpool2(&Nchw::from_tensor(&x)).data)
}

pub fn check_random_upsample(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
    let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let x = random_input(rng, n, c, h, w);
    let got = unet_edge::ops::nn_upsample2(&x).unwrap();
    max_abs_diff(got.as_f32().unwrap(), &upsample2(&Nchw::from_tensor(&x)).data)
}

/// Quantized conv (or 2x2 transposed conv) on random int8 operands. Returns
/// the largest deviation from the float oracle on the dequantized operands,
/// in units of the output quantization step.
pub fn check_random_quantized(rng: &mut ChaCha8Rng, transposed: bool) -> f64 {
    use unet_edge::ops::{self, ConvSpec};
    use unet_edge::tensor::{quantize, QuantParams};
    let (c, o) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
    let k = if transposed { 2 } else { 3 };
    let fuse_relu = rng.gen_bool(0.5);
    let lo = rng.gen_range(-1.0..0.0f32);
    let hi = rng.gen_range(0.5..2.0f32);
    let x = Tensor::from_f32(vec![1, c, h, w], uniform(rng, c * h * w, lo, hi)).unwrap();
    let px = QuantParams::affine_for_range(8, lo, hi, true).unwrap();
    let xq = quantize(&x, &px).unwrap();
    let wt = Tensor::from_f32(vec![o, c, k, k], uniform(rng, o * c * k * k, -0.5, 0.5)).unwrap();
    let max_w = wt.as_f32().unwrap().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let wq = quantize(&wt, &QuantParams::symmetric_for_range(8, max_w).unwrap()).unwrap();
    let bias = uniform(rng, o, -0.2, 0.2);

    let xd = Nchw::from_tensor(&xq);
    let wd = f64s(wq.dequantize().as_f32().unwrap());
    let mut want = if transposed {
        tconv2(&xd, &wd, o, &f64s(&bias))
    } else {
        conv2d(&xd, &wd, o, 3, 3, 1, true, &f64s(&bias))
    };
    if fuse_relu {
        want = relu(want);
    }
    let (mn, mx) = want
        .data
        .iter()
        .fold((0.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let py = QuantParams::affine_for_range(8, mn as f32, mx as f32, true).unwrap();
    let got = if transposed {
        ops::tconv2d_quantized(&xq, &wq, &ConvSpec::up2(c, o, bias), &py, fuse_relu).unwrap()
    } else {
        ops::conv2d_quantized(&xq, &wq, &ConvSpec::same(c, o, 3, bias), &py, fuse_relu).unwrap()
    };
    max_abs_diff(got.dequantize().as_f32().unwrap(), &want.data) / py.scale as f64
}
