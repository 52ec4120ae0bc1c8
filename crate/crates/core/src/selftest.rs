//! Brute-force oracles and the acceptance criteria built on them.
//!
//! [`run_all`] evaluates every criterion and is what `oavm selftest` and the
//! `acceptance` test target print.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::compositing::{composite, merge_alphas, sfm_compose, synth_sequence, AugmentConfig, AugmentDraw};
use crate::config::PipelineConfig;
use crate::correction::{make_guidance, GuidedCorrection, Refiner};
use crate::dataset;
use crate::image::{binarize, Image};
use crate::manifest::Manifest;
use crate::matching::{assignment_cost, solve_assignment};
use crate::metrics::{self, MetricsReport};
use crate::pipeline::{run_sequence, write_outputs, Model, Session};
use crate::pnm::{self, BitDepth};
use crate::rng::Rng;
use crate::temporal::{AttentionConfig, MemoryBank, TemporalAttention};
use crate::tensor::{LinearLayer, Tensor};

/// Reference implementations written as plain loops over scalars.
pub mod oracles {
    use super::*;

    pub fn linear(layer: &LinearLayer, x: &[f64]) -> Vec<f64> {
        let (o, i) = (layer.out_dim(), layer.in_dim());
        let w = layer.weight.data();
        (0..o)
            .map(|r| {
                let mut acc = layer.bias.data()[r];
                for c in 0..i {
                    acc += w[r * i + c] * x[c];
                }
                acc
            })
            .collect()
    }

    pub fn tokens(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    /// Softmax attention where `allowed(i, j)` selects the keys query `i`
    /// may see.
    pub fn attention(
        q: &[Vec<f64>],
        k: &[Vec<f64>],
        v: &[Vec<f64>],
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Vec<Vec<f64>> {
        let d = q[0].len() as f64;
        q.iter()
            .enumerate()
            .map(|(i, qi)| {
                let scores: Vec<Option<f64>> = k
                    .iter()
                    .enumerate()
                    .map(|(j, kj)| {
                        allowed(i, j).then(|| {
                            let mut s = 0.0;
                            for c in 0..qi.len() {
                                s += qi[c] * kj[c];
                            }
                            s / d.sqrt()
                        })
                    })
                    .collect();
                let m = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut num = vec![0.0; v[0].len()];
                let mut den = 0.0;
                for (j, s) in scores.iter().enumerate() {
                    if let Some(s) = s {
                        let e = (s - m).exp();
                        den += e;
                        for c in 0..num.len() {
                            num[c] += e * v[j][c];
                        }
                    }
                }
                num.iter().map(|x| x / den).collect()
            })
            .collect()
    }

    fn project(layer: &LinearLayer, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter().map(|r| linear(layer, r)).collect()
    }

    fn fg_values(ta: &TemporalAttention, feats: &[Vec<f64>], mask: &[f64]) -> Vec<Vec<f64>> {
        feats
            .iter()
            .zip(mask)
            .map(|(f, &s)| {
                let v = linear(&ta.value, f);
                let e = linear(&ta.fg_embed.layer, &[s]);
                v.iter().zip(&e).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    /// Global matching of `current` against a memory built from `memory`
    /// features with soft mask values `mask`.
    pub fn global(ta: &TemporalAttention, current: &Tensor, memory: &Tensor, mask: &[f64]) -> Vec<Vec<f64>> {
        let cur = tokens(&current.clone().flatten_rows());
        let mem = tokens(&memory.clone().flatten_rows());
        attention(
            &project(&ta.query, &cur),
            &project(&ta.key, &mem),
            &fg_values(ta, &mem, mask),
            |_, _| true,
        )
    }

    /// Local matching as global matching with every key outside the
    /// `window × window` square around the query masked out.
    pub fn local(
        ta: &TemporalAttention,
        current: &Tensor,
        memory: &Tensor,
        mask: &[f64],
        window: usize,
    ) -> Vec<Vec<f64>> {
        let w = current.shape()[1];
        let r = (window / 2) as i64;
        let cur = tokens(&current.clone().flatten_rows());
        let mem = tokens(&memory.clone().flatten_rows());
        attention(
            &project(&ta.query, &cur),
            &project(&ta.key, &mem),
            &fg_values(ta, &mem, mask),
            |i, j| {
                let (yi, xi) = ((i / w) as i64, (i % w) as i64);
                let (yj, xj) = ((j / w) as i64, (j % w) as i64);
                (yi - yj).abs() <= r && (xi - xj).abs() <= r
            },
        )
    }

    pub fn pos_embed(y: usize, x: usize, c: usize) -> Vec<f64> {
        let half = c / 2;
        (0..c)
            .map(|ch| {
                let (coord, j) = if ch < half { (y, ch) } else { (x, ch - half) };
                let freq = 10000f64.powf(-((j / 2 * 2) as f64) / half as f64);
                let a = coord as f64 * freq;
                if j % 2 == 0 {
                    a.sin()
                } else {
                    a.cos()
                }
            })
            .collect()
    }

    /// Frame-to-query attention; `guide[p]` is the additive guidance value.
    pub fn fq_attn(gc: &GuidedCorrection, q_fb: &Tensor, pixels: &Tensor, guide: &[f64]) -> Vec<Vec<f64>> {
        let (w, c) = (pixels.shape()[1], pixels.shape()[2]);
        let px = tokens(&pixels.clone().flatten_rows());
        let keys: Vec<Vec<f64>> = px
            .iter()
            .enumerate()
            .map(|(p, f)| {
                let k = linear(&gc.key, f);
                let pe = pos_embed(p / w, p % w, c);
                k.iter().zip(&pe).map(|(a, b)| a + b).collect()
            })
            .collect();
        let any = guide.contains(&0.0);
        attention(
            &project(&gc.query, &tokens(q_fb)),
            &keys,
            &project(&gc.value, &px),
            |_, j| !any || guide[j] == 0.0,
        )
    }

    pub fn refine(r: &Refiner, features: &Tensor) -> Vec<Vec<f64>> {
        let x = tokens(&features.clone().flatten_rows());
        let sa = attention(&project(&r.query, &x), &project(&r.key, &x), &project(&r.value, &x), |_, _| true);
        x.iter()
            .zip(&sa)
            .map(|(xi, si)| {
                let x1: Vec<f64> = xi.iter().zip(si).map(|(a, b)| a + b).collect();
                let h: Vec<f64> = linear(&r.ffn_in, &x1).into_iter().map(|v| v.max(0.0)).collect();
                x1.iter().zip(linear(&r.ffn_out, &h)).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    /// Minimum total cost over all injective row→column maps, summed in row
    /// order.
    pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.len() {
                *best = best.min(acc);
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    go(cost, row + 1, used, acc + cost[row][j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        if cost.is_empty() {
            return 0.0;
        }
        go(cost, 0, &mut vec![false; cost[0].len()], 0.0, &mut best);
        best
    }

    fn per_frame(pred: &[Image], gt: &[Image], f: impl Fn(&Image, &Image) -> f64) -> f64 {
        let mut s = 0.0;
        for (p, g) in pred.iter().zip(gt) {
            s += f(p, g);
        }
        s / pred.len() as f64
    }

    pub fn mad(pred: &[Image], gt: &[Image]) -> f64 {
        per_frame(pred, gt, |p, g| {
            let mut s = 0.0;
            for y in 0..p.height() {
                for x in 0..p.width() {
                    s += (p.get(y, x, 0) - g.get(y, x, 0)).abs();
                }
            }
            s / (p.height() * p.width()) as f64 * 1e3
        })
    }

    pub fn mse(pred: &[Image], gt: &[Image]) -> f64 {
        per_frame(pred, gt, |p, g| {
            let mut s = 0.0;
            for y in 0..p.height() {
                for x in 0..p.width() {
                    let d = p.get(y, x, 0) - g.get(y, x, 0);
                    s += d * d;
                }
            }
            s / (p.height() * p.width()) as f64 * 1e3
        })
    }

    /// Full 2D Gaussian-derivative filters, each scaled to unit L2 norm,
    /// applied by direct correlation with clamped coordinates.
    pub fn gradient_magnitude(img: &Image) -> Vec<f64> {
        let (sigma, r) = (1.4f64, 5i64);
        let g = |t: i64| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp();
        let dg = |t: i64| -(t as f64) / (sigma * sigma) * g(t);
        let n = (2 * r + 1) as usize;
        let mut kx = vec![0.0; n * n];
        let mut ky = vec![0.0; n * n];
        for dy in -r..=r {
            for dx in -r..=r {
                let i = ((dy + r) as usize) * n + (dx + r) as usize;
                kx[i] = dg(dx) * g(dy);
                ky[i] = g(dx) * dg(dy);
            }
        }
        for k in [&mut kx, &mut ky] {
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            k.iter_mut().for_each(|v| *v /= norm);
        }
        let (h, w) = (img.height() as i64, img.width() as i64);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let v = img.get((y + dy).clamp(0, h - 1) as usize, (x + dx).clamp(0, w - 1) as usize, 0);
                        let i = ((dy + r) as usize) * n + (dx + r) as usize;
                        gx += kx[i] * v;
                        gy += ky[i] * v;
                    }
                }
                out.push((gx * gx + gy * gy).sqrt());
            }
        }
        out
    }

    pub fn grad(pred: &[Image], gt: &[Image]) -> f64 {
        per_frame(pred, gt, |p, g| {
            let (a, b) = (gradient_magnitude(p), gradient_magnitude(g));
            let mut s = 0.0;
            for i in 0..a.len() {
                s += (a[i] - b[i]).powi(2);
            }
            s / a.len() as f64 * 1e3
        })
    }

    /// Component labels by repeated min-propagation between 4-neighbours.
    /// Each component ends up labelled with its first raster index.
    pub fn largest_component(fg: &[bool], h: usize, w: usize) -> Vec<bool> {
        let mut label: Vec<usize> = (0..h * w).map(|i| if fg[i] { i } else { usize::MAX }).collect();
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if !fg[i] {
                        continue;
                    }
                    let mut m = label[i];
                    let nbrs = [
                        (y > 0).then(|| i - w),
                        (y + 1 < h).then(|| i + w),
                        (x > 0).then(|| i - 1),
                        (x + 1 < w).then(|| i + 1),
                    ];
                    for j in nbrs.into_iter().flatten() {
                        if fg[j] {
                            m = m.min(label[j]);
                        }
                    }
                    if m != label[i] {
                        label[i] = m;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut best: Option<(usize, usize)> = None;
        for root in 0..h * w {
            let size = label.iter().filter(|&&l| l == root).count();
            if size > 0 && best.is_none_or(|(s, _)| size > s) {
                best = Some((size, root));
            }
        }
        match best {
            Some((_, root)) => label.iter().map(|&l| l == root).collect(),
            None => vec![false; h * w],
        }
    }

    pub fn conn(pred: &[Image], gt: &[Image]) -> f64 {
        per_frame(pred, gt, |p, g| {
            let (h, w) = (p.height(), p.width());
            let mut level = vec![-1.0; h * w];
            for i in 1..10 {
                let t = i as f64 / 10.0;
                let fg: Vec<bool> = (0..h * w)
                    .map(|k| p.data()[k] >= t && g.data()[k] >= t)
                    .collect();
                let omega = largest_component(&fg, h, w);
                for k in 0..h * w {
                    if level[k] == -1.0 && !omega[k] {
                        level[k] = (i - 1) as f64 / 10.0;
                    }
                }
            }
            let mut s = 0.0;
            for k in 0..h * w {
                let l = if level[k] == -1.0 { 1.0 } else { level[k] };
                let phi = |a: f64| {
                    let d = a - l;
                    1.0 - if d >= 0.15 { d } else { 0.0 }
                };
                s += (phi(p.data()[k]) - phi(g.data()[k])).abs();
            }
            s / (h * w) as f64 * 1e3
        })
    }

    pub fn dtssd(pred: &[Image], gt: &[Image]) -> f64 {
        let mut s = 0.0;
        for t in 1..pred.len() {
            let mut f = 0.0;
            for y in 0..pred[t].height() {
                for x in 0..pred[t].width() {
                    let dp = pred[t].get(y, x, 0) - pred[t - 1].get(y, x, 0);
                    let dg = gt[t].get(y, x, 0) - gt[t - 1].get(y, x, 0);
                    f += (dp - dg) * (dp - dg);
                }
            }
            s += f / (pred[t].height() * pred[t].width()) as f64;
        }
        (s / (pred.len() - 1) as f64).sqrt() * 1e2
    }
}

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({}) [{:.2}s]",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

type Check = fn() -> Result<String, String>;

pub const ATTENTION_TOL: f64 = 1e-10;
pub const METRIC_TOL: f64 = 1e-9;
pub const ATTENTION_BUDGET: Duration = Duration::from_secs(10);
pub const INFER_BUDGET: Duration = Duration::from_secs(30);

pub fn criteria() -> Vec<(&'static str, Check)> {
    vec![
        ("attention-oracle-equivalence", attention_oracles as Check),
        ("local-global-consistency", local_global_consistency),
        ("mask-semantics", mask_semantics),
        ("compositing-algebra", compositing_algebra),
        ("hungarian-brute-force", hungarian_brute_force),
        ("metrics-oracles", metrics_oracles),
        ("memory-policy", memory_policy),
        ("end-to-end-determinism", end_to_end_determinism),
        ("constant-input-stability", constant_input_stability),
    ]
}

pub fn run_one(name: &'static str, check: Check) -> CriterionResult {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CriterionResult {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

pub fn run_all() -> Vec<CriterionResult> {
    criteria().into_iter().map(|(n, c)| run_one(n, c)).collect()
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn max_diff(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (r, row) in b.iter().enumerate() {
        for (x, y) in a.row(r).iter().zip(row) {
            m = m.max((x - y).abs());
        }
    }
    m
}

fn random_image(h: usize, w: usize, rng: &mut Rng) -> Image {
    Image::from_fn(h, w, 1, |_, _, _| rng.next_f64())
}

fn random_binary(h: usize, w: usize, p: f64, rng: &mut Rng) -> Image {
    Image::from_fn(h, w, 1, |_, _, _| if rng.chance(p) { 1.0 } else { 0.0 })
}

struct TemporalCase {
    ta: TemporalAttention,
    current: Tensor,
    long: Tensor,
    short: Tensor,
    bank: MemoryBank,
    init: Image,
}

fn temporal_case(rng: &mut Rng, h: usize, w: usize, window: usize) -> Result<TemporalCase, String> {
    let c = 4 * (1 + rng.below(4));
    let cin = 1 + rng.below(16);
    let ta = TemporalAttention::seeded(AttentionConfig { channels: c, window }, cin, rng).map_err(err)?;
    let current = Tensor::random(&[h, w, cin], -1.0, 1.0, rng);
    let long = Tensor::random(&[h, w, cin], -1.0, 1.0, rng);
    let short = Tensor::random(&[h, w, cin], -1.0, 1.0, rng);
    let mut bank = MemoryBank::new();
    ta.memory_update(&mut bank, &long, &random_image(2 * h, 2 * w, rng)).map_err(err)?;
    ta.memory_update(&mut bank, &short, &random_image(h + 1, w + 1, rng)).map_err(err)?;
    let init = random_image(2 * h, 2 * w, rng);
    Ok(TemporalCase {
        ta,
        current,
        long,
        short,
        bank,
        init,
    })
}

fn attention_oracles() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = Rng::new(0xA77E);
    let mut worst: f64 = 0.0;
    let instances = 100;
    for _ in 0..instances {
        let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
        let window = 2 * rng.below(8) + 1;
        let tc = temporal_case(&mut rng, h, w, window)?;
        let long = tc.bank.long_term.as_ref().unwrap();
        let short = tc.bank.short_term.as_ref().unwrap();

        let g = tc.ta.global_attn(&tc.current, &tc.bank).map_err(err)?;
        worst = worst.max(max_diff(&g.clone().flatten_rows(), &oracles::global(&tc.ta, &tc.current, &tc.long, &long.mask)));

        let l = tc.ta.local_attn(&tc.current, &tc.bank).map_err(err)?;
        let lo = oracles::local(&tc.ta, &tc.current, &tc.short, &short.mask, window);
        worst = worst.max(max_diff(&l.flatten_rows(), &lo));

        let first = tc.ta.first_frame_self_attn(&tc.current, &tc.init, &MemoryBank::new()).map_err(err)?;
        let init_mask = crate::image::resample_bilinear(&tc.init, h, w).map_err(err)?;
        let fo = oracles::global(&tc.ta, &tc.current, &tc.current, init_mask.data());
        worst = worst.max(max_diff(&first.flatten_rows(), &fo));

        let c = tc.ta.config.channels;
        let n = 1 + rng.below(6);
        let gc = GuidedCorrection::seeded(n, c, &mut rng).map_err(err)?;
        let q_fb = Tensor::random(&[n, c], -1.0, 1.0, &mut rng);
        let pixels = Tensor::random(&[h, w, c], -1.0, 1.0, &mut rng);
        let density = rng.next_f64() * 0.3;
        let prev = random_binary(2 * h, 2 * w, density, &mut rng);
        let guide = make_guidance(&prev, h, w, 1 + 2 * rng.below(2), 1).map_err(err)?;
        let fq = gc.fq_attn(&q_fb, &pixels, &guide).map_err(err)?;
        let fqo = oracles::fq_attn(&gc, &q_fb, &pixels, guide.values.data());
        worst = worst.max(max_diff(&fq.output, &fqo));

        let rf = gc.refine(&pixels).map_err(err)?;
        worst = worst.max(max_diff(&rf.flatten_rows(), &oracles::refine(&gc.refiner, &pixels)));
    }
    let elapsed = start.elapsed();
    ensure!(worst <= ATTENTION_TOL, "max abs diff {worst:e} > {ATTENTION_TOL:e}");
    ensure!(elapsed < ATTENTION_BUDGET, "took {:.2}s, budget {:?}", elapsed.as_secs_f64(), ATTENTION_BUDGET);
    Ok(format!(
        "{instances} instances x 5 ops, max abs diff {worst:.3e} <= {ATTENTION_TOL:e}, {:.2}s < 10s",
        elapsed.as_secs_f64()
    ))
}

fn local_global_consistency() -> Result<String, String> {
    let mut rng = Rng::new(0x10CA1);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for window in (1..=15).step_by(2) {
        for _ in 0..5 {
            let tc = temporal_case(&mut rng, 6, 6, window)?;
            let short = tc.bank.short_term.as_ref().unwrap();
            let l = tc.ta.local_attn_window(&tc.current, &tc.bank, window).map_err(err)?;
            let o = oracles::local(&tc.ta, &tc.current, &tc.short, &short.mask, window);
            worst = worst.max(max_diff(&l.flatten_rows(), &o));
            count += 1;
        }
    }
    let mut rng = Rng::new(0x10CA2);
    let tc = temporal_case(&mut rng, 6, 6, 11)?;
    let short = tc.bank.short_term.as_ref().unwrap();
    let l = tc.ta.local_attn_window(&tc.current, &tc.bank, 11).map_err(err)?;
    let full = oracles::global(&tc.ta, &tc.current, &tc.short, &short.mask);
    let full_diff = max_diff(&l.flatten_rows(), &full);
    ensure!(worst <= ATTENTION_TOL, "max abs diff {worst:e}");
    ensure!(full_diff <= ATTENTION_TOL, "window 11 on 6x6 differs from unrestricted attention by {full_diff:e}");
    Ok(format!("{count} cases, w in 1..=15 odd, 6x6, max abs diff {worst:.3e} <= {ATTENTION_TOL:e}"))
}

fn mask_semantics() -> Result<String, String> {
    let mut rng = Rng::new(0x3A5C);
    let mut perturbed = 0;
    for _ in 0..100 {
        let (h, w) = (2 + rng.below(7), 2 + rng.below(7));
        let (n, c) = (1 + rng.below(6), 4 * (1 + rng.below(4)));
        let gc = GuidedCorrection::seeded(n, c, &mut rng).map_err(err)?;
        let q = Tensor::random(&[n, c], -1.0, 1.0, &mut rng);
        let mut f = Tensor::random(&[h, w, c], -1.0, 1.0, &mut rng);
        let prev = random_binary(h, w, 0.2, &mut rng);
        let guide = make_guidance(&prev, h, w, 1, 1).map_err(err)?;
        if guide.is_empty() {
            continue;
        }
        let before = gc.fq_attn(&q, &f, &guide).map_err(err)?;
        for p in 0..h * w {
            if guide.values.data()[p] == f64::NEG_INFINITY {
                for v in f.row_mut(p) {
                    *v = rng.uniform(-50.0, 50.0);
                }
            }
        }
        let after = gc.fq_attn(&q, &f, &guide).map_err(err)?;
        ensure!(before.output == after.output, "output changed after perturbing masked tokens");
        perturbed += 1;
    }
    let mut rng = Rng::new(0x3A5D);
    for i in 0..1000 {
        let (mh, mw) = (4 + rng.below(29), 4 + rng.below(29));
        let (fh, fw) = (1 + rng.below(16), 1 + rng.below(16));
        let density = rng.next_f64() * 0.5;
        let prev = random_binary(mh, mw, density, &mut rng);
        let s: Vec<Image> = [3, 5, 7]
            .iter()
            .map(|&ks| make_guidance(&prev, fh, fw, ks, 1).map(|g| g.support_image()))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        for pair in s.windows(2) {
            let subset = pair[0].data().iter().zip(pair[1].data()).all(|(a, b)| *a <= *b);
            ensure!(subset, "mask {i}: support not monotone in ks");
        }
    }
    Ok(format!(
        "{perturbed} bit-exact perturbation cases; support(3) ⊆ support(5) ⊆ support(7) on 1000 masks"
    ))
}

fn compositing_algebra() -> Result<String, String> {
    let mut rng = Rng::new(0xC0DE);
    for _ in 0..50 {
        let (h, w) = (1 + rng.below(16), 1 + rng.below(16));
        let fg = Image::from_fn(h, w, 3, |_, _, _| rng.next_f64());
        let bg = Image::from_fn(h, w, 3, |_, _, _| rng.next_f64());
        ensure!(composite(&fg, &bg, &Image::zeros(h, w, 1)).map_err(err)? == bg, "alpha 0 is not the background");
        ensure!(composite(&fg, &bg, &Image::filled(h, w, 1, 1.0)).map_err(err)? == fg, "alpha 1 is not the foreground");
        let a1 = random_image(h, w, &mut rng);
        let a2 = random_image(h, w, &mut rng);
        let m = merge_alphas(&a1, &a2).map_err(err)?;
        for i in 0..h * w {
            let (x, y) = (a1.data()[i], a2.data()[i]);
            ensure!(m.data()[i] == 1.0 - (1.0 - x) * (1.0 - y), "merged alpha differs from the union formula");
            ensure!(m.data()[i] >= x.max(y), "merged alpha below max at {i}");
        }
    }
    let c1 = synth_sequence(3, 16, 16, 1, 1).map_err(err)?;
    let c2 = synth_sequence(3, 16, 16, 1, 2).map_err(err)?;
    let bg: Vec<Image> = synth_sequence(3, 16, 16, 1, 3).map_err(err)?.frames;
    for seed in 0..40 {
        let cfg = AugmentConfig { seed, ..AugmentConfig::default() };
        let out = sfm_compose(&c1, &c2, &bg, &cfg).map_err(err)?;
        for t in 0..3 {
            let expect = if out.draw.injected && !out.draw.single_supervision {
                merge_alphas(&c1.alphas[t], &c2.alphas[t]).map_err(err)?
            } else {
                c1.alphas[t].clone()
            };
            ensure!(out.clip.alphas[t] == expect, "seed {seed}: wrong supervision alpha");
            ensure!(out.clip.instance_masks[t].len() == 1 + out.draw.injected as usize, "seed {seed}: wrong mask count");
        }
    }
    let draws = 10_000;
    let (mut inj, mut single) = (0, 0);
    for seed in 0..draws {
        let d = AugmentDraw::sample(&AugmentConfig { seed, ..AugmentConfig::default() });
        inj += d.injected as u32;
        single += d.single_supervision as u32;
    }
    let (f1, f2) = (inj as f64 / draws as f64, single as f64 / draws as f64);
    ensure!((f1 - 0.4).abs() <= 0.02, "p1 frequency {f1}");
    ensure!((f2 - 0.5).abs() <= 0.02, "p2 frequency {f2}");
    Ok(format!("identities exact; p1 freq {f1:.4} (0.4±0.02), p2 freq {f2:.4} (0.5±0.02) over {draws} draws"))
}

fn hungarian_brute_force() -> Result<String, String> {
    let mut rng = Rng::new(0x4B6A);
    for i in 0..1000 {
        let cols = 1 + rng.below(6);
        let rows = 1 + rng.below(cols);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.next_f64()).collect())
            .collect();
        let a = solve_assignment(&cost).map_err(err)?;
        let distinct: BTreeSet<_> = a.iter().collect();
        ensure!(distinct.len() == rows, "case {i}: assignment is not injective");
        let got = assignment_cost(&cost, &a);
        let best = oracles::brute_force_assignment(&cost);
        ensure!(got == best, "case {i}: cost {got} vs brute force {best}");
    }
    Ok("1000 random matrices up to 6x6, costs equal exactly".into())
}

fn metrics_oracles() -> Result<String, String> {
    let mut rng = Rng::new(0x3E7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = 2 + rng.below(3);
        let (h, w) = (11 + rng.below(22), 11 + rng.below(22));
        let smooth = rng.chance(0.5);
        let seq = |rng: &mut Rng| -> Vec<Image> {
            (0..t)
                .map(|_| {
                    if smooth {
                        let (cy, cx, r) = (rng.uniform(0.0, h as f64), rng.uniform(0.0, w as f64), rng.uniform(2.0, 8.0));
                        Image::from_fn(h, w, 1, |y, x, _| {
                            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                            (r - d).clamp(0.0, 1.0)
                        })
                    } else {
                        random_image(h, w, rng)
                    }
                })
                .collect()
        };
        let p = seq(&mut rng);
        let g = seq(&mut rng);
        let pairs = [
            (metrics::mad(&p, &g).map_err(err)?, oracles::mad(&p, &g)),
            (metrics::mse(&p, &g).map_err(err)?, oracles::mse(&p, &g)),
            (metrics::grad(&p, &g).map_err(err)?, oracles::grad(&p, &g)),
            (metrics::conn(&p, &g).map_err(err)?, oracles::conn(&p, &g)),
            (metrics::dtssd(&p, &g).map_err(err)?, oracles::dtssd(&p, &g)),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
        let same = MetricsReport::evaluate(&p, &p, false).map_err(err)?;
        ensure!(
            [same.mad, same.mse, same.grad, same.conn] == [0.0; 4] && same.dtssd == Some(0.0),
            "metrics not zero on identical inputs"
        );
    }
    let blob = |y: usize, x: usize| (y < 3 && x < 3) || (y >= 5 && x >= 4);
    let g = vec![Image::from_fn(8, 8, 1, |y, x, _| if blob(y, x) { 0.9 } else { 0.05 })];
    let p = vec![Image::from_fn(8, 8, 1, |y, x, _| if blob(y, x) { 0.55 + 0.1 * ((y * x) % 3) as f64 } else { 0.3 })];
    worst = worst.max((metrics::conn(&p, &g).map_err(err)? - oracles::conn(&p, &g)).abs());
    ensure!(worst <= METRIC_TOL, "max abs diff {worst:e} > {METRIC_TOL:e}");
    Ok(format!("20 random sequences up to 32x32x4 plus 8x8 two-blob, max abs diff {worst:.3e} <= {METRIC_TOL:e}; zero on identical inputs"))
}

fn memory_policy() -> Result<String, String> {
    let mut rng = Rng::new(0x3E3);
    let ta = TemporalAttention::seeded(AttentionConfig { channels: 8, window: 3 }, 4, &mut rng).map_err(err)?;
    let mut bank = MemoryBank::new();
    let init = random_binary(4, 4, 0.5, &mut rng);
    let mut tokens = None;
    for k in 1..=64usize {
        let feat = Tensor::random(&[4, 4, 4], -1.0, 1.0, &mut rng);
        if k >= 2 {
            let held: BTreeSet<usize> = bank.stored_frames().into_iter().collect();
            let expect: BTreeSet<usize> = [1, k - 1].into_iter().collect();
            ensure!(held == expect, "frame {k}: bank holds {held:?}, expected {expect:?}");
            let t = bank.token_count();
            ensure!(*tokens.get_or_insert(t) == t, "frame {k}: token count {t} changed");
        }
        ta.forward(&feat, &bank, Some(&init)).map_err(err)?;
        let mask = random_binary(4, 4, 0.5, &mut rng);
        ta.memory_update(&mut bank, &feat, &mask).map_err(err)?;
    }
    Ok(format!("bank = {{1, k-1}} for k in 2..=64, constant {} tokens", tokens.unwrap_or(0)))
}

fn read_dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(err)? {
        let e = e.map_err(err)?;
        out.push((e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).map_err(err)?));
    }
    out.sort();
    Ok(out)
}

fn end_to_end_determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let clip = synth_sequence(8, 64, 64, 2, 7).map_err(err)?;
    let manifest_path = dataset::write_clip(&clip, tmp.path().join("clip"), BitDepth::Eight, Some(7)).map_err(err)?;
    let manifest = Manifest::load(&manifest_path).map_err(err)?;
    let init = pnm::read_image(tmp.path().join("clip").join(dataset::INIT_MASK)).map_err(err)?;
    let cfg = PipelineConfig::default();
    let mut slowest = Duration::ZERO;
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let start = Instant::now();
        let out = run_sequence(&manifest, &init, &cfg).map_err(err)?;
        write_outputs(&out, tmp.path().join(run)).map_err(err)?;
        slowest = slowest.max(start.elapsed());
        outs.push(out);
    }
    ensure!(outs[0].files == outs[1].files, "in-memory outputs differ between runs");
    let a = read_dir_bytes(&tmp.path().join("a"))?;
    let b = read_dir_bytes(&tmp.path().join("b"))?;
    ensure!(a == b, "output directories differ");
    let alphas = a.iter().filter(|(n, _)| n.starts_with("alpha_")).count();
    ensure!(alphas == 8, "expected 8 alpha files, got {alphas}");
    ensure!(slowest < INFER_BUDGET, "inference took {:.2}s", slowest.as_secs_f64());

    let pred = Manifest::load(tmp.path().join("a").join("manifest.json")).map_err(err)?;
    let report = MetricsReport::evaluate(
        &pred.load_alphas().map_err(err)?.unwrap_or_default(),
        &manifest.load_alphas().map_err(err)?.unwrap_or_default(),
        cfg.per_frame_metrics,
    )
    .map_err(err)?;
    let written = fs::read_to_string(tmp.path().join("a").join("metrics.json")).map_err(err)?;
    ensure!(report.to_json() == written, "metrics block differs from a standalone evaluation");
    Ok(format!(
        "8x64x64 clip, {} files byte-identical across runs, slowest run {:.2}s < 30s, metrics match eval",
        a.len(),
        slowest.as_secs_f64()
    ))
}

fn constant_input_stability() -> Result<String, String> {
    let clip = synth_sequence(1, 32, 32, 2, 11).map_err(err)?;
    let frame = &clip.frames[0];
    let init = binarize(&clip.alphas[0], 0.5).map_err(err)?;
    let total = 24;
    let mut notes = Vec::new();
    for seed in 0..4 {
        let cfg = PipelineConfig { seed, ..PipelineConfig::default() };
        let model = Model::seeded(&cfg).map_err(err)?;
        let mut session = Session::new(&model, &cfg);
        let mut results = Vec::with_capacity(total);
        for _ in 0..total {
            results.push(session.infer_frame(frame, Some(&init)).map_err(err)?);
        }
        let fixed = (1..total)
            .find(|&k| results[k].fg_mask == results[k - 1].fg_mask)
            .ok_or_else(|| format!("seed {seed}: predicted masks never repeated within {total} frames"))?;
        for k in fixed + 1..total {
            ensure!(
                results[k].alpha == results[fixed].alpha && results[k].fg_mask == results[fixed].fg_mask,
                "seed {seed}: frame {} differs after masks repeated at frame {}",
                k + 1,
                fixed + 1
            );
        }
        notes.push(format!(
            "seed {seed}: fixed from frame {} (fg {:.3})",
            fixed + 1,
            results[fixed].diagnostics.fg_fraction
        ));
    }
    Ok(format!("{total} repeated frames; {}", notes.join(", ")))
}
