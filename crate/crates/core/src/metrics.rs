//! Alpha matte quality metrics.
//!
//! All metrics take aligned sequences of single-channel frames. Per-frame
//! values are averaged over pixels, then over frames. MAD, MSE, Grad and Conn
//! are scaled by 10³, dtSSD by 10².

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SCALE: f64 = 1e3;
pub const DTSSD_SCALE: f64 = 1e2;
pub const GRAD_SIGMA: f64 = 1.4;
/// Kernel radius: `ceil(3σ)`.
pub const GRAD_RADIUS: usize = 5;
/// Connectivity threshold ladder `i / CONN_STEPS` for `i = 1..CONN_STEPS`.
pub const CONN_STEPS: usize = 10;
pub const CONN_DEVIATION: f64 = 0.15;

fn check_pair(pred: &[Image], gt: &[Image]) -> Result<(usize, usize)> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Argument(format!(
            "sequences must be non-empty and equally long, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let (h, w) = (pred[0].height(), pred[0].width());
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.channels() != 1 || g.channels() != 1 {
            return Err(Error::Argument(format!("frame {i}: alphas must be single-channel")));
        }
        if p.dims() != (h, w) || g.dims() != (h, w) {
            return Err(Error::Argument(format!(
                "frame {i}: shape mismatch {:?} vs {:?}",
                p.dims(),
                g.dims()
            )));
        }
    }
    Ok((h, w))
}

fn sequence_mean(per_frame: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = per_frame.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn frame_mad(p: &Image, g: &Image) -> f64 {
    let s: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum();
    s / p.data().len() as f64 * SCALE
}

fn frame_mse(p: &Image, g: &Image) -> f64 {
    let s: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    s / p.data().len() as f64 * SCALE
}

pub fn mad(pred: &[Image], gt: &[Image]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(sequence_mean(pred.iter().zip(gt).map(|(p, g)| frame_mad(p, g))))
}

pub fn mse(pred: &[Image], gt: &[Image]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(sequence_mean(pred.iter().zip(gt).map(|(p, g)| frame_mse(p, g))))
}

/// Unit-L2 Gaussian and first-derivative-of-Gaussian kernels.
pub fn gaussian_kernels() -> (Vec<f64>, Vec<f64>) {
    let r = GRAD_RADIUS as i64;
    let s2 = GRAD_SIGMA * GRAD_SIGMA;
    let g: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * s2)).exp())
        .collect();
    let dg: Vec<f64> = (-r..=r)
        .zip(&g)
        .map(|(x, gv)| -(x as f64) / s2 * gv)
        .collect();
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / n).collect::<Vec<_>>()
    };
    (unit(g), unit(dg))
}

/// 1D correlation at `i` with a clamped sample index. Taps are taken in
/// mirrored pairs so an odd kernel gives exactly zero on a flat signal.
fn tap(kernel: &[f64], n: usize, i: usize, sample: impl Fn(usize) -> f64) -> f64 {
    let r = GRAD_RADIUS;
    let at = |o: i64| sample((i as i64 + o).clamp(0, n as i64 - 1) as usize);
    let mut acc = kernel[r] * at(0);
    for k in 1..=r {
        acc += kernel[r + k] * at(k as i64) + kernel[r - k] * at(-(k as i64));
    }
    acc
}

/// Correlate along rows and columns with replicated borders.
fn separable(data: &[f64], h: usize, w: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = tap(kx, w, x, |sx| data[y * w + sx]);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = tap(ky, h, y, |sy| tmp[sy * w + x]);
        }
    }
    out
}

/// Gaussian-derivative gradient magnitude per pixel.
pub fn gradient_magnitude(img: &Image) -> Vec<f64> {
    let (g, dg) = gaussian_kernels();
    let (h, w) = (img.height(), img.width());
    let gx = separable(img.data(), h, w, &dg, &g);
    let gy = separable(img.data(), h, w, &g, &dg);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
}

fn frame_grad(p: &Image, g: &Image) -> f64 {
    let mp = gradient_magnitude(p);
    let mg = gradient_magnitude(g);
    let s: f64 = mp.iter().zip(&mg).map(|(a, b)| (a - b) * (a - b)).sum();
    s / mp.len() as f64 * SCALE
}

fn check_grad_size(h: usize, w: usize) -> Result<()> {
    let k = 2 * GRAD_RADIUS + 1;
    if h < k || w < k {
        return Err(Error::Argument(format!(
            "frames of {h}x{w} are smaller than the {k}x{k} gradient kernel"
        )));
    }
    Ok(())
}

pub fn grad(pred: &[Image], gt: &[Image]) -> Result<f64> {
    let (h, w) = check_pair(pred, gt)?;
    check_grad_size(h, w)?;
    Ok(sequence_mean(pred.iter().zip(gt).map(|(p, g)| frame_grad(p, g))))
}

/// Largest 4-connected component of `fg`. Ties go to the component whose
/// first pixel comes first in raster order.
pub fn largest_component(fg: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; h * w];
    let mut best = (0usize, usize::MAX);
    let mut queue = Vec::new();
    let mut next = 0;
    for start in 0..h * w {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        queue.clear();
        queue.push(start);
        let mut head = 0;
        while head < queue.len() {
            let p = queue[head];
            head += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if fg[q] && label[q] == usize::MAX {
                    label[q] = next;
                    queue.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if queue.len() > best.0 {
            best = (queue.len(), next);
        }
        next += 1;
    }
    if best.0 == 0 {
        return vec![false; h * w];
    }
    label.iter().map(|&l| l == best.1).collect()
}

/// Level at which each pixel drops out of the shared largest component.
pub fn connectivity_levels(p: &Image, g: &Image) -> Vec<f64> {
    let (h, w) = (p.height(), p.width());
    let mut level = vec![-1.0; h * w];
    for i in 1..CONN_STEPS {
        let t = i as f64 / CONN_STEPS as f64;
        let prev = (i - 1) as f64 / CONN_STEPS as f64;
        let fg: Vec<bool> = p
            .data()
            .iter()
            .zip(g.data())
            .map(|(&a, &b)| a >= t && b >= t)
            .collect();
        let omega = largest_component(&fg, h, w);
        for (l, &o) in level.iter_mut().zip(&omega) {
            if *l == -1.0 && !o {
                *l = prev;
            }
        }
    }
    for l in level.iter_mut() {
        if *l == -1.0 {
            *l = 1.0;
        }
    }
    level
}

fn phi(a: f64, level: f64) -> f64 {
    let d = a - level;
    if d >= CONN_DEVIATION {
        1.0 - d
    } else {
        1.0
    }
}

fn frame_conn(p: &Image, g: &Image) -> f64 {
    let level = connectivity_levels(p, g);
    let s: f64 = p
        .data()
        .iter()
        .zip(g.data())
        .zip(&level)
        .map(|((&a, &b), &l)| (phi(a, l) - phi(b, l)).abs())
        .sum();
    s / level.len() as f64 * SCALE
}

pub fn conn(pred: &[Image], gt: &[Image]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(sequence_mean(pred.iter().zip(gt).map(|(p, g)| frame_conn(p, g))))
}

/// Mean squared delta difference of frame `t` against `t - 1`, unscaled.
fn frame_delta_sq(pred: &[Image], gt: &[Image], t: usize) -> f64 {
    let mut s = 0.0;
    for (((p1, p0), g1), g0) in pred[t]
        .data()
        .iter()
        .zip(pred[t - 1].data())
        .zip(gt[t].data())
        .zip(gt[t - 1].data())
    {
        let d = (p1 - p0) - (g1 - g0);
        s += d * d;
    }
    s / pred[t].data().len() as f64
}

pub fn dtssd(pred: &[Image], gt: &[Image]) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::Argument("dtSSD needs at least two frames".into()));
    }
    let mean = sequence_mean((1..pred.len()).map(|t| frame_delta_sq(pred, gt, t)));
    Ok(mean.sqrt() * DTSSD_SCALE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    /// 1-based.
    pub frame: usize,
    pub mad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    /// Against the previous frame; absent on the first.
    pub dtssd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub mad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    /// `None` for single-frame sequences.
    pub dtssd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_frame: Option<Vec<FrameMetrics>>,
}

impl MetricsReport {
    pub fn evaluate(pred: &[Image], gt: &[Image], per_frame: bool) -> Result<Self> {
        let rows = evaluate_frames(pred, gt)?;
        let mean = |f: fn(&FrameMetrics) -> f64| sequence_mean(rows.iter().map(f));
        let dtssd = if pred.len() >= 2 {
            Some(dtssd(pred, gt)?)
        } else {
            None
        };
        Ok(MetricsReport {
            frames: pred.len(),
            mad: mean(|r| r.mad),
            mse: mean(|r| r.mse),
            grad: mean(|r| r.grad),
            conn: mean(|r| r.conn),
            dtssd,
            per_frame: per_frame.then_some(rows),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per frame. Empty when the per-frame breakdown was not kept.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,mad,mse,grad,conn,dtssd\n");
        for r in self.per_frame.iter().flatten() {
            let dt = r.dtssd.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{},{}", r.frame, r.mad, r.mse, r.grad, r.conn, dt).unwrap();
        }
        out
    }
}

pub fn evaluate_frames(pred: &[Image], gt: &[Image]) -> Result<Vec<FrameMetrics>> {
    let (h, w) = check_pair(pred, gt)?;
    check_grad_size(h, w)?;
    Ok((0..pred.len())
        .map(|t| FrameMetrics {
            frame: t + 1,
            mad: frame_mad(&pred[t], &gt[t]),
            mse: frame_mse(&pred[t], &gt[t]),
            grad: frame_grad(&pred[t], &gt[t]),
            conn: frame_conn(&pred[t], &gt[t]),
            dtssd: (t > 0).then(|| frame_delta_sq(pred, gt, t).sqrt() * DTSSD_SCALE),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::selftest::oracles;
    use proptest::prelude::*;

    fn random_seq(t: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<Image> {
        (0..t)
            .map(|_| Image::from_fn(h, w, 1, |_, _, _| rng.next_f64()))
            .collect()
    }

    #[test]
    fn extremes() {
        let ones = vec![Image::filled(12, 12, 1, 1.0); 2];
        let zeros = vec![Image::zeros(12, 12, 1); 2];
        assert_eq!(mad(&ones, &zeros).unwrap(), 1000.0);
        assert_eq!(mse(&ones, &zeros).unwrap(), 1000.0);
        assert_eq!(grad(&ones, &zeros).unwrap(), 0.0);
        assert_eq!(dtssd(&ones, &zeros).unwrap(), 0.0);
        assert_eq!(conn(&ones, &ones).unwrap(), 0.0);
    }

    #[test]
    fn identical_inputs_score_zero() {
        let mut rng = Rng::new(1);
        let s = random_seq(3, 16, 16, &mut rng);
        let r = MetricsReport::evaluate(&s, &s, true).unwrap();
        assert_eq!((r.mad, r.mse, r.grad, r.conn, r.dtssd), (0.0, 0.0, 0.0, 0.0, Some(0.0)));
    }

    #[test]
    fn errors() {
        let a = vec![Image::zeros(12, 12, 1)];
        assert!(dtssd(&a, &a).is_err());
        assert!(mad(&a, &[]).is_err());
        let small = vec![Image::zeros(10, 12, 1)];
        assert!(grad(&small, &small).is_err());
        assert!(mad(&a, &[Image::zeros(12, 11, 1)]).is_err());
        let r = MetricsReport::evaluate(&a, &a, false).unwrap();
        assert_eq!(r.dtssd, None);
    }

    #[test]
    fn matches_oracles() {
        let mut rng = Rng::new(2);
        for _ in 0..5 {
            let p = random_seq(4, 16, 16, &mut rng);
            let g = random_seq(4, 16, 16, &mut rng);
            assert!((mad(&p, &g).unwrap() - oracles::mad(&p, &g)).abs() <= 1e-9);
            assert!((mse(&p, &g).unwrap() - oracles::mse(&p, &g)).abs() <= 1e-9);
            assert!((grad(&p, &g).unwrap() - oracles::grad(&p, &g)).abs() <= 1e-9);
            assert!((conn(&p, &g).unwrap() - oracles::conn(&p, &g)).abs() <= 1e-9);
            assert!((dtssd(&p, &g).unwrap() - oracles::dtssd(&p, &g)).abs() <= 1e-9);
        }
    }

    #[test]
    fn shifted_step_edge() {
        let step = |off: usize| vec![Image::from_fn(16, 16, 1, |_, x, _| if x >= 8 + off { 1.0 } else { 0.0 })];
        let (p, g) = (step(1), step(0));
        let v = grad(&p, &g).unwrap();
        assert!(v > 0.0);
        assert!((v - oracles::grad(&p, &g)).abs() <= 1e-9);
    }

    #[test]
    fn two_blobs() {
        let blob = |y: usize, x: usize| (y < 3 && x < 3) || (y >= 5 && x >= 4);
        let g = vec![Image::from_fn(8, 8, 1, |y, x, _| if blob(y, x) { 0.9 } else { 0.05 })];
        let p = vec![Image::from_fn(8, 8, 1, |y, x, _| {
            if blob(y, x) {
                0.6 + 0.04 * ((y + x) % 3) as f64
            } else {
                0.2
            }
        })];
        let v = conn(&p, &g).unwrap();
        assert!(v > 0.0);
        assert!((v - oracles::conn(&p, &g)).abs() <= 1e-9);
    }

    #[test]
    fn component_tie_goes_to_first() {
        let fg = [true, true, false, true, true];
        assert_eq!(largest_component(&fg, 1, 5), vec![true, true, false, false, false]);
        let fg = [true, false, true, true, false, false];
        assert_eq!(largest_component(&fg, 2, 3), vec![true, false, false, true, false, false]);
        assert_eq!(largest_component(&[false; 4], 2, 2), vec![false; 4]);
    }

    #[test]
    fn csv_has_row_per_frame() {
        let mut rng = Rng::new(3);
        let p = random_seq(3, 12, 12, &mut rng);
        let r = MetricsReport::evaluate(&p, &p, true).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().ends_with(','));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn symmetric_and_nonnegative(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let p = random_seq(2, 12, 12, &mut rng);
            let g = random_seq(2, 12, 12, &mut rng);
            prop_assert!(mad(&p, &g).unwrap() > 0.0);
            prop_assert!(mse(&p, &g).unwrap() > 0.0);
            prop_assert_eq!(mad(&p, &g).unwrap(), mad(&g, &p).unwrap());
            prop_assert_eq!(mse(&p, &g).unwrap(), mse(&g, &p).unwrap());
            prop_assert_eq!(grad(&p, &g).unwrap(), grad(&g, &p).unwrap());
            prop_assert_eq!(dtssd(&p, &g).unwrap(), dtssd(&g, &p).unwrap());
            prop_assert!(conn(&p, &g).unwrap() >= 0.0);
        }

        #[test]
        fn constants_have_no_gradient_or_motion(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let p = vec![Image::filled(12, 12, 1, a); 3];
            let g = vec![Image::filled(12, 12, 1, b); 3];
            prop_assert_eq!(grad(&p, &g).unwrap(), 0.0);
            prop_assert_eq!(dtssd(&p, &g).unwrap(), 0.0);
        }
    }
}
