//! Alpha compositing and sequential foreground merging. Also renders
//! procedural clips with exact ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{binarize, Image};
use crate::rng::Rng;

/// A clip of RGB frames with per-frame alphas and per-object binary masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<Image>,
    pub alphas: Vec<Image>,
    /// `instance_masks[t][i]` is object `i` in frame `t`.
    pub instance_masks: Vec<Vec<Image>>,
}

impl Clip {
    pub fn new(
        frames: Vec<Image>,
        alphas: Vec<Image>,
        instance_masks: Vec<Vec<Image>>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Argument("clip has no frames".into()));
        }
        if alphas.len() != frames.len() || instance_masks.len() != frames.len() {
            return Err(Error::Argument(format!(
                "clip lengths differ: {} frames, {} alphas, {} mask sets",
                frames.len(),
                alphas.len(),
                instance_masks.len()
            )));
        }
        let dims = frames[0].dims();
        let all_images = frames
            .iter()
            .chain(&alphas)
            .chain(instance_masks.iter().flatten());
        for img in all_images {
            if img.dims() != dims {
                return Err(Error::Argument("clip images differ in size".into()));
            }
        }
        if frames.iter().any(|f| f.channels() != 3) || alphas.iter().any(|a| a.channels() != 1) {
            return Err(Error::Argument(
                "clip frames must be RGB and alphas single-channel".into(),
            ));
        }
        Ok(Clip {
            frames,
            alphas,
            instance_masks,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
}

/// `I = αF + (1 − α)B` per pixel and channel.
pub fn composite(fg: &Image, bg: &Image, alpha: &Image) -> Result<Image> {
    if fg.dims() != bg.dims() || fg.dims() != alpha.dims() {
        return Err(Error::Argument(format!(
            "composite size mismatch: fg {:?}, bg {:?}, alpha {:?}",
            fg.dims(),
            bg.dims(),
            alpha.dims()
        )));
    }
    if fg.channels() != bg.channels() || alpha.channels() != 1 {
        return Err(Error::Argument(
            "composite needs matching fg/bg channels and a 1-channel alpha".into(),
        ));
    }
    let (h, w) = fg.dims();
    let c = fg.channels();
    Ok(Image::from_fn(h, w, c, |y, x, ch| {
        let a = alpha.get(y, x, 0);
        a * fg.get(y, x, ch) + (1.0 - a) * bg.get(y, x, ch)
    }))
}

/// Merged supervision `1 − (1 − α₁)(1 − α₂)`.
pub fn merge_alphas(a1: &Image, a2: &Image) -> Result<Image> {
    if !a1.same_shape(a2) || a1.channels() != 1 {
        return Err(Error::Argument("merge_alphas needs equal single-channel alphas".into()));
    }
    let (h, w) = a1.dims();
    Ok(Image::from_fn(h, w, 1, |y, x, _| {
        1.0 - (1.0 - a1.get(y, x, 0)) * (1.0 - a2.get(y, x, 0))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Probability of merging a second foreground into the background.
    pub p1: f64,
    /// Probability of supervising with the primary alpha only.
    pub p2: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p1: 0.4,
            p2: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-clip random choices. Both are drawn once per clip, in this order, from
/// a stream seeded with the config seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub injected: bool,
    pub single_supervision: bool,
}

impl AugmentDraw {
    pub fn sample(cfg: &AugmentConfig) -> Self {
        let mut rng = Rng::new(cfg.seed);
        let injected = rng.chance(cfg.p1);
        let single_supervision = rng.chance(cfg.p2);
        AugmentDraw {
            injected,
            single_supervision,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    /// Composited frames, the selected supervision alphas, and one binary
    /// mask per foreground present (`[M₁]` or `[M₁, M₂]`).
    pub clip: Clip,
    pub draw: AugmentDraw,
}

/// Sequential foreground merging. `clip1` and `clip2` supply foreground colors
/// (their frames) with alphas; `bg` is the background sequence.
pub fn sfm_compose(
    clip1: &Clip,
    clip2: &Clip,
    bg: &[Image],
    cfg: &AugmentConfig,
) -> Result<Augmented> {
    cfg.validate()?;
    if clip1.len() != bg.len() || clip2.len() != bg.len() {
        return Err(Error::Argument(format!(
            "sequence lengths differ: clip1 {}, clip2 {}, background {}",
            clip1.len(),
            clip2.len(),
            bg.len()
        )));
    }
    let draw = AugmentDraw::sample(cfg);
    let mut frames = Vec::with_capacity(bg.len());
    let mut alphas = Vec::with_capacity(bg.len());
    let mut masks = Vec::with_capacity(bg.len());
    for t in 0..bg.len() {
        let (f1, a1) = (&clip1.frames[t], &clip1.alphas[t]);
        let m1 = binarize(a1, 0.5)?;
        if draw.injected {
            let (f2, a2) = (&clip2.frames[t], &clip2.alphas[t]);
            let merged_bg = composite(f2, &bg[t], a2)?;
            frames.push(composite(f1, &merged_bg, a1)?);
            alphas.push(if draw.single_supervision {
                a1.clone()
            } else {
                merge_alphas(a1, a2)?
            });
            masks.push(vec![m1, binarize(a2, 0.5)?]);
        } else {
            frames.push(composite(f1, &bg[t], a1)?);
            alphas.push(a1.clone());
            masks.push(vec![m1]);
        }
    }
    Ok(Augmented {
        clip: Clip::new(frames, alphas, masks)?,
        draw,
    })
}

/// Width of the linear alpha ramp around each ellipse, in pixels.
const EDGE_WIDTH: f64 = 2.0;

/// One ellipse's trajectory, fixed before any frame is rendered.
#[derive(Debug, Clone)]
struct Ellipse {
    ry: f64,
    rx: f64,
    cy0: f64,
    cx0: f64,
    vy: f64,
    vx: f64,
    color: [f64; 3],
    shade: [f64; 3],
}

/// Reflect `p0 + v·t` into `[lo, hi]`.
fn bounce(p0: f64, v: f64, t: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let period = 2.0 * span;
    let u = (p0 - lo + v * t).rem_euclid(period);
    lo + if u <= span { u } else { period - u }
}

impl Ellipse {
    fn center(&self, t: usize, h: usize, w: usize) -> (f64, f64) {
        let margin = EDGE_WIDTH + 1.0;
        let cy = bounce(
            self.cy0,
            self.vy,
            t as f64,
            self.ry + margin,
            h as f64 - 1.0 - self.ry - margin,
        );
        let cx = bounce(
            self.cx0,
            self.vx,
            t as f64,
            self.rx + margin,
            w as f64 - 1.0 - self.rx - margin,
        );
        (cy, cx)
    }

    /// Soft coverage at pixel center `(y, x)`. The signed distance to the
    /// boundary uses the first-order estimate `(r − 1)/|∇r|` of the gauge
    /// `r`, and coverage ramps linearly across `EDGE_WIDTH` pixels.
    fn alpha_at(&self, y: f64, x: f64, cy: f64, cx: f64) -> f64 {
        let (dy, dx) = (y - cy, x - cx);
        if dy.abs() > self.ry + EDGE_WIDTH || dx.abs() > self.rx + EDGE_WIDTH {
            return 0.0;
        }
        let (ny, nx) = (dy / self.ry, dx / self.rx);
        let r = (ny * ny + nx * nx).sqrt();
        if r == 0.0 {
            return 1.0;
        }
        let gy = dy / (self.ry * self.ry);
        let gx = dx / (self.rx * self.rx);
        let grad = (gy * gy + gx * gx).sqrt() / r;
        let dist = (r - 1.0) / grad;
        (0.5 - dist / EDGE_WIDTH).clamp(0.0, 1.0)
    }
}

/// Render `frames` frames of `n_objects` soft ellipses drifting over a
/// procedural textured background. Objects later in the list are drawn in
/// front. The clip alpha is the union `1 − Π(1 − αᵢ)` and instance masks are
/// each object's own alpha binarized at 0.5.
pub fn synth_sequence(
    frames: usize,
    height: usize,
    width: usize,
    n_objects: usize,
    seed: u64,
) -> Result<Clip> {
    if frames == 0 || n_objects == 0 {
        return Err(Error::Argument(
            "synth needs at least one frame and one object".into(),
        ));
    }
    if height < 16 || width < 16 {
        return Err(Error::Argument(format!(
            "synth needs frames of at least 16x16, got {height}x{width}"
        )));
    }
    let mut rng = Rng::new(seed);
    let bg_a: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.1, 0.5));
    let bg_b: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.4, 0.9));
    let (fy, fx) = (rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5));
    let phase = rng.uniform(0.0, std::f64::consts::TAU);

    let short = height.min(width) as f64;
    let objects: Vec<Ellipse> = (0..n_objects)
        .map(|_| {
            let ry = rng.uniform(0.12, 0.22) * short;
            let rx = (ry * rng.uniform(0.7, 1.4)).min(0.3 * short);
            let margin = EDGE_WIDTH + 1.0;
            Ellipse {
                ry,
                rx,
                cy0: rng.uniform(ry + margin, height as f64 - 1.0 - ry - margin),
                cx0: rng.uniform(rx + margin, width as f64 - 1.0 - rx - margin),
                vy: rng.uniform(-1.5, 1.5),
                vx: rng.uniform(-1.5, 1.5),
                color: std::array::from_fn(|_| rng.uniform(0.0, 1.0)),
                shade: std::array::from_fn(|_| rng.uniform(-0.2, 0.2)),
            }
        })
        .collect();

    let mut out_frames = Vec::with_capacity(frames);
    let mut out_alphas = Vec::with_capacity(frames);
    let mut out_masks = Vec::with_capacity(frames);
    for t in 0..frames {
        let drift = 0.3 * t as f64;
        let mut rgb = Image::from_fn(height, width, 3, |y, x, c| {
            let s = ((y as f64 + drift) * fy + phase).sin() * (x as f64 * fx).cos();
            let k = 0.5 + 0.5 * s;
            bg_a[c] * (1.0 - k) + bg_b[c] * k
        });
        let mut union_alpha = Image::zeros(height, width, 1);
        let mut masks = Vec::with_capacity(n_objects);
        for obj in &objects {
            let (cy, cx) = obj.center(t, height, width);
            let alpha = Image::from_fn(height, width, 1, |y, x, _| {
                obj.alpha_at(y as f64, x as f64, cy, cx)
            });
            let fg = Image::from_fn(height, width, 3, |y, _, c| {
                obj.color[c] + obj.shade[c] * ((y as f64 - cy) / obj.ry).clamp(-1.0, 1.0)
            });
            rgb = composite(&fg, &rgb, &alpha)?;
            union_alpha = merge_alphas(&union_alpha, &alpha)?;
            masks.push(binarize(&alpha, 0.5)?);
        }
        out_frames.push(rgb);
        out_alphas.push(union_alpha);
        out_masks.push(masks);
    }
    Clip::new(out_frames, out_alphas, out_masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, c: usize, rng: &mut Rng) -> Image {
        Image::from_fn(h, w, c, |_, _, _| rng.next_f64())
    }

    #[test]
    fn composite_endpoints_and_midpoint() {
        let mut rng = Rng::new(2);
        let fg = random_image(4, 5, 3, &mut rng);
        let bg = random_image(4, 5, 3, &mut rng);
        assert_eq!(composite(&fg, &bg, &Image::filled(4, 5, 1, 1.0)).unwrap(), fg);
        assert_eq!(composite(&fg, &bg, &Image::filled(4, 5, 1, 0.0)).unwrap(), bg);
        let out = composite(
            &Image::filled(1, 1, 3, 1.0),
            &Image::zeros(1, 1, 3),
            &Image::filled(1, 1, 1, 0.5),
        )
        .unwrap();
        assert_eq!(out.data(), &[0.5, 0.5, 0.5]);
        assert!(composite(&fg, &Image::zeros(4, 4, 3), &Image::zeros(4, 5, 1)).is_err());
    }

    #[test]
    fn composite_is_linear_in_alpha() {
        let mut rng = Rng::new(3);
        let fg = random_image(6, 6, 3, &mut rng);
        let bg = random_image(6, 6, 3, &mut rng);
        let a1 = Image::from_fn(6, 6, 1, |_, _, _| 0.5 * rng.next_f64());
        let a2 = Image::from_fn(6, 6, 1, |_, _, _| 0.5 * rng.next_f64());
        let sum = Image::from_fn(6, 6, 1, |y, x, _| a1.get(y, x, 0) + a2.get(y, x, 0));
        let i1 = composite(&fg, &bg, &a1).unwrap();
        let i2 = composite(&fg, &bg, &a2).unwrap();
        let i0 = composite(&fg, &bg, &Image::zeros(6, 6, 1)).unwrap();
        let i12 = composite(&fg, &bg, &sum).unwrap();
        for k in 0..i1.data().len() {
            let lhs = i1.data()[k] + i2.data()[k] - i0.data()[k];
            assert!((lhs - i12.data()[k]).abs() < 1e-12);
        }
    }

    fn test_clip(len: usize, seed: u64) -> Clip {
        let mut rng = Rng::new(seed);
        let frames = (0..len).map(|_| random_image(5, 5, 3, &mut rng)).collect();
        let alphas: Vec<Image> = (0..len).map(|_| random_image(5, 5, 1, &mut rng)).collect();
        let masks = alphas.iter().map(|a| vec![binarize(a, 0.5).unwrap()]).collect();
        Clip::new(frames, alphas, masks).unwrap()
    }

    #[test]
    fn sfm_without_injection_is_plain_composite() {
        let (c1, c2) = (test_clip(3, 1), test_clip(3, 2));
        let bg: Vec<Image> = test_clip(3, 9).frames;
        let cfg = AugmentConfig {
            p1: 0.0,
            p2: 0.5,
            seed: 4,
        };
        let out = sfm_compose(&c1, &c2, &bg, &cfg).unwrap();
        assert!(!out.draw.injected);
        for t in 0..3 {
            let plain = composite(&c1.frames[t], &bg[t], &c1.alphas[t]).unwrap();
            assert_eq!(out.clip.frames[t], plain);
            assert_eq!(out.clip.alphas[t], c1.alphas[t]);
            assert_eq!(out.clip.instance_masks[t].len(), 1);
        }
    }

    #[test]
    fn sfm_merged_supervision() {
        let (c1, c2) = (test_clip(2, 5), test_clip(2, 6));
        let bg = test_clip(2, 7).frames;
        let cfg = AugmentConfig {
            p1: 1.0,
            p2: 0.0,
            seed: 0,
        };
        let out = sfm_compose(&c1, &c2, &bg, &cfg).unwrap();
        assert!(out.draw.injected && !out.draw.single_supervision);
        for t in 0..2 {
            let merged = &out.clip.alphas[t];
            for (k, &m) in merged.data().iter().enumerate() {
                let (a, b) = (c1.alphas[t].data()[k], c2.alphas[t].data()[k]);
                assert_eq!(m, 1.0 - (1.0 - a) * (1.0 - b));
                assert!(m >= a.max(b));
            }
            let bn = composite(&c2.frames[t], &bg[t], &c2.alphas[t]).unwrap();
            let expect = composite(&c1.frames[t], &bn, &c1.alphas[t]).unwrap();
            assert_eq!(out.clip.frames[t], expect);
            assert_eq!(out.clip.instance_masks[t].len(), 2);
        }
        let half = Image::filled(1, 1, 1, 0.5);
        assert_eq!(merge_alphas(&half, &half).unwrap().data(), &[0.75]);
    }

    #[test]
    fn sfm_length_mismatch_and_bad_probability() {
        let (c1, c2) = (test_clip(3, 1), test_clip(2, 2));
        let bg = test_clip(3, 3).frames;
        assert!(sfm_compose(&c1, &c2, &bg, &AugmentConfig::default()).is_err());
        let cfg = AugmentConfig {
            p1: 1.5,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn draw_frequencies_track_probabilities() {
        let n = 10_000;
        let (mut inj, mut single) = (0, 0);
        for seed in 0..n {
            let d = AugmentDraw::sample(&AugmentConfig {
                p1: 0.4,
                p2: 0.5,
                seed,
            });
            inj += d.injected as usize;
            single += d.single_supervision as usize;
        }
        assert!((inj as f64 / n as f64 - 0.4).abs() <= 0.02);
        assert!((single as f64 / n as f64 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn synth_single_ellipse_area() {
        for seed in 0..10 {
            let clip = synth_sequence(1, 64, 64, 1, seed).unwrap();
            let area: f64 = clip.alphas[0].data().iter().sum();
            // Recover the ellipse radii from the same seeded stream.
            let mut rng = Rng::new(seed);
            for _ in 0..9 {
                rng.next_f64();
            }
            let ry = rng.uniform(0.12, 0.22) * 64.0;
            let rx = (ry * rng.uniform(0.7, 1.4)).min(0.3 * 64.0);
            let exact = std::f64::consts::PI * ry * rx;
            let h = ((ry - rx) / (ry + rx)).powi(2);
            let perimeter = std::f64::consts::PI
                * (ry + rx)
                * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()));
            assert!((area - exact).abs() <= perimeter, "seed {seed}: {area} vs {exact}");
        }
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_sequence(3, 32, 40, 2, 17).unwrap();
        let b = synth_sequence(3, 32, 40, 2, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_sequence(3, 32, 40, 2, 18).unwrap());
        for t in 0..3 {
            assert!(a.alphas[t].data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.instance_masks[t].len(), 2);
            assert!(a.instance_masks[t].iter().all(Image::is_binary));
        }
        assert!(synth_sequence(0, 32, 32, 1, 0).is_err());
        assert!(synth_sequence(2, 8, 32, 1, 0).is_err());
    }

    #[test]
    fn synth_alpha_vanishes_outside_expanded_box() {
        let obj = Ellipse {
            ry: 6.0,
            rx: 9.0,
            cy0: 0.0,
            cx0: 0.0,
            vy: 0.0,
            vx: 0.0,
            color: [0.0; 3],
            shade: [0.0; 3],
        };
        let (cy, cx) = (15.5, 20.25);
        for y in 0..32 {
            for x in 0..40 {
                let a = obj.alpha_at(y as f64, x as f64, cy, cx);
                let outside = (y as f64 - cy).abs() > obj.ry + EDGE_WIDTH
                    || (x as f64 - cx).abs() > obj.rx + EDGE_WIDTH;
                if outside {
                    assert_eq!(a, 0.0);
                }
            }
        }
    }
}
