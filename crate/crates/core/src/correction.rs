//! Object-guided correction and refinement of the temporal pixel features.
//!
//! Object queries are shifted by a learnable foreground/background embedding,
//! attend to the pixel features through a mask derived from the previous
//! frame's prediction, and are then aggregated back into every pixel. A
//! self-attention plus feed-forward block refines the result.

use crate::attention::{attend, MaskedRows};
use crate::error::{Error, Result};
use crate::image::{binarize, dilate, resample_bilinear, Image};
use crate::nn::{concat_channels, relu};
use crate::params::{ParamSink, ParamSource, Params};
use crate::rng::Rng;
use crate::tensor::{dot, sinusoidal_pos_embed, softmax_in_place, LinearLayer, Tensor};

/// Additive cross-frame guidance: `0` where the dilated previous mask is
/// foreground, `-inf` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMask {
    /// `[h, w]`, entries exactly `0` or `-inf`.
    pub values: Tensor,
    /// Number of zero entries.
    pub support: usize,
    /// Frame whose mask produced this guidance.
    pub source_frame: usize,
}

impl GuidanceMask {
    /// An empty support would mask every key; consumers attend unmasked.
    pub fn is_empty(&self) -> bool {
        self.support == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    /// Support as a binary image.
    pub fn support_image(&self) -> Image {
        let (h, w) = self.dims();
        Image::from_fn(h, w, 1, |y, x, _| {
            if self.values.data()[y * w + x] == 0.0 {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Resample the previous mask to feature resolution, binarize at 0.5, dilate
/// with a `ks × ks` square, then map foreground to `0` and background to
/// `-inf`.
pub fn make_guidance(
    prev_mask: &Image,
    feat_h: usize,
    feat_w: usize,
    ks: usize,
    source_frame: usize,
) -> Result<GuidanceMask> {
    if ks.is_multiple_of(2) {
        return Err(Error::Config(format!("dilation kernel must be odd, got {ks}")));
    }
    let resampled = resample_bilinear(prev_mask, feat_h, feat_w)?;
    let support = dilate(&binarize(&resampled, 0.5)?, ks)?;
    let values = support
        .data()
        .iter()
        .map(|&v| if v == 1.0 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Ok(GuidanceMask {
        values: Tensor::new(vec![feat_h, feat_w], values)?,
        support: support.count_ones(),
        source_frame,
    })
}

/// `q_fb = E_fb + q_o`.
pub fn fuse_fb(e_fb: &Tensor, q_o: &Tensor) -> Result<Tensor> {
    if e_fb.shape() != q_o.shape() {
        return Err(Error::Argument(format!(
            "foreground embedding {:?} does not match queries {:?}",
            e_fb.shape(),
            q_o.shape()
        )));
    }
    e_fb.add(q_o)
}

#[derive(Debug, Clone)]
pub struct FqAttended {
    /// `X_m`, `[N, C]`.
    pub output: Tensor,
    /// `[N, h·w]`
    pub weights: Tensor,
    /// The guidance was empty and attention ran unmasked.
    pub unmasked_fallback: bool,
}

/// Self-attention over all pixels followed by a two-layer feed-forward
/// block, each with a residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Refiner {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub ffn_in: LinearLayer,
    pub ffn_out: LinearLayer,
}

impl Refiner {
    pub fn seeded(channels: usize, rng: &mut Rng) -> Self {
        Refiner {
            query: LinearLayer::seeded(channels, channels, rng),
            key: LinearLayer::seeded(channels, channels, rng),
            value: LinearLayer::seeded(channels, channels, rng),
            ffn_in: LinearLayer::seeded(channels, 2 * channels, rng),
            ffn_out: LinearLayer::seeded(2 * channels, channels, rng),
        }
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let [h, w, c] = features.dims3("refine")?;
        let x = features.clone().flatten_rows();
        let sa = attend(
            &self.query.forward(&x)?,
            &self.key.forward(&x)?,
            &self.value.forward(&x)?,
            None,
            MaskedRows::Error,
        )?;
        let x1 = x.add(&sa.output)?;
        let ffn = self.ffn_out.forward(&relu(&self.ffn_in.forward(&x1)?))?;
        x1.add(&ffn)?.reshape(&[h, w, c])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedCorrection {
    /// `E_fb`, `[N, C]`.
    pub e_fb: Tensor,
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    /// `2C → C` over `concat(context, F_m)`.
    pub callback: LinearLayer,
    pub refiner: Refiner,
}

#[derive(Debug, Clone)]
pub struct CorrectionOutput {
    /// `F_o`, `[h, w, C]`.
    pub features: Tensor,
    pub guidance: GuidanceMask,
    /// Frame-to-query attention weights, `[N, h·w]`.
    pub fq_weights: Tensor,
    pub unmasked_fallback: bool,
}

impl GuidedCorrection {
    pub fn seeded(num_queries: usize, channels: usize, rng: &mut Rng) -> Result<Self> {
        if !channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "correction channels must be divisible by 4, got {channels}"
            )));
        }
        Ok(GuidedCorrection {
            e_fb: Tensor::random(&[num_queries, channels], -1.0, 1.0, rng),
            query: LinearLayer::seeded(channels, channels, rng),
            key: LinearLayer::seeded(channels, channels, rng),
            value: LinearLayer::seeded(channels, channels, rng),
            callback: LinearLayer::seeded(2 * channels, channels, rng),
            refiner: Refiner::seeded(channels, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.e_fb.shape()[1]
    }

    /// Frame-to-query cross-attention
    /// `softmax(Q_q K_fᵀ / √C + M_S) V_f`, where `K_f` carries the fixed 2D
    /// sinusoidal positional embedding.
    pub fn fq_attn(
        &self,
        q_fb: &Tensor,
        pixels: &Tensor,
        guidance: &GuidanceMask,
    ) -> Result<FqAttended> {
        let [h, w, c] = pixels.dims3("fq_attn")?;
        if guidance.dims() != (h, w) {
            return Err(Error::Argument(format!(
                "guidance is {:?} but features are {h}x{w}",
                guidance.dims()
            )));
        }
        let tokens = pixels.clone().flatten_rows();
        let keys = self
            .key
            .forward(&tokens)?
            .add(&sinusoidal_pos_embed(h, w, c)?.flatten_rows())?;
        let values = self.value.forward(&tokens)?;
        let queries = self.query.forward(q_fb)?;
        let n = queries.rows();
        let mask;
        let mask_ref = if guidance.is_empty() {
            None
        } else {
            let row = guidance.values.data();
            mask = Tensor::from_fn(&[n, h * w], |i| row[i % (h * w)]);
            Some(&mask)
        };
        let att = attend(&queries, &keys, &values, mask_ref, MaskedRows::Error)?;
        Ok(FqAttended {
            output: att.output,
            weights: att.weights,
            unmasked_fallback: guidance.is_empty(),
        })
    }

    /// Aggregate object context into each pixel with a softmax over objects
    /// of `F_m · X_m / √C`, then project `concat(context, F_m)` back to `C`.
    pub fn callback_correct(&self, x_m: &Tensor, pixels: &Tensor) -> Result<Tensor> {
        let [n, c] = x_m.dims2("callback")?;
        let [h, w, cp] = pixels.dims3("callback")?;
        if c != cp {
            return Err(Error::dim("callback", x_m.shape(), pixels.shape()));
        }
        let scale = 1.0 / (c as f64).sqrt();
        let mut context = vec![0.0; h * w * c];
        let mut aff = vec![0.0; n];
        for p in 0..h * w {
            let f = pixels.row(p);
            for (k, a) in aff.iter_mut().enumerate() {
                *a = dot(f, x_m.row(k)) * scale;
            }
            softmax_in_place(&mut aff);
            let dst = &mut context[p * c..(p + 1) * c];
            for (k, &a) in aff.iter().enumerate() {
                for (d, &xv) in dst.iter_mut().zip(x_m.row(k)) {
                    *d += a * xv;
                }
            }
        }
        let context = Tensor::new(vec![h, w, c], context)?;
        self.callback.forward(&concat_channels(&context, pixels)?)
    }

    pub fn refine(&self, features: &Tensor) -> Result<Tensor> {
        self.refiner.forward(features)
    }

    /// Full correction of `F_m` given the final object queries and the
    /// previous frame's mask.
    pub fn forward(
        &self,
        q_o: &Tensor,
        pixels: &Tensor,
        prev_mask: &Image,
        ks: usize,
        source_frame: usize,
    ) -> Result<CorrectionOutput> {
        let [h, w, _] = pixels.dims3("correction")?;
        let guidance = make_guidance(prev_mask, h, w, ks, source_frame)?;
        let q_fb = fuse_fb(&self.e_fb, q_o)?;
        let fq = self.fq_attn(&q_fb, pixels, &guidance)?;
        let corrected = self.callback_correct(&fq.output, pixels)?;
        let features = self.refine(&corrected)?;
        Ok(CorrectionOutput {
            features,
            guidance,
            fq_weights: fq.weights,
            unmasked_fallback: fq.unmasked_fallback,
        })
    }
}

impl Params for GuidedCorrection {
    fn export(&self, prefix: &str, sink: &mut ParamSink) {
        self.e_fb.export(&format!("{prefix}.e_fb"), sink);
        self.query.export(&format!("{prefix}.query"), sink);
        self.key.export(&format!("{prefix}.key"), sink);
        self.value.export(&format!("{prefix}.value"), sink);
        self.callback.export(&format!("{prefix}.callback"), sink);
        let r = &self.refiner;
        r.query.export(&format!("{prefix}.refine.query"), sink);
        r.key.export(&format!("{prefix}.refine.key"), sink);
        r.value.export(&format!("{prefix}.refine.value"), sink);
        r.ffn_in.export(&format!("{prefix}.refine.ffn_in"), sink);
        r.ffn_out.export(&format!("{prefix}.refine.ffn_out"), sink);
    }

    fn import(&mut self, prefix: &str, source: &mut ParamSource) -> Result<()> {
        self.e_fb.import(&format!("{prefix}.e_fb"), source)?;
        self.query.import(&format!("{prefix}.query"), source)?;
        self.key.import(&format!("{prefix}.key"), source)?;
        self.value.import(&format!("{prefix}.value"), source)?;
        self.callback.import(&format!("{prefix}.callback"), source)?;
        let r = &mut self.refiner;
        r.query.import(&format!("{prefix}.refine.query"), source)?;
        r.key.import(&format!("{prefix}.refine.key"), source)?;
        r.value.import(&format!("{prefix}.refine.value"), source)?;
        r.ffn_in.import(&format!("{prefix}.refine.ffn_in"), source)?;
        r.ffn_out.import(&format!("{prefix}.refine.ffn_out"), source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(n: usize, c: usize, seed: u64) -> GuidedCorrection {
        GuidedCorrection::seeded(n, c, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn guidance_extremes() {
        let full = make_guidance(&Image::filled(32, 32, 1, 1.0), 4, 4, 3, 1).unwrap();
        assert!(full.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(full.support, 16);
        let empty = make_guidance(&Image::zeros(32, 32, 1), 4, 4, 3, 1).unwrap();
        assert!(empty.is_empty());
        assert!(matches!(
            make_guidance(&Image::zeros(8, 8, 1), 4, 4, 2, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_center_pixel_dilates_to_nine() {
        let mut m = Image::zeros(7, 7, 1);
        m.set(3, 3, 0, 1.0);
        let g = make_guidance(&m, 7, 7, 3, 1).unwrap();
        assert_eq!(g.support, 9);
        let zeros = g.values.data().iter().filter(|&&v| v == 0.0).count();
        let neg = g.values.data().iter().filter(|&&v| v == f64::NEG_INFINITY).count();
        assert_eq!((zeros, neg), (9, 40));
    }

    #[test]
    fn fuse_fb_is_elementwise_sum() {
        let mut rng = Rng::new(1);
        let e = Tensor::random(&[3, 4], -1.0, 1.0, &mut rng);
        let q = Tensor::random(&[3, 4], -1.0, 1.0, &mut rng);
        assert_eq!(fuse_fb(&Tensor::zeros(&[3, 4]), &q).unwrap(), q);
        assert_eq!(fuse_fb(&e, &Tensor::zeros(&[3, 4])).unwrap(), e);
        let s = fuse_fb(&e, &q).unwrap();
        for i in 0..12 {
            assert_eq!(s.data()[i], e.data()[i] + q.data()[i]);
        }
        assert!(fuse_fb(&e, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn zero_guidance_equals_unmasked_attention() {
        let mut rng = Rng::new(2);
        let m = model(3, 8, 3);
        let q = Tensor::random(&[3, 8], -1.0, 1.0, &mut rng);
        let f = Tensor::random(&[4, 4, 8], -1.0, 1.0, &mut rng);
        let full = make_guidance(&Image::filled(4, 4, 1, 1.0), 4, 4, 3, 1).unwrap();
        let empty = make_guidance(&Image::zeros(4, 4, 1), 4, 4, 3, 1).unwrap();
        let a = m.fq_attn(&q, &f, &full).unwrap();
        let b = m.fq_attn(&q, &f, &empty).unwrap();
        assert!(b.unmasked_fallback && !a.unmasked_fallback);
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn singleton_support_returns_that_value() {
        let mut rng = Rng::new(4);
        let m = model(3, 8, 5);
        let q = Tensor::random(&[3, 8], -1.0, 1.0, &mut rng);
        let f = Tensor::random(&[5, 5, 8], -1.0, 1.0, &mut rng);
        let mut prev = Image::zeros(5, 5, 1);
        prev.set(1, 3, 0, 1.0);
        let g = make_guidance(&prev, 5, 5, 1, 1).unwrap();
        assert_eq!(g.support, 1);
        let out = m.fq_attn(&q, &f, &g).unwrap();
        let v = m.value.forward(&f.clone().flatten_rows()).unwrap();
        for i in 0..3 {
            assert_eq!(out.output.row(i), v.row(5 + 3));
        }
    }

    #[test]
    fn masked_pixels_have_no_influence() {
        let mut rng = Rng::new(6);
        let m = model(4, 8, 7);
        let q = Tensor::random(&[4, 8], -1.0, 1.0, &mut rng);
        let mut f = Tensor::random(&[6, 6, 8], -1.0, 1.0, &mut rng);
        let prev = Image::from_fn(6, 6, 1, |y, x, _| if y < 2 && x < 3 { 1.0 } else { 0.0 });
        let g = make_guidance(&prev, 6, 6, 1, 1).unwrap();
        let before = m.fq_attn(&q, &f, &g).unwrap();
        for p in 0..36 {
            if g.values.data()[p] == f64::NEG_INFINITY {
                f.row_mut(p).iter_mut().for_each(|v| *v = 5.0 * *v - 1.0);
                for (i, w) in before.weights.data().iter().enumerate() {
                    if i % 36 == p {
                        assert_eq!(*w, 0.0);
                    }
                }
            }
        }
        let after = m.fq_attn(&q, &f, &g).unwrap();
        assert_eq!(before.output, after.output);
    }

    #[test]
    fn callback_single_object_and_zero_context() {
        let mut rng = Rng::new(8);
        let m = model(1, 8, 9);
        let f = Tensor::random(&[3, 3, 8], -1.0, 1.0, &mut rng);
        let x1 = Tensor::random(&[1, 8], -1.0, 1.0, &mut rng);
        let out = m.callback_correct(&x1, &f).unwrap();
        let ctx = Tensor::from_fn(&[3, 3, 8], |i| x1.data()[i % 8]);
        let expect = m.callback.forward(&concat_channels(&ctx, &f).unwrap()).unwrap();
        assert_eq!(out, expect);

        let zero = m.callback_correct(&Tensor::zeros(&[3, 8]), &f).unwrap();
        let expect = m
            .callback
            .forward(&concat_channels(&Tensor::zeros(&[3, 3, 8]), &f).unwrap())
            .unwrap();
        assert_eq!(zero, expect);
        assert!(m.callback_correct(&Tensor::zeros(&[2, 4]), &f).is_err());
    }

    #[test]
    fn refine_constant_map_stays_constant() {
        let m = model(2, 8, 10);
        let x = Tensor::full(&[3, 4, 8], 0.7);
        let y = m.refine(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        for r in 1..12 {
            assert_eq!(y.row(r), y.row(0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(11);
        let m = model(3, 8, 12);
        let q = Tensor::random(&[3, 8], -1.0, 1.0, &mut rng);
        let f = Tensor::random(&[4, 4, 8], -1.0, 1.0, &mut rng);
        let prev = Image::from_fn(16, 16, 1, |y, _, _| if y < 8 { 1.0 } else { 0.0 });
        let a = m.forward(&q, &f, &prev, 3, 1).unwrap();
        let b = m.forward(&q, &f, &prev, 3, 1).unwrap();
        assert_eq!(a.features, b.features);
        assert!(a.features.is_finite());
        assert!(m.forward(&q, &f, &prev, 3, 1).unwrap().guidance.support > 0);
    }

    #[test]
    fn guidance_translates_with_the_mask() {
        let mut rng = Rng::new(13);
        for _ in 0..20 {
            let base = Image::from_fn(10, 10, 1, |_, _, _| if rng.chance(0.15) { 1.0 } else { 0.0 });
            let shifted = Image::from_fn(10, 10, 1, |y, x, _| if x == 0 { 0.0 } else { base.get(y, x - 1, 0) });
            let a = make_guidance(&base, 10, 10, 3, 1).unwrap().support_image();
            let b = make_guidance(&shifted, 10, 10, 3, 1).unwrap().support_image();
            // Compare away from the borders the shift and dilation can touch.
            for y in 0..10 {
                for x in 3..8 {
                    assert_eq!(b.get(y, x, 0), a.get(y, x - 1, 0));
                }
            }
        }
    }
}
