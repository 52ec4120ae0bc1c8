//! Pixel-level temporal matching against a two-slot memory bank.
//!
//! The first frame is kept as long-term memory and attended globally; the
//! most recent frame is short-term memory, attended through a `w × w` window
//! around each query pixel. Memory values are offset by a learned embedding
//! of the stored foreground mask before aggregation:
//!
//! ```text
//! FFAttn(Q, K, V, S) = softmax(Q Kᵀ / √C) (V + FE(S))
//! ```

use serde::{Deserialize, Serialize};

use crate::attention::{attend, MaskedRows};
use crate::error::{Error, Result};
use crate::image::{resample_bilinear, Image};
use crate::params::{ParamSink, ParamSource, Params};
use crate::rng::Rng;
use crate::tensor::{dot, softmax_in_place, LinearLayer, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub channels: usize,
    pub window: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            channels: 128,
            window: 15,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("attention channels must be positive".into()));
        }
        check_window(self.window)
    }
}

fn check_window(w: usize) -> Result<()> {
    if w.is_multiple_of(2) {
        return Err(Error::Config(format!("local window must be odd, got {w}")));
    }
    Ok(())
}

/// Maps a scalar mask value to a `C`-dim additive offset.
#[derive(Debug, Clone, PartialEq)]
pub struct FgEmbedder {
    pub layer: LinearLayer,
}

impl FgEmbedder {
    pub fn seeded(channels: usize, rng: &mut Rng) -> Self {
        FgEmbedder {
            layer: LinearLayer::seeded(1, channels, rng),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        FgEmbedder {
            layer: LinearLayer::zeros(1, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.layer.out_dim()
    }

    /// `V + FE(S)` row by row.
    pub fn augment_values(&self, values: &Tensor, mask: &[f64]) -> Result<Tensor> {
        if values.rows() != mask.len() {
            return Err(Error::Argument(format!(
                "{} value tokens but {} mask values",
                values.rows(),
                mask.len()
            )));
        }
        if values.last_dim() != self.channels() {
            return Err(Error::dim("fg embedding", values.shape(), self.layer.weight.shape()));
        }
        let mut out = values.clone();
        let mut offset = vec![0.0; self.channels()];
        for (r, &s) in mask.iter().enumerate() {
            self.layer.apply_row(&[s], &mut offset);
            for (v, o) in out.row_mut(r).iter_mut().zip(&offset) {
                *v += o;
            }
        }
        Ok(out)
    }
}

/// Frame-to-frame attention over `[tokens, C]` query/key/value tensors and
/// one mask value per memory token.
pub fn ff_attn(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &[f64],
    fe: &FgEmbedder,
) -> Result<Tensor> {
    if k.rows() != v.rows() || k.rows() != mask.len() {
        return Err(Error::Argument(format!(
            "memory token counts differ: {} keys, {} values, {} mask values",
            k.rows(),
            v.rows(),
            mask.len()
        )));
    }
    let values = fe.augment_values(v, mask)?;
    Ok(attend(q, k, &values, None, MaskedRows::Error)?.output)
}

/// One stored frame: projected keys/values cached at insertion time and the
/// predicted mask resampled to feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// 1-based index of the frame this entry came from.
    pub frame: usize,
    pub height: usize,
    pub width: usize,
    /// `[h·w, C]`
    pub keys: Tensor,
    /// `[h·w, C]`
    pub values: Tensor,
    /// `h·w` soft mask values.
    pub mask: Vec<f64>,
}

impl MemoryEntry {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryBank {
    pub long_term: Option<MemoryEntry>,
    pub short_term: Option<MemoryEntry>,
    /// Number of updates so far.
    pub frame_index: usize,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.long_term.is_none()
    }

    /// Frame numbers currently held, long-term first.
    pub fn stored_frames(&self) -> Vec<usize> {
        self.long_term
            .iter()
            .chain(self.short_term.iter())
            .map(|e| e.frame)
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.long_term
            .iter()
            .chain(self.short_term.iter())
            .map(MemoryEntry::tokens)
            .sum()
    }
}

/// Projections and fusion for the temporal branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttention {
    pub config: AttentionConfig,
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub fg_embed: FgEmbedder,
    /// Applied to `F_G + F_L`.
    pub fuse: LinearLayer,
}

impl TemporalAttention {
    pub fn seeded(config: AttentionConfig, in_channels: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(TemporalAttention {
            config,
            query: LinearLayer::seeded(in_channels, c, rng),
            key: LinearLayer::seeded(in_channels, c, rng),
            value: LinearLayer::seeded(in_channels, c, rng),
            fg_embed: FgEmbedder::seeded(c, rng),
            fuse: LinearLayer::seeded(c, c, rng),
        })
    }

    /// Identity projections and fusion with a zero mask embedding. Needs
    /// `in_channels == channels`.
    pub fn identity(config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(TemporalAttention {
            config,
            query: LinearLayer::identity(c),
            key: LinearLayer::identity(c),
            value: LinearLayer::identity(c),
            fg_embed: FgEmbedder::zeros(c),
            fuse: LinearLayer::identity(c),
        })
    }

    fn project(&self, layer: &LinearLayer, feat: &Tensor) -> Result<(usize, usize, Tensor)> {
        let [h, w, _] = feat.dims3("temporal features")?;
        let tokens = feat.clone().flatten_rows();
        Ok((h, w, layer.forward(&tokens)?))
    }

    fn entry_for<'a>(
        &self,
        entry: &'a Option<MemoryEntry>,
        which: &str,
        h: usize,
        w: usize,
    ) -> Result<&'a MemoryEntry> {
        let e = entry
            .as_ref()
            .ok_or_else(|| Error::State(format!("memory bank has no {which} entry")))?;
        if (e.height, e.width) != (h, w) {
            return Err(Error::dim("memory entry", &[e.height, e.width], &[h, w]));
        }
        Ok(e)
    }

    /// Global attention of every current pixel over all long-term tokens.
    pub fn global_attn(&self, current: &Tensor, bank: &MemoryBank) -> Result<Tensor> {
        let (h, w, q) = self.project(&self.query, current)?;
        let long = self.entry_for(&bank.long_term, "long-term", h, w)?;
        let out = ff_attn(&q, &long.keys, &long.values, &long.mask, &self.fg_embed)?;
        out.reshape(&[h, w, self.config.channels])
    }

    /// Local attention over the short-term frame using the configured window.
    pub fn local_attn(&self, current: &Tensor, bank: &MemoryBank) -> Result<Tensor> {
        self.local_attn_window(current, bank, self.config.window)
    }

    /// Local attention with an explicit odd window `w`. Each query pixel sees
    /// the `w × w` neighbourhood clipped to the frame, and the softmax is
    /// taken over that restricted set only.
    pub fn local_attn_window(
        &self,
        current: &Tensor,
        bank: &MemoryBank,
        window: usize,
    ) -> Result<Tensor> {
        check_window(window)?;
        let (h, w, q) = self.project(&self.query, current)?;
        let short = self.entry_for(&bank.short_term, "short-term", h, w)?;
        let values = self.fg_embed.augment_values(&short.values, &short.mask)?;
        let c = self.config.channels;
        let r = window / 2;
        let scale = 1.0 / (c as f64).sqrt();
        let mut out = vec![0.0; h * w * c];
        let mut scores = Vec::with_capacity(window * window);
        let mut idx = Vec::with_capacity(window * window);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let qi = q.row(i);
                scores.clear();
                idx.clear();
                for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                    for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                        let j = yy * w + xx;
                        idx.push(j);
                        scores.push(dot(qi, short.keys.row(j)) * scale);
                    }
                }
                softmax_in_place(&mut scores);
                let dst = &mut out[i * c..(i + 1) * c];
                for (&j, &wj) in idx.iter().zip(&scores) {
                    if wj == 0.0 {
                        continue;
                    }
                    for (o, &v) in dst.iter_mut().zip(values.row(j)) {
                        *o += wj * v;
                    }
                }
            }
        }
        Tensor::new(vec![h, w, c], out)
    }

    /// `fuse(F_G + F_L)`.
    pub fn combine_gl(&self, global: &Tensor, local: &Tensor) -> Result<Tensor> {
        self.fuse.forward(&global.add(local)?)
    }

    /// Self-attention fallback for the first frame: keys and values come from
    /// the current frame and the mask is the initial coarse mask.
    pub fn first_frame_self_attn(
        &self,
        current: &Tensor,
        init_mask: &Image,
        bank: &MemoryBank,
    ) -> Result<Tensor> {
        if bank.frame_index != 0 {
            return Err(Error::State(format!(
                "self-attention fallback is only for the first frame, bank already holds {} frames",
                bank.frame_index
            )));
        }
        let (h, w, q) = self.project(&self.query, current)?;
        let (_, _, k) = self.project(&self.key, current)?;
        let (_, _, v) = self.project(&self.value, current)?;
        let mask = mask_at(init_mask, h, w)?;
        ff_attn(&q, &k, &v, &mask, &self.fg_embed)?.reshape(&[h, w, self.config.channels])
    }

    /// Matched temporal features `F_m` for the current frame.
    pub fn forward(
        &self,
        current: &Tensor,
        bank: &MemoryBank,
        init_mask: Option<&Image>,
    ) -> Result<Tensor> {
        if bank.is_empty() {
            let mask = init_mask.ok_or_else(|| {
                Error::State("first frame needs an initial coarse mask".into())
            })?;
            return self.first_frame_self_attn(current, mask, bank);
        }
        let global = self.global_attn(current, bank)?;
        let local = self.local_attn(current, bank)?;
        self.combine_gl(&global, &local)
    }

    /// Store the frame just processed. The first update fills both slots;
    /// later updates replace the short-term slot only.
    pub fn memory_update(
        &self,
        bank: &mut MemoryBank,
        current: &Tensor,
        pred_mask: &Image,
    ) -> Result<()> {
        let (h, w, keys) = self.project(&self.key, current)?;
        let (_, _, values) = self.project(&self.value, current)?;
        let mask = mask_at(pred_mask, h, w)?;
        bank.frame_index += 1;
        let entry = MemoryEntry {
            frame: bank.frame_index,
            height: h,
            width: w,
            keys,
            values,
            mask,
        };
        if bank.long_term.is_none() {
            bank.long_term = Some(entry.clone());
        }
        bank.short_term = Some(entry);
        Ok(())
    }
}

fn mask_at(mask: &Image, h: usize, w: usize) -> Result<Vec<f64>> {
    if mask.channels() != 1 {
        return Err(Error::Argument("memory masks must be single-channel".into()));
    }
    Ok(resample_bilinear(mask, h, w)?.data().to_vec())
}

impl Params for TemporalAttention {
    fn export(&self, prefix: &str, sink: &mut ParamSink) {
        self.query.export(&format!("{prefix}.query"), sink);
        self.key.export(&format!("{prefix}.key"), sink);
        self.value.export(&format!("{prefix}.value"), sink);
        self.fg_embed.layer.export(&format!("{prefix}.fg_embed"), sink);
        self.fuse.export(&format!("{prefix}.fuse"), sink);
    }

    fn import(&mut self, prefix: &str, source: &mut ParamSource) -> Result<()> {
        self.query.import(&format!("{prefix}.query"), source)?;
        self.key.import(&format!("{prefix}.key"), source)?;
        self.value.import(&format!("{prefix}.value"), source)?;
        self.fg_embed.layer.import(&format!("{prefix}.fg_embed"), source)?;
        self.fuse.import(&format!("{prefix}.fuse"), source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, w: usize) -> AttentionConfig {
        AttentionConfig {
            channels: c,
            window: w,
        }
    }

    fn random_map(h: usize, w: usize, c: usize, rng: &mut Rng) -> Tensor {
        Tensor::random(&[h, w, c], -1.0, 1.0, rng)
    }

    fn random_mask(h: usize, w: usize, rng: &mut Rng) -> Image {
        Image::from_fn(h, w, 1, |_, _, _| rng.next_f64())
    }

    fn banked(t: &TemporalAttention, feat: &Tensor, mask: &Image) -> MemoryBank {
        let mut bank = MemoryBank::new();
        t.memory_update(&mut bank, feat, mask).unwrap();
        bank
    }

    #[test]
    fn single_memory_token_returns_offset_value() {
        let mut rng = Rng::new(1);
        let fe = FgEmbedder::seeded(4, &mut rng);
        let q = Tensor::random(&[3, 4], -1.0, 1.0, &mut rng);
        let k = Tensor::random(&[1, 4], -1.0, 1.0, &mut rng);
        let v = Tensor::random(&[1, 4], -1.0, 1.0, &mut rng);
        let out = ff_attn(&q, &k, &v, &[0.7], &fe).unwrap();
        let expect = fe.augment_values(&v, &[0.7]).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), expect.row(0));
        }
    }

    #[test]
    fn zero_embedding_ignores_mask() {
        let mut rng = Rng::new(2);
        let fe = FgEmbedder::zeros(4);
        let q = Tensor::random(&[3, 4], -1.0, 1.0, &mut rng);
        let k = Tensor::random(&[5, 4], -1.0, 1.0, &mut rng);
        let v = Tensor::random(&[5, 4], -1.0, 1.0, &mut rng);
        let a = ff_attn(&q, &k, &v, &[0.0, 0.1, 0.2, 0.3, 0.4], &fe).unwrap();
        let b = ff_attn(&q, &k, &v, &[1.0, 0.9, 0.0, 0.5, 0.4], &fe).unwrap();
        assert_eq!(a, b);
        assert!(ff_attn(&q, &k, &v, &[0.0; 4], &fe).is_err());
    }

    #[test]
    fn ff_attn_matches_scalar_loop() {
        let mut rng = Rng::new(3);
        let c = 5;
        let fe = FgEmbedder::seeded(c, &mut rng);
        let q = Tensor::random(&[3, c], -1.0, 1.0, &mut rng);
        let k = Tensor::random(&[4, c], -1.0, 1.0, &mut rng);
        let v = Tensor::random(&[4, c], -1.0, 1.0, &mut rng);
        let s: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
        let out = ff_attn(&q, &k, &v, &s, &fe).unwrap();
        let (fw, fb) = (fe.layer.weight.data(), fe.layer.bias.data());
        for i in 0..3 {
            let scores: Vec<f64> = (0..4)
                .map(|j| {
                    (0..c).map(|d| q.data()[i * c + d] * k.data()[j * c + d]).sum::<f64>()
                        / (c as f64).sqrt()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for d in 0..c {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += scores[j].exp() / z * (v.data()[j * c + d] + fw[d] * s[j] + fb[d]);
                }
                assert!((out.data()[i * c + d] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn global_attention_peaks_on_matching_token() {
        let (h, w, c) = (4, 4, 8);
        let mut rng = Rng::new(4);
        let t = TemporalAttention::identity(cfg(c, 3)).unwrap();
        // Unit-norm features: q·k is maximal only for k = q.
        let mut feat = random_map(h, w, c, &mut rng);
        for r in 0..h * w {
            let row = feat.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let bank = banked(&t, &feat, &Image::zeros(h, w, 1));
        let long = bank.long_term.as_ref().unwrap();
        let q = feat.clone().flatten_rows();
        let att = attend(&q, &long.keys, &long.values, None, MaskedRows::Error).unwrap();
        for i in 0..h * w {
            let row = att.weights.row(i);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, i);
        }
        assert_eq!(t.global_attn(&feat, &bank).unwrap().shape(), &[h, w, c]);
    }

    #[test]
    fn global_equals_wide_local_window() {
        let (h, w, c) = (5, 6, 8);
        let mut rng = Rng::new(5);
        let t = TemporalAttention::seeded(cfg(c, 13), c, &mut rng).unwrap();
        let bank = banked(&t, &random_map(h, w, c, &mut rng), &random_mask(h, w, &mut rng));
        let cur = random_map(h, w, c, &mut rng);
        let g = t.global_attn(&cur, &bank).unwrap();
        let l = t.local_attn_window(&cur, &bank, 13).unwrap();
        assert!(g.max_abs_diff(&l).unwrap() <= 1e-10);
    }

    #[test]
    fn unit_window_returns_own_value() {
        let (h, w, c) = (4, 5, 4);
        let mut rng = Rng::new(6);
        let t = TemporalAttention::seeded(cfg(c, 1), c, &mut rng).unwrap();
        let bank = banked(&t, &random_map(h, w, c, &mut rng), &random_mask(h, w, &mut rng));
        let short = bank.short_term.as_ref().unwrap();
        let aug = t.fg_embed.augment_values(&short.values, &short.mask).unwrap();
        let out = t.local_attn(&random_map(h, w, c, &mut rng), &bank).unwrap();
        assert_eq!(out.data(), aug.data());
        assert!(matches!(
            t.local_attn_window(&random_map(h, w, c, &mut rng), &bank, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn local_attention_ignores_tokens_outside_window() {
        let (h, w, c) = (7, 7, 4);
        let mut rng = Rng::new(7);
        let t = TemporalAttention::seeded(cfg(c, 3), c, &mut rng).unwrap();
        let mut bank = banked(&t, &random_map(h, w, c, &mut rng), &random_mask(h, w, &mut rng));
        let cur = random_map(h, w, c, &mut rng);
        let before = t.local_attn(&cur, &bank).unwrap();
        // Token (6, 6) is outside the window of pixel (0, 0).
        let e = bank.short_term.as_mut().unwrap();
        let j = 6 * w + 6;
        e.keys.row_mut(j).iter_mut().for_each(|v| *v += 3.0);
        e.values.row_mut(j).iter_mut().for_each(|v| *v -= 2.0);
        e.mask[j] = 1.0 - e.mask[j];
        let after = t.local_attn(&cur, &bank).unwrap();
        assert_eq!(before.row(0), after.row(0));
    }

    #[test]
    fn combine_identity_and_symmetry() {
        let mut rng = Rng::new(8);
        let t = TemporalAttention::identity(cfg(4, 3)).unwrap();
        let a = random_map(3, 3, 4, &mut rng);
        let b = random_map(3, 3, 4, &mut rng);
        assert_eq!(t.combine_gl(&a, &Tensor::zeros(&[3, 3, 4])).unwrap(), a);
        let t = TemporalAttention::seeded(cfg(4, 3), 4, &mut rng).unwrap();
        assert_eq!(t.combine_gl(&a, &b).unwrap(), t.combine_gl(&b, &a).unwrap());
        assert!(t.combine_gl(&a, &Tensor::zeros(&[3, 2, 4])).is_err());
    }

    #[test]
    fn self_attention_on_constant_map_is_constant() {
        let mut rng = Rng::new(9);
        let t = TemporalAttention::seeded(cfg(8, 3), 8, &mut rng).unwrap();
        let feat = Tensor::full(&[4, 4, 8], 0.3);
        let out = t
            .first_frame_self_attn(&feat, &Image::filled(4, 4, 1, 0.6), &MemoryBank::new())
            .unwrap();
        for r in 1..16 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn self_attention_equals_single_frame_memory() {
        let mut rng = Rng::new(10);
        let (h, w, c) = (4, 4, 8);
        let t = TemporalAttention::seeded(cfg(c, 3), c, &mut rng).unwrap();
        let feat = random_map(h, w, c, &mut rng);
        let mask = random_mask(h, w, &mut rng);
        let own = t.first_frame_self_attn(&feat, &mask, &MemoryBank::new()).unwrap();
        let bank = banked(&t, &feat, &mask);
        assert_eq!(own, t.global_attn(&feat, &bank).unwrap());
        assert!(matches!(
            t.first_frame_self_attn(&feat, &mask, &bank),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn memory_policy_keeps_first_and_latest() {
        let mut rng = Rng::new(11);
        let (h, w, c) = (3, 3, 4);
        let t = TemporalAttention::seeded(cfg(c, 3), c, &mut rng).unwrap();
        let mut bank = MemoryBank::new();
        assert!(t.global_attn(&random_map(h, w, c, &mut rng), &bank).is_err());
        t.memory_update(&mut bank, &random_map(h, w, c, &mut rng), &Image::zeros(h, w, 1))
            .unwrap();
        let first = bank.long_term.clone().unwrap();
        let tokens = bank.token_count();
        for k in 2..=100 {
            t.memory_update(&mut bank, &random_map(h, w, c, &mut rng), &Image::zeros(h, w, 1))
                .unwrap();
            assert_eq!(bank.stored_frames(), vec![1, k]);
            assert_eq!(bank.token_count(), tokens);
            if k == 5 {
                assert_eq!(bank.stored_frames(), vec![1, 5]);
            }
        }
        assert_eq!(bank.long_term.as_ref().unwrap(), &first);
        assert_eq!(bank.frame_index, 100);
    }
}
