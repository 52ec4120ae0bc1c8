//! Sequential inference: backbone, temporal matching, object queries,
//! guided correction, matting decoder, memory update.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::correction::GuidedCorrection;
use crate::error::{Error, Result};
use crate::image::{binarize, Image};
use crate::manifest::Manifest;
use crate::metrics::MetricsReport;
use crate::nn::{avg_pool2, concat_channels, relu, sigmoid, upsample_nearest2, ChannelNorm, Conv2d};
use crate::params::{self, ParamSink, ParamSource, Params};
use crate::pnm::{self, BitDepth};
use crate::query::{InstancePrediction, ObjectQueryGenerator};
use crate::rng::Rng;
use crate::temporal::{MemoryBank, TemporalAttention};
use crate::tensor::{LinearLayer, Tensor};

/// Frame sides must be multiples of this before the backbone.
pub const STRIDE: usize = 16;

pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::new(vec![img.height(), img.width(), img.channels()], img.data().to_vec())
        .expect("image dims match its data")
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Extend the bottom and right edges by mirror reflection.
pub fn reflect_pad(img: &Image, pad_h: usize, pad_w: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    Image::from_fn(h + pad_h, w + pad_w, img.channels(), |y, x, c| {
        img.get(reflect(y, h), reflect(x, w), c)
    })
}

pub fn crop(img: &Image, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, img.channels(), |y, x, c| img.get(y, x, c))
}

pub fn padding_for(h: usize, w: usize) -> (usize, usize) {
    ((STRIDE - h % STRIDE) % STRIDE, (STRIDE - w % STRIDE) % STRIDE)
}

/// Four levels at strides 2, 4, 8, 16, each a bias-free 3×3 conv, ReLU and
/// 2× average pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub levels: Vec<Conv2d>,
}

impl Backbone {
    pub fn seeded(widths: [usize; 4], rng: &mut Rng) -> Self {
        let mut in_ch = 3;
        let levels = widths
            .iter()
            .map(|&w| {
                let conv = Conv2d::seeded(in_ch, w, 3, rng);
                in_ch = w;
                conv
            })
            .collect();
        Backbone { levels }
    }

    pub fn forward(&self, frame: &Image) -> Result<Vec<Tensor>> {
        if frame.channels() != 3 {
            return Err(Error::Argument("backbone expects an RGB frame".into()));
        }
        let (h, w) = (frame.height(), frame.width());
        if h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::Argument(format!(
                "backbone input {h}x{w} is not a multiple of {STRIDE}"
            )));
        }
        let mut x = image_tensor(frame);
        let mut out = Vec::with_capacity(4);
        for conv in &self.levels {
            x = avg_pool2(&relu(&conv.forward(&x)?))?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Upsampling decoder from the stride-16 corrected features to full
/// resolution, with skips from the pyramid and finally the frame itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MattingDecoder {
    pub convs: Vec<Conv2d>,
    pub norms: Vec<ChannelNorm>,
    pub alpha_head: LinearLayer,
    pub mask_head: LinearLayer,
}

impl MattingDecoder {
    pub fn seeded(channels: usize, backbone: [usize; 4], widths: [usize; 4], rng: &mut Rng) -> Self {
        let skips = [backbone[2], backbone[1], backbone[0], 3];
        let mut in_ch = channels;
        let mut convs = Vec::with_capacity(4);
        for (&skip, &w) in skips.iter().zip(&widths) {
            convs.push(Conv2d::seeded(in_ch + skip, w, 3, rng));
            in_ch = w;
        }
        MattingDecoder {
            convs,
            norms: widths.iter().map(|&w| ChannelNorm::new(w)).collect(),
            alpha_head: LinearLayer::seeded_no_bias(widths[3], 1, rng),
            mask_head: LinearLayer::seeded_no_bias(widths[3], 1, rng),
        }
    }

    /// Returns `(alpha, fg_mask)` at the frame's resolution.
    pub fn forward(&self, features: &Tensor, pyramid: &[Tensor], frame: &Image) -> Result<(Image, Image)> {
        let rgb = image_tensor(frame);
        let skips = [&pyramid[2], &pyramid[1], &pyramid[0], &rgb];
        let mut x = features.clone();
        for ((conv, norm), skip) in self.convs.iter().zip(&self.norms).zip(skips) {
            let up = upsample_nearest2(&x)?;
            x = relu(&norm.forward(&conv.forward(&concat_channels(&up, skip)?)?)?);
        }
        let [h, w, _] = x.dims3("matting decoder")?;
        let alpha = self.alpha_head.forward(&x)?;
        let mask = self.mask_head.forward(&x)?;
        let alpha = Image::new(
            h,
            w,
            1,
            alpha.data().iter().map(|&v| sigmoid(v).clamp(0.0, 1.0)).collect(),
        )?;
        let soft = Image::new(h, w, 1, mask.data().iter().map(|&v| sigmoid(v)).collect())?;
        Ok((alpha, binarize(&soft, 0.5)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub temporal: TemporalAttention,
    pub queries: ObjectQueryGenerator,
    pub correction: GuidedCorrection,
    pub decoder: MattingDecoder,
}

impl Model {
    pub fn seeded(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let bb = cfg.backbone_channels;
        Ok(Model {
            backbone: Backbone::seeded(bb, &mut rng.fork()),
            temporal: TemporalAttention::seeded(cfg.attention(), bb[3], &mut rng.fork())?,
            queries: ObjectQueryGenerator::seeded(bb, cfg.channels, cfg.num_queries, &mut rng.fork())?,
            correction: GuidedCorrection::seeded(cfg.num_queries, cfg.channels, &mut rng.fork())?,
            decoder: MattingDecoder::seeded(cfg.channels, bb, cfg.decoder_channels, &mut rng.fork()),
        })
    }

    /// Seeded model, then overwritten from `cfg.weights` when set.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let mut model = Self::seeded(cfg)?;
        if let Some(path) = &cfg.weights {
            let records = params::load_weights(path)?
                .into_iter()
                .map(|(h, t)| (h.name, t))
                .collect();
            let mut source = ParamSource::new(records);
            model.import("model", &mut source).map_err(|e| e.in_file(path))?;
            let left = source.leftover();
            if !left.is_empty() {
                return Err(Error::Config(format!("unused weights: {}", left.join(", "))).in_file(path));
            }
        }
        Ok(model)
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        let mut sink = ParamSink::default();
        self.export("model", &mut sink);
        sink.into_records()
    }
}

impl Params for Model {
    fn export(&self, prefix: &str, sink: &mut ParamSink) {
        for (i, c) in self.backbone.levels.iter().enumerate() {
            c.export(&format!("{prefix}.backbone.level{i}"), sink);
        }
        self.temporal.export(&format!("{prefix}.temporal"), sink);
        self.queries.export(&format!("{prefix}.queries"), sink);
        self.correction.export(&format!("{prefix}.correction"), sink);
        let d = &self.decoder;
        for (i, (c, n)) in d.convs.iter().zip(&d.norms).enumerate() {
            c.export(&format!("{prefix}.decoder.block{i}.conv"), sink);
            n.export(&format!("{prefix}.decoder.block{i}.norm"), sink);
        }
        d.alpha_head.export(&format!("{prefix}.decoder.alpha_head"), sink);
        d.mask_head.export(&format!("{prefix}.decoder.mask_head"), sink);
    }

    fn import(&mut self, prefix: &str, source: &mut ParamSource) -> Result<()> {
        for (i, c) in self.backbone.levels.iter_mut().enumerate() {
            c.import(&format!("{prefix}.backbone.level{i}"), source)?;
        }
        self.temporal.import(&format!("{prefix}.temporal"), source)?;
        self.queries.import(&format!("{prefix}.queries"), source)?;
        self.correction.import(&format!("{prefix}.correction"), source)?;
        let d = &mut self.decoder;
        for (i, (c, n)) in d.convs.iter_mut().zip(d.norms.iter_mut()).enumerate() {
            c.import(&format!("{prefix}.decoder.block{i}.conv"), source)?;
            n.import(&format!("{prefix}.decoder.block{i}.norm"), source)?;
        }
        d.alpha_head.import(&format!("{prefix}.decoder.alpha_head"), source)?;
        d.mask_head.import(&format!("{prefix}.decoder.mask_head"), source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    /// 1-based.
    pub frame: usize,
    /// `"self"` on the first frame, `"memory"` afterwards.
    pub attention: String,
    /// Frames held in memory while this frame was matched.
    pub memory_frames: Vec<usize>,
    pub memory_tokens: usize,
    /// 0 means the initial coarse mask.
    pub guidance_source_frame: usize,
    pub guidance_support: usize,
    pub guidance_empty: bool,
    pub fq_max_weight: f64,
    pub alpha_mean: f64,
    pub fg_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    /// Cropped to the input size.
    pub alpha: Image,
    pub fg_mask: Image,
    pub diagnostics: FrameDiagnostics,
    /// Only filled when the set-prediction head is enabled.
    pub instances: Option<InstancePrediction>,
}

/// Per-sequence inference state.
#[derive(Debug, Clone)]
pub struct Session<'a> {
    model: &'a Model,
    cfg: &'a PipelineConfig,
    pub bank: MemoryBank,
    /// Padded mask guiding the next frame.
    prev_mask: Option<Image>,
    frame: usize,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a Model, cfg: &'a PipelineConfig) -> Self {
        Session {
            model,
            cfg,
            bank: MemoryBank::new(),
            prev_mask: None,
            frame: 0,
        }
    }

    /// Process the next frame. The initial coarse mask is required on the
    /// first frame and ignored afterwards.
    pub fn infer_frame(&mut self, frame: &Image, init_mask: Option<&Image>) -> Result<FrameResult> {
        let (h, w) = (frame.height(), frame.width());
        let (ph, pw) = padding_for(h, w);
        let padded = reflect_pad(frame, ph, pw);
        let first = self.frame == 0;
        let prev = if first {
            let m = init_mask.ok_or_else(|| {
                Error::Argument("the first frame needs an initial coarse mask".into())
            })?;
            if m.channels() != 1 || (m.height(), m.width()) != (h, w) {
                return Err(Error::Argument(format!(
                    "initial mask is {:?}, frame is {h}x{w}",
                    m.dims()
                )));
            }
            reflect_pad(&binarize(m, 0.5)?, ph, pw)
        } else {
            let p = self.prev_mask.take().expect("mask kept after each frame");
            if (p.height(), p.width()) != (padded.height(), padded.width()) {
                return Err(Error::Argument("frame size changed mid-sequence".into()));
            }
            p
        };

        let model = self.model;
        let pyramid = model.backbone.forward(&padded)?;
        let memory_frames = self.bank.stored_frames();
        let memory_tokens = self.bank.token_count();
        let matched = model.temporal.forward(&pyramid[3], &self.bank, Some(&prev))?;
        let pixels = model.queries.pixel_decode(&pyramid)?;
        let qs = model.queries.generate_queries(&pixels)?;
        let instances = if self.cfg.set_prediction {
            Some(model.queries.predict_instance_masks(&qs.queries, &pixels)?)
        } else {
            None
        };
        let corrected =
            model
                .correction
                .forward(&qs.queries, &matched, &prev, self.cfg.dilation, self.frame)?;
        let (alpha, fg_mask) = model.decoder.forward(&corrected.features, &pyramid, &padded)?;
        model.temporal.memory_update(&mut self.bank, &pyramid[3], &fg_mask)?;
        self.frame += 1;

        let alpha = crop(&alpha, h, w);
        let cropped_mask = crop(&fg_mask, h, w);
        self.prev_mask = Some(fg_mask);
        let n = (h * w) as f64;
        let diagnostics = FrameDiagnostics {
            frame: self.frame,
            attention: if first { "self" } else { "memory" }.into(),
            memory_frames,
            memory_tokens,
            guidance_source_frame: corrected.guidance.source_frame,
            guidance_support: corrected.guidance.support,
            guidance_empty: corrected.guidance.is_empty(),
            fq_max_weight: corrected.fq_weights.data().iter().copied().fold(0.0, f64::max),
            alpha_mean: alpha.data().iter().sum::<f64>() / n,
            fg_fraction: cropped_mask.count_ones() as f64 / n,
        };
        Ok(FrameResult {
            alpha,
            fg_mask: cropped_mask,
            diagnostics,
            instances,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDiagnostics {
    pub seed: u64,
    pub input_size: [usize; 2],
    pub padded_size: [usize; 2],
    /// Frames were reflect-padded at the bottom and right to a multiple of
    /// the backbone stride.
    pub padded: bool,
    pub config: PipelineConfig,
    pub frames: Vec<FrameDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub results: Vec<FrameResult>,
    pub diagnostics: SequenceDiagnostics,
    pub metrics: Option<MetricsReport>,
    /// File name to contents, in write order.
    pub files: BTreeMap<String, Vec<u8>>,
}

pub fn alpha_name(i: usize) -> String {
    format!("alpha_{:04}.pgm", i + 1)
}

pub fn mask_name(i: usize) -> String {
    format!("mask_{:04}.pgm", i + 1)
}

/// Run a whole clip. Nothing is written; see [`write_outputs`].
pub fn run_sequence(manifest: &Manifest, init_mask: &Image, cfg: &PipelineConfig) -> Result<SequenceOutput> {
    let frames = manifest.load_frames()?;
    let gt = manifest.load_alphas()?;
    let model = Model::from_config(cfg)?;
    let mut session = Session::new(&model, cfg);
    let mut results = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        results.push(session.infer_frame(f, Some(init_mask)).map_err(|e| e.in_frame(i + 1))?);
    }

    let mut files = BTreeMap::new();
    let mut quantized = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        let bytes = pnm::encode(&r.alpha, cfg.depth());
        quantized.push(pnm::decode(&bytes)?);
        files.insert(alpha_name(i), bytes);
        files.insert(mask_name(i), pnm::encode(&r.fg_mask, BitDepth::Eight));
    }

    let (h, w) = (frames[0].height(), frames[0].width());
    let (ph, pw) = padding_for(h, w);
    let diagnostics = SequenceDiagnostics {
        seed: cfg.seed,
        input_size: [h, w],
        padded_size: [h + ph, w + pw],
        padded: ph + pw > 0,
        config: cfg.clone(),
        frames: results.iter().map(|r| r.diagnostics.clone()).collect(),
    };
    files.insert("diagnostics.json".into(), to_json_bytes(&diagnostics));

    let mut pred = Manifest::new(
        manifest
            .frames
            .iter()
            .map(|f| {
                let p = manifest.resolve(f);
                p.canonicalize()
                    .map(|c| c.to_string_lossy().into_owned())
                    .map_err(|e| Error::io(p, e))
            })
            .collect::<Result<_>>()?,
    );
    pred.alphas = Some((0..results.len()).map(alpha_name).collect());
    pred.masks = Some((0..results.len()).map(mask_name).collect());
    pred.fps = manifest.fps;
    pred.seed = Some(cfg.seed);
    files.insert("manifest.json".into(), pred.to_json().into_bytes());

    let metrics = match &gt {
        Some(gt) => {
            let report = MetricsReport::evaluate(&quantized, gt, cfg.per_frame_metrics)?;
            files.insert("metrics.json".into(), report.to_json().into_bytes());
            if cfg.per_frame_metrics {
                files.insert("metrics.csv".into(), report.to_csv().into_bytes());
            }
            Some(report)
        }
        None => None,
    };
    Ok(SequenceOutput {
        results,
        diagnostics,
        metrics,
        files,
    })
}

fn to_json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

pub fn write_outputs(out: &SequenceOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in &out.files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{dilate, resample_bilinear};

    pub(crate) fn small_config() -> PipelineConfig {
        PipelineConfig {
            channels: 16,
            window: 3,
            num_queries: 3,
            backbone_channels: [4, 6, 8, 8],
            decoder_channels: [8, 6, 4, 4],
            ..PipelineConfig::default()
        }
    }

    fn frame(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.next_f64())
    }

    #[test]
    fn backbone_levels_and_linearity() {
        let cfg = small_config();
        let m = Model::seeded(&cfg).unwrap();
        let p = m.backbone.forward(&frame(64, 64, 1)).unwrap();
        let sizes: Vec<_> = p.iter().map(|t| t.shape()[0]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4]);
        let z = m.backbone.forward(&Image::zeros(32, 32, 3)).unwrap();
        assert!(z.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(m.backbone.forward(&frame(40, 32, 1)).is_err());
        let again = Model::seeded(&cfg).unwrap().backbone.forward(&frame(64, 64, 1)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn reflect_padding() {
        let img = Image::from_fn(3, 2, 1, |y, x, _| (y * 2 + x) as f64 / 10.0);
        let p = reflect_pad(&img, 3, 2);
        assert_eq!(p.dims(), (6, 4));
        assert_eq!(p.get(3, 0, 0), img.get(1, 0, 0));
        assert_eq!(p.get(4, 0, 0), img.get(0, 0, 0));
        assert_eq!(p.get(0, 2, 0), img.get(0, 0, 0));
        assert_eq!(crop(&p, 3, 2), img);
        assert_eq!(padding_for(64, 50), (0, 14));
    }

    #[test]
    fn frame_outputs_and_diagnostics() {
        let cfg = small_config();
        let m = Model::seeded(&cfg).unwrap();
        let mut s = Session::new(&m, &cfg);
        let init = Image::from_fn(32, 32, 1, |y, x, _| if y < 20 && x > 8 { 1.0 } else { 0.0 });
        assert!(s.clone().infer_frame(&frame(32, 32, 2), None).is_err());
        let mut prev = init.clone();
        for k in 0..4 {
            let r = s.infer_frame(&frame(32, 32, 2 + k), Some(&init)).unwrap();
            assert!(r.alpha.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(r.fg_mask.is_binary());
            let expect = dilate(&binarize(&resample_bilinear(&prev, 2, 2).unwrap(), 0.5).unwrap(), 3)
                .unwrap()
                .count_ones();
            assert_eq!(r.diagnostics.guidance_support, expect);
            assert_eq!(r.diagnostics.guidance_source_frame, k as usize);
            prev = r.fg_mask.clone();
            assert_eq!(s.bank.stored_frames(), if k == 0 { vec![1, 1] } else { vec![1, k as usize + 1] });
        }
    }

    #[test]
    fn full_initial_mask_covers_grid() {
        let cfg = small_config();
        let m = Model::seeded(&cfg).unwrap();
        let mut s = Session::new(&m, &cfg);
        let r = s
            .infer_frame(&frame(64, 48, 3), Some(&Image::filled(64, 48, 1, 1.0)))
            .unwrap();
        assert_eq!(r.diagnostics.guidance_support, 4 * 3);
        assert_eq!(r.diagnostics.attention, "self");
    }

    #[test]
    fn set_prediction_does_not_touch_outputs() {
        let off = small_config();
        let on = PipelineConfig {
            set_prediction: true,
            ..off.clone()
        };
        let m = Model::seeded(&off).unwrap();
        let init = Image::from_fn(32, 32, 1, |y, _, _| if y < 16 { 1.0 } else { 0.0 });
        let (mut a, mut b) = (Session::new(&m, &off), Session::new(&m, &on));
        for k in 0..3 {
            let f = frame(32, 32, 10 + k);
            let ra = a.infer_frame(&f, Some(&init)).unwrap();
            let rb = b.infer_frame(&f, Some(&init)).unwrap();
            assert!(ra.instances.is_none() && rb.instances.is_some());
            assert_eq!(ra.alpha, rb.alpha);
            assert_eq!(ra.fg_mask, rb.fg_mask);
            assert_eq!(ra.diagnostics, rb.diagnostics);
        }
    }

    #[test]
    fn weights_round_trip() {
        let cfg = small_config();
        let m = Model::seeded(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        params::save_weights(&path, &m.records(), cfg.seed).unwrap();
        let other = PipelineConfig {
            seed: 99,
            weights: Some(path),
            ..cfg
        };
        assert_eq!(Model::from_config(&other).unwrap(), m);
    }
}
