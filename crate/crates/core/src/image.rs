//! Frames and alpha mattes as `[0, 1]` float images, plus the resampling
//! and binary morphology used to build cross-frame guidance.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    /// Interleaved `[h, w, c]`.
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(
                "image",
                &[height, width, channels],
                &[data.len()],
            ));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument(format!(
                "image value {} at index {i} is outside [0, 1]",
                data[i]
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image::new(height, width, channels, vec![value; height * width * channels])
            .expect("filled image arguments are valid")
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Build from a per-sample function `f(y, x, c)`; results are clamped to
    /// `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Image::new(height, width, channels, data).expect("from_fn arguments are valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        assert!((0.0..=1.0).contains(&v), "image value {v} outside [0, 1]");
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of samples equal to 1.
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    fn require_single_channel(&self, op: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::Argument(format!(
                "{op} needs a single-channel image, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Bilinear resampling with half-pixel centers (align-corners off). Source
/// coordinates are clamped to the image, so borders replicate.
pub fn resample_bilinear(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Argument(format!(
            "resample target must be at least 1x1, got {new_h}x{new_w}"
        )));
    }
    if (new_h, new_w) == img.dims() {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(new_h, h);
    let xs = axis(new_w, w);
    let mut data = Vec::with_capacity(new_h * new_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(new_h, new_w, c, data)
}

/// `v ≥ thresh → 1`, else `0`.
pub fn binarize(img: &Image, thresh: f64) -> Result<Image> {
    img.require_single_channel("binarize")?;
    let data = img
        .data
        .iter()
        .map(|&v| if v >= thresh { 1.0 } else { 0.0 })
        .collect();
    Image::new(img.height, img.width, 1, data)
}

/// Binary dilation by a `ks × ks` square with zero-padded borders.
pub fn dilate(mask: &Image, ks: usize) -> Result<Image> {
    mask.require_single_channel("dilate")?;
    if ks.is_multiple_of(2) {
        return Err(Error::Config(format!("dilation kernel must be odd, got {ks}")));
    }
    if !mask.is_binary() {
        return Err(Error::Argument("dilate needs a binary mask".into()));
    }
    let r = ks / 2;
    let (h, w) = mask.dims();
    // Separable: a square max filter is a row pass followed by a column pass.
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            if (lo..=hi).any(|xx| mask.data[y * w + xx] == 1.0) {
                rows[y * w + x] = 1.0;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            if (lo..=hi).any(|yy| rows[yy * w + x] == 1.0) {
                out[y * w + x] = 1.0;
            }
        }
    }
    Image::new(h, w, 1, out)
}
