//! Dense row-major `f64` tensors and the handful of primitives the rest of the
//! crate is built from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Argument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform entries in `[lo, hi)` drawn in row-major order.
    pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of trailing-dimension rows.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.last_dim();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// View as `[rows, last_dim]`.
    pub fn flatten_rows(self) -> Self {
        let n = self.last_dim();
        let r = self.rows();
        Tensor {
            shape: vec![r, n],
            data: self.data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn transpose(&self) -> Result<Self> {
        let [m, n] = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::dim(op, &self.shape, &[0, 0])),
        }
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(Error::dim(op, &self.shape, &[0, 0, 0])),
        }
    }
}

/// Plain triple-loop matrix product. The inner loop runs over `k` for each
/// output cell in row-major order, so the summation order is fixed.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += ad[i * k + p] * bd[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Softmax of one row in place, with max subtraction. Entries equal to
/// `-inf` come out as exactly `0.0`. Returns `false`, leaving the row
/// untouched, when every entry is `-inf`.
pub fn softmax_in_place(row: &mut [f64]) -> bool {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY {
            0.0
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

/// Row-wise softmax over the trailing dimension.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        if !softmax_in_place(out.row_mut(r)) {
            return Err(Error::MaskedRow { row: r });
        }
    }
    Ok(out)
}

/// Fully connected layer computing `y = x Wᵀ + b` over the trailing dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [out, _] = weight.dims2("linear")?;
        if bias.shape() != [out] {
            return Err(Error::dim("linear bias", weight.shape(), bias.shape()));
        }
        Ok(LinearLayer { weight, bias })
    }

    /// Fan-in uniform init: weights and bias in `[-1/√in, 1/√in)`.
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::random(&[out_dim, in_dim], -bound, bound, rng);
        let bias = Tensor::random(&[out_dim], -bound, bound, rng);
        LinearLayer { weight, bias }
    }

    /// Fan-in uniform weights with a zero bias, so zero maps to zero.
    pub fn seeded_no_bias(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::random(&[out_dim, in_dim], -bound, bound, rng);
        LinearLayer {
            weight,
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn identity(n: usize) -> Self {
        let weight = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        LinearLayer {
            weight,
            bias: Tensor::zeros(&[n]),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Apply to a single feature vector.
    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        let n_in = self.in_dim();
        let w = self.weight.data();
        let b = self.bias.data();
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = dot(&w[o * n_in..(o + 1) * n_in], x) + b[o];
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.last_dim() != self.in_dim() {
            return Err(Error::dim("linear", x.shape(), self.weight.shape()));
        }
        let out_dim = self.out_dim();
        let rows = x.rows();
        let mut data = vec![0.0; rows * out_dim];
        for r in 0..rows {
            self.apply_row(x.row(r), &mut data[r * out_dim..(r + 1) * out_dim]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        Tensor::new(shape, data)
    }
}

/// Fixed 2D sinusoidal positional embedding of shape `[h, w, c]`.
///
/// The first `c/2` channels encode the row, the last `c/2` the column. Within
/// each half, channel `2k` is `sin(p·ω_k)` and `2k+1` is `cos(p·ω_k)` with
/// `ω_k = 10000^(-2k/(c/2))`.
pub fn sinusoidal_pos_embed(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c == 0 || !c.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional embedding needs channels divisible by 4, got {c}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Argument("positional embedding needs h, w ≥ 1".into()));
    }
    let half = c / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|k| 10000f64.powf(-((2 * k) as f64) / half as f64))
        .collect();
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            for (k, &f) in freqs.iter().enumerate() {
                data[base + 2 * k] = (y as f64 * f).sin();
                data[base + 2 * k + 1] = (y as f64 * f).cos();
                data[base + half + 2 * k] = (x as f64 * f).sin();
                data[base + half + 2 * k + 1] = (x as f64 * f).cos();
            }
        }
    }
    Tensor::new(vec![h, w, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_forced_value() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let row = t(&[1, 2], &[1.0, 2.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_random_matches_reference_loop() {
        let mut rng = Rng::new(11);
        let a = Tensor::random(&[7, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::random(&[5, 3], -1.0, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                assert_eq!(got.data()[i * 3 + j].to_bits(), s.to_bits());
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[2], &[0.0, 2f64.ln()])).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let s = softmax_rows(&t(&[3], &[0.3, f64::NEG_INFINITY, -1.2])).unwrap();
        let r = softmax_rows(&t(&[2], &[0.3, -1.2])).unwrap();
        assert_eq!(s.data()[1], 0.0);
        assert_eq!(s.data()[0], r.data()[0]);
        assert_eq!(s.data()[2], r.data()[1]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = t(&[2, 2], &[0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(softmax_rows(&x), Err(Error::MaskedRow { row: 1 })));
    }

    #[test]
    fn linear_examples() {
        let mut rng = Rng::new(5);
        let x = Tensor::random(&[4, 6], -2.0, 2.0, &mut rng);
        assert_eq!(LinearLayer::identity(6).forward(&x).unwrap(), x);

        let mut layer = LinearLayer::zeros(6, 3);
        layer.bias = t(&[3], &[1.0, -2.0, 0.5]);
        let y = layer.forward(&x).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &[1.0, -2.0, 0.5]);
        }

        let layer = LinearLayer::seeded(6, 3, &mut rng);
        let y = layer.forward(&x).unwrap();
        for r in 0..4 {
            for o in 0..3 {
                let mut s = layer.bias.data()[o];
                for i in 0..6 {
                    s += x.data()[r * 6 + i] * layer.weight.data()[o * 6 + i];
                }
                assert!((y.data()[r * 3 + o] - s).abs() < 1e-12);
            }
        }
        assert!(layer.forward(&Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn seeded_layers_are_bit_identical() {
        let a = LinearLayer::seeded(9, 4, &mut Rng::new(99));
        let b = LinearLayer::seeded(9, 4, &mut Rng::new(99));
        assert_eq!(a, b);
    }

    #[test]
    fn pos_embed_zero_phase_and_range() {
        let pe = sinusoidal_pos_embed(16, 16, 32).unwrap();
        let origin = &pe.data()[..32];
        for (ch, v) in origin.iter().enumerate() {
            assert_eq!(*v, if ch % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_pos_embed(4, 4, 30).is_err());
    }

    #[test]
    fn pos_embed_x_step_changes_only_x_channels() {
        let (h, w, c) = (5, 6, 16);
        let pe = sinusoidal_pos_embed(h, w, c).unwrap();
        let at = |y: usize, x: usize| &pe.data()[(y * w + x) * c..(y * w + x + 1) * c];
        let (a, b) = (at(2, 3), at(2, 4));
        assert_eq!(&a[..c / 2], &b[..c / 2]);
        assert!(a[c / 2..].iter().zip(&b[c / 2..]).any(|(p, q)| p != q));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let n = row.len();
            let s = softmax_rows(&Tensor::new(vec![n], row).unwrap()).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn matmul_exact_on_small_integers(
            (m, k, n) in (1usize..6, 1usize..6, 1usize..6),
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let a = Tensor::from_fn(&[m, k], |_| rng.below(1025) as f64);
            let b = Tensor::from_fn(&[k, n], |_| rng.below(1025) as f64);
            let got = matmul(&a, &b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let exact: u64 = (0..k)
                        .map(|p| a.data()[i * k + p] as u64 * b.data()[p * n + j] as u64)
                        .sum();
                    prop_assert_eq!(got.data()[i * n + j], exact as f64);
                }
            }
        }
    }
}
