use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{numel, Tensor};
use crate::error::{Error, Result};

/// The recorded operation behind a graph node. Only parents are stored;
/// backward rules recompute whatever else they need from them.
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    /// `scale * x + offset`; the offset does not enter the backward rule.
    Affine(Tensor, f64),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    /// Elementwise product with a constant mask (relu and its adjoint).
    MaskMul(Tensor, Arc<[f64]>),
    Sigmoid(Tensor),
    Softplus(Tensor),
    Sum(Tensor),
    Expand(Tensor),
    AddBias(Tensor, Tensor),
    SumRows(Tensor),
    ExpandRows(Tensor),
    Reshape(Tensor),
    Im2Col(Tensor, ConvGeometry),
    Col2Im(Tensor, ConvGeometry),
    Gather(Tensor, Arc<[usize]>),
    Scatter(Tensor, Arc<[usize]>),
}

impl Op {
    pub(crate) fn parents(&self) -> impl Iterator<Item = &Tensor> {
        let (a, b): (Option<&Tensor>, Option<&Tensor>) = match self {
            Op::Leaf => (None, None),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b) => (Some(a), Some(b)),
            Op::Affine(a, _)
            | Op::Transpose(a)
            | Op::MaskMul(a, _)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::SumRows(a)
            | Op::ExpandRows(a)
            | Op::Reshape(a)
            | Op::Im2Col(a, _)
            | Op::Col2Im(a, _)
            | Op::Gather(a, _)
            | Op::Scatter(a, _) => (Some(a), None),
        };
        a.into_iter().chain(b).filter(|t| t.is_tracked())
    }
}

/// Geometry of a 3×3, stride 1, zero-padded convolution over NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ConvGeometry {
    const KERNEL: usize = 3;

    fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    fn cols_shape(&self) -> [usize; 2] {
        [
            self.batch * self.height * self.width,
            Self::KERNEL * Self::KERNEL * self.channels,
        ]
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (h, w, c) = (self.height, self.width, self.channels);
        let row_len = Self::KERNEL * Self::KERNEL * c;
        for b in 0..self.batch {
            for y in 0..h {
                for x in 0..w {
                    let row = (b * h + y) * w + x;
                    for ky in 0..Self::KERNEL {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let sy = sy - 1;
                        for kx in 0..Self::KERNEL {
                            let sx = x + kx;
                            if sx < 1 || sx > w {
                                continue;
                            }
                            let sx = sx - 1;
                            let col0 = row * row_len + (ky * Self::KERNEL + kx) * c;
                            let in0 = ((b * h + sy) * w + sx) * c;
                            for ch in 0..c {
                                f(col0 + ch, in0 + ch);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_finite(op: &'static str, inputs: &[&Tensor]) -> Result<()> {
    if inputs.iter().all(|t| t.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(op))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, t.shape(), &[])),
    }
}

impl Tensor {
    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        same_shape(op, self, other)?;
        check_finite(op, &[self, other])?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(Tensor::from_op(self.shape(), data, tracked, || {
            make(self.clone(), other.clone())
        }))
    }

    fn map_unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(Tensor) -> Op,
    ) -> Result<Tensor> {
        check_finite(op, &[self])?;
        let data = self.data().iter().map(|&v| f(v)).collect();
        Ok(Tensor::from_op(
            self.shape(),
            data,
            self.is_tracked(),
            || make(self.clone()),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.affine(factor, 0.0)
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&self, scale: f64, offset: f64) -> Result<Tensor> {
        if !scale.is_finite() || !offset.is_finite() {
            return Err(Error::non_finite("affine coefficients"));
        }
        self.map_unary("affine", |v| scale * v + offset, |t| Op::Affine(t, scale))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = matrix_dims("matmul", self)?;
        let (k2, m) = matrix_dims("matmul", other)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        check_finite("matmul", &[self, other])?;
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(Tensor::from_op(&[n, m], out, tracked, || {
            Op::MatMul(self.clone(), other.clone())
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = matrix_dims("transpose", self)?;
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_op(&[c, r], out, self.is_tracked(), || {
            Op::Transpose(self.clone())
        }))
    }

    pub fn relu(&self) -> Result<Tensor> {
        check_finite("relu", &[self])?;
        let mask: Arc<[f64]> = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        self.mask_mul(mask)
    }

    pub(crate) fn mask_mul(&self, mask: Arc<[f64]>) -> Result<Tensor> {
        check_finite("mask_mul", &[self])?;
        let data = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(a, m)| a * m)
            .collect();
        Ok(Tensor::from_op(
            self.shape(),
            data,
            self.is_tracked(),
            || Op::MaskMul(self.clone(), mask),
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map_unary("sigmoid", sigmoid, Op::Sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Tensor> {
        self.map_unary("softplus", softplus, Op::Softplus)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        check_finite("sum", &[self])?;
        let s = self.data().iter().sum();
        Ok(Tensor::from_op(&[], vec![s], self.is_tracked(), || {
            Op::Sum(self.clone())
        }))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 || shape.contains(&0) {
            return Err(Error::shape("expand", self.shape(), shape));
        }
        check_finite("expand", &[self])?;
        let data = vec![self.item(); numel(shape)];
        Ok(Tensor::from_op(shape, data, self.is_tracked(), || {
            Op::Expand(self.clone())
        }))
    }

    /// Adds a `[m]` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, m) = matrix_dims("add_bias", self)?;
        if bias.shape() != [m] {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        check_finite("add_bias", &[self, bias])?;
        let b = bias.data();
        let data = self
            .data()
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let tracked = self.is_tracked() || bias.is_tracked();
        Ok(Tensor::from_op(&[n, m], data, tracked, || {
            Op::AddBias(self.clone(), bias.clone())
        }))
    }

    /// Column sums of an `[n, m]` matrix, shape `[m]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (_, m) = matrix_dims("sum_rows", self)?;
        check_finite("sum_rows", &[self])?;
        let mut out = vec![0.0; m];
        for row in self.data().chunks_exact(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(Tensor::from_op(&[m], out, self.is_tracked(), || {
            Op::SumRows(self.clone())
        }))
    }

    /// Repeats a `[m]` vector into `[n, m]`.
    pub fn expand_rows(&self, n: usize) -> Result<Tensor> {
        let m = match *self.shape() {
            [m] if n > 0 => m,
            _ => return Err(Error::shape("expand_rows", self.shape(), &[n])),
        };
        check_finite("expand_rows", &[self])?;
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(self.data());
        }
        Ok(Tensor::from_op(&[n, m], data, self.is_tracked(), || {
            Op::ExpandRows(self.clone())
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        check_finite("reshape", &[self])?;
        Ok(Tensor::from_op(
            shape,
            self.data().to_vec(),
            self.is_tracked(),
            || Op::Reshape(self.clone()),
        ))
    }

    /// 3×3 convolution, stride 1, zero padding 1, over NHWC input.
    ///
    /// `weight` is `[9 * in_channels, out_channels]` with rows ordered
    /// `(ky, kx, in_channel)`; `bias` is `[out_channels]`. Lowered to
    /// im2col followed by a matmul.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let [n, h, w, c] = match *self.shape() {
            [n, h, w, c] => [n, h, w, c],
            _ => return Err(Error::shape("conv2d", self.shape(), weight.shape())),
        };
        let (rows, out_c) = matrix_dims("conv2d", weight)?;
        if rows != 9 * c {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        let geom = ConvGeometry {
            batch: n,
            height: h,
            width: w,
            channels: c,
        };
        self.im2col(geom)?
            .matmul(weight)?
            .add_bias(bias)?
            .reshape(&[n, h, w, out_c])
    }

    pub(crate) fn im2col(&self, geom: ConvGeometry) -> Result<Tensor> {
        if self.shape() != geom.input_shape() {
            return Err(Error::shape("im2col", self.shape(), &geom.input_shape()));
        }
        check_finite("im2col", &[self])?;
        let shape = geom.cols_shape();
        let src = self.data();
        let mut out = vec![0.0; numel(&shape)];
        geom.for_each_tap(|col, inp| out[col] = src[inp]);
        Ok(Tensor::from_op(&shape, out, self.is_tracked(), || {
            Op::Im2Col(self.clone(), geom)
        }))
    }

    /// Adjoint of [`Tensor::im2col`]: accumulates columns back onto pixels.
    pub(crate) fn col2im(&self, geom: ConvGeometry) -> Result<Tensor> {
        if self.shape() != geom.cols_shape() {
            return Err(Error::shape("col2im", self.shape(), &geom.cols_shape()));
        }
        check_finite("col2im", &[self])?;
        let shape = geom.input_shape();
        let src = self.data();
        let mut out = vec![0.0; numel(&shape)];
        geom.for_each_tap(|col, inp| out[inp] += src[col]);
        Ok(Tensor::from_op(&shape, out, self.is_tracked(), || {
            Op::Col2Im(self.clone(), geom)
        }))
    }

    /// 2×2 max pooling with stride 2 over NHWC input; odd trailing rows and
    /// columns are dropped. Ties resolve to the first maximum in scan order.
    pub fn maxpool2d(&self) -> Result<Tensor> {
        let [n, h, w, c] = match *self.shape() {
            [n, h, w, c] if h >= 2 && w >= 2 => [n, h, w, c],
            _ => return Err(Error::shape("maxpool2d", self.shape(), &[2, 2])),
        };
        check_finite("maxpool2d", &[self])?;
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data();
        let mut idx = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    for ch in 0..c {
                        let mut best = ((b * h + 2 * y) * w + 2 * x) * c + ch;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let cand = ((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch;
                            if src[cand] > src[best] {
                                best = cand;
                            }
                        }
                        idx.push(best);
                    }
                }
            }
        }
        self.gather(idx.into(), &[n, oh, ow, c])
    }

    /// `out[i] = self[indices[i]]`, reshaped to `shape`.
    pub(crate) fn gather(&self, indices: Arc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != indices.len() {
            return Err(Error::shape("gather", shape, &[indices.len()]));
        }
        check_finite("gather", &[self])?;
        let src = self.data();
        let data = indices.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(shape, data, self.is_tracked(), || {
            Op::Gather(self.clone(), indices)
        }))
    }

    /// Adjoint of [`Tensor::gather`]: `out[indices[i]] += self[i]`.
    pub(crate) fn scatter(&self, indices: Arc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != indices.len() {
            return Err(Error::shape("scatter", self.shape(), &[indices.len()]));
        }
        check_finite("scatter", &[self])?;
        let mut out = vec![0.0; numel(shape)];
        for (&i, v) in indices.iter().zip(self.data()) {
            out[i] += v;
        }
        Ok(Tensor::from_op(shape, out, self.is_tracked(), || {
            Op::Scatter(self.clone(), indices)
        }))
    }

    /// Mean binary cross-entropy of logits against `{0, 1}` labels:
    /// `mean(softplus(z) - y * z)`.
    pub fn bce_with_logits(&self, labels: &Tensor) -> Result<Tensor> {
        same_shape("bce_with_logits", self, labels)?;
        self.softplus()?.sub(&labels.mul(self)?)?.mean()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&id).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_definition() {
        let r = t(&[3], &[-1.0, 0.0, 2.0]).relu().unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let loss = Tensor::scalar(0.0)
            .bce_with_logits(&Tensor::scalar(1.0))
            .unwrap();
        assert!((loss.item() - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let z = t(&[2], &[800.0, -800.0]);
        let y = t(&[2], &[1.0, 0.0]);
        assert!(z.bce_with_logits(&y).unwrap().item().abs() < 1e-300);
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let err = t(&[2], &[1.0, 2.0]).add(&t(&[3], &[1.0; 3])).unwrap_err();
        assert_eq!(err, Error::shape("add", &[2], &[3]));
        assert!(t(&[2, 3], &[0.0; 6])
            .matmul(&t(&[2, 3], &[0.0; 6]))
            .is_err());
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let bad = t(&[2], &[1.0, f64::NAN]);
        assert!(bad.relu().unwrap_err().is_non_finite());
        assert!(bad.add(&t(&[2], &[0.0; 2])).unwrap_err().is_non_finite());
    }

    #[test]
    fn conv_with_centre_tap_is_identity() {
        // 1 input channel, 1 output channel, kernel with only the centre set.
        let x = t(&[1, 2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t(&[9, 1], &k);
        let b = t(&[1], &[0.5]);
        let y = x.conv2d(&w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 1]);
        assert_eq!(y.data(), &[1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
    }

    #[test]
    fn conv_box_filter_counts_neighbours() {
        let x = Tensor::ones(&[1, 3, 3, 1]).unwrap();
        let w = Tensor::ones(&[9, 1]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = x.conv2d(&w, &b).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn maxpool_picks_window_maxima_and_floors() {
        let x = t(
            &[1, 3, 4, 1],
            &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 7.0, 9.0, 9.0, 9.0, 9.0],
        );
        let y = x.maxpool2d().unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 1]);
        assert_eq!(y.data(), &[5.0, 8.0]);
    }

    #[test]
    fn bias_and_row_reductions() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        assert_eq!(x.add_bias(&b).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(x.sum_rows().unwrap().data(), &[4.0, 6.0]);
        assert_eq!(b.expand_rows(2).unwrap().data(), &[10.0, 20.0, 10.0, 20.0]);
        assert_eq!(x.mean().unwrap().item(), 2.5);
    }
}
