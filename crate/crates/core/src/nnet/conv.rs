//! Stride-1 3D convolution (cross-correlation) via im2col + GEMM.

use std::borrow::Cow;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeometry {
    pub fn new(cin: usize, cout: usize, k: usize, pad: usize, in_dims: [usize; 3]) -> Result<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let padded = in_dims[a] + 2 * pad;
            if in_dims[a] == 0 || padded < k {
                return Err(Error::Shape(format!(
                    "input dims {in_dims:?} too small for kernel {k} with padding {pad}"
                )));
            }
            out_dims[a] = padded - k + 1;
        }
        Ok(ConvGeometry {
            cin,
            cout,
            k,
            pad,
            in_dims,
            out_dims,
        })
    }

    fn from_tensors<R: Real>(
        input: &Tensor<R>,
        weight: &Tensor<R>,
        pad: usize,
    ) -> Result<Self> {
        let (is, ws) = (input.shape(), weight.shape());
        if is.len() != 4 {
            return Err(Error::Shape(format!("input must be C×D×H×W, got {is:?}")));
        }
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::Shape(format!(
                "weight must be Cout×Cin×k×k×k, got {ws:?}"
            )));
        }
        if ws[1] != is[0] {
            return Err(Error::Shape(format!(
                "weight expects {} input channels, input has {}",
                ws[1], is[0]
            )));
        }
        Self::new(is[0], ws[0], ws[2], pad, [is[1], is[2], is[3]])
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// A 1×1×1 kernel without padding needs no unfolding.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    /// For kernel offset `kk` along an axis of input length `len`, the output
    /// range whose source coordinate `o + kk - pad` lies inside the input.
    fn valid_range(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk);
        let hi = (len + self.pad).saturating_sub(kk).min(out_len);
        (lo, hi.max(lo))
    }
}

/// Unfold `input` (Cin×D×H×W) into a (Cin·k³)×(Do·Ho·Wo) matrix.
pub(crate) fn im2col<R: Real>(input: &[R], g: &ConvGeometry) -> Vec<R> {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let n = g.out_len();
    let mut col = vec![R::zero(); g.rows() * n];
    let mut r = 0;
    for ci in 0..g.cin {
        let plane = &input[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..g.k {
            let (z_lo, z_hi) = g.valid_range(kz, d, od);
            for ky in 0..g.k {
                let (y_lo, y_hi) = g.valid_range(ky, h, oh);
                for kx in 0..g.k {
                    let (x_lo, x_hi) = g.valid_range(kx, w, ow);
                    let row = &mut col[r * n..(r + 1) * n];
                    for oz in z_lo..z_hi {
                        let iz = oz + kz - g.pad;
                        for oy in y_lo..y_hi {
                            let iy = oy + ky - g.pad;
                            let src = (iz * h + iy) * w + x_lo + kx - g.pad;
                            let dst = (oz * oh + oy) * ow + x_lo;
                            row[dst..dst + (x_hi - x_lo)]
                                .copy_from_slice(&plane[src..src + (x_hi - x_lo)]);
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im<R: Real>(col: &[R], g: &ConvGeometry) -> Vec<R> {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let n = g.out_len();
    let mut out = vec![R::zero(); g.cin * d * h * w];
    let mut r = 0;
    for ci in 0..g.cin {
        let plane = &mut out[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..g.k {
            let (z_lo, z_hi) = g.valid_range(kz, d, od);
            for ky in 0..g.k {
                let (y_lo, y_hi) = g.valid_range(ky, h, oh);
                for kx in 0..g.k {
                    let (x_lo, x_hi) = g.valid_range(kx, w, ow);
                    let row = &col[r * n..(r + 1) * n];
                    for oz in z_lo..z_hi {
                        let iz = oz + kz - g.pad;
                        for oy in y_lo..y_hi {
                            let iy = oy + ky - g.pad;
                            let dst = (iz * h + iy) * w + x_lo + kx - g.pad;
                            let src = (oz * oh + oy) * ow + x_lo;
                            for (o, &v) in plane[dst..dst + (x_hi - x_lo)]
                                .iter_mut()
                                .zip(&row[src..src + (x_hi - x_lo)])
                            {
                                *o = *o + v;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    out
}

pub(crate) fn unfold<'a, R: Real>(input: &'a [R], g: &ConvGeometry) -> Cow<'a, [R]> {
    if g.is_pointwise() {
        Cow::Borrowed(input)
    } else {
        Cow::Owned(im2col(input, g))
    }
}

/// `out = W·col + b` given the unfolded input.
pub(crate) fn forward_unfolded<R: Real>(
    col: &[R],
    weight: &[R],
    bias: &[R],
    g: &ConvGeometry,
) -> Vec<R> {
    let n = g.out_len();
    let kk = g.rows();
    let mut out = Vec::with_capacity(g.cout * n);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, n));
    }
    R::gemm(
        g.cout,
        kk,
        n,
        R::one(),
        weight,
        kk as isize,
        1,
        col,
        n as isize,
        1,
        R::one(),
        &mut out,
        n as isize,
        1,
    );
    out
}

pub(crate) struct ConvGrads<R> {
    pub input: Option<Vec<R>>,
    pub weight: Vec<R>,
    pub bias: Vec<R>,
}

pub(crate) fn backward_unfolded<R: Real>(
    col: &[R],
    weight: &[R],
    grad_out: &[R],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<R> {
    let n = g.out_len();
    let kk = g.rows();

    // dW = dY · colᵀ
    let mut grad_weight = vec![R::zero(); g.cout * kk];
    R::gemm(
        g.cout,
        n,
        kk,
        R::one(),
        grad_out,
        n as isize,
        1,
        col,
        1,
        n as isize,
        R::zero(),
        &mut grad_weight,
        kk as isize,
        1,
    );

    let grad_bias = grad_out
        .chunks_exact(n)
        .map(|row| row.iter().fold(R::zero(), |acc, &v| acc + v))
        .collect();

    let grad_input = need_input.then(|| {
        // dcol = Wᵀ · dY
        let mut grad_col = vec![R::zero(); kk * n];
        R::gemm(
            kk,
            g.cout,
            n,
            R::one(),
            weight,
            1,
            kk as isize,
            grad_out,
            n as isize,
            1,
            R::zero(),
            &mut grad_col,
            n as isize,
            1,
        );
        if g.is_pointwise() {
            grad_col
        } else {
            col2im(&grad_col, g)
        }
    });

    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

fn check_bias<R: Real>(bias: &Tensor<R>, cout: usize) -> Result<()> {
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "bias shape {:?}, expected [{cout}]",
            bias.shape()
        )));
    }
    Ok(())
}

/// 3D cross-correlation, stride 1, zero padding `padding` on every side.
pub fn conv3d_forward<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    bias: &Tensor<R>,
    padding: usize,
) -> Result<Tensor<R>> {
    let g = ConvGeometry::from_tensors(input, weight, padding)?;
    check_bias(bias, g.cout)?;
    let col = unfold(input.data(), &g);
    let out = forward_unfolded(&col, weight.data(), bias.data(), &g);
    let [d, h, w] = g.out_dims;
    Tensor::from_vec(&[g.cout, d, h, w], out)
}

/// Gradients of a scalar loss w.r.t. input, weight and bias, given the
/// gradient w.r.t. the forward output.
pub fn conv3d_backward<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    grad_output: &Tensor<R>,
    padding: usize,
) -> Result<(Tensor<R>, Tensor<R>, Tensor<R>)> {
    let g = ConvGeometry::from_tensors(input, weight, padding)?;
    let [d, h, w] = g.out_dims;
    if grad_output.shape() != [g.cout, d, h, w] {
        return Err(Error::Shape(format!(
            "grad_output shape {:?}, expected {:?}",
            grad_output.shape(),
            [g.cout, d, h, w]
        )));
    }
    let col = unfold(input.data(), &g);
    let grads = backward_unfolded(&col, weight.data(), grad_output.data(), &g, true);
    Ok((
        Tensor::from_vec(input.shape(), grads.input.expect("requested"))?,
        Tensor::from_vec(weight.shape(), grads.weight)?,
        Tensor::from_vec(&[g.cout], grads.bias)?,
    ))
}
