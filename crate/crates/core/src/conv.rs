//! 2-D convolution as im2col + one gemm over the whole batch. Reduction
//! order depends only on the shapes, so results are reproducible bitwise.

use crate::error::{Result, VleError};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, cin, h, w) = match *x {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(VleError::contract(format!("conv input must be rank 4, got {x:?}"))),
        };
        let (cout, wcin, k) = match *weight {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            _ => {
                return Err(VleError::contract(format!(
                    "conv weight must be (out, in, k, k), got {weight:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(VleError::contract(format!(
                "conv expects {wcin} input channels, got {cin}"
            )));
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(VleError::contract(format!(
                "conv kernel {k} stride {stride} pad {pad} does not fit a {h}x{w} input"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn source_index(o: usize, kk: usize, g: &ConvGeom, extent: usize) -> Option<usize> {
    let pos = (o * g.stride + kk) as isize - g.pad as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

/// Output columns `lo..hi` whose tap `kj` lands inside the input row.
fn valid_span(kj: usize, g: &ConvGeom) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold one image into columns `offset..offset + plane` of every row of a
/// (patch_len, ld) matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, offset: usize) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let (lo, hi) = valid_span(kj, g);
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + plane];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = source_index(oy, ki, g, g.h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let base = iy * g.w + lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                    } else {
                        for (i, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[base + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into one image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T], ld: usize, offset: usize) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let (lo, hi) = valid_span(kj, g);
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ld + offset..row * ld + offset + plane];
                for oy in 0..g.ho {
                    let Some(iy) = source_index(oy, ki, g, g.h) else {
                        continue;
                    };
                    let base = iy * g.w + lo * g.stride + kj - g.pad;
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (i, &v) in line.iter().enumerate() {
                        dst[base + i * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Columns for the whole batch: (patch_len, batch · out_plane).
fn batch_cols<T: Real>(x: &Tensor<T>, g: &ConvGeom) -> Vec<T> {
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let ld = g.batch * plane;
    let mut cols = vec![T::zero(); g.patch_len() * ld];
    for b in 0..g.batch {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], g, &mut cols, ld, b * plane);
    }
    cols
}

/// (B, C, P) → (C, B·P).
fn channels_first<T: Real>(y: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &y[(b * channels + c) * plane..(b * channels + c + 1) * plane];
            out[c * batch * plane + b * plane..c * batch * plane + (b + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// (C, B·P) → (B, C, P).
fn batch_first<T: Real>(y: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &y[c * batch * plane + b * plane..c * batch * plane + (b + 1) * plane];
            out[(b * channels + c) * plane..(b * channels + c + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        b.expect_shape(&[g.cout])?;
    }
    let plane = g.out_plane();
    let n = g.batch * plane;
    let kdim = g.patch_len();
    let cols = batch_cols(x, &g);
    let mut out = vec![T::zero(); g.cout * n];
    if let Some(bias) = bias {
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.fill(bias.data()[o]);
        }
    }
    T::gemm(
        g.cout,
        kdim,
        n,
        weight.data(),
        (kdim as isize, 1),
        &cols,
        (n as isize, 1),
        if bias.is_some() { T::one() } else { T::zero() },
        &mut out,
        (n as isize, 1),
    );
    Tensor::from_vec(&[g.batch, g.cout, g.ho, g.wo], batch_first(&out, g.batch, g.cout, plane))
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    dy.expect_shape(&[g.batch, g.cout, g.ho, g.wo])?;
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let n = g.batch * plane;
    let kdim = g.patch_len();
    let dyc = channels_first(dy.data(), g.batch, g.cout, plane);

    let bias = need_bias.then(|| {
        let sums = dyc.chunks(n).map(|row| row.iter().copied().fold(T::zero(), |a, v| a + v)).collect();
        Tensor::from_vec(&[g.cout], sums).expect("one per output channel")
    });
    let weight_grad = need_weight.then(|| {
        let cols = batch_cols(x, &g);
        let mut dw = vec![T::zero(); g.cout * kdim];
        // dW = dY · colsᵀ
        T::gemm(g.cout, n, kdim, &dyc, (n as isize, 1), &cols, (1, n as isize), T::zero(), &mut dw, (kdim as isize, 1));
        Tensor::from_vec(weight.shape(), dw).expect("weight-shaped")
    });
    let input = need_input.then(|| {
        // dcols = Wᵀ · dY
        let mut dcols = vec![T::zero(); kdim * n];
        T::gemm(
            kdim,
            g.cout,
            n,
            weight.data(),
            (1, kdim as isize),
            &dyc,
            (n as isize, 1),
            T::zero(),
            &mut dcols,
            (n as isize, 1),
        );
        let mut dx = Tensor::zeros(x.shape());
        for b in 0..g.batch {
            col2im(&dcols, &g, &mut dx.data_mut()[b * in_len..(b + 1) * in_len], n, b * plane);
        }
        dx
    });
    Ok(ConvGrads {
        input,
        weight: weight_grad,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let g = ConvGeom::new(x.shape(), w.shape(), stride, pad).unwrap();
        let mut out = Tensor::zeros(&[g.batch, g.cout, g.ho, g.wo]);
        for b in 0..g.batch {
            for o in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = bias[o];
                        for c in 0..g.cin {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * w.data()[((o * g.cin + c) * g.k + ki) * g.k + kj];
                                }
                            }
                        }
                        out.data_mut()[((b * g.cout + o) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_loops() {
        for &(k, stride, pad, h) in &[
            (3, 1, 1, 5),
            (3, 2, 1, 6),
            (1, 1, 0, 4),
            (3, 2, 1, 7),
            (3, 1, 0, 5),
            (5, 2, 2, 9),
            (3, 3, 1, 8),
            (1, 2, 0, 6),
            (3, 1, 3, 4),
        ] {
            let x = Tensor::from_fn(&[2, 3, h, h + 1], |i| ((i * 7) as f64 * 0.13).sin());
            let w = Tensor::from_fn(&[4, 3, k, k], |i| ((i * 5) as f64 * 0.29).cos());
            let bias = vec![0.1, -0.2, 0.3, 0.0];
            let bt = Tensor::from_vec(&[4], bias.clone()).unwrap();
            let got = conv2d_forward(&x, &w, Some(&bt), stride, pad).unwrap();
            let want = direct(&x, &w, &bias, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> is bilinear; dx and dw must reproduce it.
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2), (3, 3, 0)] {
            let x = Tensor::from_fn(&[2, 2, 6, 6], |i| ((i * 3) as f64 * 0.21).sin());
            let w = Tensor::from_fn(&[3, 2, k, k], |i| ((i * 11) as f64 * 0.17).cos());
            let y = conv2d_forward(&x, &w, None, stride, pad).unwrap();
            let dy = Tensor::from_fn(y.shape(), |i| ((i * 13) as f64 * 0.07).sin());
            let inner: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let grads = conv2d_backward(&x, &w, &dy, stride, pad, true, true, true).unwrap();
            let via_dx: f64 = grads.input.unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let via_dw: f64 = grads.weight.unwrap().data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            assert!((inner - via_dx).abs() < 1e-10);
            assert!((inner - via_dw).abs() < 1e-10);
            let db = grads.bias.unwrap();
            let want: f64 = dy.data()[..y.shape()[2] * y.shape()[3]].iter().sum::<f64>()
                + dy.data()[3 * y.shape()[2] * y.shape()[3]..4 * y.shape()[2] * y.shape()[3]].iter().sum::<f64>();
            assert!((db.data()[0] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, 1, 1).is_err());
    }
}
