use crate::error::{invalid, Result, TensorError};
use crate::float::matmul_into;
use crate::{Float, Tensor};

/// Geometry of a 2-D convolution from an `h x w` input to an `oh x ow` output.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies in `0..w`.
fn valid_cols(g: &Geometry, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Float>(g: &Geometry, x: &[T], col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (i, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto the image.
fn col2im<T: Float>(g: &Geometry, col: &[T], x: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            dst[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Float>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Float>(g: &[T], n: usize, cout: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); cout];
    for s in 0..n {
        for (c, slot) in gb.iter_mut().enumerate() {
            let base = (s * cout + c) * plane;
            *slot += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    gb
}

impl<T: Float> Tensor<T> {
    /// Square-kernel 2-D convolution with zero padding. `weight` is `[C_out, C_in, k, k]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (n, cin, h, w) = self.dims4()?;
        let (cout, wcin, k, k2) = weight.dims4()?;
        if wcin != cin || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        check_bias("conv2d", bias, cout)?;
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return invalid("conv2d", format!("kernel {k} does not fit {h}x{w} with pad {pad}"));
        }
        let g = Geometry {
            c: cin,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        let (rows, cols) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); n * cout * cols];
        let x = self.data();
        T::with_scratch(rows * cols, |col| {
            for s in 0..n {
                im2col(&g, &x[s * cin * h * w..(s + 1) * cin * h * w], col);
                matmul_into(
                    cout,
                    rows,
                    cols,
                    weight.data(),
                    false,
                    col,
                    false,
                    &mut out[s * cout * cols..(s + 1) * cout * cols],
                    false,
                );
            }
        });
        if let Some(b) = bias {
            add_bias(&mut out, b.data(), cols);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (input, kernel) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            vec![n, cout, g.oh, g.ow],
            out,
            parents,
            move |needs, _, gout| {
                let x = input.data();
                let wt = kernel.data();
                let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
                let mut gw = needs[1].then(|| vec![T::zero(); wt.len()]);
                T::with_scratch(rows * cols, |col| {
                    for s in 0..n {
                        let go = &gout[s * cout * cols..(s + 1) * cout * cols];
                        if let Some(gw) = gw.as_mut() {
                            im2col(&g, &x[s * cin * h * w..(s + 1) * cin * h * w], col);
                            // dW += dY [cout, cols] * col^T [cols, rows]
                            matmul_into(cout, cols, rows, go, false, col, true, gw, true);
                        }
                        if let Some(gx) = gx.as_mut() {
                            // dcol = W^T [rows, cout] * dY [cout, cols]
                            matmul_into(rows, cout, cols, wt, true, go, false, col, false);
                            col2im(&g, col, &mut gx[s * cin * h * w..(s + 1) * cin * h * w]);
                        }
                    }
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| bias_grad(gout, n, cout, cols)));
                }
                grads
            },
        ))
    }

    /// Transposed convolution (the adjoint of a strided [`conv2d`](Self::conv2d)).
    /// `weight` is `[C_in, C_out, k, k]`; output extent is
    /// `(h - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Tensor<T>> {
        let (n, cin, h, w) = self.dims4()?;
        let (wcin, cout, k, k2) = weight.dims4()?;
        if wcin != cin || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        check_bias("conv_transpose2d", bias, cout)?;
        if stride == 0 || output_pad >= stride {
            return invalid("conv_transpose2d", "output_pad must be smaller than stride");
        }
        let full = (h - 1) * stride + k + output_pad;
        if full < 2 * pad + 1 {
            return invalid("conv_transpose2d", "padding too large");
        }
        let oh = full - 2 * pad;
        let ow = (w - 1) * stride + k + output_pad - 2 * pad;
        // Geometry of the forward convolution that maps the output back onto the input.
        let g = Geometry {
            c: cout,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: h,
            ow: w,
        };
        let (rows, cols) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let x = self.data();
        T::with_scratch(rows * cols, |col| {
            for s in 0..n {
                // col [rows, cols] = W^T [rows, cin] * x [cin, cols]
                matmul_into(
                    rows,
                    cin,
                    cols,
                    weight.data(),
                    true,
                    &x[s * cin * cols..(s + 1) * cin * cols],
                    false,
                    col,
                    false,
                );
                col2im(&g, col, &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow]);
            }
        });
        if let Some(b) = bias {
            add_bias(&mut out, b.data(), oh * ow);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (input, kernel) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            vec![n, cout, oh, ow],
            out,
            parents,
            move |needs, _, gout| {
                let x = input.data();
                let wt = kernel.data();
                let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
                let mut gw = needs[1].then(|| vec![T::zero(); wt.len()]);
                T::with_scratch(rows * cols, |col| {
                    for s in 0..n {
                        im2col(&g, &gout[s * cout * oh * ow..(s + 1) * cout * oh * ow], col);
                        let xs = &x[s * cin * cols..(s + 1) * cin * cols];
                        if let Some(gx) = gx.as_mut() {
                            // dx [cin, cols] = W [cin, rows] * col [rows, cols]
                            matmul_into(
                                cin,
                                rows,
                                cols,
                                wt,
                                false,
                                col,
                                false,
                                &mut gx[s * cin * cols..(s + 1) * cin * cols],
                                false,
                            );
                        }
                        if let Some(gw) = gw.as_mut() {
                            // dW [cin, rows] += x [cin, cols] * col^T [cols, rows]
                            matmul_into(cin, cols, rows, xs, false, col, true, gw, true);
                        }
                    }
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| bias_grad(gout, n, cout, oh * ow)));
                }
                grads
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the oracle for the GEMM path.
    fn conv_naive(x: &[f64], dims: (usize, usize, usize, usize), wt: &[f64], cout: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let (n, c, h, w) = dims;
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (y * s + i) as isize - p as isize;
                                    let ix = (xx * s + j) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                            * wt[((o * c + ci) * k + i) * k + j];
                                    }
                                }
                            }
                        }
                        out[((b * cout + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect()
    }

    #[test]
    fn conv2d_matches_naive() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (2, 2, 4), (1, 0, 1)] {
            let x = ramp(2 * 3 * 7 * 6, 0.1);
            let wt = ramp(4 * 3 * k * k, 0.05);
            let xt = Tensor::<f64>::from_vec(x.clone(), &[2, 3, 7, 6]).unwrap();
            let wtt = Tensor::<f64>::from_vec(wt.clone(), &[4, 3, k, k]).unwrap();
            let y = xt.conv2d(&wtt, None, stride, pad).unwrap();
            let expect = conv_naive(&x, (2, 3, 7, 6), &wt, 4, k, stride, pad);
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_matches_naive_across_geometries() {
        for k in 1..=7 {
            for stride in 1..=3 {
                for pad in 0..=3 {
                    for &(h, w) in &[(5, 9), (8, 3), (1, 6)] {
                        if h + 2 * pad < k || w + 2 * pad < k {
                            continue;
                        }
                        let x = ramp(3 * h * w, 0.1);
                        let wt = ramp(2 * 3 * k * k, 0.05);
                        let xt = Tensor::<f64>::from_vec(x.clone(), &[1, 3, h, w]).unwrap();
                        let wtt = Tensor::<f64>::from_vec(wt.clone(), &[2, 3, k, k]).unwrap();
                        let y = xt.conv2d(&wtt, None, stride, pad).unwrap();
                        let expect = conv_naive(&x, (1, 3, h, w), &wt, 2, k, stride, pad);
                        assert_eq!(y.numel(), expect.len());
                        for (a, b) in y.data().iter().zip(&expect) {
                            assert!((a - b).abs() < 1e-12, "k{k} s{stride} p{pad} {h}x{w}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> for matching geometry.
        let x = ramp(1 * 2 * 8 * 8, 0.1);
        let wt = ramp(3 * 2 * 3 * 3, 0.07);
        let xt = Tensor::<f64>::from_vec(x.clone(), &[1, 2, 8, 8]).unwrap();
        let wtt = Tensor::<f64>::from_vec(wt.clone(), &[3, 2, 3, 3]).unwrap();
        let y = xt.conv2d(&wtt, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        let r = Tensor::<f64>::from_vec(ramp(48, 0.3), &[1, 3, 4, 4]).unwrap();
        let back = r.conv_transpose2d(&wtt, None, 2, 1, 1).unwrap();
        assert_eq!(back.shape(), &[1, 2, 8, 8]);
        let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
