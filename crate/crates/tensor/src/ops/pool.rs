use crate::error::{invalid, Result};
use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    /// Non-overlapping `k x k` average pooling. Spatial extents must be divisible by `k`.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return invalid("avg_pool2d", format!("{h}x{w} not divisible by {k}"));
        }
        if k == 1 {
            return Ok(self.clone());
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::lit(1.0 / (k * k) as f64);
        let x = self.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                let row = &mut dst[(y / k) * ow..(y / k + 1) * ow];
                for (xx, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                    row[xx / k] += v;
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            move |_, _, g| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest2d(&self, factor: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if factor == 0 {
            return invalid("upsample_nearest2d", "factor must be positive");
        }
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                let row = &x[p * h * w + (y / factor) * w..p * h * w + (y / factor + 1) * w];
                for xx in 0..ow {
                    out.push(row[xx / factor]);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            move |_, _, g| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[p * h * w + (y / factor) * w + xx / factor] +=
                                g[(p * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}
