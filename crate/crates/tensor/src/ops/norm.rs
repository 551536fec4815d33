use crate::error::Result;
use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    /// Per-sample, per-channel normalisation over the spatial extent (no affine terms).
    pub fn instance_norm(&self, eps: f64) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let plane = h * w;
        let inv_plane = T::lit(1.0 / plane as f64);
        let eps = T::lit(eps);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let src = &x[p * plane..(p + 1) * plane];
            let mean = src.iter().copied().sum::<T>() * inv_plane;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_plane;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, h, w],
            out,
            vec![self.clone()],
            move |_, y, g| {
                let mut gx = vec![T::zero(); y.len()];
                for p in 0..n * c {
                    let ys = &y[p * plane..(p + 1) * plane];
                    let gs = &g[p * plane..(p + 1) * plane];
                    let mean_g = gs.iter().copied().sum::<T>() * inv_plane;
                    let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() * inv_plane;
                    for ((o, &gv), &yv) in gx[p * plane..(p + 1) * plane].iter_mut().zip(gs).zip(ys) {
                        *o = inv_std[p] * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}
