use std::sync::Arc;

use vidsynth_tensor::{Conv2d, ConvTranspose2d, Float, Param, ParamPath, Tensor};

use crate::error::Result;

/// Image encoder `E` producing a low-dimensional appearance map that is then averaged
/// within each object instance.
#[derive(Debug, Clone)]
pub struct FeatureEncoder<T: Float> {
    c0: Conv2d<T>,
    down: Conv2d<T>,
    up: ConvTranspose2d<T>,
    out: Conv2d<T>,
}

impl<T: Float> FeatureEncoder<T> {
    pub fn new(path: &ParamPath<T>, channels: usize, dim: usize) -> Result<Self> {
        Ok(FeatureEncoder {
            c0: Conv2d::same(&path.sub("c0"), 3, channels, 7)?,
            down: Conv2d::new(&path.sub("d1"), channels, 2 * channels, 3, 2, 1, true)?,
            up: ConvTranspose2d::upsample2(&path.sub("u1"), 2 * channels, channels)?,
            out: Conv2d::same(&path.sub("out"), channels, dim, 3)?,
        })
    }

    /// Per-pixel features before pooling, `[B, dim, H, W]` in `(-1, 1)`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.c0.forward(x)?.instance_norm(1e-5)?.relu();
        let h = self.down.forward(&h)?.instance_norm(1e-5)?.relu();
        let h = self.up.forward(&h)?.instance_norm(1e-5)?.relu();
        Ok(self.out.forward(&h)?.tanh())
    }

    /// Features averaged over each instance; `instances` holds `B * H * W` ids.
    pub fn encode(&self, x: &Tensor<T>, instances: &[u32]) -> Result<Tensor<T>> {
        instance_pool(&self.features(x)?, instances)
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        let mut v = self.c0.params();
        v.extend(self.down.params());
        v.extend(self.up.params());
        v.extend(self.out.params());
        v
    }
}

/// Replaces every pixel's features by the mean over its instance (per sample, per channel).
pub fn instance_pool<T: Float>(features: &Tensor<T>, instances: &[u32]) -> Result<Tensor<T>> {
    Ok(features.region_mean(instances)?)
}
