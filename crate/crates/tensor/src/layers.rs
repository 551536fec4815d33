use std::sync::Arc;

use crate::error::Result;
use crate::param::{Init, Param, ParamPath};
use crate::{Float, Tensor};

/// Weight init used by every convolution: N(0, 0.02), zero bias.
pub const CONV_INIT: Init = Init::Normal {
    mean: 0.0,
    std: 0.02,
};

#[derive(Debug, Clone)]
pub struct Conv2d<T: Float> {
    pub weight: Arc<Param<T>>,
    pub bias: Option<Arc<Param<T>>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        path: &ParamPath<T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = path.var("weight", &[cout, cin, k, k], CONV_INIT)?;
        let bias = if bias {
            Some(path.var("bias", &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// `k x k`, stride 1, "same" padding.
    pub fn same(path: &ParamPath<T>, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::new(path, cin, cout, k, 1, k / 2, true)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        x.conv2d(&self.weight.tensor(), b.as_ref(), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        let mut v = vec![Arc::clone(&self.weight)];
        v.extend(self.bias.iter().cloned());
        v
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T: Float> {
    pub weight: Arc<Param<T>>,
    pub bias: Option<Arc<Param<T>>>,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl<T: Float> ConvTranspose2d<T> {
    /// 3x3, stride 2 upsampling layer that exactly doubles the spatial extent.
    pub fn upsample2(path: &ParamPath<T>, cin: usize, cout: usize) -> Result<Self> {
        let weight = path.var("weight", &[cin, cout, 3, 3], CONV_INIT)?;
        let bias = Some(path.var("bias", &[cout], Init::Zeros)?);
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride: 2,
            pad: 1,
            output_pad: 1,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        x.conv_transpose2d(
            &self.weight.tensor(),
            b.as_ref(),
            self.stride,
            self.pad,
            self.output_pad,
        )
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        let mut v = vec![Arc::clone(&self.weight)];
        v.extend(self.bias.iter().cloned());
        v
    }
}
