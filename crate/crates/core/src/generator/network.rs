//! Convolutional building blocks for one generator stage.

use std::sync::Arc;

use vidsynth_tensor::{Conv2d, ConvTranspose2d, Float, Param, ParamPath, Tensor};

use crate::error::Result;

const IN_EPS: f64 = 1e-5;

fn norm_relu<T: Float>(x: Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.instance_norm(IN_EPS)?.relu())
}

/// `conv7 -> IN -> ReLU`, then `downsamples` x (`conv3/s2 -> IN -> ReLU`), doubling channels.
#[derive(Debug, Clone)]
pub(crate) struct Encoder<T: Float> {
    convs: Vec<Conv2d<T>>,
}

impl<T: Float> Encoder<T> {
    pub fn new(path: &ParamPath<T>, cin: usize, ngf: usize, downsamples: usize) -> Result<Self> {
        let mut convs = vec![Conv2d::same(&path.sub("c0"), cin, ngf, 7)?];
        for i in 0..downsamples {
            let c = ngf << i;
            convs.push(Conv2d::new(&path.sub(format!("d{}", i + 1)), c, 2 * c, 3, 2, 1, true)?);
        }
        Ok(Encoder { convs })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for c in &self.convs {
            h = norm_relu(c.forward(&h)?)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }
}

/// `x + IN(conv(ReLU(IN(conv(x)))))`.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock<T: Float> {
    a: Conv2d<T>,
    b: Conv2d<T>,
}

impl<T: Float> ResBlock<T> {
    pub fn new(path: &ParamPath<T>, c: usize) -> Result<Self> {
        Ok(ResBlock {
            a: Conv2d::same(&path.sub("a"), c, c, 3)?,
            b: Conv2d::same(&path.sub("b"), c, c, 3)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = norm_relu(self.a.forward(x)?)?;
        let h = self.b.forward(&h)?.instance_norm(IN_EPS)?;
        Ok(x.add(&h)?)
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        let mut v = self.a.params();
        v.extend(self.b.params());
        v
    }
}

/// Residual blocks followed by `upsamples` transposed convolutions that halve channels.
/// Its output is the branch's last feature layer.
#[derive(Debug, Clone)]
pub(crate) struct Branch<T: Float> {
    res: Vec<ResBlock<T>>,
    ups: Vec<ConvTranspose2d<T>>,
}

impl<T: Float> Branch<T> {
    pub fn new(path: &ParamPath<T>, c: usize, blocks: usize, upsamples: usize) -> Result<Self> {
        let res = (0..blocks)
            .map(|i| ResBlock::new(&path.sub(format!("res{i}")), c))
            .collect::<Result<_>>()?;
        let ups = (0..upsamples)
            .map(|i| {
                let cin = c >> i;
                ConvTranspose2d::upsample2(&path.sub(format!("up{}", i + 1)), cin, cin / 2)
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Branch { res, ups })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for r in &self.res {
            h = r.forward(&h)?;
        }
        for u in &self.ups {
            h = norm_relu(u.forward(&h)?)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        let mut v: Vec<_> = self.res.iter().flat_map(|r| r.params()).collect();
        v.extend(self.ups.iter().flat_map(|u| u.params()));
        v
    }
}
