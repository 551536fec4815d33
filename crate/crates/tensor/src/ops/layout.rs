use crate::error::{invalid, Result, TensorError};
use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |_, _, g| vec![Some(g.to_vec())],
        ))
    }

    /// Concatenates along `dim`. All other extents must agree.
    pub fn cat(tensors: &[Tensor<T>], dim: usize) -> Result<Tensor<T>> {
        let Some(first) = tensors.first() else {
            return invalid("cat", "no tensors");
        };
        let rank = first.rank();
        if dim >= rank {
            return invalid("cat", format!("dim {dim} out of range for rank {rank}"));
        }
        for t in tensors {
            let ok = t.rank() == rank
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == dim || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "cat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..dim].iter().product();
        let inner: usize = first.shape()[dim + 1..].iter().product();
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[dim]).collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[dim] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &s) in tensors.iter().zip(&sizes) {
                let block = s * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        Ok(Tensor::from_op(
            shape,
            data,
            tensors.to_vec(),
            move |needs, _, g| {
                let mut grads: Vec<Option<Vec<T>>> = needs
                    .iter()
                    .zip(&sizes)
                    .map(|(&n, &s)| n.then(|| Vec::with_capacity(outer * s * inner)))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (slot, &s) in grads.iter_mut().zip(&sizes) {
                        let block = s * inner;
                        if let Some(v) = slot {
                            v.extend_from_slice(&g[off..off + block]);
                        }
                        off += block;
                    }
                }
                grads
            },
        ))
    }

    /// Slice `[start, start + len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if dim >= self.rank() || start + len > self.shape()[dim] {
            return invalid(
                "narrow",
                format!("range {start}..{} on dim {dim} of {:?}", start + len, self.shape()),
            );
        }
        let outer: usize = self.shape()[..dim].iter().product();
        let inner: usize = self.shape()[dim + 1..].iter().product();
        let extent = self.shape()[dim];
        let mut shape = self.shape().to_vec();
        shape[dim] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let numel = self.numel();
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |_, _, g| {
            let mut out = vec![T::zero(); numel];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(out)]
        }))
    }

    /// Splits along `dim` into consecutive pieces of the given sizes.
    pub fn split(&self, dim: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(dim, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Repeats a size-1 axis `times` times.
    pub fn repeat_dim(&self, dim: usize, times: usize) -> Result<Tensor<T>> {
        let parts = vec![self.clone(); times];
        Tensor::cat(&parts, dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cat_then_narrow_roundtrip() {
        let a = Tensor::<f32>::from_vec((0..8).map(|v| v as f32).collect(), &[1, 2, 2, 2]).unwrap();
        let b = Tensor::<f32>::from_vec((8..12).map(|v| v as f32).collect(), &[1, 1, 2, 2]).unwrap();
        let c = Tensor::cat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2, 2]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.narrow(1, 2, 1).unwrap().data(), b.data());
    }

    #[test]
    fn cat_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 1, 3, 2]);
        assert!(Tensor::cat(&[a, b], 1).is_err());
    }
}
