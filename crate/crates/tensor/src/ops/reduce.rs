use crate::error::{invalid, Result};
use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |_, _, g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Mean over every axis except the first, giving shape `[N]`.
    pub fn mean_per_sample(&self) -> Result<Tensor<T>> {
        let Some(&n) = self.shape().first() else {
            return invalid("mean_per_sample", "rank-0 tensor");
        };
        if n == 0 {
            return invalid("mean_per_sample", "empty batch");
        }
        let per = self.numel() / n;
        let data: Vec<T> = self
            .data()
            .chunks(per)
            .map(|c| c.iter().copied().sum::<T>() / T::lit(per as f64))
            .collect();
        Ok(Tensor::from_op(vec![n], data, vec![self.clone()], move |_, _, g| {
            let inv = T::lit(1.0 / per as f64);
            let mut out = Vec::with_capacity(n * per);
            for &gi in g {
                out.extend(std::iter::repeat_n(gi * inv, per));
            }
            vec![Some(out)]
        }))
    }
}
