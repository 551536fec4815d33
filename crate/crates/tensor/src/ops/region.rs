use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::{Float, Tensor};

/// Dense per-sample relabelling of arbitrary region ids to `0..count`.
fn dense_regions(ids: &[u32]) -> (Vec<usize>, Vec<usize>) {
    let mut map = BTreeMap::new();
    for &id in ids {
        let next = map.len();
        map.entry(id).or_insert(next);
    }
    let dense: Vec<usize> = ids.iter().map(|id| map[id]).collect();
    let mut counts = vec![0usize; map.len()];
    for &d in &dense {
        counts[d] += 1;
    }
    (dense, counts)
}

impl<T: Float> Tensor<T> {
    /// Replaces every value by the mean over its region, per sample and channel.
    /// `regions` holds one id per pixel for each sample (`N * H * W` entries).
    pub fn region_mean(&self, regions: &[u32]) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let plane = h * w;
        if regions.len() != n * plane {
            return invalid(
                "region_mean",
                format!("{} region ids for {n} samples of {h}x{w}", regions.len()),
            );
        }
        let layout: Arc<Vec<(Vec<usize>, Vec<usize>)>> = Arc::new(
            regions
                .chunks(plane)
                .map(dense_regions)
                .collect(),
        );
        let pool = {
            let layout = Arc::clone(&layout);
            move |src: &[T], dst: &mut [T]| {
                for s in 0..n {
                    let (dense, counts) = &layout[s];
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let mut sums = vec![T::zero(); counts.len()];
                        // Constant regions keep their value bit-for-bit, which makes
                        // pooling exactly idempotent.
                        let mut first: Vec<Option<T>> = vec![None; counts.len()];
                        let mut uniform = vec![true; counts.len()];
                        for (&d, &v) in dense.iter().zip(&src[base..base + plane]) {
                            sums[d] += v;
                            match first[d] {
                                None => first[d] = Some(v),
                                Some(f) => uniform[d] &= f == v,
                            }
                        }
                        for (k, sum) in sums.iter_mut().enumerate() {
                            *sum = match (uniform[k], first[k]) {
                                (true, Some(f)) => f,
                                _ => *sum / T::lit(counts[k] as f64),
                            };
                        }
                        for (o, &d) in dst[base..base + plane].iter_mut().zip(dense) {
                            *o = sums[d];
                        }
                    }
                }
            }
        };
        let mut out = vec![T::zero(); self.numel()];
        pool(self.data(), &mut out);
        // The pooling operator is symmetric, so its adjoint is itself.
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |_, _, g| {
                let mut gx = vec![T::zero(); g.len()];
                pool(g, &mut gx);
                vec![Some(gx)]
            },
        ))
    }
}
