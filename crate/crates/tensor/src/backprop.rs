use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::tensor::{NodeKind, TensorId, VarId};
use crate::{Float, Tensor};

/// Gradients of a scalar with respect to every variable reachable from it.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Float> {
    grads: BTreeMap<VarId, Vec<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: VarId) -> Option<&[T]> {
        self.grads.get(&var).map(|g| g.as_slice())
    }

    pub fn contains(&self, var: VarId) -> bool {
        self.grads.contains_key(&var)
    }

    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        self.grads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn accumulate<T: Float>(slot: &mut HashMap<TensorId, Vec<T>>, id: TensorId, g: Vec<T>) {
    match slot.get_mut(&id) {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => {
            slot.insert(id, g);
        }
    }
}

impl<T: Float> Tensor<T> {
    /// Reverse-mode sweep from a single-element tensor.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape().to_vec()));
        }
        self.backward_with(vec![T::one()])
    }

    /// Reverse-mode sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.numel() {
            return Err(TensorError::DataLength {
                len: seed.len(),
                shape: self.shape().to_vec(),
            });
        }
        let order = self.topological_order();
        let mut pending: HashMap<TensorId, Vec<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        let mut out = Gradients::default();
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.node.kind {
                NodeKind::Constant => {}
                NodeKind::Variable(var) => match out.grads.get_mut(var) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(grad) {
                            *a += b;
                        }
                    }
                    None => {
                        out.grads.insert(*var, grad);
                    }
                },
                NodeKind::Op(f) => {
                    let needs: Vec<bool> = f.parents.iter().map(|p| p.is_tracked()).collect();
                    let parent_grads = (f.backward)(&needs, node.data(), &grad);
                    debug_assert_eq!(parent_grads.len(), f.parents.len());
                    for ((parent, g), need) in f.parents.iter().zip(parent_grads).zip(&needs) {
                        if let (Some(g), true) = (g, *need) {
                            debug_assert_eq!(g.len(), parent.numel());
                            accumulate(&mut pending, parent.id(), g);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Tracked nodes reachable from `self`, parents before children.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        if !self.is_tracked() {
            return order;
        }
        // Iterative post-order DFS; graphs from long rollouts are too deep for recursion.
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let NodeKind::Op(f) = &t.node.kind {
                for p in f.parents.iter().rev() {
                    if p.is_tracked() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
