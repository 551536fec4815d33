use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{invalid, Result, TensorError};
use crate::tensor::VarId;
use crate::{Float, Tensor};

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// A named, mutable leaf of the model. All graph uses go through [`Param::tensor`].
pub struct Param<T: Float> {
    id: VarId,
    name: String,
    shape: Vec<usize>,
    value: RwLock<Arc<Vec<T>>>,
    trainable: AtomicBool,
}

impl<T: Float> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({} {:?})", self.name, self.shape)
    }
}

impl<T: Float> Param<T> {
    pub fn id(&self) -> VarId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Graph leaf for the current value; tracked only while the parameter is trainable.
    pub fn tensor(&self) -> Tensor<T> {
        let var = self.is_trainable().then_some(self.id);
        Tensor::from_shared(self.data(), self.shape.clone(), var)
    }

    pub fn data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.value.read().expect("param lock poisoned"))
    }

    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: self.shape.clone(),
            });
        }
        *self.value.write().expect("param lock poisoned") = Arc::new(data);
        Ok(())
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, on: bool) {
        self.trainable.store(on, Ordering::Relaxed);
    }
}

struct StoreInner<T: Float> {
    seed: u64,
    params: RwLock<BTreeMap<String, Arc<Param<T>>>>,
}

/// Named parameter registry. Initial values depend only on the store seed and the full
/// parameter name, so adding sub-networks later never perturbs existing initialisations.
pub struct ParamStore<T: Float> {
    inner: Arc<StoreInner<T>>,
}

impl<T: Float> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed())
            .field("params", &self.len())
            .finish()
    }
}

impl<T: Float> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            inner: Arc::clone(&self.inner),
        }
    }
}

/// FNV-1a, used to derive per-parameter RNG streams from names.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl<T: Float> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            inner: Arc::new(StoreInner {
                seed,
                params: RwLock::new(BTreeMap::new()),
            }),
        }
    }

    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    pub fn root(&self) -> ParamPath<T> {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Arc<Param<T>>> {
        self.inner.params.read().expect("store lock").get(name).cloned()
    }

    /// All parameters in name order.
    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        self.inner.params.read().expect("store lock").values().cloned().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.params.read().expect("store lock").keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.params.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_elements(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&self, prefix: &str, on: bool) {
        for p in self.params() {
            if p.name().starts_with(prefix) {
                p.set_trainable(on);
            }
        }
    }

    fn get_or_create(&self, name: String, shape: &[usize], init: Init) -> Result<Arc<Param<T>>> {
        let mut params = self.inner.params.write().expect("store lock");
        if let Some(p) = params.get(&name) {
            if p.shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "param",
                    lhs: p.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            return Ok(Arc::clone(p));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.inner.seed ^ fnv1a(&name));
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Const(v) => vec![T::lit(v); n],
            Init::Normal { mean, std } => {
                let d = Normal::new(mean, std).map_err(|e| TensorError::Invalid {
                    op: "init",
                    msg: e.to_string(),
                })?;
                (0..n).map(|_| T::lit(d.sample(&mut rng))).collect()
            }
            Init::Uniform { lo, hi } => {
                let d = Uniform::new(lo, hi).map_err(|e| TensorError::Invalid {
                    op: "init",
                    msg: e.to_string(),
                })?;
                (0..n).map(|_| T::lit(d.sample(&mut rng))).collect()
            }
        };
        let p = Arc::new(Param {
            id: VarId::fresh(),
            name: name.clone(),
            shape: shape.to_vec(),
            value: RwLock::new(Arc::new(data)),
            trainable: AtomicBool::new(true),
        });
        params.insert(name, Arc::clone(&p));
        Ok(p)
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn copy_matching(&self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for p in self.params() {
            if let Some(src) = other.get(p.name()) {
                if src.shape() != p.shape() {
                    return invalid("copy_matching", format!("shape mismatch for {}", p.name()));
                }
                p.set_data(src.data().as_ref().clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Hierarchical naming cursor into a [`ParamStore`].
pub struct ParamPath<T: Float> {
    store: ParamStore<T>,
    prefix: String,
}

impl<T: Float> Clone for ParamPath<T> {
    fn clone(&self) -> Self {
        ParamPath {
            store: self.store.clone(),
            prefix: self.prefix.clone(),
        }
    }
}

impl<T: Float> ParamPath<T> {
    pub fn sub(&self, name: impl AsRef<str>) -> ParamPath<T> {
        ParamPath {
            store: self.store.clone(),
            prefix: self.join(name.as_ref()),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Arc<Param<T>>> {
        self.store.get_or_create(self.join(name), shape, init)
    }
}
