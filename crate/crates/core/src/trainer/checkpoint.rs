//! Binary checkpoint: 8-byte magic, `u32` format version, `u64` header length, JSON header,
//! then every tensor and optimizer moment as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use vidsynth_tensor::{Adam, AdamSlot, ParamStore};

use super::{Progress, TrainConfig, Trainer};
use crate::data::PairedSequence;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, InstanceFeatureModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VIDSYNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::data("<checkpoint>", format!("bad rng position {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Full training state plus what inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub progress: Progress,
    pub rng: RngState,
    /// Generator configuration of the current phase.
    pub generator: GeneratorConfig,
    /// `(height, width)` of the training data.
    pub data_size: (usize, usize),
    pub feature_model: Option<InstanceFeatureModel>,
    /// Parameters keyed `g:<name>` (generator) or `d:<name>` (discriminators).
    pub tensors: BTreeMap<String, TensorRecord>,
    /// Adam moments per optimizer (`g`, `d_image`, `d_video`) and parameter name.
    pub slots: BTreeMap<String, BTreeMap<String, AdamSlot<f32>>>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SlotEntry {
    optimizer: String,
    name: String,
    step: u64,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    progress: Progress,
    rng: RngState,
    generator: GeneratorConfig,
    data_size: (usize, usize),
    feature_model: Option<InstanceFeatureModel>,
    tensors: Vec<TensorEntry>,
    slots: Vec<SlotEntry>,
}

fn put(buf: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = Header {
        config: ckpt.config.clone(),
        progress: ckpt.progress,
        rng: ckpt.rng.clone(),
        generator: ckpt.generator.clone(),
        data_size: ckpt.data_size,
        feature_model: ckpt.feature_model.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        slots: ckpt
            .slots
            .iter()
            .flat_map(|(opt, slots)| {
                slots.iter().map(move |(name, s)| SlotEntry {
                    optimizer: opt.clone(),
                    name: name.clone(),
                    step: s.step,
                    len: s.m.len(),
                })
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::io(path, e.into()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in ckpt.tensors.values() {
        put(&mut buf, &t.data);
    }
    for slots in ckpt.slots.values() {
        for s in slots.values() {
            put(&mut buf, &s.m);
            put(&mut buf, &s.v);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                msg: format!("ends inside {what} ({} bytes left, {n} needed)", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8, "the magic number")? != CHECKPOINT_MAGIC {
        return Err(Error::data(path, "not a vidsynth checkpoint"));
    }
    let version = u32::from_le_bytes(r.take(4, "the version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(r.take(8, "the header length")?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len, "the header")?)
        .map_err(|e| Error::data(path, format!("corrupt header: {e}")))?;
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let n = e.shape.iter().product();
        let data = r.floats(n, &format!("tensor {}", e.name))?;
        tensors.insert(e.name, TensorRecord { shape: e.shape, data });
    }
    let mut slots: BTreeMap<String, BTreeMap<String, AdamSlot<f32>>> = BTreeMap::new();
    for e in header.slots {
        let m = r.floats(e.len, &format!("optimizer moments of {}", e.name))?;
        let v = r.floats(e.len, &format!("optimizer moments of {}", e.name))?;
        slots
            .entry(e.optimizer)
            .or_default()
            .insert(e.name, AdamSlot { step: e.step, m, v });
    }
    if r.pos != bytes.len() {
        return Err(Error::data(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        config: header.config,
        progress: header.progress,
        rng: header.rng,
        generator: header.generator,
        data_size: header.data_size,
        feature_model: header.feature_model,
        tensors,
        slots,
    })
}

fn restore_params(store: &ParamStore<f32>, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
    for p in store.params() {
        let key = format!("{prefix}{}", p.name());
        let Some(t) = ckpt.tensors.get(&key) else {
            return Err(Error::data("<checkpoint>", format!("missing parameter {key}")));
        };
        if t.shape != p.shape() {
            return Err(Error::data(
                "<checkpoint>",
                format!("parameter {key} has shape {:?}, expected {:?}", t.shape, p.shape()),
            ));
        }
        p.set_data(t.data.clone())?;
    }
    Ok(())
}

fn restore_slots(opt: &mut Adam<f32>, name: &str, ckpt: &Checkpoint) -> Result<()> {
    if let Some(slots) = ckpt.slots.get(name) {
        for (p, s) in slots {
            opt.set_slot(p, s.clone())?;
        }
    }
    Ok(())
}

impl Checkpoint {
    /// Inference-ready generator with the stored weights.
    pub fn build_generator(&self) -> Result<Generator<f32>> {
        let store = ParamStore::new(self.config.seed);
        let g = Generator::new(self.generator.clone(), store.clone())?;
        restore_params(&store, "g:", self)?;
        Ok(g)
    }
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (prefix, store) in [("g:", &self.g_store), ("d:", &self.d_store)] {
            for p in store.params() {
                tensors.insert(
                    format!("{prefix}{}", p.name()),
                    TensorRecord {
                        shape: p.shape().to_vec(),
                        data: p.data().as_ref().clone(),
                    },
                );
            }
        }
        let mut slots = BTreeMap::new();
        slots.insert("g".to_string(), self.opt_g.slots().clone());
        slots.insert("d_image".to_string(), self.opt_d_image.slots().clone());
        if let Some(o) = &self.opt_d_video {
            slots.insert("d_video".to_string(), o.slots().clone());
        }
        Checkpoint {
            config: self.config.clone(),
            progress: self.progress,
            rng: RngState::capture(&self.rng),
            generator: self.generator.config().clone(),
            data_size: self.data_size(),
            feature_model: None,
            tensors,
            slots,
        }
    }

    /// Resumes training from `ckpt` on the same data.
    pub fn from_checkpoint(ckpt: &Checkpoint, data: Arc<Vec<PairedSequence>>) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config.clone(), data)?;
        if t.data_size() != ckpt.data_size {
            return Err(Error::data(
                "<dataset>",
                format!("data is {:?}, checkpoint was trained on {:?}", t.data_size(), ckpt.data_size),
            ));
        }
        t.progress = ckpt.progress;
        if !t.is_finished() {
            t.enter_phase()?;
        } else {
            t.generator = Generator::new(ckpt.generator.clone(), t.g_store.clone())?;
            t.opt_g.add_params(t.generator.params());
        }
        restore_params(&t.g_store, "g:", ckpt)?;
        restore_params(&t.d_store, "d:", ckpt)?;
        restore_slots(&mut t.opt_g, "g", ckpt)?;
        restore_slots(&mut t.opt_d_image, "d_image", ckpt)?;
        if let Some(o) = &mut t.opt_d_video {
            restore_slots(o, "d_video", ckpt)?;
        }
        t.rng = ckpt.rng.restore()?;
        Ok(t)
    }
}
