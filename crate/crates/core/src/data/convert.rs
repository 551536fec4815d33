//! Conversions between stored 8-bit/integer data and `[N, C, H, W]` tensors, with
//! optional integer downsampling for coarse training phases.

use vidsynth_tensor::{Float, Tensor};

use super::{
    derive_background_mask, ClassTable, FlowField, LabelMap, PairedSequence, Plane, RgbFrame,
    SourceSequence,
};
use crate::error::{contract, Result};

/// `v / 127.5 - 1`.
pub fn byte_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`], rounding and clamping.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn check_factor(w: usize, h: usize, factor: usize) -> Result<()> {
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return contract(format!("{w}x{h} is not divisible by downsample factor {factor}"));
    }
    Ok(())
}

/// Frame as `C x H x W` values in `[-1, 1]`, averaged over `factor x factor` blocks.
pub fn frame_chw<T: Float>(frame: &RgbFrame, factor: usize) -> Result<Vec<T>> {
    check_factor(frame.width, frame.height, factor)?;
    let (w, h) = (frame.width / factor, frame.height / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![T::zero(); 3 * w * h];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += byte_to_unit(frame.pixel(x * factor + dx, y * factor + dy)[c]);
                    }
                }
                out[(c * h + y) * w + x] = T::lit(acc * norm);
            }
        }
    }
    Ok(out)
}

/// Quantizes one `3 x H x W` sample back to an 8-bit frame.
pub fn chw_to_frame<T: Float>(data: &[T], width: usize, height: usize) -> Result<RgbFrame> {
    if data.len() != 3 * width * height {
        return contract(format!(
            "{} values cannot form a 3x{height}x{width} frame",
            data.len()
        ));
    }
    let mut frame = RgbFrame::new(width, height);
    let plane = width * height;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            frame.set_pixel(
                x,
                y,
                [0, 1, 2].map(|c| unit_to_byte(data[c * plane + i].as_f64())),
            );
        }
    }
    Ok(frame)
}

/// Nearest sample at the centre-ish pixel of each block.
pub fn downsample_plane<V: Copy>(plane: &Plane<V>, factor: usize) -> Result<Plane<V>> {
    check_factor(plane.width, plane.height, factor)?;
    let (w, h) = (plane.width / factor, plane.height / factor);
    let off = factor / 2;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(plane.get(x * factor + off, y * factor + off));
        }
    }
    Ok(Plane {
        width: w,
        height: h,
        data,
    })
}

/// One-hot `C x H x W` encoding of a label map.
pub fn one_hot_chw<T: Float>(labels: &LabelMap, classes: &ClassTable) -> Result<Vec<T>> {
    let n = classes.num_classes();
    let plane = labels.width * labels.height;
    let mut out = vec![T::zero(); n * plane];
    for (i, &c) in labels.data.iter().enumerate() {
        if c as usize >= n {
            return Err(crate::error::Error::UnknownClass(c));
        }
        out[c as usize * plane + i] = T::one();
    }
    Ok(out)
}

/// Flow as `2 x H x W`, block-averaged and divided by `factor`.
pub fn flow_chw<T: Float>(flow: &FlowField, factor: usize) -> Result<Vec<T>> {
    check_factor(flow.width, flow.height, factor)?;
    let (w, h) = (flow.width / factor, flow.height / factor);
    let norm = 1.0 / (factor * factor * factor) as f64;
    let mut out = vec![T::zero(); 2 * w * h];
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += flow.get(x * factor + dx, y * factor + dy)[c] as f64;
                    }
                }
                out[(c * h + y) * w + x] = T::lit(acc * norm);
            }
        }
    }
    Ok(out)
}

/// A pixel is valid at the coarse scale only if its whole block was valid.
pub fn validity_chw<T: Float>(valid: &Plane<bool>, factor: usize) -> Result<Vec<T>> {
    check_factor(valid.width, valid.height, factor)?;
    let (w, h) = (valid.width / factor, valid.height / factor);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let all = (0..factor)
                .all(|dy| (0..factor).all(|dx| valid.get(x * factor + dx, y * factor + dy)));
            out.push(if all { T::one() } else { T::zero() });
        }
    }
    Ok(out)
}

fn stack<T: Float>(samples: Vec<Vec<T>>, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let n = samples.len();
    Ok(Tensor::from_vec(samples.concat(), &[n, c, h, w])?)
}

/// One source time step for a batch: one-hot labels, background mask, instance ids.
#[derive(Debug, Clone)]
pub struct SourceFrame<T: Float> {
    /// `[B, num_classes, H, W]`.
    pub labels: Tensor<T>,
    /// `[B, 1, H, W]`, 1 on background classes.
    pub bg_mask: Tensor<T>,
    /// `B * H * W` instance ids.
    pub instances: Vec<u32>,
}

impl<T: Float> SourceFrame<T> {
    /// Builds a batch from per-sample `(labels, instances)` maps at full resolution.
    pub fn from_maps(
        maps: &[(&LabelMap, &Plane<u8>)],
        classes: &ClassTable,
        factor: usize,
    ) -> Result<Self> {
        if maps.is_empty() {
            return contract("empty batch");
        }
        let (mut onehots, mut masks, mut ids) = (vec![], vec![], vec![]);
        let (mut w, mut h) = (0, 0);
        for (i, (labels, inst)) in maps.iter().enumerate() {
            let l = downsample_plane(labels, factor)?;
            let inst = downsample_plane(inst, factor)?;
            if i == 0 {
                (w, h) = (l.width, l.height);
            } else if (l.width, l.height) != (w, h) {
                return contract("batch samples differ in size");
            }
            onehots.push(one_hot_chw::<T>(&l, classes)?);
            let m = derive_background_mask(&l, classes)?;
            masks.push(m.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect());
            ids.extend(inst.data.iter().map(|&v| v as u32));
        }
        Ok(SourceFrame {
            labels: stack(onehots, classes.num_classes(), h, w)?,
            bg_mask: stack(masks, 1, h, w)?,
            instances: ids,
        })
    }

    pub fn batch(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.labels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.labels.shape()[3]
    }
}

/// Per-time-step batched tensors for a window of frames `start..start + len` of several
/// sequences, optionally downsampled.
#[derive(Debug, Clone)]
pub struct SequenceTensors<T: Float> {
    pub source: Vec<SourceFrame<T>>,
    /// `[B, 3, H, W]` per frame.
    pub frames: Vec<Tensor<T>>,
    /// `[B, 2, H, W]` per transition; `flows[t]` maps frame `t + 1` onto frame `t`.
    pub flows: Vec<Tensor<T>>,
    /// `[B, 1, H, W]` per transition.
    pub valid: Vec<Tensor<T>>,
}

impl<T: Float> SequenceTensors<T> {
    pub fn from_sequences(
        seqs: &[&PairedSequence],
        start: usize,
        len: usize,
        factor: usize,
    ) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return contract("empty batch");
        };
        for s in seqs {
            if start + len > s.len() || len == 0 {
                return contract(format!(
                    "window {start}..{} exceeds a sequence of {} frames",
                    start + len,
                    s.len()
                ));
            }
            if (s.width(), s.height()) != (first.width(), first.height()) {
                return contract("batch sequences differ in size");
            }
        }
        check_factor(first.width(), first.height(), factor)?;
        let (w, h) = (first.width() / factor, first.height() / factor);
        let classes = &first.source.classes;
        let mut out = SequenceTensors {
            source: vec![],
            frames: vec![],
            flows: vec![],
            valid: vec![],
        };
        for t in start..start + len {
            let maps: Vec<_> = seqs
                .iter()
                .map(|s| (&s.source.labels[t], &s.source.instances[t]))
                .collect();
            out.source.push(SourceFrame::from_maps(&maps, classes, factor)?);
            let frames = seqs
                .iter()
                .map(|s| frame_chw::<T>(&s.frames[t], factor))
                .collect::<Result<Vec<_>>>()?;
            out.frames.push(stack(frames, 3, h, w)?);
            if t + 1 < start + len {
                let flows = seqs
                    .iter()
                    .map(|s| flow_chw::<T>(&s.flows[t], factor))
                    .collect::<Result<Vec<_>>>()?;
                out.flows.push(stack(flows, 2, h, w)?);
                let valid = seqs
                    .iter()
                    .map(|s| validity_chw::<T>(&s.validity[t], factor))
                    .collect::<Result<Vec<_>>>()?;
                out.valid.push(stack(valid, 1, h, w)?);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Source-only tensors for a whole sequence (used by inference).
pub fn source_frames<T: Float>(
    source: &SourceSequence,
    factor: usize,
) -> Result<Vec<SourceFrame<T>>> {
    (0..source.len())
        .map(|t| {
            SourceFrame::from_maps(
                &[(&source.labels[t], &source.instances[t])],
                &source.classes,
                factor,
            )
        })
        .collect()
}
