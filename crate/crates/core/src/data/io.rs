use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    ClassTable, FlowField, InstanceMap, LabelMap, PairedSequence, Plane, RgbFrame, SceneConfig,
    SourceSequence,
};
use crate::error::{Error, Result};

const FLO_MAGIC: f32 = 202021.25;
const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "vidsynth-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub config: SceneConfig,
    pub motions: Vec<Vec<[i32; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub classes: ClassTable,
    pub sequences: Vec<SequenceEntry>,
}

/// An opened dataset directory. Sequences are decoded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:04}.{ext}")
}

fn sequence_files(entry: &SequenceEntry) -> Vec<PathBuf> {
    let base = PathBuf::from(&entry.id);
    let mut files = Vec::new();
    for t in 0..entry.num_frames {
        for dir in ["frames", "labels", "instances"] {
            files.push(base.join(dir).join(frame_name(t, "png")));
        }
    }
    for t in 0..entry.num_frames.saturating_sub(1) {
        files.push(base.join("flow").join(frame_name(t, "flo")));
        files.push(base.join("valid").join(frame_name(t, "png")));
    }
    files
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        // Writing into a Vec with a consistent header cannot fail.
        let mut writer = enc.write_header().expect("png header");
        writer.write_image_data(data).expect("png data");
    }
    out
}

pub fn write_png_rgb(path: &Path, frame: &RgbFrame) -> Result<()> {
    write_file(path, &encode_png(frame.width, frame.height, png::ColorType::Rgb, &frame.data))
}

pub fn write_png_gray(path: &Path, plane: &Plane<u8>) -> Result<()> {
    write_file(
        path,
        &encode_png(plane.width, plane.height, png::ColorType::Grayscale, &plane.data),
    )
}

fn decode_png(path: &Path, want: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::data(path, format!("invalid PNG: {e}"));
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(path, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.color_type != want || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::data(
            path,
            format!(
                "expected 8-bit {want:?}, found {:?} {:?}",
                info.bit_depth, info.color_type
            ),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn read_png_rgb(path: &Path) -> Result<RgbFrame> {
    let (width, height, data) = decode_png(path, png::ColorType::Rgb)?;
    Ok(RgbFrame {
        width,
        height,
        data,
    })
}

pub fn read_png_gray(path: &Path) -> Result<Plane<u8>> {
    let (width, height, data) = decode_png(path, png::ColorType::Grayscale)?;
    Ok(Plane {
        width,
        height,
        data,
    })
}

/// Writes a flow field in the Middlebury `.flo` layout.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&FLO_MAGIC.to_le_bytes())?;
    write(&(flow.width as i32).to_le_bytes())?;
    write(&(flow.height as i32).to_le_bytes())?;
    for v in &flow.data {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::data(path, "truncated .flo header"));
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[i..i + 4]).unwrap();
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::data(path, "bad .flo magic number"));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(Error::data(path, format!("bad .flo size {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let expected = 12 + width * height * 8;
    if bytes.len() != expected {
        return Err(Error::data(
            path,
            format!("expected {expected} bytes for {width}x{height}, found {}", bytes.len()),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FlowField {
        width,
        height,
        data,
    })
}

fn bool_plane_to_u8(p: &Plane<bool>) -> Plane<u8> {
    Plane {
        width: p.width,
        height: p.height,
        data: p.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
}

/// Writes sequences as `<dir>/<id>/{frames,labels,instances,flow,valid}/NNNN.*` plus a
/// JSON manifest. Sequence ids are `seq_NNNN` in input order.
pub fn write_dataset(sequences: &[PairedSequence], dir: &Path) -> Result<Manifest> {
    create_dir(dir)?;
    let classes = sequences
        .first()
        .map(|s| s.source.classes.clone())
        .unwrap_or_default();
    let mut entries = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        if seq.source.classes != classes {
            return Err(Error::Contract(
                "all sequences in a dataset must share one class table".into(),
            ));
        }
        let id = format!("seq_{i:04}");
        let base = dir.join(&id);
        for sub in ["frames", "labels", "instances", "flow", "valid"] {
            create_dir(&base.join(sub))?;
        }
        for t in 0..seq.len() {
            write_png_rgb(&base.join("frames").join(frame_name(t, "png")), &seq.frames[t])?;
            write_png_gray(
                &base.join("labels").join(frame_name(t, "png")),
                &seq.source.labels[t],
            )?;
            write_png_gray(
                &base.join("instances").join(frame_name(t, "png")),
                &seq.source.instances[t],
            )?;
        }
        for t in 0..seq.flows.len() {
            write_flo(&base.join("flow").join(frame_name(t, "flo")), &seq.flows[t])?;
            write_png_gray(
                &base.join("valid").join(frame_name(t, "png")),
                &bool_plane_to_u8(&seq.validity[t]),
            )?;
        }
        entries.push(SequenceEntry {
            id,
            num_frames: seq.len(),
            width: seq.width(),
            height: seq.height(),
            config: seq.config.clone(),
            motions: seq.motions.clone(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        classes,
        sequences: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), json.as_bytes())?;
    Ok(manifest)
}

/// Opens a dataset directory, validating the manifest and the presence of every file it
/// references.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::NoManifest(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::data(&path, format!("corrupt manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::data(
            &path,
            format!(
                "unsupported dataset format {} v{} (expected {FORMAT} v{FORMAT_VERSION})",
                manifest.format, manifest.version
            ),
        ));
    }
    for entry in &manifest.sequences {
        for rel in sequence_files(entry) {
            let file = dir.join(rel);
            if !file.is_file() {
                return Err(Error::data(&file, "missing file listed by the manifest"));
            }
        }
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.sequences.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<PairedSequence> {
        let entry = self.manifest.sequences.get(index).ok_or_else(|| {
            Error::Contract(format!("sequence index {index} out of range 0..{}", self.len()))
        })?;
        let base = self.root.join(&entry.id);
        let check = |path: &Path, w: usize, h: usize| {
            if (w, h) != (entry.width, entry.height) {
                Err(Error::data(
                    path,
                    format!("size {w}x{h}, manifest says {}x{}", entry.width, entry.height),
                ))
            } else {
                Ok(())
            }
        };
        let (mut frames, mut labels, mut instances) = (vec![], vec![], vec![]);
        for t in 0..entry.num_frames {
            let p = base.join("frames").join(frame_name(t, "png"));
            let f = read_png_rgb(&p)?;
            check(&p, f.width, f.height)?;
            frames.push(f);
            let p = base.join("labels").join(frame_name(t, "png"));
            let l = read_png_gray(&p)?;
            check(&p, l.width, l.height)?;
            if let Some(&c) = l.data.iter().find(|&&c| c as usize >= self.manifest.classes.num_classes()) {
                return Err(Error::data(&p, format!("unknown class id {c}")));
            }
            labels.push(l);
            let p = base.join("instances").join(frame_name(t, "png"));
            let i = read_png_gray(&p)?;
            check(&p, i.width, i.height)?;
            instances.push(i);
        }
        let (mut flows, mut validity) = (vec![], vec![]);
        for t in 0..entry.num_frames.saturating_sub(1) {
            let p = base.join("flow").join(frame_name(t, "flo"));
            let f = read_flo(&p)?;
            check(&p, f.width, f.height)?;
            flows.push(f);
            let p = base.join("valid").join(frame_name(t, "png"));
            let v = read_png_gray(&p)?;
            check(&p, v.width, v.height)?;
            validity.push(Plane {
                width: v.width,
                height: v.height,
                data: v.data.iter().map(|&b| b >= 128).collect(),
            });
        }
        Ok(PairedSequence {
            config: entry.config.clone(),
            source: SourceSequence {
                labels,
                instances,
                classes: self.manifest.classes.clone(),
            },
            frames,
            flows,
            validity,
            motions: entry.motions.clone(),
        })
    }

    pub fn entry(&self, index: usize) -> Result<&SequenceEntry> {
        self.manifest.sequences.get(index).ok_or_else(|| {
            Error::Contract(format!("sequence index {index} out of range 0..{}", self.len()))
        })
    }

    /// Index of the sequence with manifest id `id`.
    pub fn find(&self, id: &str) -> Option<usize> {
        self.manifest.sequences.iter().position(|e| e.id == id)
    }

    fn step_path(&self, index: usize, t: usize, dir: &str, ext: &str) -> Result<PathBuf> {
        let entry = self.entry(index)?;
        let last = if matches!(dir, "flow" | "valid") {
            entry.num_frames.saturating_sub(1)
        } else {
            entry.num_frames
        };
        if t >= last {
            return Err(Error::Contract(format!("{dir} index {t} out of range 0..{last}")));
        }
        Ok(self.root.join(&entry.id).join(dir).join(frame_name(t, ext)))
    }

    /// Label and instance maps of one time step, read on demand.
    pub fn source_step(&self, index: usize, t: usize) -> Result<(LabelMap, InstanceMap)> {
        let p = self.step_path(index, t, "labels", "png")?;
        let labels = read_png_gray(&p)?;
        if let Some(&c) = labels.data.iter().find(|&&c| c as usize >= self.manifest.classes.num_classes()) {
            return Err(Error::data(&p, format!("unknown class id {c}")));
        }
        let p = self.step_path(index, t, "instances", "png")?;
        let instances = read_png_gray(&p)?;
        if (instances.width, instances.height) != (labels.width, labels.height) {
            return Err(Error::data(&p, "instance map size differs from the label map"));
        }
        Ok((labels, instances))
    }

    /// Ground-truth flow from frame `t + 1` back to frame `t`, with its validity mask.
    pub fn flow_step(&self, index: usize, t: usize) -> Result<(FlowField, Plane<bool>)> {
        let flow = read_flo(&self.step_path(index, t, "flow", "flo")?)?;
        let v = read_png_gray(&self.step_path(index, t, "valid", "png")?)?;
        let valid = Plane {
            width: v.width,
            height: v.height,
            data: v.data.iter().map(|&b| b >= 128).collect(),
        };
        Ok((flow, valid))
    }

    pub fn frame(&self, index: usize, t: usize) -> Result<RgbFrame> {
        read_png_rgb(&self.step_path(index, t, "frames", "png")?)
    }

    pub fn load_all(&self) -> Result<Vec<PairedSequence>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
