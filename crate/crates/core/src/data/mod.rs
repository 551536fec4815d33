//! Synthetic paired-video world: label/instance maps, rendered target frames, and analytic
//! target-to-source optical flow with per-pixel validity.

pub mod convert;
mod io;
mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use convert::{
    byte_to_unit, chw_to_frame, downsample_plane, flow_chw, frame_chw, one_hot_chw, source_frames,
    unit_to_byte, validity_chw, SequenceTensors, SourceFrame,
};
pub use io::{
    read_dataset, read_flo, read_png_gray, read_png_rgb, write_dataset, write_flo, write_png_gray,
    write_png_rgb, Dataset, Manifest, SequenceEntry,
};
pub use render::render_sequence;

/// Class id of the textured background.
pub const BACKGROUND_CLASS: u8 = 0;
/// Instance id carried by background pixels.
pub const BACKGROUND_INSTANCE: u8 = 0;
/// Background plus one class per shape kind.
pub const NUM_CLASSES: usize = 4;
/// Shortest sequence the generator window (L = 2) can train on.
pub const MIN_FRAMES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle];

    pub fn class_id(self) -> u8 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Rectangle => 2,
            ShapeKind::Triangle => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// Which class ids exist and which of them count as background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub names: Vec<String>,
    pub background: Vec<u8>,
}

impl Default for ClassTable {
    fn default() -> Self {
        let mut names = vec!["background".to_string()];
        names.extend(ShapeKind::ALL.iter().map(|k| k.name().to_string()));
        ClassTable {
            names,
            background: vec![BACKGROUND_CLASS],
        }
    }
}

impl ClassTable {
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn is_background(&self, class: u8) -> Result<bool> {
        if class as usize >= self.names.len() {
            return Err(Error::UnknownClass(class));
        }
        Ok(self.background.contains(&class))
    }
}

/// Appearance of the panning background texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundConfig {
    pub base: [u8; 3],
    /// Peak deviation from `base`, in 8-bit levels.
    pub amplitude: f64,
    /// Spatial period of the texture, in pixels.
    pub period: f64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            base: [120, 110, 95],
            amplitude: 40.0,
            period: 24.0,
        }
    }
}

/// An explicitly placed shape, for hand-built scenes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Bounding-box width and height in pixels.
    pub size: [usize; 2],
    /// Top-left corner of the bounding box at frame 0.
    pub position: [i32; 2],
    /// Displacement per frame, in pixels.
    pub velocity: [i32; 2],
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_shapes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Velocity components are drawn from `-max_speed..=max_speed`.
    pub max_speed: i32,
    pub min_size: usize,
    pub max_size: usize,
    pub background: BackgroundConfig,
    /// Camera motion per frame; the background moves by the negated amount on screen.
    pub camera_pan: [i32; 2],
    /// Number of coarse-to-fine scales the frames must support.
    pub scales: u32,
    /// When set, replaces the random shape draw (`num_shapes` is then ignored).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapes: Option<Vec<ShapeSpec>>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            num_frames: 12,
            height: 64,
            width: 64,
            num_shapes: 3,
            shape_kinds: ShapeKind::ALL.to_vec(),
            max_speed: 2,
            min_size: 10,
            max_size: 20,
            background: BackgroundConfig::default(),
            camera_pan: [1, 0],
            scales: 3,
            shapes: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.scales.saturating_sub(1);
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} must be divisible by 2^(scales-1) = {div}",
                self.width, self.height
            )));
        }
        if self.num_frames < MIN_FRAMES {
            return Err(Error::Config(format!(
                "num_frames = {} but at least {MIN_FRAMES} frames are required",
                self.num_frames
            )));
        }
        if self.shapes.is_none() {
            if self.num_shapes == 0 {
                return Err(Error::Config("num_shapes must be at least 1".into()));
            }
            if self.shape_kinds.is_empty() {
                return Err(Error::Config("shape_kinds is empty".into()));
            }
            if self.min_size == 0
                || self.min_size > self.max_size
                || self.max_size > self.width.min(self.height)
            {
                return Err(Error::Config(format!(
                    "shape size range {}..={} does not fit a {}x{} frame",
                    self.min_size, self.max_size, self.width, self.height
                )));
            }
        }
        if self.max_speed < 0 {
            return Err(Error::Config("max_speed must be non-negative".into()));
        }
        if let Some(shapes) = &self.shapes {
            for s in shapes {
                let fits = s.position[0] >= 0
                    && s.position[1] >= 0
                    && s.size[0] >= 1
                    && s.size[1] >= 1
                    && s.position[0] as usize + s.size[0] <= self.width
                    && s.position[1] as usize + s.size[1] <= self.height;
                if !fits {
                    return Err(Error::Config(format!("shape {s:?} does not fit the frame")));
                }
            }
        }
        Ok(())
    }
}

/// Dense 2-D grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }
}

/// Per-pixel semantic class ids.
pub type LabelMap = Plane<u8>;
/// Per-pixel object instance ids; [`BACKGROUND_INSTANCE`] for background.
pub type InstanceMap = Plane<u8>;
/// True where a flow vector points at the same visible surface in the previous frame.
pub type ValidityMask = Plane<bool>;

/// 8-bit RGB frame, interleaved. Maps to `[-1, 1]` as `v / 127.5 - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbFrame {
    pub fn new(width: usize, height: usize) -> Self {
        RgbFrame {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-pixel `(u, v)` displacement in pixels, interleaved, target-to-source: the value at
/// pixel `p` of frame `t + 1` is the offset to its source location in frame `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        let i = (y * self.width + x) * 2;
        [self.data[i], self.data[i + 1]]
    }

    pub fn set(&mut self, x: usize, y: usize, uv: [f32; 2]) {
        let i = (y * self.width + x) * 2;
        self.data[i] = uv[0];
        self.data[i + 1] = uv[1];
    }
}

/// The conditioning side of a pair: label maps, instance maps, and the class table used to
/// derive background masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSequence {
    pub labels: Vec<LabelMap>,
    pub instances: Vec<InstanceMap>,
    pub classes: ClassTable,
}

impl SourceSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn background_mask(&self, t: usize) -> Result<Plane<bool>> {
        derive_background_mask(&self.labels[t], &self.classes)
    }
}

/// A source video with its rendered target, ground-truth flow, and flow validity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSequence {
    pub config: SceneConfig,
    pub source: SourceSequence,
    pub frames: Vec<RgbFrame>,
    /// `flows[t]` maps frame `t + 1` back onto frame `t`.
    pub flows: Vec<FlowField>,
    pub validity: Vec<ValidityMask>,
    /// `motions[t][k]`: screen displacement of instance `k + 1` from frame `t` to `t + 1`.
    pub motions: Vec<Vec<[i32; 2]>>,
}

impl PairedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn height(&self) -> usize {
        self.config.height
    }
}

/// `true` exactly where the pixel's class is one of the table's background classes.
pub fn derive_background_mask(labels: &LabelMap, classes: &ClassTable) -> Result<Plane<bool>> {
    let mut lut = vec![None; 256];
    for (id, slot) in lut.iter_mut().enumerate().take(classes.num_classes()) {
        *slot = Some(classes.background.contains(&(id as u8)));
    }
    let data = labels
        .data
        .iter()
        .map(|&c| lut[c as usize].ok_or(Error::UnknownClass(c)))
        .collect::<Result<Vec<bool>>>()?;
    Ok(Plane {
        width: labels.width,
        height: labels.height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_mask_extremes() {
        let classes = ClassTable::default();
        let all_bg = Plane::filled(4, 3, BACKGROUND_CLASS);
        assert!(derive_background_mask(&all_bg, &classes).unwrap().data.iter().all(|&b| b));
        let all_fg = Plane::filled(4, 3, ShapeKind::Triangle.class_id());
        assert!(derive_background_mask(&all_fg, &classes).unwrap().data.iter().all(|&b| !b));
    }

    #[test]
    fn background_mask_rejects_unknown_class() {
        let classes = ClassTable::default();
        let mut m = Plane::filled(2, 2, 0u8);
        m.set(1, 1, 9);
        assert!(matches!(derive_background_mask(&m, &classes), Err(Error::UnknownClass(9))));
    }

    #[test]
    fn config_divisibility_and_length() {
        let mut c = SceneConfig {
            width: 63,
            ..SceneConfig::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("divisible by 2^(scales-1)"), "{err}");
        c.width = 64;
        c.num_frames = 2;
        assert!(c.validate().is_err());
        c.num_frames = 3;
        c.validate().unwrap();
    }
}
