use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BackgroundConfig, ClassTable, FlowField, PairedSequence, Plane, RgbFrame, SceneConfig,
    ShapeKind, ShapeSpec, SourceSequence, BACKGROUND_CLASS, BACKGROUND_INSTANCE,
};
use crate::error::Result;

impl ShapeKind {
    /// Whether offset `(dx, dy)` inside a `w x h` bounding box belongs to the shape.
    /// Depends only on the offset, so a translated shape covers a translated pixel set.
    pub fn covers(self, w: usize, h: usize, dx: usize, dy: usize) -> bool {
        if dx >= w || dy >= h {
            return false;
        }
        let (w, h) = (w as f64, h as f64);
        let (cx, cy) = (dx as f64 + 0.5, dy as f64 + 0.5);
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Circle => {
                let u = (cx - w / 2.0) / (w / 2.0);
                let v = (cy - h / 2.0) / (h / 2.0);
                u * u + v * v <= 1.0
            }
            ShapeKind::Triangle => (cx - w / 2.0).abs() <= cy / h * (w / 2.0),
        }
    }
}

impl ShapeSpec {
    /// Surface colour at a bounding-box offset: a two-tone diagonal stripe pattern so
    /// that motion is visible inside the shape, not only at its edges.
    pub fn shade(&self, dx: usize, dy: usize) -> [u8; 3] {
        let lift: i32 = if ((dx + dy) / 3) % 2 == 0 { 24 } else { -24 };
        self.color.map(|c| (c as i32 + lift).clamp(0, 255) as u8)
    }
}

impl BackgroundConfig {
    /// Texture value at world coordinate `(x, y)`.
    pub fn texel(&self, x: i64, y: i64) -> [u8; 3] {
        let tau = std::f64::consts::TAU / self.period.max(1e-6);
        let (x, y) = (x as f64, y as f64);
        let a = (tau * x).sin() * (0.7 * tau * y).cos();
        let b = (0.5 * tau * (x + y)).sin();
        let phase = [a, 0.6 * a + 0.4 * b, b];
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = self.base[c] as f64 + self.amplitude * phase[c];
            out[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

fn draw_shapes(cfg: &SceneConfig) -> Vec<ShapeSpec> {
    if let Some(shapes) = &cfg.shapes {
        return shapes.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.num_shapes)
        .map(|_| {
            let kind = cfg.shape_kinds[rng.random_range(0..cfg.shape_kinds.len())];
            let mut size = [0usize; 2];
            for s in &mut size {
                *s = rng.random_range(cfg.min_size..=cfg.max_size);
            }
            if kind == ShapeKind::Circle {
                size[1] = size[0];
            }
            let position = [
                rng.random_range(0..=(cfg.width - size[0]) as i32),
                rng.random_range(0..=(cfg.height - size[1]) as i32),
            ];
            let mut velocity = [0i32; 2];
            for v in &mut velocity {
                *v = rng.random_range(-cfg.max_speed..=cfg.max_speed);
            }
            let mut color = [0u8; 3];
            for c in &mut color {
                *c = rng.random_range(40..=215);
            }
            ShapeSpec {
                kind,
                size,
                position,
                velocity,
                color,
            }
        })
        .collect()
}

/// Advances `pos` by `vel`, reversing any velocity component whose move would leave the
/// `[0, limit]` range first. Returns the displacement actually applied.
fn bounce(pos: &mut [i32; 2], vel: &mut [i32; 2], limit: [i32; 2]) -> [i32; 2] {
    for a in 0..2 {
        let next = pos[a] + vel[a];
        if next < 0 || next > limit[a] {
            vel[a] = -vel[a];
            let back = pos[a] + vel[a];
            if back < 0 || back > limit[a] {
                vel[a] = 0;
            }
        }
        pos[a] += vel[a];
    }
    *vel
}

/// Which entity is visible at each pixel: 0 for background, `k + 1` for shape `k`.
fn rasterize(shapes: &[ShapeSpec], positions: &[[i32; 2]], w: usize, h: usize) -> Plane<u8> {
    let mut owner = Plane::filled(w, h, BACKGROUND_INSTANCE);
    for (k, (s, p)) in shapes.iter().zip(positions).enumerate() {
        for dy in 0..s.size[1] {
            for dx in 0..s.size[0] {
                let x = p[0] + dx as i32;
                let y = p[1] + dy as i32;
                if x < 0 || y < 0 || x >= w as i32 || y >= h as i32 {
                    continue;
                }
                if s.kind.covers(s.size[0], s.size[1], dx, dy) {
                    owner.set(x as usize, y as usize, (k + 1) as u8);
                }
            }
        }
    }
    owner
}

/// Renders a scene: bouncing textured shapes over a panning textured background, with
/// exact integer target-to-source flow and occlusion-aware validity.
pub fn render_sequence(cfg: &SceneConfig) -> Result<PairedSequence> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let shapes = draw_shapes(cfg);
    if shapes.len() >= u8::MAX as usize {
        return Err(crate::error::Error::Config("too many shapes".into()));
    }

    let mut positions: Vec<[i32; 2]> = shapes.iter().map(|s| s.position).collect();
    let mut velocities: Vec<[i32; 2]> = shapes.iter().map(|s| s.velocity).collect();
    let mut track = vec![positions.clone()];
    let mut motions = Vec::with_capacity(cfg.num_frames - 1);
    for _ in 1..cfg.num_frames {
        let step = shapes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let limit = [(w - s.size[0]) as i32, (h - s.size[1]) as i32];
                bounce(&mut positions[k], &mut velocities[k], limit)
            })
            .collect::<Vec<_>>();
        motions.push(step);
        track.push(positions.clone());
    }

    let mut labels = Vec::with_capacity(cfg.num_frames);
    let mut instances = Vec::with_capacity(cfg.num_frames);
    let mut frames = Vec::with_capacity(cfg.num_frames);
    for (t, pos) in track.iter().enumerate() {
        let owner = rasterize(&shapes, pos, w, h);
        let cam = [cfg.camera_pan[0] as i64 * t as i64, cfg.camera_pan[1] as i64 * t as i64];
        let mut frame = RgbFrame::new(w, h);
        let mut label = Plane::filled(w, h, BACKGROUND_CLASS);
        for y in 0..h {
            for x in 0..w {
                let id = owner.get(x, y);
                let rgb = if id == BACKGROUND_INSTANCE {
                    cfg.background.texel(x as i64 + cam[0], y as i64 + cam[1])
                } else {
                    let s = &shapes[id as usize - 1];
                    let p = pos[id as usize - 1];
                    label.set(x, y, s.kind.class_id());
                    s.shade((x as i32 - p[0]) as usize, (y as i32 - p[1]) as usize)
                };
                frame.set_pixel(x, y, rgb);
            }
        }
        labels.push(label);
        instances.push(owner);
        frames.push(frame);
    }

    let mut flows = Vec::with_capacity(cfg.num_frames - 1);
    let mut validity = Vec::with_capacity(cfg.num_frames - 1);
    for t in 0..cfg.num_frames - 1 {
        let mut flow = FlowField::zeros(w, h);
        let mut valid = Plane::filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let id = instances[t + 1].get(x, y);
                let d = if id == BACKGROUND_INSTANCE {
                    // The camera moved by `pan`, so the texture under p came from p + pan.
                    [cfg.camera_pan[0], cfg.camera_pan[1]]
                } else {
                    let m = motions[t][id as usize - 1];
                    [-m[0], -m[1]]
                };
                flow.set(x, y, [d[0] as f32, d[1] as f32]);
                let sx = x as i64 + d[0] as i64;
                let sy = y as i64 + d[1] as i64;
                let inside = sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64;
                valid.set(
                    x,
                    y,
                    inside && instances[t].get(sx as usize, sy as usize) == id,
                );
            }
        }
        flows.push(flow);
        validity.push(valid);
    }

    Ok(PairedSequence {
        config: cfg.clone(),
        source: SourceSequence {
            labels,
            instances,
            classes: ClassTable::default(),
        },
        frames,
        flows,
        validity,
        motions,
    })
}
