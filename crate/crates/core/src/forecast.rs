//! Constant-velocity extrapolation of label maps, the first half of future prediction.

use std::collections::BTreeMap;

use crate::data::{InstanceMap, LabelMap, Plane, SourceSequence, BACKGROUND_INSTANCE};
use crate::error::{contract, Error, Result};

/// Pixel centroid of every non-background instance.
pub fn instance_centroids(instances: &InstanceMap) -> BTreeMap<u8, [f64; 2]> {
    let mut acc: BTreeMap<u8, (f64, f64, usize)> = BTreeMap::new();
    for y in 0..instances.height {
        for x in 0..instances.width {
            let id = instances.get(x, y);
            if id != BACKGROUND_INSTANCE {
                let e = acc.entry(id).or_insert((0.0, 0.0, 0));
                e.0 += x as f64;
                e.1 += y as f64;
                e.2 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(id, (sx, sy, n))| (id, [sx / n as f64, sy / n as f64]))
        .collect()
}

/// Forecasts `horizon` future label and instance maps. Each instance keeps its last observed
/// shape and moves by its last centroid displacement (rounded) per frame; instances absent
/// from the second-to-last frame stay put. Vacated pixels take the first background class;
/// instances are painted in increasing id order.
pub fn forecast_labels(observed: &SourceSequence, horizon: usize) -> Result<SourceSequence> {
    if horizon < 1 {
        return Err(Error::Config("forecast horizon must be at least 1".into()));
    }
    if observed.len() < 2 {
        return contract(format!("forecasting needs 2 observed frames, got {}", observed.len()));
    }
    let fill = *observed
        .classes
        .background
        .first()
        .ok_or_else(|| Error::Config("class table has no background class".into()))?;
    let last_labels = &observed.labels[observed.len() - 1];
    let last_inst = &observed.instances[observed.len() - 1];
    let prev = instance_centroids(&observed.instances[observed.len() - 2]);
    let now = instance_centroids(last_inst);
    let velocity: BTreeMap<u8, [i64; 2]> = now
        .iter()
        .map(|(id, c)| {
            let v = prev
                .get(id)
                .map(|p| [(c[0] - p[0]).round() as i64, (c[1] - p[1]).round() as i64])
                .unwrap_or([0, 0]);
            (*id, v)
        })
        .collect();

    let (w, h) = (last_labels.width, last_labels.height);
    let mut out = SourceSequence {
        labels: Vec::with_capacity(horizon),
        instances: Vec::with_capacity(horizon),
        classes: observed.classes.clone(),
    };
    for k in 1..=horizon as i64 {
        let mut labels: LabelMap = Plane::filled(w, h, fill);
        let mut inst: InstanceMap = Plane::filled(w, h, BACKGROUND_INSTANCE);
        for y in 0..h {
            for x in 0..w {
                if last_inst.get(x, y) == BACKGROUND_INSTANCE {
                    labels.set(x, y, last_labels.get(x, y));
                }
            }
        }
        for (&id, v) in &velocity {
            for y in 0..h {
                for x in 0..w {
                    if last_inst.get(x, y) != id {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + k * v[0], y as i64 + k * v[1]);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        labels.set(nx as usize, ny as usize, last_labels.get(x, y));
                        inst.set(nx as usize, ny as usize, id);
                    }
                }
            }
        }
        out.labels.push(labels);
        out.instances.push(inst);
    }
    Ok(out)
}

/// Rewrites class ids through `map` (classes not in the map are kept). Pixels that end up
/// on a background class lose their instance id.
pub fn relabel(source: &SourceSequence, map: &BTreeMap<u8, u8>) -> Result<SourceSequence> {
    for (&from, &to) in map {
        source.classes.is_background(from)?;
        source.classes.is_background(to)?;
    }
    let mut out = source.clone();
    for (labels, inst) in out.labels.iter_mut().zip(out.instances.iter_mut()) {
        for (l, i) in labels.data.iter_mut().zip(inst.data.iter_mut()) {
            if let Some(&to) = map.get(l) {
                *l = to;
            }
            if source.classes.is_background(*l)? {
                *i = BACKGROUND_INSTANCE;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_sequence, SceneConfig, ShapeKind, ShapeSpec};

    fn scene(velocity: [i32; 2], pan: [i32; 2]) -> SourceSequence {
        render_sequence(&SceneConfig {
            num_frames: 4,
            camera_pan: pan,
            shapes: Some(vec![ShapeSpec {
                kind: ShapeKind::Rectangle,
                size: [8, 6],
                position: [20, 30],
                velocity,
                color: [200, 40, 40],
            }]),
            ..SceneConfig::default()
        })
        .unwrap()
        .source
    }

    #[test]
    fn static_scene_forecast_repeats_last_frame() {
        let s = scene([0, 0], [0, 0]);
        let f = forecast_labels(&s, 1).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.labels[0], *s.labels.last().unwrap());
        assert_eq!(f.instances[0], *s.instances.last().unwrap());
        assert!(forecast_labels(&s, 0).is_err());
    }

    #[test]
    fn translation_extrapolates_linearly() {
        let s = scene([2, -1], [1, 0]);
        let f = forecast_labels(&s, 3).unwrap();
        assert_eq!(f.len(), 3);
        let last = instance_centroids(s.instances.last().unwrap())[&1];
        let got = instance_centroids(&f.instances[2])[&1];
        assert!((got[0] - (last[0] + 6.0)).abs() <= 1.0, "{got:?} vs {last:?}");
        assert!((got[1] - (last[1] - 3.0)).abs() <= 1.0, "{got:?} vs {last:?}");
    }

    #[test]
    fn relabel_cases() {
        let s = scene([1, 0], [0, 0]);
        assert_eq!(relabel(&s, &BTreeMap::new()).unwrap(), s);
        let rect = ShapeKind::Rectangle.class_id();
        let circ = ShapeKind::Circle.class_id();
        let swapped = relabel(&s, &BTreeMap::from([(rect, circ)])).unwrap();
        for (a, b) in s.labels.iter().zip(&swapped.labels) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*y, if *x == rect { circ } else { *x });
            }
        }
        assert_eq!(swapped.instances, s.instances);
        let to_bg = relabel(&s, &BTreeMap::from([(rect, 0)])).unwrap();
        for t in 0..s.len() {
            let before = s.background_mask(t).unwrap();
            let after = to_bg.background_mask(t).unwrap();
            for i in 0..before.data.len() {
                assert_eq!(after.data[i], before.data[i] || s.labels[t].data[i] == rect);
            }
        }
        assert!(relabel(&s, &BTreeMap::from([(rect, 99)])).is_err());
    }
}
