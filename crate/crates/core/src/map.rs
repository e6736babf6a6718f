//! Vectorized HD map: typed polylines in the vehicle frame.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::{BevConfig, Mask};
use crate::error::{BevError, Result};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapClass {
    Boundary,
    Divider,
    Crossing,
    /// Planned trajectories; never produced by the map heads.
    Path,
}

impl MapClass {
    /// Element classes in segmentation-channel order (channel 0 is background).
    pub const ELEMENTS: [MapClass; 3] = [MapClass::Boundary, MapClass::Divider, MapClass::Crossing];

    pub fn name(self) -> &'static str {
        match self {
            MapClass::Boundary => "boundary",
            MapClass::Divider => "divider",
            MapClass::Crossing => "crossing",
            MapClass::Path => "path",
        }
    }

    /// Segmentation channel of an element class.
    pub fn seg_index(self) -> Option<usize> {
        Self::ELEMENTS.iter().position(|&c| c == self).map(|i| i + 1)
    }

    pub fn from_seg_index(i: usize) -> Option<MapClass> {
        i.checked_sub(1).and_then(|i| Self::ELEMENTS.get(i).copied())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapInstance {
    pub class: MapClass,
    pub confidence: f64,
    /// `[x, y]` in meters.
    pub points: Vec<[f64; 2]>,
}

impl MapInstance {
    pub fn length(&self) -> f64 {
        polyline_length(&self.points)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolylineMap {
    pub instances: Vec<MapInstance>,
}

pub fn polyline_length(points: &[[f64; 2]]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}

fn fmt3(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

impl PolylineMap {
    pub fn of_class(&self, class: MapClass) -> impl Iterator<Item = &MapInstance> {
        self.instances.iter().filter(move |i| i.class == class)
    }

    pub fn count(&self, class: MapClass) -> usize {
        self.of_class(class).count()
    }

    /// At least two points per instance, no repeated consecutive points,
    /// finite coordinates and confidences in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (i, inst) in self.instances.iter().enumerate() {
            let bad = inst.points.len() < 2
                || inst.points.windows(2).any(|w| w[0] == w[1])
                || inst.points.iter().flatten().any(|v| !v.is_finite())
                || !(0.0..=1.0).contains(&inst.confidence);
            if bad {
                return Err(BevError::Consistency(format!("map instance {i} is malformed")));
            }
        }
        Ok(())
    }

    /// Compact JSON, one instance per line, coordinates with three decimals.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\"instances\":[");
        for (i, inst) in self.instances.iter().enumerate() {
            s.push_str(if i == 0 { "\n" } else { ",\n" });
            let _ = write!(
                s,
                "{{\"class\":\"{}\",\"confidence\":{},\"points\":[",
                inst.class.name(),
                fmt3(inst.confidence)
            );
            for (j, p) in inst.points.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "[{},{}]", fmt3(p[0]), fmt3(p[1]));
            }
            s.push_str("]}");
        }
        if !self.instances.is_empty() {
            s.push('\n');
        }
        s.push_str("]}\n");
        s
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| BevError::format(origin, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&io::read_to_string(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json().as_bytes())
    }
}

/// Points every `step` meters along a polyline, both endpoints included.
pub fn resample(points: &[[f64; 2]], step: f64) -> Vec<[f64; 2]> {
    resample_indexed(points, step).into_iter().map(|(p, _)| p).collect()
}

/// [`resample`] paired with the index of the segment each sample lies on.
pub fn resample_indexed(points: &[[f64; 2]], step: f64) -> Vec<([f64; 2], usize)> {
    let Some(&first) = points.first() else { return Vec::new() };
    let mut out = vec![(first, 0)];
    let mut carry = 0.0;
    for (i, w) in points.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        if len == 0.0 {
            continue;
        }
        let mut t = step - carry;
        while t <= len {
            let f = t / len;
            out.push(([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])], i));
            t += step;
        }
        carry = len - (t - step);
    }
    let last = *points.last().unwrap();
    if out.last().unwrap().0 != last {
        out.push((last, points.len().saturating_sub(2)));
    }
    out
}

/// Cells touched by a polyline, sampled at a quarter cell.
pub fn rasterize_polyline(points: &[[f64; 2]], bev: &BevConfig, mask: &mut Mask) {
    for p in resample(points, bev.resolution * 0.25) {
        if let Some((r, c)) = bev.cell_of(p[0], p[1]) {
            mask.set(r, c);
        }
    }
}

/// Union of all instances of one class.
pub fn rasterize_class(map: &PolylineMap, class: MapClass, bev: &BevConfig) -> Mask {
    let mut m = Mask::for_grid(bev);
    for inst in map.of_class(class) {
        rasterize_polyline(&inst.points, bev, &mut m);
    }
    m
}
