//! Binary PGM/PPM output. Pixel `(r, c)` is tensor element `(r, c)`, so BEV
//! renders keep the grid layout: rows lateral from `y_min`, columns forward.

use bevkit::bev::BevConfig;
use bevkit::map::{rasterize_class, MapClass, PolylineMap};
use bevkit::{BevError, Result, Tensor};

pub const BACKGROUND: [u8; 3] = [0, 0, 0];

/// Element colors; later entries paint over earlier ones.
pub const PALETTE: [(MapClass, [u8; 3]); 4] = [
    (MapClass::Crossing, [0, 0, 255]),
    (MapClass::Divider, [255, 0, 0]),
    (MapClass::Boundary, [0, 255, 0]),
    (MapClass::Path, [255, 255, 0]),
];

/// Grayscale of one channel, scaled so the largest positive value is 255.
/// Non-positive values are black.
pub fn raster_to_pgm(t: &Tensor, channel: usize) -> Result<Vec<u8>> {
    let (h, w, c) = match t.ndim() {
        2 => {
            let (h, w) = t.dims2()?;
            (h, w, 1)
        }
        3 => t.dims3()?,
        _ => return Err(BevError::Shape(format!("cannot render a {:?} tensor", t.shape()))),
    };
    if channel >= c {
        return Err(BevError::Shape(format!("channel {channel} of {c}")));
    }
    let vals: Vec<f32> = t.data().iter().skip(channel).step_by(c).copied().collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(BevError::NonFinite("raster to render".into()));
    }
    let max = vals.iter().copied().fold(0.0f32, f32::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(vals.iter().map(|&v| {
        if max > 0.0 && v > 0.0 {
            ((v / max) as f64 * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Color raster of every class present in `map`.
pub fn map_to_ppm(map: &PolylineMap, bev: &BevConfig) -> Result<Vec<u8>> {
    bev.validate()?;
    map.validate()?;
    let (h, w) = (bev.rows(), bev.cols());
    let mut px = vec![BACKGROUND; h * w];
    for (class, color) in PALETTE {
        let m = rasterize_class(map, class, bev);
        for (p, &on) in px.iter_mut().zip(&m.data) {
            if on {
                *p = color;
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(px.iter().flatten());
    Ok(out)
}
