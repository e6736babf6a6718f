//! Pinhole camera model, LiDAR-to-image depth projection, depth completion
//! and depth-bin supervision targets.
//!
//! Frames: the LiDAR/vehicle frame is x forward, y left, z up with the ground
//! at z = 0. The camera frame is x right, y down, z along the optical axis.
//! Pixel coordinates put pixel centers on integers.

use serde::{Deserialize, Serialize};

use crate::error::{BevError, Result};
use crate::par;
use crate::tensor::Tensor;

/// Value stored in depth pixels without a measurement.
pub const NO_DEPTH: f32 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_w: usize,
    pub image_h: usize,
    /// Row-major 4×4 rigid transform taking LiDAR points into the camera frame.
    pub extrinsic: [[f64; 4]; 4],
}

impl CameraModel {
    /// Forward-looking camera mounted `height` m above the ground at the
    /// vehicle origin, pitched down by `pitch_deg`.
    pub fn forward_facing(
        image_w: usize,
        image_h: usize,
        hfov_deg: f64,
        height: f64,
        pitch_deg: f64,
    ) -> Self {
        let f = (image_w as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        let (sp, cp) = pitch_deg.to_radians().sin_cos();
        // Level camera axes in the vehicle frame, then pitch about camera x.
        let level = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let pitch = [[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]];
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| pitch[i][k] * level[k][j]).sum();
            }
        }
        let c = [0.0, 0.0, height];
        let mut ext = [[0.0; 4]; 4];
        for i in 0..3 {
            ext[i][..3].copy_from_slice(&r[i]);
            ext[i][3] = -(0..3).map(|k| r[i][k] * c[k]).sum::<f64>();
        }
        ext[3][3] = 1.0;
        CameraModel {
            fx: f,
            fy: f,
            cx: (image_w as f64 - 1.0) / 2.0,
            cy: (image_h as f64 - 1.0) / 2.0,
            image_w,
            image_h,
            extrinsic: ext,
        }
    }

    /// Default desk-scale camera: 32×88 image (the 256×704 aspect).
    pub fn toy() -> Self {
        Self::forward_facing(88, 32, 70.0, 1.6, 0.0)
    }

    /// 256×704 image.
    pub fn full_scale() -> Self {
        Self::forward_facing(704, 256, 70.0, 1.6, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BevError::param(m));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths {} {} must be positive", self.fx, self.fy));
        }
        if !(0.0..self.image_w as f64).contains(&self.cx)
            || !(0.0..self.image_h as f64).contains(&self.cy)
        {
            return bad(format!("principal point ({}, {}) outside image", self.cx, self.cy));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-5 {
                    return bad("extrinsic rotation is not orthonormal".into());
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-5 {
            return bad(format!("extrinsic rotation determinant {det}"));
        }
        Ok(())
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        let e = &self.extrinsic;
        [
            [e[0][0], e[0][1], e[0][2]],
            [e[1][0], e[1][1], e[1][2]],
            [e[2][0], e[2][1], e[2][2]],
        ]
    }

    pub fn lidar_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        std::array::from_fn(|i| e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3])
    }

    pub fn camera_to_lidar(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        let d = [p[0] - e[0][3], p[1] - e[1][3], p[2] - e[2][3]];
        std::array::from_fn(|j| e[0][j] * d[0] + e[1][j] * d[1] + e[2][j] * d[2])
    }

    /// Sub-pixel image coordinates and camera depth, for points in front.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let c = self.lidar_to_camera(p);
        (c[2] > 0.0).then(|| {
            (
                self.fx * c[0] / c[2] + self.cx,
                self.fy * c[1] / c[2] + self.cy,
                c[2],
            )
        })
    }

    /// LiDAR-frame point at camera depth `depth` along the ray through `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let c = [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ];
        self.camera_to_lidar(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Density {
    Sparse,
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major depths in meters, [`NO_DEPTH`] where unknown.
    pub values: Vec<f32>,
    pub density: Density,
}

impl DepthImage {
    pub fn empty(width: usize, height: usize, density: Density) -> Self {
        DepthImage {
            width,
            height,
            values: vec![NO_DEPTH; width * height],
            density,
        }
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f32> {
        let d = self.values[v * self.width + u];
        (d > 0.0).then_some(d)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }

    /// `[height, width]` tensor with the sentinel preserved.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone())
            .expect("depth image extents are positive")
    }

    pub fn from_tensor(t: &Tensor, density: Density) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let values = t
            .data()
            .iter()
            .map(|&d| if d > 0.0 { d } else { NO_DEPTH })
            .collect();
        Ok(DepthImage {
            width: w,
            height: h,
            values,
            density,
        })
    }
}

/// Uniform depth bins `[d_min + i·step, d_min + (i+1)·step)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthBinning {
    pub d_min: f64,
    pub d_max: f64,
    pub step: f64,
}

impl Default for DepthBinning {
    fn default() -> Self {
        DepthBinning {
            d_min: 2.0,
            d_max: 90.0,
            step: 1.0,
        }
    }
}

impl DepthBinning {
    pub fn validate(&self) -> Result<()> {
        let n = (self.d_max - self.d_min) / self.step;
        if !(self.d_min > 0.0 && self.step > 0.0 && self.d_max > self.d_min)
            || (n - n.round()).abs() > 1e-9
        {
            return Err(BevError::param(format!(
                "depth range [{}, {}) not divisible into {} m bins",
                self.d_min, self.d_max, self.step
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        ((self.d_max - self.d_min) / self.step).round() as usize
    }

    pub fn bin(&self, depth: f64) -> Option<usize> {
        if !(depth >= self.d_min && depth < self.d_max) {
            return None;
        }
        let i = ((depth - self.d_min) / self.step).floor() as usize;
        Some(i.min(self.num_bins() - 1))
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.d_min + (bin as f64 + 0.5) * self.step
    }
}

/// Z-buffered sparse depth image from a LiDAR-frame point cloud.
pub fn project_points(cloud: &[[f32; 3]], cam: &CameraModel) -> Result<DepthImage> {
    cam.validate()?;
    let (w, h) = (cam.image_w, cam.image_h);
    let hits = par::map_slice(cloud, |p| {
        let (u, v, z) = cam.project([p[0] as f64, p[1] as f64, p[2] as f64])?;
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            return None;
        }
        Some((v as usize * w + u as usize, z as f32))
    });
    let mut img = DepthImage::empty(w, h, Density::Sparse);
    for (i, z) in hits.into_iter().flatten() {
        let cur = img.values[i];
        if z > 0.0 && (cur <= 0.0 || z < cur) {
            img.values[i] = z;
        }
    }
    Ok(img)
}

/// Fills each empty pixel with the nearest (smallest) valid depth inside a
/// `(2·radius+1)²` window of the input.
pub fn dilate_nearest(img: &DepthImage, radius: usize) -> DepthImage {
    let (w, h) = (img.width, img.height);
    let rows = par::map_range(h, |v| {
        (0..w)
            .map(|u| {
                if let Some(d) = img.get(u, v) {
                    return d;
                }
                let mut best = f32::INFINITY;
                for y in v.saturating_sub(radius)..(v + radius + 1).min(h) {
                    for x in u.saturating_sub(radius)..(u + radius + 1).min(w) {
                        if let Some(d) = img.get(x, y) {
                            best = best.min(d);
                        }
                    }
                }
                if best.is_finite() {
                    best
                } else {
                    NO_DEPTH
                }
            })
            .collect::<Vec<_>>()
    });
    DepthImage {
        values: rows.concat(),
        ..img.clone()
    }
}

/// Reduced IP-Basic completion: 5×5 nearest-depth dilation, column-wise hole
/// fill with top extension, then a 3×3 median over filled-in pixels only.
/// Pixels valid in the input keep their exact depth.
pub fn complete_depth(sparse: &DepthImage) -> Result<DepthImage> {
    if sparse.valid_count() == 0 {
        return Err(BevError::Completion("no valid depth pixels".into()));
    }
    let (w, h) = (sparse.width, sparse.height);
    let mut img = dilate_nearest(sparse, 2);
    let top = (0..h)
        .find(|&v| (0..w).any(|u| img.get(u, v).is_some()))
        .expect("dilation keeps valid pixels");

    let mut filled_cols = vec![false; w];
    for (u, filled) in filled_cols.iter_mut().enumerate() {
        let first = (top..h).find(|&v| img.get(u, v).is_some());
        let Some(first) = first else { continue };
        *filled = true;
        let mut last = img.values[first * w + u];
        for v in top..h {
            let i = v * w + u;
            if img.values[i] > 0.0 {
                last = img.values[i];
            } else {
                img.values[i] = last;
            }
        }
    }
    for u in 0..w {
        if filled_cols[u] {
            continue;
        }
        let src = (1..w)
            .flat_map(|d| [u.checked_sub(d), Some(u + d).filter(|&x| x < w)])
            .flatten()
            .find(|&x| filled_cols[x])
            .expect("at least one column holds depth");
        for v in top..h {
            img.values[v * w + u] = img.values[v * w + src];
        }
    }

    let snapshot = img.clone();
    let mut window = Vec::with_capacity(9);
    for v in 0..h {
        for u in 0..w {
            if sparse.get(u, v).is_some() || snapshot.get(u, v).is_none() {
                continue;
            }
            window.clear();
            for y in v.saturating_sub(1)..(v + 2).min(h) {
                for x in u.saturating_sub(1)..(u + 2).min(w) {
                    if let Some(d) = snapshot.get(x, y) {
                        window.push(d);
                    }
                }
            }
            window.sort_by(f32::total_cmp);
            img.values[v * w + u] = window[(window.len() - 1) / 2];
        }
    }
    img.density = Density::Dense;
    Ok(img)
}

/// One-hot depth-bin targets at feature resolution, sampling the pixel at
/// the center of each `height/out_h × width/out_w` block. Cells without a
/// valid in-range depth are all-zero.
pub fn one_hot_depth_map(
    dense: &DepthImage,
    bins: &DepthBinning,
    out_w: usize,
    out_h: usize,
) -> Result<Tensor> {
    bins.validate()?;
    if out_w == 0 || out_h == 0 || !dense.width.is_multiple_of(out_w) || !dense.height.is_multiple_of(out_h) {
        return Err(BevError::shape(format!(
            "{}x{} image does not divide into {out_h}x{out_w} cells",
            dense.height, dense.width
        )));
    }
    let (bx, by) = (dense.width / out_w, dense.height / out_h);
    let nb = bins.num_bins();
    let mut t = Tensor::zeros(&[out_h, out_w, nb]);
    for r in 0..out_h {
        for c in 0..out_w {
            let d = dense.get(c * bx + bx / 2, r * by + by / 2);
            if let Some(b) = d.and_then(|d| bins.bin(d as f64)) {
                t.data_mut()[(r * out_w + c) * nb + b] = 1.0;
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam() -> CameraModel {
        let mut ext = [[0.0; 4]; 4];
        for (i, row) in ext.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CameraModel {
            fx: 50.0,
            fy: 50.0,
            cx: 20.0,
            cy: 10.0,
            image_w: 40,
            image_h: 20,
            extrinsic: ext,
        }
    }

    #[test]
    fn axis_point_lands_on_principal_point() {
        let img = project_points(&[[0.0, 0.0, 10.0]], &identity_cam()).unwrap();
        assert_eq!(img.get(20, 10), Some(10.0));
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let cloud = [[0.0, 0.0, 9.0], [0.0, 0.0, 5.0]];
        let img = project_points(&cloud, &identity_cam()).unwrap();
        assert_eq!(img.get(20, 10), Some(5.0));
    }

    #[test]
    fn behind_camera_gives_empty_image() {
        let img = project_points(&[[0.0, 0.0, -3.0], [1.0, 1.0, 0.0]], &identity_cam()).unwrap();
        assert_eq!(img.valid_count(), 0);
    }

    #[test]
    fn brute_force_projection_agrees() {
        let cam = CameraModel::toy();
        let cloud = [[12.0f32, 1.5, 0.0], [30.0, -4.0, 0.2], [7.5, 0.3, 1.0]];
        let img = project_points(&cloud, &cam).unwrap();
        let mut want = vec![NO_DEPTH; cam.image_w * cam.image_h];
        for p in cloud {
            let e = &cam.extrinsic;
            let q: Vec<f64> = (0..3)
                .map(|i| e[i][0] * p[0] as f64 + e[i][1] * p[1] as f64 + e[i][2] * p[2] as f64 + e[i][3])
                .collect();
            if q[2] <= 0.0 {
                continue;
            }
            let u = (cam.fx * q[0] / q[2] + cam.cx).round();
            let v = (cam.fy * q[1] / q[2] + cam.cy).round();
            if u >= 0.0 && v >= 0.0 && (u as usize) < cam.image_w && (v as usize) < cam.image_h {
                let i = v as usize * cam.image_w + u as usize;
                if want[i] < 0.0 || (q[2] as f32) < want[i] {
                    want[i] = q[2] as f32;
                }
            }
        }
        assert_eq!(img.values, want);
        assert!(img.valid_count() >= 2);
    }

    #[test]
    fn doubling_depth_keeps_axis_pixel() {
        let cam = identity_cam();
        let a = project_points(&[[0.0, 0.0, 4.0]], &cam).unwrap();
        let b = project_points(&[[0.0, 0.0, 8.0]], &cam).unwrap();
        assert_eq!(a.get(20, 10), Some(4.0));
        assert_eq!(b.get(20, 10), Some(8.0));
    }

    #[test]
    fn unproject_inverts_project() {
        let cam = CameraModel::toy();
        let p = [23.0, -2.5, 0.4];
        let (u, v, z) = cam.project(p).unwrap();
        let q = cam.unproject(u, v, z);
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-9);
        }
        cam.validate().unwrap();
        CameraModel::full_scale().validate().unwrap();
    }

    #[test]
    fn invalid_camera_rejected() {
        let mut cam = identity_cam();
        cam.extrinsic[0][0] = 2.0;
        assert!(cam.validate().is_err());
        let mut cam = identity_cam();
        cam.cx = 40.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn binning_edges() {
        let b = DepthBinning::default();
        assert_eq!(b.num_bins(), 88);
        assert_eq!(b.bin(2.4), Some(0));
        assert_eq!(b.bin(89.5), Some(87));
        assert_eq!(b.bin(1.0), None);
        assert_eq!(b.bin(90.0), None);
        assert_eq!(b.bin(2.0), Some(0));
        for i in 0..88 {
            assert_eq!(b.bin(b.center(i)), Some(i));
        }
    }

    #[test]
    fn completion_of_dense_is_identity() {
        let img = DepthImage {
            width: 6,
            height: 4,
            values: (0..24).map(|i| 3.0 + i as f32).collect(),
            density: Density::Sparse,
        };
        let out = complete_depth(&img).unwrap();
        assert_eq!(out.values, img.values);
        assert_eq!(out.density, Density::Dense);
    }

    #[test]
    fn single_pixel_dilates_to_5x5() {
        let mut img = DepthImage::empty(11, 9, Density::Sparse);
        img.values[4 * 11 + 5] = 7.0;
        let d = dilate_nearest(&img, 2);
        for v in 0..9 {
            for u in 0..11 {
                let inside = (2..=6).contains(&v) && (3..=7).contains(&u);
                assert_eq!(d.get(u, v).is_some(), inside, "({u},{v})");
            }
        }
        let full = complete_depth(&img).unwrap();
        for v in 2..=6 {
            for u in 3..=7 {
                assert_eq!(full.get(u, v), Some(7.0));
            }
        }
    }

    #[test]
    fn checkerboard_completes_covered_rows() {
        let mut img = DepthImage::empty(10, 8, Density::Sparse);
        for v in 2..8 {
            for u in 0..10 {
                if (u + v) % 2 == 0 {
                    img.values[v * 10 + u] = 5.0 + (u + v) as f32;
                }
            }
        }
        let out = complete_depth(&img).unwrap();
        for v in 2..8 {
            for u in 0..10 {
                assert!(out.get(u, v).is_some());
                if let Some(d) = img.get(u, v) {
                    assert_eq!(out.get(u, v), Some(d));
                }
            }
        }
        assert!(out.valid_count() >= img.valid_count());
    }

    #[test]
    fn empty_completion_fails() {
        let img = DepthImage::empty(4, 4, Density::Sparse);
        assert!(matches!(complete_depth(&img), Err(BevError::Completion(_))));
    }

    #[test]
    fn one_hot_targets() {
        let b = DepthBinning::default();
        let img = DepthImage {
            width: 8,
            height: 4,
            values: vec![10.0; 32],
            density: Density::Dense,
        };
        let t = one_hot_depth_map(&img, &b, 4, 2).unwrap();
        assert_eq!(t.shape(), &[2, 4, 88]);
        for cell in t.data().chunks(88) {
            assert_eq!(cell[8], 1.0);
            assert_eq!(cell.iter().sum::<f32>(), 1.0);
        }
        let none = one_hot_depth_map(&DepthImage::empty(8, 4, Density::Dense), &b, 4, 2).unwrap();
        assert!(none.data().iter().all(|&v| v == 0.0));
        assert!(one_hot_depth_map(&img, &b, 3, 2).is_err());
    }
}
