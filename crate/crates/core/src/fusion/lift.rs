//! Depth-aware camera-to-BEV lifting.
//!
//! Every feature pixel's ray is sampled at the depth-bin centers; each
//! frustum voxel carries `D(u,v,d)·F(u,v,·)` and is sum-pooled into the BEV
//! pillar containing it.

use crate::bev::BevConfig;
use crate::camera::{CameraModel, DepthBinning};
use crate::error::{BevError, Result};
use crate::par;
use crate::tensor::{GradPair, Tensor};

/// Tolerance on `Σ_d D(u,v,d) = 1`.
pub const DISTRIBUTION_TOL: f64 = 1e-4;

/// Precomputed voxel-to-pillar assignment for a fixed camera, grid and
/// binning.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumGrid {
    pub feat_h: usize,
    pub feat_w: usize,
    pub bins: usize,
    pub bev_rows: usize,
    pub bev_cols: usize,
    /// Flat BEV cell per `(row, col, bin)` voxel, row-major.
    pub cell_to_pillar: Vec<Option<u32>>,
    // CSR inverse: voxels feeding each pillar, in row-major voxel order.
    pillar_start: Vec<u32>,
    pillar_voxels: Vec<u32>,
}

impl FrustumGrid {
    /// Feature pixel `(r, c)` looks along the ray through the center of its
    /// `image/feature` block.
    pub fn new(
        cam: &CameraModel,
        bev: &BevConfig,
        bins: &DepthBinning,
        feat_h: usize,
        feat_w: usize,
    ) -> Result<Self> {
        cam.validate()?;
        bev.validate()?;
        bins.validate()?;
        if feat_h == 0 || feat_w == 0 {
            return Err(BevError::shape("empty feature map"));
        }
        let nb = bins.num_bins();
        let sx = cam.image_w as f64 / feat_w as f64;
        let sy = cam.image_h as f64 / feat_h as f64;
        let bev_cols = bev.cols();
        let cell_to_pillar: Vec<Option<u32>> = par::map_range(feat_h * feat_w * nb, |i| {
            let (pix, d) = (i / nb, i % nb);
            let (r, c) = (pix / feat_w, pix % feat_w);
            let u = (c as f64 + 0.5) * sx - 0.5;
            let v = (r as f64 + 0.5) * sy - 0.5;
            let p = cam.unproject(u, v, bins.center(d));
            bev.cell_of(p[0], p[1])
                .map(|(br, bc)| (br * bev_cols + bc) as u32)
        });
        Ok(Self::from_assignment(
            feat_h,
            feat_w,
            nb,
            bev.rows(),
            bev_cols,
            cell_to_pillar,
        ))
    }

    /// Builds the grid from an explicit voxel-to-pillar table.
    pub fn from_assignment(
        feat_h: usize,
        feat_w: usize,
        bins: usize,
        bev_rows: usize,
        bev_cols: usize,
        cell_to_pillar: Vec<Option<u32>>,
    ) -> Self {
        assert_eq!(cell_to_pillar.len(), feat_h * feat_w * bins);
        let n_pillars = bev_rows * bev_cols;
        let mut counts = vec![0u32; n_pillars + 1];
        for p in cell_to_pillar.iter().flatten() {
            assert!((*p as usize) < n_pillars, "pillar {p} outside grid");
            counts[*p as usize + 1] += 1;
        }
        for i in 0..n_pillars {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut voxels = vec![0u32; counts[n_pillars] as usize];
        for (v, p) in cell_to_pillar.iter().enumerate() {
            if let Some(p) = p {
                voxels[fill[*p as usize] as usize] = v as u32;
                fill[*p as usize] += 1;
            }
        }
        FrustumGrid {
            feat_h,
            feat_w,
            bins,
            bev_rows,
            bev_cols,
            cell_to_pillar,
            pillar_start: counts,
            pillar_voxels: voxels,
        }
    }

    /// Number of voxels that land inside the grid.
    pub fn mapped_voxels(&self) -> usize {
        self.pillar_voxels.len()
    }

    fn check(&self, features: &Tensor, depth: &Tensor) -> Result<usize> {
        let (h, w, c) = features.dims3()?;
        let (dh, dw, nb) = depth.dims3()?;
        if (h, w) != (self.feat_h, self.feat_w) || (dh, dw, nb) != (h, w, self.bins) {
            return Err(BevError::shape(format!(
                "features {:?} / depth {:?} vs frustum {}x{}x{}",
                features.shape(),
                depth.shape(),
                self.feat_h,
                self.feat_w,
                self.bins
            )));
        }
        Ok(c)
    }

    /// Sum-pooled BEV features without checking that `depth` is normalized.
    pub fn splat(&self, features: &Tensor, depth: &Tensor) -> Result<Tensor> {
        let c = self.check(features, depth)?;
        let (fd, dd) = (features.data(), depth.data());
        let nb = self.bins;
        let rows = par::map_range(self.bev_rows, |br| {
            let mut row = vec![0.0f32; self.bev_cols * c];
            let mut acc = vec![0.0f64; c];
            for bc in 0..self.bev_cols {
                let p = br * self.bev_cols + bc;
                let span = self.pillar_start[p] as usize..self.pillar_start[p + 1] as usize;
                if span.is_empty() {
                    continue;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &v in &self.pillar_voxels[span] {
                    let v = v as usize;
                    let weight = dd[v] as f64;
                    let feat = &fd[(v / nb) * c..][..c];
                    for (a, &f) in acc.iter_mut().zip(feat) {
                        *a += weight * f as f64;
                    }
                }
                for (o, &a) in row[bc * c..][..c].iter_mut().zip(&acc) {
                    *o = a as f32;
                }
            }
            row
        });
        Tensor::new(vec![self.bev_rows, self.bev_cols, c], rows.concat())
    }

    /// Gradients of [`FrustumGrid::splat`] w.r.t. `features` and `depth`.
    pub fn splat_vjp(
        &self,
        features: &Tensor,
        depth: &Tensor,
        grad_out: &Tensor,
    ) -> Result<GradPair> {
        let c = self.check(features, depth)?;
        let value = self.splat(features, depth)?;
        value.expect_same_shape(grad_out)?;
        let (fd, dd, gd) = (features.data(), depth.data(), grad_out.data());
        let nb = self.bins;
        let per_pixel = par::map_range(self.feat_h * self.feat_w, |pix| {
            let mut gf = vec![0.0f64; c];
            let mut gdep = vec![0.0f32; nb];
            let feat = &fd[pix * c..][..c];
            for (d, gd_out) in gdep.iter_mut().enumerate() {
                let v = pix * nb + d;
                let Some(p) = self.cell_to_pillar[v] else { continue };
                let g = &gd[p as usize * c..][..c];
                let w = dd[v] as f64;
                let mut dot = 0.0f64;
                for k in 0..c {
                    gf[k] += w * g[k] as f64;
                    dot += feat[k] as f64 * g[k] as f64;
                }
                *gd_out = dot as f32;
            }
            (gf.into_iter().map(|x| x as f32).collect::<Vec<_>>(), gdep)
        });
        let (gf, gdep): (Vec<_>, Vec<_>) = per_pixel.into_iter().unzip();
        Ok(GradPair::new(value)
            .with("features", Tensor::new(features.shape().to_vec(), gf.concat())?)
            .with("depth", Tensor::new(depth.shape().to_vec(), gdep.concat())?))
    }
}

/// Checks that each depth row is a probability distribution.
pub fn check_distribution(depth: &Tensor) -> Result<()> {
    let nb = depth.last_dim();
    for (i, row) in depth.data().chunks(nb).enumerate() {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        if row.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(BevError::Distribution(format!(
                "depth row {i} sums to {s}"
            )));
        }
    }
    Ok(())
}

/// Camera BEV features `C` from image features `F` and depth distribution `D`.
pub fn lift_splat(features: &Tensor, depth: &Tensor, grid: &FrustumGrid) -> Result<Tensor> {
    grid.check(features, depth)?;
    check_distribution(depth)?;
    grid.splat(features, depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_grid() -> FrustumGrid {
        let cam = CameraModel::forward_facing(16, 8, 90.0, 1.6, 0.0);
        let bev = BevConfig {
            x_min: 0.0,
            x_max: 12.0,
            y_min: -6.0,
            y_max: 6.0,
            resolution: 1.5,
        };
        let bins = DepthBinning {
            d_min: 2.0,
            d_max: 5.0,
            step: 1.0,
        };
        FrustumGrid::new(&cam, &bev, &bins, 4, 4).unwrap()
    }

    #[test]
    fn one_hot_collapses_to_single_pillar() {
        let g = tiny_grid();
        let f = Tensor::from_fn(&[4, 4, 2], |i| i as f32);
        let d = Tensor::from_fn(&[4, 4, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
        let out = lift_splat(&f, &d, &g).unwrap();
        let mut want = vec![0.0f32; out.len()];
        for pix in 0..16 {
            if let Some(p) = g.cell_to_pillar[pix * 3 + 1] {
                for k in 0..2 {
                    want[p as usize * 2 + k] += f.data()[pix * 2 + k];
                }
            }
        }
        assert_eq!(out.data(), &want[..]);
    }

    #[test]
    fn rejects_unnormalized_depth() {
        let g = tiny_grid();
        let f = Tensor::zeros(&[4, 4, 2]);
        let d = Tensor::full(&[4, 4, 3], 0.5);
        assert!(matches!(lift_splat(&f, &d, &g), Err(BevError::Distribution(_))));
        assert!(lift_splat(&f, &Tensor::zeros(&[4, 4, 2]), &g).is_err());
    }
}
