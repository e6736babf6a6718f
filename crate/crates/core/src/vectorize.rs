//! Raster head outputs to polylines: threshold, cluster embeddings with
//! DBSCAN, walk each cluster along its predicted directions, then drop
//! overlapping duplicates with mask NMS.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bev::{BevConfig, Mask};
use crate::error::{BevError, Result};
use crate::fusion::DIRECTION_CLASSES;
use crate::map::{rasterize_polyline, MapClass, MapInstance, PolylineMap};
use crate::par;
use crate::tensor::Tensor;

/// Label of points that belong to no cluster.
pub const NOISE: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VectorizeConfig {
    /// Foreground threshold on class probability.
    pub threshold: f64,
    pub eps: f64,
    pub min_pts: usize,
    pub nms_iou: f64,
    /// Search radius of the greedy walk, in cells.
    pub gap_cells: f64,
    /// Maximum bearing deviation from the predicted direction, degrees.
    pub max_turn_deg: f64,
}

impl Default for VectorizeConfig {
    fn default() -> Self {
        VectorizeConfig {
            threshold: 0.5,
            eps: 1.5,
            min_pts: 3,
            nms_iou: 0.3,
            gap_cells: 5.0,
            max_turn_deg: 45.0,
        }
    }
}

impl VectorizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0)
            || self.min_pts == 0
            || !(0.0..=1.0).contains(&self.threshold)
            || !(0.0..=1.0).contains(&self.nms_iou)
            || !(self.gap_cells >= 1.0)
            || !(self.max_turn_deg > 0.0)
        {
            return Err(BevError::Config(format!("invalid vectorize config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterResult {
    /// Per point: cluster id from 1, or [`NOISE`].
    pub labels: Vec<u32>,
    pub cluster_count: usize,
}

fn within(a: &[f32], b: &[f32], eps2: f64) -> bool {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        <= eps2
}

/// Density clustering. A point is core when at least `min_pts` points
/// (itself included) lie within `eps`; clusters are seeded in input order.
pub fn dbscan(points: &[Vec<f32>], eps: f64, min_pts: usize) -> Result<ClusterResult> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(BevError::param(format!("dbscan eps {eps}, min_pts {min_pts}")));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = par::map_range(n, |i| {
        (0..n).filter(|&j| within(&points[i], &points[j], eps2)).collect()
    });
    let mut labels = vec![NOISE; n];
    let mut visited = vec![false; n];
    let mut next = 0u32;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        if neighbors[i].len() < min_pts {
            continue;
        }
        next += 1;
        labels[i] = next;
        let mut queue: VecDeque<usize> = neighbors[i].iter().copied().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = next;
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            if neighbors[j].len() >= min_pts {
                queue.extend(neighbors[j].iter().copied());
            }
        }
    }
    Ok(ClusterResult {
        labels,
        cluster_count: next as usize,
    })
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub mask: Mask,
    pub confidence: f64,
}

/// Mask IoU; two empty masks count as identical.
pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let (i, u) = a.overlap(b);
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Greedy NMS. Returns indices of kept candidates by descending confidence.
pub fn nms_instances(cands: &[Candidate], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].confidence.total_cmp(&cands[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| mask_iou(&cands[i].mask, &cands[k].mask) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Center angle of a direction class, radians counter-clockwise from +x.
pub fn direction_angle(class: usize) -> f64 {
    (class as f64 + 0.5) * 2.0 * PI / DIRECTION_CLASSES as f64
}

/// Direction class containing an angle.
pub fn direction_class(angle: f64) -> usize {
    let a = angle.rem_euclid(2.0 * PI);
    ((a / (2.0 * PI) * DIRECTION_CLASSES as f64).floor() as usize).min(DIRECTION_CLASSES - 1)
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Orders a cluster's cells into a polyline. `cells` are `(row, col)`,
/// `directions` their direction classes. `None` when fewer than two cells
/// end up on the walk.
pub fn connect_polyline(
    cells: &[(usize, usize)],
    directions: &[usize],
    bev: &BevConfig,
    cfg: &VectorizeConfig,
) -> Option<Vec<[f64; 2]>> {
    assert_eq!(cells.len(), directions.len());
    if cells.len() < 2 {
        return None;
    }
    // Grid coordinates: u along +x (columns), v along +y (rows).
    let uv: Vec<(f64, f64)> = cells.iter().map(|&(r, c)| (c as f64, r as f64)).collect();
    let n = uv.len() as f64;
    let (mu, mv) = uv.iter().fold((0.0, 0.0), |(a, b), &(u, v)| (a + u / n, b + v / n));
    let (mut suu, mut suv, mut svv) = (0.0, 0.0, 0.0);
    for &(u, v) in &uv {
        suu += (u - mu) * (u - mu);
        suv += (u - mu) * (v - mv);
        svv += (v - mv) * (v - mv);
    }
    let theta = 0.5 * (2.0 * suv).atan2(suu - svv);
    let mut axis = (theta.cos(), theta.sin());
    let (du, dv) = directions.iter().fold((0.0, 0.0), |(a, b), &d| {
        let t = direction_angle(d);
        (a + t.cos(), b + t.sin())
    });
    if axis.0 * du + axis.1 * dv < 0.0 {
        axis = (-axis.0, -axis.1);
    }
    let proj = |i: usize| (uv[i].0 - mu) * axis.0 + (uv[i].1 - mv) * axis.1;
    let mut cur = (1..uv.len()).fold(0, |best, i| if proj(i) < proj(best) { i } else { best });

    let max_turn = cfg.max_turn_deg.to_radians();
    let mut visited = vec![false; uv.len()];
    visited[cur] = true;
    let mut path = vec![cur];
    loop {
        let heading = direction_angle(directions[cur]);
        let mut best_dir: Option<(f64, usize)> = None;
        let mut best_any: Option<(f64, usize)> = None;
        for j in 0..uv.len() {
            if visited[j] {
                continue;
            }
            let (eu, ev) = (uv[j].0 - uv[cur].0, uv[j].1 - uv[cur].1);
            let d = eu.hypot(ev);
            if d > cfg.gap_cells {
                continue;
            }
            if best_any.is_none_or(|(bd, _)| d < bd) {
                best_any = Some((d, j));
            }
            if angle_diff(ev.atan2(eu), heading) < max_turn && best_dir.is_none_or(|(bd, _)| d < bd) {
                best_dir = Some((d, j));
            }
        }
        let Some((_, next)) = best_dir.or(best_any) else { break };
        visited[next] = true;
        path.push(next);
        cur = next;
    }
    if path.len() < 2 {
        return None;
    }
    Some(
        path.into_iter()
            .map(|i| {
                let (x, y) = bev.center(cells[i].0, cells[i].1);
                [x, y]
            })
            .collect(),
    )
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Polylines for every element class. `seg_probs` holds per-cell class
/// probabilities with channel 0 as background.
pub fn vectorize_map(
    seg_probs: &Tensor,
    embeddings: &Tensor,
    dir_logits: &Tensor,
    bev: &BevConfig,
    cfg: &VectorizeConfig,
) -> Result<PolylineMap> {
    cfg.validate()?;
    let (h, w, k) = seg_probs.dims3()?;
    let (eh, ew, e) = embeddings.dims3()?;
    let (dh, dw, nd) = dir_logits.dims3()?;
    if (h, w) != (bev.rows(), bev.cols()) || (eh, ew) != (h, w) || (dh, dw) != (h, w) || nd != DIRECTION_CLASSES {
        return Err(BevError::shape(format!(
            "heads {:?}/{:?}/{:?} for a {}x{} grid",
            seg_probs.shape(),
            embeddings.shape(),
            dir_logits.shape(),
            bev.rows(),
            bev.cols()
        )));
    }
    let classes: Vec<MapClass> = (1..k).filter_map(MapClass::from_seg_index).collect();
    let per_class = par::map_slice(&classes, |&class| {
        let ch = class.seg_index().unwrap();
        let fg: Vec<usize> = (0..h * w)
            .filter(|&i| seg_probs.data()[i * k + ch] as f64 > cfg.threshold)
            .collect();
        let points: Vec<Vec<f32>> = fg.iter().map(|&i| embeddings.data()[i * e..][..e].to_vec()).collect();
        let clusters = dbscan(&points, cfg.eps, cfg.min_pts)?;
        let mut cands = Vec::new();
        let mut lines = Vec::new();
        for id in 1..=clusters.cluster_count as u32 {
            let members: Vec<usize> = fg
                .iter()
                .zip(&clusters.labels)
                .filter(|(_, &l)| l == id)
                .map(|(&i, _)| i)
                .collect();
            let cells: Vec<(usize, usize)> = members.iter().map(|&i| (i / w, i % w)).collect();
            let dirs: Vec<usize> = members.iter().map(|&i| argmax(&dir_logits.data()[i * nd..][..nd])).collect();
            let Some(line) = connect_polyline(&cells, &dirs, bev, cfg) else { continue };
            let confidence =
                members.iter().map(|&i| seg_probs.data()[i * k + ch] as f64).sum::<f64>() / members.len() as f64;
            let mut mask = Mask::for_grid(bev);
            rasterize_polyline(&line, bev, &mut mask);
            cands.push(Candidate { mask, confidence });
            lines.push(line);
        }
        let kept = nms_instances(&cands, cfg.nms_iou);
        Ok::<_, BevError>(
            kept.into_iter()
                .map(|i| MapInstance {
                    class,
                    confidence: cands[i].confidence.clamp(0.0, 1.0),
                    points: lines[i].clone(),
                })
                .collect::<Vec<_>>(),
        )
    });
    let mut instances = Vec::new();
    for r in per_class {
        instances.extend(r?);
    }
    Ok(PolylineMap { instances })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> VectorizeConfig {
        VectorizeConfig::default()
    }

    #[test]
    fn separated_clumps() {
        let mut pts = vec![vec![0.0f32, 0.0]; 5];
        pts.extend(vec![vec![15.0f32, 0.0]; 5]);
        let r = dbscan(&pts, 1.5, 3).unwrap();
        assert_eq!(r.cluster_count, 2);
        assert_eq!(r.labels, [1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn sparse_points_are_noise() {
        let pts: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32 * 3.0]).collect();
        let r = dbscan(&pts, 1.0, 2).unwrap();
        assert_eq!(r.cluster_count, 0);
        assert!(r.labels.iter().all(|&l| l == NOISE));
        assert!(dbscan(&[], 1.0, 2).unwrap().labels.is_empty());
        assert!(dbscan(&pts, 0.0, 2).is_err());
    }

    fn block(r0: usize, c0: usize, hgt: usize, wid: usize) -> Mask {
        let mut m = Mask::new(10, 10);
        for r in r0..r0 + hgt {
            for c in c0..c0 + wid {
                m.set(r, c);
            }
        }
        m
    }

    #[test]
    fn nms_identical_and_disjoint() {
        let a = Candidate { mask: block(0, 0, 2, 2), confidence: 0.8 };
        let b = Candidate { mask: block(0, 0, 2, 2), confidence: 0.9 };
        assert_eq!(nms_instances(&[a.clone(), b], 0.3), vec![1]);
        let c = Candidate { mask: block(5, 5, 2, 2), confidence: 0.1 };
        assert_eq!(nms_instances(&[a, c], 0.3), vec![0, 1]);
    }

    #[test]
    fn nms_hand_trace() {
        // Pairwise IoUs: (0,1) = 6/10 = 0.6, (0,2) = 1/10, (1,2) = 1/10.
        let mut m0 = Mask::new(1, 20);
        let mut m1 = Mask::new(1, 20);
        let mut m2 = Mask::new(1, 20);
        (0..8).for_each(|c| m0.set(0, c));
        (2..10).for_each(|c| m1.set(0, c));
        for c in [7, 15, 16] {
            m2.set(0, c);
        }
        assert!((mask_iou(&m0, &m1) - 0.6).abs() < 1e-12);
        assert!((mask_iou(&m0, &m2) - 0.1).abs() < 1e-12);
        assert!((mask_iou(&m1, &m2) - 0.1).abs() < 1e-12);
        let cands = vec![
            Candidate { mask: m0, confidence: 0.9 },
            Candidate { mask: m1, confidence: 0.8 },
            Candidate { mask: m2, confidence: 0.7 },
        ];
        assert_eq!(nms_instances(&cands, 0.5), vec![0, 2]);
    }

    #[test]
    fn direction_classes_round_trip() {
        for c in 0..DIRECTION_CLASSES {
            assert_eq!(direction_class(direction_angle(c)), c);
        }
        assert_eq!(direction_class(-0.01), 35);
    }

    #[test]
    fn straight_run_in_x_order() {
        let bev = BevConfig::toy();
        let cells: Vec<(usize, usize)> = (0..10).rev().map(|c| (20, 30 + c)).collect();
        let line = connect_polyline(&cells, &[0; 10], &bev, &cfg()).unwrap();
        assert_eq!(line.len(), 10);
        assert!(line.windows(2).all(|w| w[1][0] > w[0][0] && w[1][1] == w[0][1]));
    }

    #[test]
    fn straight_run_against_direction() {
        let bev = BevConfig::toy();
        let cells: Vec<(usize, usize)> = (0..10).map(|c| (20, 30 + c)).collect();
        let line = connect_polyline(&cells, &[18; 10], &bev, &cfg()).unwrap();
        assert!(line.windows(2).all(|w| w[1][0] < w[0][0]));
    }

    #[test]
    fn l_shape_passes_corner() {
        let bev = BevConfig::toy();
        let mut cells: Vec<(usize, usize)> = (0..10).map(|c| (10, 10 + c)).collect();
        let mut dirs = vec![0; 9];
        dirs.push(9);
        for r in 1..10 {
            cells.push((10 + r, 19));
            dirs.push(9);
        }
        let line = connect_polyline(&cells, &dirs, &bev, &cfg()).unwrap();
        assert_eq!(line.len(), 19);
        assert_eq!(line[0], [bev.center(10, 10).0, bev.center(10, 10).1]);
        let corner = bev.center(10, 19);
        assert_eq!(line[9], [corner.0, corner.1]);
        let end = bev.center(19, 19);
        assert_eq!(line[18], [end.0, end.1]);
    }

    #[test]
    fn diagonal_pair_and_single_cell() {
        let bev = BevConfig::toy();
        let line = connect_polyline(&[(3, 3), (4, 4)], &[4, 4], &bev, &cfg()).unwrap();
        assert_eq!(line.len(), 2);
        assert!(connect_polyline(&[(3, 3)], &[0], &bev, &cfg()).is_none());
    }

    #[test]
    fn background_only_is_empty() {
        let bev = BevConfig::toy();
        let (h, w) = (bev.rows(), bev.cols());
        let seg = Tensor::from_fn(&[h, w, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let map = vectorize_map(&seg, &Tensor::zeros(&[h, w, 4]), &Tensor::zeros(&[h, w, 36]), &bev, &cfg()).unwrap();
        assert!(map.instances.is_empty());
    }
}
