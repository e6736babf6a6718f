//! Kernels against slow reference implementations written from the
//! definitions.

use bevkit::bev::BevConfig;
use bevkit::camera::{CameraModel, DepthBinning};
use bevkit::fusion::params::AttentionParams;
use bevkit::fusion::{cross_attend, lift_splat, warp_bev, FlowField, FrustumGrid, ModelDims};
use bevkit::metrics::{chamfer_pred, chamfer_sym};
use bevkit::tensor::softmax_lastdim;
use bevkit::vectorize::{dbscan, NOISE};
use bevkit::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

fn random_depth(h: usize, w: usize, bins: usize, rng: &mut ChaCha8Rng) -> Tensor {
    softmax_lastdim(&Tensor::random_uniform(&[h, w, bins], -2.0, 2.0, rng))
}

/// Scatter every voxel into its pillar, visiting voxels in row-major order.
fn naive_splat(features: &Tensor, depth: &Tensor, grid: &FrustumGrid) -> Tensor {
    let (h, w, c) = features.dims3().unwrap();
    let nb = grid.bins;
    let mut acc = vec![0.0f64; grid.bev_rows * grid.bev_cols * c];
    for r in 0..h {
        for col in 0..w {
            for d in 0..nb {
                let v = (r * w + col) * nb + d;
                let Some(p) = grid.cell_to_pillar[v] else { continue };
                let weight = depth.data()[v] as f64;
                for k in 0..c {
                    acc[p as usize * c + k] += weight * features.at3(r, col, k) as f64;
                }
            }
        }
    }
    Tensor::new(
        vec![grid.bev_rows, grid.bev_cols, c],
        acc.into_iter().map(|a| a as f32).collect(),
    )
    .unwrap()
}

#[test]
fn lift_splat_matches_scatter_on_random_assignments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (h, w, nb) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let (br, bc) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let assign: Vec<Option<u32>> = (0..h * w * nb)
            .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..(br * bc) as u32)))
            .collect();
        let grid = FrustumGrid::from_assignment(h, w, nb, br, bc, assign);
        let c = rng.random_range(1..=5);
        let f = Tensor::random_uniform(&[h, w, c], -1.0, 1.0, &mut rng);
        let d = random_depth(h, w, nb, &mut rng);
        let out = lift_splat(&f, &d, &grid).unwrap();
        assert_eq!(out, naive_splat(&f, &d, &grid));
    }
}

#[test]
fn lift_splat_matches_scatter_on_camera_frustum() {
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
        d_max: 6.0,
        step: 1.0,
    };
    let grid = FrustumGrid::new(&cam, &bev, &bins, 8, 8).unwrap();
    assert!(grid.mapped_voxels() > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Tensor::random_uniform(&[8, 8, 3], -1.0, 1.0, &mut rng);
    let d = random_depth(8, 8, 4, &mut rng);
    assert_eq!(lift_splat(&f, &d, &grid).unwrap(), naive_splat(&f, &d, &grid));
}

fn linear(x: &[f32], weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (cin, cout) = weight.dims2().unwrap();
    (0..cout)
        .map(|o| bias.data()[o] as f64 + (0..cin).map(|i| x[i] as f64 * weight.data()[i * cout + o] as f64).sum::<f64>())
        .collect()
}

/// Per-query softmax attention followed by the two 1×1 convolutions.
fn three_loop_attention(b: &Tensor, f: &Tensor, p: &AttentionParams) -> Tensor {
    let (h, w, cb) = b.dims3().unwrap();
    let (fh, fw, cf) = f.dims3().unwrap();
    let dk = p.query.out_dim();
    let keys: Vec<Vec<f64>> = (0..fh * fw)
        .map(|j| linear(&f.data()[j * cf..][..cf], &p.key.weight, &p.key.bias))
        .collect();
    let values: Vec<Vec<f64>> = (0..fh * fw)
        .map(|j| linear(&f.data()[j * cf..][..cf], &p.value.weight, &p.value.bias))
        .collect();
    let dv = p.value.out_dim();
    let reduce_w = &p.reduce.kernel.weight;
    let merge_w = &p.merge.kernel.weight;
    let nr = p.reduce.out_channels();
    let mut out = Vec::with_capacity(h * w * cb);
    for i in 0..h * w {
        let bi = &b.data()[i * cb..][..cb];
        let q = linear(bi, &p.query.weight, &p.query.bias);
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut agg = vec![0.0f64; dv];
        for (j, v) in values.iter().enumerate() {
            for k in 0..dv {
                agg[k] += e[j] / z * v[k];
            }
        }
        let reduced: Vec<f64> = (0..nr)
            .map(|o| p.reduce.kernel.bias.data()[o] as f64 + (0..dv).map(|k| agg[k] * reduce_w.data()[k * nr + o] as f64).sum::<f64>())
            .collect();
        let concat: Vec<f64> = bi.iter().map(|&x| x as f64).chain(reduced).collect();
        for o in 0..cb {
            let s: f64 = (0..concat.len()).map(|k| concat[k] * merge_w.data()[k * cb + o] as f64).sum();
            out.push((s + p.merge.kernel.bias.data()[o] as f64) as f32);
        }
    }
    Tensor::new(vec![h, w, cb], out).unwrap()
}

#[test]
fn cross_attend_matches_three_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let dims = ModelDims {
            bottleneck_channels: rng.random_range(2..6),
            feature_channels: rng.random_range(2..6),
            attn_dim: rng.random_range(2..6),
            value_dim: rng.random_range(2..6),
            reduced_channels: rng.random_range(1..4),
            ..ModelDims::default()
        };
        let p = AttentionParams::random(&dims, &mut rng);
        let b = Tensor::random_uniform(&[rng.random_range(1..5), rng.random_range(1..5), dims.bottleneck_channels], -1.0, 1.0, &mut rng);
        let f = Tensor::random_uniform(&[rng.random_range(1..4), rng.random_range(1..6), dims.feature_channels], -1.0, 1.0, &mut rng);
        let got = cross_attend(&b, &f, &p).unwrap().output;
        let want = three_loop_attention(&b, &f, &p);
        let err = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5, "max error {err}");
    }
}

#[test]
fn integer_flow_is_direct_indexing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (h, w, c) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..4));
        let f = Tensor::random_uniform(&[h, w, c], -3.0, 3.0, &mut rng);
        let delta = Tensor::from_fn(&[h, w, 2], |_| rng.random_range(-3..=3) as f32);
        let out = warp_bev(&f, &FlowField::new(delta.clone()).unwrap()).unwrap();
        for r in 0..h {
            for col in 0..w {
                let (dc, dr) = (delta.at3(r, col, 0) as i64, delta.at3(r, col, 1) as i64);
                let (sr, sc) = (r as i64 + dr, col as i64 + dc);
                let inside = sr >= 0 && sc >= 0 && sr < h as i64 && sc < w as i64;
                for k in 0..c {
                    let want = if inside { f.at3(sr as usize, sc as usize, k) } else { 0.0 };
                    assert_eq!(out.at3(r, col, k).to_bits(), want.to_bits());
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn zero_flow_is_identity(
        h in 1usize..10,
        w in 1usize..10,
        c in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::random_uniform(&[h, w, c], -1e3, 1e3, &mut rng);
        let out = warp_bev(&f, &FlowField::zeros(h, w)).unwrap();
        prop_assert!(out.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

/// Textbook DBSCAN: full pairwise neighborhoods, clusters grown one at a
/// time from seeds in index order.
fn naive_dbscan(pts: &[Vec<f32>], eps: f64, min_pts: usize) -> Vec<u32> {
    let n = pts.len();
    let dist2 = |i: usize, j: usize| -> f64 {
        pts[i].iter().zip(&pts[j]).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
    };
    let nbrs = |i: usize| -> Vec<usize> { (0..n).filter(|&j| dist2(i, j) <= eps * eps).collect() };
    let mut label: Vec<Option<u32>> = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if label[i].is_some() || nbrs(i).len() < min_pts {
            continue;
        }
        next += 1;
        let mut stack = vec![i];
        while let Some(j) = stack.pop() {
            if label[j].is_some() {
                continue;
            }
            label[j] = Some(next);
            let nj = nbrs(j);
            if nj.len() >= min_pts {
                stack.extend(nj.into_iter().filter(|&k| label[k].is_none()));
            }
        }
    }
    label.into_iter().map(|l| l.unwrap_or(NOISE)).collect()
}

fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        if (x == NOISE) != (y == NOISE) {
            return false;
        }
        *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
    })
}

#[test]
fn dbscan_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for set in 0..100 {
        let pts: Vec<Vec<f32>> = (0..40)
            .map(|_| vec![rng.random_range(0.0..10.0f32), rng.random_range(0.0..10.0f32)])
            .collect();
        let (eps, min_pts) = (rng.random_range(0.5..2.0), rng.random_range(2..6));
        let got = dbscan(&pts, eps, min_pts).unwrap();
        let want = naive_dbscan(&pts, eps, min_pts);
        assert!(same_partition(&got.labels, &want), "set {set}: {:?} vs {want:?}", got.labels);
        let clusters: std::collections::BTreeSet<_> = want.iter().filter(|&&l| l != NOISE).collect();
        assert_eq!(got.cluster_count, clusters.len());
    }
}

fn random_curve(rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = rng.random_range(1..30);
    let (mut x, mut y) = (rng.random_range(0.0..50.0), rng.random_range(-10.0..10.0));
    (0..n)
        .map(|_| {
            x += rng.random_range(0.1..2.0);
            y += rng.random_range(-0.5..0.5);
            [x, y]
        })
        .collect()
}

/// Full distance matrix, row minima, mean.
fn brute_chamfer(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let d: Vec<Vec<f64>> = a
        .iter()
        .map(|p| b.iter().map(|g| (p[0] - g[0]).hypot(p[1] - g[1])).collect())
        .collect();
    let mins: Vec<f64> = d.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    mins.iter().sum::<f64>() / a.len() as f64
}

#[test]
fn chamfer_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..50 {
        let (a, b) = (random_curve(&mut rng), random_curve(&mut rng));
        let (ab, ba) = (brute_chamfer(&a, &b), brute_chamfer(&b, &a));
        assert_eq!(chamfer_pred(&a, &b).unwrap().to_bits(), ab.to_bits());
        assert_eq!(chamfer_sym(&a, &b, 5.0).unwrap().to_bits(), (ab.min(5.0) + ba.min(5.0)).to_bits());
    }
    assert!(chamfer_pred(&[], &[[0.0, 0.0]]).is_none());
}
