//! Map-head training objective: segmentation and direction cross-entropy,
//! discriminative instance-embedding loss, depth focal loss and their
//! weighted sum. Every loss returns its value together with the gradient
//! w.r.t. the logits or embeddings it consumes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{BevError, Result};
use crate::tensor::Tensor;

/// Direction label for cells not on a lane.
pub const NO_LANE: f32 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_dep: f64,
    pub lambda_seg: f64,
    pub lambda_ins: f64,
    pub lambda_dir: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta_v: f64,
    pub delta_d: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dep: 1.0,
            lambda_seg: 1.0,
            lambda_ins: 1.0,
            lambda_dir: 0.2,
            alpha: 1.0,
            beta: 1.0,
            delta_v: 0.5,
            delta_d: 3.0,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_dep,
            self.lambda_seg,
            self.lambda_ins,
            self.lambda_dir,
            self.alpha,
            self.beta,
            self.delta_v,
            self.delta_d,
            self.gamma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.delta_d <= self.delta_v {
            return Err(BevError::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Raw outputs of the depth and map heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub seg_logits: Tensor,
    pub embeddings: Tensor,
    pub dir_logits: Tensor,
    pub depth_logits: Tensor,
}

/// A scalar loss and its gradient w.r.t. the scored tensor.
#[derive(Clone, Debug)]
pub struct Loss {
    pub value: f64,
    pub grad: Tensor,
}

#[derive(Clone, Debug)]
pub struct InstanceLoss {
    pub var: f64,
    pub dist: f64,
    pub loss: Loss,
}

fn label_grid(logits: &Tensor, labels: &Tensor) -> Result<usize> {
    let (h, w, k) = logits.dims3()?;
    if labels.shape() != [h, w] {
        return Err(BevError::shape(format!(
            "labels {:?} for logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    Ok(k)
}

fn class_id(v: f32, k: usize, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v as usize >= k {
        return Err(BevError::Label(format!("{what} label {v} outside [0, {k})")));
    }
    Ok(v as usize)
}

/// Log-softmax of one row, in f64.
fn log_softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = m + row.iter().map(|&z| (z as f64 - m).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z as f64 - lse).collect()
}

/// Cross-entropy averaged over the cells whose label is `Some`.
fn masked_ce(logits: &Tensor, targets: &[Option<usize>]) -> Loss {
    let k = logits.last_dim();
    let n = targets.iter().flatten().count();
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    for (i, (row, t)) in logits.data().chunks(k).zip(targets).enumerate() {
        let Some(t) = *t else { continue };
        let lp = log_softmax(row);
        total -= lp[t];
        for (j, (g, l)) in grad[i * k..][..k].iter_mut().zip(&lp).enumerate() {
            let p = l.exp() - if j == t { 1.0 } else { 0.0 };
            *g = (p / n as f64) as f32;
        }
    }
    let value = if n == 0 { 0.0 } else { total / n as f64 };
    Loss {
        value,
        grad: Tensor::new(logits.shape().to_vec(), grad).expect("same length"),
    }
}

/// Mean softmax cross-entropy over all cells.
pub fn seg_loss(seg_logits: &Tensor, labels: &Tensor) -> Result<Loss> {
    let k = label_grid(seg_logits, labels)?;
    let targets = labels
        .data()
        .iter()
        .map(|&v| class_id(v, k, "segmentation").map(Some))
        .collect::<Result<Vec<_>>>()?;
    Ok(masked_ce(seg_logits, &targets))
}

/// Cross-entropy over lane cells only; cells labelled [`NO_LANE`] get no
/// loss and no gradient.
pub fn direction_loss(dir_logits: &Tensor, labels: &Tensor) -> Result<Loss> {
    let k = label_grid(dir_logits, labels)?;
    let targets = labels
        .data()
        .iter()
        .map(|&v| {
            if v == NO_LANE {
                Ok(None)
            } else {
                class_id(v, k, "direction").map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(masked_ce(dir_logits, &targets))
}

/// Multi-class focal loss `-(1-p_t)^γ ln p_t` averaged over cells whose
/// target is one-hot; all-zero target cells are ignored.
pub fn depth_focal_loss(depth_logits: &Tensor, targets: &Tensor, gamma: f64) -> Result<Loss> {
    depth_logits.expect_same_shape(targets)?;
    let k = depth_logits.last_dim();
    let mut hot = Vec::with_capacity(depth_logits.len() / k.max(1));
    for (i, row) in targets.data().chunks(k).enumerate() {
        if row.iter().any(|&v| v != 0.0 && v != 1.0) || row.iter().filter(|&&v| v == 1.0).count() > 1 {
            return Err(BevError::Label(format!("depth target cell {i} is not one-hot")));
        }
        hot.push(row.iter().position(|&v| v == 1.0));
    }
    let n = hot.iter().flatten().count();
    let mut grad = vec![0.0f32; depth_logits.len()];
    let mut total = 0.0f64;
    for (i, (row, t)) in depth_logits.data().chunks(k).zip(&hot).enumerate() {
        let Some(t) = *t else { continue };
        let lp = log_softmax(row);
        let pt = lp[t].exp();
        let q = 1.0 - pt;
        total -= q.powf(gamma) * lp[t];
        // d/dz_j = [γ q^(γ-1) p_t ln p_t - q^γ] (δ_tj - p_j)
        let slope = if q > 0.0 {
            gamma * q.powf(gamma - 1.0) * pt * lp[t]
        } else {
            0.0
        };
        let coef = slope - q.powf(gamma);
        for (j, (g, l)) in grad[i * k..][..k].iter_mut().zip(&lp).enumerate() {
            let d = if j == t { 1.0 } else { 0.0 } - l.exp();
            *g = (coef * d / n as f64) as f32;
        }
    }
    Ok(Loss {
        value: if n == 0 { 0.0 } else { total / n as f64 },
        grad: Tensor::new(depth_logits.shape().to_vec(), grad)?,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Discriminative loss `α L_var + β L_dist` on instance embeddings.
/// Instance id 0 is background; other ids may be arbitrary.
pub fn instance_loss(embeddings: &Tensor, labels: &Tensor, w: &LossWeights) -> Result<InstanceLoss> {
    let e = label_grid(embeddings, labels)?;
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &v) in labels.data().iter().enumerate() {
        if v.fract() != 0.0 || v < 0.0 {
            return Err(BevError::Label(format!("instance label {v} at cell {i}")));
        }
        if v > 0.0 {
            members.entry(v as u32).or_default().push(i);
        }
    }
    if members.is_empty() {
        return Err(BevError::Loss("no foreground instances".into()));
    }
    let data = embeddings.data();
    let emb = |i: usize| &data[i * e..][..e];
    let clusters: Vec<&Vec<usize>> = members.values().collect();
    let c = clusters.len() as f64;
    let means: Vec<Vec<f64>> = clusters
        .iter()
        .map(|cells| {
            let mut m = vec![0.0f64; e];
            for &i in cells.iter() {
                for (a, &x) in m.iter_mut().zip(emb(i)) {
                    *a += x as f64;
                }
            }
            m.iter_mut().for_each(|a| *a /= cells.len() as f64);
            m
        })
        .collect();

    let mut grad = vec![0.0f64; embeddings.len()];
    // Gradient w.r.t. each cluster mean, pushed back to members at the end.
    let mut grad_mean = vec![vec![0.0f64; e]; clusters.len()];

    let mut var = 0.0f64;
    for (ci, cells) in clusters.iter().enumerate() {
        let nc = cells.len() as f64;
        let mu = &means[ci];
        let mut acc = 0.0f64;
        for &i in cells.iter() {
            let diff: Vec<f64> = emb(i).iter().zip(mu).map(|(&x, m)| x as f64 - m).collect();
            let d = norm(&diff);
            let h = (d - w.delta_v).max(0.0);
            acc += h * h;
            if h > 0.0 && d > 0.0 {
                let s = w.alpha * 2.0 * h / (d * c * nc);
                for k in 0..e {
                    grad[i * e + k] += s * diff[k];
                    grad_mean[ci][k] -= s * diff[k];
                }
            }
        }
        var += acc / nc;
    }
    var /= c;

    let mut dist = 0.0f64;
    if clusters.len() > 1 {
        let pairs = c * (c - 1.0);
        for a in 0..clusters.len() {
            for b in 0..clusters.len() {
                if a == b {
                    continue;
                }
                let diff: Vec<f64> = means[a].iter().zip(&means[b]).map(|(x, y)| x - y).collect();
                let d = norm(&diff);
                let h = (2.0 * w.delta_d - d).max(0.0);
                dist += h * h;
                if h > 0.0 && d > 0.0 {
                    let s = w.beta * 2.0 * h / (d * pairs);
                    for k in 0..e {
                        grad_mean[a][k] -= s * diff[k];
                        grad_mean[b][k] += s * diff[k];
                    }
                }
            }
        }
        dist /= pairs;
    }

    for (ci, cells) in clusters.iter().enumerate() {
        let nc = cells.len() as f64;
        for &i in cells.iter() {
            for k in 0..e {
                grad[i * e + k] += grad_mean[ci][k] / nc;
            }
        }
    }
    Ok(InstanceLoss {
        var,
        dist,
        loss: Loss {
            value: w.alpha * var + w.beta * dist,
            grad: Tensor::new(
                embeddings.shape().to_vec(),
                grad.into_iter().map(|g| g as f32).collect(),
            )?,
        },
    })
}

/// Per-head losses before weighting.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub depth: Loss,
    pub seg: Loss,
    pub instance: Loss,
    pub direction: Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub depth: f64,
    pub seg: f64,
    pub instance: f64,
    pub direction: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub report: LossReport,
    /// Keyed by head: `depth_logits`, `seg_logits`, `embeddings`, `dir_logits`.
    pub grads: BTreeMap<String, Tensor>,
}

/// `λ_dep L_dep + λ_seg L_seg + λ_ins L_ins + λ_dir L_dir`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<TotalLoss> {
    let named = [
        ("depth_logits", &parts.depth, w.lambda_dep),
        ("seg_logits", &parts.seg, w.lambda_seg),
        ("embeddings", &parts.instance, w.lambda_ins),
        ("dir_logits", &parts.direction, w.lambda_dir),
    ];
    let mut total = 0.0f64;
    let mut grads = BTreeMap::new();
    for (name, loss, lambda) in named {
        if !loss.value.is_finite() || !loss.grad.is_finite() {
            return Err(BevError::NonFinite(format!("{name} loss is not finite")));
        }
        total += lambda * loss.value;
        grads.insert(name.to_string(), loss.grad.scale(lambda as f32));
    }
    Ok(TotalLoss {
        report: LossReport {
            depth: parts.depth.value,
            seg: parts.seg.value,
            instance: parts.instance.value,
            direction: parts.direction.value,
            total,
        },
        grads,
    })
}

/// Supervision rasters matching [`HeadOutputs`].
#[derive(Clone, Debug)]
pub struct LossTargets {
    pub seg: Tensor,
    pub instance: Tensor,
    pub direction: Tensor,
    pub depth_one_hot: Tensor,
}

pub fn head_losses(out: &HeadOutputs, t: &LossTargets, w: &LossWeights) -> Result<TotalLoss> {
    let parts = LossParts {
        depth: depth_focal_loss(&out.depth_logits, &t.depth_one_hot, w.gamma)?,
        seg: seg_loss(&out.seg_logits, &t.seg)?,
        instance: instance_loss(&out.embeddings, &t.instance, w)?.loss,
        direction: direction_loss(&out.dir_logits, &t.direction)?,
    };
    total_loss(&parts, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn uniform_seg_logits_give_ln_k() {
        let l = seg_loss(&Tensor::zeros(&[2, 3, 4]), &Tensor::full(&[2, 3], 2.0)).unwrap();
        close(l.value, 4f64.ln(), 1e-9);
    }

    #[test]
    fn confident_seg_is_near_zero() {
        let logits = Tensor::from_fn(&[1, 2, 4], |i| if i % 4 == 1 { 40.0 } else { 0.0 });
        let l = seg_loss(&logits, &Tensor::full(&[1, 2], 1.0)).unwrap();
        assert!(l.value < 1e-12);
    }

    #[test]
    fn seg_label_out_of_range() {
        let r = seg_loss(&Tensor::zeros(&[1, 1, 4]), &Tensor::full(&[1, 1], 4.0));
        assert!(matches!(r, Err(BevError::Label(_))));
    }

    #[test]
    fn direction_single_lane_pixel() {
        let mut labels = Tensor::full(&[2, 2], NO_LANE);
        labels.data_mut()[3] = 7.0;
        let l = direction_loss(&Tensor::zeros(&[2, 2, 36]), &labels).unwrap();
        close(l.value, 36f64.ln(), 1e-9);
        assert!(l.grad.data()[..3 * 36].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn direction_all_masked() {
        let l = direction_loss(&Tensor::full(&[2, 2, 36], 0.3), &Tensor::full(&[2, 2], NO_LANE)).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn focal_half_probability() {
        let logits = Tensor::zeros(&[1, 1, 2]);
        let t = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let l = depth_focal_loss(&logits, &t, 2.0).unwrap();
        close(l.value, 0.25 * 2f64.ln(), 1e-9);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let logits = Tensor::from_fn(&[2, 3, 5], |i| ((i * 7) % 11) as f32 * 0.3 - 1.0);
        let mut t = Tensor::zeros(&[2, 3, 5]);
        let mut labels = vec![];
        for cell in 0..6 {
            if cell == 4 {
                labels.push(None);
                continue;
            }
            t.data_mut()[cell * 5 + cell % 5] = 1.0;
            labels.push(Some(cell % 5));
        }
        let fl = depth_focal_loss(&logits, &t, 0.0).unwrap();
        let ce = masked_ce(&logits, &labels);
        close(fl.value, ce.value, 1e-12);
        for (a, b) in fl.grad.data().iter().zip(ce.grad.data()) {
            close(*a as f64, *b as f64, 1e-7);
        }
    }

    #[test]
    fn focal_rejects_soft_targets() {
        let t = Tensor::full(&[1, 1, 2], 0.5);
        assert!(matches!(
            depth_focal_loss(&Tensor::zeros(&[1, 1, 2]), &t, 2.0),
            Err(BevError::Label(_))
        ));
    }

    #[test]
    fn instance_variance_hand_value() {
        let emb = Tensor::new(vec![1, 2, 1], vec![0.0, 2.0]).unwrap();
        let labels = Tensor::full(&[1, 2], 1.0);
        let l = instance_loss(&emb, &labels, &LossWeights::default()).unwrap();
        close(l.var, 0.25, 1e-12);
        assert_eq!(l.dist, 0.0);
    }

    #[test]
    fn instance_hinges_inactive_at_margins() {
        let emb = Tensor::new(vec![1, 4, 1], vec![0.0, 0.0, 6.0, 6.0]).unwrap();
        let labels = Tensor::new(vec![1, 4], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let l = instance_loss(&emb, &labels, &LossWeights::default()).unwrap();
        assert_eq!((l.var, l.dist), (0.0, 0.0));
        assert!(l.loss.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn instance_needs_foreground() {
        let r = instance_loss(&Tensor::zeros(&[2, 2, 3]), &Tensor::zeros(&[2, 2]), &LossWeights::default());
        assert!(matches!(r, Err(BevError::Loss(_))));
    }

    #[test]
    fn instance_gradient_matches_fd() {
        let emb = Tensor::from_fn(&[3, 3, 2], |i| ((i * 13) % 7) as f32 * 0.4 - 1.1);
        let labels = Tensor::new(vec![3, 3], vec![1., 1., 0., 2., 2., 2., 0., 5., 5.]).unwrap();
        let w = LossWeights::default();
        let l = instance_loss(&emb, &labels, &w).unwrap();
        let fd = finite_diff_grad(|x| instance_loss(x, &labels, &w).unwrap().loss.value, &emb, 1e-3).unwrap();
        assert!(crate::tensor::max_abs_diff(&fd, &l.loss.grad) < 1e-3);
    }

    #[test]
    fn total_with_unit_parts() {
        let unit = |s: &[usize]| Loss {
            value: 1.0,
            grad: Tensor::full(s, 1.0),
        };
        let parts = LossParts {
            depth: unit(&[1, 1, 2]),
            seg: unit(&[1, 1, 4]),
            instance: unit(&[1, 1, 4]),
            direction: unit(&[1, 1, 36]),
        };
        let t = total_loss(&parts, &LossWeights::default()).unwrap();
        close(t.report.total, 3.2, 1e-12);
        assert!(t.grads["dir_logits"].data().iter().all(|&g| g == 0.2f32));
    }

    #[test]
    fn total_rejects_nan() {
        let bad = Loss {
            value: f64::NAN,
            grad: Tensor::zeros(&[1]),
        };
        let ok = Loss {
            value: 0.0,
            grad: Tensor::zeros(&[1]),
        };
        let parts = LossParts {
            depth: ok.clone(),
            seg: bad,
            instance: ok.clone(),
            direction: ok,
        };
        assert!(matches!(
            total_loss(&parts, &LossWeights::default()),
            Err(BevError::NonFinite(_))
        ));
    }

    #[test]
    fn weights_reject_inverted_margins() {
        let w = LossWeights {
            delta_d: 0.4,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
