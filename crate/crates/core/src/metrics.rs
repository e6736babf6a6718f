//! Map evaluation: raster IoU, one-way and bidirectional Chamfer distance,
//! dual-threshold instance matching and ten-point AP, reported per class
//! and per forward-range interval.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bev::{BevConfig, Mask};
use crate::error::{BevError, Result};
use crate::map::{rasterize_class, rasterize_polyline, resample, MapClass, MapInstance, PolylineMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalSpec {
    /// Forward distances in meters, strictly increasing.
    pub breaks: Vec<f64>,
}

impl Default for IntervalSpec {
    fn default() -> Self {
        IntervalSpec {
            breaks: vec![0.0, 30.0, 60.0, 90.0],
        }
    }
}

impl IntervalSpec {
    pub fn validate(&self, bev: &BevConfig) -> Result<()> {
        let b = &self.breaks;
        let ok = b.len() >= 2
            && b.windows(2).all(|w| w[0] < w[1])
            && b[0] <= bev.x_min
            && b[b.len() - 1] >= bev.x_max;
        if !ok {
            return Err(BevError::Config(format!(
                "interval breaks {b:?} must increase and cover [{}, {}]",
                bev.x_min, bev.x_max
            )));
        }
        Ok(())
    }

    pub fn intervals(&self) -> Vec<(f64, f64)> {
        self.breaks.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn label(lo: f64, hi: f64) -> String {
        format!("{lo}-{hi}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchThresholds {
    pub cd_max: f64,
    pub iou_min: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        MatchThresholds {
            cd_max: 1.0,
            iou_min: 0.1,
        }
    }
}

impl MatchThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.cd_max > 0.0) || !(self.iou_min > 0.0 && self.iou_min < 1.0) {
            return Err(BevError::Config(format!("invalid thresholds {self:?}")));
        }
        Ok(())
    }
}

/// Parses `cd=1.0,iou=0.1`; either key may be omitted.
impl FromStr for MatchThresholds {
    type Err = BevError;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = MatchThresholds::default();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| BevError::Config(format!("threshold '{part}' is not key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| BevError::Config(format!("threshold value '{v}'")))?;
            match k.trim() {
                "cd" => t.cd_max = v,
                "iou" => t.iou_min = v,
                other => return Err(BevError::Config(format!("unknown threshold '{other}'"))),
            }
        }
        t.validate()?;
        Ok(t)
    }
}

impl fmt::Display for MatchThresholds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cd={},iou={}", self.cd_max, self.iou_min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: MatchThresholds,
    pub intervals: IntervalSpec,
    /// Per-direction saturation of the bidirectional Chamfer distance.
    pub cd_cap: f64,
    /// Spacing of curve samples, meters.
    pub sample_step: f64,
    /// Chebyshev dilation of instance rasters before the IoU gate.
    pub match_dilation: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: MatchThresholds::default(),
            intervals: IntervalSpec::default(),
            cd_cap: 5.0,
            sample_step: 0.15,
            match_dilation: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, bev: &BevConfig) -> Result<()> {
        self.thresholds.validate()?;
        self.intervals.validate(bev)?;
        if !(self.cd_cap > 0.0) || !(self.sample_step > 0.0) {
            return Err(BevError::Config(format!(
                "cd_cap {} / sample_step {}",
                self.cd_cap, self.sample_step
            )));
        }
        Ok(())
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1.0 when both are empty.
pub fn raster_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.rows, pred.cols) != (gt.rows, gt.cols) {
        return Err(BevError::shape(format!(
            "masks {}x{} vs {}x{}",
            pred.rows, pred.cols, gt.rows, gt.cols
        )));
    }
    let (i, u) = pred.overlap(gt);
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Mean distance from each `pred` point to its nearest `gt` point; `None`
/// when either side is empty.
pub fn chamfer_pred(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Option<f64> {
    if pred.is_empty() || gt.is_empty() {
        return None;
    }
    let mut sum = 0.0f64;
    for p in pred {
        let mut best = f64::INFINITY;
        for g in gt {
            best = best.min((p[0] - g[0]).hypot(p[1] - g[1]));
        }
        sum += best;
    }
    Some(sum / pred.len() as f64)
}

/// `min(CD_pred, cap) + min(CD_gt, cap)`.
pub fn chamfer_sym(pred: &[[f64; 2]], gt: &[[f64; 2]], cap: f64) -> Option<f64> {
    Some(chamfer_pred(pred, gt)?.min(cap) + chamfer_pred(gt, pred)?.min(cap))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub pred: usize,
    pub confidence: f64,
    pub gt: Option<usize>,
    pub cd_pred: Option<f64>,
    pub iou: Option<f64>,
}

impl MatchRecord {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

fn instance_mask(inst: &MapInstance, bev: &BevConfig, dilation: usize) -> Mask {
    let mut m = Mask::for_grid(bev);
    rasterize_polyline(&inst.points, bev, &mut m);
    m.dilate(dilation)
}

/// Greedy matching of same-class instances in descending confidence: each
/// prediction takes the unmatched gt with the lowest `CD_pred` among those
/// with IoU above `iou_min` and `CD_pred` below `cd_max`.
pub fn match_instances(
    preds: &[&MapInstance],
    gts: &[&MapInstance],
    bev: &BevConfig,
    cfg: &EvalConfig,
) -> Vec<MatchRecord> {
    let t = &cfg.thresholds;
    let pred_pts: Vec<_> = preds.iter().map(|p| resample(&p.points, cfg.sample_step)).collect();
    let gt_pts: Vec<_> = gts.iter().map(|g| resample(&g.points, cfg.sample_step)).collect();
    let pred_masks: Vec<_> = preds.iter().map(|p| instance_mask(p, bev, cfg.match_dilation)).collect();
    let gt_masks: Vec<_> = gts.iter().map(|g| instance_mask(g, bev, cfg.match_dilation)).collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|pi| {
            let mut best: Option<(f64, f64, usize)> = None;
            for gi in 0..gts.len() {
                if taken[gi] {
                    continue;
                }
                let Some(cd) = chamfer_pred(&pred_pts[pi], &gt_pts[gi]) else { continue };
                let (i, u) = pred_masks[pi].overlap(&gt_masks[gi]);
                let iou = if u == 0 { 0.0 } else { i as f64 / u as f64 };
                if iou > t.iou_min && cd < t.cd_max && best.is_none_or(|(bcd, _, _)| cd < bcd) {
                    best = Some((cd, iou, gi));
                }
            }
            if let Some((_, _, gi)) = best {
                taken[gi] = true;
            }
            MatchRecord {
                pred: pi,
                confidence: preds[pi].confidence,
                gt: best.map(|b| b.2),
                cd_pred: best.map(|b| b.0),
                iou: best.map(|b| b.1),
            }
        })
        .collect()
}

/// Mean over recall levels 0.1..1.0 of the best precision reached at or
/// beyond each level; `None` without ground truth.
pub fn average_precision(records: &[MatchRecord], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].confidence.total_cmp(&records[a].confidence).then(a.cmp(&b)));
    let mut curve = Vec::with_capacity(records.len());
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        tp += records[i].is_tp() as usize;
        curve.push((tp, tp as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for level in 1..=10usize {
        total += curve
            .iter()
            .filter(|&&(tp, _)| tp * 10 >= level * n_gt)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
    }
    Some(total / 10.0)
}

/// Pieces of a polyline with `lo ≤ x ≤ hi`, cut exactly at the bounds.
pub fn clip_polyline(points: &[[f64; 2]], lo: f64, hi: f64) -> Vec<Vec<[f64; 2]>> {
    let inside = |p: &[f64; 2]| p[0] >= lo && p[0] <= hi;
    let lerp = |a: [f64; 2], b: [f64; 2], x: f64| {
        let t = (x - a[0]) / (b[0] - a[0]);
        [x, a[1] + t * (b[1] - a[1])]
    };
    let mut pieces: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut cur: Vec<[f64; 2]> = Vec::new();
    let push = |cur: &mut Vec<[f64; 2]>, p: [f64; 2]| {
        if cur.last() != Some(&p) {
            cur.push(p);
        }
    };
    for (i, &p) in points.iter().enumerate() {
        if i > 0 {
            let a = points[i - 1];
            // Crossings of the segment with the two bounds, in travel order.
            let mut cuts: Vec<(f64, f64)> = [lo, hi]
                .into_iter()
                .filter(|&x| (a[0] - x) * (p[0] - x) < 0.0)
                .map(|x| ((x - a[0]) / (p[0] - a[0]), x))
                .collect();
            cuts.sort_by(|u, v| u.0.total_cmp(&v.0));
            for (_, x) in cuts {
                let q = lerp(a, p, x);
                if cur.is_empty() {
                    push(&mut cur, q);
                } else {
                    push(&mut cur, q);
                    pieces.push(std::mem::take(&mut cur));
                }
            }
        }
        if inside(&p) {
            push(&mut cur, p);
        } else if !cur.is_empty() {
            pieces.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    pieces.retain(|p| p.len() >= 2);
    pieces
}

/// Instances of `class` restricted to `[lo, hi]` along x.
pub fn clip_map(map: &PolylineMap, class: MapClass, lo: f64, hi: f64) -> Vec<MapInstance> {
    map.of_class(class)
        .flat_map(|inst| {
            clip_polyline(&inst.points, lo, hi).into_iter().map(|points| MapInstance {
                class,
                confidence: inst.confidence,
                points,
            })
        })
        .collect()
}

/// Columns whose centers fall in `[lo, hi)`, or `[lo, hi]` for the last
/// interval.
fn column_band(bev: &BevConfig, lo: f64, hi: f64, last: bool) -> Vec<bool> {
    (0..bev.cols())
        .map(|c| {
            let x = bev.center(0, c).0;
            x >= lo && (x < hi || (last && x <= hi))
        })
        .collect()
}

fn band_overlap(pred: &Mask, gt: &Mask, band: &[bool]) -> (usize, usize) {
    let (mut i, mut u) = (0, 0);
    for (k, (&a, &b)) in pred.data.iter().zip(&gt.data).enumerate() {
        if band[k % pred.cols] {
            i += (a && b) as usize;
            u += (a || b) as usize;
        }
    }
    (i, u)
}

/// One sample: a map plus optional per-class rasters (element-class order);
/// without rasters the map is rasterized.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub map: PolylineMap,
    pub masks: Option<[Mask; 3]>,
}

impl EvalSample {
    pub fn from_map(map: PolylineMap) -> Self {
        EvalSample { map, masks: None }
    }

    fn masks(&self, bev: &BevConfig) -> [Mask; 3] {
        self.masks
            .clone()
            .unwrap_or_else(|| MapClass::ELEMENTS.map(|c| rasterize_class(&self.map, c, bev)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: MapClass,
    pub interval: String,
    pub iou: f64,
    pub cd_pred: Option<f64>,
    pub cd_sym: Option<f64>,
    pub ap: Option<f64>,
    pub gt_count: usize,
    pub pred_count: usize,
    pub tp: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMatches {
    pub sample: usize,
    pub class: MapClass,
    pub interval: String,
    pub records: Vec<MatchRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub matches: Vec<SampleMatches>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    pub fn row(&self, class: MapClass, interval: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.class == class && r.interval == interval)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| BevError::Consistency(format!("csv: {e}"));
        w.write_record(["class", "interval", "iou", "cd_pred", "cd_sym", "ap"]).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.class.name().to_string(),
                r.interval.clone(),
                format!("{:.6}", r.iou),
                opt(r.cd_pred),
                opt(r.cd_sym),
                opt(r.ap),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| BevError::Consistency(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Clone, Debug, Default)]
struct Cell {
    inter: usize,
    union: usize,
    cd_pred: Vec<f64>,
    cd_sym: Vec<f64>,
    records: Vec<MatchRecord>,
    gt: usize,
    pred: usize,
}

/// Accumulates metrics over samples.
#[derive(Clone, Debug)]
pub struct Evaluator {
    bev: BevConfig,
    cfg: EvalConfig,
    /// `(class, interval index)`; the last index is the full range.
    cells: BTreeMap<(MapClass, usize), Cell>,
    matches: Vec<SampleMatches>,
    samples: usize,
}

impl Evaluator {
    pub fn new(bev: BevConfig, cfg: EvalConfig) -> Result<Self> {
        bev.validate()?;
        cfg.validate(&bev)?;
        Ok(Evaluator {
            bev,
            cfg,
            cells: BTreeMap::new(),
            matches: Vec::new(),
            samples: 0,
        })
    }

    fn labels(&self) -> Vec<(String, f64, f64)> {
        let mut out: Vec<_> = self
            .cfg
            .intervals
            .intervals()
            .into_iter()
            .map(|(lo, hi)| (IntervalSpec::label(lo, hi), lo, hi))
            .collect();
        out.push(("all".into(), f64::NEG_INFINITY, f64::INFINITY));
        out
    }

    pub fn add(&mut self, pred: &EvalSample, gt: &EvalSample) -> Result<()> {
        let (pm, gm) = (pred.masks(&self.bev), gt.masks(&self.bev));
        for m in pm.iter().chain(&gm) {
            if (m.rows, m.cols) != (self.bev.rows(), self.bev.cols()) {
                return Err(BevError::shape(format!(
                    "mask {}x{} for a {}x{} grid",
                    m.rows,
                    m.cols,
                    self.bev.rows(),
                    self.bev.cols()
                )));
            }
        }
        let labels = self.labels();
        let n_int = labels.len() - 1;
        for (ci, class) in MapClass::ELEMENTS.into_iter().enumerate() {
            for (ii, (label, lo, hi)) in labels.iter().enumerate() {
                let full = ii == n_int;
                let (p_inst, g_inst): (Vec<MapInstance>, Vec<MapInstance>) = if full {
                    (
                        pred.map.of_class(class).cloned().collect(),
                        gt.map.of_class(class).cloned().collect(),
                    )
                } else {
                    (clip_map(&pred.map, class, *lo, *hi), clip_map(&gt.map, class, *lo, *hi))
                };
                let (inter, union) = if full {
                    pm[ci].overlap(&gm[ci])
                } else {
                    band_overlap(&pm[ci], &gm[ci], &column_band(&self.bev, *lo, *hi, ii + 1 == n_int))
                };
                let step = self.cfg.sample_step;
                let p_pts: Vec<[f64; 2]> = p_inst.iter().flat_map(|i| resample(&i.points, step)).collect();
                let g_pts: Vec<[f64; 2]> = g_inst.iter().flat_map(|i| resample(&i.points, step)).collect();
                let records = match_instances(
                    &p_inst.iter().collect::<Vec<_>>(),
                    &g_inst.iter().collect::<Vec<_>>(),
                    &self.bev,
                    &self.cfg,
                );
                let cell = self.cells.entry((class, ii)).or_default();
                cell.inter += inter;
                cell.union += union;
                if let Some(cd) = chamfer_pred(&p_pts, &g_pts) {
                    cell.cd_pred.push(cd);
                }
                if let Some(cd) = chamfer_sym(&p_pts, &g_pts, self.cfg.cd_cap) {
                    cell.cd_sym.push(cd);
                }
                cell.gt += g_inst.len();
                cell.pred += p_inst.len();
                cell.records.extend(records.iter().cloned());
                self.matches.push(SampleMatches {
                    sample: self.samples,
                    class,
                    interval: label.clone(),
                    records,
                });
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let labels = self.labels();
        let mut rows = Vec::new();
        for class in MapClass::ELEMENTS {
            for (ii, (label, _, _)) in labels.iter().enumerate() {
                let cell = self.cells.get(&(class, ii)).cloned().unwrap_or_default();
                rows.push(ReportRow {
                    class,
                    interval: label.clone(),
                    iou: if cell.union == 0 {
                        1.0
                    } else {
                        cell.inter as f64 / cell.union as f64
                    },
                    cd_pred: mean(&cell.cd_pred),
                    cd_sym: mean(&cell.cd_sym),
                    ap: average_precision(&cell.records, cell.gt),
                    gt_count: cell.gt,
                    pred_count: cell.pred,
                    tp: cell.records.iter().filter(|r| r.is_tp()).count(),
                });
            }
        }
        EvalReport {
            rows,
            matches: self.matches.clone(),
        }
    }
}

/// Single-sample convenience wrapper.
pub fn eval_intervals(pred: &EvalSample, gt: &EvalSample, bev: &BevConfig, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut ev = Evaluator::new(*bev, cfg.clone())?;
    ev.add(pred, gt)?;
    Ok(ev.report())
}
