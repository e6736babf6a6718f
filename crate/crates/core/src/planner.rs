//! Dynamic Window Approach planning over a costmap built from a polyline
//! map. The vehicle is a point; boundaries are dilated by one cell.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bev::{BevConfig, Mask};
use crate::error::{BevError, Result};
use crate::map::{rasterize_class, MapClass, PolylineMap};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Drivable,
    Boundary,
    Offroad,
    /// Beyond the extent covered by the map.
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMap {
    pub bev: BevConfig,
    pub cells: Vec<CellType>,
    /// Meters to the nearest non-drivable cell (or grid edge), capped.
    pub clearance: Vec<f64>,
}

impl CostMap {
    pub fn get(&self, r: usize, c: usize) -> CellType {
        self.cells[r * self.bev.cols() + c]
    }

    /// Cell type at a metric point; outside the grid is unknown.
    pub fn at(&self, x: f64, y: f64) -> CellType {
        match self.bev.cell_of(x, y) {
            Some((r, c)) => self.get(r, c),
            None => CellType::Unknown,
        }
    }

    pub fn drivable(&self, x: f64, y: f64) -> bool {
        self.at(x, y) == CellType::Drivable
    }

    pub fn clearance_at(&self, x: f64, y: f64) -> f64 {
        self.bev
            .cell_of(x, y)
            .map_or(0.0, |(r, c)| self.clearance[r * self.bev.cols() + c])
    }

    pub fn count(&self, t: CellType) -> usize {
        self.cells.iter().filter(|&&c| c == t).count()
    }

    pub fn drivable_mask(&self) -> Mask {
        let mut m = Mask::for_grid(&self.bev);
        for (i, &c) in self.cells.iter().enumerate() {
            m.data[i] = c == CellType::Drivable;
        }
        m
    }
}

/// Clearance saturates here; farther obstacles do not change the cost.
pub const CLEARANCE_CAP: f64 = 1.0;

fn clearance_field(bev: &BevConfig, cells: &[CellType]) -> Vec<f64> {
    let (rows, cols) = (bev.rows() as i64, bev.cols() as i64);
    let res = bev.resolution;
    let reach = (CLEARANCE_CAP / res).ceil() as i64 + 1;
    par::map_range(cells.len(), |i| {
        if cells[i] != CellType::Drivable {
            return 0.0;
        }
        let (r, c) = ((i as i64) / cols, (i as i64) % cols);
        let mut best = CLEARANCE_CAP;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (rr, cc) = (r + dr, c + dc);
                let blocked = rr < 0
                    || cc < 0
                    || rr >= rows
                    || cc >= cols
                    || cells[(rr * cols + cc) as usize] != CellType::Drivable;
                if blocked {
                    // Distance to the edge of the blocking cell.
                    let d = ((dr.abs() as f64 - 0.5).max(0.0)).hypot((dc.abs() as f64 - 0.5).max(0.0)) * res;
                    best = best.min(d);
                }
            }
        }
        best
    })
}

/// Rasterizes boundaries (dilated by one cell), marks everything beyond the
/// farthest mapped point as unknown, and flood-fills the drivable region
/// from the vehicle cell through cells enclosed by boundaries along their
/// row or column.
pub fn build_costmap(map: &PolylineMap, bev: &BevConfig) -> Result<CostMap> {
    bev.validate()?;
    if map.count(MapClass::Boundary) == 0 {
        return Err(BevError::Costmap("map has no boundary instances".into()));
    }
    let (rows, cols) = (bev.rows(), bev.cols());
    let boundary = rasterize_class(map, MapClass::Boundary, bev).dilate(1);
    let x_extent = map
        .instances
        .iter()
        .filter(|i| i.class != MapClass::Path)
        .flat_map(|i| i.points.iter().map(|p| p[0]))
        .fold(f64::NEG_INFINITY, f64::max)
        + bev.resolution;
    let mut cells = vec![CellType::Offroad; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if boundary.get(r, c) {
                cells[i] = CellType::Boundary;
            } else if bev.center(r, c).0 > x_extent {
                cells[i] = CellType::Unknown;
            }
        }
    }
    let enclosed = |r: usize, c: usize| {
        let col_hit = (0..r).any(|rr| boundary.get(rr, c)) && (r + 1..rows).any(|rr| boundary.get(rr, c));
        let row_hit = (0..c).any(|cc| boundary.get(r, cc)) && (c + 1..cols).any(|cc| boundary.get(r, cc));
        col_hit || row_hit
    };
    if let Some((r0, c0)) = bev.cell_of(0.0_f64.max(bev.x_min), 0.0) {
        let mut queue = VecDeque::new();
        if cells[r0 * cols + c0] == CellType::Offroad && enclosed(r0, c0) {
            cells[r0 * cols + c0] = CellType::Drivable;
            queue.push_back((r0, c0));
        }
        while let Some((r, c)) = queue.pop_front() {
            let nbrs = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            for (rr, cc) in nbrs {
                if rr >= rows || cc >= cols {
                    continue;
                }
                let j = rr * cols + cc;
                if cells[j] == CellType::Offroad && enclosed(rr, cc) {
                    cells[j] = CellType::Drivable;
                    queue.push_back((rr, cc));
                }
            }
        }
    }
    let clearance = clearance_field(bev, &cells);
    Ok(CostMap {
        bev: *bev,
        cells,
        clearance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    #[serde(default)]
    pub v: f64,
    #[serde(default)]
    pub omega: f64,
}

impl RobotState {
    pub fn at(x: f64, y: f64, heading: f64) -> Self {
        RobotState {
            x,
            y,
            heading,
            v: 0.0,
            omega: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DwaConfig {
    pub v_max: f64,
    pub omega_max: f64,
    pub accel: f64,
    pub yaw_accel: f64,
    pub dt: f64,
    pub horizon: f64,
    pub v_samples: usize,
    pub omega_samples: usize,
    pub w_heading: f64,
    pub w_clearance: f64,
    pub w_velocity: f64,
    pub goal_tolerance: f64,
    pub max_steps: usize,
    /// A plan is stuck when the goal distance shrinks by less than
    /// `min_progress` meters over `progress_window` steps.
    pub progress_window: usize,
    pub min_progress: f64,
}

impl Default for DwaConfig {
    fn default() -> Self {
        DwaConfig {
            v_max: 8.0,
            omega_max: 1.0,
            accel: 4.0,
            yaw_accel: 3.0,
            dt: 0.2,
            horizon: 2.0,
            v_samples: 11,
            omega_samples: 21,
            w_heading: 1.0,
            w_clearance: 0.4,
            w_velocity: 0.2,
            goal_tolerance: 1.5,
            max_steps: 500,
            progress_window: 15,
            min_progress: 0.1,
        }
    }
}

impl DwaConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.v_max,
            self.omega_max,
            self.accel,
            self.yaw_accel,
            self.dt,
            self.horizon,
            self.goal_tolerance,
        ];
        let weights = [self.w_heading, self.w_clearance, self.w_velocity, self.min_progress];
        if pos.iter().any(|v| !(*v > 0.0))
            || weights.iter().any(|v| !(*v >= 0.0))
            || self.horizon < self.dt
            || self.v_samples < 2
            || self.omega_samples < 2
            || self.max_steps == 0
            || self.progress_window == 0
        {
            return Err(BevError::Config(format!("invalid DWA config {self:?}")));
        }
        Ok(())
    }

    /// Same sampler with `factor` times the samples per axis.
    pub fn densified(&self, factor: usize) -> Self {
        DwaConfig {
            v_samples: (self.v_samples - 1) * factor + 1,
            omega_samples: (self.omega_samples - 1) * factor + 1,
            ..*self
        }
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Advances the unicycle by `dt` with fixed `(v, ω)`, returning the poses
/// visited at sub-steps no longer than `max_step` meters.
fn integrate(s: RobotState, v: f64, omega: f64, dt: f64, max_step: f64) -> Vec<RobotState> {
    let n = ((v * dt / max_step).ceil() as usize).max(1);
    let h = dt / n as f64;
    let mut cur = RobotState { v, omega, ..s };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if omega.abs() < 1e-9 {
            cur.x += v * h * cur.heading.cos();
            cur.y += v * h * cur.heading.sin();
        } else {
            let th2 = cur.heading + omega * h;
            cur.x += v / omega * (th2.sin() - cur.heading.sin());
            cur.y -= v / omega * (th2.cos() - cur.heading.cos());
            cur.heading = th2;
        }
        out.push(cur);
    }
    if let Some(last) = out.last_mut() {
        last.heading = wrap(last.heading);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArcEval {
    pub v: f64,
    pub omega: f64,
    pub index: usize,
    pub feasible: bool,
    pub cost: f64,
    pub end: RobotState,
}

fn samples(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let k = (n - 1) as f64 / 2.0;
    (0..n).map(|i| mid + (i as f64 - k) / k * half).collect()
}

/// Simulates every `(v, ω)` sample of the dynamic window.
pub fn dwa_candidates(state: &RobotState, goal: [f64; 2], cm: &CostMap, cfg: &DwaConfig) -> Vec<ArcEval> {
    let v_lo = (state.v - cfg.accel * cfg.dt).max(0.0);
    let v_hi = (state.v + cfg.accel * cfg.dt).min(cfg.v_max);
    let w_lo = (state.omega - cfg.yaw_accel * cfg.dt).max(-cfg.omega_max);
    let w_hi = (state.omega + cfg.yaw_accel * cfg.dt).min(cfg.omega_max);
    let vs = samples(v_lo, v_hi, cfg.v_samples);
    let ws = samples(w_lo, w_hi, cfg.omega_samples);
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let max_step = 0.5 * cm.bev.resolution;
    par::map_range(vs.len() * ws.len(), |index| {
        let (v, omega) = (vs[index / ws.len()], ws[index % ws.len()]);
        let mut s = *state;
        let mut feasible = true;
        let mut clearance = CLEARANCE_CAP;
        let mut reached = false;
        'outer: for _ in 0..steps {
            for p in integrate(s, v, omega, cfg.dt, max_step) {
                if !cm.drivable(p.x, p.y) {
                    feasible = false;
                    break 'outer;
                }
                clearance = clearance.min(cm.clearance_at(p.x, p.y));
                reached |= (p.x - goal[0]).hypot(p.y - goal[1]) <= cfg.goal_tolerance;
                s = p;
            }
        }
        let bearing = (goal[1] - s.y).atan2(goal[0] - s.x);
        let heading_cost = if reached { 0.0 } else { wrap(bearing - s.heading).abs() / PI };
        let cost = cfg.w_heading * heading_cost
            + cfg.w_clearance * (1.0 - clearance / CLEARANCE_CAP)
            + cfg.w_velocity * (1.0 - v / cfg.v_max);
        ArcEval {
            v,
            omega,
            index,
            feasible,
            cost,
            end: s,
        }
    })
}

const COST_TIE: f64 = 1e-12;

/// Lowest-cost feasible command; ties go to lower `|ω|`, then lower index.
pub fn dwa_step(state: &RobotState, goal: [f64; 2], cm: &CostMap, cfg: &DwaConfig) -> Result<(f64, f64)> {
    let mut best: Option<&ArcEval> = None;
    let cands = dwa_candidates(state, goal, cm, cfg);
    for a in cands.iter().filter(|a| a.feasible) {
        let better = match best {
            None => true,
            Some(b) => {
                a.cost < b.cost - COST_TIE
                    || ((a.cost - b.cost).abs() <= COST_TIE && a.omega.abs() < b.omega.abs())
            }
        };
        if better {
            best = Some(a);
        }
    }
    best.map(|a| (a.v, a.omega))
        .ok_or_else(|| BevError::Stuck(format!("no feasible arc from ({:.2}, {:.2})", state.x, state.y)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    SidewalkHit,
    Stuck,
    Timeout,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Success => "success",
            Verdict::SidewalkHit => "sidewalk_hit",
            Verdict::Stuck => "stuck",
            Verdict::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub verdict: Verdict,
    pub steps: usize,
    /// Executed positions, start included.
    pub path: Vec<[f64; 2]>,
}

/// Runs DWA on `cm` until the goal is reached or a failure occurs. When
/// `truth` is given the executed path is also checked against it.
pub fn plan_path(
    start: RobotState,
    goal: [f64; 2],
    cm: &CostMap,
    truth: Option<&CostMap>,
    cfg: &DwaConfig,
) -> PlanResult {
    let check = truth.unwrap_or(cm);
    let mut s = start;
    let mut path = vec![[s.x, s.y]];
    let mut dists = vec![(s.x - goal[0]).hypot(s.y - goal[1])];
    let done = |verdict, steps, path| PlanResult { verdict, steps, path };
    if !check.drivable(s.x, s.y) {
        return done(Verdict::SidewalkHit, 0, path);
    }
    for step in 1..=cfg.max_steps {
        let Ok((v, omega)) = dwa_step(&s, goal, cm, cfg) else {
            return done(Verdict::Stuck, step - 1, path);
        };
        for p in integrate(s, v, omega, cfg.dt, 0.5 * cm.bev.resolution) {
            if !check.drivable(p.x, p.y) {
                path.push([p.x, p.y]);
                return done(Verdict::SidewalkHit, step, path);
            }
            s = p;
            if (s.x - goal[0]).hypot(s.y - goal[1]) <= cfg.goal_tolerance {
                path.push([s.x, s.y]);
                return done(Verdict::Success, step, path);
            }
        }
        path.push([s.x, s.y]);
        dists.push((s.x - goal[0]).hypot(s.y - goal[1]));
        if dists.len() > cfg.progress_window {
            let before = dists[dists.len() - 1 - cfg.progress_window];
            if before - dists[dists.len() - 1] < cfg.min_progress {
                return done(Verdict::Stuck, step, path);
            }
        }
    }
    done(Verdict::Timeout, cfg.max_steps, path)
}

/// One planning query.
#[derive(Clone, Debug)]
pub struct PlanScene {
    pub costmap: CostMap,
    pub truth: Option<CostMap>,
    pub start: RobotState,
    pub goal: [f64; 2],
}

/// Fraction of successful plans, with per-scene results in input order.
pub fn success_rate(scenes: &[PlanScene], cfg: &DwaConfig) -> Result<(f64, Vec<PlanResult>)> {
    if scenes.is_empty() {
        return Err(BevError::Config("no planning scenes".into()));
    }
    cfg.validate()?;
    let results = par::map_slice(scenes, |s| plan_path(s.start, s.goal, &s.costmap, s.truth.as_ref(), cfg));
    let ok = results.iter().filter(|r| r.verdict == Verdict::Success).count();
    Ok((ok as f64 / scenes.len() as f64, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::MapInstance;

    fn corridor(half_width: f64, length: f64) -> PolylineMap {
        let b = |y: f64| MapInstance {
            class: MapClass::Boundary,
            confidence: 1.0,
            points: vec![[0.0, y], [length, y]],
        };
        PolylineMap {
            instances: vec![b(-half_width), b(half_width)],
        }
    }

    #[test]
    fn straight_corridor_is_rectangular() {
        let bev = BevConfig::toy();
        let cm = build_costmap(&corridor(3.5, 89.9), &bev).unwrap();
        let (r0, _) = bev.cell_of(0.0, 0.0).unwrap();
        let drivable_cols: Vec<usize> =
            (0..bev.cols()).map(|c| (0..bev.rows()).filter(|&r| cm.get(r, c) == CellType::Drivable).count()).collect();
        assert!(drivable_cols.iter().all(|&n| n == drivable_cols[0] && n > 4));
        assert_eq!(cm.get(r0, 5), CellType::Drivable);
        assert_eq!(cm.get(0, 5), CellType::Offroad);
    }

    #[test]
    fn truncated_map_has_unknown_far_field() {
        let bev = BevConfig::toy();
        let cm = build_costmap(&corridor(3.5, 30.0), &bev).unwrap();
        assert_eq!(cm.at(50.0, 0.0), CellType::Unknown);
        assert!(cm.drivable(20.0, 0.0));
    }

    #[test]
    fn empty_map_is_an_error() {
        assert!(matches!(
            build_costmap(&PolylineMap::default(), &BevConfig::toy()),
            Err(BevError::Costmap(_))
        ));
    }

    #[test]
    fn omega_samples_contain_zero() {
        let s = samples(-0.6, 0.6, 21);
        assert_eq!(s[10], 0.0);
        assert_eq!(s[0], -0.6);
        assert_eq!(s[20], 0.6);
    }

    #[test]
    fn goal_ahead_goes_straight() {
        let bev = BevConfig::toy();
        let cm = build_costmap(&corridor(5.0, 89.9), &bev).unwrap();
        let (v, w) = dwa_step(&RobotState::at(2.0, 0.0, 0.0), [40.0, 0.0], &cm, &DwaConfig::default()).unwrap();
        assert_eq!(w, 0.0);
        assert!(v > 0.0);
    }

    #[test]
    fn goal_to_the_left_turns_left() {
        let bev = BevConfig::toy();
        let open = PolylineMap {
            instances: vec![
                MapInstance {
                    class: MapClass::Boundary,
                    confidence: 1.0,
                    points: vec![[0.0, -14.9], [89.9, -14.9]],
                },
                MapInstance {
                    class: MapClass::Boundary,
                    confidence: 1.0,
                    points: vec![[0.0, 14.9], [89.9, 14.9]],
                },
            ],
        };
        let cm = build_costmap(&open, &bev).unwrap();
        let (_, w) = dwa_step(&RobotState::at(30.0, 0.0, 0.0), [30.0, 10.0], &cm, &DwaConfig::default()).unwrap();
        assert!(w > 0.0);
    }

    #[test]
    fn short_goal_succeeds() {
        let bev = BevConfig::toy();
        let cm = build_costmap(&corridor(5.0, 89.9), &bev).unwrap();
        let r = plan_path(RobotState::at(2.0, 0.0, 0.0), [4.0, 0.0], &cm, None, &DwaConfig::default());
        assert_eq!(r.verdict, Verdict::Success);
        assert!(r.steps <= 5);
    }

    #[test]
    fn goal_behind_boundary_fails() {
        let bev = BevConfig::toy();
        let cm = build_costmap(&corridor(3.5, 89.9), &bev).unwrap();
        let r = plan_path(RobotState::at(2.0, 0.0, 0.0), [40.0, 10.0], &cm, None, &DwaConfig::default());
        assert!(matches!(r.verdict, Verdict::Stuck | Verdict::SidewalkHit), "{:?}", r.verdict);
    }

    #[test]
    fn truncated_map_cannot_reach_far_goal() {
        let bev = BevConfig::toy();
        let full = build_costmap(&corridor(3.5, 89.9), &bev).unwrap();
        let short = build_costmap(&corridor(3.5, 30.0), &bev).unwrap();
        let start = RobotState::at(2.0, 0.0, 0.0);
        let cfg = DwaConfig::default();
        assert_eq!(plan_path(start, [75.0, 0.0], &full, None, &cfg).verdict, Verdict::Success);
        assert_ne!(plan_path(start, [75.0, 0.0], &short, Some(&full), &cfg).verdict, Verdict::Success);
    }
}
