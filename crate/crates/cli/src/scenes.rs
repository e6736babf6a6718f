//! Planning scenes files: a JSON list of
//! `{map_file, truth_file?, goal: [x, y], start: {x, y, heading}}`.
//! Relative paths resolve against the scenes file's directory.

use std::path::{Path, PathBuf};

use bevkit::bev::BevConfig;
use bevkit::io;
use bevkit::planner::RobotState;
use bevkit::synth::{planning_suite, truncate_map};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Forward range kept by the truncated planning maps, meters.
pub const TRUNCATE_AT: f64 = 30.0;

pub const FULL_SCENES: &str = "scenes_full.json";
pub const TRUNCATED_SCENES: &str = "scenes_truncated.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub map_file: PathBuf,
    /// Map the executed path is checked against; the planning map if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_file: Option<PathBuf>,
    pub goal: [f64; 2],
    pub start: StartPose,
}

impl PlanEntry {
    pub fn start_state(&self) -> RobotState {
        RobotState::at(self.start.x, self.start.y, self.start.heading)
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_scenes(path: &Path) -> CliResult<Vec<PlanEntry>> {
    let entries: Vec<PlanEntry> = io::read_json(path)?;
    if entries.is_empty() {
        return Err(CliError::Usage(format!("{} lists no scenes", path.display())));
    }
    Ok(entries)
}

/// Writes `n` generated roads as full and truncated maps plus the two
/// paired scenes files.
pub fn write_planning_suite(dir: &Path, n: usize, seed: u64, bev: &BevConfig) -> CliResult<()> {
    let cases = planning_suite(n, seed, bev)?;
    let mut full = Vec::with_capacity(n);
    let mut truncated = Vec::with_capacity(n);
    for (i, c) in cases.iter().enumerate() {
        let gt = PathBuf::from(format!("maps/road_{i:03}.json"));
        let cut = PathBuf::from(format!("maps/road_{i:03}_truncated.json"));
        c.gt_map.write(&dir.join(&gt))?;
        truncate_map(&c.gt_map, TRUNCATE_AT).write(&dir.join(&cut))?;
        let start = StartPose {
            x: c.start.x,
            y: c.start.y,
            heading: c.start.heading,
        };
        full.push(PlanEntry {
            map_file: gt.clone(),
            truth_file: None,
            goal: c.goal,
            start,
        });
        truncated.push(PlanEntry {
            map_file: cut,
            truth_file: Some(gt),
            goal: c.goal,
            start,
        });
    }
    io::write_json(&dir.join(FULL_SCENES), &full)?;
    io::write_json(&dir.join(TRUNCATED_SCENES), &truncated)?;
    Ok(())
}
