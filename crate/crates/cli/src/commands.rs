use std::path::{Path, PathBuf};

use bevkit::gradcheck::{run_suite, OpReport};
use bevkit::io;
use bevkit::map::{MapClass, MapInstance, PolylineMap};
use bevkit::metrics::{eval_intervals, EvalSample, MatchThresholds};
use bevkit::pipeline::{run_pipeline, RunConfig};
use bevkit::planner::{build_costmap, success_rate, PlanScene};
use bevkit::synth::{degrade_prediction, gen_scene, random_spec, DegradeModel, SceneFiles, SceneSpec};
use bevkit::tensor::softmax_lastdim;
use bevkit::vectorize::vectorize_map;
use bevkit::{btf, BevError};
use clap::Args;
use serde::Serialize;

use crate::render::{map_to_ppm, raster_to_pgm};
use crate::scenes::{read_scenes, resolve, write_planning_suite};
use crate::{CliError, CliResult, Common};

pub const DEGRADED_MAP: &str = "degraded_map.json";
pub const GRADCHECK_REPORT: &str = "gradcheck.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const VERDICTS: &str = "verdicts.csv";
pub const PLAN_SUMMARY: &str = "summary.json";

fn required(arg: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    arg.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (or set io.{name}_dir in the config)")))
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of seeded random scenes, written to `scene_NNN/`.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Scene spec JSON; generates exactly this scene instead of random ones.
    #[arg(long, conflicts_with = "count")]
    pub spec: Option<PathBuf>,
    /// Degradation model JSON; also writes a vectorized degraded map per scene.
    #[arg(long)]
    pub degrade: Option<PathBuf>,
    /// Also write a paired planning suite of this many roads to `planning/`.
    #[arg(long)]
    pub planning_suite: Option<usize>,
}

pub fn gen_synthetic(a: &GenArgs) -> CliResult<()> {
    let cfg = a.common.load()?;
    let specs: Vec<SceneSpec> = match &a.spec {
        Some(p) => vec![io::read_json(p)?],
        None => (0..a.count as u64).map(|i| random_spec(cfg.seed.wrapping_add(i))).collect(),
    };
    if specs.is_empty() && a.planning_suite.is_none() {
        return Err(CliError::Usage("nothing to generate".into()));
    }
    let degrade: Option<DegradeModel> = a.degrade.as_deref().map(io::read_json).transpose()?;
    for (i, spec) in specs.iter().enumerate() {
        let dir = a.out.join(format!("scene_{i:03}"));
        let scene = gen_scene(spec, &cfg.bev, &cfg.camera)?;
        scene.write(&dir)?;
        if let Some(model) = &degrade {
            let heads = degrade_prediction(&scene.labels, model, &cfg.bev, spec.seed)?;
            let map = vectorize_map(
                &softmax_lastdim(&heads.seg_logits),
                &heads.embeddings,
                &heads.dir_logits,
                &cfg.bev,
                &cfg.vectorize,
            )?;
            map.write(&dir.join(DEGRADED_MAP))?;
        }
        println!("scene {} -> {}", i, dir.display());
    }
    if let Some(n) = a.planning_suite {
        if n == 0 {
            return Err(CliError::Usage("--planning-suite needs at least one road".into()));
        }
        let dir = a.out.join("planning");
        write_planning_suite(&dir, n, cfg.seed, &cfg.bev)?;
        println!("planning suite of {n} roads -> {}", dir.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scene directory written by `gen-synthetic`.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run the finite-difference gradient suite first.
    #[arg(long)]
    pub check_grads: bool,
}

fn grads(seed: u64, out: Option<&Path>) -> CliResult<Vec<OpReport>> {
    let reports = run_suite(seed)?;
    for r in &reports {
        println!("{}", r.line());
    }
    if let Some(dir) = out {
        io::write_json(&dir.join(GRADCHECK_REPORT), &reports)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if !failed.is_empty() {
        return Err(BevError::Oracle(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(reports)
}

pub fn pipeline(a: &PipelineArgs) -> CliResult<()> {
    let cfg = a.common.load()?;
    let scene_dir = required(a.scene.clone(), &cfg.io.scene_dir, "scene")?;
    let out = required(a.out.clone(), &cfg.io.out_dir, "out")?;
    if a.check_grads {
        grads(cfg.seed, Some(&out))?;
    }
    let scene = SceneFiles::read(&scene_dir)?;
    let params = cfg.params()?;
    let result = run_pipeline(&scene, &cfg, &params)?;
    result.write(&out)?;
    let l = &result.losses;
    println!(
        "losses depth={:.6} seg={:.6} instance={:.6} direction={:.6} total={:.6}",
        l.depth, l.seg, l.instance, l.direction, l.total
    );
    println!("{} instances -> {}", result.map.instances.len(), out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Matching gate, e.g. `cd=1.0,iou=0.1`.
    #[arg(long)]
    pub thresholds: Option<MatchThresholds>,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let mut cfg = a.common.load()?;
    if let Some(t) = a.thresholds {
        cfg.eval.thresholds = t;
    }
    let pred = PolylineMap::read(&a.pred)?;
    let gt = PolylineMap::read(&a.gt)?;
    for (path, map) in [(&a.pred, &pred), (&a.gt, &gt)] {
        let outside = map.instances.iter().flat_map(|i| &i.points).any(|p| !cfg.bev.contains(p[0], p[1]));
        if outside {
            return Err(BevError::Consistency(format!("{} extends outside the BEV extent", path.display())).into());
        }
    }
    let report = eval_intervals(&EvalSample::from_map(pred), &EvalSample::from_map(gt), &cfg.bev, &cfg.eval)?;
    let csv = report.to_csv()?;
    io::write_atomic(&a.out.join(EVAL_CSV), csv.as_bytes())?;
    io::write_json(&a.out.join(EVAL_JSON), &report)?;
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scenes JSON: list of {map_file, truth_file?, goal, start}.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Plan every scene on this map instead of its `map_file`.
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct PlanSummary {
    scenes: usize,
    successes: usize,
    success_rate: f64,
}

pub fn plan(a: &PlanArgs) -> CliResult<()> {
    let cfg = a.common.load()?;
    let entries = read_scenes(&a.scenes)?;
    let base = a.scenes.parent().unwrap_or(Path::new("."));
    let mut scenes = Vec::with_capacity(entries.len());
    for e in &entries {
        let map_path = a.map.clone().unwrap_or_else(|| resolve(base, &e.map_file));
        let costmap = build_costmap(&PolylineMap::read(&map_path)?, &cfg.bev)?;
        let truth = match &e.truth_file {
            Some(t) => Some(build_costmap(&PolylineMap::read(&resolve(base, t))?, &cfg.bev)?),
            None => None,
        };
        scenes.push(PlanScene {
            costmap,
            truth,
            start: e.start_state(),
            goal: e.goal,
        });
    }
    let (rate, results) = success_rate(&scenes, &cfg.planner)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| BevError::Consistency(format!("csv: {e}"));
    w.write_record(["scene", "verdict", "steps", "path_file"]).map_err(csv_err)?;
    for (i, r) in results.iter().enumerate() {
        let rel = format!("paths/scene_{i:03}.json");
        let path = PolylineMap {
            instances: vec![MapInstance {
                class: MapClass::Path,
                confidence: 1.0,
                points: r.path.clone(),
            }],
        };
        path.write(&a.out.join(&rel))?;
        w.write_record([i.to_string(), r.verdict.name().to_string(), r.steps.to_string(), rel])
            .map_err(csv_err)?;
        println!("scene {i:03} {} steps={}", r.verdict.name(), r.steps);
    }
    let bytes = w.into_inner().map_err(|e| BevError::Consistency(format!("csv: {e}")))?;
    io::write_atomic(&a.out.join(VERDICTS), &bytes)?;
    let successes = results.iter().filter(|r| r.verdict.name() == "success").count();
    io::write_json(
        &a.out.join(PLAN_SUMMARY),
        &PlanSummary {
            scenes: results.len(),
            successes,
            success_rate: rate,
        },
    )?;
    println!("success_rate {rate:.4} ({successes}/{})", results.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    /// `.btf` raster or PolylineMap `.json`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Channel of a 3-D raster to render.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
}

pub fn render(a: &RenderArgs) -> CliResult<()> {
    let cfg = a.common.load()?;
    let bytes = match a.input.extension().and_then(|e| e.to_str()) {
        Some("btf") => raster_to_pgm(&btf::read(&a.input)?, a.channel)?,
        Some("json") => map_to_ppm(&PolylineMap::read(&a.input)?, &cfg.bev)?,
        _ => {
            return Err(CliError::Usage(format!(
                "{}: expected a .btf raster or a .json map",
                a.input.display()
            )))
        }
    };
    io::write_atomic(&a.out, &bytes)?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct CheckGradsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory for the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn check_grads(a: &CheckGradsArgs) -> CliResult<()> {
    let cfg: RunConfig = a.common.load()?;
    grads(cfg.seed, a.out.as_deref())?;
    Ok(())
}
