//! Run configuration and the end-to-end forward pass over one scene
//! directory: depth supervision, stems, the three fusion levels, map heads,
//! losses against the scene labels, and vectorization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bev::BevConfig;
use crate::btf;
use crate::camera::{complete_depth, one_hot_depth_map, project_points, CameraModel, DepthBinning, DepthImage};
use crate::error::{BevError, Result};
use crate::fusion::{
    camera_stem, fusion_forward, lidar_stem, map_heads, rasterize_cloud, FrustumGrid, ModelDims, ModelParams,
    LIDAR_RASTER_CHANNELS,
};
use crate::io;
use crate::losses::{head_losses, HeadOutputs, LossReport, LossTargets, LossWeights};
use crate::map::{MapClass, PolylineMap};
use crate::metrics::EvalConfig;
use crate::planner::DwaConfig;
use crate::synth::SceneFiles;
use crate::tensor::{softmax_lastdim, Tensor};
use crate::vectorize::{vectorize_map, VectorizeConfig};

/// Camera stem downsampling factor.
pub const STEM_STRIDE: usize = 4;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoPaths {
    pub scene_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Parameter bundle; seeded random weights when absent.
    pub params_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub bev: BevConfig,
    pub camera: CameraModel,
    pub bins: DepthBinning,
    pub model: ModelDims,
    pub loss: LossWeights,
    pub vectorize: VectorizeConfig,
    pub eval: EvalConfig,
    pub planner: DwaConfig,
    pub io: IoPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            bev: BevConfig::toy(),
            camera: CameraModel::toy(),
            bins: DepthBinning::default(),
            model: ModelDims::default(),
            loss: LossWeights::default(),
            vectorize: VectorizeConfig::default(),
            eval: EvalConfig::default(),
            planner: DwaConfig::default(),
            io: IoPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.bev.validate()?;
        self.camera.validate()?;
        self.bins.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.vectorize.validate()?;
        self.eval.validate(&self.bev)?;
        self.planner.validate()?;
        let m = &self.model;
        let bad = |msg: String| Err(BevError::Config(msg));
        if m.depth_bins != self.bins.num_bins() {
            return bad(format!("model has {} depth bins, binning has {}", m.depth_bins, self.bins.num_bins()));
        }
        if m.classes != MapClass::ELEMENTS.len() + 1 {
            return bad(format!("{} segmentation classes, expected {}", m.classes, MapClass::ELEMENTS.len() + 1));
        }
        if m.image_channels != 4 || m.lidar_in != LIDAR_RASTER_CHANNELS {
            return bad(format!(
                "input channels image {} / lidar {} must be 4 / {LIDAR_RASTER_CHANNELS}",
                m.image_channels, m.lidar_in
            ));
        }
        let (w, h) = (self.camera.image_w, self.camera.image_h);
        if !w.is_multiple_of(STEM_STRIDE) || !h.is_multiple_of(STEM_STRIDE) {
            return bad(format!("image {h}x{w} not divisible by {STEM_STRIDE}"));
        }
        if !self.bev.rows().is_multiple_of(4) || !self.bev.cols().is_multiple_of(4) {
            return bad(format!("BEV {}x{} not divisible by 4", self.bev.rows(), self.bev.cols()));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => BevError::Config(format!("{}: {e}", path.display())),
            _ => BevError::format(path, e.to_string()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.camera.image_h / STEM_STRIDE, self.camera.image_w / STEM_STRIDE)
    }

    pub fn params(&self) -> Result<ModelParams> {
        let p = match &self.io.params_dir {
            Some(dir) => ModelParams::load_dir(dir)?,
            None => ModelParams::random(self.model, self.seed)?,
        };
        if p.dims != self.model {
            return Err(BevError::Config(format!("parameter bundle dims {:?} differ from config", p.dims)));
        }
        Ok(p)
    }
}

/// Everything a pipeline run produces, in write order.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub tensors: Vec<(&'static str, Tensor)>,
    pub map: PolylineMap,
    pub losses: LossReport,
}

pub mod artifacts {
    pub const MAP: &str = "pred_map.json";
    pub const LOSSES: &str = "loss_report.json";
}

/// Sparse depth as an input channel: depth / `d_max`, 0 where missing.
fn depth_channel(sparse: &DepthImage, bins: &DepthBinning) -> Tensor {
    let scale = 1.0 / bins.d_max as f32;
    Tensor::from_fn(&[sparse.height, sparse.width, 1], |i| {
        let d = sparse.values[i];
        if d > 0.0 {
            d * scale
        } else {
            0.0
        }
    })
}

pub fn run_pipeline(scene: &SceneFiles, cfg: &RunConfig, params: &ModelParams) -> Result<PipelineOutput> {
    cfg.validate()?;
    let cam = &cfg.camera;
    let (ih, iw, ic) = scene.image.dims3()?;
    if (ih, iw, ic) != (cam.image_h, cam.image_w, 3) {
        return Err(BevError::Consistency(format!(
            "scene image {:?} for a {}x{} camera",
            scene.image.shape(),
            cam.image_h,
            cam.image_w
        )));
    }
    let (fh, fw) = cfg.feature_size();

    let sparse = project_points(&scene.cloud, cam)?;
    let dense = complete_depth(&sparse)?;
    let depth_target = one_hot_depth_map(&dense, &cfg.bins, fw, fh)?;
    let input = scene.image.concat_channels(&depth_channel(&sparse, &cfg.bins))?;
    let (features, depth_logits) = camera_stem(&input, params)?;
    let depth_prob = softmax_lastdim(&depth_logits);

    let raster = rasterize_cloud(&scene.cloud, &cfg.bev);
    let lidar = lidar_stem(&raster, params)?;
    let grid = FrustumGrid::new(cam, &cfg.bev, &cfg.bins, fh, fw)?;
    let fwd = fusion_forward(&features, &depth_prob, &lidar, &grid, params)?;
    let (seg_logits, embeddings, dir_logits) = map_heads(&fwd.fused, params)?;
    fwd.fused.ensure_finite("fused BEV")?;

    let heads = HeadOutputs {
        seg_logits,
        embeddings,
        dir_logits,
        depth_logits,
    };
    let targets = LossTargets {
        seg: scene.labels.seg.clone(),
        instance: scene.labels.instance.clone(),
        direction: scene.labels.direction.clone(),
        depth_one_hot: depth_target.clone(),
    };
    let losses = head_losses(&heads, &targets, &cfg.loss)?.report;
    let seg_probs = softmax_lastdim(&heads.seg_logits);
    let map = vectorize_map(&seg_probs, &heads.embeddings, &heads.dir_logits, &cfg.bev, &cfg.vectorize)?;

    let HeadOutputs {
        seg_logits,
        embeddings,
        dir_logits,
        depth_logits,
    } = heads;
    let tensors = vec![
        ("sparse_depth", sparse.to_tensor()),
        ("dense_depth", dense.to_tensor()),
        ("depth_target", depth_target),
        ("image_features", features),
        ("depth_logits", depth_logits),
        ("depth_prob", depth_prob),
        ("lidar_raster", raster),
        ("lidar_bev", lidar),
        ("camera_bev", fwd.camera_bev),
        ("bottleneck", fwd.encoded.bottleneck),
        ("attended", fwd.attended.output),
        ("predicted_lidar_bev", fwd.decoded.output),
        ("flow", fwd.flow.flow.delta),
        ("aligned_camera_bev", fwd.aligned),
        ("fused_bev", fwd.fused),
        ("seg_logits", seg_logits),
        ("seg_probs", seg_probs),
        ("embeddings", embeddings),
        ("dir_logits", dir_logits),
    ];
    Ok(PipelineOutput { tensors, map, losses })
}

impl PipelineOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, t) in &self.tensors {
            btf::write(&dir.join(format!("{name}.btf")), t)?;
        }
        self.map.write(&dir.join(artifacts::MAP))?;
        io::write_json(&dir.join(artifacts::LOSSES), &self.losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scene, SceneSpec};

    fn scene_files(cfg: &RunConfig) -> SceneFiles {
        let dir = tempfile::tempdir().unwrap();
        gen_scene(&SceneSpec::default(), &cfg.bev, &cfg.camera).unwrap().write(dir.path()).unwrap();
        SceneFiles::read(dir.path()).unwrap()
    }

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"loss": {"lambda": 1}}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(partial.seed, 7);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"bev": {"extent": 1}}"#).unwrap();
        assert_eq!(RunConfig::read(&path).unwrap_err().exit_code(), 3);
        std::fs::write(&path, "{").unwrap();
        assert_eq!(RunConfig::read(&path).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn mismatched_bins_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.bins.d_max = 50.0;
        assert!(matches!(cfg.validate(), Err(BevError::Config(_))));
    }

    #[test]
    fn zero_noise_scene_runs_with_finite_losses() {
        let cfg = RunConfig::default();
        let scene = scene_files(&cfg);
        let out = run_pipeline(&scene, &cfg, &cfg.params().unwrap()).unwrap();
        let l = &out.losses;
        for v in [l.depth, l.seg, l.instance, l.direction, l.total] {
            assert!(v.is_finite() && v >= 0.0, "{l:?}");
        }
        let names: Vec<_> = out.tensors.iter().map(|(n, _)| *n).collect();
        assert!(names.contains(&"fused_bev") && names.contains(&"flow"));
        let fused = &out.tensors.iter().find(|(n, _)| *n == "fused_bev").unwrap().1;
        assert_eq!(&fused.shape()[..2], &[cfg.bev.rows(), cfg.bev.cols()]);
    }

    #[test]
    fn rerun_writes_identical_bytes() {
        let cfg = RunConfig::default();
        let scene = scene_files(&cfg);
        let params = cfg.params().unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_pipeline(&scene, &cfg, &params).unwrap().write(a.path()).unwrap();
        run_pipeline(&scene, &cfg, &params).unwrap().write(b.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 21);
        for n in names {
            assert_eq!(
                std::fs::read(a.path().join(&n)).unwrap(),
                std::fs::read(b.path().join(&n)).unwrap(),
                "{n:?}"
            );
        }
    }
}
