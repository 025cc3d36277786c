//! Config-driven experiment runner: phantom → paired projections → ground
//! truth and simulated segmentation → consistency check per threshold →
//! metrics, with every intermediate written to the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::CCConfig;
use crate::error::{Error, Result};
use crate::geometry::{ProjectionGeometry, VoxelGrid};
use crate::io::{self, Tag};
use crate::metrics::{evaluate_grid, run_grid, ExperimentTable, GridRun};
use crate::phantom::{attenuation, metal_mask, phantom, split_metal, voxelize, Scene};
use crate::projector::{forward_project, MaskStack, MaskVolume, ProjectionStack, Volume};
use crate::segsim::{gt_masks, intensities, lambert_beer, simulate_soft_masks, PerturbationConfig, SoftMaskStack};

/// A catalog key or an inline scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneSpec {
    Catalog(String),
    Inline(Scene),
}

impl SceneSpec {
    pub fn resolve(&self) -> Result<Scene> {
        match self {
            SceneSpec::Catalog(k) => phantom(k),
            SceneSpec::Inline(s) => Ok(s.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    /// 96² detector, 100 views, 64³ / 96³ grids.
    #[default]
    Desk,
    /// 976² detector, 400 views, 512³ / 920³ grids.
    Paper,
}

impl Profile {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Profile::Desk => ExperimentConfig::default(),
            Profile::Paper => ExperimentConfig {
                geometry: ProjectionGeometry::paper(),
                diagnostic_grid: VoxelGrid::paper_diagnostic(),
                cc_grid: VoxelGrid::paper_cc(),
                gt_delta: default_gt_delta(&VoxelGrid::paper_cc()),
                ..ExperimentConfig::default()
            },
        }
    }
}

/// Metal attenuation over the default re-projection length: whatever the
/// metal displaces, a ground-truth pixel then has more than half a voxel of
/// metal on its ray.
pub fn default_gt_delta(grid: &VoxelGrid) -> f64 {
    attenuation::METAL * grid.voxel_size / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: ProjectionGeometry,
    pub diagnostic_grid: VoxelGrid,
    pub cc_grid: VoxelGrid,
    /// Grid the scene is voxelized on for simulation; `cc_grid` when absent.
    #[serde(default)]
    pub simulation_grid: Option<VoxelGrid>,
    pub scene: SceneSpec,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    /// Binarization thresholds, percent.
    pub thresholds: Vec<f64>,
    pub tau: f64,
    /// Seeds the segmentation simulator; overrides `perturbation.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Line-integral increase (dimensionless) marking a ground-truth pixel.
    pub gt_delta: f64,
    /// When set, projections go through intensities and back via
    /// Lambert-Beer with this unattenuated intensity.
    #[serde(default)]
    pub i0: Option<f64>,
    /// `cc_grid.voxel_size / 2` when absent.
    #[serde(default)]
    pub reproject_eps: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cc_grid = VoxelGrid::desk_cc();
        Self {
            geometry: ProjectionGeometry::desk(),
            diagnostic_grid: VoxelGrid::desk_diagnostic(),
            cc_grid,
            simulation_grid: None,
            scene: SceneSpec::Catalog("inside_fov".into()),
            perturbation: PerturbationConfig::default(),
            thresholds: vec![5.0, 30.0, 55.0],
            tau: CCConfig::DEFAULT_TAU,
            seed: 0,
            output_dir: PathBuf::from("out"),
            gt_delta: default_gt_delta(&cc_grid),
            i0: Some(1.0e5),
            reproject_eps: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn simulation_grid(&self) -> VoxelGrid {
        self.simulation_grid.unwrap_or(self.cc_grid)
    }

    pub fn cc_config(&self) -> CCConfig {
        CCConfig {
            reproject_eps: self.reproject_eps.unwrap_or(self.cc_grid.voxel_size / 2.0),
            ..CCConfig::new(self.cc_grid).with_tau(self.tau)
        }
    }

    pub fn effective_perturbation(&self) -> PerturbationConfig {
        PerturbationConfig {
            seed: self.seed,
            ..self.perturbation.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.diagnostic_grid.validate()?;
        self.simulation_grid().validate()?;
        self.cc_config().validate_against(&self.diagnostic_grid)?;
        self.scene.resolve()?.validate()?;
        self.effective_perturbation().validate()?;
        if self.thresholds.is_empty() {
            return Err(Error::invalid("config", "thresholds must not be empty"));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 100.0)) {
            return Err(Error::invalid("config", format!("threshold {t} outside (0, 100)")));
        }
        if !(self.gt_delta > 0.0 && self.gt_delta.is_finite()) {
            return Err(Error::invalid("config", "gt_delta must be > 0"));
        }
        if let Some(i0) = self.i0 {
            if !(i0 > 0.0 && i0.is_finite()) {
                return Err(Error::invalid("config", "i0 must be > 0"));
            }
        }
        Ok(())
    }

    /// The config with every default and override applied and the output
    /// location dropped; what [`ExperimentConfig::semantic_hash`] digests.
    pub fn semantic_json(&self) -> Result<serde_json::Value> {
        let resolved = ExperimentConfig {
            simulation_grid: Some(self.simulation_grid()),
            scene: SceneSpec::Inline(self.scene.resolve()?),
            perturbation: self.effective_perturbation(),
            reproject_eps: Some(self.cc_config().reproject_eps),
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let mut v = serde_json::to_value(&resolved)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        Ok(v)
    }

    /// SHA-256 of the canonical semantic JSON, hex encoded.
    pub fn semantic_hash(&self) -> Result<String> {
        let text = serde_json::to_string(&self.semantic_json()?)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Phantom,
    Project,
    SegmentSim,
    Cc,
    Metrics,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Phantom,
        Stage::Project,
        Stage::SegmentSim,
        Stage::Cc,
        Stage::Metrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Project => "project",
            Stage::SegmentSim => "segment-sim",
            Stage::Cc => "cc",
            Stage::Metrics => "metrics",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub status: RunStatus,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub stages_completed: Vec<Stage>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

impl Manifest {
    fn fresh(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            config_hash: cfg.semantic_hash()?,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Ok,
            failed_stage: None,
            error: None,
            stages_completed: Vec::new(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub struct Phantoms {
    pub with_metal: Volume<f32>,
    pub without_metal: Volume<f32>,
    pub metal: MaskVolume,
}

pub struct Projections {
    pub with_metal: ProjectionStack,
    pub without_metal: ProjectionStack,
}

pub struct Segmentation {
    pub gt: MaskStack,
    pub soft: SoftMaskStack,
}

pub fn make_phantoms(cfg: &ExperimentConfig) -> Result<Phantoms> {
    let scene = cfg.scene.resolve()?;
    let grid = cfg.simulation_grid();
    let (with, without) = split_metal(&scene);
    Ok(Phantoms {
        with_metal: voxelize(&with, &grid),
        without_metal: voxelize(&without, &grid),
        metal: metal_mask(&scene, &grid),
    })
}

pub fn make_projections(cfg: &ExperimentConfig, ph: &Phantoms) -> Result<Projections> {
    let run = |vol: &Volume<f32>| -> Result<ProjectionStack> {
        let p = forward_project(vol, &cfg.geometry);
        match cfg.i0 {
            Some(i0) => lambert_beer(&intensities(&p, i0)?, i0),
            None => Ok(p),
        }
    };
    Ok(Projections {
        with_metal: run(&ph.with_metal)?,
        without_metal: run(&ph.without_metal)?,
    })
}

pub fn make_segmentation(cfg: &ExperimentConfig, pr: &Projections) -> Result<Segmentation> {
    let gt = gt_masks(&pr.with_metal, &pr.without_metal, cfg.gt_delta)?;
    let soft = simulate_soft_masks(&gt, &cfg.effective_perturbation())?;
    Ok(Segmentation { gt, soft })
}

pub fn run_cc(cfg: &ExperimentConfig, seg: &Segmentation) -> Result<Vec<GridRun>> {
    run_grid(&seg.soft, &cfg.thresholds, &cfg.cc_config())
}

pub fn evaluate(seg: &Segmentation, runs: &[GridRun]) -> Result<ExperimentTable> {
    evaluate_grid(
        Some(&seg.soft),
        &seg.gt,
        runs.iter().map(|r| (r.threshold, &r.pre, &r.cc.consistent_masks)),
    )
}

/// Views exported as PGM images and panels.
pub fn preview_views(n_views: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [0, n_views / 4, n_views / 2, 3 * n_views / 4]
        .into_iter()
        .filter(|&i| i < n_views)
        .collect();
    v.dedup();
    v
}

fn thr_name(t: f64) -> String {
    format!("{t}").replace('.', "p")
}

/// Stage-by-stage runner that writes artifacts into one directory and keeps
/// the manifest current. Stages missing their inputs in memory load them
/// from the directory.
pub struct Runner {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    manifest: Manifest,
}

impl Runner {
    /// Validates the config, creates `out`, and records the config. An
    /// existing manifest for the same config is continued.
    pub fn new(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(out.join("pgm")).map_err(|e| Error::io(out, e))?;
        let fresh = Manifest::fresh(&cfg)?;
        let manifest = match Manifest::load(out) {
            Ok(m) if m.config_hash == fresh.config_hash && m.status == RunStatus::Ok => m,
            _ => fresh,
        };
        write_json(&out.join(CONFIG_FILE), &cfg)?;
        let r = Self {
            cfg,
            out: out.to_path_buf(),
            manifest,
        };
        r.save_manifest()?;
        Ok(r)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.out.join(MANIFEST_FILE), &self.manifest)
    }

    fn stage<T>(&mut self, stage: Stage, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        match f(self) {
            Ok(v) => {
                if !self.manifest.stages_completed.contains(&stage) {
                    self.manifest.stages_completed.push(stage);
                }
                self.save_manifest()?;
                Ok(v)
            }
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.failed_stage = Some(stage);
                self.manifest.error = Some(e.to_string());
                // the stage error matters more than a manifest write failure
                let _ = self.save_manifest();
                Err(Error::Stage {
                    stage: stage.name().to_string(),
                    source: Box::new(e),
                })
            }
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn pgm(&self, name: &str, rows: usize, cols: usize, data: &[impl Copy + Into<f64>]) -> Result<()> {
        io::export_pgm(&self.out.join("pgm").join(format!("{name}.pgm")), rows, cols, data)
    }

    fn pgm_stack<T: Copy + Into<f64>>(&self, prefix: &str, s: &crate::projector::Stack<T>) -> Result<()> {
        for v in preview_views(s.geom.n_views) {
            self.pgm(
                &format!("{prefix}_view{v:03}"),
                s.geom.detector_rows,
                s.geom.detector_cols,
                s.view(v),
            )?;
        }
        Ok(())
    }

    pub fn phantom(&mut self) -> Result<Phantoms> {
        self.stage(Stage::Phantom, |r| {
            let ph = make_phantoms(&r.cfg)?;
            io::write_volume(&r.path("attenuation_with_metal"), &ph.with_metal, Tag::Attenuation)?;
            io::write_volume(
                &r.path("attenuation_without_metal"),
                &ph.without_metal,
                Tag::Attenuation,
            )?;
            io::write_volume(&r.path("metal_mask_3d"), &ph.metal, Tag::Mask)?;
            let g = ph.with_metal.grid;
            let plane = g.nx * g.ny;
            let mid = g.nz / 2;
            r.pgm(
                "phantom_axial_mid",
                g.ny,
                g.nx,
                &ph.with_metal.data[mid * plane..(mid + 1) * plane],
            )?;
            Ok(ph)
        })
    }

    pub fn load_phantoms(&self) -> Result<Phantoms> {
        Ok(Phantoms {
            with_metal: io::read_volume(&self.path("attenuation_with_metal"), Tag::Attenuation)?,
            without_metal: io::read_volume(&self.path("attenuation_without_metal"), Tag::Attenuation)?,
            metal: io::read_volume(&self.path("metal_mask_3d"), Tag::Mask)?,
        })
    }

    pub fn project(&mut self, ph: Option<&Phantoms>) -> Result<Projections> {
        self.stage(Stage::Project, |r| {
            let loaded;
            let ph = match ph {
                Some(p) => p,
                None => {
                    loaded = r.load_phantoms()?;
                    &loaded
                }
            };
            let pr = make_projections(&r.cfg, ph)?;
            io::write_stack(&r.path("line_integrals_with_metal"), &pr.with_metal, Tag::LineIntegral)?;
            io::write_stack(
                &r.path("line_integrals_without_metal"),
                &pr.without_metal,
                Tag::LineIntegral,
            )?;
            r.pgm_stack("projection", &pr.with_metal)?;
            Ok(pr)
        })
    }

    pub fn load_projections(&self) -> Result<Projections> {
        Ok(Projections {
            with_metal: io::read_stack(&self.path("line_integrals_with_metal"), Tag::LineIntegral)?,
            without_metal: io::read_stack(&self.path("line_integrals_without_metal"), Tag::LineIntegral)?,
        })
    }

    pub fn segment(&mut self, pr: Option<&Projections>) -> Result<Segmentation> {
        self.stage(Stage::SegmentSim, |r| {
            let loaded;
            let pr = match pr {
                Some(p) => p,
                None => {
                    loaded = r.load_projections()?;
                    &loaded
                }
            };
            let seg = make_segmentation(&r.cfg, pr)?;
            io::write_stack(&r.path("gt_masks"), &seg.gt, Tag::Mask)?;
            io::write_soft_masks(&r.path("soft_masks"), &seg.soft)?;
            r.pgm_stack("gt", &seg.gt)?;
            r.pgm_stack("soft", &seg.soft)?;
            Ok(seg)
        })
    }

    pub fn load_segmentation(&self) -> Result<Segmentation> {
        Ok(Segmentation {
            gt: io::read_mask_stack(&self.path("gt_masks"))?,
            soft: io::read_soft_masks(&self.path("soft_masks"))?,
        })
    }

    pub fn cc(&mut self, seg: Option<&Segmentation>) -> Result<Vec<GridRun>> {
        self.stage(Stage::Cc, |r| {
            let loaded;
            let seg = match seg {
                Some(s) => s,
                None => {
                    loaded = r.load_segmentation()?;
                    &loaded
                }
            };
            let runs = run_cc(&r.cfg, seg)?;
            for run in &runs {
                let t = thr_name(run.threshold);
                io::write_stack(&r.path(&format!("pre_cc_masks_t{t}")), &run.pre, Tag::Mask)?;
                io::write_stack(&r.path(&format!("cc_masks_t{t}")), &run.cc.consistent_masks, Tag::Mask)?;
                io::write_volume(&r.path(&format!("metal3d_t{t}")), &run.cc.metal3d, Tag::Mask)?;
                io::write_consistency(&r.path(&format!("consistency_t{t}")), &run.cc.consistency)?;
                io::write_visits(&r.path(&format!("visits_t{t}")), &run.cc.visitors)?;
                r.pgm_stack(&format!("pre_cc_t{t}"), &run.pre)?;
                r.pgm_stack(&format!("cc_t{t}"), &run.cc.consistent_masks)?;
            }
            Ok(runs)
        })
    }

    /// `(threshold, pre, post)` mask stacks written by the cc stage.
    pub fn load_cc_masks(&self) -> Result<Vec<(f64, MaskStack, MaskStack)>> {
        self.cfg
            .thresholds
            .iter()
            .map(|&t| {
                let n = thr_name(t);
                Ok((
                    t,
                    io::read_mask_stack(&self.path(&format!("pre_cc_masks_t{n}")))?,
                    io::read_mask_stack(&self.path(&format!("cc_masks_t{n}")))?,
                ))
            })
            .collect()
    }

    pub fn metrics(
        &mut self,
        seg: Option<&Segmentation>,
        runs: Option<&[GridRun]>,
        projections: Option<&Projections>,
    ) -> Result<ExperimentTable> {
        self.stage(Stage::Metrics, |r| {
            let loaded_seg;
            let seg = match seg {
                Some(s) => s,
                None => {
                    loaded_seg = r.load_segmentation()?;
                    &loaded_seg
                }
            };
            let masks: Vec<(f64, MaskStack, MaskStack)> = match runs {
                Some(runs) => runs
                    .iter()
                    .map(|g| (g.threshold, g.pre.clone(), g.cc.consistent_masks.clone()))
                    .collect(),
                None => r.load_cc_masks()?,
            };
            let table = evaluate_grid(Some(&seg.soft), &seg.gt, masks.iter().map(|(t, a, b)| (*t, a, b)))?;
            write_json(&r.path("metrics.json"), &table)?;
            fs::write(r.path("metrics.txt"), table.to_text()).map_err(|e| Error::io(r.path("metrics.txt"), e))?;
            let loaded_pr;
            let pr = match projections {
                Some(p) => p,
                None => {
                    loaded_pr = r.load_projections()?;
                    &loaded_pr
                }
            };
            r.write_panels(&pr.with_metal, seg, &masks)?;
            Ok(table)
        })
    }

    /// Two rows per preview view: projection and pre-check masks on top,
    /// ground truth and post-check masks below, one column per threshold.
    fn write_panels(
        &self,
        proj: &ProjectionStack,
        seg: &Segmentation,
        masks: &[(f64, MaskStack, MaskStack)],
    ) -> Result<()> {
        let g = proj.geom;
        let (rows, cols) = (g.detector_rows, g.detector_cols);
        for v in preview_views(g.n_views) {
            let mut top = vec![io::scale_to_u8(proj.view(v))?];
            let mut bottom = vec![io::scale_to_u8(seg.gt.view(v))?];
            for (_, pre, post) in masks {
                top.push(binary_u8(pre.view(v)));
                bottom.push(binary_u8(post.view(v)));
            }
            let per_row = top.len();
            top.extend(bottom);
            let (pr, pc, px) = io::compose_panel(&top, rows, cols, per_row, 2)?;
            let bytes = io::pgm_from_u8(pc, pr, &px)?;
            let p = self.out.join("pgm").join(format!("panel_view{v:03}.pgm"));
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// All stages in order.
    pub fn run_all(&mut self) -> Result<ExperimentTable> {
        let ph = self.phantom()?;
        let pr = self.project(Some(&ph))?;
        drop(ph);
        let seg = self.segment(Some(&pr))?;
        let runs = self.cc(Some(&seg))?;
        self.metrics(Some(&seg), Some(&runs), Some(&pr))
    }
}

// Binary masks map to {0, 255} even when a view is all zero or all one.
fn binary_u8(m: &[u8]) -> Vec<u8> {
    m.iter().map(|&x| if x != 0 { 255 } else { 0 }).collect()
}

/// Runs every stage into `cfg.output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ExperimentTable> {
    let out = cfg.output_dir.clone();
    Runner::new(cfg.clone(), &out)?.run_all()
}
