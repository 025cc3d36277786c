//! Simulated segmentation front end: Lambert-Beer conversion, ground truth
//! by subtraction, soft masks with controlled false positives and
//! negatives, binarization, and sliding-window patch stitching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ProjectionGeometry;
use crate::projector::{MaskStack, ProjectionStack, Stack};

/// Per-pixel confidences in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMaskStack(Stack<f32>);

impl SoftMaskStack {
    pub fn new(stack: Stack<f32>) -> Result<Self> {
        if let Some(i) = stack.data.iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(
                "soft mask",
                format!("confidence {} at flat index {i} outside [0, 1]", stack.data[i]),
            ));
        }
        Ok(Self(stack))
    }

    pub fn into_inner(self) -> Stack<f32> {
        self.0
    }
}

impl std::ops::Deref for SoftMaskStack {
    type Target = Stack<f32>;

    fn deref(&self) -> &Stack<f32> {
        &self.0
    }
}

/// Error model for the simulated segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Expected false-positive blobs started per view (Poisson mean).
    pub fp_blob_rate: f64,
    /// Blob radius range, pixels.
    pub fp_blob_radius: [f64; 2],
    pub fp_confidence: [f64; 2],
    /// Consecutive views each blob stays at the same detector location.
    pub fp_persistence: [usize; 2],
    /// Probability that a view's ground truth is eroded.
    pub fn_dropout_rate: f64,
    /// Erosion disk radius, pixels.
    pub fn_erosion_radius: f64,
    pub gt_confidence: [f64; 2],
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            fp_blob_rate: 1.0,
            fp_blob_radius: [2.0, 5.0],
            fp_confidence: [0.06, 0.7],
            fp_persistence: [1, 3],
            fn_dropout_rate: 0.0,
            fn_erosion_radius: 1.5,
            gt_confidence: [0.6, 1.0],
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    /// No errors at all; the soft stack equals the ground truth.
    pub fn identity(seed: u64) -> Self {
        Self {
            fp_blob_rate: 0.0,
            fn_dropout_rate: 0.0,
            gt_confidence: [1.0, 1.0],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::invalid("perturbation config", r));
        let range = |name: &str, r: [f64; 2], lo: f64, hi: f64| -> Result<()> {
            if !(r[0] >= lo && r[1] <= hi && r[0] <= r[1]) {
                return Err(Error::invalid(
                    "perturbation config",
                    format!("{name} = {r:?} must satisfy {lo} <= min <= max <= {hi}"),
                ));
            }
            Ok(())
        };
        if !(self.fp_blob_rate >= 0.0 && self.fp_blob_rate.is_finite()) {
            return bad(format!("fp_blob_rate {} must be finite and >= 0", self.fp_blob_rate));
        }
        if !(0.0..=1.0).contains(&self.fn_dropout_rate) {
            return bad(format!("fn_dropout_rate {} outside [0, 1]", self.fn_dropout_rate));
        }
        if !(self.fn_erosion_radius >= 0.0 && self.fn_erosion_radius.is_finite()) {
            return bad("fn_erosion_radius must be >= 0".into());
        }
        range("fp_blob_radius", self.fp_blob_radius, 0.0, f64::MAX)?;
        range("fp_confidence", self.fp_confidence, 0.0, 1.0)?;
        range("gt_confidence", self.gt_confidence, 0.0, 1.0)?;
        let [pmin, pmax] = self.fp_persistence;
        if pmin < 1 || pmin > pmax {
            return bad(format!(
                "fp_persistence {:?} must satisfy 1 <= min <= max",
                self.fp_persistence
            ));
        }
        Ok(())
    }
}

/// Sliding-window layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchPlan {
    pub patch_size: usize,
    pub stride: usize,
    /// Divide the stitched sum by the number of covering windows.
    #[serde(default)]
    pub normalize_coverage: bool,
}

impl PatchPlan {
    pub fn new(patch_size: usize, stride: usize) -> Self {
        Self {
            patch_size,
            stride,
            normalize_coverage: false,
        }
    }

    pub fn validate_for(&self, rows: usize, cols: usize) -> Result<()> {
        if !(1 <= self.stride && self.stride <= self.patch_size && self.patch_size <= rows.min(cols)) {
            return Err(Error::invalid(
                "patch plan",
                format!(
                    "need 1 <= stride ({}) <= patch_size ({}) <= min(rows, cols) ({})",
                    self.stride,
                    self.patch_size,
                    rows.min(cols)
                ),
            ));
        }
        Ok(())
    }

    /// Window start offsets along an axis of length `n`; the last window is
    /// clamped to end at the border.
    pub fn offsets(&self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=n - self.patch_size).step_by(self.stride).collect();
        if v.last().is_none_or(|&l| l + self.patch_size < n) {
            v.push(n - self.patch_size);
        }
        v
    }
}

/// Row-major 2D scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "plane data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    fn crop(&self, r0: usize, c0: usize, size: usize) -> Plane {
        let mut data = Vec::with_capacity(size * size);
        for r in r0..r0 + size {
            data.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c0 + size]);
        }
        Plane {
            rows: size,
            cols: size,
            data,
        }
    }
}

/// Maps a square patch to a same-sized score field.
pub trait PatchScorer {
    fn score(&self, patch: &Plane) -> Plane;
}

impl<F: Fn(&Plane) -> Plane> PatchScorer for F {
    fn score(&self, patch: &Plane) -> Plane {
        self(patch)
    }
}

/// Scores each pixel 1 when its line integral exceeds the threshold.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdScorer {
    pub threshold: f32,
}

impl PatchScorer for ThresholdScorer {
    fn score(&self, patch: &Plane) -> Plane {
        Plane {
            rows: patch.rows,
            cols: patch.cols,
            data: patch
                .data
                .iter()
                .map(|&x| if x > self.threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

pub fn reference_scorer(threshold: f32) -> Result<ThresholdScorer> {
    if !(threshold > 0.0) {
        return Err(Error::invalid("reference scorer", "threshold must be > 0"));
    }
    Ok(ThresholdScorer { threshold })
}

/// Runs `scorer` over every window of `plan` and sums the outputs.
pub fn stitch_patches(image: &Plane, scorer: &dyn PatchScorer, plan: &PatchPlan) -> Result<Plane> {
    plan.validate_for(image.rows, image.cols)?;
    let p = plan.patch_size;
    let mut acc = Plane::zeros(image.rows, image.cols);
    let mut cover = vec![0u32; image.rows * image.cols];
    let cols_at = plan.offsets(image.cols);
    for &r0 in &plan.offsets(image.rows) {
        for &c0 in &cols_at {
            let scored = scorer.score(&image.crop(r0, c0, p));
            if scored.rows != p || scored.cols != p || scored.data.len() != p * p {
                return Err(Error::ShapeMismatch(format!(
                    "scorer returned {}x{} for a {p}x{p} patch",
                    scored.rows, scored.cols
                )));
            }
            for r in 0..p {
                let base = (r0 + r) * image.cols + c0;
                for c in 0..p {
                    acc.data[base + c] += scored.data[r * p + c];
                    cover[base + c] += 1;
                }
            }
        }
    }
    if plan.normalize_coverage {
        for (a, &n) in acc.data.iter_mut().zip(&cover) {
            *a /= n as f32;
        }
    }
    Ok(acc)
}

/// `I = i0 * exp(-line_integral)`, the noise-free measurement.
pub fn intensities(line_integrals: &ProjectionStack, i0: f64) -> Result<ProjectionStack> {
    check_i0(i0)?;
    let data = line_integrals
        .data
        .par_iter()
        .map(|&p| (i0 * (-(p as f64)).exp()) as f32)
        .collect();
    Ok(Stack {
        geom: line_integrals.geom,
        data,
    })
}

fn check_i0(i0: f64) -> Result<()> {
    if !(i0 > 0.0 && i0.is_finite()) {
        return Err(Error::invalid("i0", format!("{i0} must be > 0")));
    }
    Ok(())
}

/// Converts intensities to line integrals, `ln(i0 / max(I, 1e-12 * i0))`.
pub fn lambert_beer(measured: &ProjectionStack, i0: f64) -> Result<ProjectionStack> {
    check_i0(i0)?;
    let floor = 1e-12 * i0;
    let data = measured
        .data
        .par_iter()
        .map(|&i| (i0 / (i as f64).max(floor)).ln() as f32)
        .collect();
    Ok(Stack {
        geom: measured.geom,
        data,
    })
}

/// Ground-truth metal masks: pixels where the metal raises the line
/// integral by more than `delta`.
pub fn gt_masks(with_metal: &ProjectionStack, without_metal: &ProjectionStack, delta: f64) -> Result<MaskStack> {
    if with_metal.geom != without_metal.geom {
        return Err(Error::ShapeMismatch("paired stacks have different geometry".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("gt delta", format!("{delta} must be > 0")));
    }
    let data = with_metal
        .data
        .iter()
        .zip(&without_metal.data)
        .map(|(&w, &wo)| ((w as f64 - wo as f64) > delta) as u8)
        .collect();
    Ok(Stack {
        geom: with_metal.geom,
        data,
    })
}

/// A simulated false-positive disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub first_view: usize,
    /// Views covered, starting at `first_view` (truncated at the stack end).
    pub n_views: usize,
    /// Continuous detector center.
    pub u: f64,
    pub v: f64,
    pub radius: f64,
    pub confidence: f32,
}

impl Blob {
    pub fn active_in(&self, view: usize) -> bool {
        view >= self.first_view && view < self.first_view + self.n_views
    }

    pub fn covers(&self, row: usize, col: usize) -> bool {
        let du = col as f64 + 0.5 - self.u;
        let dv = row as f64 + 0.5 - self.v;
        du * du + dv * dv <= self.radius * self.radius
    }
}

const STREAM_BLOBS: u64 = 0;
const STREAM_GT: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

fn view_rng(seed: u64, view: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(view as u64 * 4 + stream);
    rng
}

fn lerp(range: [f64; 2], u: f64) -> f64 {
    range[0] + (range[1] - range[0]) * u
}

/// Every false-positive blob the configuration produces for `geom`, in
/// order of first view. Deterministic in `cfg.seed`.
pub fn blob_schedule(cfg: &PerturbationConfig, geom: &ProjectionGeometry) -> Vec<Blob> {
    if cfg.fp_blob_rate == 0.0 {
        return Vec::new();
    }
    let poisson = Poisson::new(cfg.fp_blob_rate).expect("rate validated > 0");
    let mut blobs = Vec::new();
    for view in 0..geom.n_views {
        let mut rng = view_rng(cfg.seed, view, STREAM_BLOBS);
        let count = poisson.sample(&mut rng) as usize;
        for _ in 0..count {
            let u = rng.random::<f64>() * geom.detector_cols as f64;
            let v = rng.random::<f64>() * geom.detector_rows as f64;
            let radius = lerp(cfg.fp_blob_radius, rng.random());
            let confidence = lerp(cfg.fp_confidence, rng.random()) as f32;
            let persist = rng.random_range(cfg.fp_persistence[0]..=cfg.fp_persistence[1]);
            blobs.push(Blob {
                first_view: view,
                n_views: persist.min(geom.n_views - view),
                u,
                v,
                radius,
                confidence,
            });
        }
    }
    blobs
}

/// Binary erosion with a disk of `radius` pixels; pixels beyond the border
/// count as background.
pub fn erode(mask: &[u8], rows: usize, cols: usize, radius: f64) -> Vec<u8> {
    let reach = radius.floor() as i64;
    let offsets: Vec<(i64, i64)> = (-reach..=reach)
        .flat_map(|dr| (-reach..=reach).map(move |dc| (dr, dc)))
        .filter(|&(dr, dc)| ((dr * dr + dc * dc) as f64) <= radius * radius)
        .collect();
    let mut out = vec![0u8; mask.len()];
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            let keep = offsets.iter().all(|&(dr, dc)| {
                let (rr, cc) = (r + dr, c + dc);
                rr >= 0
                    && cc >= 0
                    && rr < rows as i64
                    && cc < cols as i64
                    && mask[(rr as usize) * cols + cc as usize] != 0
            });
            out[(r as usize) * cols + c as usize] = keep as u8;
        }
    }
    out
}

/// Turns ground-truth masks into a soft segmentation with the configured
/// error modes.
pub fn simulate_soft_masks(gt: &MaskStack, cfg: &PerturbationConfig) -> Result<SoftMaskStack> {
    cfg.validate()?;
    gt.ensure_binary()?;
    let geom = gt.geom;
    let (rows, cols) = (geom.detector_rows, geom.detector_cols);
    let blobs = blob_schedule(cfg, &geom);
    let mut data = vec![0f32; gt.data.len()];
    data.par_chunks_mut(geom.view_len())
        .enumerate()
        .for_each(|(view, out)| {
            let mut drop_rng = view_rng(cfg.seed, view, STREAM_DROPOUT);
            let eroded;
            let truth: &[u8] = if drop_rng.random::<f64>() < cfg.fn_dropout_rate {
                eroded = erode(gt.view(view), rows, cols, cfg.fn_erosion_radius);
                &eroded
            } else {
                gt.view(view)
            };
            let mut rng = view_rng(cfg.seed, view, STREAM_GT);
            for (o, &t) in out.iter_mut().zip(truth) {
                if t != 0 {
                    *o = lerp(cfg.gt_confidence, rng.random()) as f32;
                }
            }
            for b in blobs.iter().filter(|b| b.active_in(view)) {
                let r0 = (b.v - b.radius).floor().max(0.0) as usize;
                let r1 = ((b.v + b.radius).ceil().max(0.0) as usize).min(rows);
                let c0 = (b.u - b.radius).floor().max(0.0) as usize;
                let c1 = ((b.u + b.radius).ceil().max(0.0) as usize).min(cols);
                for r in r0..r1 {
                    for c in c0..c1 {
                        if b.covers(r, c) {
                            let o = &mut out[r * cols + c];
                            *o = o.max(b.confidence);
                        }
                    }
                }
            }
        });
    SoftMaskStack::new(Stack { geom, data })
}

/// Pixel is set when `confidence > threshold_percent / 100`, compared at
/// the stored single precision.
pub fn binarize(soft: &SoftMaskStack, threshold_percent: f64) -> Result<MaskStack> {
    if !(threshold_percent > 0.0 && threshold_percent < 100.0) {
        return Err(Error::invalid(
            "binarization threshold",
            format!("{threshold_percent} outside (0, 100)"),
        ));
    }
    let cut = threshold_percent as f32 / 100.0;
    let data = soft.data.iter().map(|&c| (c > cut) as u8).collect();
    Ok(Stack { geom: soft.geom, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(rows: usize, cols: usize, n_views: usize) -> ProjectionGeometry {
        ProjectionGeometry {
            detector_rows: rows,
            detector_cols: cols,
            n_views,
            ..ProjectionGeometry::desk()
        }
    }

    fn stack_of(g: ProjectionGeometry, data: Vec<f32>) -> ProjectionStack {
        Stack::new(g, data).unwrap()
    }

    fn disk_gt(g: ProjectionGeometry, radius: f64) -> MaskStack {
        let (cr, cc) = (g.detector_rows as f64 / 2.0, g.detector_cols as f64 / 2.0);
        let mut m = MaskStack::zeros(g);
        for v in 0..g.n_views {
            for r in 0..g.detector_rows {
                for c in 0..g.detector_cols {
                    let d = (r as f64 + 0.5 - cr).hypot(c as f64 + 0.5 - cc);
                    m.view_mut(v)[r * g.detector_cols + c] = (d <= radius) as u8;
                }
            }
        }
        m
    }

    #[test]
    fn lambert_beer_examples() {
        let g = geom(1, 3, 1);
        let i0 = 1000.0;
        let s = stack_of(g, vec![i0 as f32, (i0 * (-1f64).exp()) as f32, 0.0]);
        let p = lambert_beer(&s, i0).unwrap();
        assert_eq!(p.data[0], 0.0);
        assert!((p.data[1] - 1.0).abs() < 1e-6);
        assert!((p.data[2] as f64 - 1e12f64.ln()).abs() < 1e-5);
        assert!(lambert_beer(&s, 0.0).is_err());
        assert!(lambert_beer(&s, -3.0).is_err());
    }

    #[test]
    fn intensities_invert_lambert_beer() {
        let g = geom(2, 2, 1);
        let li = stack_of(g, vec![0.0, 0.5, 2.0, 7.0]);
        let back = lambert_beer(&intensities(&li, 5e4).unwrap(), 5e4).unwrap();
        for (a, b) in li.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gt_mask_examples() {
        let g = geom(2, 2, 1);
        let a = stack_of(g, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(gt_masks(&a, &a, 0.1).unwrap().count_ones(), 0);
        let mut b = a.clone();
        b.data[2] += 0.2;
        assert_eq!(gt_masks(&b, &a, 0.1).unwrap().data, vec![0, 0, 1, 0]);
        assert!(gt_masks(&b, &a, 0.0).is_err());
        let other = stack_of(geom(2, 2, 2), vec![0.0; 8]);
        assert!(gt_masks(&other, &a, 0.1).is_err());
    }

    #[test]
    fn identity_config_reproduces_gt() {
        let gt = disk_gt(geom(24, 24, 5), 6.0);
        let soft = simulate_soft_masks(&gt, &PerturbationConfig::identity(3)).unwrap();
        let expect: Vec<f32> = gt.data.iter().map(|&m| m as f32).collect();
        assert_eq!(soft.data, expect);
    }

    #[test]
    fn blobs_on_empty_gt_stay_inside_schedule() {
        let g = geom(32, 32, 20);
        let gt = MaskStack::zeros(g);
        let cfg = PerturbationConfig {
            fp_blob_rate: 2.0,
            seed: 11,
            ..PerturbationConfig::default()
        };
        let soft = simulate_soft_masks(&gt, &cfg).unwrap();
        let blobs = blob_schedule(&cfg, &g);
        assert!(soft.data.iter().any(|&c| c > 0.0));
        for view in 0..g.n_views {
            for r in 0..32 {
                for c in 0..32 {
                    let x = *soft.get(view, r, c);
                    if x > 0.0 {
                        let best = blobs
                            .iter()
                            .filter(|b| b.active_in(view) && b.covers(r, c))
                            .map(|b| b.confidence)
                            .fold(0f32, f32::max);
                        assert_eq!(x, best);
                    }
                }
            }
        }
        for b in &blobs {
            assert!((1..=3).contains(&b.n_views) || b.first_view + b.n_views == g.n_views);
        }
    }

    #[test]
    fn full_erosion_empties_masks() {
        let gt = disk_gt(geom(24, 24, 4), 4.0);
        let cfg = PerturbationConfig {
            fn_dropout_rate: 1.0,
            fn_erosion_radius: 5.0,
            ..PerturbationConfig::identity(1)
        };
        let soft = simulate_soft_masks(&gt, &cfg).unwrap();
        assert!(soft.data.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn erosion_radius_one_shrinks_disk() {
        let gt = disk_gt(geom(16, 16, 1), 5.0);
        let e = erode(gt.view(0), 16, 16, 1.0);
        let before = gt.count_ones();
        let after = e.iter().filter(|&&m| m == 1).count();
        assert!(after < before && after > 0);
        assert!(e.iter().zip(gt.view(0)).all(|(&a, &b)| a <= b));
        assert_eq!(erode(gt.view(0), 16, 16, 0.0), gt.view(0));
    }

    #[test]
    fn same_seed_bitwise_reproducible() {
        let gt = disk_gt(geom(32, 32, 12), 7.0);
        let cfg = PerturbationConfig {
            fn_dropout_rate: 0.4,
            seed: 99,
            ..PerturbationConfig::default()
        };
        let a = simulate_soft_masks(&gt, &cfg).unwrap();
        let b = simulate_soft_masks(&gt, &cfg).unwrap();
        assert_eq!(
            a.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let c = simulate_soft_masks(&gt, &PerturbationConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_perturbations_rejected() {
        let base = PerturbationConfig::default();
        for bad in [
            PerturbationConfig {
                fn_dropout_rate: 1.5,
                ..base.clone()
            },
            PerturbationConfig {
                fp_blob_rate: -1.0,
                ..base.clone()
            },
            PerturbationConfig {
                fp_confidence: [0.6, 0.2],
                ..base.clone()
            },
            PerturbationConfig {
                gt_confidence: [0.5, 1.2],
                ..base.clone()
            },
            PerturbationConfig {
                fp_persistence: [0, 2],
                ..base.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn binarize_examples() {
        let g = geom(1, 3, 1);
        let soft = SoftMaskStack::new(stack_of(g, vec![0.06, 0.30, 0.0])).unwrap();
        assert_eq!(binarize(&soft, 5.0).unwrap().data, vec![1, 1, 0]);
        assert_eq!(binarize(&soft, 30.0).unwrap().data, vec![0, 0, 0]);
        assert!(binarize(&soft, 0.0).is_err());
        assert!(binarize(&soft, 100.0).is_err());
        assert!(SoftMaskStack::new(stack_of(g, vec![1.5, 0.0, 0.0])).is_err());
    }

    #[test]
    fn stitch_examples() {
        let img = Plane::zeros(256, 256);
        let ones = |p: &Plane| Plane {
            rows: p.rows,
            cols: p.cols,
            data: vec![1.0; p.data.len()],
        };
        let tiled = stitch_patches(&img, &ones, &PatchPlan::new(128, 128)).unwrap();
        assert!(tiled.data.iter().all(|&x| x == 1.0));

        let dense = stitch_patches(&img, &ones, &PatchPlan::new(128, 32)).unwrap();
        // windows covering an interior pixel: (128 / 32)^2
        assert_eq!(dense.get(128, 128), 16.0);
        assert_eq!(dense.get(0, 0), 1.0);

        let zero = |p: &Plane| Plane::zeros(p.rows, p.cols);
        assert!(stitch_patches(&img, &zero, &PatchPlan::new(128, 32))
            .unwrap()
            .data
            .iter()
            .all(|&x| x == 0.0));

        let wrong = |_: &Plane| Plane::zeros(3, 3);
        assert!(stitch_patches(&img, &wrong, &PatchPlan::new(128, 32)).is_err());
        assert!(stitch_patches(&img, &ones, &PatchPlan::new(300, 32)).is_err());
        assert!(stitch_patches(&img, &ones, &PatchPlan::new(64, 65)).is_err());
    }

    #[test]
    fn coverage_normalization_averages() {
        let img = Plane::zeros(100, 90);
        let ones = |p: &Plane| Plane {
            rows: p.rows,
            cols: p.cols,
            data: vec![1.0; p.data.len()],
        };
        let plan = PatchPlan {
            normalize_coverage: true,
            ..PatchPlan::new(40, 15)
        };
        let out = stitch_patches(&img, &ones, &plan).unwrap();
        assert!(out.data.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn clamped_windows_cover_every_pixel() {
        let plan = PatchPlan::new(40, 15);
        assert_eq!(plan.offsets(100), vec![0, 15, 30, 45, 60]);
        assert_eq!(plan.offsets(90), vec![0, 15, 30, 45, 50]);
        assert_eq!(plan.offsets(40), vec![0]);
    }

    #[test]
    fn reference_scorer_examples() {
        let s = reference_scorer(0.5).unwrap();
        let z = Plane::zeros(4, 4);
        assert!(s.score(&z).data.iter().all(|&x| x == 0.0));
        let mut one = z.clone();
        one.data[5] = 0.9;
        let out = s.score(&one);
        assert_eq!(out.data.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(out.data[5], 1.0);
        assert!(reference_scorer(0.0).is_err());
    }

    #[test]
    fn plan_json_field_names() {
        let p: PatchPlan = serde_json::from_str(r#"{"patch_size":128,"stride":32}"#).unwrap();
        assert_eq!(p, PatchPlan::new(128, 32));
        let c = PerturbationConfig::default();
        let back: PerturbationConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    proptest! {
        #[test]
        fn binarize_is_monotone(vals in proptest::collection::vec(0f32..=1.0, 1..64), t1 in 0.5f64..99.0, dt in 0.0f64..0.9) {
            let g = geom(1, vals.len(), 1);
            let soft = SoftMaskStack::new(stack_of(g, vals)).unwrap();
            let lo = binarize(&soft, t1).unwrap();
            let hi = binarize(&soft, t1 + dt).unwrap();
            prop_assert!(lo.data.iter().zip(&hi.data).all(|(&a, &b)| b <= a));
        }

        #[test]
        fn gt_masks_ignore_common_offset(
            pairs in proptest::collection::vec((0i32..64, 0i32..64), 1..32),
            offset in 0i32..64,
        ) {
            // quarter-integers stay exact in f32
            let g = geom(1, pairs.len(), 1);
            let w: Vec<f32> = pairs.iter().map(|p| p.0 as f32 / 4.0).collect();
            let wo: Vec<f32> = pairs.iter().map(|p| p.1 as f32 / 4.0).collect();
            let a = gt_masks(&stack_of(g, w.clone()), &stack_of(g, wo.clone()), 0.3).unwrap();
            let shift = |v: &[f32]| v.iter().map(|x| x + offset as f32 / 4.0).collect::<Vec<_>>();
            let b = gt_masks(&stack_of(g, shift(&w)), &stack_of(g, shift(&wo)), 0.3).unwrap();
            prop_assert_eq!(a.data, b.data);
        }

        #[test]
        fn stitching_is_linear_for_linear_scorer(
            a in proptest::collection::vec(-8i32..8, 24 * 20),
            b in proptest::collection::vec(-8i32..8, 24 * 20),
            stride in 1usize..=10,
        ) {
            let plane = |v: &[i32]| Plane::new(24, 20, v.iter().map(|&x| x as f32).collect()).unwrap();
            let double = |p: &Plane| Plane { rows: p.rows, cols: p.cols, data: p.data.iter().map(|x| 2.0 * x).collect() };
            let plan = PatchPlan::new(10, stride);
            let sum: Vec<i32> = a.iter().zip(&b).map(|(x, y)| x + 3 * y).collect();
            let lhs = stitch_patches(&plane(&sum), &double, &plan).unwrap();
            let sa = stitch_patches(&plane(&a), &double, &plan).unwrap();
            let sb = stitch_patches(&plane(&b), &double, &plan).unwrap();
            for i in 0..lhs.data.len() {
                prop_assert_eq!(lhs.data[i], sa.data[i] + 3.0 * sb.data[i]);
            }
        }

        #[test]
        fn dividing_stride_covers_everything(patch in 1usize..20, k in 0usize..6, stride_div in 1usize..5) {
            let stride = (patch / stride_div).max(1);
            let n = patch + stride * k;
            let plan = PatchPlan::new(patch, stride);
            let mut covered = vec![false; n];
            for o in plan.offsets(n) {
                covered[o..o + patch].iter_mut().for_each(|c| *c = true);
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
