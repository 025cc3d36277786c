//! Circular short-scan cone-beam geometry.
//!
//! The gantry rotates about the world z axis. At view angle `theta` the
//! object is rotated by `+theta` into the gantry frame, where the source sits
//! on the +x axis at `source_axis_distance` and the flat detector lies in the
//! plane `x = source_axis_distance - source_detector_distance`. Detector
//! columns run along gantry +y, rows along +z. Pixel `(col, row)` covers the
//! continuous coordinates `[col, col + 1) x [row, row + 1)`, so the principal
//! point is `(cols / 2, rows / 2)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::Volume;

/// Acquisition geometry of a circular cone-beam short scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionGeometry {
    /// Source to rotation axis, mm.
    pub source_axis_distance: f64,
    /// Source to detector plane, mm.
    pub source_detector_distance: f64,
    pub detector_cols: usize,
    pub detector_rows: usize,
    /// mm per detector pixel.
    pub pixel_pitch: f64,
    pub n_views: usize,
    /// Degrees covered from the first to the last view (inclusive).
    pub scan_arc: f64,
    /// Degrees.
    pub start_angle: f64,
}

impl Default for ProjectionGeometry {
    fn default() -> Self {
        Self::paper()
    }
}

impl ProjectionGeometry {
    /// Full-size acquisition: 976² detector, 400 views.
    ///
    /// Distances and pitch are representative C-arm values, not measured
    /// ones.
    pub fn paper() -> Self {
        Self {
            source_axis_distance: 622.0,
            source_detector_distance: 1164.0,
            detector_cols: 976,
            detector_rows: 976,
            pixel_pitch: 0.308,
            n_views: 400,
            scan_arc: 200.0,
            start_angle: 0.0,
        }
    }

    /// Desk-scale acquisition: 96² detector, 100 views, same physical
    /// detector extent as [`ProjectionGeometry::paper`].
    pub fn desk() -> Self {
        Self {
            detector_cols: 96,
            detector_rows: 96,
            pixel_pitch: 0.308 * 976.0 / 96.0,
            n_views: 100,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("projection geometry", r));
        if !(self.source_axis_distance > 0.0) {
            return bad("source_axis_distance must be > 0");
        }
        if !(self.source_detector_distance > self.source_axis_distance) {
            return bad("source_detector_distance must exceed source_axis_distance");
        }
        if self.n_views == 0 || self.detector_cols == 0 || self.detector_rows == 0 {
            return bad("n_views, detector_cols and detector_rows must be >= 1");
        }
        if !(self.pixel_pitch > 0.0) {
            return bad("pixel_pitch must be > 0");
        }
        if !(self.scan_arc > 0.0 && self.scan_arc <= 360.0) {
            return bad("scan_arc must lie in (0, 360]");
        }
        if !self.start_angle.is_finite() {
            return bad("start_angle must be finite");
        }
        Ok(())
    }

    pub fn magnification(&self) -> f64 {
        self.source_detector_distance / self.source_axis_distance
    }

    /// Pixels per view.
    pub fn view_len(&self) -> usize {
        self.detector_rows * self.detector_cols
    }

    /// Angle of view `i` in radians; views are spread evenly over the arc,
    /// endpoints included.
    pub fn view_angle(&self, i: usize) -> Result<f64> {
        if i >= self.n_views {
            return Err(Error::ViewOutOfRange {
                index: i,
                n_views: self.n_views,
            });
        }
        let deg = if self.n_views == 1 {
            self.start_angle
        } else {
            self.start_angle + i as f64 * self.scan_arc / (self.n_views - 1) as f64
        };
        Ok(deg.to_radians())
    }

    /// Precomputed per-view frames, in view order.
    pub fn frames(&self) -> Vec<ViewFrame> {
        (0..self.n_views)
            .map(|i| ViewFrame::new(self, self.view_angle(i).expect("index in range")))
            .collect()
    }
}

/// Free-function form of [`ProjectionGeometry::view_angle`].
pub fn view_angle(geom: &ProjectionGeometry, i: usize) -> Result<f64> {
    geom.view_angle(i)
}

/// Regular isotropic voxel lattice. Voxel `(ix, iy, iz)` has its center at
/// `center_offset + (i + 0.5 - n / 2) * voxel_size` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// mm, isotropic.
    pub voxel_size: f64,
    /// Displacement of the grid center from the isocenter, mm.
    pub center_offset: [f64; 3],
}

impl VoxelGrid {
    pub fn cube(n: usize, voxel_size: f64) -> Self {
        Self {
            nx: n,
            ny: n,
            nz: n,
            voxel_size,
            center_offset: [0.0; 3],
        }
    }

    /// 512³ at 0.31 mm.
    pub fn paper_diagnostic() -> Self {
        Self::cube(512, 0.31)
    }

    /// 920³ at 0.31 mm.
    pub fn paper_cc() -> Self {
        Self::cube(920, 0.31)
    }

    /// 64³ covering the same extent as [`VoxelGrid::paper_diagnostic`].
    pub fn desk_diagnostic() -> Self {
        Self::cube(64, 0.31 * 512.0 / 64.0)
    }

    /// 96³ at the desk diagnostic voxel size.
    pub fn desk_cc() -> Self {
        Self::cube(96, 0.31 * 512.0 / 64.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::invalid("voxel grid", "nx, ny, nz must be >= 1"));
        }
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::invalid("voxel grid", "voxel_size must be > 0"));
        }
        if self.center_offset.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("voxel grid", "center_offset must be finite"));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.ny + iy) * self.nx + ix
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let ix = idx % self.nx;
        let iy = (idx / self.nx) % self.ny;
        let iz = idx / (self.nx * self.ny);
        [ix, iy, iz]
    }

    #[inline]
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let c = |i: usize, n: usize, off: f64| off + (i as f64 + 0.5 - n as f64 / 2.0) * self.voxel_size;
        [
            c(ix, self.nx, self.center_offset[0]),
            c(iy, self.ny, self.center_offset[1]),
            c(iz, self.nz, self.center_offset[2]),
        ]
    }

    /// Lower corner of the grid box, mm.
    pub fn min_corner(&self) -> [f64; 3] {
        let d = self.dims();
        std::array::from_fn(|a| self.center_offset[a] - d[a] as f64 * self.voxel_size / 2.0)
    }

    pub fn max_corner(&self) -> [f64; 3] {
        let d = self.dims();
        std::array::from_fn(|a| self.center_offset[a] + d[a] as f64 * self.voxel_size / 2.0)
    }

    /// Length of the box diagonal, mm.
    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = (self.min_corner(), self.max_corner());
        (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt()
    }

    /// Whether `other`'s box lies inside this grid's box.
    pub fn contains_grid(&self, other: &VoxelGrid) -> bool {
        let tol = 1e-9 * self.diagonal().max(other.diagonal());
        let (lo, hi) = (self.min_corner(), self.max_corner());
        let (olo, ohi) = (other.min_corner(), other.max_corner());
        (0..3).all(|a| olo[a] >= lo[a] - tol && ohi[a] <= hi[a] + tol)
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.min_corner(), self.max_corner());
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }
}

/// Continuous detector position of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorCoord {
    pub u: f64,
    pub v: f64,
    pub inside: bool,
}

impl DetectorCoord {
    /// Nearest-neighbour pixel `(col, row)` when inside.
    #[inline]
    pub fn pixel(&self) -> Option<(usize, usize)> {
        self.inside.then_some((self.u as usize, self.v as usize))
    }
}

/// Geometry of a single view with the trigonometry precomputed.
#[derive(Debug, Clone, Copy)]
pub struct ViewFrame {
    cos: f64,
    sin: f64,
    sad: f64,
    sdd: f64,
    inv_pitch: f64,
    pitch: f64,
    cols: usize,
    rows: usize,
}

impl ViewFrame {
    pub fn new(geom: &ProjectionGeometry, angle: f64) -> Self {
        Self {
            cos: angle.cos(),
            sin: angle.sin(),
            sad: geom.source_axis_distance,
            sdd: geom.source_detector_distance,
            inv_pitch: 1.0 / geom.pixel_pitch,
            pitch: geom.pixel_pitch,
            cols: geom.detector_cols,
            rows: geom.detector_rows,
        }
    }

    #[inline]
    fn to_gantry(self, p: [f64; 3]) -> [f64; 3] {
        [
            self.cos * p[0] - self.sin * p[1],
            self.sin * p[0] + self.cos * p[1],
            p[2],
        ]
    }

    #[inline]
    fn to_world(self, g: [f64; 3]) -> [f64; 3] {
        [
            self.cos * g[0] + self.sin * g[1],
            -self.sin * g[0] + self.cos * g[1],
            g[2],
        ]
    }

    /// Perspective projection of a world point onto the detector.
    #[inline]
    pub fn project(&self, p: [f64; 3]) -> DetectorCoord {
        let g = self.to_gantry(p);
        let depth = self.sad - g[0];
        // Points on or behind the source plane have no image.
        if !(depth > 1e-9 * self.sad) {
            return DetectorCoord {
                u: f64::NAN,
                v: f64::NAN,
                inside: false,
            };
        }
        let scale = self.sdd / depth * self.inv_pitch;
        let u = g[1] * scale + self.cols as f64 / 2.0;
        let v = g[2] * scale + self.rows as f64 / 2.0;
        let inside = u >= 0.0 && u < self.cols as f64 && v >= 0.0 && v < self.rows as f64;
        DetectorCoord { u, v, inside }
    }

    pub fn source(&self) -> [f64; 3] {
        self.to_world([self.sad, 0.0, 0.0])
    }

    /// World position of continuous detector coordinate `(u, v)`.
    pub fn detector_point(&self, u: f64, v: f64) -> [f64; 3] {
        self.to_world([
            self.sad - self.sdd,
            (u - self.cols as f64 / 2.0) * self.pitch,
            (v - self.rows as f64 / 2.0) * self.pitch,
        ])
    }
}

/// Projects world point `p` (mm) at `angle` (radians).
pub fn project_point(geom: &ProjectionGeometry, angle: f64, p: [f64; 3]) -> DetectorCoord {
    ViewFrame::new(geom, angle).project(p)
}

/// Number of views in which each voxel center lands on the detector.
pub fn max_visitors(geom: &ProjectionGeometry, grid: &VoxelGrid) -> Volume<u32> {
    let frames = geom.frames();
    let mut data = vec![0u32; grid.len()];
    let slice = grid.nx * grid.ny;
    data.par_chunks_mut(slice.max(1)).enumerate().for_each(|(iz, plane)| {
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let c = grid.voxel_center(ix, iy, iz);
                plane[iy * grid.nx + ix] = frames.iter().filter(|f| f.project(c).inside).count() as u32;
            }
        }
    });
    Volume { grid: *grid, data }
}

/// Grid, centered on the isocenter, that covers every point visible in at
/// least `min_view_fraction` of the views.
///
/// The visible region is probed on a lattice spanning the source circle, so
/// the result is accurate to one probe spacing (`source_axis_distance / 48`)
/// before rounding up to whole voxels.
pub fn auto_cc_grid(geom: &ProjectionGeometry, voxel_size: f64, min_view_fraction: f64) -> Result<VoxelGrid> {
    geom.validate()?;
    if !(voxel_size > 0.0) {
        return Err(Error::invalid("voxel grid", "voxel_size must be > 0"));
    }
    if !(min_view_fraction > 0.0 && min_view_fraction <= 1.0) {
        return Err(Error::invalid("auto grid", "min_view_fraction must lie in (0, 1]"));
    }
    const HALF: i64 = 48;
    let step = geom.source_axis_distance / HALF as f64;
    let need = ((min_view_fraction * geom.n_views as f64).ceil() as usize).max(1);
    let frames = geom.frames();
    let extent = (-HALF..=HALF)
        .into_par_iter()
        .map(|k| {
            let mut ext = [0.0f64; 3];
            for j in -HALF..=HALF {
                for i in -HALF..=HALF {
                    let p = [i as f64 * step, j as f64 * step, k as f64 * step];
                    let seen = frames.iter().filter(|f| f.project(p).inside).count();
                    if seen >= need {
                        for a in 0..3 {
                            ext[a] = ext[a].max(p[a].abs() + step / 2.0);
                        }
                    }
                }
            }
            ext
        })
        .reduce(|| [0.0; 3], |a, b| std::array::from_fn(|i| a[i].max(b[i])));
    let xy = extent[0].max(extent[1]);
    let n = |half: f64| ((2.0 * half / voxel_size).ceil() as usize).max(1);
    Ok(VoxelGrid {
        nx: n(xy),
        ny: n(xy),
        nz: n(extent[2]),
        voxel_size,
        center_offset: [0.0; 3],
    })
}
