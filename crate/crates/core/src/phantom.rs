//! Synthetic scenes built from analytic primitives, with paired
//! with-metal / without-metal variants.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::projector::Volume;

/// Attenuation coefficients, mm⁻¹.
pub mod attenuation {
    pub const SOFT_TISSUE: f64 = 0.02;
    pub const BONE: f64 = 0.05;
    pub const METAL: f64 = 10.0 * BONE;
}

/// Primitive shape with its size parameters (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Finite cylinder along `axis` (normalized on use).
    Cylinder {
        axis: [f64; 3],
        radius: f64,
        half_length: f64,
    },
    /// Axis-aligned box.
    Box {
        half_extents: [f64; 3],
    },
    /// Segment of half-length `half_length` along `axis`, swept by a ball.
    Capsule {
        axis: [f64; 3],
        radius: f64,
        half_length: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    /// mm⁻¹.
    pub attenuation: f64,
    pub is_metal: bool,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Primitive {
    pub fn sphere(center: [f64; 3], radius: f64, attenuation: f64, is_metal: bool) -> Self {
        Self {
            shape: Shape::Sphere { radius },
            center,
            attenuation,
            is_metal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let nonzero_axis = |a: [f64; 3]| dot(a, a) > 0.0 && a.iter().all(|v| v.is_finite());
        let ok = match &self.shape {
            Shape::Sphere { radius } => positive(*radius),
            Shape::Cylinder {
                axis,
                radius,
                half_length,
            }
            | Shape::Capsule {
                axis,
                radius,
                half_length,
            } => positive(*radius) && positive(*half_length) && nonzero_axis(*axis),
            Shape::Box { half_extents } => half_extents.iter().all(|&h| positive(h)),
        };
        if !ok {
            return Err(Error::invalid(
                "primitive",
                format!("non-positive size in {:?}", self.shape),
            ));
        }
        if !(self.attenuation >= 0.0) || !self.attenuation.is_finite() {
            return Err(Error::invalid("primitive", "attenuation must be >= 0"));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("primitive", "center must be finite"));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match &self.shape {
            Shape::Sphere { radius } => dot(d, d) <= radius * radius,
            Shape::Box { half_extents } => (0..3).all(|a| d[a].abs() <= half_extents[a]),
            Shape::Cylinder {
                axis,
                radius,
                half_length,
            } => {
                let ax = unit(*axis);
                let along = dot(d, ax);
                along.abs() <= *half_length && dot(d, d) - along * along <= radius * radius
            }
            Shape::Capsule {
                axis,
                radius,
                half_length,
            } => {
                let ax = unit(*axis);
                let along = dot(d, ax).clamp(-half_length, *half_length);
                let q = [d[0] - along * ax[0], d[1] - along * ax[1], d[2] - along * ax[2]];
                dot(q, q) <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    /// Later primitives overwrite earlier ones where they overlap.
    pub primitives: Vec<Primitive>,
    pub background_attenuation: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !(self.background_attenuation >= 0.0) {
            return Err(Error::invalid("scene", "background_attenuation must be >= 0"));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn metal(&self) -> impl Iterator<Item = &Primitive> {
        self.primitives.iter().filter(|p| p.is_metal)
    }

    /// Attenuation at a point: last containing primitive, else background.
    pub fn attenuation_at(&self, p: [f64; 3]) -> f64 {
        self.primitives
            .iter()
            .rev()
            .find(|prim| prim.contains(p))
            .map_or(self.background_attenuation, |prim| prim.attenuation)
    }
}

/// Samples the scene at every voxel center.
pub fn voxelize(scene: &Scene, grid: &VoxelGrid) -> Volume<f32> {
    let plane = (grid.nx * grid.ny).max(1);
    let mut data = vec![0f32; grid.len()];
    data.par_chunks_mut(plane).enumerate().for_each(|(iz, buf)| {
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                buf[iy * grid.nx + ix] = scene.attenuation_at(grid.voxel_center(ix, iy, iz)) as f32;
            }
        }
    });
    Volume { grid: *grid, data }
}

/// Voxel-center membership of the union of the scene's metal primitives.
pub fn metal_mask(scene: &Scene, grid: &VoxelGrid) -> Volume<u8> {
    let data = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            let c = grid.voxel_center(x, y, z);
            scene.metal().any(|p| p.contains(c)) as u8
        })
        .collect();
    Volume { grid: *grid, data }
}

/// `(with_metal, without_metal)`: the scene itself and the scene with every
/// metal primitive dropped.
pub fn split_metal(scene: &Scene) -> (Scene, Scene) {
    let without = Scene {
        primitives: scene.primitives.iter().filter(|p| !p.is_metal).cloned().collect(),
        background_attenuation: scene.background_attenuation,
    };
    (scene.clone(), without)
}

/// Radius of the diagnostic field of view used to place catalog metal,
/// half the width of a 512³ grid at 0.31 mm.
pub const FOV_RADIUS_MM: f64 = 512.0 * 0.31 / 2.0;

/// Half-width of the 96³ desk consistency grid; catalog content stays inside it.
pub const CC_HALF_WIDTH_MM: f64 = 96.0 * 0.31 * 512.0 / 64.0 / 2.0;

fn knee(tissue_radius: f64) -> Vec<Primitive> {
    use attenuation::*;
    let z = [0.0, 0.0, 1.0];
    vec![
        Primitive {
            shape: Shape::Cylinder {
                axis: z,
                radius: tissue_radius,
                half_length: 70.0,
            },
            center: [0.0; 3],
            attenuation: SOFT_TISSUE,
            is_metal: false,
        },
        Primitive {
            shape: Shape::Cylinder {
                axis: z,
                radius: 18.0,
                half_length: 70.0,
            },
            center: [-6.0, 4.0, 0.0],
            attenuation: BONE,
            is_metal: false,
        },
        Primitive {
            shape: Shape::Cylinder {
                axis: [1.0, 0.0, 0.0],
                radius: 7.0,
                half_length: 30.0,
            },
            center: [30.0, -25.0, -20.0],
            attenuation: BONE,
            is_metal: false,
        },
    ]
}

/// Named scenes exercising metal inside the field of view, metal straddling
/// its border, and scattered small fragments.
pub fn standard_phantoms() -> BTreeMap<String, Scene> {
    use attenuation::*;
    let mut cat = BTreeMap::new();

    // Screw through the bone and a plate on its surface.
    let mut inside = knee(60.0);
    inside.push(Primitive {
        shape: Shape::Capsule {
            axis: [1.0, 0.3, 0.0],
            radius: 4.5,
            half_length: 14.0,
        },
        center: [-6.0, 4.0, -8.0],
        attenuation: METAL,
        is_metal: true,
    });
    inside.push(Primitive {
        shape: Shape::Box {
            half_extents: [3.0, 9.0, 22.0],
        },
        center: [15.0, 4.0, 6.0],
        attenuation: METAL,
        is_metal: true,
    });
    cat.insert(
        "inside_fov".to_string(),
        Scene {
            primitives: inside,
            background_attenuation: 0.0,
        },
    );

    // Plate on the bone plus a skin marker beyond the diagnostic FOV.
    let mut out = knee(95.0);
    out.push(Primitive {
        shape: Shape::Box {
            half_extents: [3.0, 9.0, 20.0],
        },
        center: [15.0, 4.0, 0.0],
        attenuation: METAL,
        is_metal: true,
    });
    out.push(Primitive::sphere([98.0, 0.0, 4.0], 8.0, METAL, true));
    cat.insert(
        "out_of_fov".to_string(),
        Scene {
            primitives: out,
            background_attenuation: 0.0,
        },
    );

    let mut frags = knee(60.0);
    for (c, r) in [
        ([-6.0, 4.0, 10.0], 4.0),
        ([-14.0, -4.0, -6.0], 3.5),
        ([4.0, 12.0, -16.0], 4.5),
        ([28.0, -25.0, -20.0], 3.5),
        ([-20.0, 30.0, 14.0], 4.0),
    ] {
        frags.push(Primitive::sphere(c, r, METAL, true));
    }
    cat.insert(
        "fragments".to_string(),
        Scene {
            primitives: frags,
            background_attenuation: 0.0,
        },
    );
    cat
}

pub fn phantom(name: &str) -> Result<Scene> {
    standard_phantoms()
        .remove(name)
        .ok_or_else(|| Error::UnknownPhantom(name.to_string()))
}
