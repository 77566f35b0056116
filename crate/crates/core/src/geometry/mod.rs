//! Parametric finger phantom: an outer tissue cylinder along +z, bones with
//! thickened joint ends, and vein tubes projected onto a cylinder at a fixed
//! depth below the skin.
//!
//! All lengths are in mm. Soft tissue is implicit: whatever lies inside the
//! outer cylinder and outside every bone and vein.

mod contour;
mod dxf;
mod mesh;
mod stl;

pub use contour::{skeleton_to_contours, ContourSet, CAP_STEPS};
pub use dxf::{export_dxf, parse_dxf, DxfPolyline};
pub use mesh::{mesh_phantom, revolve_profile, sweep_tube, Triangle, TriangleMesh, DEFAULT_ANGULAR_STEPS};
pub use stl::{export_stl, parse_stl};

use std::f64::consts::PI;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::VeinSkeleton;
use crate::materials::{effective_mu, MaterialSpec, Palette};

pub type Point3 = [f64; 3];

#[inline]
pub(crate) fn v3(p: Point3) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MaterialId {
    Air,
    Tissue,
    Bone,
    Vein,
}

impl MaterialId {
    pub fn as_str(self) -> &'static str {
        match self {
            MaterialId::Air => "air",
            MaterialId::Tissue => "tissue",
            MaterialId::Bone => "bone",
            MaterialId::Vein => "vein",
        }
    }
}

impl fmt::Display for MaterialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One phalanx: a shaft cylinder with thicker cylindrical caps at both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoneSegment {
    pub z_start: f64,
    pub z_end: f64,
    pub shaft_radius: f64,
    pub joint_radius: f64,
    /// Axial length of each thickened end.
    pub joint_length: f64,
}

impl BoneSegment {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_end > self.z_start) {
            return Err(Error::Layout(format!("bone span [{}, {}] is empty", self.z_start, self.z_end)));
        }
        if !(self.shaft_radius > 0.0 && self.joint_length >= 0.0) {
            return Err(Error::Layout("bone radii and joint length must be positive".into()));
        }
        if self.joint_radius < self.shaft_radius {
            return Err(Error::Layout(format!(
                "joint radius {} is smaller than shaft radius {}",
                self.joint_radius, self.shaft_radius
            )));
        }
        if !(2.0 * self.joint_length < self.z_end - self.z_start) {
            return Err(Error::Layout(format!(
                "joints of length {} do not fit in a bone of length {}",
                self.joint_length,
                self.z_end - self.z_start
            )));
        }
        Ok(())
    }

    pub fn in_joint(&self, z: f64) -> bool {
        (z >= self.z_start && z <= self.z_start + self.joint_length)
            || (z >= self.z_end - self.joint_length && z <= self.z_end)
    }

    /// Bone radius at axial position `z`, `None` outside the bone.
    pub fn radius_at(&self, z: f64) -> Option<f64> {
        if z < self.z_start || z > self.z_end {
            None
        } else if self.in_joint(z) {
            Some(self.joint_radius)
        } else {
            Some(self.shaft_radius)
        }
    }

    /// Largest bone radius over `[z0, z1]`, `None` if the interval misses it.
    fn max_radius_over(&self, z0: f64, z1: f64) -> Option<f64> {
        if z1 < self.z_start || z0 > self.z_end {
            return None;
        }
        let touches_joint =
            z0 <= self.z_start + self.joint_length || z1 >= self.z_end - self.joint_length;
        Some(if touches_joint { self.joint_radius } else { self.shaft_radius })
    }

    /// The two thickened end spans.
    pub fn joint_spans(&self) -> [(f64, f64); 2] {
        [
            (self.z_start, self.z_start + self.joint_length),
            (self.z_end - self.joint_length, self.z_end),
        ]
    }

    pub fn shaft_span(&self) -> (f64, f64) {
        (self.z_start + self.joint_length, self.z_end - self.joint_length)
    }
}

/// Evenly partitions `[0, length]` minus `n_bones - 1` gaps into bones.
pub fn build_bone_layout(
    length: f64,
    n_bones: usize,
    shaft_radius: f64,
    joint_radius: f64,
    joint_length: f64,
    gap: f64,
) -> Result<Vec<BoneSegment>> {
    if n_bones == 0 {
        return Err(Error::Layout("at least one bone is required".into()));
    }
    if joint_radius < shaft_radius {
        return Err(Error::Layout(format!(
            "joint radius {joint_radius} is smaller than shaft radius {shaft_radius}"
        )));
    }
    if !(gap >= 0.0 && length > 0.0) {
        return Err(Error::Layout("length must be positive and gap non-negative".into()));
    }
    let n = n_bones as f64;
    if !(n * 2.0 * joint_length + (n - 1.0) * gap < length) {
        return Err(Error::Layout(format!(
            "{n_bones} bones with {joint_length} mm joints and {gap} mm gaps do not fit in {length} mm"
        )));
    }
    let span = (length - (n - 1.0) * gap) / n;
    (0..n_bones)
        .map(|i| {
            let z_start = i as f64 * (span + gap);
            let bone = BoneSegment {
                z_start,
                z_end: if i + 1 == n_bones { length } else { z_start + span },
                shaft_radius,
                joint_radius,
                joint_length,
            };
            bone.validate()?;
            Ok(bone)
        })
        .collect()
}

/// A vein as a tube of varying radius swept along a 3D polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VeinTube {
    pub path: Vec<Point3>,
    pub radius: Vec<f64>,
}

impl VeinTube {
    pub fn new(path: Vec<Point3>, radius: Vec<f64>) -> Result<Self> {
        let t = Self { path, radius };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.path.len() < 2 || self.path.len() != self.radius.len() {
            return Err(Error::Assembly("vein tube needs >= 2 points with one radius each".into()));
        }
        if self.radius.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Assembly("vein tube radii must be positive".into()));
        }
        Ok(())
    }

    pub fn max_radius(&self) -> f64 {
        self.radius.iter().copied().fold(0.0, f64::max)
    }

    /// Whether `p` lies strictly inside any segment capsule, with the radius
    /// interpolated at the closest point of the segment.
    pub fn contains(&self, p: Point3) -> bool {
        (0..self.path.len() - 1).any(|i| self.segment_contains(i, p))
    }

    pub(crate) fn segment_contains(&self, i: usize, p: Point3) -> bool {
        let a = v3(self.path[i]);
        let b = v3(self.path[i + 1]);
        let p = v3(p);
        let ab = b - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let r = self.radius[i] + t * (self.radius[i + 1] - self.radius[i]);
        (p - (a + ab * t)).norm_squared() < r * r
    }
}

/// Maps a 2D skeleton onto a cylinder of radius `outer_radius - depth` so
/// that lateral image distance becomes arc length: `z = x`,
/// `theta = (y - centre_y) / (R - depth)`.
pub fn project_to_cylinder(
    skel: &VeinSkeleton,
    outer_radius: f64,
    depth: f64,
    image_center_y: f64,
) -> Result<Vec<VeinTube>> {
    if !(depth >= 0.0 && depth < outer_radius) {
        return Err(Error::Projection(format!(
            "depth {depth} must lie in [0, {outer_radius})"
        )));
    }
    let rc = outer_radius - depth;
    let half = PI * rc;
    skel.polylines
        .iter()
        .map(|line| {
            let mut path = Vec::with_capacity(line.len());
            let mut radius = Vec::with_capacity(line.len());
            for p in line {
                let s = p.y - image_center_y;
                if !(s.abs() < half) {
                    return Err(Error::Projection(format!(
                        "lateral offset {s:.3} mm exceeds the half circumference {half:.3} mm"
                    )));
                }
                if !(p.width > 0.0) {
                    return Err(Error::Projection(format!(
                        "zero-width point at ({:.3}, {:.3})",
                        p.x, p.y
                    )));
                }
                let theta = s / rc;
                path.push([rc * theta.sin(), -rc * theta.cos(), p.x]);
                radius.push(p.width / 2.0);
            }
            VeinTube::new(path, radius).map_err(|e| Error::Projection(e.to_string()))
        })
        .collect()
}

/// The assembled, printable phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerPhantomModel {
    pub outer_radius: f64,
    pub length: f64,
    pub bones: Vec<BoneSegment>,
    pub veins: Vec<VeinTube>,
    /// Distance from the skin to the vein centrelines.
    pub vein_depth: f64,
    pub materials: Palette,
}

/// Step used when checking vein tubes against bones, mm.
const CLEARANCE_STEP: f64 = 0.05;

pub fn assemble_phantom(
    bones: Vec<BoneSegment>,
    veins: Vec<VeinTube>,
    outer_radius: f64,
    length: f64,
    vein_depth: f64,
    materials: Palette,
) -> Result<FingerPhantomModel> {
    let model = FingerPhantomModel {
        outer_radius,
        length,
        bones,
        veins,
        vein_depth,
        materials,
    };
    model.validate()?;
    Ok(model)
}

impl FingerPhantomModel {
    pub fn validate(&self) -> Result<()> {
        let (r_out, len) = (self.outer_radius, self.length);
        if !(r_out > 0.0 && len > 0.0 && r_out.is_finite() && len.is_finite()) {
            return Err(Error::Assembly("outer radius and length must be positive".into()));
        }
        if !(self.vein_depth >= 0.0 && self.vein_depth < r_out) {
            return Err(Error::Assembly(format!(
                "vein depth {} must lie in [0, {r_out})",
                self.vein_depth
            )));
        }
        self.materials.validate()?;
        let mut bones: Vec<&BoneSegment> = self.bones.iter().collect();
        bones.sort_by(|a, b| a.z_start.total_cmp(&b.z_start));
        for b in &bones {
            b.validate().map_err(|e| Error::Assembly(e.to_string()))?;
            if b.joint_radius > r_out || b.z_start < 0.0 || b.z_end > len {
                return Err(Error::Assembly(format!(
                    "bone [{}, {}] with radius {} lies outside the {r_out} x {len} mm cylinder",
                    b.z_start, b.z_end, b.joint_radius
                )));
            }
        }
        for pair in bones.windows(2) {
            if pair[1].z_start < pair[0].z_end {
                return Err(Error::Assembly(format!(
                    "bones [{}, {}] and [{}, {}] overlap",
                    pair[0].z_start, pair[0].z_end, pair[1].z_start, pair[1].z_end
                )));
            }
        }
        for (k, vein) in self.veins.iter().enumerate() {
            vein.validate()?;
            if self.vein_depth + vein.max_radius() >= r_out {
                return Err(Error::Assembly(format!(
                    "vein {k}: depth {} plus radius {} reaches the axis of a {r_out} mm cylinder",
                    self.vein_depth,
                    vein.max_radius()
                )));
            }
            for (p, &r) in vein.path.iter().zip(&vein.radius) {
                let rho = p[0].hypot(p[1]);
                if rho + r > r_out {
                    return Err(Error::Assembly(format!(
                        "vein {k} pierces the skin at z = {:.3} (centre {rho:.3} + radius {r:.3} > {r_out})",
                        p[2]
                    )));
                }
                if p[2] < 0.0 || p[2] > len {
                    return Err(Error::Assembly(format!(
                        "vein {k} leaves the finger axially at z = {:.3}",
                        p[2]
                    )));
                }
            }
            self.check_vein_clear_of_bones(k, vein)?;
        }
        Ok(())
    }

    fn check_vein_clear_of_bones(&self, k: usize, vein: &VeinTube) -> Result<()> {
        for i in 0..vein.path.len() - 1 {
            let a = v3(vein.path[i]);
            let b = v3(vein.path[i + 1]);
            let steps = ((b - a).norm() / CLEARANCE_STEP).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let q = a + (b - a) * t;
                let r = vein.radius[i] + t * (vein.radius[i + 1] - vein.radius[i]);
                let rho = q.x.hypot(q.y);
                for bone in &self.bones {
                    if let Some(br) = bone.max_radius_over(q.z - r, q.z + r) {
                        if rho - r < br {
                            return Err(Error::Assembly(format!(
                                "vein {k} intersects the bone [{}, {}] at z = {:.3}",
                                bone.z_start, bone.z_end, q.z
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("phantom model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("phantom description: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    pub fn material_spec(&self, id: MaterialId) -> Option<&MaterialSpec> {
        match id {
            MaterialId::Air => None,
            MaterialId::Tissue => Some(&self.materials.tissue),
            MaterialId::Bone => Some(&self.materials.bone),
            MaterialId::Vein => Some(&self.materials.vein),
        }
    }

    /// Effective absorption coefficient of a material, 1/mm; air is 0.
    pub fn mu(&self, id: MaterialId) -> f64 {
        self.material_spec(id).map_or(0.0, effective_mu)
    }

    /// Material ignoring veins: air, bone or tissue.
    pub fn base_material_at(&self, p: Point3) -> MaterialId {
        let rho = p[0].hypot(p[1]);
        if rho > self.outer_radius || p[2] < 0.0 || p[2] > self.length {
            return MaterialId::Air;
        }
        if self
            .bones
            .iter()
            .any(|b| b.radius_at(p[2]).is_some_and(|r| rho < r))
        {
            MaterialId::Bone
        } else {
            MaterialId::Tissue
        }
    }

    /// Material at a point; veins take priority over bone over tissue.
    pub fn material_at(&self, p: Point3) -> MaterialId {
        let base = self.base_material_at(p);
        if base == MaterialId::Air {
            return base;
        }
        if self.veins.iter().any(|v| v.contains(p)) {
            MaterialId::Vein
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrinterConstraints {
    /// Smallest printable feature, mm.
    pub min_feature: f64,
}

impl Default for PrinterConstraints {
    fn default() -> Self {
        Self { min_feature: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrintabilityReport {
    /// Vein points whose radius was raised.
    pub modified_points: usize,
    pub total_points: usize,
}

/// Raises every vein diameter below `min_feature` to exactly `min_feature`.
pub fn enforce_printability(
    model: &FingerPhantomModel,
    pc: &PrinterConstraints,
) -> Result<(FingerPhantomModel, PrintabilityReport)> {
    if !(pc.min_feature > 0.0) {
        return Err(Error::Config(format!("min_feature {} must be positive", pc.min_feature)));
    }
    let min_r = pc.min_feature / 2.0;
    let mut out = model.clone();
    let mut report = PrintabilityReport::default();
    for vein in &mut out.veins {
        for r in &mut vein.radius {
            report.total_points += 1;
            if *r < min_r {
                *r = min_r;
                report.modified_points += 1;
            }
        }
    }
    Ok((out, report))
}
