//! Closed triangle surfaces for each material region.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use nalgebra::Vector3;

use super::{v3, FingerPhantomModel, MaterialId, Point3};
use crate::error::{Error, Result};

/// Default angular resolution of revolved and swept surfaces.
pub const DEFAULT_ANGULAR_STEPS: usize = 48;
pub const MIN_ANGULAR_STEPS: usize = 8;

pub type Triangle = [Point3; 3];

/// Triangle soup with counter-clockwise winding seen from outside.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub triangles: Vec<Triangle>,
}

fn normal_of(t: &Triangle) -> Vector3<f64> {
    (v3(t[1]) - v3(t[0])).cross(&(v3(t[2]) - v3(t[0])))
}

impl TriangleMesh {
    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn extend(&mut self, other: TriangleMesh) {
        self.triangles.extend(other.triangles);
    }

    /// Unit outward normal of triangle `i`.
    pub fn normal(&self, i: usize) -> Point3 {
        let n = normal_of(&self.triangles[i]);
        let n = n / n.norm();
        [n.x, n.y, n.z]
    }

    /// Enclosed volume by the divergence theorem; positive for outward
    /// winding.
    pub fn volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| v3(t[0]).dot(&v3(t[1]).cross(&v3(t[2]))) / 6.0)
            .sum()
    }

    pub fn has_degenerate(&self) -> bool {
        self.triangles.iter().any(|t| !(normal_of(t).norm() > 0.0))
    }

    /// Every undirected edge is shared by exactly two triangles that traverse
    /// it in opposite directions. Vertices are compared by exact position.
    pub fn is_watertight(&self) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let key = |p: Point3| p.map(f64::to_bits);
        // (forward, backward) traversals per undirected edge
        let mut edges: HashMap<([u64; 3], [u64; 3]), (u32, u32)> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (key(t[k]), key(t[(k + 1) % 3]));
                if a == b {
                    return false;
                }
                let e = edges.entry((a.min(b), a.max(b))).or_default();
                if a < b {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
        edges.values().all(|&c| c == (1, 1))
    }
}

fn ring(centre: Vector3<f64>, u: Vector3<f64>, w: Vector3<f64>, r: f64, steps: usize) -> Vec<Point3> {
    (0..steps)
        .map(|k| {
            let phi = 2.0 * PI * k as f64 / steps as f64;
            let p = centre + (u * phi.cos() + w * phi.sin()) * r;
            [p.x, p.y, p.z]
        })
        .collect()
}

enum Ring {
    Axis(Point3),
    Loop(Vec<Point3>),
}

fn stitch(rings: &[Ring], steps: usize, out: &mut Vec<Triangle>) {
    for pair in rings.windows(2) {
        for k in 0..steps {
            let k1 = (k + 1) % steps;
            match (&pair[0], &pair[1]) {
                (Ring::Loop(a), Ring::Loop(b)) => {
                    out.push([a[k], a[k1], b[k1]]);
                    out.push([a[k], b[k1], b[k]]);
                }
                (Ring::Axis(c), Ring::Loop(b)) => out.push([*c, b[k1], b[k]]),
                (Ring::Loop(a), Ring::Axis(c)) => out.push([a[k], a[k1], *c]),
                (Ring::Axis(_), Ring::Axis(_)) => {}
            }
        }
    }
}

/// Surface of revolution about the z axis. `profile` is a list of
/// `(radius, z)` running from an axis point to an axis point with the solid
/// on the inner side (bottom face first).
pub fn revolve_profile(profile: &[(f64, f64)], steps: usize) -> TriangleMesh {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(profile.len());
    for &p in profile {
        if pts.last() != Some(&p) {
            pts.push(p);
        }
    }
    let (u, w) = (Vector3::x(), Vector3::y());
    let rings: Vec<Ring> = pts
        .iter()
        .map(|&(r, z)| {
            if r == 0.0 {
                Ring::Axis([0.0, 0.0, z])
            } else {
                Ring::Loop(ring(Vector3::new(0.0, 0.0, z), u, w, r, steps))
            }
        })
        .collect();
    let mut triangles = Vec::new();
    stitch(&rings, steps, &mut triangles);
    TriangleMesh { triangles }
}

fn perpendicular(t: Vector3<f64>) -> Vector3<f64> {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let n = helper - t * helper.dot(&t);
    n / n.norm()
}

/// Closed tube along a polyline using parallel-transported frames, capped
/// with flat fans.
pub fn sweep_tube(path: &[Point3], radius: &[f64], steps: usize) -> Result<TriangleMesh> {
    let mut pts: Vec<(Vector3<f64>, f64)> = Vec::with_capacity(path.len());
    for (p, &r) in path.iter().zip(radius) {
        let p = v3(*p);
        if pts.last().is_none_or(|(q, _)| *q != p) {
            pts.push((p, r));
        }
    }
    if pts.len() < 2 {
        return Err(Error::Assembly("vein tube collapses to a point".into()));
    }
    let n = pts.len();
    let seg: Vec<Vector3<f64>> = (0..n - 1).map(|i| (pts[i + 1].0 - pts[i].0).normalize()).collect();
    let mut rings: Vec<Ring> = Vec::with_capacity(n + 2);
    let p0 = pts[0].0;
    rings.push(Ring::Axis([p0.x, p0.y, p0.z]));
    let mut normal = perpendicular(seg[0]);
    for i in 0..n {
        let (a, b) = (seg[i.saturating_sub(1)], seg[i.min(n - 2)]);
        let sum = a + b;
        let t = if sum.norm() > 1e-9 { sum.normalize() } else { b };
        let projected = normal - t * normal.dot(&t);
        normal = if projected.norm() > 1e-9 { projected.normalize() } else { perpendicular(t) };
        let binormal = t.cross(&normal);
        rings.push(Ring::Loop(ring(pts[i].0, normal, binormal, pts[i].1, steps)));
    }
    let pn = pts[n - 1].0;
    rings.push(Ring::Axis([pn.x, pn.y, pn.z]));
    let mut triangles = Vec::new();
    stitch(&rings, steps, &mut triangles);
    Ok(TriangleMesh { triangles })
}

fn bone_profile(b: &super::BoneSegment) -> Vec<(f64, f64)> {
    let (s0, s1) = b.shaft_span();
    vec![
        (0.0, b.z_start),
        (b.joint_radius, b.z_start),
        (b.joint_radius, s0),
        (b.shaft_radius, s0),
        (b.shaft_radius, s1),
        (b.joint_radius, s1),
        (b.joint_radius, b.z_end),
        (0.0, b.z_end),
    ]
}

/// One closed shell set per material present in the model. Tissue is the
/// outer cylinder; bones and veins are separate inner shells.
pub fn mesh_phantom(model: &FingerPhantomModel, angular_steps: usize) -> Result<BTreeMap<MaterialId, TriangleMesh>> {
    if angular_steps < MIN_ANGULAR_STEPS {
        return Err(Error::Config(format!(
            "angular_steps {angular_steps} is below {MIN_ANGULAR_STEPS}"
        )));
    }
    let steps = angular_steps;
    model.validate()?;
    let mut out = BTreeMap::new();
    let (r, l) = (model.outer_radius, model.length);
    out.insert(MaterialId::Tissue, revolve_profile(&[(0.0, 0.0), (r, 0.0), (r, l), (0.0, l)], steps));
    if !model.bones.is_empty() {
        let mut bones = TriangleMesh::default();
        for b in &model.bones {
            bones.extend(revolve_profile(&bone_profile(b), steps));
        }
        out.insert(MaterialId::Bone, bones);
    }
    if !model.veins.is_empty() {
        let mut veins = TriangleMesh::default();
        for v in &model.veins {
            veins.extend(sweep_tube(&v.path, &v.radius, steps)?);
        }
        out.insert(MaterialId::Vein, veins);
    }
    Ok(out)
}
