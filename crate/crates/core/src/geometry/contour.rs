//! 2D vein outlines for laser cutting or mould making.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::extract::VeinSkeleton;

/// Interior vertices on each semicircular end cap.
pub const CAP_STEPS: usize = 16;

/// Closed counter-clockwise polygons in image-plane millimetres.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContourSet {
    pub contours: Vec<Vec<[f64; 2]>>,
}

pub(crate) fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

impl ContourSet {
    pub fn validate(&self) -> Result<()> {
        for (k, c) in self.contours.iter().enumerate() {
            if c.len() < 3 {
                return Err(Error::Contour(format!("contour {k} has {} vertices", c.len())));
            }
            if signed_area(c).abs() <= 0.0 {
                return Err(Error::Contour(format!("contour {k} has zero area")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.contours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contours.is_empty()
    }

    pub fn areas(&self) -> Vec<f64> {
        self.contours.iter().map(|c| signed_area(c)).collect()
    }
}

fn unit(v: [f64; 2]) -> Option<[f64; 2]> {
    let n = v[0].hypot(v[1]);
    (n > 0.0).then(|| [v[0] / n, v[1] / n])
}

/// Offsets each polyline by half its local width on both sides and closes
/// the ends with semicircles. A polyline of `n` distinct points gives
/// `2n + 2 * CAP_STEPS` vertices.
pub fn skeleton_to_contours(skel: &VeinSkeleton) -> Result<ContourSet> {
    let mut contours = Vec::with_capacity(skel.polylines.len());
    for (k, line) in skel.polylines.iter().enumerate() {
        let mut pts: Vec<([f64; 2], f64)> = Vec::with_capacity(line.len());
        for p in line {
            if !(p.width > 0.0) {
                return Err(Error::Contour(format!(
                    "polyline {k} has zero width at ({:.3}, {:.3})",
                    p.x, p.y
                )));
            }
            if pts.last().is_none_or(|(q, _)| *q != [p.x, p.y]) {
                pts.push(([p.x, p.y], p.width / 2.0));
            }
        }
        if pts.len() < 2 {
            return Err(Error::Contour(format!("polyline {k} collapses to a point")));
        }
        let n = pts.len();
        let seg: Vec<[f64; 2]> = (0..n - 1)
            .map(|i| unit([pts[i + 1].0[0] - pts[i].0[0], pts[i + 1].0[1] - pts[i].0[1]]).unwrap())
            .collect();
        let tangents: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let (a, b) = (seg[i.saturating_sub(1)], seg[i.min(n - 2)]);
                // a full reversal has no bisector; fall back to the incoming segment
                unit([a[0] + b[0], a[1] + b[1]]).unwrap_or(a)
            })
            .collect();
        let normal = |i: usize| [-tangents[i][1], tangents[i][0]];
        let offset = |i: usize, s: f64| {
            let (p, r) = pts[i];
            let nv = normal(i);
            [p[0] + s * r * nv[0], p[1] + s * r * nv[1]]
        };
        let cap = |i: usize, from: [f64; 2], out: &mut Vec<[f64; 2]>| {
            let (p, r) = pts[i];
            let base = from[1].atan2(from[0]);
            for s in 1..=CAP_STEPS {
                let phi = base + PI * s as f64 / (CAP_STEPS + 1) as f64;
                out.push([p[0] + r * phi.cos(), p[1] + r * phi.sin()]);
            }
        };
        let mut poly = Vec::with_capacity(2 * n + 2 * CAP_STEPS);
        poly.extend((0..n).map(|i| offset(i, -1.0)));
        let ne = normal(n - 1);
        cap(n - 1, [-ne[0], -ne[1]], &mut poly);
        poly.extend((0..n).rev().map(|i| offset(i, 1.0)));
        cap(0, normal(0), &mut poly);
        contours.push(poly);
    }
    let set = ContourSet { contours };
    set.validate()?;
    Ok(set)
}
