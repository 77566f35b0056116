//! Minimal AutoCAD R12 DXF: closed POLYLINE entities only.

use std::fmt::Write as _;

use super::contour::ContourSet;
use crate::error::{Error, Result};

const LAYER: &str = "VEINS";

fn pair(out: &mut String, code: i32, value: &str) {
    let _ = write!(out, "{code}\n{value}\n");
}

fn coord(out: &mut String, x: f64, y: f64) {
    pair(out, 10, &format!("{x:.6}"));
    pair(out, 20, &format!("{y:.6}"));
    pair(out, 30, "0.000000");
}

/// Serialises contours as closed polylines on layer `VEINS`. Output depends
/// only on the input, so equal contours give byte-identical files.
pub fn export_dxf(contours: &ContourSet) -> Result<String> {
    contours.validate()?;
    let mut out = String::new();
    pair(&mut out, 0, "SECTION");
    pair(&mut out, 2, "HEADER");
    pair(&mut out, 9, "$ACADVER");
    pair(&mut out, 1, "AC1009");
    pair(&mut out, 0, "ENDSEC");
    pair(&mut out, 0, "SECTION");
    pair(&mut out, 2, "ENTITIES");
    for c in &contours.contours {
        pair(&mut out, 0, "POLYLINE");
        pair(&mut out, 8, LAYER);
        pair(&mut out, 66, "1");
        pair(&mut out, 70, "1");
        coord(&mut out, 0.0, 0.0);
        for v in c {
            pair(&mut out, 0, "VERTEX");
            pair(&mut out, 8, LAYER);
            coord(&mut out, v[0], v[1]);
        }
        pair(&mut out, 0, "SEQEND");
        pair(&mut out, 8, LAYER);
    }
    pair(&mut out, 0, "ENDSEC");
    pair(&mut out, 0, "EOF");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DxfPolyline {
    pub vertices: Vec<[f64; 2]>,
    pub closed: bool,
}

impl ContourSet {
    /// Closed polylines become contours; open ones are rejected.
    pub fn from_dxf(polylines: &[DxfPolyline]) -> Result<Self> {
        if polylines.iter().any(|p| !p.closed) {
            return Err(Error::Contour("open polyline in DXF".into()));
        }
        let set = ContourSet {
            contours: polylines.iter().map(|p| p.vertices.clone()).collect(),
        };
        set.validate()?;
        Ok(set)
    }
}

/// Reads back POLYLINE/VERTEX entities; everything else is skipped.
pub fn parse_dxf(text: &str) -> Result<Vec<DxfPolyline>> {
    let lines: Vec<&str> = text.lines().collect();
    if !lines.len().is_multiple_of(2) {
        return Err(Error::Format("DXF has an odd number of lines".into()));
    }
    let mut pairs = Vec::with_capacity(lines.len() / 2);
    for chunk in lines.chunks(2) {
        let code: i32 = chunk[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad DXF group code {:?}", chunk[0])))?;
        pairs.push((code, chunk[1].trim()));
    }
    let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Format(format!("bad DXF number {v:?}")));

    let mut out = Vec::new();
    let mut current: Option<DxfPolyline> = None;
    let mut entity = "";
    let mut vertex: [Option<f64>; 2] = [None, None];
    let flush_vertex = |current: &mut Option<DxfPolyline>, vertex: &mut [Option<f64>; 2]| -> Result<()> {
        if let (Some(p), [Some(x), Some(y)]) = (current.as_mut(), *vertex) {
            p.vertices.push([x, y]);
        } else if current.is_some() {
            return Err(Error::Format("VERTEX without coordinates".into()));
        }
        *vertex = [None, None];
        Ok(())
    };
    for (code, value) in pairs {
        if code == 0 {
            if entity == "VERTEX" {
                flush_vertex(&mut current, &mut vertex)?;
            }
            match value {
                "POLYLINE" => {
                    if current.is_some() {
                        return Err(Error::Format("POLYLINE without SEQEND".into()));
                    }
                    current = Some(DxfPolyline {
                        vertices: Vec::new(),
                        closed: false,
                    });
                }
                "SEQEND" => match current.take() {
                    Some(p) => out.push(p),
                    None => return Err(Error::Format("SEQEND outside a POLYLINE".into())),
                },
                _ => {}
            }
            entity = value;
            continue;
        }
        match (entity, code) {
            ("POLYLINE", 70) => {
                let flags: i32 = value.parse().map_err(|_| Error::Format(format!("bad flags {value:?}")))?;
                if let Some(p) = current.as_mut() {
                    p.closed = flags & 1 == 1;
                }
            }
            ("VERTEX", 10) => vertex[0] = Some(num(value)?),
            ("VERTEX", 20) => vertex[1] = Some(num(value)?),
            _ => {}
        }
    }
    if current.is_some() {
        return Err(Error::Format("unterminated POLYLINE".into()));
    }
    Ok(out)
}
