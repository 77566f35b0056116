//! Binary STL, one file per material.

use super::mesh::TriangleMesh;
use crate::error::{Error, Result};

const HEADER: &[u8] = b"veinforge binary stl";

pub fn export_stl(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = Vec::with_capacity(84 + 50 * mesh.len());
    let mut header = [0u8; 80];
    header[..HEADER.len()].copy_from_slice(HEADER);
    out.extend_from_slice(&header);
    out.extend_from_slice(&(mesh.len() as u32).to_le_bytes());
    for (i, t) in mesh.triangles.iter().enumerate() {
        let n = mesh.normal(i);
        for v in std::iter::once(&n).chain(t.iter()) {
            for c in v {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

/// Reads a binary STL back into a triangle soup (stored normals are ignored).
pub fn parse_stl(bytes: &[u8]) -> Result<TriangleMesh> {
    if bytes.len() < 84 {
        return Err(Error::Format("STL shorter than its header".into()));
    }
    let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    if bytes.len() != 84 + 50 * n {
        return Err(Error::Format(format!(
            "STL declares {n} triangles but has {} bytes",
            bytes.len()
        )));
    }
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let triangles = (0..n)
        .map(|i| {
            let base = 84 + 50 * i + 12;
            let v = |k: usize| [f(base + 12 * k), f(base + 12 * k + 4), f(base + 12 * k + 8)];
            [v(0), v(1), v(2)]
        })
        .collect();
    Ok(TriangleMesh { triangles })
}
