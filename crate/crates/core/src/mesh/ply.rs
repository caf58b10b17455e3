//! Binary little-endian PLY output and a structural validator for it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::TriangleMesh;
use crate::error::{Error, Result};

pub fn write_ply<W: Write>(mesh: &TriangleMesh, mut w: W) -> Result<()> {
    let normals = mesh.normals.as_ref();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\ncomment nsdf-loam mesh\n");
    header += &format!("element vertex {}\n", mesh.vertices.len());
    header += "property float x\nproperty float y\nproperty float z\n";
    if normals.is_some() {
        header += "property float nx\nproperty float ny\nproperty float nz\n";
    }
    header += &format!("element face {}\n", mesh.triangles.len());
    header += "property list uchar int vertex_indices\nend_header\n";
    w.write_all(header.as_bytes())?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v.iter() {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        if let Some(n) = normals {
            for c in n[i].iter() {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for &i in t {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ply_file(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    write_ply(mesh, BufWriter::new(File::create(path)?))
}

/// Summary of a validated PLY file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlyInfo {
    pub vertices: usize,
    pub faces: usize,
    pub has_normals: bool,
}

fn scalar_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Checks a binary little-endian PLY holding a `vertex` element with float
/// `x y z` (optionally `nx ny nz`) and a `face` element with a
/// `vertex_indices` list: header grammar, exact body length, finite
/// coordinates and face indices in range.
pub fn validate_ply(bytes: &[u8]) -> Result<PlyInfo> {
    const END: &[u8] = b"end_header\n";
    let header_len = bytes
        .windows(END.len())
        .position(|w| w == END)
        .map(|p| p + END.len())
        .ok_or_else(|| parse_err(0, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_len]).map_err(|_| parse_err(0, "header is not ASCII"))?;

    struct Element {
        name: String,
        count: usize,
        props: Vec<(String, Vec<String>)>,
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut offset = 0;
    for (n, line) in header.lines().enumerate() {
        let words: Vec<&str> = line.split_whitespace().collect();
        let bad = |m: &str| parse_err(offset, format!("header line {}: {m}", n + 1));
        match (n, words.as_slice()) {
            (0, ["ply"]) => {}
            (0, _) => return Err(bad("expected magic 'ply'")),
            (1, ["format", "binary_little_endian", "1.0"]) => {}
            (1, _) => return Err(bad("expected binary_little_endian 1.0")),
            (_, ["comment", ..]) | (_, ["obj_info", ..]) => {}
            (_, ["element", name, count]) => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                props: Vec::new(),
            }),
            (_, ["property", rest @ ..]) => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                let (name, ty) = match rest {
                    ["list", c, i, name] if scalar_size(c).is_some() && scalar_size(i).is_some() => {
                        (name, vec!["list".into(), c.to_string(), i.to_string()])
                    }
                    [ty, name] if scalar_size(ty).is_some() => (name, vec![ty.to_string()]),
                    _ => return Err(bad("bad property")),
                };
                el.props.push((name.to_string(), ty));
            }
            (_, ["end_header"]) => {}
            _ => return Err(bad("unrecognized line")),
        }
        offset += line.len() + 1;
    }

    let [vertex, face] = elements.as_slice() else {
        return Err(parse_err(0, "expected exactly the vertex and face elements"));
    };
    if vertex.name != "vertex" || face.name != "face" {
        return Err(parse_err(0, "expected vertex then face elements"));
    }
    let names: Vec<&str> = vertex.props.iter().map(|(n, _)| n.as_str()).collect();
    let has_normals = match names.as_slice() {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "nx", "ny", "nz"] => true,
        _ => return Err(parse_err(0, "vertex properties must be x y z [nx ny nz]")),
    };
    if vertex.props.iter().any(|(_, t)| t != &["float".to_string()]) {
        return Err(parse_err(0, "vertex properties must be float"));
    }
    let [(fname, fty)] = face.props.as_slice() else {
        return Err(parse_err(0, "face must have a single list property"));
    };
    if fname != "vertex_indices" || fty.len() != 3 || fty[1] != "uchar" || !matches!(fty[2].as_str(), "int" | "uint") {
        return Err(parse_err(0, "face property must be 'list uchar int vertex_indices'"));
    }

    let mut pos = header_len;
    let stride = if has_normals { 24 } else { 12 };
    let vbytes = vertex.count.checked_mul(stride).ok_or_else(|| parse_err(pos, "vertex count overflow"))?;
    let body = bytes.get(pos..pos + vbytes).ok_or_else(|| parse_err(bytes.len(), "truncated vertex data"))?;
    for (i, c) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(parse_err(pos + 4 * i, "non-finite vertex value"));
        }
    }
    pos += vbytes;
    for _ in 0..face.count {
        let n = *bytes.get(pos).ok_or_else(|| parse_err(pos, "truncated face data"))? as usize;
        if n < 3 {
            return Err(parse_err(pos, format!("face with {n} vertices")));
        }
        pos += 1;
        for _ in 0..n {
            let raw = bytes.get(pos..pos + 4).ok_or_else(|| parse_err(pos, "truncated face data"))?;
            let idx = u32::from_le_bytes(raw.try_into().expect("4 bytes"));
            if idx as usize >= vertex.count {
                return Err(parse_err(pos, format!("face index {idx} out of range")));
            }
            pos += 4;
        }
    }
    if pos != bytes.len() {
        return Err(parse_err(pos, "trailing bytes after face data"));
    }
    Ok(PlyInfo {
        vertices: vertex.count,
        faces: face.count,
        has_normals,
    })
}
