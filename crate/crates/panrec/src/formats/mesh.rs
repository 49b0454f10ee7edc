//! Labeled triangle meshes as PLY or OBJ, chosen by file extension.
//!
//! PLY faces may carry `category` and `instance` properties (instance 0 means
//! none). PLY files are written binary little-endian with double vertices;
//! ASCII and big-endian files are read too. OBJ labels travel in object names
//! `label_<category>_<instance>` with `none` for stuff.

use std::io::{self, BufRead, Write};
use std::path::Path;

use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};

use panrec_core::{Label, TriangleMesh, Vec3};

use super::{bad_data, create, open};
use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Ply,
    Obj,
}

impl MeshFormat {
    pub fn of(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("ply") => Ok(MeshFormat::Ply),
            Some("obj") => Ok(MeshFormat::Obj),
            _ => Err(Error::format(path, "mesh files must end in .ply or .obj")),
        }
    }
}

pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let mut r = open(path)?;
    match MeshFormat::of(path)? {
        MeshFormat::Ply => decode_ply(&mut r),
        MeshFormat::Obj => decode_obj(&mut r),
    }
    .at(path)
}

pub fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let format = MeshFormat::of(path)?;
    let mut w = create(path)?;
    match format {
        MeshFormat::Ply => encode_ply(&mut w, mesh),
        MeshFormat::Obj => encode_obj(&mut w, mesh),
    }
    .at(path)?;
    w.flush().at(path)
}

fn scalar(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v as f64,
        Property::UChar(v) => v as f64,
        Property::Short(v) => v as f64,
        Property::UShort(v) => v as f64,
        Property::Int(v) => v as f64,
        Property::UInt(v) => v as f64,
        Property::Float(v) => v as f64,
        Property::Double(v) => v,
        _ => return None,
    })
}

fn index_list(p: &Property) -> Option<Vec<i64>> {
    Some(match p {
        Property::ListChar(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUChar(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListShort(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUShort(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListInt(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUInt(v) => v.iter().map(|&x| x as i64).collect(),
        _ => return None,
    })
}

fn label_value(p: Option<&Property>, what: &str) -> io::Result<Option<u32>> {
    let Some(p) = p else { return Ok(None) };
    let v = scalar(p).ok_or_else(|| bad_data(format!("face {what} must be a scalar")))?;
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(bad_data(format!("face {what} {v} is not a valid id")));
    }
    Ok(Some(v as u32))
}

/// Splits a polygon into a triangle fan.
fn fan(poly: &[u32]) -> impl Iterator<Item = [u32; 3]> + '_ {
    (1..poly.len().saturating_sub(1)).map(move |i| [poly[0], poly[i], poly[i + 1]])
}

pub fn decode_ply(r: &mut impl BufRead) -> io::Result<TriangleMesh> {
    let ply = Parser::<DefaultElement>::new().read_ply(r)?;
    let mut vertices = Vec::new();
    for v in ply.payload.get("vertex").map(Vec::as_slice).unwrap_or_default() {
        let coord = |k: &str| {
            v.get(k)
                .and_then(scalar)
                .ok_or_else(|| bad_data(format!("vertex without numeric {k}")))
        };
        vertices.push(Vec3::new(coord("x")?, coord("y")?, coord("z")?));
    }
    let faces = ply.payload.get("face").map(Vec::as_slice).unwrap_or_default();
    let labeled = faces.first().is_some_and(|f| f.contains_key("category"));
    let (mut triangles, mut labels) = (Vec::new(), Vec::new());
    for f in faces {
        let list = f
            .get("vertex_indices")
            .or_else(|| f.get("vertex_index"))
            .and_then(index_list)
            .ok_or_else(|| bad_data("face without a vertex index list"))?;
        if list.iter().any(|&i| i < 0 || i >= vertices.len() as i64) {
            return Err(bad_data("face references a missing vertex"));
        }
        let poly: Vec<u32> = list.iter().map(|&i| i as u32).collect();
        let label = if labeled {
            let category = label_value(f.get("category"), "category")?
                .ok_or_else(|| bad_data("faces must all carry a category"))?;
            let instance = label_value(f.get("instance"), "instance")?.filter(|&i| i != 0);
            Some(Label::new(category, instance))
        } else {
            None
        };
        for t in fan(&poly) {
            triangles.push(t);
            labels.extend(label);
        }
    }
    TriangleMesh::new(vertices, triangles, labeled.then_some(labels)).map_err(|e| bad_data(e.to_string()))
}

/// Binary little-endian writer. The list writer of `ply-rs` 0.1.3 emits the
/// element count instead of the list length, so only its parser is used.
pub fn encode_ply(w: &mut impl Write, mesh: &TriangleMesh) -> io::Result<()> {
    writeln!(w, "ply\nformat binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    for k in ["x", "y", "z"] {
        writeln!(w, "property double {k}")?;
    }
    writeln!(w, "element face {}", mesh.triangles.len())?;
    writeln!(w, "property list uchar uint vertex_indices")?;
    if mesh.labels.is_some() {
        writeln!(w, "property uint category\nproperty uint instance")?;
    }
    writeln!(w, "end_header")?;
    for v in &mesh.vertices {
        for x in v.to_array() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for (t, tri) in mesh.triangles.iter().enumerate() {
        w.write_all(&[3u8])?;
        for i in tri {
            w.write_all(&i.to_le_bytes())?;
        }
        if let Some(l) = mesh.label(t) {
            w.write_all(&l.category.to_le_bytes())?;
            w.write_all(&l.instance.unwrap_or(0).to_le_bytes())?;
        }
    }
    Ok(())
}

fn object_name(l: Label) -> String {
    match l.instance {
        Some(i) => format!("label_{}_{i}", l.category),
        None => format!("label_{}_none", l.category),
    }
}

fn parse_object_name(name: &str) -> Option<Label> {
    let rest = name.strip_prefix("label_")?;
    let (cat, inst) = rest.split_once('_')?;
    let category = cat.parse().ok()?;
    let instance = match inst {
        "none" => None,
        s => Some(s.parse().ok().filter(|&i| i != 0)?),
    };
    Some(Label::new(category, instance))
}

pub fn encode_obj(w: &mut impl Write, mesh: &TriangleMesh) -> io::Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {:?} {:?} {:?}", v.x, v.y, v.z)?;
    }
    let mut current = None;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let label = mesh.label(t);
        if t == 0 || label != current {
            match label {
                Some(l) => writeln!(w, "o {}", object_name(l))?,
                None => writeln!(w, "o mesh")?,
            }
            current = label;
        }
        writeln!(w, "f {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1)?;
    }
    Ok(())
}

/// Reads an OBJ file. Vertices are re-indexed per object, so shared vertices
/// between objects are duplicated.
pub fn decode_obj(r: &mut impl BufRead) -> io::Result<TriangleMesh> {
    let opts = tobj::LoadOptions {
        triangulate: true,
        single_index: true,
        ..Default::default()
    };
    let (models, _) =
        tobj::load_obj_buf(r, &opts, |_| Err(tobj::LoadError::OpenFileFailed)).map_err(|e| bad_data(e.to_string()))?;
    let labeled = !models.is_empty() && models.iter().all(|m| parse_object_name(&m.name).is_some());
    let (mut vertices, mut triangles, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for m in &models {
        let base = vertices.len() as u32;
        vertices.extend(m.mesh.positions.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])));
        for t in m.mesh.indices.chunks_exact(3) {
            triangles.push([base + t[0], base + t[1], base + t[2]]);
            if labeled {
                labels.push(parse_object_name(&m.name).expect("checked above"));
            }
        }
    }
    TriangleMesh::new(vertices, triangles, labeled.then_some(labels)).map_err(|e| bad_data(e.to_string()))
}
