//! OBJ (with `v x y z r g b` colours) and binary little-endian PLY.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{Mesh, Triangle};
use crate::real::{self, lit, Real, Vec3};

pub const DEFAULT_GRAY: f64 = 0.5;

/// A parsed mesh and any non-fatal issues met while reading it.
#[derive(Debug, Clone)]
pub struct MeshRead<T> {
    pub mesh: Mesh<T>,
    pub warnings: Vec<String>,
}

fn f32s<T: Real>(v: Vec3<T>) -> [f32; 3] {
    v.map(|c| real::to_f64(c) as f32)
}

pub fn write_obj<W: Write, T: Real>(w: &mut W, mesh: &Mesh<T>) -> std::io::Result<()> {
    for (p, c) in mesh.positions.iter().zip(&mesh.colors) {
        let (p, c) = (f32s(*p), f32s(*c));
        writeln!(w, "v {} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])?;
    }
    for t in mesh.triangles.iter() {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

pub fn read_obj<R: BufRead, T: Real>(r: R, name: &str) -> Result<MeshRead<T>> {
    let err = |line: usize, message: String| Error::Parse {
        path: name.to_string(),
        line,
        message,
    };
    let mut positions = Vec::new();
    let mut colors: Vec<Option<Vec3<T>>> = Vec::new();
    let mut triangles: Vec<Triangle> = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| err(lineno, e.to_string()))?;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let vals = it
                    .map(|s| s.parse::<f64>().map_err(|_| err(lineno, format!("bad number {s:?}"))))
                    .collect::<Result<Vec<f64>>>()?;
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(err(lineno, "non-finite vertex value".into()));
                }
                match vals.len() {
                    3 | 4 => colors.push(None),
                    6 | 7 => colors.push(Some([lit(vals[3]), lit(vals[4]), lit(vals[5])])),
                    n => return Err(err(lineno, format!("vertex has {n} values, expected 3 or 6"))),
                }
                positions.push([lit(vals[0]), lit(vals[1]), lit(vals[2])]);
            }
            Some("f") => {
                let idx = it
                    .map(|s| {
                        let first = s.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| err(lineno, format!("bad face index {s:?}")))?;
                        let resolved = if i > 0 {
                            i - 1
                        } else if i < 0 {
                            positions.len() as i64 + i
                        } else {
                            -1
                        };
                        if resolved < 0 || resolved >= positions.len() as i64 {
                            return Err(err(lineno, format!("face index {i} out of range")));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<Result<Vec<u32>>>()?;
                if idx.len() < 3 {
                    return Err(err(lineno, "face needs at least 3 vertices".into()));
                }
                for j in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[j], idx[j + 1]]);
                }
            }
            _ => {}
        }
    }
    let missing = colors.iter().filter(|c| c.is_none()).count();
    let mut warnings = Vec::new();
    if missing > 0 {
        warnings.push(format!(
            "{name}: {missing} vertices without colour; using {DEFAULT_GRAY} gray"
        ));
    }
    let gray = [lit::<T>(DEFAULT_GRAY); 3];
    let mesh = Mesh {
        colors: colors.into_iter().map(|c| c.unwrap_or(gray)).collect(),
        positions,
        normals: None,
        triangles: Arc::new(triangles),
    };
    mesh.validate()?;
    Ok(MeshRead { mesh, warnings })
}

pub fn write_ply<W: Write, T: Real>(w: &mut W, mesh: &Mesh<T>) -> std::io::Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float red\nproperty float green\nproperty float blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.positions.len(),
        mesh.triangles.len()
    )?;
    for (p, c) in mesh.positions.iter().zip(&mesh.colors) {
        for v in f32s(*p).into_iter().chain(f32s(*c)) {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    for t in mesh.triangles.iter() {
        w.write_u8(3)?;
        for i in t {
            w.write_i32::<LittleEndian>(*i as i32)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn read<R: Read>(self, r: &mut R) -> std::io::Result<f64> {
        Ok(match self {
            Scalar::I8 => r.read_i8()? as f64,
            Scalar::U8 => r.read_u8()? as f64,
            Scalar::I16 => r.read_i16::<LittleEndian>()? as f64,
            Scalar::U16 => r.read_u16::<LittleEndian>()? as f64,
            Scalar::I32 => r.read_i32::<LittleEndian>()? as f64,
            Scalar::U32 => r.read_u32::<LittleEndian>()? as f64,
            Scalar::F32 => r.read_f32::<LittleEndian>()? as f64,
            Scalar::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

pub fn read_ply<R: BufRead, T: Real>(mut r: R, name: &str) -> Result<MeshRead<T>> {
    let err = |line: usize, message: String| Error::Parse {
        path: name.to_string(),
        line,
        message,
    };
    let mut elements: Vec<Element> = Vec::new();
    let mut lineno = 0;
    loop {
        let mut line = String::new();
        lineno += 1;
        if r.read_line(&mut line).map_err(|e| err(lineno, e.to_string()))? == 0 {
            return Err(err(lineno, "header ended without end_header".into()));
        }
        let line = line.trim();
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["ply"] if lineno == 1 => {}
            _ if lineno == 1 => return Err(err(1, "missing ply magic".into())),
            ["format", "binary_little_endian", _] => {}
            ["format", f, _] => return Err(err(lineno, format!("unsupported PLY format {f}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", n, c] => elements.push(Element {
                name: n.to_string(),
                count: c.parse().map_err(|_| err(lineno, format!("bad element count {c:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, n] => {
                let (Some(ct), Some(it)) = (Scalar::parse(ct), Scalar::parse(it)) else {
                    return Err(err(lineno, "unknown list property type".into()));
                };
                elements
                    .last_mut()
                    .ok_or_else(|| err(lineno, "property before element".into()))?
                    .props
                    .push(Property::List(n.to_string(), ct, it));
            }
            ["property", t, n] => {
                let t = Scalar::parse(t).ok_or_else(|| err(lineno, format!("unknown property type {t:?}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| err(lineno, "property before element".into()))?
                    .props
                    .push(Property::Scalar(n.to_string(), t));
            }
            ["end_header"] => break,
            _ => return Err(err(lineno, format!("unrecognised header line {line:?}"))),
        }
    }
    let body = |e: std::io::Error| Error::Format(format!("{name}: truncated PLY body: {e}"));
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut normals = Vec::new();
    let mut triangles = Vec::new();
    let mut warnings = Vec::new();
    let mut colour_scale = 1.0;
    for el in &elements {
        if el.name == "vertex" {
            let has = |n: &str| el.props.iter().any(|p| matches!(p, Property::Scalar(m, _) if m == n));
            for n in ["x", "y", "z"] {
                if !has(n) {
                    return Err(Error::Format(format!("{name}: vertex element lacks {n}")));
                }
            }
            if !has("red") {
                warnings.push(format!("{name}: vertices without colour; using {DEFAULT_GRAY} gray"));
            }
            let is_u8 = el
                .props
                .iter()
                .any(|p| matches!(p, Property::Scalar(m, Scalar::U8) if m == "red"));
            if is_u8 {
                colour_scale = 1.0 / 255.0;
            }
        }
        for _ in 0..el.count {
            let mut vals = std::collections::HashMap::new();
            for p in &el.props {
                match p {
                    Property::Scalar(n, t) => {
                        vals.insert(n.as_str(), t.read(&mut r).map_err(body)?);
                    }
                    Property::List(n, ct, it) => {
                        let c = ct.read(&mut r).map_err(body)? as usize;
                        let items = (0..c).map(|_| it.read(&mut r)).collect::<std::io::Result<Vec<f64>>>().map_err(body)?;
                        if el.name == "face" && (n == "vertex_indices" || n == "vertex_index") {
                            if items.len() < 3 {
                                return Err(Error::Format(format!("{name}: face with {} vertices", items.len())));
                            }
                            for j in 1..items.len() - 1 {
                                triangles.push([items[0] as u32, items[j] as u32, items[j + 1] as u32]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                let g = |k: &str, d: f64| vals.get(k).copied().unwrap_or(d);
                positions.push([lit::<T>(g("x", 0.0)), lit(g("y", 0.0)), lit(g("z", 0.0))]);
                let c = |k: &str| {
                    vals.get(k)
                        .map(|v| v * colour_scale)
                        .unwrap_or(DEFAULT_GRAY)
                };
                colors.push([lit::<T>(c("red")), lit(c("green")), lit(c("blue"))]);
                if vals.contains_key("nx") {
                    normals.push([lit::<T>(g("nx", 0.0)), lit(g("ny", 0.0)), lit(g("nz", 0.0))]);
                }
            }
        }
    }
    let had_normals = !normals.is_empty();
    let normals: Option<Vec<Vec3<T>>> = normals
        .iter()
        .map(|n| real::normalize(*n))
        .collect::<Option<Vec<_>>>()
        .filter(|n| had_normals && n.len() == positions.len());
    if had_normals && normals.is_none() {
        warnings.push("vertex normals contain zero vectors; ignored".to_string());
    }
    let mesh = Mesh {
        normals,
        positions,
        colors,
        triangles: Arc::new(triangles),
    };
    mesh.validate()?;
    Ok(MeshRead { mesh, warnings })
}

fn is_ply(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

/// Writes OBJ or PLY depending on the extension.
pub fn save_mesh<T: Real>(path: impl AsRef<Path>, mesh: &Mesh<T>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let res = if is_ply(path) { write_ply(&mut w, mesh) } else { write_obj(&mut w, mesh) };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Reads OBJ or PLY depending on the extension.
pub fn load_mesh<T: Real>(path: impl AsRef<Path>) -> Result<MeshRead<T>> {
    let path = path.as_ref();
    let f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let name = path.display().to_string();
    if is_ply(path) {
        read_ply(f, &name)
    } else {
        read_obj(f, &name)
    }
}
