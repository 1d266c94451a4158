//! PLY reader (ASCII and binary) and writer (binary little-endian, double
//! precision positions, optional integer vertex properties).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::mesh::TriMesh;
use crate::{Error, Result, Vec3};

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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }

    fn decode(self, b: &[u8], little: bool) -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let arr = b[..std::mem::size_of::<$t>()].try_into().expect("sized slice");
                (if little { <$t>::from_le_bytes(arr) } else { <$t>::from_be_bytes(arr) }) as f64
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => num!(i16),
            Self::U16 => num!(u16),
            Self::I32 => num!(i32),
            Self::U32 => num!(u32),
            Self::F32 => num!(f32),
            Self::F64 => num!(f64),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, kind: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Format {
    Ascii,
    Binary { little: bool },
}

/// A mesh plus any integer per-vertex properties found in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyData {
    pub mesh: TriMesh,
    pub int_properties: Vec<(String, Vec<i64>)>,
}

pub fn read_ply(path: &Path) -> Result<TriMesh> {
    Ok(read_ply_with_properties(path)?.mesh)
}

pub fn read_ply_with_properties(path: &Path) -> Result<PlyData> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let fail = |message: String| Error::Parse { path: path.to_path_buf(), message };
    let mut reader = BufReader::new(file);
    let (format, elements) = read_header(&mut reader).map_err(fail)?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut ints: Vec<(String, Vec<i64>)> = Vec::new();
    let mut tokens = Tokens::new(format);
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        if is_vertex {
            for p in &el.properties {
                if let Property::Scalar { name, kind } = p {
                    if kind.is_integer() {
                        ints.push((name.clone(), Vec::with_capacity(el.count)));
                    }
                }
            }
        }
        for _ in 0..el.count {
            let mut pos = [f64::NAN; 3];
            let mut int_slot = 0;
            for p in &el.properties {
                match p {
                    Property::Scalar { name, kind } => {
                        let v = tokens.scalar(&mut reader, *kind).map_err(fail)?;
                        if is_vertex {
                            match name.as_str() {
                                "x" => pos[0] = v,
                                "y" => pos[1] = v,
                                "z" => pos[2] = v,
                                _ => {}
                            }
                            if kind.is_integer() {
                                ints[int_slot].1.push(v as i64);
                                int_slot += 1;
                            }
                        }
                    }
                    Property::List { name, count, item } => {
                        let n = tokens.scalar(&mut reader, *count).map_err(fail)? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(tokens.scalar(&mut reader, *item).map_err(fail)?);
                        }
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            if n < 3 {
                                return Err(fail(format!("face with {n} vertices")));
                            }
                            let idx: Vec<usize> = idx
                                .iter()
                                .map(|&x| if x >= 0.0 { Ok(x as usize) } else { Err(fail("negative face index".into())) })
                                .collect::<Result<_>>()?;
                            for k in 1..n - 1 {
                                faces.push([idx[0], idx[k], idx[k + 1]]);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                if pos.iter().any(|c| !c.is_finite()) {
                    return Err(fail("vertex without finite x, y, z".into()));
                }
                vertices.push(Vec3::new(pos[0], pos[1], pos[2]));
            }
        }
    }
    let mesh = TriMesh::new(vertices, faces).map_err(|e| fail(e.to_string()))?;
    Ok(PlyData { mesh, int_properties: ints })
}

fn read_header(reader: &mut impl BufRead) -> std::result::Result<(Format, Vec<Element>), String> {
    let mut line = String::new();
    let mut next = |reader: &mut dyn BufRead| -> std::result::Result<String, String> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| e.to_string())?;
        if n == 0 {
            return Err("unexpected end of header".into());
        }
        Ok(line.trim().to_string())
    };
    if next(reader)? != "ply" {
        return Err("missing ply magic".into());
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next(reader)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.first().copied() {
            Some("format") => {
                format = Some(match parts.get(1).copied() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::Binary { little: true },
                    Some("binary_big_endian") => Format::Binary { little: false },
                    other => return Err(format!("unsupported format {other:?}")),
                });
            }
            Some("element") => {
                if parts.len() != 3 {
                    return Err(format!("bad element line `{l}`"));
                }
                let count = parts[2].parse().map_err(|_| format!("bad element count `{}`", parts[2]))?;
                elements.push(Element { name: parts[1].to_string(), count, properties: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or("property before element")?;
                if parts.get(1) == Some(&"list") {
                    if parts.len() != 5 {
                        return Err(format!("bad list property `{l}`"));
                    }
                    let count = Scalar::parse(parts[2]).ok_or(format!("bad type {}", parts[2]))?;
                    let item = Scalar::parse(parts[3]).ok_or(format!("bad type {}", parts[3]))?;
                    el.properties.push(Property::List { name: parts[4].to_string(), count, item });
                } else {
                    if parts.len() != 3 {
                        return Err(format!("bad property `{l}`"));
                    }
                    let kind = Scalar::parse(parts[1]).ok_or(format!("bad type {}", parts[1]))?;
                    el.properties.push(Property::Scalar { name: parts[2].to_string(), kind });
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("end_header") => break,
            Some(other) => return Err(format!("unexpected header keyword `{other}`")),
        }
    }
    Ok((format.ok_or("missing format line")?, elements))
}

struct Tokens {
    format: Format,
    pending: std::collections::VecDeque<String>,
}

impl Tokens {
    fn new(format: Format) -> Self {
        Self { format, pending: Default::default() }
    }

    fn scalar(&mut self, reader: &mut impl BufRead, kind: Scalar) -> std::result::Result<f64, String> {
        match self.format {
            Format::Ascii => {
                while self.pending.is_empty() {
                    let mut line = String::new();
                    if reader.read_line(&mut line).map_err(|e| e.to_string())? == 0 {
                        return Err("unexpected end of data".into());
                    }
                    self.pending.extend(line.split_whitespace().map(str::to_string));
                }
                let t = self.pending.pop_front().expect("nonempty");
                t.parse::<f64>().map_err(|_| format!("bad number `{t}`"))
            }
            Format::Binary { little } => {
                let mut buf = [0u8; 8];
                reader.read_exact(&mut buf[..kind.size()]).map_err(|_| "unexpected end of data".to_string())?;
                Ok(kind.decode(&buf, little))
            }
        }
    }
}

fn header(mesh: &TriMesh, format: &str, ints: &[(&str, &[i64])], coord: &str) -> String {
    let mut h = format!("ply\nformat {format} 1.0\nelement vertex {}\n", mesh.vertex_count());
    for c in ["x", "y", "z"] {
        h += &format!("property {coord} {c}\n");
    }
    for (name, _) in ints {
        h += &format!("property int {name}\n");
    }
    h += &format!("element face {}\nproperty list uchar int vertex_indices\nend_header\n", mesh.face_count());
    h
}

/// Binary little-endian PLY with double-precision positions and the given
/// integer vertex properties.
pub fn write_ply(path: &Path, mesh: &TriMesh, int_properties: &[(&str, &[i64])]) -> Result<()> {
    for (name, values) in int_properties {
        if values.len() != mesh.vertex_count() {
            return Err(Error::InvalidArgument(format!("property {name} has the wrong length")));
        }
    }
    let mut out = Vec::with_capacity(mesh.vertex_count() * 24 + mesh.face_count() * 13 + 256);
    out.extend_from_slice(header(mesh, "binary_little_endian", int_properties, "double").as_bytes());
    for (i, v) in mesh.vertices().iter().enumerate() {
        for c in v.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for (_, values) in int_properties {
            let x = i32::try_from(values[i]).map_err(|_| Error::InvalidArgument("property exceeds i32".into()))?;
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for f in mesh.faces() {
        out.push(3);
        for &i in f {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// ASCII PLY, full round-trip precision.
pub fn write_ply_ascii(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut out = header(mesh, "ascii", &[], "double");
    for v in mesh.vertices() {
        out += &format!("{:?} {:?} {:?}\n", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        out += &format!("3 {} {} {}\n", f[0], f[1], f[2]);
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
fn read_all(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::shapes::icosphere;

    #[test]
    fn binary_round_trip_with_properties() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        let m = icosphere(1.3, 1);
        let ids: Vec<i64> = (0..m.vertex_count() as i64).map(|i| i % 5).collect();
        write_ply(&p, &m, &[("source_frame", &ids)]).unwrap();
        let back = read_ply_with_properties(&p).unwrap();
        assert_eq!(back.mesh.vertices(), m.vertices());
        assert_eq!(back.mesh.faces(), m.faces());
        assert_eq!(back.int_properties, vec![("source_frame".to_string(), ids)]);
        let text = read_all(&p).unwrap();
        let head = String::from_utf8_lossy(&text[..200]);
        assert!(head.find("element vertex").unwrap() < head.find("element face").unwrap());
    }

    #[test]
    fn ascii_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        let m = icosphere(0.7, 1);
        write_ply_ascii(&p, &m).unwrap();
        assert_eq!(read_ply(&p).unwrap(), m);
    }

    #[test]
    fn float_quads_are_triangulated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.ply");
        let mut data = b"ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar uint vertex_indices\nend_header\n".to_vec();
        for v in [[0f32, 0., 0.], [1., 0., 0.], [1., 1., 0.], [0., 1., 0.]] {
            for c in v {
                data.extend_from_slice(&c.to_le_bytes());
            }
        }
        data.push(4);
        for i in 0u32..4 {
            data.extend_from_slice(&i.to_le_bytes());
        }
        std::fs::write(&p, data).unwrap();
        let m = read_ply(&p).unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn malformed_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        std::fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n").unwrap();
        assert!(matches!(read_ply(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "not a ply").unwrap();
        assert!(matches!(read_ply(&p), Err(Error::Parse { .. })));
    }
}
