//! Wavefront OBJ: positions and faces only.

use std::fmt::Write as _;
use std::path::Path;

use crate::mesh::TriMesh;
use crate::{Error, Result, Vec3};

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let fail = |line: usize, message: &str| Error::Parse { path: path.to_path_buf(), message: format!("line {line}: {message}") };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts.take(3).map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| fail(ln + 1, "bad vertex"))?;
                if c.len() != 3 {
                    return Err(fail(ln + 1, "vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in parts {
                    let first = t.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| fail(ln + 1, "bad face index"))?;
                    let resolved = if i > 0 { i - 1 } else { vertices.len() as i64 + i };
                    if resolved < 0 {
                        return Err(fail(ln + 1, "face index out of range"));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(fail(ln + 1, "face needs three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut out = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::shapes::icosphere;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        let m = icosphere(2.0, 1);
        write_obj(&p, &m).unwrap();
        assert_eq!(read_obj(&p).unwrap(), m);
    }

    #[test]
    fn slashes_negative_indices_and_quads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.obj");
        std::fs::write(&p, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 -2 -1\n").unwrap();
        assert_eq!(read_obj(&p).unwrap().faces(), &[[0, 1, 2], [0, 2, 3]]);
    }
}
