//! Mesh files (PLY, OBJ) and the sequence manifest.

mod obj;
mod ply;

pub use obj::{read_obj, write_obj};
pub use ply::{read_ply, read_ply_with_properties, write_ply, write_ply_ascii, PlyData};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mesh::TriMesh;
use crate::{Error, Result};

/// Reads a mesh by extension (`.ply` or `.obj`); normals are recomputed.
pub fn read_mesh(path: &Path) -> Result<TriMesh> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("ply") => read_ply(path),
        Some("obj") => read_obj(path),
        _ => Err(Error::Parse { path: path.to_path_buf(), message: "unknown mesh extension".into() }),
    }
}

/// Frame list of a sequence plus optional ground truth and masks. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ground_truth: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masks: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visible: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<serde_json::Value>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Manifest for an input directory: `manifest.json` when present,
    /// otherwise every PLY/OBJ file in lexicographic order.
    pub fn discover(dir: &Path) -> Result<Self> {
        if !dir.exists() {
            return Err(Error::MissingFile(dir.to_path_buf()));
        }
        let manifest = dir.join(MANIFEST_NAME);
        if manifest.exists() {
            return Self::load(&manifest);
        }
        let mut frames: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| {
                let l = n.to_ascii_lowercase();
                l.ends_with(".ply") || l.ends_with(".obj")
            })
            .collect();
        frames.sort();
        Ok(Self { frames, ground_truth: Vec::new(), masks: Vec::new(), visible: Vec::new(), rest: None, scenario: None })
    }

    pub fn frame_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.frames.iter().map(|f| dir.join(f)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discover_sorts_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.ply", "a.obj", "c.txt", "a10.ply"] {
            std::fs::write(dir.path().join(name), "").unwrap();
        }
        let m = Manifest::discover(dir.path()).unwrap();
        assert_eq!(m.frames, vec!["a.obj", "a10.ply", "b.ply"]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            frames: vec!["f0.ply".into()],
            ground_truth: vec!["g0.ply".into()],
            masks: vec![vec![1, 2]],
            visible: vec![vec![0]],
            rest: None,
            scenario: Some(serde_json::json!({"kind": "bending"})),
        };
        let p = dir.path().join(MANIFEST_NAME);
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
        assert_eq!(Manifest::discover(dir.path()).unwrap(), m);
    }

    #[test]
    fn missing_inputs_are_reported() {
        assert!(matches!(read_mesh(Path::new("/nonexistent/x.ply")), Err(Error::MissingFile(_))));
        assert!(matches!(Manifest::discover(Path::new("/nonexistent")), Err(Error::MissingFile(_))));
    }
}
