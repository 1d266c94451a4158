//! Flat, hashable pipeline configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::fusion::{AlignmentOptions, AlignmentWeights, FusionOptions, TemplateOptions, MAX_FRAMES};
use crate::registration::{CorrespondenceOptions, RegistrationOptions, RegistrationWeights};
use crate::segmentation::SegmentationOptions;
use crate::solver::SolverOptions;
use crate::warping::{RefineWeights, WarpOptions};
use crate::{Error, Result};

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "DT_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    // pairwise registration
    pub reg_rigid: f64,
    pub reg_smooth: f64,
    pub reg_fit: f64,
    pub reg_tempo: f64,
    pub reg_point: f64,
    pub reg_plane: f64,
    pub icp_rounds: usize,
    pub gn_iterations: usize,
    pub prune_factor: f64,
    pub max_normal_angle_deg: f64,
    pub warm_start: bool,
    // global alignment and fusion
    pub align_rigid: f64,
    pub align_smooth: f64,
    pub align_corr: f64,
    pub align_iterations_per_frame: usize,
    pub align_polish_iterations: usize,
    pub reference_frame: usize,
    pub max_frames: usize,
    pub vertices_per_node: f64,
    pub skin_neighbors: usize,
    pub voxel_resolution: f64,
    pub truncation_voxels: f64,
    // segmentation
    /// Cluster count; the largest per-frame node count when absent.
    pub clusters: Option<usize>,
    pub segmentation_lambda: f64,
    pub segmentation_neighborhood: usize,
    pub expansion_sweeps: usize,
    // warping
    pub patch_smoothness: f64,
    pub ray_cutoff_fraction: f64,
    pub fallback_neighbors: usize,
    pub refine: bool,
    pub refine_rigid: f64,
    pub refine_smooth: f64,
    pub refine_tempo: f64,
    pub refine_data: f64,
    pub refine_samples: usize,
    // solver
    pub solver_max_iterations: usize,
    pub solver_relative_tolerance: f64,
    pub solver_step_tolerance: f64,
    pub solver_initial_damping: f64,
    pub solver_max_damping: f64,
    pub solver_max_backtracks: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let reg = RegistrationOptions::default();
        let al = AlignmentOptions::default();
        let tpl = TemplateOptions::default();
        let seg = SegmentationOptions::default();
        let warp = WarpOptions::default();
        let solver = SolverOptions::default();
        Self {
            reg_rigid: reg.weights.rigid,
            reg_smooth: reg.weights.smooth,
            reg_fit: reg.weights.fit,
            reg_tempo: reg.weights.tempo,
            reg_point: reg.weights.point,
            reg_plane: reg.weights.plane,
            icp_rounds: reg.icp_rounds,
            gn_iterations: reg.gn_iterations,
            prune_factor: reg.correspondence.prune_factor,
            max_normal_angle_deg: reg.correspondence.max_normal_angle_deg,
            warm_start: true,
            align_rigid: al.weights.rigid,
            align_smooth: al.weights.smooth,
            align_corr: al.weights.corr,
            align_iterations_per_frame: al.iterations_per_frame,
            align_polish_iterations: al.polish_iterations,
            reference_frame: al.reference,
            max_frames: al.max_frames,
            vertices_per_node: tpl.vertices_per_node,
            skin_neighbors: tpl.skin_neighbors,
            voxel_resolution: tpl.fusion.resolution,
            truncation_voxels: tpl.fusion.truncation_voxels,
            clusters: None,
            segmentation_lambda: seg.lambda,
            segmentation_neighborhood: seg.neighborhood,
            expansion_sweeps: seg.max_sweeps,
            patch_smoothness: warp.patch_smoothness,
            ray_cutoff_fraction: warp.ray_cutoff_fraction,
            fallback_neighbors: warp.fallback_neighbors,
            refine: warp.refine,
            refine_rigid: warp.weights.rigid,
            refine_smooth: warp.weights.smooth,
            refine_tempo: warp.weights.tempo,
            refine_data: warp.weights.data,
            refine_samples: warp.refine_samples,
            solver_max_iterations: solver.max_iterations,
            solver_relative_tolerance: solver.relative_tolerance,
            solver_step_tolerance: solver.step_tolerance,
            solver_initial_damping: solver.initial_damping,
            solver_max_damping: solver.max_damping,
            solver_max_backtracks: solver.max_backtracks,
        }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses a flag or environment value: JSON when it parses, else a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl PipelineConfig {
    /// Layers defaults, then a JSON file, then `DT_*` variables from `env`,
    /// then `key=value` overrides.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(Self::default())? else {
            unreachable!("config serializes to an object")
        };
        let known: Vec<String> = map.keys().cloned().collect();
        let set = |map: &mut Map<String, Value>, key: &str, value: Value, origin: &str| -> Result<()> {
            if !known.iter().any(|k| k == key) {
                return Err(config_error(format!("unknown config key `{key}` ({origin})")));
            }
            map.insert(key.to_string(), value);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
                _ => Error::Io(e),
            })?;
            let parsed: Value =
                serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            let Value::Object(entries) = parsed else {
                return Err(config_error(format!("{}: expected a JSON object", path.display())));
            };
            for (k, v) in entries {
                set(&mut map, &k, v, "config file")?;
            }
        }
        let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        for (k, v) in env {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase();
            if known.contains(&key) {
                set(&mut map, &key, parse_value(&v), "environment")?;
            }
        }
        for (k, v) in overrides {
            set(&mut map, k, parse_value(v), "command line")?;
        }
        let config: Self = serde_json::from_value(Value::Object(map)).map_err(|e| config_error(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("reg_rigid", self.reg_rigid),
            ("reg_smooth", self.reg_smooth),
            ("reg_fit", self.reg_fit),
            ("reg_tempo", self.reg_tempo),
            ("reg_point", self.reg_point),
            ("reg_plane", self.reg_plane),
            ("align_rigid", self.align_rigid),
            ("align_smooth", self.align_smooth),
            ("align_corr", self.align_corr),
            ("segmentation_lambda", self.segmentation_lambda),
            ("patch_smoothness", self.patch_smoothness),
            ("refine_rigid", self.refine_rigid),
            ("refine_smooth", self.refine_smooth),
            ("refine_tempo", self.refine_tempo),
            ("refine_data", self.refine_data),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(config_error(format!("{name} must be a finite nonnegative weight, got {w}")));
            }
        }
        if self.max_frames > MAX_FRAMES {
            return Err(config_error(format!("max_frames is capped at {MAX_FRAMES}")));
        }
        if !(self.vertices_per_node > 0.0) {
            return Err(config_error("vertices_per_node must be positive"));
        }
        if !(self.voxel_resolution >= 4.0) {
            return Err(config_error("voxel_resolution must be at least 4"));
        }
        if self.skin_neighbors == 0 || self.fallback_neighbors == 0 || self.segmentation_neighborhood == 0 {
            return Err(config_error("neighbour counts must be positive"));
        }
        if self.clusters == Some(0) {
            return Err(config_error("clusters must be positive"));
        }
        if !(self.ray_cutoff_fraction > 0.0) {
            return Err(config_error("ray_cutoff_fraction must be positive"));
        }
        Ok(())
    }

    /// Pretty JSON, one key per line in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            max_iterations: self.solver_max_iterations,
            relative_tolerance: self.solver_relative_tolerance,
            step_tolerance: self.solver_step_tolerance,
            initial_damping: self.solver_initial_damping,
            max_damping: self.solver_max_damping,
            max_backtracks: self.solver_max_backtracks,
        }
    }

    pub fn registration(&self) -> RegistrationOptions {
        RegistrationOptions {
            weights: RegistrationWeights {
                rigid: self.reg_rigid,
                smooth: self.reg_smooth,
                fit: self.reg_fit,
                tempo: self.reg_tempo,
                point: self.reg_point,
                plane: self.reg_plane,
            },
            correspondence: CorrespondenceOptions {
                prune_factor: self.prune_factor,
                max_normal_angle_deg: self.max_normal_angle_deg,
                max_distance: None,
            },
            icp_rounds: self.icp_rounds,
            gn_iterations: self.gn_iterations,
            solver: self.solver(),
            ..RegistrationOptions::default()
        }
    }

    pub fn alignment(&self) -> AlignmentOptions {
        AlignmentOptions {
            weights: AlignmentWeights { rigid: self.align_rigid, smooth: self.align_smooth, corr: self.align_corr },
            reference: self.reference_frame,
            iterations_per_frame: self.align_iterations_per_frame,
            polish_iterations: self.align_polish_iterations,
            max_frames: self.max_frames,
            solver: self.solver(),
            ..AlignmentOptions::default()
        }
    }

    pub fn template(&self) -> TemplateOptions {
        TemplateOptions {
            fusion: FusionOptions {
                resolution: self.voxel_resolution,
                truncation_voxels: self.truncation_voxels,
                ..FusionOptions::default()
            },
            vertices_per_node: self.vertices_per_node,
            skin_neighbors: self.skin_neighbors,
        }
    }

    pub fn segmentation(&self) -> SegmentationOptions {
        SegmentationOptions {
            lambda: self.segmentation_lambda,
            neighborhood: self.segmentation_neighborhood,
            max_sweeps: self.expansion_sweeps,
        }
    }

    pub fn warping(&self) -> WarpOptions {
        WarpOptions {
            patch_smoothness: self.patch_smoothness,
            ray_cutoff_fraction: self.ray_cutoff_fraction,
            fallback_neighbors: self.fallback_neighbors,
            skin_neighbors: self.skin_neighbors,
            weights: RefineWeights {
                rigid: self.refine_rigid,
                smooth: self.refine_smooth,
                tempo: self.refine_tempo,
                data: self.refine_data,
            },
            refine: self.refine,
            refine_samples: self.refine_samples,
            solver: self.solver().with_max_iterations(self.solver_max_iterations.min(20)),
            ..WarpOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn defaults_match_the_published_weights() {
        let c = PipelineConfig::default();
        assert_eq!((c.reg_rigid, c.reg_smooth, c.reg_fit, c.reg_tempo), (100.0, 20.0, 1.0, 5.0));
        assert_eq!((c.reg_point, c.reg_plane), (0.1, 1.0));
        assert_eq!((c.align_rigid, c.align_smooth, c.align_corr), (150.0, 5.0, 1.0));
        assert_eq!((c.refine_rigid, c.refine_smooth, c.refine_tempo, c.refine_data), (100.0, 30.0, 1.0, 5.0));
        assert_eq!((c.segmentation_lambda, c.patch_smoothness), (1.0, 1.0));
        assert_eq!((c.skin_neighbors, c.fallback_neighbors, c.max_frames), (4, 3, 370));
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"reg_rigid": 50, "reg_fit": 2.5, "clusters": 3}"#).unwrap();
        let env = vec![("DT_REG_FIT".to_string(), "3.5".to_string()), ("DT_UNRELATED".to_string(), "x".to_string()), ("HOME".to_string(), "/".to_string())];
        let flags = vec![("clusters".to_string(), "7".to_string())];
        let c = PipelineConfig::resolve(Some(&file), env, &flags).unwrap();
        assert_eq!(c.reg_rigid, 50.0);
        assert_eq!(c.reg_fit, 3.5);
        assert_eq!(c.clusters, Some(7));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"no_such_key": 1}"#).unwrap();
        assert!(matches!(PipelineConfig::resolve(Some(&file), no_env(), &[]), Err(Error::Config(_))));
        std::fs::write(&file, "{not json").unwrap();
        assert!(matches!(PipelineConfig::resolve(Some(&file), no_env(), &[]), Err(Error::Config(_))));
        let neg = vec![("reg_rigid".to_string(), "-1".to_string())];
        assert!(matches!(PipelineConfig::resolve(None, no_env(), &neg), Err(Error::Config(_))));
        let many = vec![("max_frames".to_string(), "400".to_string())];
        assert!(matches!(PipelineConfig::resolve(None, no_env(), &many), Err(Error::Config(_))));
        let kind = vec![("icp_rounds".to_string(), "lots".to_string())];
        assert!(matches!(PipelineConfig::resolve(None, no_env(), &kind), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::resolve(Some(&dir.path().join("none.json")), no_env(), &[]), Err(Error::MissingFile(_))));
    }

    #[test]
    fn hash_tracks_values() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.refine_tempo = 2.0;
        assert_ne!(a.hash(), b.hash());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_lossless(w in 0.0..1e6f64, n in 1usize..1000, k in proptest::option::of(1usize..64), flag: bool) {
            let c = PipelineConfig { reg_rigid: w, align_corr: w / 3.0, icp_rounds: n, clusters: k, refine: flag, ..PipelineConfig::default() };
            let back: PipelineConfig = serde_json::from_str(&c.to_json()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.hash(), c.hash());
        }
    }
}
