//! On-disk stage artifacts and checkpoints.
//!
//! Every stage reads its inputs back from the previous stage's files, so a
//! resumed run sees exactly the bytes a cold run sees. A checkpoint records
//! the config hash, a digest of the input frames and, per stage, the
//! artifact list with a digest of their contents.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    align_sequence, aligned_frames, check_frame_count, fuse_template, register_sequence, segment_sequence, warp_stage,
    AlignedSequence, PipelineConfig, RegisteredSequence,
};
use crate::deform::{DeformGraph, GraphDocument, MotionDocument};
use crate::fusion::GlobalAlignment;
use crate::io::{read_mesh, read_ply_with_properties, write_ply, Manifest, MANIFEST_NAME};
use crate::mesh::TriMesh;
use crate::registration::{PairwiseResult, RegistrationDocument};
use crate::segmentation::{verify_segmentation, PatchSegmentation, SegmentationSummary};
use crate::synth::{evaluate, summarize, BendSpec, EvalReport, FrameEval, Scenario, SyntheticSequence};
use crate::warping::{FrameWarpInfo, Provenance};
use crate::{Error, Result};

pub const CHECKPOINT_NAME: &str = "checkpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Registered,
    Aligned,
    Template,
    Segmented,
    Warped,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Registered, Stage::Aligned, Stage::Template, Stage::Segmented, Stage::Warped];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Registered => "registered",
            Stage::Aligned => "aligned",
            Stage::Template => "template",
            Stage::Segmented => "segmented",
            Stage::Warped => "warped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub input_digest: String,
    pub stages: Vec<StageRecord>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn digest_files(root: &Path, names: &[String]) -> Result<String> {
    let mut h = Sha256::new();
    for name in names {
        let path = root.join(name);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::Io(e),
        })?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn frame_name(prefix: &str, f: usize, ext: &str) -> String {
    format!("{prefix}_{f:04}.{ext}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AlignmentDocument {
    reference: usize,
    residuals: Vec<f64>,
    excluded: Vec<bool>,
    motions: Vec<MotionDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SegmentationDocument {
    #[serde(flatten)]
    summary: SegmentationSummary,
    labels: Vec<usize>,
    boundary_lengths: Vec<f64>,
    valid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WarpSidecar {
    #[serde(flatten)]
    info: FrameWarpInfo,
    provenance: Vec<Provenance>,
}

/// Input frames, output directory and configuration of one run.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub input: PathBuf,
    pub output: PathBuf,
    pub manifest: Manifest,
    pub config: PipelineConfig,
}

impl Workspace {
    pub fn open(input: &Path, output: &Path, config: PipelineConfig) -> Result<Self> {
        let manifest = Manifest::discover(input)?;
        check_frame_count(manifest.frames.len(), &config)?;
        std::fs::create_dir_all(output)?;
        Ok(Self { input: input.to_path_buf(), output: output.to_path_buf(), manifest, config })
    }

    pub fn frame_count(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn load_frames(&self) -> Result<Vec<TriMesh>> {
        self.manifest.frame_paths(&self.input).iter().map(|p| read_mesh(p)).collect()
    }

    fn input_digest(&self) -> Result<String> {
        digest_files(&self.input, &self.manifest.frames)
    }

    fn dir(&self, stage: &str) -> Result<PathBuf> {
        let d = self.output.join(stage);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output.join(CHECKPOINT_NAME)
    }

    pub fn load_checkpoint(&self) -> Option<Checkpoint> {
        read_json(&self.checkpoint_path()).ok()
    }

    /// The checkpoint's stage records that are still valid for this config
    /// and input, in stage order, stopping at the first stale one.
    pub fn valid_stages(&self) -> Result<Vec<StageRecord>> {
        let Some(cp) = self.load_checkpoint() else { return Ok(Vec::new()) };
        if cp.config_hash != self.config.hash() || cp.input_digest != self.input_digest()? {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for (expected, record) in Stage::ALL.iter().zip(&cp.stages) {
            if record.stage != *expected {
                break;
            }
            match digest_files(&self.output, &record.artifacts) {
                Ok(d) if d == record.digest => out.push(record.clone()),
                _ => break,
            }
        }
        Ok(out)
    }

    fn save_checkpoint(&self, stages: Vec<StageRecord>) -> Result<()> {
        write_json(
            &self.checkpoint_path(),
            &Checkpoint { config_hash: self.config.hash(), input_digest: self.input_digest()?, stages },
        )
    }

    // ---- stage loaders ----

    fn load_registered(&self) -> Result<RegisteredSequence> {
        let dir = self.output.join("registered");
        let mut graphs = Vec::new();
        let mut pairwise = Vec::new();
        for f in 0..self.frame_count() {
            let doc: RegistrationDocument = read_json(&dir.join(frame_name("registration", f, "json")))?;
            graphs.push(doc.graph.to_graph()?);
            pairwise.push(PairwiseResult {
                forward: doc.forward.as_ref().map(MotionDocument::to_motion).transpose()?,
                backward: doc.backward.as_ref().map(MotionDocument::to_motion).transpose()?,
                energies: doc.energies,
                reports: Vec::new(),
                mean_distance: doc.mean_distance,
                failed: doc.failed,
            });
        }
        Ok(RegisteredSequence { graphs, pairwise })
    }

    fn load_aligned(&self, frames: &[TriMesh], graphs: &[DeformGraph]) -> Result<AlignedSequence> {
        let doc: AlignmentDocument = read_json(&self.output.join("aligned").join("alignment.json"))?;
        let alignment = GlobalAlignment {
            reference: doc.reference,
            motions: doc.motions.iter().map(MotionDocument::to_motion).collect::<Result<_>>()?,
            residuals: doc.residuals,
            excluded: doc.excluded,
            reports: Vec::new(),
        };
        let aligned = aligned_frames(frames, graphs, &alignment)?;
        Ok(AlignedSequence { alignment, frames: aligned })
    }

    fn load_template(&self) -> Result<TriMesh> {
        Ok(read_ply_with_properties(&self.output.join("template").join("template.ply"))?.mesh)
    }

    fn load_segmentation(&self, template: &TriMesh) -> Result<PatchSegmentation> {
        let doc: SegmentationDocument = read_json(&self.output.join("segmented").join("segmentation.json"))?;
        if doc.labels.len() != template.vertex_count() {
            return Err(Error::Stage { stage: "segment".into(), message: "labels do not match the template".into() });
        }
        Ok(PatchSegmentation::from_labels(template, doc.labels, doc.summary.energy))
    }

    /// Warped meshes in frame order.
    pub fn load_warped(&self) -> Result<Vec<TriMesh>> {
        let dir = self.output.join("warped");
        (0..self.frame_count()).map(|f| Ok(read_ply_with_properties(&dir.join(frame_name("frame", f, "ply")))?.mesh)).collect()
    }

    // ---- stage runners ----

    fn run(&self, stage: Stage) -> Result<Vec<String>> {
        let frames = self.load_frames()?;
        match stage {
            Stage::Registered => {
                let reg = register_sequence(&frames, &self.config)?;
                let dir = self.dir("registered")?;
                let mut names = Vec::new();
                for (f, (g, r)) in reg.graphs.iter().zip(&reg.pairwise).enumerate() {
                    let name = frame_name("registration", f, "json");
                    write_json(&dir.join(&name), &RegistrationDocument::new(g, r))?;
                    names.push(format!("registered/{name}"));
                }
                Ok(names)
            }
            Stage::Aligned => {
                let reg = self.load_registered()?;
                let al = align_sequence(&frames, &reg, &self.config)?;
                let dir = self.dir("aligned")?;
                let doc = AlignmentDocument {
                    reference: al.alignment.reference,
                    residuals: al.alignment.residuals.clone(),
                    excluded: al.alignment.excluded.clone(),
                    motions: al.alignment.motions.iter().map(MotionDocument::from_motion).collect(),
                };
                write_json(&dir.join("alignment.json"), &doc)?;
                let mut names = vec!["aligned/alignment.json".to_string()];
                for a in &al.frames {
                    let name = frame_name("aligned", a.frame, "ply");
                    write_ply(&dir.join(&name), &a.mesh, &[])?;
                    names.push(format!("aligned/{name}"));
                }
                Ok(names)
            }
            Stage::Template => {
                let reg = self.load_registered()?;
                let al = self.load_aligned(&frames, &reg.graphs)?;
                let tpl = fuse_template(&al, &self.config)?;
                let dir = self.dir("template")?;
                let source: Vec<i64> = tpl.provenance.iter().map(|&f| f as i64).collect();
                write_ply(&dir.join("template.ply"), &tpl.mesh, &[("source_frame", &source)])?;
                write_json(&dir.join("graph.json"), &GraphDocument::from_graph(&tpl.graph))?;
                Ok(vec!["template/template.ply".into(), "template/graph.json".into()])
            }
            Stage::Segmented => {
                let reg = self.load_registered()?;
                let al = self.load_aligned(&frames, &reg.graphs)?;
                let template = self.load_template()?;
                let seg = segment_sequence(&template, &reg.graphs, &al, &self.config)?;
                let k = seg.clusters.k;
                let report = verify_segmentation(&seg.segmentation, &template, k);
                if !report.passed() {
                    log::warn!(
                        "segmentation check: {} patches for {k} clusters, {} disconnected",
                        report.patch_count,
                        report.disconnected_patches.len()
                    );
                }
                let dir = self.dir("segmented")?;
                let ids: Vec<i64> = seg.segmentation.patch_of.iter().map(|&p| p as i64).collect();
                write_ply(&dir.join("segmentation.ply"), &template, &[("patch_id", &ids)])?;
                let doc = SegmentationDocument {
                    summary: SegmentationSummary::new(&seg.segmentation, &report, k),
                    labels: seg.segmentation.labels.clone(),
                    boundary_lengths: report.boundary_lengths.clone(),
                    valid: report.passed(),
                };
                write_json(&dir.join("segmentation.json"), &doc)?;
                Ok(vec!["segmented/segmentation.ply".into(), "segmented/segmentation.json".into()])
            }
            Stage::Warped => {
                let reg = self.load_registered()?;
                let al = self.load_aligned(&frames, &reg.graphs)?;
                let template = self.load_template()?;
                let seg = self.load_segmentation(&template)?;
                let warped = warp_stage(&template, &seg, &al, &frames, &self.config)?;
                let dir = self.dir("warped")?;
                let mut names = Vec::new();
                for (f, mesh) in warped.meshes.iter().enumerate() {
                    let ply = frame_name("frame", f, "ply");
                    write_ply(&dir.join(&ply), mesh, &[])?;
                    let json = frame_name("frame", f, "json");
                    write_json(
                        &dir.join(&json),
                        &WarpSidecar { info: warped.info[f].clone(), provenance: warped.provenance[f].clone() },
                    )?;
                    names.push(format!("warped/{ply}"));
                    names.push(format!("warped/{json}"));
                }
                Ok(names)
            }
        }
    }

    /// Ground truth for evaluation: the manifest's ground-truth meshes when
    /// listed, otherwise the input frames themselves.
    pub fn reference_sequence(&self) -> Result<SyntheticSequence> {
        let frames = self.load_frames()?;
        let n = frames.len();
        let ground_truth: Vec<TriMesh> = if self.manifest.ground_truth.len() == n {
            self.manifest.ground_truth.iter().map(|g| read_mesh(&self.input.join(g))).collect::<Result<_>>()?
        } else {
            frames.clone()
        };
        let rest = match &self.manifest.rest {
            Some(r) => read_mesh(&self.input.join(r))?,
            None => ground_truth[0].clone(),
        };
        let visible = if self.manifest.visible.len() == n {
            self.manifest.visible.clone()
        } else {
            frames.iter().map(|f| (0..f.vertex_count()).collect()).collect()
        };
        let masks = if self.manifest.masks.len() == n { self.manifest.masks.clone() } else { vec![Vec::new(); n] };
        let scenario = self
            .manifest
            .scenario
            .clone()
            .and_then(|s| serde_json::from_value(s).ok())
            .unwrap_or(Scenario::Bending(BendSpec { frames: n, ..Default::default() }));
        Ok(SyntheticSequence { scenario, rest, ground_truth, frames, masks, visible })
    }
}

/// Runs every stage up to `target`, reusing valid checkpoints. Returns the
/// stages that were actually executed with their wall-clock seconds.
pub fn run_stage(ws: &Workspace, target: Stage) -> Result<Vec<(Stage, f64)>> {
    let mut records = ws.valid_stages()?;
    let mut ran = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| *s <= target) {
        if records.iter().any(|r| r.stage == stage) {
            log::info!("{}: checkpoint is current", stage.name());
            continue;
        }
        records.retain(|r| r.stage < stage);
        log::info!("{}: running", stage.name());
        let start = Instant::now();
        let artifacts = ws.run(stage).map_err(|e| match e {
            Error::Stage { .. } | Error::Config(_) | Error::TooManyFrames { .. } | Error::MissingFile(_) | Error::Parse { .. } => e,
            other => Error::Stage { stage: stage.name().into(), message: other.to_string() },
        })?;
        let seconds = start.elapsed().as_secs_f64();
        let digest = digest_files(&ws.output, &artifacts)?;
        records.push(StageRecord { stage, artifacts, digest });
        ws.save_checkpoint(records.clone())?;
        ran.push((stage, seconds));
    }
    Ok(ran)
}

/// Writes `report.csv` (frame, hausdorff_mean, coverage) and `report.json`
/// (per-frame rows plus sequence means) into `dir`, and `timings.csv` when
/// stage runtimes are known.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("frame,hausdorff_mean,coverage\n");
    for f in &report.frames {
        let _ = writeln!(csv, "{},{:?},{:?}", f.frame, f.hausdorff_mean, f.coverage);
    }
    std::fs::write(dir.join("report.csv"), csv)?;
    let mut body = report.clone();
    body.stage_seconds.clear();
    write_json(&dir.join("report.json"), &body)?;
    if !report.stage_seconds.is_empty() {
        let mut t = String::from("stage,seconds\n");
        for (s, sec) in &report.stage_seconds {
            let _ = writeln!(t, "{s},{sec:.3}");
        }
        std::fs::write(dir.join("timings.csv"), t)?;
    }
    Ok(())
}

/// Scores the warped frames of a workspace against its reference sequence.
pub fn evaluate_workspace(ws: &Workspace) -> Result<EvalReport> {
    let warped = ws.load_warped()?;
    let reference = ws.reference_sequence()?;
    evaluate(&warped, &reference)
}

/// Reads `report.csv` back into per-frame rows.
pub fn read_report_csv(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    let bad = |m: &str| Error::Parse { path: path.to_path_buf(), message: m.to_string() };
    let mut frames = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad("expected 3 columns"));
        }
        frames.push(FrameEval {
            frame: cols[0].parse().map_err(|_| bad("frame"))?,
            hausdorff_mean: cols[1].parse().map_err(|_| bad("hausdorff_mean"))?,
            coverage: cols[2].parse().map_err(|_| bad("coverage"))?,
        });
    }
    Ok(summarize(frames))
}

/// Writes a synthetic sequence as numbered PLY frames, ground truth and a
/// manifest.
pub fn write_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("gt"))?;
    let mut frames = Vec::new();
    let mut gt = Vec::new();
    for f in 0..seq.frame_count() {
        let name = frame_name("frame", f, "ply");
        write_ply(&dir.join(&name), &seq.frames[f], &[])?;
        frames.push(name);
        let g = format!("gt/{}", frame_name("gt", f, "ply"));
        write_ply(&dir.join(&g), &seq.ground_truth[f], &[])?;
        gt.push(g);
    }
    write_ply(&dir.join("gt/rest.ply"), &seq.rest, &[])?;
    let manifest = Manifest {
        frames,
        ground_truth: gt,
        masks: seq.masks.clone(),
        visible: seq.visible.clone(),
        rest: Some("gt/rest.ply".into()),
        scenario: Some(serde_json::to_value(&seq.scenario)?),
    };
    manifest.save(&dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
