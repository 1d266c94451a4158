//! End-to-end driver: the four stages in memory, plus an on-disk workspace
//! with checkpoints and reports.

mod config;
mod workspace;

pub use config::{PipelineConfig, ENV_PREFIX};
pub use workspace::{
    emit_report, evaluate_workspace, read_report_csv, run_stage, write_sequence, Checkpoint, Stage, StageRecord, Workspace,
    CHECKPOINT_NAME,
};
use rayon::prelude::*;

use crate::deform::{default_node_count, sample_nodes, DeformGraph};
use crate::fusion::{align_all_frames, align_frame, build_template, AlignedFrame, GlobalAlignment, GlobalTemplate, MAX_FRAMES};
use crate::mesh::TriMesh;
use crate::registration::{register_triplet, warm_start, PairwiseResult, SurfaceIndex};
use crate::segmentation::{cluster_nodes, segment, vertex_cluster_weights, AlignedSkin, NodeClusters, PatchSegmentation};
use crate::warping::{warp_sequence, WarpResult};
use crate::{Error, Result, Vec3};

/// Rejects sequences the alignment cannot hold before any work is done.
pub fn check_frame_count(count: usize, config: &PipelineConfig) -> Result<()> {
    let max = config.max_frames.min(MAX_FRAMES);
    if count > max {
        return Err(Error::TooManyFrames { frames: count, max });
    }
    if count == 0 {
        return Err(Error::InvalidArgument("the sequence has no frames".into()));
    }
    if config.reference_frame >= count {
        return Err(Error::Config(format!("reference_frame {} is outside {count} frames", config.reference_frame)));
    }
    Ok(())
}

/// Per-frame deformation graphs and pairwise registrations.
#[derive(Debug, Clone)]
pub struct RegisteredSequence {
    pub graphs: Vec<DeformGraph>,
    pub pairwise: Vec<PairwiseResult>,
}

pub fn sample_graphs(frames: &[TriMesh], config: &PipelineConfig) -> Result<Vec<DeformGraph>> {
    frames
        .par_iter()
        .map(|f| {
            let count = default_node_count(f.vertex_count(), config.vertices_per_node);
            sample_nodes(f, count, config.skin_neighbors)
        })
        .collect()
}

/// Registers every frame onto its neighbours, warm-starting each frame
/// from the previous frame's forward motion.
pub fn register_sequence(frames: &[TriMesh], config: &PipelineConfig) -> Result<RegisteredSequence> {
    check_frame_count(frames.len(), config)?;
    let graphs = sample_graphs(frames, config)?;
    let index: Vec<SurfaceIndex> = frames.par_iter().cloned().map(SurfaceIndex::new).collect();
    let options = config.registration();
    let n = frames.len();
    let mut pairwise: Vec<PairwiseResult> = Vec::with_capacity(n);
    for f in 0..n {
        let prev = (f > 0).then(|| &index[f - 1]);
        let next = (f + 1 < n).then(|| &index[f + 1]);
        let init = match (config.warm_start, f.checked_sub(1).and_then(|p| pairwise[p].forward.as_ref())) {
            (true, Some(fwd)) => Some(warm_start(&graphs[f - 1], fwd, &graphs[f], next.is_some(), prev.is_some())),
            _ => None,
        };
        let result = register_triplet(prev, &frames[f], &graphs[f], next, init.as_ref(), &options)?;
        if result.failed {
            log::warn!("frame {f}: registration mean distance {:.3e} exceeds the failure threshold", result.mean_distance);
        }
        pairwise.push(result);
    }
    Ok(RegisteredSequence { graphs, pairwise })
}

/// Global alignment plus every frame's surface in the reference pose.
#[derive(Debug, Clone)]
pub struct AlignedSequence {
    pub alignment: GlobalAlignment,
    pub frames: Vec<AlignedFrame>,
}

impl AlignedSequence {
    pub fn included(&self) -> Vec<AlignedFrame> {
        self.frames.iter().filter(|a| !self.alignment.excluded[a.frame]).cloned().collect()
    }
}

pub fn align_sequence(frames: &[TriMesh], registered: &RegisteredSequence, config: &PipelineConfig) -> Result<AlignedSequence> {
    let alignment = align_all_frames(frames, &registered.graphs, &registered.pairwise, &config.alignment())?;
    let aligned = aligned_frames(frames, &registered.graphs, &alignment)?;
    Ok(AlignedSequence { alignment, frames: aligned })
}

pub fn aligned_frames(frames: &[TriMesh], graphs: &[DeformGraph], alignment: &GlobalAlignment) -> Result<Vec<AlignedFrame>> {
    (0..frames.len())
        .into_par_iter()
        .map(|f| align_frame(f, &frames[f], &graphs[f], &alignment.motions[f]))
        .collect()
}

/// Fuses the frames not excluded by the alignment.
pub fn fuse_template(aligned: &AlignedSequence, config: &PipelineConfig) -> Result<GlobalTemplate> {
    let included = aligned.included();
    if included.is_empty() {
        return Err(Error::Stage { stage: "template".into(), message: "every frame was excluded by the alignment".into() });
    }
    build_template(&included, &config.template())
}

/// Node clusters and the patch segmentation of the template.
#[derive(Debug, Clone)]
pub struct SegmentedTemplate {
    pub clusters: NodeClusters,
    pub segmentation: PatchSegmentation,
}

/// Clusters the aligned graph nodes of the included frames, scores every
/// template vertex against the clusters and labels the template.
pub fn segment_sequence(
    template: &TriMesh,
    graphs: &[DeformGraph],
    aligned: &AlignedSequence,
    config: &PipelineConfig,
) -> Result<SegmentedTemplate> {
    let frames: Vec<usize> = (0..aligned.frames.len()).filter(|&f| !aligned.alignment.excluded[f]).collect();
    let mut points: Vec<Vec3> = Vec::new();
    let mut offsets = Vec::with_capacity(frames.len());
    for &f in &frames {
        offsets.push(points.len());
        let motion = &aligned.alignment.motions[f];
        points.extend(graphs[f].nodes().iter().zip(&motion.translation).map(|(g, b)| g + b));
    }
    let k = config.clusters.unwrap_or_else(|| frames.iter().map(|&f| graphs[f].node_count()).max().unwrap_or(1));
    let clusters = cluster_nodes(&points, k)?;
    let skins: Vec<AlignedSkin<'_>> = frames
        .iter()
        .zip(&offsets)
        .map(|(&f, &node_offset)| AlignedSkin {
            positions: aligned.frames[f].mesh.vertices(),
            rows: &graphs[f].weights().rows,
            node_offset,
        })
        .collect();
    let weights = vertex_cluster_weights(template.vertices(), &skins, &clusters.assignment, config.segmentation_neighborhood);
    let segmentation = segment(template, &weights, k, &config.segmentation())?;
    Ok(SegmentedTemplate { clusters, segmentation })
}

pub fn warp_stage(
    template: &TriMesh,
    segmentation: &PatchSegmentation,
    aligned: &AlignedSequence,
    frames: &[TriMesh],
    config: &PipelineConfig,
) -> Result<WarpResult> {
    warp_sequence(template, segmentation, &aligned.frames, frames, &config.warping())
}

/// Everything the four stages produce.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub registered: RegisteredSequence,
    pub aligned: AlignedSequence,
    pub template: GlobalTemplate,
    pub segmented: SegmentedTemplate,
    pub warped: WarpResult,
}

/// Runs all stages in memory.
pub fn reconstruct(frames: &[TriMesh], config: &PipelineConfig) -> Result<Reconstruction> {
    let registered = register_sequence(frames, config)?;
    let aligned = align_sequence(frames, &registered, config)?;
    let template = fuse_template(&aligned, config)?;
    let segmented = segment_sequence(&template.mesh, &registered.graphs, &aligned, config)?;
    let warped = warp_stage(&template.mesh, &segmented.segmentation, &aligned, frames, config)?;
    Ok(Reconstruction { registered, aligned, template, segmented, warped })
}
