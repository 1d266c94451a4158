//! Potts labeling on a tiny chain, then the full segmentation of a two-body sequence.

use dtrecon::pipeline::{reconstruct, PipelineConfig};
use dtrecon::segmentation::PottsProblem;
use dtrecon::synth::{make_two_body, TwoBodySpec};

fn main() -> dtrecon::Result<()> {
    let chain = PottsProblem {
        costs: vec![vec![0.0, 1.0], vec![0.4, 0.6], vec![0.6, 0.4], vec![1.0, 0.0]],
        edges: vec![(0, 1), (1, 2), (2, 3)],
        lambda: 0.3,
    };
    let (labels, energy) = chain.alpha_expansion(10);
    println!("chain labels {labels:?}, energy {energy:.3} (brute force {:.3})", chain.brute_force().1);

    let seq = make_two_body(&TwoBodySpec { frames: 4, segments: 24, ..TwoBodySpec::default() })?;
    let config = PipelineConfig { clusters: Some(2), voxel_resolution: 96.0, ..PipelineConfig::default() };
    let out = reconstruct(&seq.frames, &config)?;
    let seg = &out.segmented.segmentation;
    let mut sizes = [0usize; 2];
    for &l in &seg.labels {
        sizes[l.min(1)] += 1;
    }
    println!("{} patches, cluster sizes {sizes:?}", seg.patches.len());
    Ok(())
}
