//! Full pipeline on a synthetic bending sequence, scored against ground truth.
//!
//! `cargo run --release --example synthetic_bench -- [frames] [bend_degrees]`

use std::time::Instant;

use dtrecon::pipeline::{reconstruct, PipelineConfig};
use dtrecon::synth::{bending_cylinder, corrupt, evaluate, BendSpec, Corruption};
use dtrecon::warping::mean_second_difference;

fn main() -> dtrecon::Result<()> {
    let mut args = std::env::args().skip(1);
    let frames = args.next().and_then(|a| a.parse().ok()).unwrap_or(6);
    let bend = args.next().and_then(|a| a.parse().ok()).unwrap_or(30.0);
    let spec = BendSpec { frames, max_bend_deg: bend, segments: 24, ..BendSpec::default() };
    let seq = corrupt(&bending_cylinder(&spec)?, &Corruption::ComplementaryThirds)?;
    let config = PipelineConfig { voxel_resolution: 128.0, ..PipelineConfig::default() };

    let start = Instant::now();
    let out = reconstruct(&seq.frames, &config)?;
    println!("reconstructed {frames} frames in {:.1}s", start.elapsed().as_secs_f64());

    let baseline = evaluate(&seq.frames, &seq)?;
    let report = evaluate(&out.warped.meshes, &seq)?;
    for f in &report.frames {
        println!("frame {}: hausdorff {:.5}, coverage {:.4}", f.frame, f.hausdorff_mean, f.coverage);
    }
    println!("mean coverage {:.4} (input {:.4})", report.mean_coverage, baseline.mean_coverage);
    let traj: Vec<_> = out.warped.meshes.iter().map(|m| m.vertices().to_vec()).collect();
    println!("mean second difference {:.5}", mean_second_difference(&traj));
    Ok(())
}
