//! Registers, aligns and fuses a corrupted bending sequence into one closed template.
//!
//! `cargo run --release --example template_fusion -- out.ply`

use dtrecon::io::write_ply;
use dtrecon::pipeline::{align_sequence, fuse_template, register_sequence, PipelineConfig};
use dtrecon::synth::{bending_cylinder, corrupt, BendSpec, Corruption};

fn main() -> dtrecon::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "template.ply".into());
    let spec = BendSpec { frames: 6, segments: 24, ..BendSpec::default() };
    let seq = corrupt(&bending_cylinder(&spec)?, &Corruption::ComplementaryThirds)?;
    let config = PipelineConfig { voxel_resolution: 128.0, ..PipelineConfig::default() };

    let registered = register_sequence(&seq.frames, &config)?;
    let aligned = align_sequence(&seq.frames, &registered, &config)?;
    let template = fuse_template(&aligned, &config)?;
    println!("alignment residuals: {:?}", aligned.alignment.residuals);
    println!(
        "template: {} vertices, closed {}, voxel {:.4}",
        template.mesh.vertex_count(),
        template.mesh.is_closed(),
        template.voxel_size
    );
    write_ply(out.as_ref(), &template.mesh, &[])?;
    println!("wrote {out}");
    Ok(())
}
