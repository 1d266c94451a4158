//! Registers a deformed sphere onto rotated copies of itself and reports the recovered motion.

use dtrecon::deform::{default_node_count, sample_nodes};
use dtrecon::linalg::axis_angle;
use dtrecon::registration::{register_triplet, RegistrationOptions, SurfaceIndex};
use dtrecon::synth::shapes::icosphere;
use dtrecon::Vec3;

fn main() -> dtrecon::Result<()> {
    let s = icosphere(1.0, 3);
    let curr = s.with_positions(s.vertices().iter().map(|p| Vec3::new(p.x, 0.7 * p.y, 0.5 * p.z)).collect())?;
    let rot = axis_angle(&Vec3::y(), 8f64.to_radians());
    let prev = curr.with_positions(curr.vertices().iter().map(|p| rot.transpose() * p).collect())?;
    let next = curr.with_positions(curr.vertices().iter().map(|p| rot * p).collect())?;

    let graph = sample_nodes(&curr, default_node_count(curr.vertex_count(), 90.0), 4)?;
    let result = register_triplet(
        Some(&SurfaceIndex::new(prev)),
        &curr,
        &graph,
        Some(&SurfaceIndex::new(next.clone())),
        None,
        &RegistrationOptions::default(),
    )?;
    let forward = result.forward.unwrap();
    let moved = graph.deform_points(curr.vertices(), &forward);
    let rms = (moved.iter().zip(next.vertices()).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / moved.len() as f64).sqrt();
    println!("{} nodes, forward RMS error {rms:.2e}", graph.nodes().len());
    for (i, r) in result.reports.iter().enumerate() {
        println!("solve {i}: {} iterations, energy {:.3e} -> {:.3e}", r.iterations, r.initial_energy, r.final_energy);
    }
    Ok(())
}
