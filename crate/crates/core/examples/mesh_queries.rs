//! Ray casting, closest points, geodesics and the mean Hausdorff metric on an icosphere.

use dtrecon::mesh::{geodesic_distances, hausdorff_mean, Bvh};
use dtrecon::synth::shapes::icosphere;
use dtrecon::Vec3;

fn main() -> dtrecon::Result<()> {
    let sphere = icosphere(1.0, 4);
    println!("{} vertices, closed {}, euler {}", sphere.vertex_count(), sphere.is_closed(), sphere.euler_characteristic());

    let bvh = Bvh::new(&sphere);
    let hit = bvh.closest_point(&Vec3::new(0.0, 0.0, 3.0)).unwrap();
    println!("closest to (0,0,3): {:?} at distance {:.4}", hit.point.as_slice(), hit.distance);

    let ray = bvh.ray_intersect(&Vec3::zeros(), &Vec3::x(), false, f64::INFINITY).unwrap();
    println!("ray from the centre along +x hits face {} at distance {:.4}", ray.face_index, ray.distance);

    let field =geodesic_distances(&sphere, 0)?;
    let far = field.distances.iter().cloned().fold(0.0, f64::max);
    println!("farthest geodesic distance from vertex 0: {far:.4} (pi = {:.4})", std::f64::consts::PI);

    let bigger = sphere.with_positions(sphere.vertices().iter().map(|p| p * 1.01).collect())?;
    println!("mean hausdorff to a 1% larger sphere: {:.5}", hausdorff_mean(&bigger, &sphere));
    Ok(())
}
