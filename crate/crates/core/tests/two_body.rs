use dtrecon::pipeline::{reconstruct, PipelineConfig};
use dtrecon::synth::{make_two_body, two_body_box, TwoBodySpec};

#[test]
fn two_clusters_split_the_boxes_cleanly() {
    let seq = make_two_body(&TwoBodySpec { frames: 4, segments: 24, ..TwoBodySpec::default() }).unwrap();
    let config = PipelineConfig { clusters: Some(2), voxel_resolution: 128.0, ..PipelineConfig::default() };
    let out = reconstruct(&seq.frames, &config).unwrap();
    let template = &out.template.mesh;
    let labels = &out.segmented.segmentation.labels;
    let mut seen = [None, None];
    for (v, p) in template.vertices().iter().enumerate() {
        if let Some(b) = two_body_box(p.x) {
            let l = *seen[b].get_or_insert(labels[v]);
            assert_eq!(labels[v], l, "vertex {v} at {p:?} in box {b}");
        }
    }
    assert!(seen[0].is_some() && seen[1].is_some());
    assert_ne!(seen[0], seen[1]);
}
