//! JSON documents for graphs and motions. Scalars are stored as base64 of
//! little-endian `f64` arrays so round trips are bit exact.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{DeformGraph, NodeMotion, SkinningWeights};
use crate::{Error, Result, Vec3};

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::InvalidArgument(format!("bad base64 scalar block: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidArgument("scalar block length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn flatten(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten(values: &[f64]) -> Result<Vec<Vec3>> {
    if values.len() % 3 != 0 {
        return Err(Error::InvalidArgument("point block length is not a multiple of 3".into()));
    }
    Ok(values.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub node_count: usize,
    pub nodes: String,
    pub node_vertices: Vec<usize>,
    pub edges: Vec<[usize; 2]>,
    pub skin_neighbors: usize,
    /// Per vertex, the node ids of its skinning row.
    pub weight_nodes: Vec<Vec<usize>>,
    /// All weight values concatenated in row order.
    pub weight_values: String,
    pub support_radius: String,
}

impl GraphDocument {
    pub fn from_graph(graph: &DeformGraph) -> Self {
        let w = graph.weights();
        Self {
            node_count: graph.node_count(),
            nodes: encode_f64s(&flatten(graph.nodes())),
            node_vertices: graph.node_vertices().to_vec(),
            edges: graph.edges().iter().map(|&(a, b)| [a, b]).collect(),
            skin_neighbors: w.k,
            weight_nodes: w.rows.iter().map(|r| r.iter().map(|e| e.0).collect()).collect(),
            weight_values: encode_f64s(&w.rows.iter().flat_map(|r| r.iter().map(|e| e.1)).collect::<Vec<_>>()),
            support_radius: encode_f64s(&w.radius),
        }
    }

    pub fn to_graph(&self) -> Result<DeformGraph> {
        let nodes = unflatten(&decode_f64s(&self.nodes)?)?;
        let values = decode_f64s(&self.weight_values)?;
        let radius = decode_f64s(&self.support_radius)?;
        let total: usize = self.weight_nodes.iter().map(Vec::len).sum();
        if total != values.len() || radius.len() != self.weight_nodes.len() || nodes.len() != self.node_count {
            return Err(Error::InvalidArgument("graph document blocks have inconsistent sizes".into()));
        }
        let mut it = values.into_iter();
        let rows = self
            .weight_nodes
            .iter()
            .map(|ids| ids.iter().map(|&t| (t, it.next().expect("sized above"))).collect())
            .collect();
        DeformGraph::from_parts(
            nodes,
            self.node_vertices.clone(),
            self.edges.iter().map(|e| (e[0], e[1])).collect(),
            SkinningWeights { k: self.skin_neighbors, rows, radius },
        )
    }
}

/// A node motion as packed parameters (12 per node).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionDocument {
    pub node_count: usize,
    pub params: String,
}

impl MotionDocument {
    pub fn from_motion(motion: &NodeMotion) -> Self {
        Self { node_count: motion.len(), params: encode_f64s(&motion.to_params()) }
    }

    pub fn to_motion(&self) -> Result<NodeMotion> {
        let p = decode_f64s(&self.params)?;
        if p.len() != self.node_count * super::NODE_PARAMS {
            return Err(Error::InvalidArgument("motion document has the wrong parameter count".into()));
        }
        Ok(NodeMotion::from_params(&p))
    }
}
