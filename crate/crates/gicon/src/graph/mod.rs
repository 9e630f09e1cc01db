//! Station graphs: nodes with coordinates and altitude, attributed directed
//! edges built from a distance threshold with an optional terrain filter.

mod format;
mod series;
mod synth;

pub use format::{
    read_container, read_container_bytes, read_dataset, write_container, write_dataset, Dataset,
    FormatError, DATASET_MAGIC, FLOAT_CONTAINER_VERSION,
};
pub use series::{make_example, ChannelStats, DataError, ExamplePair, Series};
pub use synth::{generate, SynthDynamics, SynthSpec};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    /// (x, y) in plane kilometers, or (lon, lat) degrees per the graph's
    /// coordinate system.
    pub position: [f64; 2],
    /// Meters above sea level.
    pub altitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub distance_km: f64,
    /// Angle from src to dst, radians in [-pi, pi].
    pub direction_rad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordSystem {
    PlaneKm,
    LonLatDeg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub coords: CoordSystem,
}

impl Graph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// In-degree of every node.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.nodes.len()];
        for e in &self.edges {
            deg[e.dst] += 1;
        }
        deg
    }

    pub fn validate(&self) -> Result<(), series::DataError> {
        use series::DataError;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(DataError::InvalidGraph(format!(
                    "node ids must be dense 0..{}, found {} at slot {}",
                    self.nodes.len(),
                    n.id,
                    i
                )));
            }
            if !n.position.iter().all(|p| p.is_finite()) || !n.altitude.is_finite() {
                return Err(DataError::InvalidGraph(format!(
                    "node {} has non-finite coordinates",
                    i
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.edges {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() {
                return Err(DataError::InvalidGraph(format!(
                    "edge ({}, {}) references missing node",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(DataError::InvalidGraph(format!("self-loop at {}", e.src)));
            }
            if e.distance_km <= 0.0 {
                return Err(DataError::InvalidGraph(format!(
                    "edge ({}, {}) has non-positive distance",
                    e.src, e.dst
                )));
            }
            if !(-std::f64::consts::PI..=std::f64::consts::PI).contains(&e.direction_rad) {
                return Err(DataError::InvalidGraph(format!(
                    "edge ({}, {}) direction outside [-pi, pi]",
                    e.src, e.dst
                )));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(DataError::InvalidGraph(format!(
                    "duplicate edge ({}, {})",
                    e.src, e.dst
                )));
            }
        }
        Ok(())
    }
}

/// Elevation lookup for the terrain filter, sampled along edge segments.
pub trait TerrainSampler {
    fn elevation_m(&self, position: [f64; 2]) -> f64;
}

impl<F: Fn([f64; 2]) -> f64> TerrainSampler for F {
    fn elevation_m(&self, position: [f64; 2]) -> f64 {
        self(position)
    }
}

const EARTH_RADIUS_KM: f64 = 6371.0;
/// Sample count along each edge for the terrain filter.
const TERRAIN_SAMPLES: usize = 32;

/// Distance between two positions under the given coordinate system.
pub fn distance_km(coords: CoordSystem, a: [f64; 2], b: [f64; 2]) -> f64 {
    match coords {
        CoordSystem::PlaneKm => ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt(),
        CoordSystem::LonLatDeg => {
            let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
            let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
            let dlat = lat2 - lat1;
            let dlon = lon2 - lon1;
            let h = (dlat / 2.0).sin().powi(2)
                + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
            2.0 * EARTH_RADIUS_KM * h.sqrt().asin()
        }
    }
}

/// Direction angle from `a` to `b` in [-pi, pi]. Planar coordinates use
/// atan2 over the displacement; lon/lat uses the initial great-circle
/// bearing mapped to the same convention (0 = east, counterclockwise).
pub fn direction_rad(coords: CoordSystem, a: [f64; 2], b: [f64; 2]) -> f64 {
    match coords {
        CoordSystem::PlaneKm => (b[1] - a[1]).atan2(b[0] - a[0]),
        CoordSystem::LonLatDeg => {
            let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
            let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
            let dlon = lon2 - lon1;
            let y = dlon.sin() * lat2.cos();
            let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
            // bearing measured clockwise from north -> convert to math angle
            let bearing = y.atan2(x);
            let math = std::f64::consts::FRAC_PI_2 - bearing;
            // wrap into [-pi, pi]
            (math + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
                - std::f64::consts::PI
        }
    }
}

/// Build directed edges between all node pairs within the distance
/// threshold. When a terrain sampler is given, an edge is dropped if the
/// maximum elevation along the straight segment (32 equispaced interior
/// samples) exceeds `min(src_alt, dst_alt) + terrain_limit_m`.
pub fn build_edges(
    nodes: &[Node],
    coords: CoordSystem,
    dist_threshold_km: f64,
    terrain: Option<&dyn TerrainSampler>,
    terrain_limit_m: f64,
) -> Vec<Edge> {
    assert!(dist_threshold_km > 0.0);
    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in 0..nodes.len() {
            if i == j {
                continue;
            }
            let d = distance_km(coords, nodes[i].position, nodes[j].position);
            if d <= 0.0 || d > dist_threshold_km {
                continue;
            }
            if let Some(sampler) = terrain {
                let floor = nodes[i].altitude.min(nodes[j].altitude) + terrain_limit_m;
                let blocked = (0..TERRAIN_SAMPLES).any(|s| {
                    let t = (s as f64 + 0.5) / TERRAIN_SAMPLES as f64;
                    let p = [
                        nodes[i].position[0] + t * (nodes[j].position[0] - nodes[i].position[0]),
                        nodes[i].position[1] + t * (nodes[j].position[1] - nodes[i].position[1]),
                    ];
                    sampler.elevation_m(p) > floor
                });
                if blocked {
                    continue;
                }
            }
            edges.push(Edge {
                src: i,
                dst: j,
                distance_km: d,
                direction_rad: direction_rad(coords, nodes[i].position, nodes[j].position),
            });
        }
    }
    edges
}

/// Distance normalization for edge features, fitted on the training graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub dist_mean_km: f64,
    pub dist_std_km: f64,
}

impl EdgeStats {
    pub fn from_edges(edges: &[Edge]) -> Self {
        if edges.is_empty() {
            return EdgeStats {
                dist_mean_km: 0.0,
                dist_std_km: 1.0,
            };
        }
        let n = edges.len() as f64;
        let mean = edges.iter().map(|e| e.distance_km).sum::<f64>() / n;
        let var = edges
            .iter()
            .map(|e| (e.distance_km - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        EdgeStats {
            dist_mean_km: mean,
            dist_std_km: if std > 1e-12 { std } else { 1.0 },
        }
    }
}

/// Raw attribute count produced by [`edge_features`] before padding.
pub const EDGE_RAW_FEATURES: usize = 3;

/// [z-scored distance, sin(direction), cos(direction)], zero-padded to
/// `d_out` (which must be at least 3).
pub fn edge_features(edge: &Edge, stats: &EdgeStats, d_out: usize) -> Vec<f64> {
    assert!(d_out >= EDGE_RAW_FEATURES);
    let mut f = vec![0.0; d_out];
    f[0] = (edge.distance_km - stats.dist_mean_km) / stats.dist_std_km;
    f[1] = edge.direction_rad.sin();
    f[2] = edge.direction_rad.cos();
    f
}
