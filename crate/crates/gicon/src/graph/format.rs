//! On-disk formats.
//!
//! Everything binary in this project shares one container: an 8-byte magic,
//! a length-prefixed JSON header, and a length-prefixed little-endian f32
//! payload. Datasets, retrieval indexes and checkpoints differ only in magic
//! and header schema.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::series::{ChannelStats, DataError, Series};
use super::{CoordSystem, Edge, EdgeStats, Graph, Node};

pub const DATASET_MAGIC: &[u8; 8] = b"GICON-DS";
pub const DATASET_VERSION: u32 = 1;
/// Version tag shared by all float-container artifacts this build writes.
pub const FLOAT_CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("header error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("invalid contents: {0}")]
    Invalid(String),
}

impl From<DataError> for FormatError {
    fn from(e: DataError) -> Self {
        FormatError::Invalid(e.to_string())
    }
}

/// Write magic | u64 header length | header JSON | u64 element count | f32 LE payload.
pub fn write_container(
    path: &Path,
    magic: &[u8; 8],
    header_json: &str,
    payload: &[f32],
) -> Result<(), FormatError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(magic)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(header_json.as_bytes())?;
    f.write_all(&(payload.len() as u64).to_le_bytes())?;
    for &v in payload {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Read a container back, validating magic and exact length.
pub fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(String, Vec<f32>), FormatError> {
    let bytes = std::fs::read(path)?;
    read_container_bytes(&bytes, magic)
}

pub fn read_container_bytes(
    bytes: &[u8],
    magic: &[u8; 8],
) -> Result<(String, Vec<f32>), FormatError> {
    let expected = String::from_utf8_lossy(magic).into_owned();
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(FormatError::BadMagic { expected });
    }
    let mut cursor = std::io::Cursor::new(&bytes[8..]);
    let mut len8 = [0u8; 8];
    cursor
        .read_exact(&mut len8)
        .map_err(|_| FormatError::Truncated("missing header length".into()))?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header = vec![0u8; header_len];
    cursor
        .read_exact(&mut header)
        .map_err(|_| FormatError::Truncated("header shorter than declared".into()))?;
    cursor
        .read_exact(&mut len8)
        .map_err(|_| FormatError::Truncated("missing payload length".into()))?;
    let n = u64::from_le_bytes(len8) as usize;
    let mut payload = vec![0.0f32; n];
    let mut buf = [0u8; 4];
    for v in payload.iter_mut() {
        cursor
            .read_exact(&mut buf)
            .map_err(|_| FormatError::Truncated("payload shorter than declared".into()))?;
        *v = f32::from_le_bytes(buf);
    }
    let mut rest = Vec::new();
    cursor.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(FormatError::TrailingBytes);
    }
    let header = String::from_utf8(header)
        .map_err(|e| FormatError::Invalid(format!("header not utf-8: {e}")))?;
    Ok((header, payload))
}

/// A graph, its series, and the statistics the model input pipeline needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    pub series: Series,
    pub channel_stats: ChannelStats,
    pub edge_stats: EdgeStats,
    /// Frames before this index are the retrieval pool / training region;
    /// frames at or after it are the test region.
    pub train_end: usize,
}

impl Dataset {
    /// Fit normalization on the leading `train_frac` of the horizon.
    pub fn assemble(graph: Graph, series: Series, train_frac: f64) -> Result<Self, DataError> {
        graph.validate()?;
        if graph.n_nodes() != series.n_nodes() {
            return Err(DataError::InvalidSeries(format!(
                "series has {} nodes, graph has {}",
                series.n_nodes(),
                graph.n_nodes()
            )));
        }
        if !(0.0..=1.0).contains(&train_frac) {
            return Err(DataError::InvalidSeries(format!(
                "train fraction {train_frac} outside [0, 1]"
            )));
        }
        let train_end = ((series.horizon() as f64 * train_frac) as usize)
            .clamp(1, series.horizon());
        let channel_stats = ChannelStats::fit(&series, train_end);
        let edge_stats = EdgeStats::from_edges(&graph.edges);
        Ok(Dataset {
            graph,
            series,
            channel_stats,
            edge_stats,
            train_end,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    n_nodes: usize,
    horizon: usize,
    n_channels: usize,
    channel_names: Vec<String>,
    target_channels: Vec<usize>,
    coord_system: CoordSystem,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    channel_stats: ChannelStats,
    edge_stats: EdgeStats,
    train_end: usize,
    timestamp_start: i64,
    timestamp_step: i64,
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), FormatError> {
    let s = &ds.series;
    let header = DatasetHeader {
        version: DATASET_VERSION,
        n_nodes: s.n_nodes(),
        horizon: s.horizon(),
        n_channels: s.n_channels(),
        channel_names: s.channel_names().to_vec(),
        target_channels: s.target_channels().to_vec(),
        coord_system: ds.graph.coords,
        nodes: ds.graph.nodes.clone(),
        edges: ds.graph.edges.clone(),
        channel_stats: ds.channel_stats.clone(),
        edge_stats: ds.edge_stats,
        train_end: ds.train_end,
        timestamp_start: s.timestamps()[0],
        timestamp_step: if s.horizon() > 1 {
            s.timestamps()[1] - s.timestamps()[0]
        } else {
            1
        },
    };
    let json = serde_json::to_string(&header)?;
    write_container(path, DATASET_MAGIC, &json, s.frames())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, FormatError> {
    let (json, frames) = read_container(path, DATASET_MAGIC)?;
    let header: DatasetHeader = serde_json::from_str(&json)?;
    if header.version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: header.version,
            supported: DATASET_VERSION,
        });
    }
    let expected = header.horizon * header.n_nodes * header.n_channels;
    if frames.len() != expected {
        return Err(FormatError::Truncated(format!(
            "header declares {} frame values, payload has {}",
            expected,
            frames.len()
        )));
    }
    let timestamps = (0..header.horizon as i64)
        .map(|i| header.timestamp_start + i * header.timestamp_step)
        .collect();
    let series = Series::new(
        frames,
        header.horizon,
        header.n_nodes,
        header.n_channels,
        timestamps,
        header.channel_names,
        header.target_channels,
    )?;
    let graph = Graph {
        nodes: header.nodes,
        edges: header.edges,
        coords: header.coord_system,
    };
    graph.validate()?;
    if header.train_end == 0 || header.train_end > header.horizon {
        return Err(FormatError::Invalid(format!(
            "train_end {} outside 1..={}",
            header.train_end, header.horizon
        )));
    }
    Ok(Dataset {
        graph,
        series,
        channel_stats: header.channel_stats,
        edge_stats: header.edge_stats,
        train_end: header.train_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::synth::{generate, SynthSpec};

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("gicon-format-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn small_dataset(seed: u64) -> Dataset {
        let spec = SynthSpec {
            n_nodes: 6,
            connection_radius_km: 50.0,
            horizon: 20,
            seed,
            ..SynthSpec::default()
        };
        let (graph, series) = generate(&spec).unwrap();
        Dataset::assemble(graph, series, 0.8).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_identity() {
        let ds = small_dataset(1);
        let path = tmpfile("roundtrip.gds");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
        // frame payload compared at the bit level
        let a: Vec<u32> = ds.series.frames().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.series.frames().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn roundtrip_randomized_datasets() {
        for seed in 0..20u64 {
            let ds = small_dataset(seed + 100);
            let path = tmpfile(&format!("rt{seed}.gds"));
            write_dataset(&ds, &path).unwrap();
            assert_eq!(read_dataset(&path).unwrap(), ds);
        }
    }

    #[test]
    fn corrupted_magic_is_bad_magic() {
        let ds = small_dataset(2);
        let path = tmpfile("badmagic.gds");
        write_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        for b in bytes.iter_mut().take(8) {
            *b ^= 0xff;
        }
        std::fs::write(&path, &bytes).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { .. }));
    }

    #[test]
    fn truncated_payload_detected() {
        let ds = small_dataset(3);
        let path = tmpfile("trunc.gds");
        write_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, FormatError::Truncated(_)));
    }

    #[test]
    fn unsupported_version_detected() {
        let ds = small_dataset(4);
        let path = tmpfile("badver.gds");
        // rewrite the header with a bumped version
        let s = &ds.series;
        let mut header = DatasetHeader {
            version: 99,
            n_nodes: s.n_nodes(),
            horizon: s.horizon(),
            n_channels: s.n_channels(),
            channel_names: s.channel_names().to_vec(),
            target_channels: s.target_channels().to_vec(),
            coord_system: ds.graph.coords,
            nodes: ds.graph.nodes.clone(),
            edges: ds.graph.edges.clone(),
            channel_stats: ds.channel_stats.clone(),
            edge_stats: ds.edge_stats,
            train_end: ds.train_end,
            timestamp_start: 0,
            timestamp_step: 1,
        };
        let json = serde_json::to_string(&header).unwrap();
        write_container(&path, DATASET_MAGIC, &json, s.frames()).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, FormatError::UnsupportedVersion { found: 99, .. }));
        header.version = DATASET_VERSION;
    }

    #[test]
    fn declared_horizon_longer_than_payload_is_truncated() {
        let ds = small_dataset(5);
        let path = tmpfile("short.gds");
        let s = &ds.series;
        let header = DatasetHeader {
            version: DATASET_VERSION,
            n_nodes: s.n_nodes(),
            horizon: s.horizon() + 5, // lie about T
            n_channels: s.n_channels(),
            channel_names: s.channel_names().to_vec(),
            target_channels: s.target_channels().to_vec(),
            coord_system: ds.graph.coords,
            nodes: ds.graph.nodes.clone(),
            edges: ds.graph.edges.clone(),
            channel_stats: ds.channel_stats.clone(),
            edge_stats: ds.edge_stats,
            train_end: ds.train_end,
            timestamp_start: 0,
            timestamp_step: 1,
        };
        let json = serde_json::to_string(&header).unwrap();
        write_container(&path, DATASET_MAGIC, &json, s.frames()).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, FormatError::Truncated(_)));
    }
}
