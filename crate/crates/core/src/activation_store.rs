//! `ACTV` binary container for per-head activation vectors.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "ACTV" | version u32 = 1 | L u32 | H u32 | D u32 | count u64
//! count x ( sample_id u64 | role u8 | layer u16 | head u16 | D x f32 )
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ACTV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Untrusted,
    TrustedGeneral,
    TrustedQuery,
    SteeringVector,
    EstimatorRow,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Untrusted => 0,
            Role::TrustedGeneral => 1,
            Role::TrustedQuery => 2,
            Role::SteeringVector => 3,
            Role::EstimatorRow => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Some(match code {
            0 => Role::Untrusted,
            1 => Role::TrustedGeneral,
            2 => Role::TrustedQuery,
            3 => Role::SteeringVector,
            4 => Role::EstimatorRow,
            _ => return None,
        })
    }
}

/// Model geometry: layers, heads per layer, head dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
}

impl Dims {
    pub fn new(layers: usize, heads: usize, dim: usize) -> Result<Dims> {
        if layers == 0 || heads == 0 || dim == 0 {
            return Err(Error::DimMismatch(format!(
                "dims must be at least 1, got L={layers} H={heads} D={dim}"
            )));
        }
        if layers > u16::MAX as usize + 1 || heads > u16::MAX as usize + 1 || dim > u32::MAX as usize {
            return Err(Error::DimMismatch("dims exceed the container's index width".into()));
        }
        Ok(Dims { layers, heads, dim })
    }

    pub fn cells(&self) -> usize {
        self.layers * self.heads
    }

    pub fn cell_index(&self, layer: usize, head: usize) -> usize {
        layer * self.heads + head
    }

    pub fn record_len(&self) -> usize {
        8 + 1 + 2 + 2 + 4 * self.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationFileHeader {
    pub version: u32,
    pub dims: Dims,
    pub record_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub sample_id: u64,
    pub role: Role,
    pub layer: usize,
    pub head: usize,
    pub vector: Vec<f32>,
}

impl ActivationRecord {
    pub fn cell(&self) -> (usize, usize) {
        (self.layer, self.head)
    }
}

fn check_record(dims: &Dims, index: usize, r: &ActivationRecord) -> Result<()> {
    if r.layer >= dims.layers || r.head >= dims.heads {
        return Err(Error::DimMismatch(format!(
            "record {index} at (layer {}, head {}) outside L={} H={}",
            r.layer, r.head, dims.layers, dims.heads
        )));
    }
    if r.vector.len() != dims.dim {
        return Err(Error::DimMismatch(format!(
            "record {index} has {} components, expected D={}",
            r.vector.len(),
            dims.dim
        )));
    }
    if r.vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { index: index as u64 });
    }
    Ok(())
}

/// Serializes records into the container layout.
pub fn encode(dims: Dims, records: &[ActivationRecord]) -> Result<Vec<u8>> {
    let dims = Dims::new(dims.layers, dims.heads, dims.dim)?;
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * dims.record_len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.layers as u32).to_le_bytes());
    out.extend_from_slice(&(dims.heads as u32).to_le_bytes());
    out.extend_from_slice(&(dims.dim as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (i, r) in records.iter().enumerate() {
        check_record(&dims, i, r)?;
        out.extend_from_slice(&r.sample_id.to_le_bytes());
        out.push(r.role.code());
        out.extend_from_slice(&(r.layer as u16).to_le_bytes());
        out.extend_from_slice(&(r.head as u16).to_le_bytes());
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes(b.try_into().expect("2 bytes"))
}

/// Parses a container; `origin` names the source in error messages.
pub fn decode(bytes: &[u8], origin: &str) -> Result<(ActivationFileHeader, Vec<ActivationRecord>)> {
    let bad = |reason: String| Error::malformed(origin, reason);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = le_u32(&bytes[4..8]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (l, h, d) = (
        le_u32(&bytes[8..12]) as usize,
        le_u32(&bytes[12..16]) as usize,
        le_u32(&bytes[16..20]) as usize,
    );
    let dims = Dims::new(l, h, d).map_err(|e| bad(e.to_string()))?;
    let count = le_u64(&bytes[20..28]);
    let rec_len = dims.record_len();
    let payload = bytes.len() - HEADER_LEN;
    let present = payload / rec_len;
    if payload % rec_len != 0 || present as u64 != count {
        return Err(bad(format!(
            "header declares {count} records ({} payload bytes), found {payload} bytes ({present} whole records)",
            count.saturating_mul(rec_len as u64)
        )));
    }
    let mut records = Vec::with_capacity(present);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(rec_len).enumerate() {
        let sample_id = le_u64(&chunk[0..8]);
        let role = Role::from_code(chunk[8])
            .ok_or_else(|| bad(format!("record {i} has unknown role byte {}", chunk[8])))?;
        let layer = le_u16(&chunk[9..11]) as usize;
        let head = le_u16(&chunk[11..13]) as usize;
        if layer >= dims.layers || head >= dims.heads {
            return Err(bad(format!(
                "record {i} at (layer {layer}, head {head}) outside L={} H={}",
                dims.layers, dims.heads
            )));
        }
        let vector: Vec<f32> = chunk[13..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index: i as u64 });
        }
        records.push(ActivationRecord {
            sample_id,
            role,
            layer,
            head,
            vector,
        });
    }
    Ok((
        ActivationFileHeader {
            version,
            dims,
            record_count: count,
        },
        records,
    ))
}

/// Writes records to `path`; returns the number of bytes written.
pub fn write_records(path: &Path, dims: Dims, records: &[ActivationRecord]) -> Result<u64> {
    let bytes = encode(dims, records)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_records(path: &Path) -> Result<(ActivationFileHeader, Vec<ActivationRecord>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// One aligned pair of trusted and untrusted vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorPair {
    pub sample_id: u64,
    pub trusted: Vec<f32>,
    pub untrusted: Vec<f32>,
}

/// Pairs grouped by cell, each cell sorted by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedActivations {
    pub dims: Dims,
    /// Role shared by every trusted-side record, if uniform.
    pub trusted_role: Option<Role>,
    /// Indexed by `layer * heads + head`.
    pub cells: Vec<Vec<VectorPair>>,
}

impl PairedActivations {
    pub fn cell(&self, layer: usize, head: usize) -> &[VectorPair] {
        &self.cells[self.dims.cell_index(layer, head)]
    }

    pub fn pair_count(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    /// Number of distinct samples (largest per-cell count).
    pub fn samples_per_cell(&self) -> usize {
        self.cells.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// A record without a partner on the other side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unmatched {
    pub sample_id: u64,
    pub role: Role,
    pub layer: usize,
    pub head: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    pub paired: PairedActivations,
    pub unmatched: Vec<Unmatched>,
}

type Key = (u64, usize, usize);

fn index_records<'a>(records: &'a [ActivationRecord], side: &str) -> Result<HashMap<Key, &'a ActivationRecord>> {
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if map.insert((r.sample_id, r.layer, r.head), r).is_some() {
            return Err(Error::InvalidArgument(format!(
                "{side} records repeat (sample {}, layer {}, head {})",
                r.sample_id, r.layer, r.head
            )));
        }
    }
    Ok(map)
}

/// Inner join on `(sample_id, layer, head)`; records without a partner are
/// reported in `unmatched`.
pub fn pair_by_sample(
    dims: Dims,
    trusted: &[ActivationRecord],
    untrusted: &[ActivationRecord],
) -> Result<Pairing> {
    for (i, r) in trusted.iter().chain(untrusted).enumerate() {
        check_record(&dims, i, r)?;
    }
    let t = index_records(trusted, "trusted")?;
    let u = index_records(untrusted, "untrusted")?;

    let mut by_cell: BTreeMap<(usize, usize), Vec<VectorPair>> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for r in trusted {
        match u.get(&(r.sample_id, r.layer, r.head)) {
            Some(other) => by_cell.entry(r.cell()).or_default().push(VectorPair {
                sample_id: r.sample_id,
                trusted: r.vector.clone(),
                untrusted: other.vector.clone(),
            }),
            None => unmatched.push(Unmatched {
                sample_id: r.sample_id,
                role: r.role,
                layer: r.layer,
                head: r.head,
            }),
        }
    }
    for r in untrusted {
        if !t.contains_key(&(r.sample_id, r.layer, r.head)) {
            unmatched.push(Unmatched {
                sample_id: r.sample_id,
                role: r.role,
                layer: r.layer,
                head: r.head,
            });
        }
    }
    if by_cell.is_empty() {
        return Err(Error::NoOverlap);
    }
    let mut cells = vec![Vec::new(); dims.cells()];
    for ((l, k), mut pairs) in by_cell {
        pairs.sort_by_key(|p| p.sample_id);
        cells[dims.cell_index(l, k)] = pairs;
    }
    unmatched.sort_by_key(|u| (u.sample_id, u.layer, u.head, u.role));
    let trusted_role = match trusted.first() {
        Some(first) if trusted.iter().all(|r| r.role == first.role) => Some(first.role),
        _ => None,
    };
    Ok(Pairing {
        paired: PairedActivations {
            dims,
            trusted_role,
            cells,
        },
        unmatched,
    })
}
