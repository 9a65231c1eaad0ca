//! Top-k logit sparsification and the binary codec for everything that
//! crosses the simulated network.
//!
//! Every blob starts with a fixed 31-byte header:
//!
//! ```text
//! offset size field
//!      0    4 magic "ADLD"
//!      4    2 version (u16 LE, currently 1)
//!      6    1 kind: 1 = sparse logits, 2 = teacher broadcast, 3 = client projections
//!      7    4 client_id (u32 LE; 0xFFFFFFFF for the server)
//!     11    4 round
//!     15    4 num_samples
//!     19    4 dim_c (0 for projection uploads)
//!     23    4 k: entries per sample for sparse logits, projection layer count otherwise
//!     27    4 rank r (0 for sparse logits)
//! ```
//!
//! Bodies, all little-endian:
//! - sparse: per sample, `k` entries of (index u32, value f32) in ascending index order
//! - teacher: `num_samples × dim_c` f32 logits row-major, then `k` layers of `num_samples × r` f32
//! - projections: `k` layers of `num_samples × r` f32
//!
//! Wire scalars are single precision, so one sparse entry costs exactly 64 bits.

use std::cmp::Ordering;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::lora::ProjectionBundle;
use crate::tensor::Tensor2D;

/// Full per-sample logit vectors, `num_samples × c`.
pub type DenseLogits = Tensor2D;

pub const MAGIC: &[u8; 4] = b"ADLD";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 31;
pub const HEADER_BITS: u64 = HEADER_BYTES as u64 * 8;
/// 32-bit index + 32-bit value.
pub const BITS_PER_ENTRY: u32 = 64;
pub const SERVER_ID: u32 = u32::MAX;

const KIND_SPARSE: u8 = 1;
const KIND_TEACHER: u8 = 2;
const KIND_PROJECTION: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("truncated blob: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("not a payload blob (bad magic)")]
    BadMagic,
    #[error("unsupported payload version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown payload kind {0}")]
    UnknownKind(u8),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseEntry {
    pub index: u32,
    pub value: f64,
}

/// Descending value, then ascending index. Values are finite so `partial_cmp`
/// is total here, and it treats `-0.0 == 0.0` like any other tie.
fn rank_order(a: &SparseEntry, b: &SparseEntry) -> Ordering {
    b.value
        .partial_cmp(&a.value)
        .unwrap_or(Ordering::Equal)
        .then(a.index.cmp(&b.index))
}

/// The `k` largest entries of `v` (ties to the lower index), returned in
/// ascending index order.
pub fn top_k_select(v: &[f64], k: usize) -> Result<Vec<SparseEntry>> {
    if k == 0 || k > v.len() {
        return Err(Error::input("top_k_select", format!("k = {k} for a vector of length {}", v.len())));
    }
    if v.len() > u32::MAX as usize {
        return Err(Error::input("top_k_select", "vector too long for 32-bit indices"));
    }
    let mut entries: Vec<SparseEntry> =
        v.iter().enumerate().map(|(i, &value)| SparseEntry { index: i as u32, value }).collect();
    if k < entries.len() {
        entries.select_nth_unstable_by(k - 1, rank_order);
        entries.truncate(k);
    }
    entries.sort_unstable_by_key(|e| e.index);
    Ok(entries)
}

/// One client's Top-k uplink for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload {
    pub client_id: u32,
    pub round: u32,
    dim_c: usize,
    k: usize,
    rows: Vec<Vec<SparseEntry>>,
}

impl SparsePayload {
    /// Every sample must carry exactly `k` entries with strictly increasing
    /// indices below `dim_c`.
    pub fn new(client_id: u32, round: u32, dim_c: usize, k: usize, rows: Vec<Vec<SparseEntry>>) -> Result<Self> {
        const OP: &str = "SparsePayload::new";
        if k == 0 || k > dim_c {
            return Err(Error::input(OP, format!("k = {k} with dim_c = {dim_c}")));
        }
        for (s, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::input(OP, format!("sample {s} has {} entries, k = {k}", row.len())));
            }
            if row.windows(2).any(|w| w[0].index >= w[1].index) {
                return Err(Error::input(OP, format!("sample {s} indices not strictly increasing")));
            }
            if row.last().is_some_and(|e| e.index as usize >= dim_c) {
                return Err(Error::input(OP, format!("sample {s} index out of range")));
            }
            if row.iter().any(|e| !e.value.is_finite()) {
                return Err(Error::input(OP, format!("sample {s} has a non-finite value")));
            }
        }
        Ok(Self { client_id, round, dim_c, k, rows })
    }

    pub fn num_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn dim_c(&self) -> usize {
        self.dim_c
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[Vec<SparseEntry>] {
        &self.rows
    }

    pub fn num_entries(&self) -> usize {
        self.rows.len() * self.k
    }

    /// Dense values with zeros where nothing was sent, plus a row-major
    /// presence mask.
    pub fn densify(&self) -> (Tensor2D, Vec<bool>) {
        let mut values = Tensor2D::zeros(self.rows.len(), self.dim_c);
        let mut present = vec![false; self.rows.len() * self.dim_c];
        for (s, row) in self.rows.iter().enumerate() {
            for e in row {
                values.set(s, e.index as usize, e.value);
                present[s * self.dim_c + e.index as usize] = true;
            }
        }
        (values, present)
    }

    /// Values as they will arrive after a trip through the codec.
    pub fn to_wire_precision(&self) -> Self {
        let mut out = self.clone();
        out.rows
            .iter_mut()
            .flatten()
            .for_each(|e| e.value = f64::from(to_f32(e.value)));
        out
    }
}

/// Applies `top_k_select` to every sample.
pub fn sparsify(logits: &DenseLogits, k: usize, client_id: u32, round: u32) -> Result<SparsePayload> {
    let rows = logits.row_iter().map(|r| top_k_select(r, k)).collect::<Result<Vec<_>>>()?;
    SparsePayload::new(client_id, round, logits.cols(), k, rows)
}

/// Server broadcast: dense logits over the public set plus projections.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPayload {
    pub round: u32,
    pub logits: DenseLogits,
    pub projections: ProjectionBundle,
}

impl TeacherPayload {
    pub fn new(round: u32, logits: DenseLogits, projections: ProjectionBundle) -> Result<Self> {
        if projections.num_samples() != logits.rows() {
            return Err(Error::shape("TeacherPayload::new", "projection and logit sample counts differ"));
        }
        Ok(Self { round, logits, projections })
    }
}

/// A client's projection upload.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPayload {
    pub client_id: u32,
    pub round: u32,
    pub bundle: ProjectionBundle,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Sparse(SparsePayload),
    Teacher(TeacherPayload),
    Projection(ProjectionPayload),
}

impl Payload {
    /// Exact encoded size in bits.
    pub fn size_bits(&self) -> u64 {
        payload_size_bits(self)
    }

    pub fn to_wire_precision(&self) -> Self {
        match self {
            Payload::Sparse(p) => Payload::Sparse(p.to_wire_precision()),
            Payload::Teacher(t) => Payload::Teacher(TeacherPayload {
                round: t.round,
                logits: round_tensor(&t.logits),
                projections: round_bundle(&t.projections),
            }),
            Payload::Projection(p) => Payload::Projection(ProjectionPayload {
                client_id: p.client_id,
                round: p.round,
                bundle: round_bundle(&p.bundle),
            }),
        }
    }
}

fn round_tensor(t: &Tensor2D) -> Tensor2D {
    let data = t.data().iter().map(|&v| f64::from(to_f32(v))).collect();
    Tensor2D::from_vec(t.rows(), t.cols(), data).expect("same shape")
}

fn round_bundle(b: &ProjectionBundle) -> ProjectionBundle {
    ProjectionBundle::new(b.num_samples(), b.rank(), b.layers().iter().map(round_tensor).collect())
        .expect("same shape")
}

/// Saturates instead of overflowing to infinity.
#[inline]
fn to_f32(v: f64) -> f32 {
    v.clamp(f64::from(f32::MIN), f64::from(f32::MAX)) as f32
}

fn bundle_scalars(b: &ProjectionBundle) -> u64 {
    (b.num_layers() * b.num_samples() * b.rank()) as u64
}

/// Header plus 64 bits per sparse entry, or 32 bits per dense scalar.
pub fn payload_size_bits(p: &Payload) -> u64 {
    HEADER_BITS
        + match p {
            Payload::Sparse(s) => s.num_entries() as u64 * u64::from(BITS_PER_ENTRY),
            Payload::Teacher(t) => 32 * (t.logits.data().len() as u64 + bundle_scalars(&t.projections)),
            Payload::Projection(p) => 32 * bundle_scalars(&p.bundle),
        }
}

struct Header {
    kind: u8,
    client_id: u32,
    round: u32,
    num_samples: u32,
    dim_c: u32,
    k: u32,
    rank: u32,
}

fn put_header(out: &mut Vec<u8>, h: &Header) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(h.kind);
    for v in [h.client_id, h.round, h.num_samples, h.dim_c, h.k, h.rank] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor2D) {
    for &v in t.data() {
        out.extend_from_slice(&to_f32(v).to_le_bytes());
    }
}

pub fn encode_payload(p: &Payload) -> Vec<u8> {
    let mut out = Vec::with_capacity((payload_size_bits(p) / 8) as usize);
    match p {
        Payload::Sparse(s) => {
            put_header(
                &mut out,
                &Header {
                    kind: KIND_SPARSE,
                    client_id: s.client_id,
                    round: s.round,
                    num_samples: s.num_samples() as u32,
                    dim_c: s.dim_c as u32,
                    k: s.k as u32,
                    rank: 0,
                },
            );
            for e in s.rows.iter().flatten() {
                out.extend_from_slice(&e.index.to_le_bytes());
                out.extend_from_slice(&to_f32(e.value).to_le_bytes());
            }
        }
        Payload::Teacher(t) => {
            put_header(
                &mut out,
                &Header {
                    kind: KIND_TEACHER,
                    client_id: SERVER_ID,
                    round: t.round,
                    num_samples: t.logits.rows() as u32,
                    dim_c: t.logits.cols() as u32,
                    k: t.projections.num_layers() as u32,
                    rank: t.projections.rank() as u32,
                },
            );
            put_tensor(&mut out, &t.logits);
            t.projections.layers().iter().for_each(|l| put_tensor(&mut out, l));
        }
        Payload::Projection(p) => {
            put_header(
                &mut out,
                &Header {
                    kind: KIND_PROJECTION,
                    client_id: p.client_id,
                    round: p.round,
                    num_samples: p.bundle.num_samples() as u32,
                    dim_c: 0,
                    k: p.bundle.num_layers() as u32,
                    rank: p.bundle.rank() as u32,
                },
            );
            p.bundle.layers().iter().for_each(|l| put_tensor(&mut out, l));
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(WireError::Truncated { needed: self.pos.saturating_add(n), available: self.buf.len() }),
        }
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64, WireError> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if v.is_finite() {
            Ok(f64::from(v))
        } else {
            Err(WireError::Malformed(format!("non-finite value at byte {}", self.pos - 4)))
        }
    }

    /// Fails early if the announced body cannot fit, before allocating it.
    fn require(&self, bytes: u64) -> Result<(), WireError> {
        let available = (self.buf.len() - self.pos) as u64;
        if bytes > available {
            let needed = usize::try_from(self.pos as u64 + bytes).unwrap_or(usize::MAX);
            return Err(WireError::Truncated { needed, available: self.buf.len() });
        }
        Ok(())
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor2D, WireError> {
        let data = (0..rows * cols).map(|_| self.f32()).collect::<Result<Vec<_>, _>>()?;
        Tensor2D::from_vec(rows, cols, data).map_err(|e| WireError::Malformed(e.to_string()))
    }

    fn bundle(&mut self, layers: usize, samples: usize, rank: usize) -> Result<ProjectionBundle, WireError> {
        let layers = (0..layers).map(|_| self.tensor(samples, rank)).collect::<Result<Vec<_>, _>>()?;
        ProjectionBundle::new(samples, rank, layers).map_err(|e| WireError::Malformed(e.to_string()))
    }
}

pub fn decode_payload(bytes: &[u8]) -> Result<Payload, WireError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let kind = c.take(1)?[0];
    let client_id = c.u32()?;
    let round = c.u32()?;
    let num_samples = c.u32()? as usize;
    let dim_c = c.u32()? as usize;
    let k = c.u32()? as usize;
    let rank = c.u32()? as usize;
    let payload = match kind {
        KIND_SPARSE => {
            c.require(num_samples as u64 * k as u64 * 8)?;
            let mut rows = Vec::with_capacity(num_samples);
            for _ in 0..num_samples {
                let mut row = Vec::with_capacity(k);
                for _ in 0..k {
                    let index = c.u32()?;
                    row.push(SparseEntry { index, value: c.f32()? });
                }
                rows.push(row);
            }
            let p = SparsePayload::new(client_id, round, dim_c, k, rows)
                .map_err(|e| WireError::Malformed(e.to_string()))?;
            Payload::Sparse(p)
        }
        KIND_TEACHER => {
            c.require(4 * num_samples as u64 * (dim_c as u64 + k as u64 * rank as u64))?;
            let logits = c.tensor(num_samples, dim_c)?;
            let projections = c.bundle(k, num_samples, rank)?;
            Payload::Teacher(TeacherPayload { round, logits, projections })
        }
        KIND_PROJECTION => {
            c.require(4 * num_samples as u64 * k as u64 * rank as u64)?;
            Payload::Projection(ProjectionPayload { client_id, round, bundle: c.bundle(k, num_samples, rank)? })
        }
        other => return Err(WireError::UnknownKind(other)),
    };
    if c.pos != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - c.pos));
    }
    Ok(payload)
}
