//! Bit-exact kernel persistence.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "NNGK" | version u32 | payload kind u8 | readout tag u8
//! | subsample pixel u32 | rows u64 | cols u64
//! | spatial rank u8 | d1 u64 | d2 u64
//! | arch digest u64 | metadata length u32 | metadata bytes
//! | payload: f64 row-major
//! ```
//!
//! Covariance payloads are stored in the flattened `(x, alpha)`-major order.
//! The header embeds a 64-bit digest of the architecture (not the whole
//! config; the full config goes to a sidecar text file), and loading against
//! a different architecture fails unless forced.

use std::fs;
use std::path::Path;

use nngp_core::arch::{ArchConfig, LinearPostOp, ReadoutKind};
use nngp_core::error::Error as CoreError;
use nngp_core::tensor::{ClassKernel, CovDiag, CovFull, ReadoutTag, SpatialShape};

use crate::CliError;

const MAGIC: &[u8; 4] = b"NNGK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    ClassKernel,
    CovFull,
    CovDiag,
}

impl PayloadKind {
    fn code(self) -> u8 {
        match self {
            PayloadKind::ClassKernel => 0,
            PayloadKind::CovFull => 1,
            PayloadKind::CovDiag => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, CliError> {
        match code {
            0 => Ok(PayloadKind::ClassKernel),
            1 => Ok(PayloadKind::CovFull),
            2 => Ok(PayloadKind::CovDiag),
            _ => Err(CliError::Io(format!("unknown payload kind {code}"))),
        }
    }
}

fn tag_code(tag: Option<ReadoutTag>) -> (u8, u32) {
    match tag {
        None => (0, 0),
        Some(ReadoutTag::Vectorize) => (1, 0),
        Some(ReadoutTag::Pool) => (2, 0),
        Some(ReadoutTag::SubsamplePixel(i)) => (3, i as u32),
        Some(ReadoutTag::Projection) => (4, 0),
    }
}

fn tag_from_code(code: u8, pixel: u32) -> Result<Option<ReadoutTag>, CliError> {
    match code {
        0 => Ok(None),
        1 => Ok(Some(ReadoutTag::Vectorize)),
        2 => Ok(Some(ReadoutTag::Pool)),
        3 => Ok(Some(ReadoutTag::SubsamplePixel(pixel as usize))),
        4 => Ok(Some(ReadoutTag::Projection)),
        _ => Err(CliError::Io(format!("unknown readout tag {code}"))),
    }
}

/// In-memory form of one kernel file.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFile {
    pub kind: PayloadKind,
    pub tag: Option<ReadoutTag>,
    pub rows: u64,
    pub cols: u64,
    pub shape: Option<SpatialShape>,
    pub digest: u64,
    pub metadata: String,
    pub payload: Vec<f64>,
}

impl KernelFile {
    pub fn from_class_kernel(k: &ClassKernel, digest: u64, metadata: String) -> Self {
        KernelFile {
            kind: PayloadKind::ClassKernel,
            tag: Some(k.tag),
            rows: k.n() as u64,
            cols: k.n() as u64,
            shape: None,
            digest,
            metadata,
            payload: k.data().to_vec(),
        }
    }

    /// Rectangular class block (cross kernels between two sample sets).
    pub fn from_class_block(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        digest: u64,
        metadata: String,
    ) -> Result<Self, CliError> {
        if data.len() != rows * cols {
            return Err(CliError::Io(format!(
                "class block payload {} != {rows} x {cols}",
                data.len()
            )));
        }
        Ok(KernelFile {
            kind: PayloadKind::ClassKernel,
            tag: None,
            rows: rows as u64,
            cols: cols as u64,
            shape: None,
            digest,
            metadata,
            payload: data,
        })
    }

    pub fn from_cov_full(k: &CovFull, digest: u64, metadata: String) -> Self {
        KernelFile {
            kind: PayloadKind::CovFull,
            tag: None,
            rows: k.n_samples() as u64,
            cols: k.n_samples() as u64,
            shape: Some(k.shape()),
            digest,
            metadata,
            payload: k.flatten(),
        }
    }

    pub fn from_cov_diag(k: &CovDiag, digest: u64, metadata: String) -> Self {
        KernelFile {
            kind: PayloadKind::CovDiag,
            tag: None,
            rows: k.n_samples() as u64,
            cols: k.n_samples() as u64,
            shape: Some(k.shape()),
            digest,
            metadata,
            payload: k.data().to_vec(),
        }
    }

    pub fn to_class_kernel(&self) -> Result<ClassKernel, CliError> {
        if self.kind != PayloadKind::ClassKernel || self.rows != self.cols {
            return Err(CliError::Io("payload is not a square class kernel".into()));
        }
        ClassKernel::from_data(
            self.rows as usize,
            self.tag.unwrap_or(ReadoutTag::Projection),
            self.payload.clone(),
        )
        .map_err(|e| CliError::Io(e.to_string()))
    }

    pub fn to_cov_full(&self) -> Result<CovFull, CliError> {
        if self.kind != PayloadKind::CovFull {
            return Err(CliError::Io(
                "payload is not a full covariance tensor".into(),
            ));
        }
        let shape = self
            .shape
            .ok_or_else(|| CliError::Io("missing spatial shape".into()))?;
        CovFull::from_flat(&self.payload, self.rows as usize, shape, 0)
            .map_err(|e| CliError::Io(e.to_string()))
    }

    pub fn to_cov_diag(&self) -> Result<CovDiag, CliError> {
        if self.kind != PayloadKind::CovDiag {
            return Err(CliError::Io(
                "payload is not a diagonal covariance tensor".into(),
            ));
        }
        let shape = self
            .shape
            .ok_or_else(|| CliError::Io("missing spatial shape".into()))?;
        let n = self.rows as usize;
        if self.payload.len() != n * n * shape.len() {
            return Err(CliError::Io("diagonal payload size mismatch".into()));
        }
        let mut t = CovDiag::zeros(n, shape, 0);
        t.data_mut().copy_from_slice(&self.payload);
        Ok(t)
    }

    fn expected_payload_len(&self) -> Result<usize, CliError> {
        match self.kind {
            PayloadKind::ClassKernel => Ok(self.rows as usize * self.cols as usize),
            PayloadKind::CovFull => {
                let shape = self
                    .shape
                    .ok_or_else(|| CliError::Io("missing spatial shape".into()))?;
                let m = self.rows as usize * shape.len();
                Ok(m * m)
            }
            PayloadKind::CovDiag => {
                let shape = self
                    .shape
                    .ok_or_else(|| CliError::Io("missing spatial shape".into()))?;
                Ok(self.rows as usize * self.rows as usize * shape.len())
            }
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, CliError> {
        if self.payload.len() != self.expected_payload_len()? {
            return Err(CliError::Io(format!(
                "payload has {} values, header implies {}",
                self.payload.len(),
                self.expected_payload_len()?
            )));
        }
        let (tag, pixel) = tag_code(self.tag);
        let (rank, d1, d2) = match self.shape {
            None => (0u8, 0u64, 0u64),
            Some(SpatialShape::OneD(d)) => (1, d as u64, 0),
            Some(SpatialShape::TwoD(h, w)) => (2, h as u64, w as u64),
        };
        let meta = self.metadata.as_bytes();
        let mut out = Vec::with_capacity(63 + meta.len() + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.push(tag);
        out.extend_from_slice(&pixel.to_le_bytes());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.cols.to_le_bytes());
        out.push(rank);
        out.extend_from_slice(&d1.to_le_bytes());
        out.extend_from_slice(&d2.to_le_bytes());
        out.extend_from_slice(&self.digest.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        let need = |n: usize| -> Result<(), CliError> {
            if bytes.len() < n {
                Err(CliError::Io("kernel file truncated".into()))
            } else {
                Ok(())
            }
        };
        need(59)?;
        if &bytes[0..4] != MAGIC {
            return Err(CliError::Io("bad magic; not a kernel file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CliError::Io(format!(
                "unsupported format version {version}"
            )));
        }
        let kind = PayloadKind::from_code(bytes[8])?;
        let tag_byte = bytes[9];
        let pixel = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
        let rows = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[22..30].try_into().unwrap());
        let rank = bytes[30];
        let d1 = u64::from_le_bytes(bytes[31..39].try_into().unwrap());
        let d2 = u64::from_le_bytes(bytes[39..47].try_into().unwrap());
        let digest = u64::from_le_bytes(bytes[47..55].try_into().unwrap());
        let meta_len = u32::from_le_bytes(bytes[55..59].try_into().unwrap()) as usize;
        need(59 + meta_len)?;
        let metadata = String::from_utf8(bytes[59..59 + meta_len].to_vec())
            .map_err(|_| CliError::Io("metadata is not utf-8".into()))?;
        let shape = match rank {
            0 => None,
            1 => Some(SpatialShape::OneD(d1 as usize)),
            2 => Some(SpatialShape::TwoD(d1 as usize, d2 as usize)),
            _ => return Err(CliError::Io(format!("unknown spatial rank {rank}"))),
        };
        let mut file = KernelFile {
            kind,
            tag: tag_from_code(tag_byte, pixel)?,
            rows,
            cols,
            shape,
            digest,
            metadata,
            payload: Vec::new(),
        };
        let want = file.expected_payload_len()?;
        let body = &bytes[59 + meta_len..];
        if body.len() != want * 8 {
            return Err(CliError::Io(format!(
                "payload holds {} bytes, header implies {}",
                body.len(),
                want * 8
            )));
        }
        file.payload = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CliError> {
        fs::write(path.as_ref(), self.encode()?).map_err(|e| CliError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let bytes = fs::read(path.as_ref())
            .map_err(|e| CliError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::decode(&bytes)
    }

    /// Digest guard: loading a kernel against a different architecture fails
    /// unless forced.
    pub fn check_digest(&self, expected: u64, force: bool) -> Result<(), CliError> {
        if self.digest != expected && !force {
            return Err(CliError::Config(format!(
                "kernel file was built with architecture digest {:#018x}, expected {:#018x} \
                 (pass --force to override)",
                self.digest, expected
            )));
        }
        Ok(())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stable 64-bit digest of an architecture; floats hash by their exact bits.
pub fn arch_digest(cfg: &ArchConfig) -> u64 {
    use std::fmt::Write as _;
    let mut s = String::new();
    write!(s, "depth={};k={};", cfg.depth, cfg.filter_half_width).unwrap();
    write!(s, "v=").unwrap();
    for v in &cfg.filter_weights {
        write!(s, "{:016x},", v.to_bits()).unwrap();
    }
    write!(
        s,
        ";sw2={:016x};sb2={:016x};",
        cfg.sigma_w2.to_bits(),
        cfg.sigma_b2.to_bits()
    )
    .unwrap();
    write!(
        s,
        "nl={:?};pad={:?};conn={:?};",
        cfg.nonlinearity, cfg.padding, cfg.connectivity
    )
    .unwrap();
    write!(s, "post=").unwrap();
    for (l, ops) in cfg.post_ops.iter().enumerate() {
        for op in ops {
            match op {
                LinearPostOp::Stride { s: st } => write!(s, "{l}:s{st}|").unwrap(),
                LinearPostOp::AvgPool { s: st, ws } => write!(s, "{l}:p{st},{ws}|").unwrap(),
                LinearPostOp::SubsampleSlice { offsets } => {
                    write!(s, "{l}:u").unwrap();
                    for o in offsets {
                        write!(s, "{o},").unwrap();
                    }
                    write!(s, "|").unwrap();
                }
            }
        }
    }
    write!(s, ";ro=").unwrap();
    match &cfg.readout.kind {
        ReadoutKind::Vectorize => write!(s, "vec").unwrap(),
        ReadoutKind::Pool => write!(s, "pool").unwrap(),
        ReadoutKind::SubsamplePixel { index } => write!(s, "sub{index}").unwrap(),
        ReadoutKind::Projection { weights } => {
            write!(s, "proj").unwrap();
            for w in weights {
                write!(s, "{:016x},", w.to_bits()).unwrap();
            }
        }
    }
    write!(
        s,
        ";tsw2={:016x};tsb2={:016x}",
        cfg.top_sigma_w2().to_bits(),
        cfg.top_sigma_b2().to_bits()
    )
    .unwrap();
    fnv1a64(s.as_bytes())
}

pub fn core_err(e: CoreError) -> CliError {
    CliError::from(e)
}
