//! Self-delimiting container: a fixed header followed by typed chunks.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVPP";
/// Bumped whenever the coded syntax or the quadtree rotation changes.
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 2 + 2 + 1 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    /// Frame size before padding.
    pub width: u16,
    pub height: u16,
    pub gop: u8,
    pub lambda_index: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ChunkKind {
    Intra = 0,
    Motion = 1,
    Inter = 2,
}

impl TryFrom<u8> for ChunkKind {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ChunkKind::Intra),
            1 => Ok(ChunkKind::Motion),
            2 => Ok(ChunkKind::Inter),
            _ => Err(Error::Bitstream(format!("unknown chunk type {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub kind: ChunkKind,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub chunks: Vec<Chunk>,
}

impl Bitstream {
    pub fn new(header: Header) -> Self {
        Self {
            header,
            chunks: Vec::new(),
        }
    }

    pub fn push(&mut self, kind: ChunkKind, payload: Vec<u8>) {
        self.chunks.push(Chunk { kind, payload });
    }

    /// Number of coded frames (an intra chunk or an inter chunk closes a
    /// frame).
    pub fn num_frames(&self) -> usize {
        self.chunks.iter().filter(|c| c.kind != ChunkKind::Motion).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.chunks.iter().map(|c| 5 + c.payload.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.header.width.to_le_bytes());
        out.extend_from_slice(&self.header.height.to_le_bytes());
        out.push(self.header.gop);
        out.push(self.header.lambda_index);
        for c in &self.chunks {
            out.push(c.kind as u8);
            out.extend_from_slice(&(c.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&c.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::NoFrames);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Bitstream(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Bitstream(format!("version {} (this build reads {VERSION})", bytes[4])));
        }
        let header = Header {
            width: u16::from_le_bytes([bytes[5], bytes[6]]),
            height: u16::from_le_bytes([bytes[7], bytes[8]]),
            gop: bytes[9],
            lambda_index: bytes[10],
        };
        let mut chunks = Vec::new();
        let mut pos = HEADER_LEN;
        while pos < bytes.len() {
            if bytes.len() - pos < 5 {
                return Err(Error::Bitstream(format!("truncated chunk header at byte {pos}")));
            }
            let kind = ChunkKind::try_from(bytes[pos])?;
            let len = u32::from_le_bytes(bytes[pos + 1..pos + 5].try_into().expect("4 bytes")) as usize;
            pos += 5;
            if bytes.len() - pos < len {
                return Err(Error::Bitstream(format!(
                    "chunk declares {len} bytes, {} remain",
                    bytes.len() - pos
                )));
            }
            chunks.push(Chunk {
                kind,
                payload: bytes[pos..pos + len].to_vec(),
            });
            pos += len;
        }
        Ok(Self { header, chunks })
    }
}
