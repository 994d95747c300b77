//! Classic libpcap capture files (link type 1, Ethernet).

use thiserror::Error;

use crate::packet::{decode_frame, encode_frame, FrameError, PacketRecord};

pub const MAGIC: u32 = 0xa1b2c3d4;
pub const MAGIC_SWAPPED: u32 = 0xd4c3b2a1;
pub const VERSION_MAJOR: u16 = 2;
pub const VERSION_MINOR: u16 = 4;
pub const SNAPLEN: u32 = 65535;
pub const LINKTYPE_ETHERNET: u32 = 1;

pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PcapError {
    #[error("bad pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("file is shorter than the 24-byte global header")]
    TruncatedHeader,
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("record {index} is truncated")]
    TruncatedRecord { index: usize },
    #[error("record {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: FrameError,
    },
}

#[derive(Debug, Clone, Copy)]
enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        match self {
            ByteOrder::Little => u32::from_le_bytes(arr),
            ByteOrder::Big => u32::from_be_bytes(arr),
        }
    }
}

/// Streaming reader over an in-memory capture. Yields records in file order;
/// after the first error it yields nothing more.
pub struct PcapReader<'a> {
    data: &'a [u8],
    pos: usize,
    order: ByteOrder,
    index: usize,
    done: bool,
}

impl<'a> PcapReader<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, PcapError> {
        if data.len() < 4 {
            return Err(PcapError::TruncatedHeader);
        }
        let raw = u32::from_le_bytes([data[0], data[1], data[2], data[3]]);
        let order = match raw {
            MAGIC => ByteOrder::Little,
            MAGIC_SWAPPED => ByteOrder::Big,
            other => return Err(PcapError::BadMagic(other)),
        };
        if data.len() < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedHeader);
        }
        let linktype = order.u32(&data[20..24]);
        if linktype != LINKTYPE_ETHERNET {
            return Err(PcapError::UnsupportedLinkType(linktype));
        }
        Ok(PcapReader {
            data,
            pos: GLOBAL_HEADER_LEN,
            order,
            index: 0,
            done: false,
        })
    }
}

impl Iterator for PcapReader<'_> {
    type Item = Result<PacketRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done || self.pos == self.data.len() {
            return None;
        }
        let index = self.index;
        let rest = &self.data[self.pos..];
        if rest.len() < RECORD_HEADER_LEN {
            self.done = true;
            return Some(Err(PcapError::TruncatedRecord { index }));
        }
        let ts_sec = self.order.u32(&rest[0..4]);
        let ts_usec = self.order.u32(&rest[4..8]);
        let incl_len = self.order.u32(&rest[8..12]) as usize;
        let orig_len = self.order.u32(&rest[12..16]);
        let body = &rest[RECORD_HEADER_LEN..];
        if incl_len > body.len() {
            self.done = true;
            return Some(Err(PcapError::TruncatedRecord { index }));
        }
        self.pos += RECORD_HEADER_LEN + incl_len;
        self.index += 1;
        match decode_frame(&body[..incl_len], ts_sec, ts_usec, orig_len) {
            Ok(rec) => Some(Ok(rec)),
            Err(source) => {
                self.done = true;
                Some(Err(PcapError::Frame { index, source }))
            }
        }
    }
}

/// Reads a whole capture. Stops at the first error.
pub fn read_pcap(data: &[u8]) -> Result<Vec<PacketRecord>, PcapError> {
    PcapReader::new(data)?.collect()
}

/// Reads every complete record and returns the error that ended the file, if any.
pub fn read_pcap_lossy(data: &[u8]) -> (Vec<PacketRecord>, Option<PcapError>) {
    let reader = match PcapReader::new(data) {
        Ok(r) => r,
        Err(e) => return (Vec::new(), Some(e)),
    };
    let mut records = Vec::new();
    for item in reader {
        match item {
            Ok(rec) => records.push(rec),
            Err(e) => return (records, Some(e)),
        }
    }
    (records, None)
}

/// Writes a little-endian capture with one record per input, `incl_len = orig_len`.
pub fn write_pcap(records: &[PacketRecord]) -> Result<Vec<u8>, PcapError> {
    let body: usize = records
        .iter()
        .map(|r| RECORD_HEADER_LEN + r.frame_len as usize)
        .sum();
    let mut out = Vec::with_capacity(GLOBAL_HEADER_LEN + body);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&VERSION_MAJOR.to_le_bytes());
    out.extend_from_slice(&VERSION_MINOR.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&SNAPLEN.to_le_bytes());
    out.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    for (index, rec) in records.iter().enumerate() {
        let frame = encode_frame(rec).map_err(|source| PcapError::Frame { index, source })?;
        out.extend_from_slice(&rec.ts_sec.to_le_bytes());
        out.extend_from_slice(&rec.ts_usec.to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec.frame_len.to_le_bytes());
        out.extend_from_slice(&frame);
    }
    Ok(out)
}
