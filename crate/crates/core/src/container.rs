//! Container framing: magic, version and six tagged sections in fixed order.
//!
//! ```text
//! "MGS2" u16 version
//! [u8 tag][u32 len][payload]   x6, tags 1..=6 in order
//! ```
//! Only the metadata section (tag 6) is DEFLATE-compressed on disk.

use thiserror::Error;

use crate::bytes::ByteWriter;

pub const MAGIC: &[u8; 4] = b"MGS2";
pub const VERSION: u16 = 1;
/// Refuse to inflate metadata beyond this many bytes.
const METADATA_LIMIT: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionKind {
    Octree = 1,
    Flags = 2,
    Dc = 3,
    Groups = 4,
    Codebook = 5,
    Metadata = 6,
}

impl SectionKind {
    pub const ORDER: [SectionKind; 6] = [
        SectionKind::Octree,
        SectionKind::Flags,
        SectionKind::Dc,
        SectionKind::Groups,
        SectionKind::Codebook,
        SectionKind::Metadata,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Octree => "octree",
            SectionKind::Flags => "flags",
            SectionKind::Dc => "dc",
            SectionKind::Groups => "groups",
            SectionKind::Codebook => "codebook",
            SectionKind::Metadata => "metadata",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("truncated {0} section")]
    Truncated(&'static str),
    #[error("expected {expected} section, found tag {found}")]
    SectionOrder { expected: &'static str, found: u8 },
    #[error("{0} trailing bytes after the last section")]
    TrailingBytes(usize),
    #[error("metadata section failed to inflate")]
    Inflate,
    #[error("malformed {section} section: {detail}")]
    Malformed { section: &'static str, detail: String },
}

/// Section payloads as seen by the codec; `metadata` is uncompressed here.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sections {
    pub octree: Vec<u8>,
    pub flags: Vec<u8>,
    pub dc: Vec<u8>,
    pub groups: Vec<u8>,
    pub codebook: Vec<u8>,
    pub metadata: Vec<u8>,
}

impl Sections {
    fn payloads(&self) -> [&[u8]; 6] {
        [
            &self.octree,
            &self.flags,
            &self.dc,
            &self.groups,
            &self.codebook,
            &self.metadata,
        ]
    }
}

pub fn compress_metadata(raw: &[u8]) -> Vec<u8> {
    miniz_oxide::deflate::compress_to_vec(raw, 9)
}

pub fn decompress_metadata(packed: &[u8]) -> Result<Vec<u8>, ContainerError> {
    miniz_oxide::inflate::decompress_to_vec_with_limit(packed, METADATA_LIMIT)
        .map_err(|_| ContainerError::Inflate)
}

/// On-disk size of each section (including its 5-byte frame) in section order,
/// plus the 6-byte file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedSizes {
    pub header: usize,
    pub sections: [usize; 6],
}

impl PackedSizes {
    pub fn total(&self) -> usize {
        self.header + self.sections.iter().sum::<usize>()
    }
}

pub fn pack(sections: &Sections) -> Vec<u8> {
    pack_with_sizes(sections).0
}

pub fn pack_with_sizes(sections: &Sections) -> (Vec<u8>, PackedSizes) {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    let header = w.buf.len();
    let mut sizes = [0usize; 6];
    let lz = compress_metadata(&sections.metadata);
    for (k, (kind, payload)) in SectionKind::ORDER.iter().zip(sections.payloads()).enumerate() {
        let payload: &[u8] = if *kind == SectionKind::Metadata { &lz } else { payload };
        let before = w.buf.len();
        w.u8(*kind as u8);
        w.blob(payload);
        sizes[k] = w.buf.len() - before;
    }
    (
        w.into_inner(),
        PackedSizes {
            header,
            sections: sizes,
        },
    )
}

/// Validates the framing and returns the raw section payloads in order.
pub fn split(bytes: &[u8]) -> Result<[&[u8]; 6], ContainerError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(ContainerError::Truncated("header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    let mut pos = 6;
    let mut out: [&[u8]; 6] = [&[]; 6];
    for (slot, kind) in SectionKind::ORDER.into_iter().enumerate() {
        let name = kind.name();
        let tag = *bytes.get(pos).ok_or(ContainerError::Truncated(name))?;
        if tag != kind as u8 {
            return Err(ContainerError::SectionOrder {
                expected: name,
                found: tag,
            });
        }
        let len_bytes = bytes.get(pos + 1..pos + 5).ok_or(ContainerError::Truncated(name))?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        let start = pos + 5;
        let payload = bytes
            .get(start..start.checked_add(len).ok_or(ContainerError::Truncated(name))?)
            .ok_or(ContainerError::Truncated(name))?;
        out[slot] = payload;
        pos = start + len;
    }
    if pos != bytes.len() {
        return Err(ContainerError::TrailingBytes(bytes.len() - pos));
    }
    Ok(out)
}

/// Byte length of every section payload, by section name.
pub fn section_lengths(bytes: &[u8]) -> Result<Vec<(&'static str, usize)>, ContainerError> {
    let parts = split(bytes)?;
    Ok(SectionKind::ORDER.iter().zip(parts).map(|(k, p)| (k.name(), p.len())).collect())
}

pub fn unpack(bytes: &[u8]) -> Result<Sections, ContainerError> {
    let out = split(bytes)?;
    let metadata = decompress_metadata(out[5])?;
    Ok(Sections {
        octree: out[0].to_vec(),
        flags: out[1].to_vec(),
        dc: out[2].to_vec(),
        groups: out[3].to_vec(),
        codebook: out[4].to_vec(),
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sections {
        Sections {
            octree: vec![1, 2, 3],
            flags: vec![0xff, 0x03],
            dc: vec![],
            groups: vec![9; 40],
            codebook: vec![7],
            metadata: b"metadata metadata metadata".to_vec(),
        }
    }

    #[test]
    fn round_trip() {
        let s = sample();
        let (bytes, sizes) = pack_with_sizes(&s);
        assert_eq!(sizes.total(), bytes.len());
        assert_eq!(unpack(&bytes).unwrap(), s);
    }

    #[test]
    fn rejects_bad_input() {
        let bytes = pack(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(unpack(&bad), Err(ContainerError::BadMagic));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(unpack(&bad), Err(ContainerError::Version(2)));
        let mut bad = bytes.clone();
        bad[6] = 2;
        assert!(matches!(unpack(&bad), Err(ContainerError::SectionOrder { .. })));
        let mut bad = bytes.clone();
        bad.push(0);
        assert_eq!(unpack(&bad), Err(ContainerError::TrailingBytes(1)));
        for cut in 0..bytes.len() {
            assert!(unpack(&bytes[..cut]).is_err());
        }
    }
}
