//! The elog binary trace format.
//!
//! An elog file is a plain concatenation of blocks with no alignment padding.
//! Every block is an 8-byte [`BlockHeader`] followed by `payload_len` bytes:
//!
//! ```text
//! offset  size  field
//! 0       2     block type   (u16, little-endian)
//! 2       2     unit id      (u16, CPU index)
//! 4       4     payload_len  (u32, bytes following the header)
//! ```
//!
//! Known block types:
//!
//! | code | block     | payload                                                   |
//! |------|-----------|-----------------------------------------------------------|
//! | 0    | info      | 56 B: version major/minor, flags, 48 B tool name          |
//! | 1    | exec      | u64 start time, then k >= 1 entries of 20 B each          |
//! | 5    | arch      | 52 B: arch id, guest word bits, 44 B arch name            |
//!
//! An exec entry is `u32 duration_ns, u64 start, u64 end` with `end`
//! exclusive. Any other type code is carried through as an opaque payload, so
//! readers can skip blocks they do not understand using `payload_len` alone.

use std::fmt;
use std::io::{self, Read, Write};

use serde::Serialize;
use thiserror::Error;

/// Size of an encoded [`BlockHeader`].
pub const HEADER_SIZE: usize = 8;
/// Size of the start-time field that opens an exec payload.
pub const EXEC_SIZE: usize = 8;
/// Size of an encoded [`ExecEntry`].
pub const ENTRY_SIZE: usize = 20;
/// Size of the info block payload.
pub const INFO_PAYLOAD_SIZE: usize = 56;
/// Size of the arch block payload.
pub const ARCH_PAYLOAD_SIZE: usize = 52;
/// Bytes taken by the info and arch blocks at the start of every file.
pub const PREAMBLE_SIZE: u64 = (HEADER_SIZE + INFO_PAYLOAD_SIZE + HEADER_SIZE + ARCH_PAYLOAD_SIZE) as u64;

/// Largest entry count whose exec payload length fits in 32 bits.
pub const MAX_FRAME_ENTRIES: usize = (u32::MAX as usize - EXEC_SIZE) / ENTRY_SIZE;

pub const TYPE_INFO: u16 = 0;
pub const TYPE_EXEC: u16 = 1;
pub const TYPE_ARCH: u16 = 5;

pub const TOOL_NAME_LEN: usize = 48;
pub const ARCH_NAME_LEN: usize = 44;

#[derive(Debug, Error)]
pub enum ElogError {
    #[error("truncated block at offset {offset}: needed {needed} bytes, {available} available")]
    TruncatedBlock { offset: u64, needed: u64, available: u64 },
    #[error("malformed exec frame at offset {offset}: payload length {payload_len} is not 8 + 20*k with k >= 1")]
    MalformedExecFrame { offset: u64, payload_len: u32 },
    #[error(
        "malformed block of type {block_type} at offset {offset}: payload length {payload_len}, expected {expected}"
    )]
    MalformedBlock { offset: u64, block_type: u16, payload_len: u32, expected: u32 },
    #[error("exec frame has no entries")]
    EmptyFrame,
    #[error("exec frame with {0} entries does not fit a 32-bit payload length")]
    FrameTooLarge(usize),
    #[error("invalid parameter: {0}")]
    InvalidParam(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ElogError {
    /// Byte offset of the offending block, when the error is tied to one.
    pub fn offset(&self) -> Option<u64> {
        match self {
            ElogError::TruncatedBlock { offset, .. }
            | ElogError::MalformedExecFrame { offset, .. }
            | ElogError::MalformedBlock { offset, .. } => Some(*offset),
            _ => None,
        }
    }

    fn rebase(self, base: u64) -> Self {
        match self {
            ElogError::TruncatedBlock { offset, needed, available } => {
                ElogError::TruncatedBlock { offset: offset + base, needed, available }
            }
            ElogError::MalformedExecFrame { offset, payload_len } => {
                ElogError::MalformedExecFrame { offset: offset + base, payload_len }
            }
            ElogError::MalformedBlock { offset, block_type, payload_len, expected } => {
                ElogError::MalformedBlock { offset: offset + base, block_type, payload_len, expected }
            }
            other => other,
        }
    }
}

/// The 8-byte header in front of every block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub struct BlockHeader {
    pub block_type: u16,
    pub unit_id: u16,
    pub payload_len: u32,
}

impl BlockHeader {
    pub fn encode(&self) -> [u8; HEADER_SIZE] {
        let mut out = [0u8; HEADER_SIZE];
        out[0..2].copy_from_slice(&self.block_type.to_le_bytes());
        out[2..4].copy_from_slice(&self.unit_id.to_le_bytes());
        out[4..8].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ElogError> {
        if bytes.len() < HEADER_SIZE {
            return Err(ElogError::TruncatedBlock {
                offset: 0,
                needed: HEADER_SIZE as u64,
                available: bytes.len() as u64,
            });
        }
        Ok(BlockHeader {
            block_type: u16::from_le_bytes([bytes[0], bytes[1]]),
            unit_id: u16::from_le_bytes([bytes[2], bytes[3]]),
            payload_len: u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
        })
    }
}

/// One executed guest address range `[start, end)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub struct ExecEntry {
    pub duration_ns: u32,
    pub start: u64,
    pub end: u64,
}

impl ExecEntry {
    pub fn new(start: u64, end: u64, duration_ns: u32) -> Self {
        ExecEntry { duration_ns, start, end }
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.duration_ns.to_le_bytes());
        out.extend_from_slice(&self.start.to_le_bytes());
        out.extend_from_slice(&self.end.to_le_bytes());
    }

    fn decode(bytes: &[u8]) -> Self {
        ExecEntry {
            duration_ns: u32::from_le_bytes(bytes[0..4].try_into().unwrap()),
            start: u64::from_le_bytes(bytes[4..12].try_into().unwrap()),
            end: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
        }
    }
}

/// A timestamp followed by a run of entries, all from one unit.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExecFrame {
    pub unit_id: u16,
    pub start_time_ns: u64,
    pub entries: Vec<ExecEntry>,
}

/// Total encoded size (header included) of an exec frame holding `entries` entries.
pub const fn exec_frame_size(entries: usize) -> usize {
    HEADER_SIZE + EXEC_SIZE + ENTRY_SIZE * entries
}

/// Appends an encoded exec frame to `out` without building an [`ExecFrame`].
pub fn encode_exec_frame_into(
    out: &mut Vec<u8>,
    unit_id: u16,
    start_time_ns: u64,
    entries: &[ExecEntry],
) -> Result<(), ElogError> {
    if entries.is_empty() {
        return Err(ElogError::EmptyFrame);
    }
    let payload_len =
        u32::try_from(EXEC_SIZE + ENTRY_SIZE * entries.len()).map_err(|_| ElogError::FrameTooLarge(entries.len()))?;
    out.reserve(HEADER_SIZE + payload_len as usize);
    let header = BlockHeader { block_type: TYPE_EXEC, unit_id, payload_len };
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&start_time_ns.to_le_bytes());
    for entry in entries {
        entry.encode_into(out);
    }
    Ok(())
}

impl ExecFrame {
    pub fn encode(&self) -> Result<Vec<u8>, ElogError> {
        let mut out = Vec::with_capacity(exec_frame_size(self.entries.len()));
        encode_exec_frame_into(&mut out, self.unit_id, self.start_time_ns, &self.entries)?;
        Ok(out)
    }

    /// Sum of the entry durations.
    pub fn total_duration_ns(&self) -> u64 {
        self.entries.iter().map(|e| u64::from(e.duration_ns)).sum()
    }
}

/// Fixed-width, zero-padded text field. Longer input is cut at `N` bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedText<const N: usize>([u8; N]);

impl<const N: usize> FixedText<N> {
    pub fn new(text: &str) -> Self {
        Self::from_bytes(text.as_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut raw = [0u8; N];
        let n = bytes.len().min(N);
        raw[..n].copy_from_slice(&bytes[..n]);
        FixedText(raw)
    }

    pub fn as_bytes(&self) -> &[u8; N] {
        &self.0
    }

    /// The text up to the first NUL, lossily decoded.
    pub fn to_string_lossy(&self) -> String {
        let end = self.0.iter().position(|&b| b == 0).unwrap_or(N);
        String::from_utf8_lossy(&self.0[..end]).into_owned()
    }
}

impl<const N: usize> Default for FixedText<N> {
    fn default() -> Self {
        FixedText([0u8; N])
    }
}

impl<const N: usize> fmt::Debug for FixedText<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.to_string_lossy())
    }
}

impl<const N: usize> Serialize for FixedText<N> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string_lossy())
    }
}

/// Info block flag: merging of contiguous entries was enabled.
pub const FLAG_MERGE: u32 = 1 << 0;
/// Info block flag: entry durations carry measured host time.
pub const FLAG_TIMING: u32 = 1 << 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct InfoBlock {
    pub version_major: u16,
    pub version_minor: u16,
    pub flags: u32,
    pub tool_name: FixedText<TOOL_NAME_LEN>,
}

impl InfoBlock {
    fn encode_payload(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.version_major.to_le_bytes());
        out.extend_from_slice(&self.version_minor.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(self.tool_name.as_bytes());
    }

    fn decode_payload(p: &[u8]) -> Self {
        InfoBlock {
            version_major: u16::from_le_bytes([p[0], p[1]]),
            version_minor: u16::from_le_bytes([p[2], p[3]]),
            flags: u32::from_le_bytes(p[4..8].try_into().unwrap()),
            tool_name: FixedText::from_bytes(&p[8..8 + TOOL_NAME_LEN]),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ArchBlock {
    /// ELF `e_machine` code of the guest, 0 when unknown.
    pub arch_id: u32,
    pub guest_word_bits: u32,
    pub arch_name: FixedText<ARCH_NAME_LEN>,
}

impl ArchBlock {
    fn encode_payload(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.arch_id.to_le_bytes());
        out.extend_from_slice(&self.guest_word_bits.to_le_bytes());
        out.extend_from_slice(self.arch_name.as_bytes());
    }

    fn decode_payload(p: &[u8]) -> Self {
        ArchBlock {
            arch_id: u32::from_le_bytes(p[0..4].try_into().unwrap()),
            guest_word_bits: u32::from_le_bytes(p[4..8].try_into().unwrap()),
            arch_name: FixedText::from_bytes(&p[8..8 + ARCH_NAME_LEN]),
        }
    }
}

/// ELF machine code and word size for a QEMU target name.
pub fn arch_for_target(target: &str) -> (u32, u32) {
    match target {
        "aarch64" => (183, 64),
        "arm" => (40, 32),
        "x86_64" => (62, 64),
        "i386" => (3, 32),
        "riscv64" => (243, 64),
        "riscv32" => (243, 32),
        "ppc" => (20, 32),
        "ppc64" => (21, 64),
        "mips" | "mipsel" => (8, 32),
        "s390x" => (22, 64),
        "sparc64" => (43, 64),
        _ => (0, if target.contains("64") { 64 } else { 32 }),
    }
}

/// The info and arch blocks written once at the start of every elog file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConfigPreamble {
    pub info: InfoBlock,
    pub arch: ArchBlock,
}

impl Default for ConfigPreamble {
    fn default() -> Self {
        ConfigPreamble {
            info: InfoBlock {
                version_major: 1,
                version_minor: 0,
                flags: 0,
                tool_name: FixedText::new(concat!("elogcov ", env!("CARGO_PKG_VERSION"))),
            },
            arch: ArchBlock { arch_id: 0, guest_word_bits: 64, arch_name: FixedText::new("unknown") },
        }
    }
}

impl ConfigPreamble {
    pub fn for_target(target: &str, flags: u32) -> Self {
        let (arch_id, guest_word_bits) = arch_for_target(target);
        let mut p = ConfigPreamble::default();
        p.info.flags = flags;
        p.arch = ArchBlock { arch_id, guest_word_bits, arch_name: FixedText::new(target) };
        p
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PREAMBLE_SIZE as usize);
        Block::Info { unit_id: 0, info: self.info }.encode_into(&mut out);
        Block::Arch { unit_id: 0, arch: self.arch }.encode_into(&mut out);
        out
    }
}

/// Writes the info and arch blocks; returns the number of bytes written (124).
pub fn write_config_preamble<W: Write + ?Sized>(sink: &mut W, preamble: &ConfigPreamble) -> Result<u64, ElogError> {
    let bytes = preamble.encode();
    sink.write_all(&bytes)?;
    Ok(bytes.len() as u64)
}

/// A decoded block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    Info { unit_id: u16, info: InfoBlock },
    Arch { unit_id: u16, arch: ArchBlock },
    Exec(ExecFrame),
    Unknown { header: BlockHeader, payload: Vec<u8> },
}

impl Block {
    pub fn header(&self) -> BlockHeader {
        match self {
            Block::Info { unit_id, .. } => {
                BlockHeader { block_type: TYPE_INFO, unit_id: *unit_id, payload_len: INFO_PAYLOAD_SIZE as u32 }
            }
            Block::Arch { unit_id, .. } => {
                BlockHeader { block_type: TYPE_ARCH, unit_id: *unit_id, payload_len: ARCH_PAYLOAD_SIZE as u32 }
            }
            Block::Exec(f) => BlockHeader {
                block_type: TYPE_EXEC,
                unit_id: f.unit_id,
                payload_len: (EXEC_SIZE + ENTRY_SIZE * f.entries.len()) as u32,
            },
            Block::Unknown { header, .. } => *header,
        }
    }

    /// Encoded size including the header.
    pub fn encoded_len(&self) -> u64 {
        HEADER_SIZE as u64 + u64::from(self.header().payload_len)
    }

    /// Appends the encoding of this block. Exec frames must be non-empty.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Block::Exec(f) => encode_exec_frame_into(out, f.unit_id, f.start_time_ns, &f.entries)
                .expect("exec frame must not be empty"),
            Block::Info { info, .. } => {
                out.extend_from_slice(&self.header().encode());
                info.encode_payload(out);
            }
            Block::Arch { arch, .. } => {
                out.extend_from_slice(&self.header().encode());
                arch.encode_payload(out);
            }
            Block::Unknown { header, payload } => {
                out.extend_from_slice(&header.encode());
                out.extend_from_slice(payload);
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len() as usize);
        self.encode_into(&mut out);
        out
    }
}

/// Reads until `buf` is full or EOF; returns the number of bytes read.
fn read_full<R: Read + ?Sized>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn decode_payload(header: BlockHeader, payload: Vec<u8>) -> Result<Block, ElogError> {
    let malformed = |expected: usize| ElogError::MalformedBlock {
        offset: 0,
        block_type: header.block_type,
        payload_len: header.payload_len,
        expected: expected as u32,
    };
    match header.block_type {
        TYPE_EXEC => {
            let start_time_ns = u64::from_le_bytes(payload[0..8].try_into().unwrap());
            let entries = payload[EXEC_SIZE..].chunks_exact(ENTRY_SIZE).map(ExecEntry::decode).collect();
            Ok(Block::Exec(ExecFrame { unit_id: header.unit_id, start_time_ns, entries }))
        }
        TYPE_INFO if payload.len() == INFO_PAYLOAD_SIZE => {
            Ok(Block::Info { unit_id: header.unit_id, info: InfoBlock::decode_payload(&payload) })
        }
        TYPE_INFO => Err(malformed(INFO_PAYLOAD_SIZE)),
        TYPE_ARCH if payload.len() == ARCH_PAYLOAD_SIZE => {
            Ok(Block::Arch { unit_id: header.unit_id, arch: ArchBlock::decode_payload(&payload) })
        }
        TYPE_ARCH => Err(malformed(ARCH_PAYLOAD_SIZE)),
        _ => Ok(Block::Unknown { header, payload }),
    }
}

fn is_valid_exec_len(payload_len: u32) -> bool {
    let len = payload_len as usize;
    len >= EXEC_SIZE + ENTRY_SIZE && (len - EXEC_SIZE).is_multiple_of(ENTRY_SIZE)
}

/// Decodes one block from `reader`, which must sit on a block boundary.
///
/// Returns `Ok(None)` on a clean end of stream. Error offsets are relative to
/// the start of this block.
pub fn decode_block<R: Read + ?Sized>(reader: &mut R) -> Result<Option<Block>, ElogError> {
    let mut hdr = [0u8; HEADER_SIZE];
    let got = read_full(reader, &mut hdr)?;
    if got == 0 {
        return Ok(None);
    }
    let header = BlockHeader::decode(&hdr[..got])?;
    if header.block_type == TYPE_EXEC && !is_valid_exec_len(header.payload_len) {
        return Err(ElogError::MalformedExecFrame { offset: 0, payload_len: header.payload_len });
    }
    let mut payload = Vec::new();
    let want = u64::from(header.payload_len);
    let got = reader.take(want).read_to_end(&mut payload)? as u64;
    if got < want {
        return Err(ElogError::TruncatedBlock {
            offset: 0,
            needed: HEADER_SIZE as u64 + want,
            available: HEADER_SIZE as u64 + got,
        });
    }
    decode_payload(header, payload).map(Some)
}

/// Iterator over the blocks of an elog stream, yielding each block with its
/// byte offset. Stops after the first error.
pub struct BlockReader<R> {
    reader: R,
    offset: u64,
    failed: bool,
}

impl<R: Read> BlockReader<R> {
    pub fn new(reader: R) -> Self {
        BlockReader { reader, offset: 0, failed: false }
    }

    /// Bytes consumed so far.
    pub fn offset(&self) -> u64 {
        self.offset
    }
}

impl<R: Read> Iterator for BlockReader<R> {
    type Item = Result<(u64, Block), ElogError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match decode_block(&mut self.reader) {
            Ok(None) => None,
            Ok(Some(block)) => {
                let at = self.offset;
                self.offset += block.encoded_len();
                Some(Ok((at, block)))
            }
            Err(e) => {
                self.failed = true;
                Some(Err(e.rebase(self.offset)))
            }
        }
    }
}

pub fn iterate_blocks<R: Read>(reader: R) -> BlockReader<R> {
    BlockReader::new(reader)
}

/// Decodes a whole in-memory elog.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Block>, ElogError> {
    iterate_blocks(bytes).map(|r| r.map(|(_, b)| b)).collect()
}

/// Predicted file size after recording `n_tb` entries with `e_buf` entries
/// per frame: the preamble, `n_tb / e_buf` full frames and, when `n_tb` is
/// not a multiple of `e_buf`, one final partial frame.
pub fn predict_file_size(n_tb: u64, e_buf: u64) -> Result<u64, ElogError> {
    if e_buf == 0 {
        return Err(ElogError::InvalidParam("entries per buffer must be at least 1"));
    }
    let frame_overhead = (HEADER_SIZE + EXEC_SIZE) as u64;
    let entry = ENTRY_SIZE as u64;
    let full = n_tb / e_buf;
    let rest = n_tb % e_buf;
    let mut size = PREAMBLE_SIZE + full * (frame_overhead + e_buf * entry);
    if rest > 0 {
        size += frame_overhead + rest * entry;
    }
    Ok(size)
}

/// Approximate size of a buffered trace relative to an unbuffered one,
/// ignoring the preamble: `(4/9) / e_buf + 5/9`.
pub fn size_ratio(e_buf: u64) -> Result<f64, ElogError> {
    if e_buf == 0 {
        return Err(ElogError::InvalidParam("entries per buffer must be at least 1"));
    }
    Ok(4.0 / 9.0 / e_buf as f64 + 5.0 / 9.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Byte packing written out by hand, independent of `to_le_bytes`.
    fn pack_le(values: &[(u64, usize)]) -> Vec<u8> {
        let mut out = Vec::new();
        for &(v, width) in values {
            for i in 0..width {
                out.push(((v >> (8 * i)) & 0xff) as u8);
            }
        }
        out
    }

    #[test]
    fn header_encoding() {
        let h = BlockHeader { block_type: 1, unit_id: 0, payload_len: 28 };
        assert_eq!(h.encode(), [0x01, 0, 0, 0, 0x1c, 0, 0, 0]);
        assert_eq!(BlockHeader::default().encode(), [0u8; 8]);
        let h = BlockHeader { block_type: 1, unit_id: 3, payload_len: 648 };
        assert_eq!(h.encode().to_vec(), pack_le(&[(1, 2), (3, 2), (648, 4)]));
        assert_eq!(h.encode(), [0x01, 0x00, 0x03, 0x00, 0x88, 0x02, 0x00, 0x00]);
    }

    #[test]
    fn header_decoding() {
        let h = BlockHeader::decode(&[0x01, 0, 0, 0, 0x1c, 0, 0, 0]).unwrap();
        assert_eq!(h, BlockHeader { block_type: 1, unit_id: 0, payload_len: 28 });
        assert!(matches!(
            BlockHeader::decode(&[0u8; 7]),
            Err(ElogError::TruncatedBlock { needed: 8, available: 7, .. })
        ));
    }

    #[test]
    fn frame_sizes() {
        let entry = ExecEntry::new(0x1000, 0x1010, 5);
        let one = ExecFrame { unit_id: 0, start_time_ns: 1, entries: vec![entry] };
        let bytes = one.encode().unwrap();
        assert_eq!(bytes.len(), 36);
        assert_eq!(&bytes[..8], &[1, 0, 0, 0, 28, 0, 0, 0]);
        let many = ExecFrame { unit_id: 2, start_time_ns: 9, entries: vec![entry; 32] };
        let bytes = many.encode().unwrap();
        assert_eq!(bytes.len(), 656);
        assert_eq!(BlockHeader::decode(&bytes).unwrap().payload_len, 648);
        let empty = ExecFrame::default();
        assert!(matches!(empty.encode(), Err(ElogError::EmptyFrame)));
    }

    #[test]
    fn entry_layout() {
        let bytes = ExecFrame { unit_id: 0, start_time_ns: 0x0102, entries: vec![ExecEntry::new(0x1000, 0x1010, 5)] }
            .encode()
            .unwrap();
        let expected = pack_le(&[(1, 2), (0, 2), (28, 4), (0x0102, 8), (5, 4), (0x1000, 8), (0x1010, 8)]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn decode_rejects_bad_exec_length() {
        let mut bytes = BlockHeader { block_type: 1, unit_id: 0, payload_len: 30 }.encode().to_vec();
        bytes.extend_from_slice(&[0u8; 30]);
        assert!(matches!(
            decode_block(&mut bytes.as_slice()),
            Err(ElogError::MalformedExecFrame { payload_len: 30, .. })
        ));
        // Header-only exec block (no entries) is malformed as well.
        let bytes = BlockHeader { block_type: 1, unit_id: 0, payload_len: 8 }.encode();
        assert!(matches!(decode_block(&mut &bytes[..]), Err(ElogError::MalformedExecFrame { .. })));
    }

    #[test]
    fn unknown_blocks_are_preserved() {
        let header = BlockHeader { block_type: 0x7777, unit_id: 4, payload_len: 5 };
        let mut bytes = header.encode().to_vec();
        bytes.extend_from_slice(b"hello");
        bytes.extend_from_slice(
            &ExecFrame { unit_id: 0, start_time_ns: 0, entries: vec![ExecEntry::new(1, 2, 0)] }.encode().unwrap(),
        );
        let blocks = decode_all(&bytes).unwrap();
        assert_eq!(blocks[0], Block::Unknown { header, payload: b"hello".to_vec() });
        assert!(matches!(blocks[1], Block::Exec(_)));
        assert_eq!(blocks[0].encode(), &bytes[..13]);
    }

    #[test]
    fn preamble_is_124_bytes() {
        let mut out = Vec::new();
        let p = ConfigPreamble::default();
        assert_eq!(write_config_preamble(&mut out, &p).unwrap(), 124);
        assert_eq!(out.len(), 124);
        let blocks = decode_all(&out).unwrap();
        assert_eq!(blocks, vec![Block::Info { unit_id: 0, info: p.info }, Block::Arch { unit_id: 0, arch: p.arch }]);
    }

    #[test]
    fn long_tool_name_is_truncated() {
        let long = "x".repeat(60);
        let mut p = ConfigPreamble::default();
        p.info.tool_name = FixedText::new(&long);
        assert_eq!(p.info.tool_name.to_string_lossy(), "x".repeat(48));
        let bytes = p.encode();
        assert_eq!(bytes.len(), 124);
        match &decode_all(&bytes).unwrap()[0] {
            Block::Info { info, .. } => assert_eq!(info.tool_name.as_bytes(), &[b'x'; 48]),
            other => panic!("unexpected block {other:?}"),
        }
        let short = FixedText::<48>::new("qemu");
        assert_eq!(&short.as_bytes()[..5], b"qemu\0");
        assert!(short.as_bytes()[4..].iter().all(|&b| b == 0));
    }

    #[test]
    fn iterate_counts_and_truncation() {
        let mut bytes = ConfigPreamble::default().encode();
        for i in 0..3u64 {
            let f = ExecFrame { unit_id: 0, start_time_ns: i, entries: vec![ExecEntry::new(i, i + 4, 0); 3] };
            bytes.extend_from_slice(&f.encode().unwrap());
        }
        let mut reader = iterate_blocks(bytes.as_slice());
        assert_eq!(reader.by_ref().count(), 5);
        assert_eq!(reader.offset(), bytes.len() as u64);

        assert_eq!(iterate_blocks(&[][..]).count(), 0);

        // Cut the last frame (76 bytes, starts at 124 + 2*76) in the middle.
        let cut = &bytes[..124 + 2 * 76 + 40];
        let items: Vec<_> = iterate_blocks(cut).collect();
        assert_eq!(items.len(), 5);
        assert!(items[..4].iter().all(|r| r.is_ok()));
        match &items[4] {
            Err(ElogError::TruncatedBlock { offset, needed, available }) => {
                assert_eq!(*offset, 124 + 2 * 76);
                assert_eq!(*needed, 76);
                assert_eq!(*available, 40);
            }
            other => panic!("expected truncation, got {other:?}"),
        }

        // A header cut short is reported the same way.
        let cut = &bytes[..124 + 3];
        let err = iterate_blocks(cut).find_map(|r| r.err()).unwrap();
        assert_eq!(err.offset(), Some(124));
    }

    #[test]
    fn size_model_examples() {
        assert_eq!(predict_file_size(1, 1).unwrap(), 160);
        assert_eq!(predict_file_size(0, 512).unwrap(), 124);
        assert_eq!(predict_file_size(1024, 32).unwrap(), 21_116);
        // 5 entries in a 512-entry buffer leave one partial frame.
        assert_eq!(predict_file_size(5, 512).unwrap(), 124 + 16 + 100);
        assert!(matches!(predict_file_size(1, 0), Err(ElogError::InvalidParam(_))));
    }

    #[test]
    fn size_ratio_examples() {
        assert_eq!(size_ratio(1).unwrap(), 1.0);
        let r32 = size_ratio(32).unwrap();
        assert!((r32 - 0.569_444).abs() < 1e-6);
        assert_eq!(((1.0 - r32) * 100.0).round(), 43.0);
        let r_inf = size_ratio(u64::MAX).unwrap();
        assert!((r_inf - 5.0 / 9.0).abs() < 1e-12);
        assert_eq!(((1.0 - r_inf) * 100.0).round(), 44.0);
        assert!(size_ratio(0).is_err());
    }

    #[test]
    fn ratio_matches_exact_frame_arithmetic() {
        for e in [1u64, 2, 3, 7, 32, 512, 65536] {
            let exact = (16.0 + 20.0 * e as f64) / (36.0 * e as f64);
            assert!((size_ratio(e).unwrap() - exact).abs() < 1e-12);
        }
    }

    fn arb_entry() -> impl Strategy<Value = ExecEntry> {
        (any::<u32>(), any::<u64>(), any::<u64>()).prop_map(|(d, s, e)| ExecEntry::new(s, e, d))
    }

    fn arb_block() -> impl Strategy<Value = Block> {
        prop_oneof![
            (any::<u16>(), any::<u64>(), prop::collection::vec(arb_entry(), 1..40))
                .prop_map(|(u, t, entries)| { Block::Exec(ExecFrame { unit_id: u, start_time_ns: t, entries }) }),
            (any::<u16>(), any::<u16>(), any::<u16>(), any::<u32>(), prop::collection::vec(any::<u8>(), 0..60))
                .prop_map(|(unit_id, a, b, flags, name)| Block::Info {
                    unit_id,
                    info: InfoBlock {
                        version_major: a,
                        version_minor: b,
                        flags,
                        tool_name: FixedText::from_bytes(&name)
                    },
                }),
            (any::<u16>(), any::<u32>(), any::<u32>(), prop::collection::vec(any::<u8>(), 0..50)).prop_map(
                |(unit_id, arch_id, bits, name)| Block::Arch {
                    unit_id,
                    arch: ArchBlock { arch_id, guest_word_bits: bits, arch_name: FixedText::from_bytes(&name) },
                }
            ),
            (any::<u16>(), any::<u16>(), prop::collection::vec(any::<u8>(), 0..100))
                .prop_filter("known type codes", |(t, _, _)| ![TYPE_INFO, TYPE_EXEC, TYPE_ARCH].contains(t))
                .prop_map(|(t, unit_id, payload)| Block::Unknown {
                    header: BlockHeader { block_type: t, unit_id, payload_len: payload.len() as u32 },
                    payload,
                }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn header_roundtrip(t: u16, u: u16, len: u32) {
            let h = BlockHeader { block_type: t, unit_id: u, payload_len: len };
            prop_assert_eq!(BlockHeader::decode(&h.encode()).unwrap(), h);
        }

        #[test]
        fn block_stream_roundtrip(blocks in prop::collection::vec(arb_block(), 0..8)) {
            let mut bytes = Vec::new();
            for b in &blocks {
                b.encode_into(&mut bytes);
            }
            let decoded = decode_all(&bytes).unwrap();
            prop_assert_eq!(&decoded, &blocks);
            let mut again = Vec::new();
            for b in &decoded {
                b.encode_into(&mut again);
            }
            prop_assert_eq!(again, bytes);
        }
    }
}
