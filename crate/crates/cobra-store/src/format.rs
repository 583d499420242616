//! Bit-exact store-file layout and the recovery scan.
//!
//! A store file is a 16-byte header followed by checksummed record frames,
//! appended in commit order:
//!
//! ```text
//! header   magic "CPS1" | version u16 | flags u16 | reserved [0u8; 8]
//! frame    stored_length u32 | record_type u8 | codec u8 | raw_length u32
//!          | payload [u8; stored_length] | checksum u32
//! ```
//!
//! All integers are little-endian. The checksum is CRC-32 over the
//! record_type byte, the codec byte, the raw_length bytes, and the stored
//! payload. Object frames (type 1) may be deflate-compressed; master
//! frames (type 2) are always raw so recovery never depends on codec
//! health. Visibility is defined solely by master frames: the recovery
//! scan walks the file from the header and the last fully intact master
//! with a strictly increasing sequence number wins.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::error::{Result, StoreError};
use crate::value::Value;

pub const MAGIC: [u8; 4] = *b"CPS1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 16;
/// Frame bytes besides the stored payload: length, type, codec, raw
/// length, trailing checksum.
pub const FRAME_OVERHEAD: u64 = 14;

/// CRC-32, polynomial 0xEDB88320 reflected, init and final xor 0xFFFFFFFF.
pub fn crc32(data: &[u8]) -> u32 {
    crc32fast::hash(data)
}

fn frame_checksum(record_type: u8, codec: u8, raw_len: u32, stored: &[u8]) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&[record_type, codec]);
    hasher.update(&raw_len.to_le_bytes());
    hasher.update(stored);
    hasher.finalize()
}

/// Compresses to a raw deflate stream; level 0 passes the data through.
pub fn compress_payload(data: &[u8], level: u8) -> Vec<u8> {
    assert!(level <= 9, "codec level out of range");
    if level == 0 {
        return data.to_vec();
    }
    let mut encoder = flate2::write::DeflateEncoder::new(
        Vec::with_capacity(data.len() / 2 + 16),
        flate2::Compression::new(u32::from(level)),
    );
    encoder.write_all(data).expect("in-memory deflate write");
    encoder.finish().expect("in-memory deflate finish")
}

/// Inflates a raw deflate stream; the result must be exactly `raw_length`
/// bytes.
pub fn decompress_payload(data: &[u8], raw_length: u64) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(raw_length.min(1 << 20) as usize);
    let mut decoder = flate2::read::DeflateDecoder::new(data).take(raw_length + 1);
    decoder
        .read_to_end(&mut out)
        .map_err(|e| StoreError::CorruptPayload(format!("deflate stream: {e}")))?;
    if out.len() as u64 != raw_length {
        return Err(StoreError::CorruptPayload(format!(
            "decompressed to {} bytes, expected {raw_length}",
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordType {
    Object = 1,
    Master = 2,
}

/// Codec applied to an object frame's payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Raw,
    Deflate { level: u8 },
}

impl Codec {
    pub fn from_level(level: u8) -> Codec {
        if level == 0 {
            Codec::Raw
        } else {
            Codec::Deflate { level }
        }
    }

    fn byte(self) -> u8 {
        match self {
            Codec::Raw => 0,
            Codec::Deflate { .. } => 1,
        }
    }
}

/// Position and total length of a frame within the store file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Locator {
    pub offset: u64,
    pub frame_len: u64,
}

/// Committed index: container name to object name to frame locator.
pub type TableOfContents = BTreeMap<String, BTreeMap<String, Locator>>;

/// The last object written in a commit interval: a sequence number plus a
/// full table-of-contents snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterRecord {
    pub seq: u64,
    pub toc: TableOfContents,
}

impl MasterRecord {
    /// Encodes as `Rec{seq: Int, toc: Map container -> Map object ->
    /// Seq[Int offset, Int frame_length]}`.
    pub fn to_value(&self) -> Result<Value> {
        let as_int = |n: u64, what: &str| -> Result<Value> {
            i64::try_from(n)
                .map(Value::Int)
                .map_err(|_| StoreError::InvalidValue(format!("{what} {n} exceeds i64 range")))
        };
        let mut toc = BTreeMap::new();
        for (container, objects) in &self.toc {
            let mut entry = BTreeMap::new();
            for (name, loc) in objects {
                entry.insert(
                    name.clone(),
                    Value::Seq(vec![
                        as_int(loc.offset, "offset")?,
                        as_int(loc.frame_len, "frame length")?,
                    ]),
                );
            }
            toc.insert(container.clone(), Value::Map(entry));
        }
        Ok(Value::Rec(vec![
            ("seq".into(), as_int(self.seq, "seq")?),
            ("toc".into(), Value::Map(toc)),
        ]))
    }

    pub fn from_value(v: &Value) -> Result<MasterRecord> {
        let malformed =
            |what: &str| StoreError::MalformedEncoding(format!("master record: {what}"));
        let as_u64 = |v: &Value, what: &str| -> Result<u64> {
            match v {
                Value::Int(i) if *i >= 0 => Ok(*i as u64),
                _ => Err(malformed(what)),
            }
        };
        let Value::Rec(fields) = v else {
            return Err(malformed("not a record"));
        };
        let [(seq_name, seq_val), (toc_name, toc_val)] = fields.as_slice() else {
            return Err(malformed("expected exactly seq and toc fields"));
        };
        if seq_name != "seq" || toc_name != "toc" {
            return Err(malformed("unexpected field names"));
        }
        let seq = as_u64(seq_val, "seq is not a non-negative integer")?;
        let Value::Map(containers) = toc_val else {
            return Err(malformed("toc is not a map"));
        };
        let mut toc = TableOfContents::new();
        for (container, objects_val) in containers {
            let Value::Map(objects) = objects_val else {
                return Err(malformed("container entry is not a map"));
            };
            let mut entry = BTreeMap::new();
            for (name, loc_val) in objects {
                let Value::Seq(parts) = loc_val else {
                    return Err(malformed("locator is not a sequence"));
                };
                let [off, len] = parts.as_slice() else {
                    return Err(malformed("locator is not a pair"));
                };
                entry.insert(
                    name.clone(),
                    Locator {
                        offset: as_u64(off, "locator offset")?,
                        frame_len: as_u64(len, "locator frame length")?,
                    },
                );
            }
            toc.insert(container.clone(), entry);
        }
        Ok(MasterRecord { seq, toc })
    }
}

/// Why a frame was rejected during a scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DamageReason {
    /// Stored checksum does not match the frame contents.
    Checksum,
    /// Structurally invalid: bad type or codec byte, length inconsistency,
    /// or an undecodable/non-monotone master payload.
    Malformed,
    /// The frame runs past the end of the file.
    Truncated,
}

impl std::fmt::Display for DamageReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DamageReason::Checksum => "checksum",
            DamageReason::Malformed => "malformed",
            DamageReason::Truncated => "truncated",
        })
    }
}

/// Last valid master found by a recovery scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MasterPointer {
    pub locator: Locator,
    pub seq: u64,
}

/// Outcome of the recovery scan: where the committed state ends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryReport {
    pub last_valid_master: Option<MasterPointer>,
    /// End of the last valid master frame, or end of header when none.
    pub write_cursor: u64,
    /// Bytes after the write cursor (uncommitted interval and debris).
    pub orphan_bytes: u64,
    pub damaged: Vec<(u64, DamageReason)>,
}

/// Outcome of a full integrity scan, which keeps walking past damaged
/// frames whenever the intact frame length allows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub damaged: Vec<(u64, DamageReason)>,
    pub masters: u64,
    pub objects: u64,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.damaged.is_empty()
    }
}

struct ParsedFrame {
    record_type: u8,
    codec: u8,
    raw_len: u32,
    stored: Vec<u8>,
    crc_ok: bool,
    next: u64,
}

enum FrameParse {
    Frame(ParsedFrame),
    /// Structurally broken but the frame extent is known, so a full scan
    /// can skip it.
    Malformed { next: u64 },
    Truncated,
}

fn parse_frame_at(file: &File, offset: u64, file_len: u64) -> Result<FrameParse> {
    if file_len - offset < 10 {
        return Ok(FrameParse::Truncated);
    }
    let mut prefix = [0u8; 10];
    file.read_exact_at(&mut prefix, offset)?;
    let stored_len = u32::from_le_bytes(prefix[0..4].try_into().unwrap());
    let record_type = prefix[4];
    let codec = prefix[5];
    let raw_len = u32::from_le_bytes(prefix[6..10].try_into().unwrap());
    let next = offset + FRAME_OVERHEAD + u64::from(stored_len);
    if next > file_len {
        return Ok(FrameParse::Truncated);
    }
    let structurally_ok = matches!(record_type, 1 | 2)
        && matches!(codec, 0 | 1)
        && (codec != 0 || stored_len == raw_len)
        && (record_type != 2 || codec == 0);
    if !structurally_ok {
        return Ok(FrameParse::Malformed { next });
    }
    let mut stored = vec![0u8; stored_len as usize];
    file.read_exact_at(&mut stored, offset + 10)?;
    let mut crc_bytes = [0u8; 4];
    file.read_exact_at(&mut crc_bytes, next - 4)?;
    let crc_ok = u32::from_le_bytes(crc_bytes) == frame_checksum(record_type, codec, raw_len, &stored);
    Ok(FrameParse::Frame(ParsedFrame {
        record_type,
        codec,
        raw_len,
        stored,
        crc_ok,
        next,
    }))
}

fn check_header(file: &File, path: &Path) -> Result<u64> {
    let not_a_store = |reason: &str| StoreError::NotAStore {
        path: path.to_owned(),
        reason: reason.to_owned(),
    };
    let file_len = file.metadata()?.len();
    if file_len < HEADER_LEN {
        return Err(not_a_store("shorter than the 16-byte header"));
    }
    let mut header = [0u8; HEADER_LEN as usize];
    file.read_exact_at(&mut header, 0)?;
    if header[0..4] != MAGIC {
        return Err(not_a_store("bad magic"));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != FORMAT_VERSION {
        return Err(not_a_store("unsupported version"));
    }
    let flags = u16::from_le_bytes([header[6], header[7]]);
    if flags != 0 {
        return Err(not_a_store("unsupported flags"));
    }
    if header[8..16].iter().any(|&b| b != 0) {
        return Err(not_a_store("nonzero reserved bytes"));
    }
    Ok(file_len)
}

struct ScanOutcome {
    report: RecoveryReport,
    toc: TableOfContents,
    masters_seen: u64,
}

/// Walks frames from the header, stopping at the first invalid or partial
/// frame. A master frame is valid only if its payload decodes and its seq
/// exceeds the previous master's.
fn scan_inner(file: &File, file_len: u64) -> Result<ScanOutcome> {
    let mut pos = HEADER_LEN;
    let mut last_master: Option<MasterPointer> = None;
    let mut last_seq = 0u64;
    let mut masters_seen = 0u64;
    let mut toc = TableOfContents::new();
    let mut damaged = Vec::new();
    while pos < file_len {
        match parse_frame_at(file, pos, file_len)? {
            FrameParse::Truncated => {
                damaged.push((pos, DamageReason::Truncated));
                break;
            }
            FrameParse::Malformed { .. } => {
                damaged.push((pos, DamageReason::Malformed));
                break;
            }
            FrameParse::Frame(frame) => {
                if !frame.crc_ok {
                    damaged.push((pos, DamageReason::Checksum));
                    break;
                }
                if frame.record_type == RecordType::Master as u8 {
                    let master = Value::decode(&frame.stored)
                        .and_then(|v| MasterRecord::from_value(&v))
                        .ok()
                        .filter(|m| m.seq > last_seq);
                    let Some(master) = master else {
                        damaged.push((pos, DamageReason::Malformed));
                        break;
                    };
                    last_seq = master.seq;
                    masters_seen += 1;
                    toc = master.toc;
                    last_master = Some(MasterPointer {
                        locator: Locator {
                            offset: pos,
                            frame_len: frame.next - pos,
                        },
                        seq: master.seq,
                    });
                }
                pos = frame.next;
            }
        }
    }
    let write_cursor = last_master
        .map(|m| m.locator.offset + m.locator.frame_len)
        .unwrap_or(HEADER_LEN);
    Ok(ScanOutcome {
        report: RecoveryReport {
            last_valid_master: last_master,
            write_cursor,
            orphan_bytes: file_len - write_cursor,
            damaged,
        },
        toc: if last_master.is_some() {
            toc
        } else {
            TableOfContents::new()
        },
        masters_seen,
    })
}

/// Finds the last valid committed state of the store at `path`.
pub fn scan_recover(path: impl AsRef<Path>) -> Result<RecoveryReport> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let file_len = check_header(&file, path)?;
    Ok(scan_inner(&file, file_len)?.report)
}

/// Full integrity scan for auditing: reports every damaged frame it can
/// delimit and counts the intact ones.
pub fn scan_verify(path: impl AsRef<Path>) -> Result<VerifyReport> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let file_len = check_header(&file, path)?;
    let mut pos = HEADER_LEN;
    let mut report = VerifyReport {
        damaged: Vec::new(),
        masters: 0,
        objects: 0,
    };
    let mut last_seq = 0u64;
    while pos < file_len {
        match parse_frame_at(&file, pos, file_len)? {
            FrameParse::Truncated => {
                report.damaged.push((pos, DamageReason::Truncated));
                break;
            }
            FrameParse::Malformed { next } => {
                report.damaged.push((pos, DamageReason::Malformed));
                pos = next;
            }
            FrameParse::Frame(frame) => {
                if !frame.crc_ok {
                    report.damaged.push((pos, DamageReason::Checksum));
                } else if frame.record_type == RecordType::Master as u8 {
                    let master = Value::decode(&frame.stored)
                        .and_then(|v| MasterRecord::from_value(&v))
                        .ok()
                        .filter(|m| m.seq > last_seq);
                    match master {
                        Some(m) => {
                            last_seq = m.seq;
                            report.masters += 1;
                        }
                        None => report.damaged.push((pos, DamageReason::Malformed)),
                    }
                } else {
                    report.objects += 1;
                }
                pos = frame.next;
            }
        }
    }
    Ok(report)
}

/// Truncates the store at `path` to its last committed state and reports
/// what was discarded. Takes the writer lock for the duration.
pub struct RecoverOutcome {
    pub seq: u64,
    pub discarded: u64,
}

pub fn recover_store(path: impl AsRef<Path>) -> Result<RecoverOutcome> {
    let path = path.as_ref();
    let _lock = WriterLock::acquire(path)?;
    let file = OpenOptions::new().read(true).write(true).open(path)?;
    let file_len = check_header(&file, path)?;
    let outcome = scan_inner(&file, file_len)?;
    let report = outcome.report;
    let discarded = file_len - report.write_cursor;
    if discarded > 0 {
        file.set_len(report.write_cursor)?;
        file.sync_all()?;
    }
    Ok(RecoverOutcome {
        seq: report.last_valid_master.map(|m| m.seq).unwrap_or(0),
        discarded,
    })
}

/// Presence-based advisory writer lock: sidecar file `<path>.lock`
/// containing the holder's pid as decimal text. A crashed writer leaves
/// the lock behind; removing it is an explicit operator action.
struct WriterLock {
    lock_path: PathBuf,
}

fn lock_path_for(store_path: &Path) -> PathBuf {
    let mut os = store_path.as_os_str().to_owned();
    os.push(".lock");
    PathBuf::from(os)
}

impl WriterLock {
    fn acquire(store_path: &Path) -> Result<WriterLock> {
        let lock_path = lock_path_for(store_path);
        match OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
        {
            Ok(mut f) => {
                let _ = write!(f, "{}", std::process::id());
                Ok(WriterLock { lock_path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = std::fs::read_to_string(&lock_path)
                    .map(|s| s.trim().to_owned())
                    .unwrap_or_else(|_| "unknown".to_owned());
                Err(StoreError::LockHeld {
                    path: store_path.to_owned(),
                    holder,
                })
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock_path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenMode {
    ReadOnly,
    ReadWrite,
}

/// Planned crash point for the durability harness. Test builds only.
#[cfg(feature = "fault-injection")]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashInjection {
    /// Stop after this many payload bytes have reached the file in the
    /// current commit, splitting a write if necessary.
    AfterBytes(u64),
    /// Stop just before the master frame's first byte.
    BeforeMaster,
    /// Stop after this many bytes of the master frame.
    MidMaster(u64),
    /// Write the whole master frame but skip the sync after it.
    AfterMasterBeforeSync,
}

#[cfg(feature = "fault-injection")]
struct CrashState {
    plan: CrashInjection,
    written: u64,
    crashed: bool,
}

/// An open store file: header-validated, recovery-scanned, and (in
/// read-write mode) exclusively locked with the write cursor positioned
/// after the last valid master. Confined to one thread of control at a
/// time.
pub struct StoreFile {
    path: PathBuf,
    file: File,
    writable: bool,
    cursor: u64,
    file_len: u64,
    last_seq: u64,
    toc: TableOfContents,
    masters_seen: u64,
    report: RecoveryReport,
    _lock: Option<WriterLock>,
    #[cfg(feature = "fault-injection")]
    crash: Option<CrashState>,
}

impl std::fmt::Debug for StoreFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoreFile")
            .field("path", &self.path)
            .field("writable", &self.writable)
            .field("cursor", &self.cursor)
            .field("last_seq", &self.last_seq)
            .finish()
    }
}

impl StoreFile {
    /// Creates a fresh store: exactly the 16-byte header, writer lock
    /// held, cursor at offset 16.
    pub fn create(path: impl AsRef<Path>) -> Result<StoreFile> {
        let path = path.as_ref();
        if path.exists() {
            return Err(StoreError::AlreadyExists(path.to_owned()));
        }
        let lock = WriterLock::acquire(path)?;
        let file = match OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(path)
        {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(StoreError::AlreadyExists(path.to_owned()))
            }
            Err(e) => return Err(e.into()),
        };
        let mut header = [0u8; HEADER_LEN as usize];
        header[0..4].copy_from_slice(&MAGIC);
        header[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        file.write_all_at(&header, 0)?;
        file.sync_all()?;
        Ok(StoreFile {
            path: path.to_owned(),
            file,
            writable: true,
            cursor: HEADER_LEN,
            file_len: HEADER_LEN,
            last_seq: 0,
            toc: TableOfContents::new(),
            masters_seen: 0,
            report: RecoveryReport {
                last_valid_master: None,
                write_cursor: HEADER_LEN,
                orphan_bytes: 0,
                damaged: Vec::new(),
            },
            _lock: Some(lock),
            #[cfg(feature = "fault-injection")]
            crash: None,
        })
    }

    /// Opens an existing store and runs the recovery scan, so the visible
    /// state is the last committed interval. Read-write mode takes the
    /// writer lock and positions the cursor per the recovery report.
    pub fn open(path: impl AsRef<Path>, mode: OpenMode) -> Result<StoreFile> {
        let path = path.as_ref();
        let writable = mode == OpenMode::ReadWrite;
        let file = OpenOptions::new().read(true).write(writable).open(path)?;
        let file_len = check_header(&file, path)?;
        let lock = if writable {
            Some(WriterLock::acquire(path)?)
        } else {
            None
        };
        let outcome = scan_inner(&file, file_len)?;
        Ok(StoreFile {
            path: path.to_owned(),
            file,
            writable,
            cursor: outcome.report.write_cursor,
            file_len,
            last_seq: outcome
                .report
                .last_valid_master
                .map(|m| m.seq)
                .unwrap_or(0),
            toc: outcome.toc,
            masters_seen: outcome.masters_seen,
            report: outcome.report,
            _lock: lock,
            #[cfg(feature = "fault-injection")]
            crash: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_writable(&self) -> bool {
        self.writable
    }

    /// Table of contents of the last committed interval.
    pub fn toc(&self) -> &TableOfContents {
        &self.toc
    }

    /// Sequence number of the last committed master; 0 when none.
    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Count of valid master frames seen by the open-time scan plus those
    /// written since.
    pub fn masters_seen(&self) -> u64 {
        self.masters_seen
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    /// Recovery report from open time.
    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.report
    }

    fn require_writable(&self) -> Result<()> {
        if self.writable {
            Ok(())
        } else {
            Err(StoreError::ReadOnlyStore)
        }
    }

    fn write_chunk(&mut self, bytes: &[u8]) -> Result<()> {
        #[cfg(feature = "fault-injection")]
        if let Some(crash) = &mut self.crash {
            if crash.crashed {
                return Err(StoreError::SimulatedCrash);
            }
            if let CrashInjection::AfterBytes(limit) = crash.plan {
                let remaining = limit.saturating_sub(crash.written);
                if bytes.len() as u64 > remaining {
                    self.file
                        .write_all_at(&bytes[..remaining as usize], self.cursor)?;
                    crash.written = limit;
                    crash.crashed = true;
                    self.file_len = self.file_len.max(self.cursor + remaining);
                    return Err(StoreError::SimulatedCrash);
                }
            }
            crash.written += bytes.len() as u64;
        }
        self.file.write_all_at(bytes, self.cursor)?;
        self.cursor += bytes.len() as u64;
        self.file_len = self.file_len.max(self.cursor);
        Ok(())
    }

    /// Durability barrier for the data frames of an interval.
    pub fn sync(&mut self) -> Result<()> {
        #[cfg(feature = "fault-injection")]
        if let Some(crash) = &self.crash {
            if crash.crashed {
                return Err(StoreError::SimulatedCrash);
            }
        }
        self.file.sync_all()?;
        Ok(())
    }

    fn build_frame(record_type: RecordType, codec: Codec, payload: &[u8]) -> Result<Vec<u8>> {
        let raw_len = u32::try_from(payload.len())
            .map_err(|_| StoreError::InvalidValue("payload exceeds u32 length".into()))?;
        let stored = match codec {
            Codec::Raw => payload.to_vec(),
            Codec::Deflate { level } => compress_payload(payload, level),
        };
        let stored_len = u32::try_from(stored.len())
            .map_err(|_| StoreError::InvalidValue("compressed payload exceeds u32 length".into()))?;
        let codec_byte = codec.byte();
        let checksum = frame_checksum(record_type as u8, codec_byte, raw_len, &stored);
        let mut frame = Vec::with_capacity(FRAME_OVERHEAD as usize + stored.len());
        frame.extend_from_slice(&stored_len.to_le_bytes());
        frame.push(record_type as u8);
        frame.push(codec_byte);
        frame.extend_from_slice(&raw_len.to_le_bytes());
        frame.extend_from_slice(&stored);
        frame.extend_from_slice(&checksum.to_le_bytes());
        Ok(frame)
    }

    /// Appends one frame at the write cursor. Nothing becomes visible to
    /// readers until a master commits.
    pub fn append_record(
        &mut self,
        record_type: RecordType,
        codec: Codec,
        payload: &[u8],
    ) -> Result<Locator> {
        self.require_writable()?;
        let frame = Self::build_frame(record_type, codec, payload)?;
        let offset = self.cursor;
        self.write_chunk(&frame)?;
        Ok(Locator {
            offset,
            frame_len: frame.len() as u64,
        })
    }

    /// Reads a frame, verifies its checksum, and returns the decompressed
    /// payload.
    pub fn read_record(&self, loc: Locator) -> Result<(RecordType, Vec<u8>)> {
        let bad_locator = || StoreError::BadLocator {
            offset: loc.offset,
            frame_len: loc.frame_len,
        };
        if loc.offset < HEADER_LEN
            || loc.frame_len < FRAME_OVERHEAD
            || loc.offset.checked_add(loc.frame_len).is_none()
            || loc.offset + loc.frame_len > self.file_len
        {
            return Err(bad_locator());
        }
        let frame = match parse_frame_at(&self.file, loc.offset, self.file_len)? {
            FrameParse::Frame(f) => f,
            FrameParse::Malformed { .. } => {
                return Err(StoreError::CorruptPayload(format!(
                    "structurally invalid frame at offset {}",
                    loc.offset
                )))
            }
            FrameParse::Truncated => return Err(bad_locator()),
        };
        if frame.next - loc.offset != loc.frame_len {
            return Err(bad_locator());
        }
        if !frame.crc_ok {
            return Err(StoreError::ChecksumMismatch { offset: loc.offset });
        }
        let record_type = if frame.record_type == RecordType::Master as u8 {
            RecordType::Master
        } else {
            RecordType::Object
        };
        let payload = if frame.codec == 1 {
            decompress_payload(&frame.stored, u64::from(frame.raw_len))?
        } else {
            frame.stored
        };
        Ok((record_type, payload))
    }

    /// Appends the interval's master frame (always raw) and syncs. After
    /// this returns, `master.toc` is the state any later open recovers.
    pub fn write_master(&mut self, master: &MasterRecord) -> Result<Locator> {
        self.require_writable()?;
        if master.seq != self.last_seq + 1 {
            return Err(StoreError::SequenceViolation {
                previous: self.last_seq,
                attempted: master.seq,
            });
        }
        let payload = master.to_value()?.encode()?;
        let frame = Self::build_frame(RecordType::Master, Codec::Raw, &payload)?;
        let offset = self.cursor;

        #[cfg(feature = "fault-injection")]
        if let Some(crash) = &mut self.crash {
            if crash.crashed {
                return Err(StoreError::SimulatedCrash);
            }
            match crash.plan {
                CrashInjection::BeforeMaster => {
                    crash.crashed = true;
                    return Err(StoreError::SimulatedCrash);
                }
                CrashInjection::MidMaster(prefix) => {
                    let prefix = (prefix as usize).min(frame.len());
                    self.file.write_all_at(&frame[..prefix], self.cursor)?;
                    self.file_len = self.file_len.max(self.cursor + prefix as u64);
                    crash.crashed = true;
                    return Err(StoreError::SimulatedCrash);
                }
                _ => {}
            }
        }

        self.write_chunk(&frame)?;

        #[cfg(feature = "fault-injection")]
        if let Some(crash) = &mut self.crash {
            if crash.crashed {
                return Err(StoreError::SimulatedCrash);
            }
            if crash.plan == CrashInjection::AfterMasterBeforeSync {
                crash.crashed = true;
                return Err(StoreError::SimulatedCrash);
            }
        }
        self.file.sync_all()?;

        self.last_seq = master.seq;
        self.toc = master.toc.clone();
        self.masters_seen += 1;
        Ok(Locator {
            offset,
            frame_len: frame.len() as u64,
        })
    }

    /// Arms a crash plan for the next commit. Test harness only.
    #[cfg(feature = "fault-injection")]
    pub fn arm_crash(&mut self, plan: CrashInjection) {
        self.crash = Some(CrashState {
            plan,
            written: 0,
            crashed: false,
        });
    }

    /// Bytes written to the medium since the crash plan was armed.
    #[cfg(feature = "fault-injection")]
    pub fn crash_bytes_written(&self) -> u64 {
        self.crash.as_ref().map(|c| c.written).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// Independent bitwise CRC-32, kept deliberately separate from the
    /// crc32fast-backed implementation it checks.
    fn crc32_reference(data: &[u8]) -> u32 {
        let mut crc: u32 = 0xFFFF_FFFF;
        for &byte in data {
            crc ^= u32::from(byte);
            for _ in 0..8 {
                crc = if crc & 1 != 0 {
                    (crc >> 1) ^ 0xEDB8_8320
                } else {
                    crc >> 1
                };
            }
        }
        crc ^ 0xFFFF_FFFF
    }

    #[test]
    fn crc32_check_values() {
        assert_eq!(crc32(b""), 0x0000_0000);
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(&[0x00]), 0xD202_EF8D);
        assert_eq!(crc32_reference(b"123456789"), 0xCBF4_3926);
        for data in [&b""[..], b"\x00", b"123456789", b"cobra", &[0xFF; 64]] {
            assert_eq!(crc32(data), crc32_reference(data));
        }
    }

    #[test]
    fn create_store_writes_exact_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cps");
        let store = StoreFile::create(&path).unwrap();
        drop(store);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(
            bytes,
            vec![
                0x43, 0x50, 0x53, 0x31, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
                0x00, 0x00, 0x00
            ]
        );
    }

    #[test]
    fn create_store_over_existing_path_fails() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cps");
        drop(StoreFile::create(&path).unwrap());
        assert!(matches!(
            StoreFile::create(&path),
            Err(StoreError::AlreadyExists(_))
        ));
    }

    #[test]
    fn create_store_unwritable_dir_fails() {
        assert!(matches!(
            StoreFile::create("/proc/nope/a.cps"),
            Err(StoreError::Io(_))
        ));
    }

    #[test]
    fn open_fresh_store() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cps");
        drop(StoreFile::create(&path).unwrap());
        let store = StoreFile::open(&path, OpenMode::ReadOnly).unwrap();
        assert!(store.toc().is_empty());
        assert_eq!(store.recovery_report().write_cursor, 16);
        assert_eq!(store.recovery_report().orphan_bytes, 0);
        assert!(store.recovery_report().last_valid_master.is_none());
    }

    #[test]
    fn open_rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, [0xFFu8; 16]).unwrap();
        assert!(matches!(
            StoreFile::open(&path, OpenMode::ReadOnly),
            Err(StoreError::NotAStore { .. })
        ));
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cps");
        let first = StoreFile::create(&path).unwrap();
        assert!(matches!(
            StoreFile::open(&path, OpenMode::ReadWrite),
            Err(StoreError::LockHeld { .. })
        ));
        // Readers are unaffected.
        assert!(StoreFile::open(&path, OpenMode::ReadOnly).is_ok());
        drop(first);
        assert!(StoreFile::open(&path, OpenMode::ReadWrite).is_ok());
    }

    #[test]
    fn append_and_read_round_trip_both_codecs() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cps");
        let mut store = StoreFile::create(&path).unwrap();
        let payload = b"persist me".repeat(20);
        let raw = store
            .append_record(RecordType::Object, Codec::Raw, &payload)
            .unwrap();
        let packed = store
            .append_record(RecordType::Object, Codec::Deflate { level: 1 }, &payload)
            .unwrap();
        assert_eq!(packed.offset, raw.offset + raw.frame_len);
        let (t, got) = store.read_record(raw).unwrap();
        assert_eq!(t, RecordType::Object);
        assert_eq!(got, payload);
        let (_, got) = store.read_record(packed).unwrap();
        assert_eq!(got, payload);
    }

    #[test]
    fn append_on_read_only_handle_fails() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cps");
        drop(StoreFile::create(&path).unwrap());
        let mut store = StoreFile::open(&path, OpenMode::ReadOnly).unwrap();
        assert!(matches!(
            store.append_record(RecordType::Object, Codec::Raw, b"x"),
            Err(StoreError::ReadOnlyStore)
        ));
    }

    #[test]
    fn read_past_end_is_bad_locator() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cps");
        let store = StoreFile::create(&path).unwrap();
        let err = store.read_record(Locator {
            offset: 999,
            frame_len: 30,
        });
        assert!(matches!(err, Err(StoreError::BadLocator { .. })));
    }

    #[test]
    fn minimal_master_frame_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cps");
        let mut store = StoreFile::create(&path).unwrap();
        let master = MasterRecord {
            seq: 1,
            toc: TableOfContents::new(),
        };
        let loc = store.write_master(&master).unwrap();
        assert_eq!(loc.offset, 16);
        assert_eq!(loc.frame_len, 47);
        drop(store);

        let bytes = std::fs::read(&path).unwrap();
        let frame = &bytes[16..];
        let payload_hex = "06020000000300000073657102010000000000000003000000746f630900000000";
        let payload: Vec<u8> = (0..payload_hex.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&payload_hex[i..i + 2], 16).unwrap())
            .collect();
        let mut expected = Vec::new();
        expected.extend_from_slice(&33u32.to_le_bytes());
        expected.push(2);
        expected.push(0);
        expected.extend_from_slice(&33u32.to_le_bytes());
        expected.extend_from_slice(&payload);
        let mut checksummed = vec![2u8, 0u8];
        checksummed.extend_from_slice(&33u32.to_le_bytes());
        checksummed.extend_from_slice(&payload);
        let crc = crc32_reference(&checksummed);
        assert_eq!(crc, 0x6A84_6297);
        expected.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(frame, expected);
    }

    #[test]
    fn write_master_enforces_sequence() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cps");
        let mut store = StoreFile::create(&path).unwrap();
        let toc = TableOfContents::new();
        store
            .write_master(&MasterRecord { seq: 1, toc: toc.clone() })
            .unwrap();
        assert!(matches!(
            store.write_master(&MasterRecord { seq: 1, toc: toc.clone() }),
            Err(StoreError::SequenceViolation { previous: 1, attempted: 1 })
        ));
        assert!(matches!(
            store.write_master(&MasterRecord { seq: 3, toc }),
            Err(StoreError::SequenceViolation { .. })
        ));
    }

    #[test]
    fn compress_round_trip_and_errors() {
        let data = b"abcdefgh".repeat(64);
        for level in 0..=9u8 {
            let stored = compress_payload(&data, level);
            if level == 0 {
                assert_eq!(stored, data);
            } else {
                assert_eq!(
                    decompress_payload(&stored, data.len() as u64).unwrap(),
                    data
                );
                // Wrong raw_length is corruption.
                assert!(decompress_payload(&stored, data.len() as u64 + 1).is_err());
                assert!(decompress_payload(&stored, data.len() as u64 - 1).is_err());
            }
        }
    }

    #[test]
    fn compress_repetitive_input_shrinks() {
        let pattern: Vec<u8> = (0..64u8).collect();
        let data: Vec<u8> = pattern
            .iter()
            .cycle()
            .take(1 << 20)
            .copied()
            .collect();
        let packed = compress_payload(&data, 1);
        assert!((packed.len() as f64) < 0.05 * data.len() as f64);
    }

    #[test]
    fn decompress_fuzz_never_panics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let len = rng.gen_range(0..128);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let _ = decompress_payload(&bytes, rng.gen_range(0..256));
        }
    }

    #[test]
    fn scan_fresh_store() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cps");
        drop(StoreFile::create(&path).unwrap());
        let report = scan_recover(&path).unwrap();
        assert!(report.last_valid_master.is_none());
        assert_eq!(report.write_cursor, 16);
        assert_eq!(report.orphan_bytes, 0);
        assert!(report.damaged.is_empty());
    }

    #[test]
    fn master_record_value_round_trip() {
        let mut toc = TableOfContents::new();
        let mut objs = BTreeMap::new();
        objs.insert(
            "ev001".to_string(),
            Locator {
                offset: 16,
                frame_len: 40,
            },
        );
        toc.insert("hits".to_string(), objs);
        toc.insert("empty".to_string(), BTreeMap::new());
        let master = MasterRecord { seq: 7, toc };
        let v = master.to_value().unwrap();
        assert_eq!(MasterRecord::from_value(&v).unwrap(), master);
    }
}
