//! Write-ahead log of microbatch metadata.
//!
//! Each microbatch becomes one 32-byte record (all integers little-endian):
//!
//! | bytes  | field          |
//! |--------|----------------|
//! | 0..8   | hash64         |
//! | 8..16  | seed64         |
//! | 16..20 | lr_f32 bits    |
//! | 20..24 | opt_step_u32   |
//! | 24     | accum_end_u8   |
//! | 25..27 | mb_len_u16     |
//! | 27..31 | crc32 of 0..27 |
//! | 31     | pad (0x00)     |
//!
//! Segments are a 32-byte header followed by records. Segment seals
//! (SHA-256 and optional HMAC over the record bytes) live in `index.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closure::fnv1a64;
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 32;
pub const HEADER_BYTES: usize = 32;
pub const SEGMENT_MAGIC: &[u8; 6] = b"UNLWAL";
pub const WAL_VERSION: u16 = 1;
pub const DEFAULT_SEGMENT_BYTES: u64 = 64 << 20;
const FLAG_KEYED: u16 = 1;

type HmacSha256 = Hmac<Sha256>;

fn hmac(key: &[u8]) -> HmacSha256 {
    <HmacSha256 as KeyInit>::new_from_slice(key).expect("hmac accepts any key length")
}

pub fn hmac_sha256(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut m = hmac(key);
    m.update(data);
    m.finalize().into_bytes().into()
}

fn ids_le(ids: &[u64]) -> Vec<u8> {
    ids.iter().flat_map(|i| i.to_le_bytes()).collect()
}

/// Order-sensitive hash of a microbatch's sample ids: HMAC-SHA256 truncated
/// to 8 bytes when keyed, FNV-1a otherwise (toy mode).
pub fn content_hash64(ids: &[u64], key: Option<&[u8]>) -> u64 {
    let bytes = ids_le(ids);
    match key {
        Some(k) => {
            let tag = hmac_sha256(k, &bytes);
            u64::from_le_bytes(tag[..8].try_into().unwrap())
        }
        None => fnv1a64(&bytes),
    }
}

pub const UNKEYED_WARNING: &str =
    "warning: WAL content hashes are unkeyed FNV-1a (toy mode); production deployments must use a keyed HMAC";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WalRecord {
    pub hash64: u64,
    pub seed64: u64,
    pub lr_f32: f32,
    pub opt_step_u32: u32,
    pub accum_end: bool,
    pub mb_len: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordFault {
    Crc,
    Pad,
    AccumFlag,
    EmptyMicrobatch,
}

impl WalRecord {
    pub fn encode(&self) -> [u8; RECORD_BYTES] {
        let mut b = [0u8; RECORD_BYTES];
        b[0..8].copy_from_slice(&self.hash64.to_le_bytes());
        b[8..16].copy_from_slice(&self.seed64.to_le_bytes());
        b[16..20].copy_from_slice(&self.lr_f32.to_bits().to_le_bytes());
        b[20..24].copy_from_slice(&self.opt_step_u32.to_le_bytes());
        b[24] = self.accum_end as u8;
        b[25..27].copy_from_slice(&self.mb_len.to_le_bytes());
        let crc = crc32fast::hash(&b[..27]);
        b[27..31].copy_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; RECORD_BYTES]) -> std::result::Result<Self, RecordFault> {
        let crc = u32::from_le_bytes(b[27..31].try_into().unwrap());
        if crc != crc32fast::hash(&b[..27]) {
            return Err(RecordFault::Crc);
        }
        if b[31] != 0 {
            return Err(RecordFault::Pad);
        }
        let accum_end = match b[24] {
            0 => false,
            1 => true,
            _ => return Err(RecordFault::AccumFlag),
        };
        let mb_len = u16::from_le_bytes(b[25..27].try_into().unwrap());
        if mb_len == 0 {
            return Err(RecordFault::EmptyMicrobatch);
        }
        Ok(Self {
            hash64: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            seed64: u64::from_le_bytes(b[8..16].try_into().unwrap()),
            lr_f32: f32::from_bits(u32::from_le_bytes(b[16..20].try_into().unwrap())),
            opt_step_u32: u32::from_le_bytes(b[20..24].try_into().unwrap()),
            accum_end,
            mb_len,
        })
    }
}

/// Content hash → ordered sample ids. Holds raw ids, so it is stored
/// separately from the WAL with owner-only permissions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdManifest {
    pub access_controlled: bool,
    pub entries: BTreeMap<u64, Vec<u64>>,
}

impl IdManifest {
    pub fn new() -> Self {
        Self {
            access_controlled: true,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, hash64: u64, ids: &[u64]) -> Result<()> {
        match self.entries.get(&hash64) {
            Some(existing) if existing != ids => Err(Error::Integrity(format!(
                "content hash {hash64:016x} maps to two different id lists"
            ))),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(hash64, ids.to_vec());
                Ok(())
            }
        }
    }

    /// Ordered ids for a record, checked against its length and hash.
    pub fn resolve(&self, rec: &WalRecord, key: Option<&[u8]>) -> Result<&[u64]> {
        let ids = self
            .entries
            .get(&rec.hash64)
            .ok_or_else(|| Error::Integrity(format!("hash {:016x} not in manifest", rec.hash64)))?;
        if ids.len() != rec.mb_len as usize || content_hash64(ids, key) != rec.hash64 {
            return Err(Error::Integrity(format!(
                "manifest entry {:016x} does not re-derive its record",
                rec.hash64
            )));
        }
        Ok(ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        restrict(&tmp)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(unix)]
fn restrict(path: &Path) -> io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(0o600))
}

#[cfg(not(unix))]
fn restrict(_: &Path) -> io::Result<()> {
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentHeader {
    pub version: u16,
    pub flags: u16,
    pub run_id: [u8; 16],
    pub index: u32,
}

impl SegmentHeader {
    pub fn keyed(&self) -> bool {
        self.flags & FLAG_KEYED != 0
    }

    pub fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut b = [0u8; HEADER_BYTES];
        b[0..6].copy_from_slice(SEGMENT_MAGIC);
        b[6..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..10].copy_from_slice(&self.flags.to_le_bytes());
        b[12..28].copy_from_slice(&self.run_id);
        b[28..32].copy_from_slice(&self.index.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_BYTES || &b[0..6] != SEGMENT_MAGIC {
            return Err(Error::Corruption("bad WAL segment header".into()));
        }
        let version = u16::from_le_bytes([b[6], b[7]]);
        if version != WAL_VERSION {
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: WAL_VERSION as u32,
            });
        }
        Ok(Self {
            version,
            flags: u16::from_le_bytes([b[8], b[9]]),
            run_id: b[12..28].try_into().unwrap(),
            index: u32::from_le_bytes(b[28..32].try_into().unwrap()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSeal {
    pub index: u32,
    pub records: u64,
    pub sha256: String,
    pub hmac: Option<String>,
}

/// One segment: header plus raw record bytes, with its seal if sealed.
#[derive(Clone, Debug, PartialEq)]
pub struct WalSegment {
    pub header: SegmentHeader,
    pub bytes: Vec<u8>,
    pub seal: Option<SegmentSeal>,
}

impl WalSegment {
    pub fn file_bytes(&self) -> Vec<u8> {
        let mut out = self.header.encode().to_vec();
        out.extend(&self.bytes);
        out
    }
}

/// Destination of WAL bytes.
pub trait WalSink {
    fn begin_segment(&mut self, header: &SegmentHeader) -> io::Result<()>;
    fn append(&mut self, record: &[u8; RECORD_BYTES]) -> io::Result<()>;
    /// Flushes the open segment durably and records its seal.
    fn seal(&mut self, seal: &SegmentSeal) -> io::Result<()>;
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub segments: Vec<WalSegment>,
}

impl WalSink for MemorySink {
    fn begin_segment(&mut self, header: &SegmentHeader) -> io::Result<()> {
        self.segments.push(WalSegment {
            header: *header,
            bytes: Vec::new(),
            seal: None,
        });
        Ok(())
    }

    fn append(&mut self, record: &[u8; RECORD_BYTES]) -> io::Result<()> {
        let seg = self
            .segments
            .last_mut()
            .ok_or_else(|| io::Error::other("append before begin_segment"))?;
        seg.bytes.extend_from_slice(record);
        Ok(())
    }

    fn seal(&mut self, seal: &SegmentSeal) -> io::Result<()> {
        if let Some(seg) = self.segments.last_mut() {
            seg.seal = Some(seal.clone());
        }
        Ok(())
    }
}

pub const INDEX_FILE: &str = "index.json";

pub fn segment_file_name(index: u32) -> String {
    format!("seg-{index:05}.wal")
}

/// Writes segments as files under a directory plus `index.json`.
#[derive(Debug)]
pub struct DirSink {
    dir: PathBuf,
    file: Option<BufWriter<fs::File>>,
    seals: Vec<SegmentSeal>,
}

impl DirSink {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            file: None,
            seals: Vec::new(),
        })
    }
}

impl WalSink for DirSink {
    fn begin_segment(&mut self, header: &SegmentHeader) -> io::Result<()> {
        let f = fs::File::create(self.dir.join(segment_file_name(header.index)))?;
        let mut w = BufWriter::new(f);
        w.write_all(&header.encode())?;
        self.file = Some(w);
        Ok(())
    }

    fn append(&mut self, record: &[u8; RECORD_BYTES]) -> io::Result<()> {
        self.file
            .as_mut()
            .ok_or_else(|| io::Error::other("append before begin_segment"))?
            .write_all(record)
    }

    fn seal(&mut self, seal: &SegmentSeal) -> io::Result<()> {
        if let Some(mut w) = self.file.take() {
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        self.seals.push(seal.clone());
        let json = serde_json::to_vec_pretty(&self.seals)?;
        let tmp = self.dir.join("index.json.tmp");
        fs::write(&tmp, json)?;
        fs::rename(tmp, self.dir.join(INDEX_FILE))
    }
}

/// Sink that fails once `fail_after` records have been written.
#[derive(Debug, Default)]
pub struct FailingSink {
    pub inner: MemorySink,
    pub fail_after: usize,
    written: usize,
}

impl FailingSink {
    pub fn new(fail_after: usize) -> Self {
        Self {
            inner: MemorySink::default(),
            fail_after,
            written: 0,
        }
    }
}

impl WalSink for FailingSink {
    fn begin_segment(&mut self, header: &SegmentHeader) -> io::Result<()> {
        self.inner.begin_segment(header)
    }

    fn append(&mut self, record: &[u8; RECORD_BYTES]) -> io::Result<()> {
        if self.written >= self.fail_after {
            return Err(io::Error::other("injected WAL write failure"));
        }
        self.written += 1;
        self.inner.append(record)
    }

    fn seal(&mut self, seal: &SegmentSeal) -> io::Result<()> {
        self.inner.seal(seal)
    }
}

struct OpenSegment {
    index: u32,
    records: u64,
    sha: Sha256,
    mac: Option<HmacSha256>,
}

/// Appends records to a sink, rotating and sealing segments.
pub struct WalWriter<S: WalSink> {
    sink: S,
    run_id: [u8; 16],
    key: Option<Vec<u8>>,
    segment_bytes: u64,
    open: Option<OpenSegment>,
    next_index: u32,
    pub manifest: IdManifest,
    total_records: u64,
}

impl<S: WalSink> WalWriter<S> {
    pub fn new(sink: S, run_id: [u8; 16], key: Option<Vec<u8>>) -> Self {
        Self {
            sink,
            run_id,
            key,
            segment_bytes: DEFAULT_SEGMENT_BYTES,
            open: None,
            next_index: 0,
            manifest: IdManifest::new(),
            total_records: 0,
        }
    }

    /// Overrides the rotation threshold (record bytes per segment).
    pub fn with_segment_bytes(mut self, bytes: u64) -> Self {
        self.segment_bytes = bytes.max(RECORD_BYTES as u64);
        self
    }

    pub fn key(&self) -> Option<&[u8]> {
        self.key.as_deref()
    }

    pub fn records_written(&self) -> u64 {
        self.total_records
    }

    fn begin(&mut self) -> Result<()> {
        let header = SegmentHeader {
            version: WAL_VERSION,
            flags: if self.key.is_some() { FLAG_KEYED } else { 0 },
            run_id: self.run_id,
            index: self.next_index,
        };
        self.sink.begin_segment(&header)?;
        self.open = Some(OpenSegment {
            index: self.next_index,
            records: 0,
            sha: Sha256::new(),
            mac: self.key.as_deref().map(hmac),
        });
        self.next_index += 1;
        Ok(())
    }

    fn seal_open(&mut self) -> Result<()> {
        if let Some(seg) = self.open.take() {
            let seal = SegmentSeal {
                index: seg.index,
                records: seg.records,
                sha256: hex::encode(seg.sha.finalize()),
                hmac: seg.mac.map(|m| hex::encode(m.finalize().into_bytes())),
            };
            self.sink.seal(&seal)?;
        }
        Ok(())
    }

    /// Logs one microbatch. Empty microbatches are never logged.
    pub fn emit(
        &mut self,
        ids: &[u64],
        seed64: u64,
        lr_f32: f32,
        opt_step: u32,
        accum_end: bool,
    ) -> Result<WalRecord> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("microbatch"));
        }
        let mb_len = u16::try_from(ids.len()).map_err(|_| Error::OutOfRange {
            what: "microbatch length",
            index: ids.len() as u64,
            limit: u16::MAX as u64,
        })?;
        let hash64 = content_hash64(ids, self.key.as_deref());
        let rec = WalRecord {
            hash64,
            seed64,
            lr_f32,
            opt_step_u32: opt_step,
            accum_end,
            mb_len,
        };
        if self.open.is_none() {
            self.begin()?;
        }
        let bytes = rec.encode();
        self.sink.append(&bytes)?;
        let seg = self.open.as_mut().expect("segment open");
        seg.sha.update(bytes);
        if let Some(m) = seg.mac.as_mut() {
            m.update(&bytes);
        }
        seg.records += 1;
        let full = seg.records * RECORD_BYTES as u64 >= self.segment_bytes;
        self.manifest.register(hash64, ids)?;
        self.total_records += 1;
        if full {
            self.seal_open()?;
        }
        Ok(rec)
    }

    /// Seals the open segment and returns the sink and manifest.
    pub fn finish(mut self) -> Result<(S, IdManifest)> {
        self.seal_open()?;
        Ok((self.sink, self.manifest))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    Header,
    Torn,
    Record(RecordFault),
    MissingSeal,
    SealCount,
    Digest,
    Hmac,
    KeyRequired,
    NonMonotone,
    Gap,
    BoundaryBreak,
    UnterminatedTail,
    SegmentOrder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityFailure {
    pub segment: u32,
    /// Global record index, if the failure is tied to a record.
    pub record: Option<u64>,
    /// Byte offset within the segment file.
    pub offset: u64,
    pub kind: FailureKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub segments: u32,
    pub records: u64,
    pub bytes_on_disk: u64,
    pub failures: Vec<IntegrityFailure>,
}

impl IntegrityReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn first_failure(&self) -> Option<&IntegrityFailure> {
        self.failures.first()
    }
}

/// A complete WAL (all segments of one run).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Wal {
    pub segments: Vec<WalSegment>,
}

impl From<MemorySink> for Wal {
    fn from(s: MemorySink) -> Self {
        Self { segments: s.segments }
    }
}

impl Wal {
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let seals: Vec<SegmentSeal> = if index_path.exists() {
            serde_json::from_slice(&fs::read(&index_path)?)?
        } else {
            Vec::new()
        };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wal"))
            .collect();
        files.sort();
        let mut segments = Vec::new();
        for f in files {
            let raw = fs::read(&f)?;
            let header = SegmentHeader::decode(&raw)?;
            let seal = seals.iter().find(|s| s.index == header.index).cloned();
            segments.push(WalSegment {
                header,
                bytes: raw[HEADER_BYTES..].to_vec(),
                seal,
            });
        }
        Ok(Self { segments })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut seals = Vec::new();
        for s in &self.segments {
            fs::write(dir.join(segment_file_name(s.header.index)), s.file_bytes())?;
            seals.extend(s.seal.clone());
        }
        fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&seals)?)?;
        Ok(())
    }

    pub fn record_bytes(&self) -> u64 {
        self.segments.iter().map(|s| s.bytes.len() as u64).sum()
    }

    pub fn bytes_on_disk(&self) -> u64 {
        self.segments
            .iter()
            .map(|s| (HEADER_BYTES + s.bytes.len()) as u64)
            .sum()
    }

    /// SHA-256 over the concatenated record bytes of all segments.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.segments {
            h.update(&s.bytes);
        }
        hex::encode(h.finalize())
    }

    pub fn keyed(&self) -> bool {
        self.segments.first().is_some_and(|s| s.header.keyed())
    }

    /// Checks headers, CRCs, seals and step structure.
    pub fn verify(&self, key: Option<&[u8]>) -> IntegrityReport {
        let mut rep = IntegrityReport {
            segments: self.segments.len() as u32,
            bytes_on_disk: self.bytes_on_disk(),
            ..IntegrityReport::default()
        };
        let mut fail = |segment: u32, record: Option<u64>, offset: u64, kind| {
            rep.failures.push(IntegrityFailure {
                segment,
                record,
                offset,
                kind,
            })
        };
        let run_id = self.segments.first().map(|s| s.header.run_id);
        let mut global = 0u64;
        let mut prev: Option<WalRecord> = None;
        for (pos, seg) in self.segments.iter().enumerate() {
            let si = seg.header.index;
            if si as usize != pos || Some(seg.header.run_id) != run_id {
                fail(si, None, 0, FailureKind::SegmentOrder);
            }
            if seg.bytes.len() % RECORD_BYTES != 0 {
                let whole = (seg.bytes.len() / RECORD_BYTES) as u64;
                fail(si, Some(global + whole), (HEADER_BYTES + seg.bytes.len()) as u64, FailureKind::Torn);
            }
            match &seg.seal {
                None => fail(si, None, 0, FailureKind::MissingSeal),
                Some(seal) => {
                    let n = (seg.bytes.len() / RECORD_BYTES) as u64;
                    if seal.records != n {
                        fail(si, None, 0, FailureKind::SealCount);
                    }
                    if seal.sha256 != hex::encode(Sha256::digest(&seg.bytes)) {
                        fail(si, None, 0, FailureKind::Digest);
                    }
                    if seg.header.keyed() {
                        match (key, &seal.hmac) {
                            (Some(k), Some(tag)) => {
                                if *tag != hex::encode(hmac_sha256(k, &seg.bytes)) {
                                    fail(si, None, 0, FailureKind::Hmac);
                                }
                            }
                            (None, _) => fail(si, None, 0, FailureKind::KeyRequired),
                            (Some(_), None) => fail(si, None, 0, FailureKind::Hmac),
                        }
                    }
                }
            }
            for (k, chunk) in seg.bytes.chunks_exact(RECORD_BYTES).enumerate() {
                let offset = (HEADER_BYTES + k * RECORD_BYTES) as u64;
                let raw: &[u8; RECORD_BYTES] = chunk.try_into().unwrap();
                match WalRecord::decode(raw) {
                    Err(f) => {
                        fail(si, Some(global), offset, FailureKind::Record(f));
                        prev = None;
                    }
                    Ok(r) => {
                        if let Some(p) = prev {
                            if r.opt_step_u32 < p.opt_step_u32 {
                                fail(si, Some(global), offset, FailureKind::NonMonotone);
                            } else if p.accum_end && r.opt_step_u32 != p.opt_step_u32 + 1 {
                                fail(si, Some(global), offset, FailureKind::Gap);
                            } else if !p.accum_end && r.opt_step_u32 != p.opt_step_u32 {
                                fail(si, Some(global), offset, FailureKind::BoundaryBreak);
                            }
                        }
                        prev = Some(r);
                    }
                }
                global += 1;
            }
        }
        rep.records = global;
        if let Some(p) = prev {
            if !p.accum_end {
                let seg = self.segments.last().map_or(0, |s| s.header.index);
                fail(seg, Some(global - 1), 0, FailureKind::UnterminatedTail);
            }
        }
        rep
    }

    /// All records in emission order; refuses on any integrity failure.
    pub fn records(&self, key: Option<&[u8]>) -> Result<Vec<WalRecord>> {
        let rep = self.verify(key);
        if let Some(f) = rep.first_failure() {
            return Err(Error::Integrity(format!(
                "WAL failed verification: {:?} in segment {} at offset {}",
                f.kind, f.segment, f.offset
            )));
        }
        Ok(self
            .segments
            .iter()
            .flat_map(|s| s.bytes.chunks_exact(RECORD_BYTES))
            .map(|c| WalRecord::decode(c.try_into().unwrap()).expect("verified"))
            .collect())
    }

    /// Records grouped by logical step, starting at the first record whose
    /// `opt_step_u32 >= from_opt_step`.
    pub fn read_tail(&self, from_opt_step: u32, key: Option<&[u8]>) -> Result<Vec<Vec<WalRecord>>> {
        let mut groups = Vec::new();
        let mut cur = Vec::new();
        for r in self.records(key)? {
            if r.opt_step_u32 < from_opt_step {
                continue;
            }
            let end = r.accum_end;
            cur.push(r);
            if end {
                groups.push(std::mem::take(&mut cur));
            }
        }
        Ok(groups)
    }

    /// Checks that every record re-derives from the manifest.
    pub fn verify_manifest(&self, manifest: &IdManifest, key: Option<&[u8]>) -> Result<()> {
        for r in self.records(key)? {
            manifest.resolve(&r, key)?;
        }
        Ok(())
    }

    /// Keeps only the first `n` record bytes, simulating a torn write.
    pub fn truncate_bytes(&mut self, keep: u64) {
        let mut left = keep;
        for s in &mut self.segments {
            let n = (s.bytes.len() as u64).min(left);
            s.bytes.truncate(n as usize);
            left -= n;
        }
    }
}
