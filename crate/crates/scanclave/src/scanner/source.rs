//! Memory-source backends.
//!
//! - [`InProcessSource`]: a region table plus byte stores living in the
//!   agent's own address space (the loaded-plugin case).
//! - [`ProcSource`]: a live external process read through the OS debug
//!   facility (`/proc/<pid>/maps` and `/proc/<pid>/mem` on Linux).
//! - [`SnapshotSource`]: a directory with a `maps.txt` and one raw `.bin`
//!   per region, for platforms and tests without a debug bridge.
//!
//! In-process and snapshot backends behave identically for identical
//! content, which the tests assert as backend equivalence.

use std::fs;
use std::io::{Read, Seek, SeekFrom, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::maps::{format_maps_line, parse_maps_line};
use super::{MemoryRegion, Perms};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SourceError {
    #[error("source process or directory is gone")]
    SourceGone,
    #[error("debug attach refused")]
    PermissionDenied,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReadError {
    #[error("region shrank or vanished mid-scan")]
    PartialRead,
    #[error("source process or directory is gone")]
    SourceGone,
    #[error("debug read refused")]
    PermissionDenied,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BridgeError {
    #[error("no such process")]
    NoSuchProcess,
    #[error("debug attach refused")]
    PermissionDenied,
}

#[derive(Debug, thiserror::Error)]
pub enum TamperError {
    #[error("region not found: {0}")]
    RegionNotFound(String),
    #[error("offset out of range")]
    OffsetOutOfRange,
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// One region of an in-process source. The store is shared so a harness can
/// tamper with it while the scanner reads it, exactly like memory.
#[derive(Debug, Clone)]
struct InProcessRegion {
    region: MemoryRegion,
    store: Arc<Mutex<Vec<u8>>>,
}

/// Region table plus readable byte stores in the agent's own address space.
///
/// Clones share the underlying table, so a handle kept by the adversary
/// harness tampers with the same bytes the scanner measures.
#[derive(Debug, Clone)]
pub struct InProcessSource {
    ta_label: String,
    regions: Arc<Mutex<Vec<InProcessRegion>>>,
    accesses: Arc<AtomicU64>,
}

impl InProcessSource {
    pub fn new(ta_label: impl Into<String>) -> Self {
        InProcessSource {
            ta_label: ta_label.into(),
            regions: Arc::new(Mutex::new(Vec::new())),
            accesses: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Map a file image as a single executable region at `base`.
    pub fn from_image(
        ta_label: impl Into<String>,
        image: &Path,
        base: u64,
    ) -> std::io::Result<Self> {
        let bytes = fs::read(image)?;
        let label: String = ta_label.into();
        let source = InProcessSource::new(label.clone());
        source.add_region(base, Perms(*b"r-xp"), label, bytes);
        Ok(source)
    }

    /// Add a region; returns the shared store handle.
    pub fn add_region(
        &self,
        start: u64,
        perms: Perms,
        label: impl Into<String>,
        bytes: Vec<u8>,
    ) -> Arc<Mutex<Vec<u8>>> {
        let store = Arc::new(Mutex::new(bytes));
        let length = store.lock().unwrap().len() as u64;
        self.regions.lock().unwrap().push(InProcessRegion {
            region: MemoryRegion {
                start,
                length,
                perms,
                label: label.into(),
            },
            store: store.clone(),
        });
        store
    }

    /// Unmap a region, as a library unload or an attacker would.
    pub fn remove_region(&self, label: &str) -> bool {
        let mut regions = self.regions.lock().unwrap();
        let before = regions.len();
        regions.retain(|r| r.region.label != label);
        regions.len() != before
    }

    /// Shrink a region's store without touching its table entry, simulating
    /// the unmap race between enumerate and read.
    pub fn truncate_store(&self, label: &str, new_len: usize) -> bool {
        let regions = self.regions.lock().unwrap();
        match regions.iter().find(|r| r.region.label == label) {
            Some(r) => {
                r.store.lock().unwrap().truncate(new_len);
                true
            }
            None => false,
        }
    }

    /// Number of enumerate/read accesses made so far. Used by tests to prove
    /// challenge handling never touches the scanner.
    pub fn access_count(&self) -> u64 {
        self.accesses.load(Ordering::SeqCst)
    }

    fn enumerate(&self) -> Vec<MemoryRegion> {
        self.accesses.fetch_add(1, Ordering::SeqCst);
        self.regions
            .lock()
            .unwrap()
            .iter()
            .map(|r| r.region.clone())
            .collect()
    }

    fn read(&self, region: &MemoryRegion) -> Result<Vec<u8>, ReadError> {
        self.accesses.fetch_add(1, Ordering::SeqCst);
        let regions = self.regions.lock().unwrap();
        let entry = regions
            .iter()
            .find(|r| r.region.start == region.start && r.region.label == region.label)
            .ok_or(ReadError::PartialRead)?;
        let store = entry.store.lock().unwrap();
        if (store.len() as u64) < region.length {
            return Err(ReadError::PartialRead);
        }
        Ok(store[..region.length as usize].to_vec())
    }

    fn write_byte(&self, region: &MemoryRegion, offset: u64, xor_mask: u8) -> Result<(), TamperError> {
        let regions = self.regions.lock().unwrap();
        let entry = regions
            .iter()
            .find(|r| r.region.start == region.start && r.region.label == region.label)
            .ok_or_else(|| TamperError::RegionNotFound(region.label.clone()))?;
        let mut store = entry.store.lock().unwrap();
        let byte = store
            .get_mut(offset as usize)
            .ok_or(TamperError::OffsetOutOfRange)?;
        *byte ^= xor_mask;
        Ok(())
    }
}

/// A live external process accessed through the OS debug facility.
///
/// `proc_root` defaults to `/proc`; fixtures point it at a fake tree to
/// exercise attach/read failures deterministically.
#[derive(Debug, Clone)]
pub struct ProcSource {
    pid: u32,
    ta_label: String,
    proc_root: PathBuf,
}

impl ProcSource {
    /// Source for a live pid without an attach probe; bridge refusal then
    /// surfaces per scan instead of at attach time.
    pub fn new(pid: u32, ta_label: impl Into<String>) -> ProcSource {
        ProcSource {
            pid,
            ta_label: ta_label.into(),
            proc_root: PathBuf::from("/proc"),
        }
    }

    /// Same, against an explicit proc filesystem root (fixtures).
    pub fn with_proc_root(pid: u32, ta_label: impl Into<String>, proc_root: PathBuf) -> ProcSource {
        ProcSource {
            pid,
            ta_label: ta_label.into(),
            proc_root,
        }
    }

    pub fn pid(&self) -> u32 {
        self.pid
    }

    fn maps_path(&self) -> PathBuf {
        self.proc_root.join(self.pid.to_string()).join("maps")
    }

    fn mem_path(&self) -> PathBuf {
        self.proc_root.join(self.pid.to_string()).join("mem")
    }

    fn enumerate(&self) -> Result<Vec<MemoryRegion>, SourceError> {
        let text = fs::read_to_string(self.maps_path()).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => SourceError::SourceGone,
            std::io::ErrorKind::PermissionDenied => SourceError::PermissionDenied,
            _ => SourceError::SourceGone,
        })?;
        let mut regions = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(region) = parse_maps_line(line) {
                if region.label == self.ta_label {
                    regions.push(region);
                }
            }
        }
        Ok(regions)
    }

    fn read(&self, region: &MemoryRegion) -> Result<Vec<u8>, ReadError> {
        let mut mem = fs::File::open(self.mem_path()).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ReadError::SourceGone,
            // Any other open failure means the debug facility refused us.
            _ => ReadError::PermissionDenied,
        })?;
        mem.seek(SeekFrom::Start(region.start))
            .map_err(|_| ReadError::PartialRead)?;
        let mut buf = vec![0u8; region.length as usize];
        mem.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::PermissionDenied => ReadError::PermissionDenied,
            _ => ReadError::PartialRead,
        })?;
        Ok(buf)
    }

    fn write_byte(&self, region: &MemoryRegion, offset: u64, xor_mask: u8) -> Result<(), TamperError> {
        if offset >= region.length {
            return Err(TamperError::OffsetOutOfRange);
        }
        let mut mem = fs::OpenOptions::new()
            .read(true)
            .write(true)
            .open(self.mem_path())?;
        let pos = region.start + offset;
        mem.seek(SeekFrom::Start(pos))?;
        let mut byte = [0u8; 1];
        mem.read_exact(&mut byte)?;
        byte[0] ^= xor_mask;
        mem.seek(SeekFrom::Start(pos))?;
        mem.write_all(&byte)?;
        Ok(())
    }
}

/// A dumped memory view: `maps.txt` plus one raw `<start-hex>.bin` per
/// region.
#[derive(Debug, Clone)]
pub struct SnapshotSource {
    dir: PathBuf,
    ta_label: String,
}

impl SnapshotSource {
    pub fn open(dir: impl Into<PathBuf>, ta_label: impl Into<String>) -> Self {
        SnapshotSource {
            dir: dir.into(),
            ta_label: ta_label.into(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn region_file(dir: &Path, region: &MemoryRegion) -> PathBuf {
        dir.join(format!("{:x}.bin", region.start))
    }

    fn enumerate(&self) -> Result<Vec<MemoryRegion>, SourceError> {
        let text =
            fs::read_to_string(self.dir.join("maps.txt")).map_err(|e| match e.kind() {
                std::io::ErrorKind::PermissionDenied => SourceError::PermissionDenied,
                _ => SourceError::SourceGone,
            })?;
        let mut regions = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(region) = parse_maps_line(line) {
                regions.push(region);
            }
        }
        Ok(regions)
    }

    fn read(&self, region: &MemoryRegion) -> Result<Vec<u8>, ReadError> {
        if !self.dir.exists() {
            return Err(ReadError::SourceGone);
        }
        let bytes = fs::read(Self::region_file(&self.dir, region)).map_err(|e| match e.kind() {
            std::io::ErrorKind::PermissionDenied => ReadError::PermissionDenied,
            _ => ReadError::PartialRead,
        })?;
        if (bytes.len() as u64) < region.length {
            return Err(ReadError::PartialRead);
        }
        Ok(bytes[..region.length as usize].to_vec())
    }

    fn write_byte(&self, region: &MemoryRegion, offset: u64, xor_mask: u8) -> Result<(), TamperError> {
        if offset >= region.length {
            return Err(TamperError::OffsetOutOfRange);
        }
        let path = Self::region_file(&self.dir, region);
        let mut bytes = fs::read(&path)?;
        let byte = bytes
            .get_mut(offset as usize)
            .ok_or(TamperError::OffsetOutOfRange)?;
        *byte ^= xor_mask;
        fs::write(&path, bytes)?;
        Ok(())
    }
}

/// Where the target's memory is read from.
#[derive(Debug, Clone)]
pub enum MemorySource {
    InProcess(InProcessSource),
    External(ProcSource),
    Snapshot(SnapshotSource),
}

impl MemorySource {
    pub fn ta_label(&self) -> &str {
        match self {
            MemorySource::InProcess(s) => &s.ta_label,
            MemorySource::External(s) => &s.ta_label,
            MemorySource::Snapshot(s) => &s.ta_label,
        }
    }

    pub(super) fn enumerate(&self) -> Result<Vec<MemoryRegion>, SourceError> {
        match self {
            MemorySource::InProcess(s) => Ok(s.enumerate()),
            MemorySource::External(s) => s.enumerate(),
            MemorySource::Snapshot(s) => s.enumerate(),
        }
    }

    pub(super) fn read(&self, region: &MemoryRegion) -> Result<Vec<u8>, ReadError> {
        match self {
            MemorySource::InProcess(s) => s.read(region),
            MemorySource::External(s) => s.read(region),
            MemorySource::Snapshot(s) => s.read(region),
        }
    }

    /// XOR one byte inside a region. The write goes through the same surface
    /// an attacker has: direct store access in-process, the debug facility
    /// for external processes, the file for snapshots.
    pub fn write_region_byte(
        &self,
        region: &MemoryRegion,
        offset: u64,
        xor_mask: u8,
    ) -> Result<(), TamperError> {
        if offset >= region.length {
            return Err(TamperError::OffsetOutOfRange);
        }
        match self {
            MemorySource::InProcess(s) => s.write_byte(region, offset, xor_mask),
            MemorySource::External(s) => s.write_byte(region, offset, xor_mask),
            MemorySource::Snapshot(s) => s.write_byte(region, offset, xor_mask),
        }
    }
}

/// Attach to an external process through the OS debug facility.
///
/// Dropping the returned source detaches; the process keeps running either
/// way since reads go through `/proc` rather than a stop-the-world trace.
pub fn attach_debug_bridge(pid: u32, ta_label: impl Into<String>) -> Result<MemorySource, BridgeError> {
    attach_debug_bridge_at(Path::new("/proc"), pid, ta_label)
}

/// [`attach_debug_bridge`] with an explicit proc filesystem root, for
/// fixtures that simulate attach refusal or absent processes.
pub fn attach_debug_bridge_at(
    proc_root: &Path,
    pid: u32,
    ta_label: impl Into<String>,
) -> Result<MemorySource, BridgeError> {
    if pid == 0 {
        return Err(BridgeError::NoSuchProcess);
    }
    let pid_dir = proc_root.join(pid.to_string());
    if !pid_dir.exists() {
        return Err(BridgeError::NoSuchProcess);
    }
    let source = ProcSource {
        pid,
        ta_label: ta_label.into(),
        proc_root: proc_root.to_path_buf(),
    };
    // Probe the debug read facility once so refusal surfaces at attach time.
    let mem = source.mem_path();
    match fs::metadata(&mem) {
        Ok(m) if !m.is_file() => return Err(BridgeError::PermissionDenied),
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(BridgeError::NoSuchProcess)
        }
        Err(_) => return Err(BridgeError::PermissionDenied),
    }
    match fs::File::open(&mem) {
        Ok(_) => Ok(MemorySource::External(source)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(BridgeError::NoSuchProcess),
        Err(_) => Err(BridgeError::PermissionDenied),
    }
}

/// Dump the source's executable regions into a snapshot directory.
pub fn dump_snapshot(source: &MemorySource, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let regions = super::enumerate_regions(source)
        .map_err(|e| std::io::Error::other(format!("enumerate failed: {e}")))?;
    let mut maps = String::new();
    for region in &regions {
        let bytes = source
            .read(region)
            .map_err(|e| std::io::Error::other(format!("read failed: {e}")))?;
        fs::write(SnapshotSource::region_file(dir, region), bytes)?;
        maps.push_str(&format_maps_line(region));
        maps.push('\n');
    }
    fs::write(dir.join("maps.txt"), maps)
}
