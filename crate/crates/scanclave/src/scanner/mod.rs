//! Executable-memory measurement: region enumeration, per-region SHA-256
//! digests, launch-time baselines, and baseline diffs.
//!
//! All verdict logic lives here; failures that must reach the verifier signed
//! (target gone, bridge refused) are encoded in [`TaStatus`] rather than
//! returned as errors from [`scan`].

mod maps;
mod source;

pub use maps::{format_maps_line, parse_maps_line, MapsLineError};
pub use source::{
    attach_debug_bridge, attach_debug_bridge_at, dump_snapshot, BridgeError, InProcessSource,
    MemorySource, ProcSource, ReadError, SnapshotSource, SourceError, TamperError,
};

use sha2::{Digest as _, Sha256};

use crate::time::Clock;

/// SHA-256 output.
pub type Digest32 = [u8; 32];

/// Permission flags of a mapped region, `rwxp`-style as in OS map listings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Perms(pub [u8; 4]);

impl Perms {
    pub fn parse(s: &str) -> Option<Perms> {
        let b = s.as_bytes();
        if b.len() != 4 {
            return None;
        }
        Some(Perms([b[0], b[1], b[2], b[3]]))
    }

    pub fn is_executable(&self) -> bool {
        self.0[2] == b'x'
    }

    pub fn is_writable(&self) -> bool {
        self.0[1] == b'w'
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).unwrap_or("????")
    }
}

impl std::fmt::Display for Perms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One mapped region of the target's address space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MemoryRegion {
    pub start: u64,
    pub length: u64,
    pub perms: Perms,
    /// Pathname or synthetic name from the map listing.
    pub label: String,
}

impl MemoryRegion {
    /// `length > 0` and `start + length` must not overflow.
    pub fn is_valid(&self) -> bool {
        self.length > 0 && self.start.checked_add(self.length).is_some()
    }
}

/// Per-region comparison outcome against the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RegionVerdict {
    /// Baseline entry with identical (label, length) exists and digests match.
    Match = 0,
    Mismatch = 1,
    /// Baseline entry with no current region.
    Missing = 2,
    /// Current executable region absent from the baseline.
    New = 3,
    /// Region vanished or shrank between enumeration and read.
    Unreadable = 4,
}

impl RegionVerdict {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<RegionVerdict> {
        match code {
            0 => Some(RegionVerdict::Match),
            1 => Some(RegionVerdict::Mismatch),
            2 => Some(RegionVerdict::Missing),
            3 => Some(RegionVerdict::New),
            4 => Some(RegionVerdict::Unreadable),
            _ => None,
        }
    }
}

/// A measured region plus its verdict. For `Missing` and `Unreadable` the
/// digest is all zeroes: no content was observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMeasurement {
    pub region: MemoryRegion,
    pub digest: Digest32,
    pub verdict: RegionVerdict,
}

/// Target-level status of a scan. `NoScan` never comes out of the scanner;
/// it is the wire status a report carries when no scan has completed yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TaStatus {
    Ok = 0,
    TaNotFound = 1,
    BridgeFailed = 2,
    NoScan = 3,
}

impl TaStatus {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<TaStatus> {
        match code {
            0 => Some(TaStatus::Ok),
            1 => Some(TaStatus::TaNotFound),
            2 => Some(TaStatus::BridgeFailed),
            3 => Some(TaStatus::NoScan),
            _ => None,
        }
    }
}

/// Expected state of one baselined region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineEntry {
    pub label: String,
    pub length: u64,
    pub digest: Digest32,
}

/// Launch-time reference state of the target's executable memory.
///
/// Entries keep capture order (address order at capture), which is also the
/// canonical encoding order. Region identity across scans is keyed by
/// (label, length) so layout randomization does not fake MISSING/NEW.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Baseline {
    pub ta_label: String,
    pub created_at_ms: u64,
    pub entries: Vec<BaselineEntry>,
}

impl Baseline {
    /// Digest over the canonical entries encoding only, stable across
    /// launches of identical content. This is the value a verifier pins.
    pub fn content_digest(&self) -> Digest32 {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update((e.label.len() as u32).to_be_bytes());
            hasher.update(e.label.as_bytes());
            hasher.update(e.length.to_be_bytes());
            hasher.update(e.digest);
        }
        hasher.finalize().into()
    }
}

/// Outcome of one scan pass. `ta_status != Ok` implies `measurements` empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanResult {
    pub ta_status: TaStatus,
    pub scan_time_ms: u64,
    pub measurements: Vec<RegionMeasurement>,
}

impl ScanResult {
    pub fn all_match(&self) -> bool {
        self.ta_status == TaStatus::Ok
            && self
                .measurements
                .iter()
                .all(|m| m.verdict == RegionVerdict::Match)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("no executable regions to baseline")]
    EmptyBaseline,
    #[error(transparent)]
    Source(#[from] SourceError),
}

/// List the target's executable regions in address order.
pub fn enumerate_regions(source: &MemorySource) -> Result<Vec<MemoryRegion>, SourceError> {
    let mut regions = source.enumerate()?;
    regions.retain(|r| r.perms.is_executable() && r.is_valid());
    regions.sort_by_key(|r| r.start);
    Ok(regions)
}

/// Read exactly `region.length` bytes from the source.
pub fn read_region(source: &MemorySource, region: &MemoryRegion) -> Result<Vec<u8>, ReadError> {
    source.read(region)
}

/// SHA-256 of region contents.
pub fn measure_region(content: &[u8]) -> Digest32 {
    Sha256::digest(content).into()
}

/// Measure every executable region of a freshly launched target.
pub fn capture_baseline(source: &MemorySource, clock: &dyn Clock) -> Result<Baseline, BaselineError> {
    let regions = enumerate_regions(source)?;
    if regions.is_empty() {
        return Err(BaselineError::EmptyBaseline);
    }
    let mut entries = Vec::with_capacity(regions.len());
    for region in &regions {
        let content = source.read(region).map_err(|e| match e {
            ReadError::SourceGone => BaselineError::Source(SourceError::SourceGone),
            ReadError::PermissionDenied => BaselineError::Source(SourceError::PermissionDenied),
            // A region torn down while the target is still launching: treat
            // the source as gone, a baseline must cover a stable launch state.
            ReadError::PartialRead => BaselineError::Source(SourceError::SourceGone),
        })?;
        entries.push(BaselineEntry {
            label: region.label.clone(),
            length: region.length,
            digest: measure_region(&content),
        });
    }
    Ok(Baseline {
        ta_label: source.ta_label().to_string(),
        created_at_ms: clock.now_unix_ms(),
        entries,
    })
}

/// Diff the current executable memory against the baseline.
///
/// Never fails: a target that cannot be located yields `TaNotFound`, a
/// refused debug bridge yields `BridgeFailed`, so the condition reaches the
/// verifier inside a signed report.
pub fn scan(source: &MemorySource, baseline: &Baseline, clock: &dyn Clock) -> ScanResult {
    let scan_time_ms = clock.now_unix_ms();
    let not_ok = |status| ScanResult {
        ta_status: status,
        scan_time_ms,
        measurements: Vec::new(),
    };

    let regions = match enumerate_regions(source) {
        Ok(r) => r,
        Err(SourceError::SourceGone) => return not_ok(TaStatus::TaNotFound),
        Err(SourceError::PermissionDenied) => return not_ok(TaStatus::BridgeFailed),
    };
    if regions.is_empty() {
        return not_ok(TaStatus::TaNotFound);
    }

    let mut used = vec![false; regions.len()];
    let mut measurements = Vec::with_capacity(baseline.entries.len());

    for entry in &baseline.entries {
        let slot = regions
            .iter()
            .position(|r| r.label == entry.label && r.length == entry.length)
            .filter(|&i| !used[i]);
        match slot {
            Some(i) => {
                used[i] = true;
                let region = &regions[i];
                match source.read(region) {
                    Ok(content) => {
                        let digest = measure_region(&content);
                        let verdict = if digest == entry.digest {
                            RegionVerdict::Match
                        } else {
                            RegionVerdict::Mismatch
                        };
                        measurements.push(RegionMeasurement {
                            region: region.clone(),
                            digest,
                            verdict,
                        });
                    }
                    Err(_) => measurements.push(RegionMeasurement {
                        region: region.clone(),
                        digest: [0u8; 32],
                        verdict: RegionVerdict::Unreadable,
                    }),
                }
            }
            None => measurements.push(RegionMeasurement {
                region: MemoryRegion {
                    start: 0,
                    length: entry.length,
                    perms: Perms(*b"----"),
                    label: entry.label.clone(),
                },
                digest: [0u8; 32],
                verdict: RegionVerdict::Missing,
            }),
        }
    }

    for (i, region) in regions.iter().enumerate() {
        if used[i] {
            continue;
        }
        match source.read(region) {
            Ok(content) => measurements.push(RegionMeasurement {
                region: region.clone(),
                digest: measure_region(&content),
                verdict: RegionVerdict::New,
            }),
            Err(_) => measurements.push(RegionMeasurement {
                region: region.clone(),
                digest: [0u8; 32],
                verdict: RegionVerdict::Unreadable,
            }),
        }
    }

    ScanResult {
        ta_status: TaStatus::Ok,
        scan_time_ms,
        measurements,
    }
}

#[cfg(test)]
mod tests;
