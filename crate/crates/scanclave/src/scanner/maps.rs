//! Map-listing parsing. Two dialects share one parser:
//!
//! - the OS dialect from `/proc/<pid>/maps`:
//!   `start-end perms offset dev inode [pathname]`
//! - the snapshot dialect stored in `maps.txt`:
//!   `start-end perms label`
//!
//! Both start with `start-end perms`; everything after distinguishes them by
//! field count.

use super::{MemoryRegion, Perms};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MapsLineError {
    #[error("missing address range")]
    MissingRange,
    #[error("bad address range: {0}")]
    BadRange(String),
    #[error("missing or malformed permission flags")]
    BadPerms,
}

/// Parse one map-listing line in either dialect. Anonymous regions get an
/// empty label.
pub fn parse_maps_line(line: &str) -> Result<MemoryRegion, MapsLineError> {
    let mut fields = line.split_whitespace();
    let range = fields.next().ok_or(MapsLineError::MissingRange)?;
    let (start_s, end_s) = range
        .split_once('-')
        .ok_or_else(|| MapsLineError::BadRange(range.to_string()))?;
    let start = u64::from_str_radix(start_s, 16)
        .map_err(|_| MapsLineError::BadRange(range.to_string()))?;
    let end =
        u64::from_str_radix(end_s, 16).map_err(|_| MapsLineError::BadRange(range.to_string()))?;
    if end < start {
        return Err(MapsLineError::BadRange(range.to_string()));
    }

    let perms_s = fields.next().ok_or(MapsLineError::BadPerms)?;
    // /proc perms can be longer than four chars on some kernels; the first
    // four carry r/w/x/p.
    let perms = Perms::parse(perms_s.get(..4).unwrap_or("")).ok_or(MapsLineError::BadPerms)?;

    let rest: Vec<&str> = fields.collect();
    let label = match rest.len() {
        0 => String::new(),
        // snapshot dialect: the remainder is the label (may contain spaces)
        1 => rest[0].to_string(),
        // OS dialect: offset dev inode [pathname...]
        _ if rest.len() >= 3 => rest[3..].join(" "),
        _ => rest.join(" "),
    };

    Ok(MemoryRegion {
        start,
        length: end - start,
        perms,
        label,
    })
}

/// Format a region in the snapshot dialect.
pub fn format_maps_line(region: &MemoryRegion) -> String {
    format!(
        "{:x}-{:x} {} {}",
        region.start,
        region.start + region.length,
        region.perms,
        region.label
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_proc_dialect() {
        let line = "00400000-00401000 r-xp 00000000 fe:00 5005337    /tmp/ta_image.bin";
        let r = parse_maps_line(line).unwrap();
        assert_eq!(r.start, 0x400000);
        assert_eq!(r.length, 0x1000);
        assert!(r.perms.is_executable());
        assert_eq!(r.label, "/tmp/ta_image.bin");
    }

    #[test]
    fn parses_proc_dialect_anonymous() {
        let line = "7f2087941000-7f2087943000 rw-p 00000000 00:00 0";
        let r = parse_maps_line(line).unwrap();
        assert_eq!(r.label, "");
        assert!(!r.perms.is_executable());
    }

    #[test]
    fn parses_proc_dialect_label_with_spaces() {
        let line = "00400000-00401000 r-xp 00000000 fe:00 1 /tmp/with space/ta.bin";
        let r = parse_maps_line(line).unwrap();
        assert_eq!(r.label, "/tmp/with space/ta.bin");
    }

    #[test]
    fn parses_snapshot_dialect() {
        let r = parse_maps_line("400000-401000 r-xp /tmp/ta_image.bin").unwrap();
        assert_eq!(r.start, 0x400000);
        assert_eq!(r.length, 0x1000);
        assert_eq!(r.label, "/tmp/ta_image.bin");
    }

    #[test]
    fn snapshot_roundtrip() {
        let region = MemoryRegion {
            start: 0x400000,
            length: 0x1000,
            perms: Perms(*b"r-xp"),
            label: "/tmp/ta_image.bin".to_string(),
        };
        let line = format_maps_line(&region);
        assert_eq!(parse_maps_line(&line).unwrap(), region);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            parse_maps_line(""),
            Err(MapsLineError::MissingRange)
        ));
        assert!(matches!(
            parse_maps_line("nonsense r-xp x"),
            Err(MapsLineError::BadRange(_))
        ));
        assert!(matches!(
            parse_maps_line("400000-401000"),
            Err(MapsLineError::BadPerms)
        ));
        assert!(matches!(
            parse_maps_line("401000-400000 r-xp x"),
            Err(MapsLineError::BadRange(_))
        ));
    }
}
