use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use super::*;
use crate::time::ManualClock;

pub(crate) fn fixture_image_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/ta_image.bin")
}

fn synthetic_source() -> (MemorySource, InProcessSource) {
    let inner = InProcessSource::new("ta");
    inner.add_region(0x1000, Perms(*b"r-xp"), "code_a", vec![0xAA; 256]);
    inner.add_region(0x9000, Perms(*b"rw-p"), "data", vec![0x11; 64]);
    inner.add_region(0x5000, Perms(*b"r-xp"), "code_b", (0..=255u8).collect());
    (MemorySource::InProcess(inner.clone()), inner)
}

struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_fixture_ta() -> (ChildGuard, String) {
    let path = std::fs::canonicalize(fixture_image_path()).unwrap();
    let label = path.display().to_string();
    let child = Command::new(&path).spawn().expect("spawn fixture target");
    // spawn returns between fork and exec; wait until the image is mapped
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
    loop {
        let maps = std::fs::read_to_string(format!("/proc/{}/maps", child.id()));
        if maps.map(|m| m.contains(&label)).unwrap_or(false) {
            break;
        }
        assert!(std::time::Instant::now() < deadline, "fixture target never mapped");
        std::thread::sleep(std::time::Duration::from_millis(2));
    }
    (ChildGuard(child), label)
}

#[test]
fn enumerate_filters_and_orders() {
    let (source, _) = synthetic_source();
    let regions = enumerate_regions(&source).unwrap();
    assert_eq!(regions.len(), 2);
    assert_eq!(regions[0].label, "code_a");
    assert_eq!(regions[1].label, "code_b");
    assert!(regions.windows(2).all(|w| w[0].start <= w[1].start));
}

#[test]
fn enumerate_no_executable_regions() {
    let inner = InProcessSource::new("ta");
    inner.add_region(0x1000, Perms(*b"rw-p"), "data", vec![1, 2, 3]);
    let regions = enumerate_regions(&MemorySource::InProcess(inner)).unwrap();
    assert!(regions.is_empty());
}

#[test]
fn read_region_exact_bytes() {
    let (source, _) = synthetic_source();
    let regions = enumerate_regions(&source).unwrap();
    let bytes = read_region(&source, &regions[1]).unwrap();
    assert_eq!(bytes.len(), 256);
    assert_eq!(bytes, (0..=255u8).collect::<Vec<_>>());
}

#[test]
fn read_region_unmapped_race_is_partial_read() {
    let (source, inner) = synthetic_source();
    let regions = enumerate_regions(&source).unwrap();
    inner.truncate_store("code_a", 100);
    assert_eq!(
        read_region(&source, &regions[0]),
        Err(ReadError::PartialRead)
    );
    inner.remove_region("code_b");
    assert_eq!(
        read_region(&source, &regions[1]),
        Err(ReadError::PartialRead)
    );
}

#[test]
fn measure_region_sha256_vectors() {
    // FIPS 180 reference values.
    assert_eq!(
        hex::encode(measure_region(b"")),
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
    assert_eq!(
        hex::encode(measure_region(b"abc")),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}

#[test]
fn measure_region_flip_sensitivity() {
    let mut rng = crate::rng::seeded_rng(11);
    use rand::RngExt;
    let mut buf = vec![0u8; 1 << 20];
    rand_chacha::rand_core::Rng::fill_bytes(&mut rng, &mut buf);
    let original = measure_region(&buf);
    for _ in 0..100 {
        let i = rng.random_range(0..buf.len());
        let mask: u8 = rng.random_range(1..=255u8);
        buf[i] ^= mask;
        assert_ne!(measure_region(&buf), original);
        buf[i] ^= mask;
    }
}

#[test]
fn baseline_covers_executable_regions_and_is_deterministic() {
    let (source, _) = synthetic_source();
    let clock = ManualClock::new(1_000);
    let a = capture_baseline(&source, &*clock).unwrap();
    let b = capture_baseline(&source, &*clock).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.entries.len(), 2);
    assert_eq!(a.ta_label, "ta");
    assert_eq!(a.content_digest(), b.content_digest());
}

#[test]
fn baseline_refuses_empty() {
    let inner = InProcessSource::new("ta");
    inner.add_region(0x1000, Perms(*b"rw-p"), "data", vec![1]);
    let clock = ManualClock::new(0);
    assert!(matches!(
        capture_baseline(&MemorySource::InProcess(inner), &*clock),
        Err(BaselineError::EmptyBaseline)
    ));
}

#[test]
fn scan_untouched_all_match() {
    let (source, _) = synthetic_source();
    let clock = ManualClock::new(5);
    let baseline = capture_baseline(&source, &*clock).unwrap();
    let result = scan(&source, &baseline, &*clock);
    assert_eq!(result.ta_status, TaStatus::Ok);
    assert_eq!(result.measurements.len(), 2);
    assert!(result.all_match());
}

#[test]
fn scan_detects_single_byte_xor_in_exactly_one_region() {
    let (source, _) = synthetic_source();
    let clock = ManualClock::new(5);
    let baseline = capture_baseline(&source, &*clock).unwrap();
    let regions = enumerate_regions(&source).unwrap();
    source.write_region_byte(&regions[1], 17, 0xFF).unwrap();

    let result = scan(&source, &baseline, &*clock);
    let verdicts: Vec<_> = result
        .measurements
        .iter()
        .map(|m| (m.region.label.as_str(), m.verdict))
        .collect();
    assert_eq!(
        verdicts,
        vec![
            ("code_a", RegionVerdict::Match),
            ("code_b", RegionVerdict::Mismatch)
        ]
    );

    // xor 0x00 is the identity mask: still a write, but no change to report.
    source.write_region_byte(&regions[1], 17, 0xFF).unwrap();
    source.write_region_byte(&regions[0], 3, 0x00).unwrap();
    assert!(scan(&source, &baseline, &*clock).all_match());
}

#[test]
fn scan_reports_missing_and_new() {
    let (source, inner) = synthetic_source();
    let clock = ManualClock::new(5);
    let baseline = capture_baseline(&source, &*clock).unwrap();
    inner.remove_region("code_a");
    inner.add_region(0xF000, Perms(*b"r-xp"), "injected", vec![0xCC; 32]);

    let result = scan(&source, &baseline, &*clock);
    let by_label = |l: &str| {
        result
            .measurements
            .iter()
            .find(|m| m.region.label == l)
            .unwrap()
            .verdict
    };
    assert_eq!(by_label("code_a"), RegionVerdict::Missing);
    assert_eq!(by_label("code_b"), RegionVerdict::Match);
    assert_eq!(by_label("injected"), RegionVerdict::New);
}

#[test]
fn scan_completeness_every_entry_and_region_accounted() {
    let (source, inner) = synthetic_source();
    let clock = ManualClock::new(5);
    let baseline = capture_baseline(&source, &*clock).unwrap();
    inner.remove_region("code_b");
    inner.add_region(0xF000, Perms(*b"r-xp"), "injected", vec![0xCC; 32]);

    let result = scan(&source, &baseline, &*clock);
    for entry in &baseline.entries {
        assert!(
            result
                .measurements
                .iter()
                .any(|m| m.region.label == entry.label),
            "baseline entry {} unaccounted",
            entry.label
        );
    }
    for region in enumerate_regions(&source).unwrap() {
        let m = result
            .measurements
            .iter()
            .find(|m| m.region.label == region.label)
            .expect("current region unaccounted");
        assert!(matches!(
            m.verdict,
            RegionVerdict::Match | RegionVerdict::Mismatch | RegionVerdict::New
        ));
    }
}

#[test]
fn scan_unreadable_region_keeps_status_ok() {
    let (source, inner) = synthetic_source();
    let clock = ManualClock::new(5);
    let baseline = capture_baseline(&source, &*clock).unwrap();
    inner.truncate_store("code_a", 10);
    let result = scan(&source, &baseline, &*clock);
    assert_eq!(result.ta_status, TaStatus::Ok);
    let m = result
        .measurements
        .iter()
        .find(|m| m.region.label == "code_a")
        .unwrap();
    assert_eq!(m.verdict, RegionVerdict::Unreadable);
    assert_eq!(m.digest, [0u8; 32]);
}

#[test]
fn scan_ta_not_found_when_no_regions() {
    let (source, inner) = synthetic_source();
    let clock = ManualClock::new(5);
    let baseline = capture_baseline(&source, &*clock).unwrap();
    inner.remove_region("code_a");
    inner.remove_region("code_b");
    let result = scan(&source, &baseline, &*clock);
    assert_eq!(result.ta_status, TaStatus::TaNotFound);
    assert!(result.measurements.is_empty());
}

#[test]
fn scan_determinism_ignoring_time() {
    let (source, _) = synthetic_source();
    let clock = ManualClock::new(5);
    let baseline = capture_baseline(&source, &*clock).unwrap();
    let a = scan(&source, &baseline, &*clock);
    clock.advance_ms(100);
    let b = scan(&source, &baseline, &*clock);
    assert_eq!(a.measurements, b.measurements);
    assert_eq!(a.ta_status, b.ta_status);
}

#[test]
fn tamper_sensitivity_exhaustive_one_bit_per_offset() {
    let inner = InProcessSource::new("ta");
    inner.add_region(0x1000, Perms(*b"r-xp"), "code", (0..=255u8).rev().collect());
    let source = MemorySource::InProcess(inner);
    let clock = ManualClock::new(0);
    let baseline = capture_baseline(&source, &*clock).unwrap();
    let region = enumerate_regions(&source).unwrap()[0].clone();

    for offset in 0..256u64 {
        let bit = 1u8 << (offset % 8);
        source.write_region_byte(&region, offset, bit).unwrap();
        let result = scan(&source, &baseline, &*clock);
        assert_eq!(
            result.measurements[0].verdict,
            RegionVerdict::Mismatch,
            "offset {offset} not detected"
        );
        source.write_region_byte(&region, offset, bit).unwrap();
    }
    assert!(scan(&source, &baseline, &*clock).all_match());
}

#[test]
fn snapshot_backend_equivalence() {
    let (source, _) = synthetic_source();
    let dir = tempfile::tempdir().unwrap();
    dump_snapshot(&source, dir.path()).unwrap();

    let snap = MemorySource::Snapshot(SnapshotSource::open(dir.path(), "ta"));
    let clock = ManualClock::new(0);
    let base_mem = capture_baseline(&source, &*clock).unwrap();
    let base_snap = capture_baseline(&snap, &*clock).unwrap();
    assert_eq!(base_mem.entries, base_snap.entries);

    let scan_snap = scan(&snap, &base_mem, &*clock);
    assert!(scan_snap.all_match());
}

#[test]
fn snapshot_two_x_regions_one_rw() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("maps.txt"),
        "1000-1100 r-xp alpha\n2000-2040 rw-p data\n3000-3080 r-xp beta\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("1000.bin"), vec![1u8; 0x100]).unwrap();
    std::fs::write(dir.path().join("2000.bin"), vec![2u8; 0x40]).unwrap();
    std::fs::write(dir.path().join("3000.bin"), vec![3u8; 0x80]).unwrap();

    let source = MemorySource::Snapshot(SnapshotSource::open(dir.path(), "fixture"));
    let regions = enumerate_regions(&source).unwrap();
    assert_eq!(regions.len(), 2);
    assert_eq!(regions[0].label, "alpha");
    assert_eq!(regions[1].label, "beta");
}

#[test]
fn snapshot_tamper_via_file_edit() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("maps.txt"), "1000-1100 r-xp alpha\n").unwrap();
    std::fs::write(dir.path().join("1000.bin"), vec![7u8; 0x100]).unwrap();
    let source = MemorySource::Snapshot(SnapshotSource::open(dir.path(), "fixture"));
    let clock = ManualClock::new(0);
    let baseline = capture_baseline(&source, &*clock).unwrap();
    let region = enumerate_regions(&source).unwrap()[0].clone();
    source.write_region_byte(&region, 0x42, 0x01).unwrap();
    let result = scan(&source, &baseline, &*clock);
    assert_eq!(result.measurements[0].verdict, RegionVerdict::Mismatch);
}

#[cfg(target_os = "linux")]
mod bridge {
    use super::*;

    #[test]
    fn attach_enumerate_read_live_child() {
        let (guard, label) = spawn_fixture_ta();
        let source = attach_debug_bridge(guard.0.id(), label.clone()).unwrap();
        let regions = enumerate_regions(&source).unwrap();
        assert_eq!(regions.len(), 1, "expected exactly one image-backed region");
        assert_eq!(regions[0].length, 4096);

        let bytes = read_region(&source, &regions[0]).unwrap();
        let image = std::fs::read(fixture_image_path()).unwrap();
        assert_eq!(bytes, image, "mapped bytes must equal the image file");
    }

    #[test]
    fn all_three_backends_measure_identical_digests() {
        let image_path = fixture_image_path();
        let image = std::fs::read(&image_path).unwrap();
        let expected = measure_region(&image);

        // child
        let (guard, label) = spawn_fixture_ta();
        let child_src = attach_debug_bridge(guard.0.id(), label).unwrap();
        let region = enumerate_regions(&child_src).unwrap()[0].clone();
        assert_eq!(measure_region(&read_region(&child_src, &region).unwrap()), expected);

        // plugin
        let plug = InProcessSource::from_image("plug", &image_path, 0x400000).unwrap();
        let plug_src = MemorySource::InProcess(plug);
        let region = enumerate_regions(&plug_src).unwrap()[0].clone();
        assert_eq!(measure_region(&read_region(&plug_src, &region).unwrap()), expected);

        // snapshot dumped from the child
        let dir = tempfile::tempdir().unwrap();
        dump_snapshot(&child_src, dir.path()).unwrap();
        let snap_src = MemorySource::Snapshot(SnapshotSource::open(dir.path(), "snap"));
        let region = enumerate_regions(&snap_src).unwrap()[0].clone();
        assert_eq!(measure_region(&read_region(&snap_src, &region).unwrap()), expected);
    }

    #[test]
    fn child_exit_is_source_gone() {
        let (mut guard, label) = spawn_fixture_ta();
        let source = attach_debug_bridge(guard.0.id(), label).unwrap();
        guard.0.kill().unwrap();
        guard.0.wait().unwrap();
        assert_eq!(enumerate_regions(&source), Err(SourceError::SourceGone));
    }

    #[test]
    fn scan_killed_child_is_ta_not_found() {
        let (mut guard, label) = spawn_fixture_ta();
        let source = attach_debug_bridge(guard.0.id(), label).unwrap();
        let clock = ManualClock::new(0);
        let baseline = capture_baseline(&source, &*clock).unwrap();
        guard.0.kill().unwrap();
        guard.0.wait().unwrap();
        let result = scan(&source, &baseline, &*clock);
        assert_eq!(result.ta_status, TaStatus::TaNotFound);
        assert!(result.measurements.is_empty());
    }

    #[test]
    fn tamper_live_child_via_bridge() {
        let (guard, label) = spawn_fixture_ta();
        let source = attach_debug_bridge(guard.0.id(), label).unwrap();
        let clock = ManualClock::new(0);
        let baseline = capture_baseline(&source, &*clock).unwrap();
        let region = enumerate_regions(&source).unwrap()[0].clone();

        // Flip a filler byte far from the entry loop.
        source.write_region_byte(&region, 0x800, 0xFF).unwrap();
        let result = scan(&source, &baseline, &*clock);
        assert_eq!(result.measurements[0].verdict, RegionVerdict::Mismatch);

        source.write_region_byte(&region, 0x800, 0xFF).unwrap();
        assert!(scan(&source, &baseline, &*clock).all_match());
    }

    #[test]
    fn attach_invalid_pid_is_no_such_process() {
        assert_eq!(
            attach_debug_bridge(0, "x").unwrap_err(),
            BridgeError::NoSuchProcess
        );
        // PIDs wrap far below u32::MAX; this one cannot exist.
        assert_eq!(
            attach_debug_bridge(u32::MAX, "x").unwrap_err(),
            BridgeError::NoSuchProcess
        );
    }

    #[test]
    fn attach_refused_maps_to_bridge_failed_scan() {
        // A fake proc tree whose mem node cannot be opened as a file stands
        // in for an attach refusal, which real kernels signal to non-root.
        let fake = tempfile::tempdir().unwrap();
        let pid_dir = fake.path().join("4242");
        std::fs::create_dir_all(pid_dir.join("mem")).unwrap();
        std::fs::write(pid_dir.join("maps"), "1000-1100 r-xp ta\n").unwrap();

        let err = attach_debug_bridge_at(fake.path(), 4242, "ta").unwrap_err();
        assert_eq!(err, BridgeError::PermissionDenied);

        // A bridge that degrades after attach shows up as BRIDGE_FAILED.
        let good = tempfile::tempdir().unwrap();
        let pid_dir = good.path().join("77");
        std::fs::create_dir_all(&pid_dir).unwrap();
        std::fs::write(pid_dir.join("maps"), "1000-1100 r-xp ta\n").unwrap();
        std::fs::write(pid_dir.join("mem"), vec![0u8; 0x1100]).unwrap();
        let source = attach_debug_bridge_at(good.path(), 77, "ta").unwrap();
        let clock = ManualClock::new(0);
        let baseline = capture_baseline(&source, &*clock).unwrap();

        std::fs::remove_file(pid_dir.join("mem")).unwrap();
        std::fs::create_dir_all(pid_dir.join("mem")).unwrap();
        let result = scan(&source, &baseline, &*clock);
        // maps still lists the region; reading it fails, which is the
        // per-region unreadable path, not a vanished target.
        assert_eq!(result.ta_status, TaStatus::Ok);
        assert!(result
            .measurements
            .iter()
            .all(|m| m.verdict == RegionVerdict::Unreadable));
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn region_identity_keyed_by_label_and_length(shift in 0u64..0x1_0000) {
            // Relocating a region must not produce MISSING/NEW as long as
            // label and length are stable.
            let inner = InProcessSource::new("ta");
            inner.add_region(0x1000, Perms(*b"r-xp"), "code", vec![9u8; 128]);
            let source = MemorySource::InProcess(inner);
            let clock = ManualClock::new(0);
            let baseline = capture_baseline(&source, &*clock).unwrap();

            let moved = InProcessSource::new("ta");
            moved.add_region(0x1000 + shift, Perms(*b"r-xp"), "code", vec![9u8; 128]);
            let moved = MemorySource::InProcess(moved);
            let result = scan(&moved, &baseline, &*clock);
            prop_assert!(result.all_match());
        }

        #[test]
        fn scan_accounts_for_every_baseline_entry(
            keep in proptest::collection::vec(any::<bool>(), 4)
        ) {
            let inner = InProcessSource::new("ta");
            for i in 0..4u64 {
                inner.add_region(0x1000 * (i + 1), Perms(*b"r-xp"),
                                 format!("r{i}"), vec![i as u8; 64]);
            }
            let source = MemorySource::InProcess(inner.clone());
            let clock = ManualClock::new(0);
            let baseline = capture_baseline(&source, &*clock).unwrap();
            for (i, k) in keep.iter().enumerate() {
                if !k {
                    inner.remove_region(&format!("r{i}"));
                }
            }
            let result = scan(&source, &baseline, &*clock);
            if keep.iter().any(|k| *k) {
                prop_assert_eq!(result.measurements.len(), 4);
                for entry in &baseline.entries {
                    prop_assert!(result.measurements.iter().any(|m| m.region.label == entry.label));
                }
            } else {
                prop_assert_eq!(result.ta_status, TaStatus::TaNotFound);
            }
        }
    }
}
