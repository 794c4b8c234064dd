use super::*;
use crate::protocol::{canonical_report_bytes, Nonce};
use crate::rng::seeded_rng;
use crate::scanner::{ScanResult, TaStatus};
use crate::time::ManualClock;

use ed25519_dalek::{Signature, SigningKey, Verifier, VerifyingKey};

fn test_identity(seed: u64) -> EnclaveIdentity {
    EnclaveIdentity::generate(&mut seeded_rng(seed))
}

fn test_seal_key(byte: u8) -> SealKey {
    SealKey::from_bytes([byte; 32])
}

mod identity {
    use super::*;

    #[test]
    fn public_key_derived_from_seed() {
        let identity = test_identity(1);
        let expected = SigningKey::from_bytes(&identity.signing_seed())
            .verifying_key()
            .to_bytes();
        assert_eq!(identity.public_key(), expected);
    }

    #[test]
    fn first_launch_creates_and_seals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("identity.sealed");
        let key = test_seal_key(7);
        let (identity, outcome) = init_identity(&path, &key, &mut seeded_rng(2)).unwrap();
        assert_eq!(outcome, IdentityOutcome::Created);
        assert!(path.exists());

        let (again, outcome) = init_identity(&path, &key, &mut seeded_rng(999)).unwrap();
        assert_eq!(outcome, IdentityOutcome::Restored);
        assert_eq!(again, identity);
        assert_eq!(again.instance_id(), identity.instance_id());
        assert_eq!(again.public_key(), identity.public_key());
    }

    #[test]
    fn wrong_seal_key_is_storage_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("identity.sealed");
        init_identity(&path, &test_seal_key(7), &mut seeded_rng(3)).unwrap();
        let err = init_identity(&path, &test_seal_key(8), &mut seeded_rng(3)).unwrap_err();
        assert!(matches!(
            err,
            IdentityError::StorageCorrupt(UnsealError::AuthFailure)
        ));
    }

    #[test]
    fn seal_key_file_roundtrip_and_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seal.key");
        std::fs::write(&path, [9u8; 32]).unwrap();
        let key = SealKey::load(&path).unwrap();
        assert_eq!(key.source_path(), Some(path.as_path()));

        std::fs::write(&path, [9u8; 31]).unwrap();
        assert!(SealKey::load(&path).is_err());
    }

    #[test]
    fn debug_output_never_shows_secrets() {
        let identity = test_identity(4);
        let seed_hex = hex::encode(identity.signing_seed());
        let debugged = format!("{identity:?}");
        assert!(!debugged.contains(&seed_hex));

        let key = test_seal_key(0x42);
        let debugged = format!("{key:?}");
        assert!(!debugged.contains(&hex::encode([0x42u8; 32])));
    }
}

mod sealing {
    use super::*;

    #[test]
    fn roundtrip_field_for_field() {
        let identity = test_identity(10);
        let key = test_seal_key(1);
        let blob = seal_identity(&identity, &key, &mut seeded_rng(0));
        assert_eq!(blob.magic, SEAL_MAGIC);
        assert_eq!(blob.version, SEAL_VERSION);
        assert_eq!(unseal_identity(&blob, &key).unwrap(), identity);
    }

    #[test]
    fn blob_file_layout() {
        let identity = test_identity(10);
        let blob = seal_identity(&identity, &test_seal_key(1), &mut seeded_rng(0));
        let bytes = blob.to_bytes();
        // magic 4 + version 1 + nonce 12 + ciphertext + tag 16
        assert_eq!(bytes.len(), 33 + blob.ciphertext.len());
        assert_eq!(&bytes[..4], b"SCLV");
        assert_eq!(bytes[4], 1);
        assert_eq!(SealedBlob::from_bytes(&bytes).unwrap(), blob);
    }

    #[test]
    fn repeated_seals_use_fresh_nonces() {
        let identity = test_identity(11);
        let key = test_seal_key(2);
        let mut rng = seeded_rng(5);
        let mut nonces = std::collections::HashSet::new();
        let mut ciphertexts = std::collections::HashSet::new();
        for _ in 0..100 {
            let blob = seal_identity(&identity, &key, &mut rng);
            assert!(nonces.insert(blob.aead_nonce), "aead nonce collision");
            assert!(ciphertexts.insert(blob.ciphertext), "ciphertext collision");
        }
    }

    #[test]
    fn single_bit_flips_fail_authentication() {
        let identity = test_identity(12);
        let key = test_seal_key(3);
        let blob = seal_identity(&identity, &key, &mut seeded_rng(6));

        let mut flipped = blob.clone();
        flipped.ciphertext[0] ^= 0x01;
        assert_eq!(unseal_identity(&flipped, &key), Err(UnsealError::AuthFailure));

        let mut flipped = blob.clone();
        flipped.auth_tag[15] ^= 0x80;
        assert_eq!(unseal_identity(&flipped, &key), Err(UnsealError::AuthFailure));

        let mut flipped = blob.clone();
        flipped.aead_nonce[5] ^= 0x10;
        assert_eq!(unseal_identity(&flipped, &key), Err(UnsealError::AuthFailure));
    }

    #[test]
    fn wrong_key_fails_authentication() {
        let identity = test_identity(13);
        let blob = seal_identity(&identity, &test_seal_key(4), &mut seeded_rng(7));
        assert_eq!(
            unseal_identity(&blob, &test_seal_key(5)),
            Err(UnsealError::AuthFailure)
        );
    }

    #[test]
    fn format_gates_precede_crypto() {
        let identity = test_identity(14);
        let key = test_seal_key(6);
        let blob = seal_identity(&identity, &key, &mut seeded_rng(8));

        let mut bad = blob.clone();
        bad.magic = *b"XXXX";
        assert_eq!(unseal_identity(&bad, &key), Err(UnsealError::BadMagic));

        let mut bad = blob.clone();
        bad.version = 2;
        assert_eq!(
            unseal_identity(&bad, &key),
            Err(UnsealError::UnsupportedVersion)
        );

        assert_eq!(
            SealedBlob::from_bytes(&[0u8; 10]).unwrap_err(),
            UnsealError::Malformed
        );
    }

    /// RFC 8439 §2.8.2 reference vector for the sealing AEAD, pinning the
    /// cipher to real ChaCha20-Poly1305.
    #[test]
    fn sealing_aead_matches_rfc8439_vector() {
        use chacha20poly1305::aead::{Aead, Payload};
        use chacha20poly1305::{ChaCha20Poly1305, KeyInit};

        let key: [u8; 32] = (0x80..=0x9f).collect::<Vec<u8>>().try_into().unwrap();
        let nonce: [u8; 12] = [
            0x07, 0x00, 0x00, 0x00, 0x40, 0x41, 0x42, 0x43, 0x44, 0x45, 0x46, 0x47,
        ];
        let aad: [u8; 12] = [
            0x50, 0x51, 0x52, 0x53, 0xc0, 0xc1, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7,
        ];
        let plaintext: &[u8] = b"Ladies and Gentlemen of the class of '99: \
If I could offer you only one tip for the future, sunscreen would be it.";

        let cipher = ChaCha20Poly1305::new((&key).into());
        let out = cipher
            .encrypt(
                (&nonce).into(),
                Payload {
                    msg: plaintext,
                    aad: &aad,
                },
            )
            .unwrap();
        let expected_ct = "d31a8d34648e60db7b86afbc53ef7ec2a4aded51296e08fea9e2b5\
a736ee62d63dbea45e8ca9671282fafb69da92728b1a71de0a9e060b2905d6a5b67ecd3b3692ddbd7f2d778b8c98\
03aee328091b58fab324e4fad675945585808b4831d7bc3ff4def08e4b7a9de576d26586cec64b6116";
        let expected_tag = "1ae10b594f09e26a7e902ecbd0600691";
        assert_eq!(hex::encode(&out[..plaintext.len()]), expected_ct);
        assert_eq!(hex::encode(&out[plaintext.len()..]), expected_tag);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn seal_unseal_roundtrip_and_wrong_key_rejected(
                id_seed in 0u64..10_000,
                key_a in 0u8..=255,
                key_b in 0u8..=255,
            ) {
                let identity = test_identity(id_seed);
                let ka = test_seal_key(key_a);
                let blob = seal_identity(&identity, &ka, &mut seeded_rng(id_seed));
                prop_assert_eq!(unseal_identity(&blob, &ka).unwrap(), identity);
                if key_a != key_b {
                    prop_assert_eq!(
                        unseal_identity(&blob, &test_seal_key(key_b)),
                        Err(UnsealError::AuthFailure)
                    );
                }
            }

            #[test]
            fn any_payload_bit_flip_fails(bit in 0usize..((33 + 80) * 8)) {
                let identity = test_identity(77);
                let key = test_seal_key(9);
                let blob = seal_identity(&identity, &key, &mut seeded_rng(9));
                let mut bytes = blob.to_bytes();
                // skip the 5 header bytes: magic/version feed format gates
                let payload_bits = (bytes.len() - 5) * 8;
                let bit = 5 * 8 + (bit % payload_bits);
                bytes[bit / 8] ^= 1 << (bit % 8);
                let reparsed = SealedBlob::from_bytes(&bytes).unwrap();
                prop_assert_eq!(
                    unseal_identity(&reparsed, &key),
                    Err(UnsealError::AuthFailure)
                );
            }
        }
    }
}

mod quotes {
    use super::*;

    #[test]
    fn quote_roundtrip_under_platform_root() {
        let identity = test_identity(20);
        let platform = PlatformKey::generate(&mut seeded_rng(21));
        let measurement = [0xEE; 32];
        let quote = produce_quote(&identity, &measurement, &platform);
        assert_eq!(quote.instance_id, identity.instance_id());
        assert_eq!(quote.public_key, identity.public_key());
        assert!(verify_quote(&quote, &platform.public_key()));
    }

    #[test]
    fn flipped_measurement_byte_breaks_signature() {
        let identity = test_identity(22);
        let platform = PlatformKey::generate(&mut seeded_rng(23));
        let mut quote = produce_quote(&identity, &[0xEE; 32], &platform);
        quote.enclave_measurement[0] ^= 1;
        assert!(!verify_quote(&quote, &platform.public_key()));
    }

    #[test]
    fn non_platform_signer_rejected() {
        let identity = test_identity(24);
        let platform = PlatformKey::generate(&mut seeded_rng(25));
        let adversary = PlatformKey::generate(&mut seeded_rng(26));
        let forged = produce_quote(&identity, &[0xEE; 32], &adversary);
        assert!(!verify_quote(&forged, &platform.public_key()));
    }

    #[test]
    fn platform_key_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let platform = PlatformKey::generate(&mut seeded_rng(27));
        let path = dir.path().join("platform.key");
        platform.save(&path).unwrap();
        let reloaded = PlatformKey::load(&path).unwrap();
        assert_eq!(reloaded.public_key(), platform.public_key());
    }

    #[test]
    fn image_measurement_is_file_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("image.bin");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            hex::encode(measure_enclave_image(&path).unwrap()),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

mod signing {
    use super::*;

    /// RFC 8032 §7.1 TEST 1-3.
    #[test]
    fn rfc8032_vectors() {
        let vectors = [
            (
                "9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60",
                "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a",
                "",
                "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b",
            ),
            (
                "4ccd089b28ff96da9db6c346ec114e0f5b8a319f35aba624da8cf6ed4fb8a6fb",
                "3d4017c3e843895a92b70aa74d1b7ebc9c982ccf2ec4968cc0cd55f12af4660c",
                "72",
                "92a009a9f0d4cab8720e820b5f642540a2b27b5416503f8fb3762223ebdb69da085ac1e43e15996e458f3613d0f11d8c387b2eaeb4302aeeb00d291612bb0c00",
            ),
            (
                "c5aa8df43f9f837bedb7442f31dcb7b166d38535076f094b85ce3a2e0b4458f7",
                "fc51cd8e6218a1a38da47ed00230f0580816ed13ba3303ac5deb911548908025",
                "af82",
                "6291d657deec24024827e69c3abe01a30ce548a284743a445e3680d7db5ac3ac18ff9b538d16f290ae67f760984dc6594a7c15e9716ed28dc027beceea1ec40a",
            ),
        ];
        for (seed_hex, pk_hex, msg_hex, sig_hex) in vectors {
            let seed: [u8; 32] = hex::decode(seed_hex).unwrap().try_into().unwrap();
            let message = hex::decode(msg_hex).unwrap();
            let identity = EnclaveIdentity::from_parts([0u8; 16], seed);
            assert_eq!(hex::encode(identity.public_key()), pk_hex);
            let signature = sign_report(&identity, &message);
            assert_eq!(hex::encode(signature), sig_hex);

            let vk = VerifyingKey::from_bytes(&identity.public_key()).unwrap();
            assert!(vk.verify(&message, &Signature::from_bytes(&signature)).is_ok());
        }
    }

    #[test]
    fn verify_rejects_other_key() {
        let a = test_identity(30);
        let b = test_identity(31);
        let signature = sign_report(&a, b"body");
        let vk_b = VerifyingKey::from_bytes(&b.public_key()).unwrap();
        assert!(vk_b
            .verify(b"body", &Signature::from_bytes(&signature))
            .is_err());
    }
}

mod challenges {
    use super::*;
    use crate::scanner::{MemoryRegion, Perms, RegionMeasurement, RegionVerdict};

    fn sample_scan(at_ms: u64) -> ScanResult {
        ScanResult {
            ta_status: TaStatus::Ok,
            scan_time_ms: at_ms,
            measurements: vec![RegionMeasurement {
                region: MemoryRegion {
                    start: 0x1000,
                    length: 64,
                    perms: Perms(*b"r-xp"),
                    label: "ta".to_string(),
                },
                digest: [3u8; 32],
                verdict: RegionVerdict::Match,
            }],
        }
    }

    fn verify_sig(identity: &EnclaveIdentity, report: &crate::protocol::VerificationReport) -> bool {
        let vk = VerifyingKey::from_bytes(&identity.public_key()).unwrap();
        vk.verify(
            &canonical_report_bytes(report),
            &Signature::from_bytes(&report.signature),
        )
        .is_ok()
    }

    #[test]
    fn report_binds_nonce_and_verifies() {
        let identity = test_identity(40);
        let clock = ManualClock::new(2_000);
        let nonce = Nonce([0x5A; 32]);
        let scan = sample_scan(1_500);
        let report = on_challenge(Some(&scan), &nonce, &identity, &*clock).unwrap();
        assert_eq!(report.nonce, nonce);
        assert_eq!(report.instance_id, identity.instance_id());
        assert_eq!(report.scan_time_ms, 1_500);
        assert_eq!(report.sign_time_ms, 2_000);
        assert!(report.scan_time_ms <= report.sign_time_ms);
        assert!(verify_sig(&identity, &report));
    }

    #[test]
    fn challenge_before_first_scan() {
        let identity = test_identity(41);
        let clock = ManualClock::new(100);
        assert_eq!(
            on_challenge(None, &Nonce([1; 32]), &identity, &*clock).unwrap_err(),
            ChallengeError::NoScanAvailable
        );

        // the entry point answers anyway, with a signed NO_SCAN status
        let schedule = ScanSchedule::new(
            std::time::Duration::from_millis(100),
            std::time::Duration::from_millis(100),
            8,
            seeded_rng(0),
        )
        .unwrap();
        let mut enclave = Enclave::new(identity.clone(), None, schedule, clock.clone());
        let report = enclave.handle_challenge(&Nonce([1; 32]));
        assert_eq!(report.ta_status, TaStatus::NoScan);
        assert!(report.measurements.is_empty());
        assert!(verify_sig(&identity, &report));
    }

    #[test]
    fn two_challenges_reuse_the_same_scan() {
        let identity = test_identity(42);
        let clock = ManualClock::new(3_000);
        let scan = sample_scan(2_500);
        let a = on_challenge(Some(&scan), &Nonce([1; 32]), &identity, &*clock).unwrap();
        clock.advance_ms(40);
        let b = on_challenge(Some(&scan), &Nonce([2; 32]), &identity, &*clock).unwrap();

        assert_eq!(a.measurements, b.measurements);
        assert_eq!(a.scan_time_ms, b.scan_time_ms);
        assert_ne!(a.nonce, b.nonce);
        assert_ne!(a.sign_time_ms, b.sign_time_ms);
        assert!(verify_sig(&identity, &a));
        assert!(verify_sig(&identity, &b));
    }

    #[test]
    fn sign_time_clamped_to_scan_time_on_clock_step() {
        let identity = test_identity(43);
        let clock = ManualClock::new(1_000);
        let scan = sample_scan(1_500); // clock stepped backwards since the scan
        let report = on_challenge(Some(&scan), &Nonce([1; 32]), &identity, &*clock).unwrap();
        assert!(report.scan_time_ms <= report.sign_time_ms);
    }

    #[test]
    fn executor_processes_calls_sequentially() {
        let identity = test_identity(44);
        let clock = ManualClock::new(10_000);
        let schedule = ScanSchedule::new(
            std::time::Duration::from_millis(500),
            std::time::Duration::from_millis(500),
            8,
            seeded_rng(0),
        )
        .unwrap();
        let enclave = Enclave::new(identity.clone(), None, schedule, clock);
        let (handle, join) = spawn_enclave(enclave);

        assert_eq!(handle.instance_id(), identity.instance_id());
        assert_eq!(handle.public_key(), identity.public_key());
        assert_eq!(handle.announce(), None);
        assert_eq!(
            handle.next_scan_delay(),
            Some(std::time::Duration::from_millis(500))
        );

        let report = handle.challenge(&Nonce([9; 32])).unwrap();
        assert_eq!(report.ta_status, TaStatus::NoScan);

        handle.store_scan(sample_scan(9_000));
        let report = handle.challenge(&Nonce([8; 32])).unwrap();
        assert_eq!(report.ta_status, TaStatus::Ok);
        assert_eq!(report.scan_time_ms, 9_000);

        handle.reset_for_restart();
        let report = handle.challenge(&Nonce([7; 32])).unwrap();
        assert_eq!(report.ta_status, TaStatus::NoScan);

        handle.shutdown();
        join.join().unwrap();
        assert_eq!(handle.challenge(&Nonce([6; 32])), None);
    }
}
