use std::collections::{BTreeMap, HashSet};
use std::net::TcpListener;
use std::time::Duration;

use madea::attestation::wire::{self, Message};
use madea::attestation::{
    accept_reference, attest, measure, serve, verify_report, Agent, AttestationChannel, DeviceKey,
    DeviceState, DivergenceKind, ProcessTable, ReferenceMeasurement, TcpChannel, Verifier,
    VerifyError,
};
use madea::Mac;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DEV: Mac = Mac([0xb8, 0x27, 0xeb, 0x4f, 0x1a, 0x02]);

fn table(entries: &[(&str, &[u8])]) -> ProcessTable {
    let mut t = ProcessTable::new();
    for (p, b) in entries {
        t.insert(*p, b.to_vec()).unwrap();
    }
    t
}

fn bulb() -> ProcessTable {
    table(&[
        ("/sbin/init", b"init"),
        ("/usr/bin/bulbd", b"bulb daemon 1.4"),
        ("/usr/sbin/dropbear", b"dropbear"),
    ])
}

#[test]
fn every_single_bit_flip_is_rejected() {
    let key = DeviceKey::from_seed([9; 32]);
    let mut verifier = Verifier::seeded(1);
    verifier.register(DEV, key.public());
    let mut t = bulb();
    let reference = ReferenceMeasurement::from_table(&t);
    t.insert("/tmp/.x", b"payload".to_vec()).unwrap();
    let req = verifier.issue(DEV, 0);
    let report = attest(&t, &reference, &req, &key);
    assert_eq!(report.verdict, DeviceState::Infected);
    let frame = wire::encode_message(&Message::Report(report));

    let (mut decode_errors, mut bad_sigs) = (0, 0);
    for bit in 0..frame.len() * 8 {
        let mut f = frame.clone();
        f[bit / 8] ^= 1 << (bit % 8);
        match wire::decode_message(&f) {
            Err(_) => decode_errors += 1,
            Ok(Message::Report(r)) => {
                assert_eq!(
                    verifier.verify(&r, &req, 1),
                    Err(VerifyError::BadSignature),
                    "bit {bit}"
                );
                bad_sigs += 1;
            }
            Ok(Message::Request(_)) => panic!("bit {bit} turned a report into a request"),
        }
    }
    assert!(decode_errors > 0 && bad_sigs > 0);
    assert_eq!(decode_errors + bad_sigs, frame.len() * 8);

    let Message::Report(original) = wire::decode_message(&frame).unwrap() else {
        unreachable!()
    };
    assert_eq!(verifier.verify(&original, &req, 1), Ok(()));
}

#[test]
fn report_signed_by_another_device_key_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let genuine = DeviceKey::generate(&mut rng);
    let other = DeviceKey::generate(&mut rng);
    assert_ne!(genuine.public().to_string(), other.public().to_string());
    let mut verifier = Verifier::seeded(2);
    verifier.register(DEV, genuine.public());
    let t = bulb();
    let reference = ReferenceMeasurement::from_table(&t);
    let req = verifier.issue(DEV, 0);
    let forged = attest(&t, &reference, &req, &other);
    assert_eq!(
        verifier.verify(&forged, &req, 1),
        Err(VerifyError::BadSignature)
    );
    assert_eq!(
        verify_report(&forged, &req, &genuine.public()),
        Err(VerifyError::BadSignature)
    );
    // The bad report did not burn the challenge.
    let honest = attest(&t, &reference, &req, &genuine);
    assert_eq!(verifier.verify(&honest, &req, 1), Ok(()));
}

#[test]
fn unknown_device_is_rejected() {
    let key = DeviceKey::from_seed([1; 32]);
    let mut verifier = Verifier::seeded(3);
    let req = verifier.issue(DEV, 0);
    let t = bulb();
    let report = attest(&t, &ReferenceMeasurement::from_table(&t), &req, &key);
    assert_eq!(
        verifier.verify(&report, &req, 1),
        Err(VerifyError::BadSignature)
    );
}

#[test]
fn a_million_challenges_are_distinct() {
    let mut verifier = Verifier::new();
    let mut seen = HashSet::with_capacity(1_000_000);
    for i in 0..1_000_000u64 {
        let req = verifier.issue(DEV, i);
        assert!(seen.insert(req.challenge.0), "repeat at {i}");
        verifier.expire(&req);
    }
    assert_eq!(verifier.outstanding(), 0);
}

#[test]
fn replayed_reports_are_stale() {
    let key = DeviceKey::from_seed([4; 32]);
    let mut verifier = Verifier::seeded(4);
    verifier.register(DEV, key.public());
    let t = bulb();
    let reference = ReferenceMeasurement::from_table(&t);
    let first = verifier.issue(DEV, 0);
    let report = attest(&t, &reference, &first, &key);
    assert_eq!(verifier.verify(&report, &first, 10), Ok(()));
    assert_eq!(
        verifier.verify(&report, &first, 20),
        Err(VerifyError::StaleChallenge)
    );
    let second = verifier.issue(DEV, 30);
    assert_eq!(
        verifier.verify(&report, &second, 40),
        Err(VerifyError::StaleChallenge)
    );
    let fresh = attest(&t, &reference, &second, &key);
    assert_eq!(verifier.verify(&fresh, &second, 40), Ok(()));
}

#[test]
fn deadline_is_inclusive() {
    let key = DeviceKey::from_seed([5; 32]);
    let mut verifier = Verifier::seeded(5).with_deadline(1_000);
    verifier.register(DEV, key.public());
    let t = bulb();
    let reference = ReferenceMeasurement::from_table(&t);
    let on_time = verifier.issue(DEV, 100);
    assert_eq!(
        verifier.verify(&attest(&t, &reference, &on_time, &key), &on_time, 1_100),
        Ok(())
    );
    let late = verifier.issue(DEV, 100);
    assert_eq!(
        verifier.verify(&attest(&t, &reference, &late, &key), &late, 1_101),
        Err(VerifyError::Timeout)
    );
}

#[test]
fn inconsistent_verdict_is_caught_after_signature() {
    let key = DeviceKey::from_seed([6; 32]);
    let mut verifier = Verifier::seeded(6);
    verifier.register(DEV, key.public());
    let mut t = bulb();
    let reference = ReferenceMeasurement::from_table(&t);
    t.insert("/tmp/bot", b"bot".to_vec()).unwrap();
    let req = verifier.issue(DEV, 0);
    let mut report = attest(&t, &reference, &req, &key);
    // A buggy agent that signs HEALTHY next to a divergence list.
    report.verdict = DeviceState::Healthy;
    report.signature = key.sign(&madea::attestation::signed_bytes(
        &report.challenge,
        report.verdict,
        &report.divergences,
    ));
    assert_eq!(
        verifier.verify(&report, &req, 1),
        Err(VerifyError::InconsistentReport)
    );
}

#[test]
fn directory_agent_over_tcp_with_reference_refresh() {
    let dir = tempfile::tempdir().unwrap();
    let procs = dir.path().join("procs");
    std::fs::create_dir_all(procs.join("usr/bin")).unwrap();
    std::fs::write(procs.join("usr/bin/bulbd"), b"bulb daemon").unwrap();
    std::fs::write(procs.join("init"), b"init").unwrap();

    let reference_path = dir.path().join("reference.csv");
    let trusted = dir.path().join("trusted.csv");
    ReferenceMeasurement::from_table(&ProcessTable::from_dir(&procs).unwrap())
        .save(&reference_path)
        .unwrap();

    let key = DeviceKey::from_seed([7; 32]);
    let agent = Agent::from_dir(
        DEV,
        key.clone(),
        ReferenceMeasurement::default(),
        procs.clone(),
    )
    .with_reference_file(reference_path.clone())
    .unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || serve(&agent, &listener, Some(3)).unwrap());

    let mut verifier = Verifier::seeded(7);
    verifier.register(DEV, key.public());
    let mut channel = TcpChannel::new(addr, Duration::from_secs(5));
    let mut round = |verifier: &mut Verifier| {
        let req = verifier.issue(DEV, 0);
        let report = channel.attest(&req).unwrap();
        verifier.verify(&report, &req, 1).unwrap();
        report
    };

    assert_eq!(round(&mut verifier).verdict, DeviceState::Healthy);

    std::fs::write(procs.join("usr/bin/update"), b"vendor update 2").unwrap();
    let r = round(&mut verifier);
    assert_eq!(r.verdict, DeviceState::Infected);
    assert_eq!(r.divergences.len(), 1);
    assert_eq!(r.divergences[0].path, "/usr/bin/update");
    assert_eq!(r.divergences[0].kind, DivergenceKind::NewProcess);

    // Operator vouches for the update out of band.
    ReferenceMeasurement::from_table(&ProcessTable::from_dir(&procs).unwrap())
        .save(&trusted)
        .unwrap();
    accept_reference(&trusted, &reference_path).unwrap();
    assert_eq!(round(&mut verifier).verdict, DeviceState::Healthy);
    server.join().unwrap();
}

fn arb_table() -> impl Strategy<Value = BTreeMap<String, Vec<u8>>> {
    prop::collection::btree_map(
        "/[a-z]{1,3}/[a-z]{1,4}",
        prop::collection::vec(any::<u8>(), 1..16),
        0..8,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// The verdict is HEALTHY exactly when the measured digests equal the
    /// reference, and every divergence names a path where they differ.
    #[test]
    fn attestation_is_sound(reference_bins in arb_table(), running_bins in arb_table(), seed in any::<[u8; 32]>()) {
        let to_table = |m: &BTreeMap<String, Vec<u8>>| {
            let mut t = ProcessTable::new();
            for (p, b) in m {
                t.insert(p.clone(), b.clone()).unwrap();
            }
            t
        };
        let running = to_table(&running_bins);
        let reference = ReferenceMeasurement::from_table(&to_table(&reference_bins));
        let key = DeviceKey::from_seed(seed);
        let mut verifier = Verifier::seeded(seed[0] as u64);
        verifier.register(DEV, key.public());
        let req = verifier.issue(DEV, 0);
        let report = attest(&running, &reference, &req, &key);

        let measured = measure(&running);
        prop_assert_eq!(report.verdict == DeviceState::Healthy, measured == reference.expected);
        let mut paths: Vec<&str> = measured
            .keys()
            .chain(reference.expected.keys())
            .filter(|p| measured.get(*p) != reference.expected.get(*p))
            .map(|p| p.as_str())
            .collect();
        paths.sort();
        paths.dedup();
        let reported: Vec<&str> = report.divergences.iter().map(|d| d.path.as_str()).collect();
        prop_assert_eq!(reported, paths);
        for d in &report.divergences {
            prop_assert_eq!(d.observed_digest.as_ref(), measured.get(&d.path));
            let expected_kind = if reference.expected.contains_key(&d.path) {
                DivergenceKind::DigestMismatch
            } else {
                DivergenceKind::NewProcess
            };
            prop_assert_eq!(d.kind, expected_kind);
        }
        let frame = wire::encode_message(&Message::Report(report.clone()));
        prop_assert_eq!(wire::decode_message(&frame).unwrap(), Message::Report(report.clone()));
        prop_assert_eq!(verifier.verify(&report, &req, 1), Ok(()));
    }
}
