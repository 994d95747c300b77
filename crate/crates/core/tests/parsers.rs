mod common;

use std::net::Ipv4Addr;

use madea::dns::{self, DnsError};
use madea::packet::{decode_frame, encode_frame, FrameError, ETH_HEADER_LEN};
use madea::pcap::{read_pcap, read_pcap_lossy, write_pcap, PcapError, PcapReader};
use madea::trace::{generate_trace, Endpoint, FlowSpec, TraceOptions};
use madea::{Mac, Transport};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pcap_round_trip_on_a_thousand_random_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ca9);
    let mut total = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(0..30);
        let records = common::random_records(&mut rng, n);
        let bytes = write_pcap(&records).unwrap();
        let parsed = read_pcap(&bytes).unwrap();
        assert_eq!(parsed, records);
        assert_eq!(write_pcap(&parsed).unwrap(), bytes, "byte identity");
        total += n;
    }
    assert!(total > 10_000);
}

#[test]
fn generated_traces_survive_a_file_round_trip() {
    let bulb = Mac([0xb8, 0x27, 0xeb, 1, 2, 3]);
    let gw = Mac([0xdc, 0xa6, 0x32, 0xce, 0x31, 0x63]);
    let flows = [
        FlowSpec::new(
            bulb,
            Ipv4Addr::new(192, 168, 4, 50),
            gw,
            Endpoint::host("m2.tuyaus.com", Ipv4Addr::new(54, 212, 163, 173)),
            Transport::Tcp,
        )
        .send(157)
        .recv(171)
        .repeat(20),
        FlowSpec::new(
            bulb,
            Ipv4Addr::new(192, 168, 4, 50),
            gw,
            Endpoint::Ip(Ipv4Addr::new(1, 2, 3, 4)),
            Transport::Udp,
        )
        .send(60)
        .repeat(5),
    ];
    for seed in 0..20 {
        let trace = generate_trace(
            &flows,
            &TraceOptions {
                seed,
                ..TraceOptions::default()
            },
        )
        .unwrap();
        let bytes = write_pcap(&trace.records).unwrap();
        assert_eq!(read_pcap(&bytes).unwrap(), trace.records);
    }
}

fn big_endian_file(frames: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0xa1b2c3d4u32.to_be_bytes());
    out.extend_from_slice(&2u16.to_be_bytes());
    out.extend_from_slice(&4u16.to_be_bytes());
    out.extend_from_slice(&[0; 8]);
    out.extend_from_slice(&65535u32.to_be_bytes());
    out.extend_from_slice(&1u32.to_be_bytes());
    for (i, f) in frames.iter().enumerate() {
        out.extend_from_slice(&(1_600_000_000u32 + i as u32).to_be_bytes());
        out.extend_from_slice(&7u32.to_be_bytes());
        out.extend_from_slice(&(f.len() as u32).to_be_bytes());
        out.extend_from_slice(&(f.len() as u32).to_be_bytes());
        out.extend_from_slice(f);
    }
    out
}

#[test]
fn byte_swapped_files_are_read() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut records = common::random_records(&mut rng, 25);
    for (i, r) in records.iter_mut().enumerate() {
        r.ts_sec = 1_600_000_000 + i as u32;
        r.ts_usec = 7;
    }
    let frames: Vec<Vec<u8>> = records.iter().map(|r| encode_frame(r).unwrap()).collect();
    assert_eq!(read_pcap(&big_endian_file(&frames)).unwrap(), records);
}

#[test]
fn empty_and_truncated_files() {
    let empty = write_pcap(&[]).unwrap();
    assert_eq!(empty.len(), 24);
    assert!(read_pcap(&empty).unwrap().is_empty());
    assert_eq!(read_pcap(&empty[..10]), Err(PcapError::TruncatedHeader));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let records = common::random_records(&mut rng, 3);
    let bytes = write_pcap(&records).unwrap();
    let (got, err) = read_pcap_lossy(&bytes[..bytes.len() - 1]);
    assert_eq!(got, records[..2]);
    assert_eq!(err, Some(PcapError::TruncatedRecord { index: 2 }));
}

fn header(ancount: u16) -> Vec<u8> {
    let mut m = vec![0xbe, 0xef, 0x81, 0x80, 0x00, 0x01];
    m.extend_from_slice(&ancount.to_be_bytes());
    m.extend_from_slice(&[0, 0, 0, 0]);
    m
}

fn name(m: &mut Vec<u8>, labels: &[&str]) {
    for l in labels {
        m.push(l.len() as u8);
        m.extend_from_slice(l.as_bytes());
    }
    m.push(0);
}

fn a_record(m: &mut Vec<u8>, owner_ptr: u16, ip: [u8; 4]) {
    m.extend_from_slice(&(0xc000 | owner_ptr).to_be_bytes());
    m.extend_from_slice(&[0, 1, 0, 1, 0, 0, 0, 60, 0, 4]);
    m.extend_from_slice(&ip);
}

#[test]
fn dns_compressed_answer_vector() {
    let mut m = header(1);
    name(&mut m, &["m2", "tuyaus", "com"]);
    m.extend_from_slice(&[0, 1, 0, 1]);
    a_record(&mut m, 12, [54, 212, 163, 173]);
    let r = dns::parse_message(&m).unwrap();
    assert_eq!(r.txn_id, 0xbeef);
    assert_eq!(r.query_name, "m2.tuyaus.com");
    assert_eq!(r.answers.len(), 1);
    assert_eq!(r.answers[0].name, "m2.tuyaus.com");
    assert_eq!(r.answers[0].ip, Ipv4Addr::new(54, 212, 163, 173));
}

#[test]
fn dns_suffix_pointer_vector() {
    // Answer owner "a3.tuyaus.com" = label "a3" + pointer to "tuyaus.com" at offset 15.
    let mut m = header(1);
    name(&mut m, &["m2", "tuyaus", "com"]);
    m.extend_from_slice(&[0, 1, 0, 1]);
    m.push(2);
    m.extend_from_slice(b"a3");
    m.extend_from_slice(&[0xc0, 15]);
    m.extend_from_slice(&[0, 1, 0, 1, 0, 0, 0, 60, 0, 4, 1, 2, 3, 4]);
    let r = dns::parse_message(&m).unwrap();
    assert_eq!(r.answers[0].name, "a3.tuyaus.com");
}

#[test]
fn dns_pointer_cycle_is_rejected() {
    // Question name is a pointer to itself.
    let mut m = header(0);
    m.extend_from_slice(&[0xc0, 12, 0, 1, 0, 1]);
    assert!(matches!(
        dns::parse_message(&m),
        Err(DnsError::Malformed(_))
    ));

    // Two pointers that reference each other from the answer section.
    let mut m = header(1);
    name(&mut m, &["x", "com"]);
    m.extend_from_slice(&[0, 1, 0, 1]);
    let at = m.len() as u16;
    m.extend_from_slice(&(0xc000 | (at + 2)).to_be_bytes());
    m.extend_from_slice(&(0xc000 | at).to_be_bytes());
    m.extend_from_slice(&[0, 1, 0, 1, 0, 0, 0, 60, 0, 4, 1, 2, 3, 4]);
    assert!(matches!(
        dns::parse_message(&m),
        Err(DnsError::Malformed(_))
    ));
}

#[test]
fn dns_pointer_past_end_is_rejected() {
    let mut m = header(0);
    m.extend_from_slice(&[0xc0, 0xff, 0, 1, 0, 1]);
    assert!(matches!(
        dns::parse_message(&m),
        Err(DnsError::Malformed(_))
    ));
}

#[test]
fn dns_cname_chain_maps_to_query_name() {
    // www.example.com CNAME edge.cdn.net ; edge.cdn.net A 93.184.216.34
    let mut m = header(2);
    name(&mut m, &["www", "example", "com"]);
    m.extend_from_slice(&[0, 1, 0, 1]);
    m.extend_from_slice(&[0xc0, 12, 0, 5, 0, 1, 0, 0, 0, 60]);
    let mut target = Vec::new();
    name(&mut target, &["edge", "cdn", "net"]);
    m.extend_from_slice(&(target.len() as u16).to_be_bytes());
    let target_at = m.len() as u16;
    m.extend_from_slice(&target);
    a_record(&mut m, target_at, [93, 184, 216, 34]);
    let r = dns::parse_message(&m).unwrap();
    assert_eq!(r.answers.len(), 1);
    assert_eq!(r.answers[0].name, "edge.cdn.net");
    let mut map = madea::HostnameMap::new();
    map.learn(&r);
    assert_eq!(
        map.get(&Ipv4Addr::new(93, 184, 216, 34)),
        Some("www.example.com")
    );
}

#[test]
fn dns_query_is_not_a_response() {
    let mut m = header(0);
    m[2] = 0x01;
    name(&mut m, &["a", "com"]);
    m.extend_from_slice(&[0, 1, 0, 1]);
    assert_eq!(dns::parse_message(&m), Err(DnsError::NotAResponse));
}

#[test]
fn random_dns_responses_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..2000 {
        let r = common::random_dns(&mut rng);
        assert_eq!(dns::parse_message(&dns::encode_response(&r)).unwrap(), r);
    }
}

/// A million inputs: pure noise, and single valid frames with random byte
/// mutations and truncations. Nothing may panic.
#[test]
fn frame_decoder_fuzz_million_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    let seeds: Vec<Vec<u8>> = common::random_records(&mut rng, 256)
        .iter()
        .map(|r| encode_frame(r).unwrap())
        .collect();
    let mut buf = vec![0u8; 512];
    let mut decoded = 0usize;
    for i in 0..1_000_000u32 {
        let input: &[u8] = if i % 2 == 0 {
            let n = rng.gen_range(0..buf.len());
            rng.fill_bytes(&mut buf[..n]);
            &buf[..n]
        } else {
            let src = &seeds[rng.gen_range(0..seeds.len())];
            let n = rng.gen_range(0..=src.len());
            buf[..n].copy_from_slice(&src[..n]);
            for _ in 0..rng.gen_range(1..4) {
                if n > 0 {
                    let at = rng.gen_range(0..n);
                    buf[at] = rng.gen();
                }
            }
            &buf[..n]
        };
        let orig_len = input.len() as u32 + rng.gen_range(0..3);
        match decode_frame(input, 0, 0, orig_len) {
            Ok(rec) => {
                assert!(input.len() >= ETH_HEADER_LEN);
                assert_eq!(rec.frame_len, orig_len);
                decoded += 1;
            }
            Err(FrameError::TooShort(n)) => assert!(n < ETH_HEADER_LEN),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
    assert!(decoded > 900_000);
}

#[test]
fn pcap_reader_fuzz() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let base = write_pcap(&common::random_records(&mut rng, 10)).unwrap();
    for _ in 0..20_000 {
        let mut data = base.clone();
        for _ in 0..rng.gen_range(1..6) {
            let at = rng.gen_range(0..data.len());
            data[at] = rng.gen();
        }
        data.truncate(rng.gen_range(0..=data.len()));
        if let Ok(reader) = PcapReader::new(&data) {
            for item in reader {
                if item.is_err() {
                    break;
                }
            }
        }
        let _ = dns::parse_message(&data);
    }
}
