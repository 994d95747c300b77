#![allow(dead_code)]

use std::net::Ipv4Addr;

use madea::dns::{DnsAnswer, DnsResponse, TYPE_A};
use madea::packet::{ETHERTYPE_ARP, ETHERTYPE_EAPOL, ETHERTYPE_IPV4};
use madea::{Mac, PacketRecord, Transport};
use rand::Rng;

pub fn random_mac<R: Rng>(rng: &mut R) -> Mac {
    Mac(rng.gen())
}

pub fn random_ip<R: Rng>(rng: &mut R) -> Ipv4Addr {
    Ipv4Addr::from(rng.gen::<u32>())
}

pub fn random_name<R: Rng>(rng: &mut R) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789-";
    let labels = rng.gen_range(1..=4);
    (0..labels)
        .map(|_| {
            let n = rng.gen_range(1..=12);
            (0..n)
                .map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char)
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(".")
}

pub fn random_dns<R: Rng>(rng: &mut R) -> DnsResponse {
    let query_name = random_name(rng);
    let answers = (0..rng.gen_range(0..=3))
        .map(|_| DnsAnswer {
            name: if rng.gen_bool(0.7) {
                query_name.clone()
            } else {
                random_name(rng)
            },
            record_type: TYPE_A,
            ip: random_ip(rng),
        })
        .collect();
    DnsResponse {
        txn_id: rng.gen(),
        is_response: true,
        query_name,
        answers,
    }
}

/// Any record the canonical encoder accepts: TCP, UDP, DNS responses, ICMP,
/// ARP, EAPOL and bare Ethernet.
pub fn random_record<R: Rng>(rng: &mut R) -> PacketRecord {
    let mut rec = PacketRecord {
        ts_sec: rng.gen(),
        ts_usec: rng.gen_range(0..1_000_000),
        src_mac: random_mac(rng),
        dst_mac: random_mac(rng),
        src_ip: None,
        dst_ip: None,
        src_port: None,
        dst_port: None,
        transport: Transport::Other,
        ethertype: ETHERTYPE_IPV4,
        frame_len: 0,
        dns: None,
    };
    let kind = rng.gen_range(0..7);
    if kind <= 3 {
        rec.src_ip = Some(random_ip(rng));
        rec.dst_ip = Some(random_ip(rng));
    }
    match kind {
        0 => {
            rec.transport = Transport::Tcp;
            rec.src_port = Some(rng.gen());
            rec.dst_port = Some(rng.gen());
        }
        1 => {
            rec.transport = Transport::Udp;
            rec.src_port = Some(rng.gen());
            // Port 53 with a zero payload reads back as "no DNS".
            rec.dst_port = Some(if rng.gen_bool(0.2) { 53 } else { rng.gen() });
        }
        2 => {
            rec.transport = Transport::Udp;
            rec.src_port = Some(53);
            rec.dst_port = Some(rng.gen());
            rec.dns = Some(random_dns(rng));
        }
        3 => {}
        4 => rec.ethertype = ETHERTYPE_ARP,
        5 => rec.ethertype = ETHERTYPE_EAPOL,
        _ => rec.ethertype = rng.gen_range(0x9000..=0xffff),
    }
    let min = rec.min_frame_len() as u32;
    rec.frame_len = min + rng.gen_range(0..200);
    rec
}

pub fn random_records<R: Rng>(rng: &mut R, n: usize) -> Vec<PacketRecord> {
    (0..n).map(|_| random_record(rng)).collect()
}
