//! Hostname similarity used for partial endpoint matching.
//!
//! Digits are masked to `#` before comparison, so rotating shard numbers and
//! embedded IP octets do not count against two names. The score is the
//! longest-common-subsequence ratio `2 * lcs / (|a| + |b|)`.

use std::net::Ipv4Addr;

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.80;

pub fn is_ip_literal(name: &str) -> bool {
    name.parse::<Ipv4Addr>().is_ok()
}

/// Last two labels of a hostname. IP literals and single labels are
/// returned whole.
pub fn registrable_domain(name: &str) -> &str {
    let name = name.trim_end_matches('.');
    if is_ip_literal(name) {
        return name;
    }
    match name.rmatch_indices('.').nth(1) {
        Some((i, _)) => &name[i + 1..],
        None => name,
    }
}

pub fn mask_digits(s: &str) -> Vec<char> {
    s.chars()
        .map(|c| if c.is_ascii_digit() { '#' } else { c })
        .collect()
}

/// Length of the longest common subsequence, two-row dynamic program.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Similarity in `[0, 1]` on digit-masked strings; 1.0 exactly when the
/// masked strings are equal.
pub fn name_similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (mask_digits(a), mask_digits(b));
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * lcs_len(&a, &b) as f64 / total as f64
}
