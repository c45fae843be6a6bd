use chrono::{DateTime, Utc};

const CROCKFORD: &[u8; 32] = b"0123456789ABCDEFGHJKMNPQRSTVWXYZ";

/// ULID-shaped id: 48-bit millisecond timestamp followed by 80 bits taken
/// from `entropy`. Lexicographic order matches creation time.
pub fn run_id(at: DateTime<Utc>, entropy: &[u8]) -> String {
    let ms = at.timestamp_millis().max(0) as u128 & ((1u128 << 48) - 1);
    let mut tail = [0u8; 10];
    for (dst, src) in tail.iter_mut().zip(entropy) {
        *dst = *src;
    }
    let mut value = ms << 80;
    for (i, b) in tail.iter().enumerate() {
        value |= (*b as u128) << (8 * (9 - i));
    }
    let mut out = [0u8; 26];
    for (i, slot) in out.iter_mut().enumerate() {
        let shift = 5 * (25 - i);
        *slot = CROCKFORD[((value >> shift) & 0x1f) as usize];
    }
    String::from_utf8(out.to_vec()).expect("ascii")
}

pub fn is_valid_run_id(id: &str) -> bool {
    id.len() == 26 && id.bytes().all(|b| CROCKFORD.contains(&b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn sortable_by_time() {
        let a = run_id(Utc.timestamp_millis_opt(1_000).unwrap(), &[0xff; 10]);
        let b = run_id(Utc.timestamp_millis_opt(2_000).unwrap(), &[0x00; 10]);
        assert!(a < b);
        assert_eq!(a.len(), 26);
        assert!(is_valid_run_id(&a));
        assert!(!is_valid_run_id("../etc"));
    }
}
