use crate::error::StoreError;

pub fn packed_len(channels: usize) -> usize {
    channels.div_ceil(8)
}

/// Bit `c` goes to bit `c % 8` of byte `c / 8`; unused high bits of the last byte stay zero.
pub fn pack_switches(gate: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(gate.len())];
    for (c, _) in gate.iter().enumerate().filter(|(_, &on)| on) {
        out[c / 8] |= 1 << (c % 8);
    }
    out
}

pub fn unpack_switches(bytes: &[u8], channels: usize) -> Result<Vec<bool>, StoreError> {
    let expected = packed_len(channels);
    if bytes.len() != expected {
        return Err(StoreError::SwitchLength { channels, expected, found: bytes.len() });
    }
    let used = channels % 8;
    if used != 0 {
        let last = bytes[expected - 1];
        if last >> used != 0 {
            return Err(StoreError::Padding(last));
        }
    }
    Ok((0..channels).map(|c| bytes[c / 8] >> (c % 8) & 1 == 1).collect())
}
