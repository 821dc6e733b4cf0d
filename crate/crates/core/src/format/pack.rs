use crate::error::{Error, Result};
use crate::lognum::{LogCode, QuantizerConfig};

/// Bytes holding `n` codes of `bitwidth` bits.
pub fn packed_len(n: usize, bitwidth: u8) -> usize {
    (n * bitwidth as usize).div_ceil(8)
}

/// Packs codes at `cfg.bitwidth` bits each: the sign bit (signed configs
/// only) followed by the magnitude, most significant bit first, filling each
/// byte from its most significant bit. The tail is zero padded.
pub fn pack_codes(codes: &[LogCode], cfg: &QuantizerConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let bw = cfg.bitwidth as u32;
    let mag_bits = cfg.mag_bits();
    let mut out = vec![0u8; packed_len(codes.len(), cfg.bitwidth)];
    let mut bit = 0usize;
    for (i, c) in codes.iter().enumerate() {
        if c.code() > cfg.max_code() {
            return Err(Error::overflow(format!(
                "code {} at index {i} exceeds {} magnitude bits",
                c.code(),
                mag_bits
            )));
        }
        if c.is_negative() && !cfg.signed {
            return Err(Error::Domain(format!("negative code at index {i} for an unsigned quantizer")));
        }
        let word = ((c.is_negative() as u32) << mag_bits) | c.code();
        for b in (0..bw).rev() {
            if (word >> b) & 1 == 1 {
                out[bit / 8] |= 0x80 >> (bit % 8);
            }
            bit += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`]. Rejects a wrong length, non-zero padding and
/// a negative zero.
pub fn unpack_codes(bytes: &[u8], n: usize, cfg: &QuantizerConfig) -> Result<Vec<LogCode>> {
    cfg.validate()?;
    let expect = packed_len(n, cfg.bitwidth);
    if bytes.len() != expect {
        return Err(Error::LengthMismatch {
            left: expect,
            right: bytes.len(),
        });
    }
    let bw = cfg.bitwidth as usize;
    let mag_bits = cfg.mag_bits();
    let get = |bit: usize| (bytes[bit / 8] >> (7 - bit % 8)) & 1;
    let mut codes = Vec::with_capacity(n);
    for i in 0..n {
        let mut word = 0u32;
        for b in 0..bw {
            word = (word << 1) | get(i * bw + b) as u32;
        }
        let code = word & cfg.max_code();
        let negative = cfg.signed && (word >> mag_bits) & 1 == 1;
        if negative && code == 0 {
            return Err(Error::Domain(format!("negative zero code at index {i}")));
        }
        codes.push(LogCode::new(negative, code));
    }
    if (n * bw..bytes.len() * 8).any(|b| get(b) == 1) {
        return Err(Error::Domain("non-zero padding bits".into()));
    }
    Ok(codes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_nibbles_fill_four_bytes() {
        let cfg = QuantizerConfig::log(4, 0);
        let codes: Vec<LogCode> = (0..8).map(|c| LogCode::positive(c * 2 % 16)).collect();
        let bytes = pack_codes(&codes, &cfg).unwrap();
        assert_eq!(bytes, vec![0x02, 0x46, 0x8a, 0xce]);
        assert_eq!(unpack_codes(&bytes, 8, &cfg).unwrap(), codes);
    }

    #[test]
    fn sign_bit_leads() {
        let cfg = QuantizerConfig::log(3, 0).signed();
        let codes = [LogCode::new(true, 1), LogCode::new(false, 3), LogCode::new(true, 2)];
        // 101 011 110 -> 1010 1111 0(000 0000)
        let bytes = pack_codes(&codes, &cfg).unwrap();
        assert_eq!(bytes, vec![0b1010_1111, 0b0000_0000]);
        assert_eq!(unpack_codes(&bytes, 3, &cfg).unwrap(), codes);
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        let cfg = QuantizerConfig::log(3, 0).signed();
        assert!(pack_codes(&[LogCode::positive(4)], &cfg).is_err());
        assert!(pack_codes(&[LogCode::new(true, 1)], &QuantizerConfig::log(3, 0)).is_err());
        assert!(unpack_codes(&[0b1000_0000], 1, &cfg).is_err());
        assert!(unpack_codes(&[0b0010_0001], 1, &cfg).is_err());
        assert!(unpack_codes(&[0, 0], 1, &cfg).is_err());
    }
}
