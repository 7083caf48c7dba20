//! Byte-oriented range coder with carry propagation.
//!
//! The coder keeps a 64-bit interval and renormalizes a byte at a time
//! whenever the range drops below 2^56. Every coded stream ends with a
//! 16-bit check value over the symbols so that decoding with the wrong
//! tables is reported instead of silently producing garbage.

use super::cdf::CdfTable;
use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;
const CHECK_BYTES: usize = 2;

fn symbol_check(symbols: &[i32]) -> u16 {
    let mut h = crc32fast::Hasher::new();
    h.update(&(symbols.len() as u32).to_le_bytes());
    for s in symbols {
        h.update(&s.to_le_bytes());
    }
    (h.finalize() & 0xffff) as u16
}

struct Encoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Encoder { low: 0, range: u64::MAX, out: Vec::new() }
    }

    fn propagate_carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            let (v, overflow) = b.overflowing_add(1);
            *b = v;
            if !overflow {
                return;
            }
        }
        unreachable!("carry out of the first byte");
    }

    fn add_low(&mut self, x: u64) {
        let (v, carry) = self.low.overflowing_add(x);
        self.low = v;
        if carry {
            self.propagate_carry();
        }
    }

    fn encode(&mut self, start: u32, freq: u32, precision: u32) {
        let r = self.range >> precision;
        self.add_low(r * start as u64);
        self.range = r * freq as u64;
        while self.range < TOP {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Emits just enough bytes of a value inside the final interval that
    /// the remaining (implicit, zero) bytes keep it there.
    fn finish(mut self) -> Vec<u8> {
        let k = 63 - self.range.leading_zeros();
        let step = 1u128 << k;
        let v = (self.low as u128).div_ceil(step) * step;
        if v >= 1u128 << 64 {
            self.propagate_carry();
        }
        let v = (v as u64).to_be_bytes();
        let needed = (64 - k as usize).div_ceil(8);
        self.out.extend_from_slice(&v[..needed]);
        self.out
    }
}

/// Encodes `symbols[i]` with `tables[i]`. An empty input yields an empty output.
pub fn ac_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Shape(format!("{} symbols but {} tables", symbols.len(), tables.len())));
    }
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let mut enc = Encoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        let (start, freq) = t.interval(s as i64).ok_or(Error::ZeroProbability { symbol: s as i64 })?;
        enc.encode(start, freq, t.precision());
    }
    let mut out = enc.finish();
    out.extend_from_slice(&symbol_check(symbols).to_le_bytes());
    Ok(out)
}

/// Decodes `tables.len()` symbols.
pub fn ac_decode(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<i32>> {
    let n = tables.len();
    if n == 0 {
        return if bytes.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::CorruptStream("bytes present for an empty symbol list".into()))
        };
    }
    if bytes.len() < CHECK_BYTES {
        return Err(Error::Truncated("range-coded segment shorter than its check value".into()));
    }
    let (body, check) = bytes.split_at(bytes.len() - CHECK_BYTES);
    let stored = u16::from_le_bytes([check[0], check[1]]);
    let mut pos = 0usize;
    let mut next = || {
        let b = body.get(pos).copied().unwrap_or(0);
        pos += 1;
        b as u64
    };
    let mut value = 0u64;
    for _ in 0..8 {
        value = (value << 8) | next();
    }
    let mut range = u64::MAX;
    let mut out = Vec::with_capacity(n);
    for t in tables {
        let p = t.precision();
        let r = range >> p;
        let target = value / r;
        if target >= 1 << p {
            return Err(Error::CorruptStream("decoder left the coding interval".into()));
        }
        let (sym, start, freq) = t.lookup(target as u32);
        value -= r * start as u64;
        range = r * freq as u64;
        if value >= range {
            return Err(Error::CorruptStream("decoder left the coding interval".into()));
        }
        while range < TOP {
            value = (value << 8) | next();
            range <<= 8;
        }
        out.push(sym as i32);
    }
    let computed = symbol_check(&out);
    if computed != stored {
        return Err(Error::CorruptStream(format!(
            "symbol check {computed:#06x} does not match stored {stored:#06x} (mismatched probability tables?)"
        )));
    }
    Ok(out)
}
