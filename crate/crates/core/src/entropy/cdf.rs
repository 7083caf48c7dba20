//! Integer cumulative frequency tables.

use crate::error::{Error, Result};

pub const DEFAULT_PRECISION: u32 = 16;

/// Quantized distribution over the contiguous symbols
/// `offset ..= offset + support - 1`. `cum[0] = 0`, `cum[support] = 2^precision`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    offset: i64,
    precision: u32,
    cum: Vec<u32>,
}

impl CdfTable {
    /// Builds a table from (not necessarily normalized) probabilities.
    ///
    /// Each probability is floored at `2^-precision`. Every symbol receives
    /// one guaranteed unit, the rest of the mass is split proportionally and
    /// leftover units go to the most probable symbols first, so a larger
    /// probability never ends up with a smaller frequency.
    pub fn from_pmf(pmf: &[f64], offset: i64, precision: u32) -> Result<CdfTable> {
        if !(1..=16).contains(&precision) {
            return Err(Error::InvalidArgument(format!("precision {precision} outside 1..=16")));
        }
        let total = 1u64 << precision;
        let s = pmf.len() as u64;
        if s == 0 || s > total {
            return Err(Error::InvalidArgument(format!("support of {s} symbols does not fit precision {precision}")));
        }
        let floor = 1.0 / total as f64;
        let p: Vec<f64> = pmf.iter().map(|&x| if x.is_finite() && x > floor { x } else { floor }).collect();
        let mass: f64 = p.iter().sum();
        let spare = (total - s) as f64;
        let mut freq: Vec<u64> = p.iter().map(|&x| 1 + ((x / mass) * spare).floor().min(spare) as u64).collect();
        let used: u64 = freq.iter().sum();
        if used > total {
            return Err(Error::InvalidArgument("frequency overflow while building table".into()));
        }
        let mut left = total - used;
        if left > 0 {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            let mut i = 0;
            while left > 0 {
                freq[order[i % order.len()]] += 1;
                left -= 1;
                i += 1;
            }
        }
        let mut cum = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for f in freq {
            acc += f;
            cum.push(acc as u32);
        }
        Ok(CdfTable { offset, precision, cum })
    }

    /// Table with equal frequencies (up to rounding) over `support` symbols.
    pub fn uniform(support: usize, offset: i64, precision: u32) -> Result<CdfTable> {
        Self::from_pmf(&vec![1.0; support], offset, precision)
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn support(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }

    pub fn max_symbol(&self) -> i64 {
        self.offset + self.support() as i64 - 1
    }

    pub fn freq(&self, symbol: i64) -> Option<u32> {
        self.interval(symbol).map(|(_, f)| f)
    }

    /// `(start, freq)` of `symbol`, or `None` outside the support.
    pub fn interval(&self, symbol: i64) -> Option<(u32, u32)> {
        let i = symbol.checked_sub(self.offset)?;
        if i < 0 || i as usize >= self.support() {
            return None;
        }
        let i = i as usize;
        Some((self.cum[i], self.cum[i + 1] - self.cum[i]))
    }

    /// Symbol whose interval contains `target` (`target < 2^precision`).
    pub fn lookup(&self, target: u32) -> (i64, u32, u32) {
        let i = self.cum.partition_point(|&c| c <= target) - 1;
        (self.offset + i as i64, self.cum[i], self.cum[i + 1] - self.cum[i])
    }

    /// Ideal code length of `symbol` under the quantized table, in bits.
    pub fn bits(&self, symbol: i64) -> Option<f64> {
        self.freq(symbol).map(|f| self.precision as f64 - (f as f64).log2())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_and_floors() {
        let t = CdfTable::from_pmf(&[0.5, 0.0, 0.25, 0.25], -1, 16).unwrap();
        assert_eq!(*t.cum().last().unwrap(), 1 << 16);
        assert!(t.cum().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(t.freq(0), Some(1));
        assert_eq!(t.interval(3), None);
        assert_eq!(t.interval(-2), None);
        assert_eq!(t.lookup(0).0, -1);
        assert_eq!(t.lookup((1 << 16) - 1).0, 2);
    }

    #[test]
    fn full_support_is_all_ones() {
        let t = CdfTable::uniform(256, 0, 8).unwrap();
        assert!((0..256).all(|s| t.freq(s) == Some(1)));
        assert!(CdfTable::uniform(257, 0, 8).is_err());
        assert!(CdfTable::uniform(0, 0, 8).is_err());
    }
}
