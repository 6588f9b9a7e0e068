//! Binary raster masks and their run-length encoding.
//!
//! RLE convention: alternating run lengths starting with the count of 0-bits,
//! row-major; runs must sum to width·height. An all-zero 32×32 mask encodes
//! as `[1024]`, an all-ones one as `[0, 1024]`.

use crate::{LensError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(LensError::Shape {
                context: "Mask::from_bits",
                expected: format!("{} bits", width * height),
                got: format!("{}", bits.len()),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box [x1, y1, x2, y2] in pixel-corner convention
    /// (x2/y2 exclusive), or None for an empty mask.
    pub fn tight_bbox(&self) -> Option<[i64; 4]> {
        let (mut x1, mut y1) = (usize::MAX, usize::MAX);
        let (mut x2, mut y2) = (0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        any.then_some([x1 as i64, y1 as i64, x2 as i64, y2 as i64])
    }

    /// Alternating run lengths, starting with the zero run.
    pub fn encode_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut count: u32 = 0;
        for &b in &self.bits {
            if b == current {
                count += 1;
            } else {
                runs.push(count);
                current = b;
                count = 1;
            }
        }
        runs.push(count);
        runs
    }

    pub fn decode_rle(width: usize, height: usize, runs: &[u32]) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (width * height) as u64 {
            return Err(LensError::Dataset {
                line: 0,
                msg: format!(
                    "RLE runs sum to {total}, expected {} for {width}x{height}",
                    width * height
                ),
            });
        }
        if runs.iter().skip(1).any(|&r| r == 0) {
            return Err(LensError::Dataset {
                line: 0,
                msg: "zero-length run after the first".into(),
            });
        }
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat(value).take(r as usize));
            value = !value;
        }
        Mask::from_bits(width, height, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_mask_is_single_run() {
        let m = Mask::new(32, 32);
        assert_eq!(m.encode_rle(), vec![1024]);
    }

    #[test]
    fn all_ones_mask_starts_with_zero_run() {
        let m = Mask::from_bits(2, 2, vec![true; 4]).unwrap();
        assert_eq!(m.encode_rle(), vec![0, 4]);
    }

    #[test]
    fn mismatched_run_total_is_error() {
        assert!(Mask::decode_rle(4, 4, &[10]).is_err());
        assert!(Mask::decode_rle(4, 4, &[8, 0, 8]).is_err());
    }

    #[test]
    fn bbox_is_tight() {
        let mut m = Mask::new(8, 8);
        m.set(2, 3, true);
        m.set(5, 6, true);
        assert_eq!(m.tight_bbox(), Some([2, 3, 6, 7]));
        assert_eq!(Mask::new(4, 4).tight_bbox(), None);
    }

    proptest! {
        #[test]
        fn rle_roundtrip(bits in proptest::collection::vec(any::<bool>(), 64), w in 1usize..=8) {
            if 64 % w == 0 {
                let h = 64 / w;
                let m = Mask::from_bits(w, h, bits).unwrap();
                let decoded = Mask::decode_rle(w, h, &m.encode_rle()).unwrap();
                prop_assert_eq!(m, decoded);
            }
        }
    }
}
