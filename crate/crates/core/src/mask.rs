//! Run-length encoded binary masks.
//!
//! Text form: `"<height>x<width>:<c0> <c1> ..."`. Pixels are visited in row-major order and
//! the counts alternate between runs of zeros and runs of ones, starting with zeros (so a
//! mask whose first pixel is set begins with a `0` count). Counts sum to `height * width`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

impl RleMask {
    pub fn new(height: usize, width: usize, counts: Vec<u32>) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != (height * width) as u64 {
            return Err(Error::invalid(format!(
                "RLE counts sum to {total}, expected {height}x{width}={}",
                height * width
            )));
        }
        Ok(RleMask { height, width, counts }.canonical())
    }

    pub fn from_bits(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask has {} pixels, expected {height}x{width}",
                bits.len()
            )));
        }
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Ok(RleMask { height, width, counts }.canonical())
    }

    /// Drops zero-length interior runs so equal masks have equal encodings.
    fn canonical(mut self) -> Self {
        let mut out: Vec<u32> = Vec::with_capacity(self.counts.len());
        for (i, &c) in self.counts.iter().enumerate() {
            if i > 0 && c == 0 {
                continue;
            }
            // A run of the same parity as the last pushed one merges into it.
            if out.len() % 2 == i % 2 || out.is_empty() {
                out.push(c);
            } else if let Some(last) = out.last_mut() {
                *last += c;
            }
        }
        while out.len() > 1 && *out.last().unwrap() == 0 {
            out.pop();
        }
        self.counts = out;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn to_bits(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity(self.height * self.width);
        for (i, &c) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        bits
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    /// Intersection area computed by walking both run lists in step.
    pub fn intersection(&self, other: &RleMask) -> Result<u64> {
        self.check_same_size(other)?;
        let mut a = Runs::new(&self.counts);
        let mut b = Runs::new(&other.counts);
        let mut inter = 0u64;
        while let (Some((va, la)), Some((vb, lb))) = (a.peek(), b.peek()) {
            let step = la.min(lb);
            if va && vb {
                inter += step as u64;
            }
            a.advance(step);
            b.advance(step);
        }
        Ok(inter)
    }

    pub fn iou(&self, other: &RleMask) -> Result<f64> {
        let inter = self.intersection(other)?;
        let union = self.area() + other.area() - inter;
        Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }

    /// Nearest-neighbour resample to `height x width`, returned as 0/1 reals in row-major order.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Vec<f64> {
        let bits = self.to_bits();
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = ((r * self.height) / height.max(1)).min(self.height.saturating_sub(1));
            for c in 0..width {
                let sc = ((c * self.width) / width.max(1)).min(self.width.saturating_sub(1));
                let v = if self.height == 0 || self.width == 0 {
                    false
                } else {
                    bits[sr * self.width + sc]
                };
                out.push(if v { 1.0 } else { 0.0 });
            }
        }
        out
    }

    fn check_same_size(&self, other: &RleMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::invalid(format!(
                "mask size mismatch: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

struct Runs<'a> {
    counts: &'a [u32],
    idx: usize,
    left: u32,
}

impl<'a> Runs<'a> {
    fn new(counts: &'a [u32]) -> Self {
        let mut r = Runs { counts, idx: 0, left: counts.first().copied().unwrap_or(0) };
        r.skip_empty();
        r
    }

    fn skip_empty(&mut self) {
        while self.left == 0 && self.idx + 1 < self.counts.len() {
            self.idx += 1;
            self.left = self.counts[self.idx];
        }
    }

    fn peek(&self) -> Option<(bool, u32)> {
        (self.left > 0).then_some((self.idx % 2 == 1, self.left))
    }

    fn advance(&mut self, n: u32) {
        self.left -= n;
        self.skip_empty();
    }
}

impl fmt::Display for RleMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}:", self.height, self.width)?;
        for (i, c) in self.counts.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for RleMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed RLE mask `{s}`"));
        let (size, counts) = s.split_once(':').ok_or_else(bad)?;
        let (h, w) = size.split_once('x').ok_or_else(bad)?;
        let height = h.trim().parse().map_err(|_| bad())?;
        let width = w.trim().parse().map_err(|_| bad())?;
        let counts = counts
            .split_whitespace()
            .map(|c| c.parse::<u32>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        RleMask::new(height, width, counts)
    }
}

impl Serialize for RleMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RleMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
