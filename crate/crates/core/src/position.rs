//! Position representations: the 6-dimensional "light" encoding, the
//! classic sinusoidal table, and their relative-offset counterparts.
//!
//! The light encoding stacks three cos/sin pairs with periods `T` (the
//! longest sequence), `M1` (word scale) and `M2` (phone scale):
//!
//! ```text
//! P(0,t) = cos(2πt/T)   P(1,t) = sin(2πt/T)
//! P(2,t) = cos(2πt/M1)  P(3,t) = sin(2πt/M1)
//! P(4,t) = cos(2πt/M2)  P(5,t) = sin(2πt/M2)
//! ```
//!
//! Relative embeddings evaluate the same formulas at `t = i − j`, negative
//! offsets included, so the sine rows tell left context from right.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows in the light position encoding.
pub const LIGHT_DIM: usize = 6;

/// Two columns closer than this (L2) count as the same position.
const DISTINCT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionConfig {
    /// Longest (down-sampled) sequence length `T`.
    pub max_len: usize,
    /// Word-resolution period `M1`.
    #[serde(default = "default_m1")]
    pub m1: usize,
    /// Phone-resolution period `M2`.
    #[serde(default = "default_m2")]
    pub m2: usize,
}

fn default_m1() -> usize {
    4
}

fn default_m2() -> usize {
    2
}

impl PositionConfig {
    pub fn new(max_len: usize) -> Self {
        PositionConfig { max_len, m1: default_m1(), m2: default_m2() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m2 >= 1 && self.m2 < self.m1 && self.m1 < self.max_len) {
            return Err(Error::param(format!(
                "position periods must satisfy 1 <= M2 < M1 < T, got M2={} M1={} T={}",
                self.m2, self.m1, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    Light,
    Sinusoidal,
}

/// Raised when a sequence is longer than `T` and positions may repeat.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AliasingWarning {
    pub length: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionMatrix {
    /// `d_p × L`, one column per time step.
    pub values: Tensor,
    pub kind: PositionKind,
    pub aliasing: Option<AliasingWarning>,
}

impl PositionMatrix {
    pub fn dim(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Light encoding evaluated at a (possibly negative or fractional) time.
pub fn light_at(t: f64, config: &PositionConfig) -> [f64; LIGHT_DIM] {
    let (big, m1, m2) = (config.max_len as f64, config.m1 as f64, config.m2 as f64);
    [
        (TAU * t / big).cos(),
        (TAU * t / big).sin(),
        (TAU * t / m1).cos(),
        (TAU * t / m1).sin(),
        (TAU * t / m2).cos(),
        (TAU * t / m2).sin(),
    ]
}

/// `6 × length` light position matrix for `t = 0..length`.
///
/// Lengths beyond `T` are allowed; the result then carries an
/// [`AliasingWarning`] and a log line instead of failing.
pub fn light_position(length: usize, config: &PositionConfig) -> Result<PositionMatrix> {
    if length == 0 {
        return Err(Error::param("position length must be at least 1"));
    }
    config.validate()?;
    let aliasing = (length > config.max_len).then(|| {
        log::warn!("sequence length {length} exceeds position period T={}; positions alias", config.max_len);
        AliasingWarning { length, max_len: config.max_len }
    });
    let mut data = vec![0.0; LIGHT_DIM * length];
    for t in 0..length {
        for (r, v) in light_at(t as f64, config).into_iter().enumerate() {
            data[r * length + t] = v;
        }
    }
    Ok(PositionMatrix { values: Tensor::from_parts(vec![LIGHT_DIM, length], data), kind: PositionKind::Light, aliasing })
}

/// Sinusoidal embedding column: `PE(t,2i) = sin(t / T^(2i/d))`, `PE(t,2i+1) = cos(·)`.
pub fn sinusoidal_at(t: f64, dim: usize, period: f64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = t / period.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// `d_x × length` sinusoidal matrix with base `period` (the sequence-length scale `T`).
pub fn sinusoidal_position(length: usize, dim: usize, period: usize) -> Result<PositionMatrix> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::param(format!("sinusoidal dimension must be even and positive, got {dim}")));
    }
    if length == 0 || period == 0 {
        return Err(Error::param("sinusoidal length and period must be positive"));
    }
    let mut data = vec![0.0; dim * length];
    for t in 0..length {
        for (r, v) in sinusoidal_at(t as f64, dim, period as f64).into_iter().enumerate() {
            data[r * length + t] = v;
        }
    }
    Ok(PositionMatrix {
        values: Tensor::from_parts(vec![dim, length], data),
        kind: PositionKind::Sinusoidal,
        aliasing: None,
    })
}

/// Relative light embedding `p_δ` for query-minus-key offset `δ`.
pub fn relative_position(delta: i64, config: &PositionConfig) -> [f64; LIGHT_DIM] {
    light_at(delta as f64, config)
}

/// Contiguous block of query-minus-key offsets `min..=max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OffsetRange {
    pub min: i64,
    pub max: i64,
}

impl OffsetRange {
    /// Offsets reachable in a sequence of `len` steps, or the fixed offsets
    /// of a centered window of odd size (independent of `len`).
    pub fn for_sequence(len: usize, window: Option<usize>) -> Self {
        let r = window.map_or(len as i64 - 1, |w| (w as i64 - 1) / 2);
        OffsetRange { min: -r, max: r }
    }

    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.max < self.min
    }

    pub fn index(&self, delta: i64) -> Option<usize> {
        (self.min..=self.max).contains(&delta).then(|| (delta - self.min) as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = i64> {
        self.min..=self.max
    }
}

/// Relative embeddings stacked as `d_p × n_offsets` columns.
pub fn relative_table(kind: PositionKind, dim: usize, offsets: OffsetRange, config: &PositionConfig) -> Tensor {
    let n = offsets.len();
    let mut data = vec![0.0; dim * n];
    for (c, delta) in offsets.iter().enumerate() {
        let col = match kind {
            PositionKind::Light => relative_position(delta, config).to_vec(),
            PositionKind::Sinusoidal => sinusoidal_at(delta as f64, dim, config.max_len as f64),
        };
        for (r, v) in col.into_iter().enumerate() {
            data[r * n + c] = v;
        }
    }
    Tensor::from_parts(vec![dim, n], data)
}

/// True iff the light vectors for `t ∈ [0, length)` are pairwise distinct.
pub fn check_aliasing(config: &PositionConfig, length: usize) -> bool {
    let cols: Vec<[f64; LIGHT_DIM]> = (0..length).map(|t| light_at(t as f64, config)).collect();
    for a in 0..cols.len() {
        for b in a + 1..cols.len() {
            let d2: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| (x - y).powi(2)).sum();
            if d2.sqrt() <= DISTINCT_TOL {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(t: usize) -> PositionConfig {
        PositionConfig::new(t)
    }

    #[test]
    fn origin_column() {
        let p = light_position(3, &cfg(100)).unwrap();
        assert_eq!(p.values.column(0), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(p.aliasing.is_none());
    }

    #[test]
    fn full_m1_period() {
        let p = light_position(5, &cfg(100)).unwrap();
        assert!((p.values.at(2, 4) - 1.0).abs() < 1e-12);
        assert!(p.values.at(3, 4).abs() < 1e-12);
    }

    #[test]
    fn long_sequence_warns_but_succeeds() {
        let p = light_position(30, &cfg(20)).unwrap();
        assert_eq!(p.aliasing, Some(AliasingWarning { length: 30, max_len: 20 }));
        assert_eq!(p.len(), 30);
    }

    #[test]
    fn invalid_periods_rejected() {
        let bad = PositionConfig { max_len: 10, m1: 2, m2: 4 };
        assert!(light_position(3, &bad).is_err());
        assert!(light_position(0, &cfg(10)).is_err());
    }

    #[test]
    fn sinusoidal_origin_and_first_row() {
        let p = sinusoidal_position(4, 8, 10_000).unwrap();
        for r in 0..8 {
            let expect = if r % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(p.values.at(r, 0), expect);
        }
        assert!((p.values.at(0, 1) - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!(matches!(sinusoidal_position(4, 7, 100), Err(Error::Parameter(_))));
    }

    #[test]
    fn relative_parity_and_zero() {
        let c = cfg(50);
        assert_eq!(relative_position(0, &c), [1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let (pos, neg) = (relative_position(3, &c), relative_position(-3, &c));
        for r in 0..6 {
            if r % 2 == 0 {
                assert_eq!(pos[r], neg[r]);
            } else {
                assert_eq!(pos[r], -neg[r]);
            }
        }
        let two = relative_position(2, &c);
        assert!((two[4] - 1.0).abs() < 1e-12 && two[5].abs() < 1e-12);
    }

    #[test]
    fn offset_ranges() {
        assert_eq!(OffsetRange::for_sequence(10, Some(5)), OffsetRange { min: -2, max: 2 });
        assert_eq!(OffsetRange::for_sequence(2, Some(5)), OffsetRange { min: -2, max: 2 });
        assert_eq!(OffsetRange::for_sequence(4, None).len(), 7);
        let r = OffsetRange { min: -2, max: 2 };
        assert_eq!(r.index(-2), Some(0));
        assert_eq!(r.index(3), None);
    }

    #[test]
    fn single_point_never_aliases() {
        assert!(check_aliasing(&cfg(10), 1));
    }
}
