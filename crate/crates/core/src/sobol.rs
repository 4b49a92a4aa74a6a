//! Unscrambled Sobol sequence in Gray-code order.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAX_DIMENSION: usize = 21;

const BITS: usize = 32;

/// Primitive polynomial data `(degree s, coefficients a, initial m_1..m_s)`
/// for dimensions 2 and up, from the new-joe-kuo-6.21201 table.
const DIRECTIONS: [(u32, u32, &[u32]); MAX_DIMENSION - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
];

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m) = DIRECTIONS[dim - 1];
    let s = s as usize;
    for k in 0..s.min(BITS) {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let mut x = v[k - s] ^ (v[k - s] >> s);
        for j in 1..s {
            if (a >> (s - 1 - j)) & 1 == 1 {
                x ^= v[k - j];
            }
        }
        v[k] = x;
    }
    v
}

/// Incremental generator; `next` yields points starting at index 0 (the
/// origin).
#[derive(Debug, Clone)]
pub struct SobolSequence {
    v: Vec<[u32; BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl SobolSequence {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIMENSION {
            return Err(Error::UnsupportedDimension(dim));
        }
        Ok(SobolSequence {
            v: (0..dim).map(direction_numbers).collect(),
            state: vec![0; dim],
            index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// Index of the point the next call to `next_point` returns.
    pub fn position(&self) -> u64 {
        self.index
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let scale = 1.0 / (1u64 << BITS) as f64;
        let out = self.state.iter().map(|&s| s as f64 * scale).collect();
        let c = (!self.index).trailing_zeros() as usize;
        for (s, v) in self.state.iter_mut().zip(&self.v) {
            *s ^= v[c.min(BITS - 1)];
        }
        self.index += 1;
        out
    }

    pub fn skip(&mut self, n: u64) {
        for _ in 0..n {
            self.next_point();
        }
    }
}

/// `n` points of the `d`-dimensional sequence after dropping the first
/// `skip` (skip = 1 drops the origin).
pub fn sobol(n: usize, d: usize, skip: usize) -> Result<DMatrix<f64>> {
    let mut seq = SobolSequence::new(d)?;
    seq.skip(skip as u64);
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let p = seq.next_point();
        for (j, v) in p.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}
