//! Sparse attention masks derived from code structure.
//!
//! The extended parity-check matrix H̄ = [Hᵀ; I_{n−k}] has shape (2n−k)×(n−k)
//! and satisfies [bin(sign(y)), s(y)]·H̄ = 0 over GF(2) for every received y.
//! Its support defines an additive attention mask: 0 where H̄ is one, −∞
//! elsewhere. Row r of the mask belongs to input position r (reliability
//! positions first, syndrome positions after the reliability padding), and
//! column c to memory slot c.

use crate::error::{Error, Result};
use crate::gf2::{BinaryMatrix, CodeRegistry, CodeSpec};

/// Additive-mask sentinel for −∞: large enough that exp(x + MASKED) underflows
/// to exactly 0.0 for any finite activation x, while staying finite so mask
/// arithmetic never produces NaN.
pub const MASKED: f64 = -1.0e30;

/// H̄ = [Hᵀ; I_{n−k}] together with the code dimensions that shaped it.
#[derive(Debug, Clone)]
pub struct ExtendedParityCheck {
    pub matrix: BinaryMatrix,
    pub n: usize,
    pub s: usize,
}

/// Build the extended parity-check matrix for a code's H ((n−k)×n).
pub fn build_extended(h: &BinaryMatrix) -> ExtendedParityCheck {
    let s = h.rows();
    let n = h.cols();
    let mut m = BinaryMatrix::zeros(n + s, s);
    for r in 0..n {
        for c in 0..s {
            m.set(r, c, h.get(c, r));
        }
    }
    for c in 0..s {
        m.set(n + c, c, 1);
    }
    ExtendedParityCheck { matrix: m, n, s }
}

/// Fraction of ones in H̄: ones(H̄) / ((2n−k)(n−k)).
pub fn density(hbar: &ExtendedParityCheck) -> f64 {
    let cells = hbar.matrix.rows() * hbar.matrix.cols();
    hbar.matrix.ones() as f64 / cells as f64
}

/// {0, −∞} additive attention mask with an explicit active (row, col) list.
#[derive(Debug, Clone)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    active: Vec<(usize, usize)>,
    /// Rows [0, codeword_rows) carry the Hᵀ block.
    codeword_rows: usize,
    /// Rows [syndrome_start, syndrome_start + syndrome_rows) carry the identity block.
    syndrome_start: usize,
    syndrome_rows: usize,
}

impl MaskMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Unmasked (row, col) pairs, sorted row-major.
    pub fn active(&self) -> &[(usize, usize)] {
        &self.active
    }

    pub fn is_active(&self, r: usize, c: usize) -> bool {
        self.value(r, c) == 0.0
    }

    /// Recover the binary support (1 where unmasked).
    pub fn to_binary(&self) -> BinaryMatrix {
        let mut m = BinaryMatrix::zeros(self.rows, self.cols);
        for &(r, c) in &self.active {
            m.set(r, c, 1);
        }
        m
    }
}

/// Mask for an unpadded code: zeros exactly on the support of H̄.
pub fn build_mask(hbar: &ExtendedParityCheck) -> MaskMatrix {
    let rows = hbar.matrix.rows();
    let cols = hbar.matrix.cols();
    let mut values = vec![MASKED; rows * cols];
    let mut active = Vec::with_capacity(hbar.matrix.ones());
    for r in 0..rows {
        for c in 0..cols {
            if hbar.matrix.get(r, c) == 1 {
                values[r * cols + c] = 0.0;
                active.push((r, c));
            }
        }
    }
    MaskMatrix {
        rows,
        cols,
        values,
        active,
        codeword_rows: hbar.n,
        syndrome_start: hbar.n,
        syndrome_rows: hbar.s,
    }
}

/// Pad a code mask to the registry-wide shape (N_max + S_max) × S_max.
///
/// The Hᵀ block keeps rows [0, n); the identity block moves to rows
/// [N_max, N_max + s) so that mask rows line up with the standardized input
/// layout (reliability padding sits between the two blocks). All added rows
/// and columns are fully masked, so the active count is unchanged.
pub fn pad_mask(mask: &MaskMatrix, n_max: usize, s_max: usize) -> Result<MaskMatrix> {
    let (n, s) = (mask.codeword_rows, mask.syndrome_rows);
    if n > n_max || s > s_max || mask.cols > s_max {
        return Err(Error::config(format!(
            "pad_mask: target {}x{} smaller than source blocks ({} + {})",
            n_max + s_max,
            s_max,
            n,
            s
        )));
    }
    let rows = n_max + s_max;
    let cols = s_max;
    let mut values = vec![MASKED; rows * cols];
    let mut active = Vec::with_capacity(mask.active.len());
    for &(r, c) in &mask.active {
        let nr = if r < mask.syndrome_start {
            r
        } else {
            n_max + (r - mask.syndrome_start)
        };
        values[nr * cols + c] = 0.0;
        active.push((nr, c));
    }
    active.sort_unstable();
    Ok(MaskMatrix {
        rows,
        cols,
        values,
        active,
        codeword_rows: n,
        syndrome_start: n_max,
        syndrome_rows: s,
    })
}

/// Registry-shaped mask for one code.
pub fn code_mask(registry: &CodeRegistry, code: &CodeSpec) -> Result<MaskMatrix> {
    let hbar = build_extended(&code.h);
    pad_mask(&build_mask(&hbar), registry.n_max(), registry.s_max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::hard_bits;
    use crate::gf2::{hamming74, ldpc49_24, repetition21, rm32_16, toy_registry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hamming_extended_rows_bit_exact() {
        let code = hamming74();
        let hbar = build_extended(&code.h);
        let expect: [[u8; 3]; 10] = [
            [1, 1, 0],
            [1, 0, 1],
            [1, 1, 1],
            [0, 1, 1],
            [1, 0, 0],
            [0, 1, 0],
            [0, 0, 1],
            [1, 0, 0],
            [0, 1, 0],
            [0, 0, 1],
        ];
        assert_eq!((hbar.matrix.rows(), hbar.matrix.cols()), (10, 3));
        for (r, row) in expect.iter().enumerate() {
            assert_eq!(hbar.matrix.row(r), row);
        }
    }

    #[test]
    fn repetition_extended_is_all_ones_column() {
        let code = repetition21();
        let hbar = build_extended(&code.h);
        assert_eq!((hbar.matrix.rows(), hbar.matrix.cols()), (3, 1));
        assert_eq!(hbar.matrix.ones(), 3);
        assert_eq!(density(&hbar), 1.0);
    }

    #[test]
    fn hamming_density_is_half() {
        let hbar = build_extended(&hamming74().h);
        assert_eq!(hbar.matrix.ones(), 15);
        assert_eq!(density(&hbar), 0.5);
    }

    #[test]
    fn density_matches_symbolic_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let s = rng.random_range(1..6);
            let n = rng.random_range(s + 1..12);
            let mut h = BinaryMatrix::zeros(s, n);
            for i in 0..s {
                for j in 0..n {
                    h.set(i, j, rng.random_range(0..=1));
                }
            }
            let hbar = build_extended(&h);
            let expect = (h.ones() + s) as f64 / ((n + s) * s) as f64;
            assert!((density(&hbar) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn orthogonality_identity_all_codes() {
        // [bin(sign(y)), s(y)] · H̄ = 0 over GF(2), 1000 random vectors per code
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for code in [hamming74(), repetition21(), rm32_16(), ldpc49_24()] {
            let hbar = build_extended(&code.h);
            for _ in 0..1000 {
                let y: Vec<f64> = (0..code.n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let hard = hard_bits(&y);
                let syn = code.syndrome(&hard).unwrap();
                let mut row = hard.clone();
                row.extend_from_slice(&syn);
                let product = hbar.matrix.transpose().mul_vec(&row).unwrap();
                assert!(product.iter().all(|&b| b == 0));
            }
        }
    }

    #[test]
    fn mask_matches_support() {
        let hbar = build_extended(&hamming74().h);
        let mask = build_mask(&hbar);
        assert_eq!(mask.active().len(), 15);
        assert_eq!(mask.rows() * mask.cols(), 30);
        for r in 0..mask.rows() {
            for c in 0..mask.cols() {
                let v = mask.value(r, c);
                if hbar.matrix.get(r, c) == 1 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, MASKED);
                }
            }
        }
        assert_eq!(mask.to_binary(), hbar.matrix);
        // active list sorted row-major
        let mut sorted = mask.active().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, mask.active());
    }

    #[test]
    fn all_ones_extended_gives_all_zero_mask() {
        let h = BinaryMatrix::from_rows(&[&[1, 1, 1]]).unwrap();
        // H all ones -> H̄ all ones (transpose block and 1x1 identity)
        let hbar = build_extended(&h);
        assert_eq!(hbar.matrix.ones(), 4);
        let mask = build_mask(&hbar);
        assert!(mask.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_relocates_syndrome_block() {
        let reg = toy_registry();
        let code = reg.get("hamming74").unwrap();
        let unpadded = build_mask(&build_extended(&code.h));
        let padded = pad_mask(&unpadded, reg.n_max(), reg.s_max()).unwrap();
        assert_eq!((padded.rows(), padded.cols()), (48, 16));
        assert_eq!(padded.active().len(), 15);
        // reliability rows keep their indices and column pattern
        for &(r, c) in unpadded.active().iter().filter(|&&(r, _)| r < 7) {
            assert!(padded.is_active(r, c));
        }
        // identity block lands on the syndrome feature positions 32..35
        for j in 0..3 {
            assert!(padded.is_active(32 + j, j));
        }
        // everything else is masked, including the extra columns [3, 16)
        for &(_, c) in padded.active() {
            assert!(c < 3);
        }
        let active_rows: Vec<usize> = padded.active().iter().map(|&(r, _)| r).collect();
        assert!(active_rows.iter().all(|&r| r < 7 || (32..35).contains(&r)));
    }

    #[test]
    fn pad_to_own_size_is_identity() {
        let code = hamming74();
        let mask = build_mask(&build_extended(&code.h));
        let padded = pad_mask(&mask, 7, 3).unwrap();
        assert_eq!(padded.values(), mask.values());
        assert_eq!(padded.active(), mask.active());
    }

    #[test]
    fn pad_rejects_smaller_target() {
        let mask = build_mask(&build_extended(&hamming74().h));
        assert!(pad_mask(&mask, 6, 3).is_err());
        assert!(pad_mask(&mask, 7, 2).is_err());
    }

    #[test]
    fn code_mask_counts_per_code() {
        let reg = toy_registry();
        let h74 = code_mask(&reg, reg.get("hamming74").unwrap()).unwrap();
        let rm = code_mask(&reg, reg.get("rm32_16").unwrap()).unwrap();
        assert_eq!(h74.active().len(), 15);
        assert_eq!(rm.active().len(), 208); // 192 ones of H plus I_16
        assert_eq!((rm.rows(), rm.cols()), (48, 16));
    }
}
