//! GF(2) linear algebra, code definitions, and the code registry.
//!
//! A code is specified by its parity-check matrix H ((n−k)×n); the generator
//! G (k×n, G·Hᵀ = 0) is derived by row reduction. All arithmetic is exact
//! over GF(2).

use crate::error::{Error, Result};

/// Largest code length accepted by the registry.
pub const MAX_CODE_LEN: usize = 127;

/// Dense bit matrix over GF(2), row-major, one byte per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryMatrix {
            rows,
            cols,
            bits: vec![0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1);
        }
        m
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::data("matrix must have at least one row and column"));
        }
        let cols = rows[0].len();
        let mut m = Self::zeros(rows.len(), cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::data(format!(
                    "ragged matrix: row {} has {} entries, expected {}",
                    i,
                    row.len(),
                    cols
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(Error::data(format!("non-binary entry {} at ({},{})", v, i, j)));
                }
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        debug_assert!(v <= 1);
        self.bits[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Matrix product mod 2.
    pub fn matmul(&self, rhs: &BinaryMatrix) -> Result<BinaryMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::config(format!(
                "gf2 matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = BinaryMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for t in 0..self.cols {
                if self.get(i, t) == 1 {
                    for j in 0..rhs.cols {
                        let v = out.get(i, j) ^ rhs.get(t, j);
                        out.set(i, j, v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product mod 2 (vector on the right).
    pub fn mul_vec(&self, v: &[u8]) -> Result<Vec<u8>> {
        if v.len() != self.cols {
            return Err(Error::config(format!(
                "gf2 matvec length mismatch: matrix has {} columns, vector has {}",
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0u8; self.rows];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0u8;
            for (c, &b) in v.iter().enumerate() {
                acc ^= self.get(i, c) & b;
            }
            *o = acc;
        }
        Ok(out)
    }

    pub fn is_zero(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// Reduced row echelon form. Returns (rref, pivot columns).
    pub fn row_echelon(&self) -> (BinaryMatrix, Vec<usize>) {
        let mut m = self.clone();
        let mut pivots = Vec::new();
        let mut r = 0;
        for c in 0..m.cols {
            if r == m.rows {
                break;
            }
            let Some(pr) = (r..m.rows).find(|&i| m.get(i, c) == 1) else {
                continue;
            };
            if pr != r {
                for j in 0..m.cols {
                    let (a, b) = (m.get(r, j), m.get(pr, j));
                    m.set(r, j, b);
                    m.set(pr, j, a);
                }
            }
            for i in 0..m.rows {
                if i != r && m.get(i, c) == 1 {
                    for j in 0..m.cols {
                        let v = m.get(i, j) ^ m.get(r, j);
                        m.set(i, j, v);
                    }
                }
            }
            pivots.push(c);
            r += 1;
        }
        (m, pivots)
    }

    pub fn rank(&self) -> usize {
        self.row_echelon().1.len()
    }

    /// Indices of a maximal linearly independent subset of rows, preserving
    /// the original rows (and their sparsity) rather than echelon combinations.
    pub fn independent_row_indices(&self) -> Vec<usize> {
        let mut basis: Vec<Vec<u8>> = Vec::new();
        let mut kept = Vec::new();
        for r in 0..self.rows {
            let mut v = self.row(r).to_vec();
            for b in &basis {
                let lead = b.iter().position(|&x| x == 1).unwrap();
                if v[lead] == 1 {
                    for (vi, bi) in v.iter_mut().zip(b) {
                        *vi ^= bi;
                    }
                }
            }
            if v.iter().any(|&x| x == 1) {
                // re-reduce the basis to keep leading columns distinct
                basis.push(v);
                basis.sort_by_key(|b| b.iter().position(|&x| x == 1).unwrap());
                let mut i = 0;
                while i < basis.len() {
                    let (head, tail) = basis.split_at_mut(i + 1);
                    let b = &head[i];
                    let lead = b.iter().position(|&x| x == 1).unwrap();
                    for t in tail.iter_mut() {
                        if t[lead] == 1 {
                            for (ti, bi) in t.iter_mut().zip(b) {
                                *ti ^= bi;
                            }
                        }
                    }
                    i += 1;
                }
                basis.retain(|b| b.iter().any(|&x| x == 1));
                basis.sort_by_key(|b| b.iter().position(|&x| x == 1).unwrap());
                kept.push(r);
            }
        }
        kept
    }
}

/// Derive a generator matrix from a full-row-rank parity check.
///
/// Returns G (k×n, in the original column order) together with the list of
/// information-bit column positions: G restricted to those columns is I_k,
/// so the pair records the column permutation that puts G in systematic form.
pub fn derive_generator(h: &BinaryMatrix) -> Result<(BinaryMatrix, Vec<usize>)> {
    let (rref, pivots) = h.row_echelon();
    if pivots.len() != h.rows() {
        return Err(Error::data(format!(
            "parity-check matrix is rank-deficient: effective rank {} of {} rows",
            pivots.len(),
            h.rows()
        )));
    }
    let n = h.cols();
    let k = n - pivots.len();
    let is_pivot = {
        let mut v = vec![false; n];
        for &p in &pivots {
            v[p] = true;
        }
        v
    };
    let info_cols: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
    // x_{pivot i} = sum over free columns t of rref[i, info_cols[t]] * x_{info_cols[t]}
    let mut g = BinaryMatrix::zeros(k, n);
    for (t, &fc) in info_cols.iter().enumerate() {
        g.set(t, fc, 1);
        for (i, &pc) in pivots.iter().enumerate() {
            g.set(t, pc, rref.get(i, fc));
        }
    }
    Ok((g, info_cols))
}

/// A registered code: parity check, derived generator, recorded bit order.
#[derive(Debug, Clone)]
pub struct CodeSpec {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub h: BinaryMatrix,
    pub g: BinaryMatrix,
    /// Columns of G holding the message bits (G restricted to them is I_k).
    pub info_cols: Vec<usize>,
}

impl CodeSpec {
    /// Build a code from a parity-check matrix. Redundant rows are dropped
    /// (keeping the original rows, so the Tanner graph stays sparse) and the
    /// effective rank defines n−k.
    pub fn new(name: impl Into<String>, h_raw: BinaryMatrix) -> Result<CodeSpec> {
        let name = name.into();
        let n = h_raw.cols();
        if n > MAX_CODE_LEN {
            return Err(Error::config(format!(
                "code '{}': n = {} exceeds the supported maximum {}",
                name, n, MAX_CODE_LEN
            )));
        }
        let kept = h_raw.independent_row_indices();
        if kept.is_empty() {
            return Err(Error::data(format!("code '{}': parity-check matrix is zero", name)));
        }
        let h = if kept.len() == h_raw.rows() {
            h_raw
        } else {
            let rows: Vec<&[u8]> = kept.iter().map(|&r| h_raw.row(r)).collect();
            BinaryMatrix::from_rows(&rows)?
        };
        let r = h.rows();
        if r >= n {
            return Err(Error::data(format!(
                "code '{}': effective rank {} leaves no information bits (n = {})",
                name, r, n
            )));
        }
        let k = n - r;
        let (g, info_cols) = derive_generator(&h)?;
        debug_assert!(g.matmul(&h.transpose()).unwrap().is_zero());
        Ok(CodeSpec {
            name,
            n,
            k,
            h,
            g,
            info_cols,
        })
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    /// Encode a k-bit message: x = m·G.
    pub fn encode(&self, m: &[u8]) -> Result<Vec<u8>> {
        if m.len() != self.k {
            return Err(Error::config(format!(
                "encode: message length {} != k = {}",
                m.len(),
                self.k
            )));
        }
        let mut x = vec![0u8; self.n];
        for (t, &mb) in m.iter().enumerate() {
            if mb > 1 {
                return Err(Error::config("encode: message bits must be 0/1".to_string()));
            }
            if mb == 1 {
                for (xj, &gj) in x.iter_mut().zip(self.g.row(t)) {
                    *xj ^= gj;
                }
            }
        }
        Ok(x)
    }

    /// Syndrome H·xᵀ mod 2 of a hard-decision word.
    pub fn syndrome(&self, hard_bits: &[u8]) -> Result<Vec<u8>> {
        if hard_bits.len() != self.n {
            return Err(Error::config(format!(
                "syndrome: word length {} != n = {}",
                hard_bits.len(),
                self.n
            )));
        }
        self.h.mul_vec(hard_bits)
    }
}

/// Hamming(7,4) with the parity-check matrix used throughout the tests:
/// rows 1110100, 1011010, 0111001.
pub fn hamming74() -> CodeSpec {
    let h = BinaryMatrix::from_rows(&[
        &[1, 1, 1, 0, 1, 0, 0],
        &[1, 0, 1, 1, 0, 1, 0],
        &[0, 1, 1, 1, 0, 0, 1],
    ])
    .unwrap();
    CodeSpec::new("hamming74", h).unwrap()
}

/// Repetition (2,1) code, H = [1 1].
pub fn repetition21() -> CodeSpec {
    let h = BinaryMatrix::from_rows(&[&[1, 1]]).unwrap();
    CodeSpec::new("rep21", h).unwrap()
}

/// Reed-Muller RM(2,5), a self-dual (32,16) code with minimum distance 8;
/// shipped as an alist fixture.
pub fn rm32_16() -> CodeSpec {
    let h = crate::alist::parse_alist(include_str!("../data/codes/rm_32_16.alist")).unwrap();
    CodeSpec::new("rm32_16", h).unwrap()
}

/// Sparse (49,24) LDPC-class code, column weight 3; shipped as an alist fixture.
pub fn ldpc49_24() -> CodeSpec {
    let h = crate::alist::parse_alist(include_str!("../data/codes/ldpc_49_24.alist")).unwrap();
    CodeSpec::new("ldpc49_24", h).unwrap()
}

/// Hamming (15,11); shipped as a dense01 fixture.
pub fn hamming15_11() -> CodeSpec {
    let h = crate::alist::parse_dense01(include_str!("../data/codes/hamming_15_11.dense01")).unwrap();
    CodeSpec::new("hamming15_11", h).unwrap()
}

/// Codes available by name without external files.
pub fn builtin_code(name: &str) -> Option<CodeSpec> {
    match name {
        "hamming74" => Some(hamming74()),
        "rep21" => Some(repetition21()),
        "rm32_16" => Some(rm32_16()),
        "ldpc49_24" => Some(ldpc49_24()),
        "hamming15_11" => Some(hamming15_11()),
        _ => None,
    }
}

pub const BUILTIN_CODE_NAMES: [&str; 5] = ["hamming74", "rep21", "rm32_16", "ldpc49_24", "hamming15_11"];

/// Registry used by the desk-scale profile: {Hamming(7,4), RM(2,5)}.
pub fn toy_registry() -> CodeRegistry {
    let mut reg = CodeRegistry::new();
    reg.register(hamming74()).unwrap();
    reg.register(rm32_16()).unwrap();
    reg
}

/// Ordered collection of codes sharing one model; tracks the padding bounds.
#[derive(Debug, Clone, Default)]
pub struct CodeRegistry {
    codes: Vec<CodeSpec>,
    min_n: usize,
    min_s: usize,
}

impl CodeRegistry {
    pub fn new() -> Self {
        CodeRegistry::default()
    }

    /// Raise the padding bounds to at least (n_max, s_max), so inputs keep a
    /// fixed layout even when every registered code is smaller. Used when a
    /// registry must match the geometry of an already-built model.
    pub fn pad_to(&mut self, n_max: usize, s_max: usize) {
        self.min_n = self.min_n.max(n_max);
        self.min_s = self.min_s.max(s_max);
    }

    pub fn register(&mut self, code: CodeSpec) -> Result<()> {
        if self.codes.iter().any(|c| c.name == code.name) {
            return Err(Error::config(format!("duplicate code name '{}'", code.name)));
        }
        self.codes.push(code);
        Ok(())
    }

    pub fn codes(&self) -> &[CodeSpec] {
        &self.codes
    }

    pub fn get(&self, name: &str) -> Option<&CodeSpec> {
        self.codes.iter().find(|c| c.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.codes.iter().position(|c| c.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    /// Maximum code length over registered codes (at least any `pad_to` floor).
    pub fn n_max(&self) -> usize {
        self.codes
            .iter()
            .map(|c| c.n)
            .max()
            .unwrap_or(0)
            .max(self.min_n)
    }

    /// Maximum syndrome length over registered codes (at least any `pad_to` floor).
    pub fn s_max(&self) -> usize {
        self.codes
            .iter()
            .map(|c| c.n - c.k)
            .max()
            .unwrap_or(0)
            .max(self.min_s)
    }

    /// Model input length: N_max + S_max.
    pub fn input_len(&self) -> usize {
        self.n_max() + self.s_max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hamming74_shape_and_weights() {
        let code = hamming74();
        assert_eq!((code.n, code.k), (7, 4));
        for r in 0..3 {
            assert_eq!(code.h.row(r).iter().map(|&b| b as usize).sum::<usize>(), 4);
        }
    }

    #[test]
    fn hamming74_exhaustive_encode_zero_syndrome() {
        let code = hamming74();
        let mut seen = std::collections::HashSet::new();
        for m in 0..16u32 {
            let msg: Vec<u8> = (0..4).map(|b| ((m >> b) & 1) as u8).collect();
            let x = code.encode(&msg).unwrap();
            assert_eq!(code.syndrome(&x).unwrap(), vec![0, 0, 0]);
            assert!(seen.insert(x), "codewords must be distinct");
        }
    }

    #[test]
    fn syndrome_hand_examples() {
        let code = hamming74();
        // single error in position 0 reproduces column 0 of H
        let s = code.syndrome(&[1, 0, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(s, vec![1, 1, 0]);
        // a codeword
        let s = code.syndrome(&[0, 1, 0, 0, 1, 0, 1]).unwrap();
        assert_eq!(s, vec![0, 0, 0]);
    }

    #[test]
    fn encode_zero_message_gives_zero_word() {
        let code = hamming74();
        assert_eq!(code.encode(&[0, 0, 0, 0]).unwrap(), vec![0; 7]);
    }

    #[test]
    fn repetition_code() {
        let code = repetition21();
        assert_eq!((code.n, code.k), (2, 1));
        assert_eq!(code.encode(&[1]).unwrap(), vec![1, 1]);
        assert_eq!(code.g, BinaryMatrix::from_rows(&[&[1, 1]]).unwrap());
    }

    #[test]
    fn length_mismatches_are_errors() {
        let code = hamming74();
        assert!(code.encode(&[0, 0, 0]).is_err());
        assert!(code.syndrome(&[0; 6]).is_err());
    }

    #[test]
    fn rank_deficient_rows_are_dropped() {
        // third row = row0 xor row1
        let h = BinaryMatrix::from_rows(&[
            &[1, 1, 1, 0, 1, 0, 0],
            &[1, 0, 1, 1, 0, 1, 0],
            &[0, 1, 0, 1, 1, 1, 0],
        ])
        .unwrap();
        let code = CodeSpec::new("redundant", h).unwrap();
        assert_eq!(code.h.rows(), 2);
        assert_eq!(code.k, 5);
        // the kept rows are original rows, not echelon combinations
        assert_eq!(code.h.row(0), &[1, 1, 1, 0, 1, 0, 0]);
        assert_eq!(code.h.row(1), &[1, 0, 1, 1, 0, 1, 0]);
    }

    #[test]
    fn zero_matrix_rejected() {
        let h = BinaryMatrix::zeros(2, 5);
        assert!(CodeSpec::new("zero", h).is_err());
    }

    #[test]
    fn full_rank_square_rejected_no_info_bits() {
        let h = BinaryMatrix::identity(4);
        assert!(CodeSpec::new("square", h).is_err());
    }

    #[test]
    fn oversized_code_rejected() {
        let h = BinaryMatrix::zeros(1, 128);
        assert!(CodeSpec::new("big", h).is_err());
    }

    #[test]
    fn matmul_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (m, k, n) = (
                rng.random_range(1..=64),
                rng.random_range(1..=64),
                rng.random_range(1..=64),
            );
            let mut a = BinaryMatrix::zeros(m, k);
            let mut b = BinaryMatrix::zeros(k, n);
            for i in 0..m {
                for j in 0..k {
                    a.set(i, j, rng.random_range(0..=1));
                }
            }
            for i in 0..k {
                for j in 0..n {
                    b.set(i, j, rng.random_range(0..=1));
                }
            }
            let c = a.matmul(&b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0u32;
                    for t in 0..k {
                        acc += (a.get(i, t) & b.get(t, j)) as u32;
                    }
                    assert_eq!(c.get(i, j), (acc % 2) as u8);
                }
            }
        }
    }

    #[test]
    fn matmul_associative_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let dims: Vec<usize> = (0..4).map(|_| rng.random_range(1..=16)).collect();
            let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
                let mut m = BinaryMatrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        m.set(i, j, rng.random_range(0..=1));
                    }
                }
                m
            };
            let a = rand_mat(&mut rng, dims[0], dims[1]);
            let b = rand_mat(&mut rng, dims[1], dims[2]);
            let c = rand_mat(&mut rng, dims[2], dims[3]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert_eq!(left, right);
        }
    }

    #[test]
    fn generator_from_random_full_rank_parity_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut found = 0;
        while found < 100 {
            let mut h = BinaryMatrix::zeros(5, 10);
            for i in 0..5 {
                for j in 0..10 {
                    h.set(i, j, rng.random_range(0..=1));
                }
            }
            if h.rank() != 5 {
                continue;
            }
            found += 1;
            let (g, info_cols) = derive_generator(&h).unwrap();
            assert!(g.matmul(&h.transpose()).unwrap().is_zero());
            assert_eq!(info_cols.len(), 5);
            // G restricted to info columns is the identity
            for (t, &c) in info_cols.iter().enumerate() {
                for t2 in 0..5 {
                    assert_eq!(g.get(t2, c), (t2 == t) as u8);
                }
            }
        }
    }

    #[test]
    fn registry_tracks_maxima_and_rejects_duplicates() {
        let mut reg = CodeRegistry::new();
        reg.register(hamming74()).unwrap();
        reg.register(repetition21()).unwrap();
        assert_eq!(reg.n_max(), 7);
        assert_eq!(reg.s_max(), 3);
        assert_eq!(reg.input_len(), 10);
        assert!(reg.register(hamming74()).is_err());
    }

    #[test]
    fn pad_to_raises_bounds_without_lowering_them() {
        let mut reg = CodeRegistry::new();
        reg.register(hamming74()).unwrap();
        reg.pad_to(32, 16);
        assert_eq!(reg.n_max(), 32);
        assert_eq!(reg.s_max(), 16);
        assert_eq!(reg.input_len(), 48);
        reg.pad_to(4, 2);
        assert_eq!(reg.n_max(), 32);
        assert_eq!(reg.s_max(), 16);
        reg.register(rm32_16()).unwrap();
        assert_eq!(reg.n_max(), 32);
    }

    proptest! {
        #[test]
        fn syndrome_is_linear(a in proptest::collection::vec(0u8..2, 7),
                              b in proptest::collection::vec(0u8..2, 7)) {
            let code = hamming74();
            let xor: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x ^ y).collect();
            let sa = code.syndrome(&a).unwrap();
            let sb = code.syndrome(&b).unwrap();
            let sx = code.syndrome(&xor).unwrap();
            let expect: Vec<u8> = sa.iter().zip(&sb).map(|(x, y)| x ^ y).collect();
            prop_assert_eq!(sx, expect);
        }

        #[test]
        fn encode_then_syndrome_zero(m in proptest::collection::vec(0u8..2, 4)) {
            let code = hamming74();
            let x = code.encode(&m).unwrap();
            prop_assert_eq!(code.syndrome(&x).unwrap(), vec![0u8, 0, 0]);
        }
    }
}
