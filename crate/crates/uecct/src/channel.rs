//! BPSK over AWGN, the multiplicative-noise view, decoder pre-/post-processing,
//! and padding standardization for mixed-code batches.
//!
//! Conventions: bit b maps to symbol 1−2b; hard decision of a soft value v is
//! bit 1 iff v < 0 (sign(0) counts as +1 so the map is total).

use crate::error::{Error, Result};
use crate::gf2::{CodeRegistry, CodeSpec};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Soft received word, tagged with the code that produced it.
#[derive(Debug, Clone)]
pub struct LlrVector {
    pub values: Vec<f64>,
    pub code_name: String,
}

/// Channel operating point; `sigma` is derived from E_b/N_0 and the code rate.
#[derive(Debug, Clone, Copy)]
pub struct ChannelParams {
    pub ebn0_db: f64,
    pub rate: f64,
    pub sigma: f64,
}

impl ChannelParams {
    pub fn new(ebn0_db: f64, rate: f64) -> Result<Self> {
        let sigma = sigma_from_ebn0(ebn0_db, rate)?;
        Ok(ChannelParams { ebn0_db, rate, sigma })
    }
}

/// Model input of fixed length N_max + S_max: reliability block, then syndrome
/// block, each zero-padded to the registry-wide maximum.
#[derive(Debug, Clone)]
pub struct StandardizedInput {
    pub features: Vec<f64>,
    pub active_n: usize,
    pub active_s: usize,
}

/// BPSK map 1 − 2b.
pub fn bpsk(bits: &[u8]) -> Vec<f64> {
    bits.iter().map(|&b| 1.0 - 2.0 * b as f64).collect()
}

/// Hard decision: bit 1 iff the soft value is negative.
pub fn hard_bits(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v < 0.0) as u8).collect()
}

/// Noise standard deviation for a given E_b/N_0 (dB) and code rate:
/// sqrt(1 / (2 · rate · 10^(ebn0/10))).
pub fn sigma_from_ebn0(ebn0_db: f64, rate: f64) -> Result<f64> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config(format!("rate must be in (0,1], got {}", rate)));
    }
    if !ebn0_db.is_finite() {
        return Err(Error::config("ebn0_db must be finite".to_string()));
    }
    Ok((1.0 / (2.0 * rate * 10f64.powf(ebn0_db / 10.0))).sqrt())
}

/// Transmit a BPSK word over AWGN: y = x_s + n, n ~ N(0, sigma²) i.i.d.
pub fn transmit<R: Rng>(code: &CodeSpec, x_s: &[f64], sigma: f64, rng: &mut R) -> Result<LlrVector> {
    if x_s.len() != code.n {
        return Err(Error::config(format!(
            "transmit: symbol length {} != n = {}",
            x_s.len(),
            code.n
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {}", sigma)));
    }
    let values = x_s
        .iter()
        .map(|&s| {
            let n: f64 = StandardNormal.sample(rng);
            s + sigma * n
        })
        .collect();
    Ok(LlrVector {
        values,
        code_name: code.name.clone(),
    })
}

/// Multiplicative view of the received word: z with y = x_s ⊙ z,
/// i.e. z = y ⊙ x_s since x_s² = 1.
pub fn multiplicative_view(y: &LlrVector, x_s: &[f64]) -> Vec<f64> {
    debug_assert_eq!(y.values.len(), x_s.len());
    y.values.iter().zip(x_s).map(|(a, b)| a * b).collect()
}

/// Decoder input ỹ = [|y|, s(y)] of length 2n−k, where s(y) is the syndrome
/// of the hard decision.
pub fn preprocess(code: &CodeSpec, y: &LlrVector) -> Result<Vec<f64>> {
    if y.values.len() != code.n || y.code_name != code.name {
        return Err(Error::config(format!(
            "preprocess: received word does not belong to code '{}'",
            code.name
        )));
    }
    let mut out = Vec::with_capacity(2 * code.n - code.k);
    out.extend(y.values.iter().map(|v| v.abs()));
    let s = code.syndrome(&hard_bits(&y.values))?;
    out.extend(s.iter().map(|&b| b as f64));
    Ok(out)
}

/// Final hard output x̂ = bin(sign(y ⊙ ẑ)).
pub fn postprocess(y: &LlrVector, z_hat: &[f64]) -> Result<Vec<u8>> {
    if z_hat.len() != y.values.len() {
        return Err(Error::config(format!(
            "postprocess: length {} != received length {}",
            z_hat.len(),
            y.values.len()
        )));
    }
    Ok(y.values
        .iter()
        .zip(z_hat)
        .map(|(a, b)| ((a * b) < 0.0) as u8)
        .collect())
}

/// Zero-pad a preprocess output into the registry-wide layout:
/// [|y| then zeros to N_max, syndrome then zeros to S_max].
pub fn standardize(registry: &CodeRegistry, code: &CodeSpec, pre: &[f64]) -> Result<StandardizedInput> {
    let (n, s) = (code.n, code.n - code.k);
    if pre.len() != n + s {
        return Err(Error::config(format!(
            "standardize: input length {} != 2n−k = {}",
            pre.len(),
            n + s
        )));
    }
    let (n_max, s_max) = (registry.n_max(), registry.s_max());
    if n > n_max || s > s_max {
        return Err(Error::config(format!(
            "standardize: code '{}' exceeds registry bounds ({} > {} or {} > {})",
            code.name, n, n_max, s, s_max
        )));
    }
    let mut features = vec![0.0; n_max + s_max];
    features[..n].copy_from_slice(&pre[..n]);
    features[n_max..n_max + s].copy_from_slice(&pre[n..]);
    Ok(StandardizedInput {
        features,
        active_n: n,
        active_s: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gf2::{hamming74, toy_registry, CodeRegistry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bpsk_examples() {
        assert_eq!(bpsk(&[0, 0, 0]), vec![1.0, 1.0, 1.0]);
        assert_eq!(bpsk(&[1, 0, 1]), vec![-1.0, 1.0, -1.0]);
    }

    #[test]
    fn bpsk_hard_bits_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..100 {
            let bits: Vec<u8> = (0..17).map(|_| rng.random_range(0..=1)).collect();
            assert_eq!(hard_bits(&bpsk(&bits)), bits);
        }
    }

    #[test]
    fn sign_zero_counts_as_plus_one() {
        assert_eq!(hard_bits(&[0.0, -0.0, -1.0, 1.0]), vec![0, 0, 1, 0]);
    }

    #[test]
    fn sigma_reference_points() {
        assert_eq!(sigma_from_ebn0(0.0, 0.5).unwrap(), 1.0);
        // frozen: sqrt(1/(2·(4/7)·10^0.4)) = 0.59020655...
        assert!((sigma_from_ebn0(4.0, 4.0 / 7.0).unwrap() - 0.5902).abs() < 5e-5);
        assert!((sigma_from_ebn0(0.0, 1.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sigma_rejects_bad_rates() {
        assert!(sigma_from_ebn0(0.0, 0.0).is_err());
        assert!(sigma_from_ebn0(0.0, -0.5).is_err());
        assert!(sigma_from_ebn0(0.0, 1.5).is_err());
        assert!(sigma_from_ebn0(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn transmit_near_noiseless_limit() {
        let code = hamming74();
        let x_s = bpsk(&[0; 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = transmit(&code, &x_s, 1e-12, &mut rng).unwrap();
        for (a, b) in y.values.iter().zip(&x_s) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(transmit(&code, &x_s, 0.0, &mut rng).is_err());
    }

    #[test]
    fn transmit_noise_moments() {
        let code = hamming74();
        let x_s = bpsk(&[0; 7]);
        let sigma = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 150_000; // 7 bits each: ~1e6 noise samples
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        for _ in 0..draws {
            let y = transmit(&code, &x_s, sigma, &mut rng).unwrap();
            for (v, s) in y.values.iter().zip(&x_s) {
                let n = v - s;
                sum += n;
                sumsq += n * n;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sumsq / count as f64 - mean * mean;
        assert!(mean.abs() < 4.0 * sigma / 1e3, "mean {} too far from 0", mean);
        assert!((var - sigma * sigma).abs() < 0.01 * sigma * sigma, "variance {} off", var);
    }

    #[test]
    fn multiplicative_view_identities() {
        let code = hamming74();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_s = bpsk(&code.encode(&[1, 0, 1, 1]).unwrap());
        let y = transmit(&code, &x_s, 0.7, &mut rng).unwrap();
        let z = multiplicative_view(&y, &x_s);
        for ((zi, yi), xi) in z.iter().zip(&y.values).zip(&x_s) {
            assert_eq!(zi * xi, *yi);
            assert!((zi.abs() - yi.abs()).abs() < 1e-15);
        }
        // y == x_s exactly -> z all ones
        let clean = LlrVector {
            values: x_s.clone(),
            code_name: code.name.clone(),
        };
        assert_eq!(multiplicative_view(&clean, &x_s), vec![1.0; 7]);
    }

    #[test]
    fn preprocess_hand_example() {
        let code = hamming74();
        let y = LlrVector {
            values: vec![-0.9, 1.1, 0.3, 1.2, 0.7, 0.5, 0.4],
            code_name: code.name.clone(),
        };
        let pre = preprocess(&code, &y).unwrap();
        assert_eq!(pre, vec![0.9, 1.1, 0.3, 1.2, 0.7, 0.5, 0.4, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn preprocess_noiseless_codeword() {
        let code = hamming74();
        let y = LlrVector {
            values: bpsk(&code.encode(&[1, 1, 0, 1]).unwrap()),
            code_name: code.name.clone(),
        };
        let pre = preprocess(&code, &y).unwrap();
        assert_eq!(&pre[..7], &[1.0; 7][..]);
        assert_eq!(&pre[7..], &[0.0; 3][..]);
    }

    #[test]
    fn preprocess_codeword_invariance() {
        // preprocess(bpsk(x) ⊙ z) = preprocess(bpsk(0) ⊙ z) for every codeword x:
        // exhaustive over Hamming(7,4) messages, 100 noise draws each
        let code = hamming74();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand_distr::Distribution;
        for m in 0..16u32 {
            let msg: Vec<u8> = (0..4).map(|b| ((m >> b) & 1) as u8).collect();
            let x_s = bpsk(&code.encode(&msg).unwrap());
            for _ in 0..100 {
                let z: Vec<f64> = (0..7)
                    .map(|_| 1.0 + 0.9 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                let y_code = LlrVector {
                    values: x_s.iter().zip(&z).map(|(a, b)| a * b).collect(),
                    code_name: code.name.clone(),
                };
                let y_zero = LlrVector {
                    values: z.clone(),
                    code_name: code.name.clone(),
                };
                let pa = preprocess(&code, &y_code).unwrap();
                let pb = preprocess(&code, &y_zero).unwrap();
                for (a, b) in pa.iter().zip(&pb) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn postprocess_identities() {
        let code = hamming74();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let msg = [1, 0, 0, 1];
        let word = code.encode(&msg).unwrap();
        let x_s = bpsk(&word);
        let y = transmit(&code, &x_s, 0.5, &mut rng).unwrap();
        // z_hat = all ones -> hard decision of y
        assert_eq!(postprocess(&y, &[1.0; 7]).unwrap(), hard_bits(&y.values));
        // exact multiplicative noise recovers the codeword
        let z = multiplicative_view(&y, &x_s);
        assert_eq!(postprocess(&y, &z).unwrap(), word);
        // flipping one z_hat sign flips exactly that bit
        let mut z2 = z.clone();
        z2[3] = -z2[3];
        let flipped = postprocess(&y, &z2).unwrap();
        for i in 0..7 {
            assert_eq!(flipped[i] != word[i], i == 3);
        }
    }

    #[test]
    fn standardize_toy_layout() {
        let reg = toy_registry();
        let code = reg.get("hamming74").unwrap();
        let pre: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let std = standardize(&reg, code, &pre).unwrap();
        assert_eq!(std.features.len(), 48);
        assert_eq!(&std.features[..7], &pre[..7]);
        assert_eq!(&std.features[32..35], &pre[7..]);
        assert!(std.features[7..32].iter().all(|&v| v == 0.0));
        assert!(std.features[35..].iter().all(|&v| v == 0.0));
        assert_eq!((std.active_n, std.active_s), (7, 3));
    }

    #[test]
    fn standardize_identity_for_maximal_code() {
        let mut reg = CodeRegistry::new();
        reg.register(hamming74()).unwrap();
        let code = reg.get("hamming74").unwrap();
        let pre: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let std = standardize(&reg, code, &pre).unwrap();
        assert_eq!(std.features, pre);
    }

    #[test]
    fn standardize_rejects_oversized_code() {
        let mut reg = CodeRegistry::new();
        reg.register(crate::gf2::repetition21()).unwrap();
        let code = hamming74();
        let pre = vec![0.0; 10];
        assert!(standardize(&reg, &code, &pre).is_err());
    }
}
