//! Monte Carlo BER/BLER evaluation with binomial confidence intervals, plus
//! the reference decoders the transformer is measured against: hard decision,
//! exhaustive maximum likelihood, and flooding sum-product belief propagation.
//!
//! Evaluation transmits randomly encoded messages (not the all-zero shortcut
//! used in training) so the encoder and bit-ordering plumbing are exercised
//! too. Workers own disjoint RNG streams and local counters; reports are
//! deterministic for a fixed (seed, worker count).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{bpsk, hard_bits, transmit, ChannelParams, LlrVector};
use crate::error::{Error, Result};
use crate::gf2::{CodeRegistry, CodeSpec};
use crate::model::{CodeAttention, ForwardOptions, UecctModel};

/// Largest message length the exhaustive ML oracle will enumerate.
pub const ML_MAX_K: usize = 20;
/// Default belief-propagation iteration cap.
pub const BP_DEFAULT_ITERS: usize = 20;
/// Two-sided 95% normal quantile used for binomial confidence intervals.
pub const CI_Z: f64 = 1.959963984540054;

/// Anything that maps a received vector to codeword bits.
pub trait Decoder {
    fn name(&self) -> &str;
    fn decode(&self, y: &LlrVector, params: &ChannelParams) -> Result<Vec<u8>>;
}

/// Bitwise sign decision, no code structure used.
#[derive(Debug, Clone, Copy, Default)]
pub struct HardDecision;

impl Decoder for HardDecision {
    fn name(&self) -> &str {
        "hard"
    }

    fn decode(&self, y: &LlrVector, _params: &ChannelParams) -> Result<Vec<u8>> {
        Ok(hard_bits(&y.values))
    }
}

/// Exhaustive maximum-likelihood decoder: nearest codeword in Euclidean
/// distance over the BPSK images, ties broken by lowest codeword index
/// (message index in counting order).
#[derive(Debug, Clone)]
pub struct MlOracle {
    code_name: String,
    n: usize,
    codewords: Vec<Vec<u8>>,
    images: Vec<Vec<f64>>,
}

impl MlOracle {
    pub fn new(code: &CodeSpec) -> Result<MlOracle> {
        if code.k > ML_MAX_K {
            return Err(Error::config(format!(
                "exhaustive ML needs k <= {ML_MAX_K}, code '{}' has k = {}",
                code.name, code.k
            )));
        }
        let mut codewords = Vec::with_capacity(1 << code.k);
        let mut images = Vec::with_capacity(1 << code.k);
        for m in 0u32..(1u32 << code.k) {
            let message: Vec<u8> = (0..code.k).map(|j| ((m >> j) & 1) as u8).collect();
            let x = code.encode(&message)?;
            images.push(bpsk(&x));
            codewords.push(x);
        }
        Ok(MlOracle {
            code_name: code.name.clone(),
            n: code.n,
            codewords,
            images,
        })
    }

    /// Number of enumerated codewords (2^k).
    pub fn codebook_len(&self) -> usize {
        self.codewords.len()
    }
}

impl Decoder for MlOracle {
    fn name(&self) -> &str {
        "ml"
    }

    fn decode(&self, y: &LlrVector, _params: &ChannelParams) -> Result<Vec<u8>> {
        if y.values.len() != self.n || y.code_name != self.code_name {
            return Err(Error::config(format!(
                "ml oracle built for '{}' got a word for '{}'",
                self.code_name, y.code_name
            )));
        }
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (idx, image) in self.images.iter().enumerate() {
            let dist: f64 = y
                .values
                .iter()
                .zip(image)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = idx;
            }
        }
        Ok(self.codewords[best].clone())
    }
}

/// Flooding sum-product decoding on the Tanner graph of H.
#[derive(Debug, Clone)]
pub struct BpDecoder {
    code: CodeSpec,
    pub max_iters: usize,
}

impl BpDecoder {
    pub fn new(code: &CodeSpec, max_iters: usize) -> BpDecoder {
        BpDecoder {
            code: code.clone(),
            max_iters,
        }
    }

    pub fn with_default_iters(code: &CodeSpec) -> BpDecoder {
        BpDecoder::new(code, BP_DEFAULT_ITERS)
    }
}

impl Decoder for BpDecoder {
    fn name(&self) -> &str {
        "bp"
    }

    fn decode(&self, y: &LlrVector, params: &ChannelParams) -> Result<Vec<u8>> {
        bp_decode(&self.code, y, params.sigma, self.max_iters)
    }
}

/// Sum-product decode with channel LLRs 2y/sigma^2, early exit on a zero
/// syndrome; non-convergence returns the final posterior's hard decision.
pub fn bp_decode(code: &CodeSpec, y: &LlrVector, sigma: f64, max_iters: usize) -> Result<Vec<u8>> {
    if y.values.len() != code.n || y.code_name != code.name {
        return Err(Error::config(format!(
            "bp_decode: received word does not belong to code '{}'",
            code.name
        )));
    }
    if max_iters == 0 {
        return Err(Error::config("bp_decode needs max_iters >= 1"));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::numerical(format!("bp_decode: invalid sigma {sigma}")));
    }
    let llr: Vec<f64> = y.values.iter().map(|v| 2.0 * v / (sigma * sigma)).collect();

    // Channel hard decision may already be a codeword (iteration-0 check).
    let mut hard = hard_bits(&llr);
    if code.syndrome(&hard)?.iter().all(|&s| s == 0) {
        return Ok(hard);
    }

    let s = code.n - code.k;
    let check_vars: Vec<Vec<usize>> = (0..s)
        .map(|c| (0..code.n).filter(|&v| code.h.get(c, v) == 1).collect())
        .collect();
    // Messages indexed [check][position within that check's variable list].
    let mut var_to_check: Vec<Vec<f64>> = check_vars
        .iter()
        .map(|vars| vars.iter().map(|&v| llr[v]).collect())
        .collect();
    let mut check_to_var: Vec<Vec<f64>> = check_vars.iter().map(|vars| vec![0.0; vars.len()]).collect();

    for _ in 0..max_iters {
        for (c, vars) in check_vars.iter().enumerate() {
            for i in 0..vars.len() {
                let mut prod = 1.0;
                for (j, _) in vars.iter().enumerate() {
                    if j != i {
                        prod *= (var_to_check[c][j] / 2.0).tanh();
                    }
                }
                check_to_var[c][i] = 2.0 * atanh_clamped(prod);
            }
        }
        let mut posterior = llr.clone();
        for (c, vars) in check_vars.iter().enumerate() {
            for (i, &v) in vars.iter().enumerate() {
                posterior[v] += check_to_var[c][i];
            }
        }
        for (c, vars) in check_vars.iter().enumerate() {
            for (i, &v) in vars.iter().enumerate() {
                var_to_check[c][i] = posterior[v] - check_to_var[c][i];
            }
        }
        hard = hard_bits(&posterior);
        if code.syndrome(&hard)?.iter().all(|&s| s == 0) {
            return Ok(hard);
        }
    }
    Ok(hard)
}

fn atanh_clamped(p: f64) -> f64 {
    p.clamp(-(1.0 - 1e-12), 1.0 - 1e-12).atanh()
}

/// Transformer decoder wired into the [`Decoder`] interface. Borrows a model
/// plus the registry and per-code attention masks it was prepared with, so one
/// instance serves every code the registry knows.
pub struct UecctDecoder<'a> {
    model: &'a UecctModel,
    registry: &'a CodeRegistry,
    attns: &'a [CodeAttention],
    opts: ForwardOptions,
}

impl<'a> UecctDecoder<'a> {
    pub fn new(
        model: &'a UecctModel,
        registry: &'a CodeRegistry,
        attns: &'a [CodeAttention],
        opts: ForwardOptions,
    ) -> UecctDecoder<'a> {
        UecctDecoder {
            model,
            registry,
            attns,
            opts,
        }
    }
}

impl Decoder for UecctDecoder<'_> {
    fn name(&self) -> &str {
        "uecct"
    }

    fn decode(&self, y: &LlrVector, _params: &ChannelParams) -> Result<Vec<u8>> {
        let code = self.registry.get(&y.code_name).ok_or_else(|| {
            Error::data(format!(
                "code '{}' is not in the decoder's registry",
                y.code_name
            ))
        })?;
        let decoded = self
            .model
            .decode(self.registry, self.attns, code, y, &self.opts)?;
        Ok(decoded.x_hat)
    }
}

/// Error tallies for one (code, Eb/N0) operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointReport {
    pub code: String,
    pub ebn0_db: f64,
    pub bit_errors: u64,
    pub bits_total: u64,
    pub block_errors: u64,
    pub blocks_total: u64,
}

impl PointReport {
    pub fn ber(&self) -> f64 {
        self.bit_errors as f64 / self.bits_total as f64
    }

    pub fn bler(&self) -> f64 {
        self.block_errors as f64 / self.blocks_total as f64
    }

    /// Negative natural log of the BER; infinite when no bit errors occurred.
    pub fn neg_ln_ber(&self) -> f64 {
        -self.ber().ln()
    }

    /// 95% Wilson interval on the bit error rate. Bits within a block share
    /// one noise draw, so this uses the customary independence approximation.
    pub fn ber_ci(&self) -> (f64, f64) {
        wilson_interval(self.bit_errors, self.bits_total)
    }
}

/// Evaluation rows for one decoder across operating points.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub decoder: String,
    pub points: Vec<PointReport>,
}

impl EvalReport {
    /// Aggregate BER: total bit errors over total bits, across all points.
    pub fn aber(&self) -> f64 {
        let errors: u64 = self.points.iter().map(|p| p.bit_errors).sum();
        let bits: u64 = self.points.iter().map(|p| p.bits_total).sum();
        errors as f64 / bits as f64
    }

    /// Aggregate BLER across all points.
    pub fn abler(&self) -> f64 {
        let errors: u64 = self.points.iter().map(|p| p.block_errors).sum();
        let blocks: u64 = self.points.iter().map(|p| p.blocks_total).sum();
        errors as f64 / blocks as f64
    }

    /// CSV rows: `code,ebn0_db,ber,bler,neg_ln_ber,blocks,ci_low,ci_high`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("code,ebn0_db,ber,bler,neg_ln_ber,blocks,ci_low,ci_high\n");
        for p in &self.points {
            let (lo, hi) = p.ber_ci();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                p.code,
                p.ebn0_db,
                p.ber(),
                p.bler(),
                p.neg_ln_ber(),
                p.blocks_total,
                lo,
                hi
            ));
        }
        out
    }
}

/// 95% Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = CI_Z * CI_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = CI_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Monte Carlo plan: blocks per operating point, base seed, worker count.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub min_blocks: u64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            min_blocks: 10_000,
            seed: 0,
            workers: 1,
        }
    }
}

/// RNG stream for one (operating point, worker) pair.
fn stream_rng(seed: u64, point: usize, worker: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(point as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(worker as u64).to_le_bytes());
    key[24] = 1;
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    bit_errors: u64,
    block_errors: u64,
    blocks: u64,
}

fn run_blocks<R: Rng>(
    decoder: &dyn Decoder,
    code: &CodeSpec,
    params: &ChannelParams,
    blocks: u64,
    rng: &mut R,
) -> Result<Tally> {
    let mut tally = Tally::default();
    for _ in 0..blocks {
        let message: Vec<u8> = (0..code.k).map(|_| rng.random_range(0..=1u8)).collect();
        let x = code.encode(&message)?;
        let y = transmit(code, &bpsk(&x), params.sigma, rng)?;
        let x_hat = decoder.decode(&y, params)?;
        let errors = x_hat.iter().zip(&x).filter(|(a, b)| a != b).count() as u64;
        tally.bit_errors += errors;
        tally.block_errors += (errors > 0) as u64;
        tally.blocks += 1;
    }
    Ok(tally)
}

/// Estimate BER/BLER for one decoder over a list of operating points,
/// transmitting `min_blocks` randomly encoded blocks per point.
pub fn monte_carlo(
    decoder: &(dyn Decoder + Sync),
    code: &CodeSpec,
    ebn0_list: &[f64],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if ebn0_list.is_empty() {
        return Err(Error::config("no operating points requested"));
    }
    if settings.min_blocks == 0 {
        return Err(Error::config("min_blocks must be positive"));
    }
    let workers = settings.workers.max(1);
    let mut points = Vec::with_capacity(ebn0_list.len());
    for (point_idx, &ebn0_db) in ebn0_list.iter().enumerate() {
        let params = ChannelParams::new(ebn0_db, code.rate())?;
        let share = settings.min_blocks / workers as u64;
        let remainder = settings.min_blocks % workers as u64;
        let tally = if workers == 1 {
            let mut rng = stream_rng(settings.seed, point_idx, 0);
            run_blocks(decoder, code, &params, settings.min_blocks, &mut rng)?
        } else {
            let results: Vec<Result<Tally>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let params = &params;
                        scope.spawn(move || {
                            let blocks = share + ((w as u64) < remainder) as u64;
                            let mut rng = stream_rng(settings.seed, point_idx, w);
                            run_blocks(decoder, code, params, blocks, &mut rng)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("evaluation worker panicked"))
                    .collect()
            });
            let mut merged = Tally::default();
            for r in results {
                let t = r?;
                merged.bit_errors += t.bit_errors;
                merged.block_errors += t.block_errors;
                merged.blocks += t.blocks;
            }
            merged
        };
        points.push(PointReport {
            code: code.name.clone(),
            ebn0_db,
            bit_errors: tally.bit_errors,
            bits_total: tally.blocks * code.n as u64,
            block_errors: tally.block_errors,
            blocks_total: tally.blocks,
        });
    }
    Ok(EvalReport {
        decoder: decoder.name().to_string(),
        points,
    })
}

/// Evaluate several decoders on the same transmitted blocks and noise
/// realizations, so differences reflect the decoders alone.
pub fn compare_decoders(
    decoders: &[&dyn Decoder],
    code: &CodeSpec,
    ebn0_db: f64,
    blocks: u64,
    seed: u64,
) -> Result<Vec<PointReport>> {
    let params = ChannelParams::new(ebn0_db, code.rate())?;
    let mut tallies = vec![Tally::default(); decoders.len()];
    let mut rng = stream_rng(seed, 0, 0);
    for _ in 0..blocks {
        let message: Vec<u8> = (0..code.k).map(|_| rng.random_range(0..=1u8)).collect();
        let x = code.encode(&message)?;
        let y = transmit(code, &bpsk(&x), params.sigma, &mut rng)?;
        for (d, tally) in decoders.iter().zip(&mut tallies) {
            let x_hat = d.decode(&y, &params)?;
            let errors = x_hat.iter().zip(&x).filter(|(a, b)| a != b).count() as u64;
            tally.bit_errors += errors;
            tally.block_errors += (errors > 0) as u64;
            tally.blocks += 1;
        }
    }
    Ok(tallies
        .iter()
        .map(|t| PointReport {
            code: code.name.clone(),
            ebn0_db,
            bit_errors: t.bit_errors,
            bits_total: t.blocks * code.n as u64,
            block_errors: t.block_errors,
            blocks_total: t.blocks,
        })
        .collect())
}

/// Fraction of shared-noise blocks on which two decoders emit identical words.
pub fn agreement_rate(
    a: &dyn Decoder,
    b: &dyn Decoder,
    code: &CodeSpec,
    ebn0_db: f64,
    blocks: u64,
    seed: u64,
) -> Result<f64> {
    let params = ChannelParams::new(ebn0_db, code.rate())?;
    let mut rng = stream_rng(seed, 0, 0);
    let mut agree = 0u64;
    for _ in 0..blocks {
        let message: Vec<u8> = (0..code.k).map(|_| rng.random_range(0..=1u8)).collect();
        let x = code.encode(&message)?;
        let y = transmit(code, &bpsk(&x), params.sigma, &mut rng)?;
        agree += (a.decode(&y, &params)? == b.decode(&y, &params)?) as u64;
    }
    Ok(agree as f64 / blocks as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sigma_from_ebn0;
    use crate::gf2::{hamming74, ldpc49_24, repetition21};

    /// Q(sqrt(2 * (4/7) * 10^0.4)), per-bit flip probability of hard decision
    /// on Hamming(7,4) at 4 dB, frozen from the Gaussian tail integral.
    const HARD_BER_4DB_HAMMING74: f64 = 0.04510205;

    fn noiseless(code: &CodeSpec, x: &[u8]) -> LlrVector {
        LlrVector {
            values: bpsk(x),
            code_name: code.name.clone(),
        }
    }

    #[test]
    fn hard_decision_ber_matches_gaussian_tail() {
        let code = hamming74();
        let settings = EvalSettings {
            min_blocks: 20_000,
            seed: 9,
            workers: 1,
        };
        let report = monte_carlo(&HardDecision, &code, &[4.0], &settings).unwrap();
        let p = &report.points[0];
        assert_eq!(p.bits_total, 140_000);
        let ber = p.ber();
        assert!(
            (ber - HARD_BER_4DB_HAMMING74).abs() < 0.10 * HARD_BER_4DB_HAMMING74,
            "ber {ber}"
        );
        assert!(p.bler() >= ber);
        let (lo, hi) = p.ber_ci();
        assert!(lo < ber && ber < hi);
    }

    #[test]
    fn noiseless_operating_point_has_zero_errors() {
        let code = hamming74();
        let settings = EvalSettings {
            min_blocks: 200,
            seed: 1,
            workers: 1,
        };
        let report = monte_carlo(&HardDecision, &code, &[200.0], &settings).unwrap();
        let p = &report.points[0];
        assert_eq!(p.bit_errors, 0);
        assert_eq!(p.block_errors, 0);
        assert!(p.neg_ln_ber().is_infinite());
    }

    #[test]
    fn monte_carlo_is_deterministic_even_with_workers() {
        let code = hamming74();
        let base = EvalSettings {
            min_blocks: 500,
            seed: 7,
            workers: 1,
        };
        let a = monte_carlo(&HardDecision, &code, &[4.0, 6.0], &base).unwrap();
        let b = monte_carlo(&HardDecision, &code, &[4.0, 6.0], &base).unwrap();
        assert_eq!(a.points, b.points);
        let two = EvalSettings { workers: 2, ..base };
        let c = monte_carlo(&HardDecision, &code, &[4.0, 6.0], &two).unwrap();
        let d = monte_carlo(&HardDecision, &code, &[4.0, 6.0], &two).unwrap();
        assert_eq!(c.points, d.points);
        assert_eq!(c.points[0].blocks_total, 500);
    }

    #[test]
    fn ml_oracle_decodes_noiseless_and_single_flip_words() {
        let code = hamming74();
        let oracle = MlOracle::new(&code).unwrap();
        assert_eq!(oracle.codebook_len(), 16);
        let params = ChannelParams::new(4.0, code.rate()).unwrap();

        let x = code.encode(&[1, 0, 1, 1]).unwrap();
        let y = noiseless(&code, &x);
        assert_eq!(oracle.decode(&y, &params).unwrap(), x);

        let mut y = noiseless(&code, &[0; 7]);
        y.values[0] = -1.0;
        assert_eq!(oracle.decode(&y, &params).unwrap(), vec![0; 7]);
    }

    #[test]
    fn ml_oracle_breaks_full_ties_toward_the_lowest_index() {
        let code = hamming74();
        let oracle = MlOracle::new(&code).unwrap();
        let params = ChannelParams::new(4.0, code.rate()).unwrap();
        let y = LlrVector {
            values: vec![0.0; 7],
            code_name: code.name.clone(),
        };
        // Every codeword is equidistant from the origin; index 0 encodes 0^k.
        assert_eq!(oracle.decode(&y, &params).unwrap(), vec![0; 7]);
    }

    #[test]
    fn ml_oracle_rejects_large_codebooks() {
        let err = MlOracle::new(&ldpc49_24()).unwrap_err();
        assert!(err.to_string().contains("k <= 20"));
    }

    #[test]
    fn bp_accepts_noiseless_words_immediately() {
        let code = hamming74();
        let x = code.encode(&[1, 1, 0, 1]).unwrap();
        let y = noiseless(&code, &x);
        let sigma = sigma_from_ebn0(4.0, code.rate()).unwrap();
        assert_eq!(bp_decode(&code, &y, sigma, 1).unwrap(), x);
    }

    #[test]
    fn bp_matches_map_on_the_cycle_free_repetition_code() {
        let code = repetition21();
        let oracle = MlOracle::new(&code).unwrap();
        let params = ChannelParams::new(2.0, code.rate()).unwrap();
        let mut rng = stream_rng(3, 0, 0);
        for _ in 0..500 {
            let message = vec![rng.random_range(0..=1u8)];
            let x = code.encode(&message).unwrap();
            let y = transmit(&code, &bpsk(&x), params.sigma, &mut rng).unwrap();
            let map = oracle.decode(&y, &params).unwrap();
            let bp = bp_decode(&code, &y, params.sigma, 5).unwrap();
            assert_eq!(bp, map);
        }
    }

    #[test]
    fn bp_agrees_with_ml_on_hamming74_at_high_snr() {
        let code = hamming74();
        let oracle = MlOracle::new(&code).unwrap();
        let bp = BpDecoder::with_default_iters(&code);
        let rate = agreement_rate(&oracle, &bp, &code, 6.0, 10_000, 17).unwrap();
        assert!(rate > 0.99, "agreement {rate}");
    }

    #[test]
    fn matched_noise_ordering_ml_bp_hard() {
        let code = hamming74();
        let oracle = MlOracle::new(&code).unwrap();
        let bp = BpDecoder::with_default_iters(&code);
        let reports =
            compare_decoders(&[&oracle, &bp, &HardDecision], &code, 4.0, 20_000, 23).unwrap();
        let (ml, bp, hard) = (&reports[0], &reports[1], &reports[2]);
        assert!(ml.bit_errors <= bp.bit_errors, "{} > {}", ml.bit_errors, bp.bit_errors);
        assert!(bp.bit_errors <= hard.bit_errors, "{} > {}", bp.bit_errors, hard.bit_errors);
        assert!(ml.bit_errors < hard.bit_errors);
    }

    #[test]
    fn wilson_interval_matches_reference_values() {
        let (lo, hi) = wilson_interval(5, 100);
        assert!((lo - 0.02154367915436796).abs() < 1e-12);
        assert!((hi - 0.11175046923191913).abs() < 1e-12);
        let (lo, hi) = wilson_interval(0, 100);
        assert!(lo.abs() < 1e-15);
        assert!((hi - 0.03699349820698568).abs() < 1e-12);
        let (lo, hi) = wilson_interval(100, 100);
        assert!((lo - 0.9630065017930143).abs() < 1e-12);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn csv_has_the_documented_columns() {
        let code = hamming74();
        let settings = EvalSettings {
            min_blocks: 100,
            seed: 2,
            workers: 1,
        };
        let report = monte_carlo(&HardDecision, &code, &[4.0], &settings).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "code,ebn0_db,ber,bler,neg_ln_ber,blocks,ci_low,ci_high"
        );
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 8);
        assert!(row.starts_with("hamming74,4,"));
    }

    #[test]
    fn aggregate_metrics_pool_errors_over_bits_and_blocks() {
        let report = EvalReport {
            decoder: "hard".into(),
            points: vec![
                PointReport {
                    code: "a".into(),
                    ebn0_db: 4.0,
                    bit_errors: 10,
                    bits_total: 100,
                    block_errors: 5,
                    blocks_total: 20,
                },
                PointReport {
                    code: "b".into(),
                    ebn0_db: 4.0,
                    bit_errors: 0,
                    bits_total: 300,
                    block_errors: 0,
                    blocks_total: 30,
                },
            ],
        };
        assert!((report.aber() - 10.0 / 400.0).abs() < 1e-15);
        assert!((report.abler() - 5.0 / 50.0).abs() < 1e-15);
    }

    fn toy_model_setup(seed: u64) -> (crate::gf2::CodeRegistry, Vec<CodeAttention>, UecctModel) {
        let registry = crate::gf2::toy_registry();
        let config = crate::model::ModelConfig::toy(registry.n_max(), registry.s_max());
        let attns = CodeAttention::for_registry(&registry, &config).unwrap();
        let model = UecctModel::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (registry, attns, model)
    }

    #[test]
    fn uecct_decoder_resolves_codes_from_its_registry() {
        let (registry, attns, model) = toy_model_setup(40);
        let decoder = UecctDecoder::new(&model, &registry, &attns, ForwardOptions::default());
        assert_eq!(decoder.name(), "uecct");

        for name in ["hamming74", "rm32_16"] {
            let code = registry.get(name).unwrap();
            let params = ChannelParams::new(5.0, code.rate()).unwrap();
            let x_s = bpsk(&vec![0; code.n]);
            let mut rng = ChaCha8Rng::seed_from_u64(41);
            let y = transmit(code, &x_s, params.sigma, &mut rng).unwrap();
            let x_hat = decoder.decode(&y, &params).unwrap();
            assert_eq!(x_hat.len(), code.n);
            assert!(x_hat.iter().all(|&b| b <= 1));
            assert_eq!(x_hat, decoder.decode(&y, &params).unwrap());
        }

        let stray = LlrVector {
            values: vec![1.0; 21],
            code_name: "rep21".into(),
        };
        let params = ChannelParams::new(5.0, 1.0 / 21.0).unwrap();
        assert!(decoder.decode(&stray, &params).is_err());
    }

    #[test]
    fn uecct_decoder_supports_threaded_monte_carlo() {
        let (registry, attns, model) = toy_model_setup(42);
        let decoder = UecctDecoder::new(&model, &registry, &attns, ForwardOptions::default());
        let code = registry.get("hamming74").unwrap();
        let settings = EvalSettings {
            min_blocks: 64,
            seed: 5,
            workers: 2,
        };
        let a = monte_carlo(&decoder, code, &[4.0], &settings).unwrap();
        let b = monte_carlo(&decoder, code, &[4.0], &settings).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.points[0].blocks_total, 64);
        assert_eq!(a.decoder, "uecct");
    }
}
