//! Attention-structure analyses and complexity accounting: Jensen-Shannon
//! divergence between attention heads, numerical rank of score matrices,
//! exact multiply-accumulate tallies for the sparse vs dense attention core,
//! and a flat-binary dump format for offline inspection.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::channel::LlrVector;
use crate::error::{Error, Result};
use crate::gf2::{CodeRegistry, CodeSpec};
use crate::model::{AttentionDump, CodeAttention, ForwardOptions, UecctModel};
use crate::tensor::Tensor;

/// Additive guard applied before normalizing distributions, so rows holding
/// exact zeros (masked attention) stay well-defined.
pub const JSD_EPS: f64 = 1e-12;

/// Jensen-Shannon divergence with base-2 logarithms, so the result lies in
/// [0, 1]. Inputs are non-negative weights; both are eps-guarded and
/// normalized before comparison.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "jsd inputs differ in length");
    assert!(!p.is_empty(), "jsd of empty distributions");
    let norm = |v: &[f64]| {
        let total: f64 = v.iter().map(|x| x + JSD_EPS).sum();
        v.iter().map(|x| (x + JSD_EPS) / total).collect::<Vec<f64>>()
    };
    let p = norm(p);
    let q = norm(q);
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        acc += 0.5 * (a * (a / m).log2() + b * (b / m).log2());
    }
    acc.clamp(0.0, 1.0)
}

/// Mean pairwise per-row JSD between attention heads, one value per layer.
/// A model whose heads share one attention matrix scores exactly zero.
pub fn head_similarity(dump: &AttentionDump) -> Vec<f64> {
    dump.layers
        .iter()
        .map(|layer| {
            let heads = &layer.probs;
            if heads.len() < 2 {
                return 0.0;
            }
            let rows = heads[0].shape()[0];
            let cols = heads[0].shape()[1];
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..heads.len() {
                for j in i + 1..heads.len() {
                    for r in 0..rows {
                        let a = &heads[i].data()[r * cols..(r + 1) * cols];
                        let b = &heads[j].data()[r * cols..(r + 1) * cols];
                        total += jsd(a, b);
                        pairs += 1;
                    }
                }
            }
            total / pairs as f64
        })
        .collect()
}

/// Numerical rank: singular values above eps * sigma_max * max(dim).
pub fn numerical_rank(m: &Tensor) -> usize {
    assert_eq!(m.shape().len(), 2, "rank analysis takes matrices");
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mat = DMatrix::from_row_slice(rows, cols, m.data());
    let sv = mat.singular_values();
    let sigma_max = sv.iter().cloned().fold(0.0f64, f64::max);
    let tau = f64::EPSILON * sigma_max * rows.max(cols) as f64;
    sv.iter().filter(|&&s| s > tau).count()
}

/// Numerical rank of every dumped score matrix: one Vec per layer, one entry
/// per head.
pub fn rank_analysis(dump: &AttentionDump) -> Vec<Vec<usize>> {
    dump.layers
        .iter()
        .map(|layer| layer.scores.iter().map(numerical_rank).collect())
        .collect()
}

/// Run one probe decode with attention capture enabled and return the dump.
/// The probe input is the noiseless all-zero transmission, so dumps are
/// reproducible without an RNG.
pub fn probe_dump(
    model: &UecctModel,
    registry: &CodeRegistry,
    attns: &[CodeAttention],
    code: &CodeSpec,
    masked: bool,
) -> Result<AttentionDump> {
    let idx = registry
        .index_of(&code.name)
        .ok_or_else(|| Error::config(format!("code '{}' is not registered", code.name)))?;
    let pre = crate::channel::preprocess(code, &probe_word(code))?;
    let std_in = crate::channel::standardize(registry, code, &pre)?;
    let features = Tensor::from_vec(&[1, model.config().input_len()], std_in.features);
    let tape = crate::tensor::Tape::new();
    let bound = model.bind(&tape);
    let opts = ForwardOptions {
        masked,
        sparse: false,
        dump_attention: true,
    };
    let out = model.forward(&tape, &bound, &features, &attns[idx], &opts);
    Ok(out.dump.expect("dump requested"))
}

fn probe_word(code: &CodeSpec) -> LlrVector {
    LlrVector {
        values: vec![1.0; code.n],
        code_name: code.name.clone(),
    }
}

/// Exact multiply-accumulate tallies for one decode, with the attention core
/// counted both sparsely (active mask entries only) and densely.
#[derive(Debug, Clone, Copy)]
pub struct MacReport {
    /// Attention-core MACs on the sparse path.
    pub sparse_core: u64,
    /// Attention-core MACs on the dense path.
    pub dense_core: u64,
    /// Memory-value projection MACs.
    pub vproj: u64,
    /// Attention output projection MACs.
    pub attn_out: u64,
    pub ffn: u64,
    pub head: u64,
    pub other: u64,
    /// Active entries in the code's attention mask.
    pub active_entries: usize,
    /// Active fraction of the padded (N, d_l) mask.
    pub padded_density: f64,
}

impl MacReport {
    /// Sparse over dense attention-core MACs; equals the padded mask density.
    pub fn core_ratio(&self) -> f64 {
        self.sparse_core as f64 / self.dense_core as f64
    }

    /// Percentage of attention-core MACs removed by the sparse path.
    pub fn core_reduction_percent(&self) -> f64 {
        100.0 * (1.0 - self.core_ratio())
    }

    /// Total MACs for a sparse-path decode.
    pub fn total_sparse(&self) -> u64 {
        self.sparse_core + self.shared()
    }

    /// Total MACs for a dense-path decode.
    pub fn total_dense(&self) -> u64 {
        self.dense_core + self.shared()
    }

    fn shared(&self) -> u64 {
        self.vproj + self.attn_out + self.ffn + self.head + self.other
    }
}

/// Decode one probe word twice (sparse and dense attention) and report the
/// exact MAC counts.
pub fn mac_report(
    model: &UecctModel,
    registry: &CodeRegistry,
    attns: &[CodeAttention],
    code: &CodeSpec,
) -> Result<MacReport> {
    let idx = registry
        .index_of(&code.name)
        .ok_or_else(|| Error::config(format!("code '{}' is not registered", code.name)))?;
    let y = probe_word(code);
    let sparse = model.decode(
        registry,
        attns,
        code,
        &y,
        &ForwardOptions {
            masked: true,
            sparse: true,
            dump_attention: false,
        },
    )?;
    let dense = model.decode(
        registry,
        attns,
        code,
        &y,
        &ForwardOptions {
            masked: true,
            sparse: false,
            dump_attention: false,
        },
    )?;
    let pattern = &attns[idx].pattern;
    let active = pattern.active_count();
    Ok(MacReport {
        sparse_core: sparse.macs.attn_core_sparse,
        dense_core: dense.macs.attn_core_dense,
        vproj: sparse.macs.attn_vproj,
        attn_out: sparse.macs.attn_out,
        ffn: sparse.macs.ffn,
        head: sparse.macs.head,
        other: sparse.macs.other,
        active_entries: active,
        padded_density: active as f64 / (pattern.rows() * pattern.cols()) as f64,
    })
}

/// Write a dump as flat little-endian f64 binary plus a CSV manifest:
/// `layer,head,kind,rows,cols,offset` with byte offsets into `dump.bin`.
/// Returns (binary path, manifest path).
pub fn write_attention_dump(dump: &AttentionDump, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest = String::from("layer,head,kind,rows,cols,offset\n");
    for (l, layer) in dump.layers.iter().enumerate() {
        for (kind, mats) in [("scores", &layer.scores), ("probs", &layer.probs)] {
            for (h, m) in mats.iter().enumerate() {
                manifest.push_str(&format!(
                    "{l},{h},{kind},{},{},{}\n",
                    m.shape()[0],
                    m.shape()[1],
                    blob.len()
                ));
                for &v in m.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let bin_path = dir.join("dump.bin");
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&bin_path, blob)?;
    std::fs::write(&manifest_path, manifest)?;
    Ok((bin_path, manifest_path))
}
