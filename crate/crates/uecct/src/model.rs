//! The decoder network: per-position embedding, a stack of pre-norm encoder
//! layers, and a two-stage output head.
//!
//! The unified variant replaces query/key/value projections with two learnable
//! memories per layer, A (attention scores) and V (value mixing), shared by
//! every head; a single softmax over A is broadcast to all heads, and the
//! code's parity structure restricts it to a fixed sparse support. A vanilla
//! multi-head self-attention variant is kept for baseline comparison and for
//! the rank and head-similarity analyses.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::channel::{postprocess, preprocess, standardize, LlrVector};
use crate::error::{Error, Result};
use crate::gf2::{CodeRegistry, CodeSpec};
use crate::mask::{code_mask, MASKED};
use crate::tensor::{
    bce_loss, embed, sparse_attention, MacCounts, MacTag, SparsePattern, TVar, Tape, Tensor,
};

/// Which attention mechanism the encoder layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Shared learnable memories A and V, one softmax broadcast to all heads.
    Unified,
    /// Standard scaled dot-product multi-head self-attention.
    Vanilla,
}

impl AttentionVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionVariant::Unified => "unified",
            AttentionVariant::Vanilla => "vanilla",
        }
    }

    pub fn from_name(name: &str) -> Result<AttentionVariant> {
        match name {
            "unified" => Ok(AttentionVariant::Unified),
            "vanilla" => Ok(AttentionVariant::Vanilla),
            other => Err(Error::config(format!(
                "unknown attention variant '{other}' (expected unified or vanilla)"
            ))),
        }
    }
}

/// Network hyperparameters.
///
/// `n_max`/`s_max` fix the padded input layout (input length N = n_max +
/// s_max), `d_l` is the shared-memory width and must cover the syndrome
/// budget of every code the model will see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_l: usize,
    pub d_f: usize,
    pub n_max: usize,
    pub s_max: usize,
    pub variant: AttentionVariant,
}

impl ModelConfig {
    /// Desk-scale defaults sized for the given registry dims.
    pub fn toy(n_max: usize, s_max: usize) -> ModelConfig {
        let (heads, d_k) = (2, 16);
        ModelConfig {
            layers: 2,
            heads,
            d_k,
            d_l: s_max,
            d_f: 4 * heads * d_k,
            n_max,
            s_max,
            variant: AttentionVariant::Unified,
        }
    }

    /// Model width.
    pub fn d_h(&self) -> usize {
        self.heads * self.d_k
    }

    /// Token count of the padded input.
    pub fn input_len(&self) -> usize {
        self.n_max + self.s_max
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_l", self.d_l),
            ("d_f", self.d_f),
            ("n_max", self.n_max),
            ("s_max", self.s_max),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model dimension {name} must be positive")));
            }
        }
        if self.d_l < self.s_max {
            return Err(Error::config(format!(
                "memory width d_l = {} cannot cover the syndrome budget s_max = {}",
                self.d_l, self.s_max
            )));
        }
        Ok(())
    }
}

/// Attention-side view of one registered code: the additive mask over the
/// memory axis and the matching sparse support.
#[derive(Debug, Clone)]
pub struct CodeAttention {
    pub code_name: String,
    /// (N, d_l) additive mask: 0 on the code's parity support, -1e30 elsewhere
    /// (including every column beyond the code's syndrome length).
    pub mask: Tensor,
    pub pattern: Arc<SparsePattern>,
}

impl CodeAttention {
    pub fn new(registry: &CodeRegistry, code: &CodeSpec, config: &ModelConfig) -> Result<CodeAttention> {
        if registry.n_max() > config.n_max || registry.s_max() > config.s_max {
            return Err(Error::config(format!(
                "registry needs n_max {} / s_max {} but the model provides {} / {}",
                registry.n_max(),
                registry.s_max(),
                config.n_max,
                config.s_max
            )));
        }
        let padded = code_mask(registry, code)?;
        let n = config.input_len();
        let mut mask = Tensor::from_vec(&[n, config.d_l], vec![MASKED; n * config.d_l]);
        // The padded mask covers columns [0, s_max); re-pad rows and columns
        // into the model's (possibly wider) layout.
        for r in 0..padded.rows() {
            for c in 0..padded.cols() {
                mask.data_mut()[r * config.d_l + c] = padded.value(r, c);
            }
        }
        let pattern = Arc::new(SparsePattern::new(
            n,
            config.d_l,
            padded.active().to_vec(),
        ));
        Ok(CodeAttention {
            code_name: code.name.clone(),
            mask,
            pattern,
        })
    }

    /// One attention view per registry code, indexed like the registry.
    pub fn for_registry(registry: &CodeRegistry, config: &ModelConfig) -> Result<Vec<CodeAttention>> {
        registry
            .codes()
            .iter()
            .map(|c| CodeAttention::new(registry, c, config))
            .collect()
    }
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Apply the code's parity mask (the ablation flag turns this off).
    pub masked: bool,
    /// Evaluate the attention core on the sparse support instead of densely.
    pub sparse: bool,
    /// Capture per-layer, per-head attention matrices for analysis.
    pub dump_attention: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            masked: true,
            sparse: true,
            dump_attention: false,
        }
    }
}

/// Per-layer attention capture from one forward pass (batch element 0).
#[derive(Debug, Clone)]
pub struct LayerAttention {
    /// Post-softmax attention matrix per head.
    pub probs: Vec<Tensor>,
    /// Pre-softmax score matrix per head.
    pub scores: Vec<Tensor>,
}

/// Attention matrices for every layer of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionDump {
    pub layers: Vec<LayerAttention>,
}

/// Live handles from a recorded forward pass.
pub struct ForwardResult<'t> {
    /// (B, n_max) flip probabilities.
    pub probs: TVar<'t>,
    /// (B, N, d_h) final hidden states before the head.
    pub hidden: TVar<'t>,
    pub dump: Option<AttentionDump>,
}

/// One same-code slice of a training batch.
#[derive(Debug, Clone)]
pub struct CodeGroup {
    /// Index into the registry / attention bank.
    pub code_index: usize,
    /// (B, N) standardized features.
    pub features: Tensor,
    /// (B, n_max) flip indicators, zero on padding.
    pub targets: Tensor,
    /// (B, n_max) supervision mask, 1 on the code's first n positions.
    pub active: Tensor,
}

/// Parameters bound to a tape as leaves, in model parameter order.
pub struct BoundParams<'t> {
    vars: Vec<TVar<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Gradients in parameter order; an error if any parameter was left out
    /// of the backward graph.
    pub fn grads(&self) -> Result<Vec<Tensor>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.grad().ok_or_else(|| {
                    Error::numerical(format!("parameter {i} received no gradient"))
                })
            })
            .collect()
    }
}

/// Decoder output for one received vector.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// Flip probabilities for the code's n positions.
    pub z_hat: Vec<f64>,
    /// Recovered codeword bits.
    pub x_hat: Vec<u8>,
    /// Forward-pass multiply-accumulate counts.
    pub macs: MacCounts,
}

/// The decoder network: named parameter tensors plus the config that shaped them.
#[derive(Debug)]
pub struct UecctModel {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl UecctModel {
    /// Fresh model with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights
    /// (fan_in = penultimate axis), zero biases, identity layer-norm affines.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<UecctModel> {
        config.validate()?;
        let n = config.input_len();
        let (d_h, d_k, d_l, d_f, heads) = (config.d_h(), config.d_k, config.d_l, config.d_f, config.heads);
        let mut params: Vec<(String, Tensor)> = Vec::new();
        let weight = |shape: &[usize], rng: &mut R| {
            let fan_in = shape[shape.len().saturating_sub(2)] as f64;
            let bound = 1.0 / fan_in.sqrt();
            Tensor::uniform(shape, -bound, bound, rng)
        };
        let ones = |len: usize| Tensor::from_vec(&[len], vec![1.0; len]);
        params.push(("embed.W".into(), weight(&[n, d_h], rng)));
        for i in 0..config.layers {
            match config.variant {
                AttentionVariant::Unified => {
                    params.push((format!("layer{i}.A_l"), weight(&[n, d_l], rng)));
                    params.push((format!("layer{i}.V_l"), weight(&[n, d_l], rng)));
                }
                AttentionVariant::Vanilla => {
                    params.push((format!("layer{i}.Wq"), weight(&[heads, d_k, d_k], rng)));
                    params.push((format!("layer{i}.Wk"), weight(&[heads, d_k, d_k], rng)));
                    params.push((format!("layer{i}.Wv"), weight(&[heads, d_k, d_k], rng)));
                }
            }
            params.push((format!("layer{i}.Wo"), weight(&[d_h, d_h], rng)));
            params.push((format!("layer{i}.ffn.w1"), weight(&[d_h, d_f], rng)));
            params.push((format!("layer{i}.ffn.b1"), Tensor::zeros(&[d_f])));
            params.push((format!("layer{i}.ffn.w2"), weight(&[d_f, d_h], rng)));
            params.push((format!("layer{i}.ffn.b2"), Tensor::zeros(&[d_h])));
            params.push((format!("layer{i}.ln1.gain"), ones(d_h)));
            params.push((format!("layer{i}.ln1.bias"), Tensor::zeros(&[d_h])));
            params.push((format!("layer{i}.ln2.gain"), ones(d_h)));
            params.push((format!("layer{i}.ln2.bias"), Tensor::zeros(&[d_h])));
        }
        params.push(("head.fc1.w".into(), weight(&[d_h, 1], rng)));
        params.push(("head.fc1.b".into(), Tensor::zeros(&[1])));
        params.push(("head.fc2.w".into(), weight(&[n, config.n_max], rng)));
        params.push(("head.fc2.b".into(), Tensor::zeros(&[config.n_max])));

        let index = params
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), i))
            .collect();
        Ok(UecctModel {
            config,
            params,
            index,
        })
    }

    /// Rebuild a model from named tensors (checkpoint loading); shapes are
    /// validated against a freshly initialized reference.
    pub fn from_params(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<UecctModel> {
        use rand::SeedableRng;
        let mut reference = UecctModel::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        if tensors.len() != reference.params.len() {
            return Err(Error::data(format!(
                "checkpoint holds {} tensors, model needs {}",
                tensors.len(),
                reference.params.len()
            )));
        }
        for (name, tensor) in tensors {
            let Some(&i) = reference.index.get(&name) else {
                return Err(Error::data(format!("checkpoint tensor '{name}' is not a model parameter")));
            };
            if reference.params[i].1.shape() != tensor.shape() {
                return Err(Error::data(format!(
                    "checkpoint tensor '{name}' has shape {:?}, model needs {:?}",
                    tensor.shape(),
                    reference.params[i].1.shape()
                )));
            }
            reference.params[i].1 = tensor;
        }
        Ok(reference)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Concatenation of all parameters in declaration order.
    pub fn flatten_params(&self) -> Tensor {
        let total = self.param_count();
        let mut data = Vec::with_capacity(total);
        for (_, t) in &self.params {
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(&[total], data)
    }

    /// Overwrite all parameters from a flat vector in declaration order.
    pub fn set_from_flat(&mut self, flat: &Tensor) -> Result<()> {
        if flat.numel() != self.param_count() {
            return Err(Error::data(format!(
                "flat parameter vector has {} entries, model needs {}",
                flat.numel(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (_, t) in &mut self.params {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Record every parameter as a leaf on `tape`, in declaration order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(_, t)| tape.leaf(t.clone()))
                .collect(),
        }
    }

    /// Bind every parameter as a view into one flat vector laid out like
    /// [`UecctModel::flatten_params`], so a loss built on the result sends its
    /// whole gradient into that single leaf. The flat values are used in place
    /// of the stored parameters.
    pub fn bind_flat<'t>(&self, flat: TVar<'t>) -> Result<BoundParams<'t>> {
        let got: usize = flat.shape().iter().product();
        if got != self.param_count() {
            return Err(Error::config(format!(
                "flat parameter vector has {got} elements, the model needs {}",
                self.param_count()
            )));
        }
        let mut vars = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (_, tensor) in &self.params {
            let n = tensor.numel();
            vars.push(flat.slice(offset, n).reshape(tensor.shape()));
            offset += n;
        }
        Ok(BoundParams { vars })
    }

    fn var<'t>(&self, bound: &BoundParams<'t>, name: &str) -> TVar<'t> {
        bound.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))]
    }

    /// Full network forward pass on standardized features of shape (B, N).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        features: &Tensor,
        attn: &CodeAttention,
        opts: &ForwardOptions,
    ) -> ForwardResult<'t> {
        let n = self.config.input_len();
        assert_eq!(
            features.shape().last(),
            Some(&n),
            "features shape {:?} does not end in input length {n}",
            features.shape()
        );
        let batch = features.numel() / n;
        let (heads, d_k, d_h) = (self.config.heads, self.config.d_k, self.config.d_h());

        let x = tape.leaf(features.clone());
        let mut h = embed(x, self.var(bound, "embed.W"));
        let mut dump = opts.dump_attention.then(AttentionDump::default);

        for i in 0..self.config.layers {
            let normed = h
                .layer_norm()
                .mul(self.var(bound, &format!("layer{i}.ln1.gain")))
                .add(self.var(bound, &format!("layer{i}.ln1.bias")));
            // (B, N, d_h) -> (B, H, N, d_k)
            let xh = normed
                .reshape(&[batch, n, heads, d_k])
                .transpose(1, 2);
            let (core, layer_dump) = match self.config.variant {
                AttentionVariant::Unified => self.unified_core(bound, i, xh, attn, opts),
                AttentionVariant::Vanilla => self.vanilla_core(bound, i, xh, opts),
            };
            if let (Some(d), Some(l)) = (dump.as_mut(), layer_dump) {
                d.layers.push(l);
            }
            let merged = core.transpose(1, 2).reshape(&[batch, n, d_h]);
            let attn_out = merged.matmul(self.var(bound, &format!("layer{i}.Wo")), MacTag::AttnOut);
            h = h.add_same(attn_out);

            let normed = h
                .layer_norm()
                .mul(self.var(bound, &format!("layer{i}.ln2.gain")))
                .add(self.var(bound, &format!("layer{i}.ln2.bias")));
            let f = normed
                .matmul(self.var(bound, &format!("layer{i}.ffn.w1")), MacTag::Ffn)
                .add(self.var(bound, &format!("layer{i}.ffn.b1")))
                .relu()
                .matmul(self.var(bound, &format!("layer{i}.ffn.w2")), MacTag::Ffn)
                .add(self.var(bound, &format!("layer{i}.ffn.b2")));
            h = h.add_same(f);
        }

        let token = h
            .matmul(self.var(bound, "head.fc1.w"), MacTag::Head)
            .add(self.var(bound, "head.fc1.b"))
            .reshape(&[batch, n]);
        let probs = token
            .matmul(self.var(bound, "head.fc2.w"), MacTag::Head)
            .add(self.var(bound, "head.fc2.b"))
            .sigmoid();
        ForwardResult {
            probs,
            hidden: h,
            dump,
        }
    }

    /// Shared-memory attention: one softmax over A, broadcast to every head.
    fn unified_core<'t>(
        &self,
        bound: &BoundParams<'t>,
        layer: usize,
        xh: TVar<'t>,
        attn: &CodeAttention,
        opts: &ForwardOptions,
    ) -> (TVar<'t>, Option<LayerAttention>) {
        let a = self.var(bound, &format!("layer{layer}.A_l"));
        let v = self.var(bound, &format!("layer{layer}.V_l"));
        // (d_l, N) x (B, H, N, d_k) -> (B, H, d_l, d_k)
        let m2 = v.transpose(0, 1).matmul(xh, MacTag::AttnVproj);
        let core = if opts.masked && opts.sparse {
            sparse_attention(a, &attn.pattern, m2)
        } else if opts.masked {
            a.softmax_masked(&attn.mask).matmul(m2, MacTag::AttnCoreDense)
        } else {
            a.softmax().matmul(m2, MacTag::AttnCoreDense)
        };
        let dump = opts.dump_attention.then(|| {
            // Heads share one matrix by construction; materialize the copies
            // so downstream analyses see the per-head layout.
            let tape = a.tape();
            let scores = a.value();
            let probs = if opts.masked {
                tape.leaf(scores.clone()).softmax_masked(&attn.mask).value()
            } else {
                tape.leaf(scores.clone()).softmax().value()
            };
            LayerAttention {
                probs: vec![probs; self.config.heads],
                scores: vec![scores; self.config.heads],
            }
        });
        (core, dump)
    }

    /// Standard scaled dot-product attention with per-head square projections.
    fn vanilla_core<'t>(
        &self,
        bound: &BoundParams<'t>,
        layer: usize,
        xh: TVar<'t>,
        opts: &ForwardOptions,
    ) -> (TVar<'t>, Option<LayerAttention>) {
        let n = self.config.input_len();
        let q = xh.matmul(self.var(bound, &format!("layer{layer}.Wq")), MacTag::AttnVproj);
        let k = xh.matmul(self.var(bound, &format!("layer{layer}.Wk")), MacTag::AttnVproj);
        let v = xh.matmul(self.var(bound, &format!("layer{layer}.Wv")), MacTag::AttnVproj);
        let scores = q
            .matmul(k.transpose(2, 3), MacTag::AttnCoreDense)
            .scale(1.0 / (self.config.d_k as f64).sqrt());
        let probs = scores.softmax();
        let core = probs.matmul(v, MacTag::AttnCoreDense);
        let dump = opts.dump_attention.then(|| {
            // Batch element 0, each head separately.
            let sv = scores.value();
            let pv = probs.value();
            let per_head = |t: &Tensor| {
                (0..self.config.heads)
                    .map(|h| {
                        Tensor::from_vec(&[n, n], t.data()[h * n * n..(h + 1) * n * n].to_vec())
                    })
                    .collect::<Vec<_>>()
            };
            LayerAttention {
                probs: per_head(&pv),
                scores: per_head(&sv),
            }
        });
        (core, dump)
    }

    /// Summed binary cross entropy over a mixed-code batch.
    ///
    /// Each group runs its own forward pass (one mask per code), all sharing
    /// the same bound parameters so gradients accumulate across groups.
    /// Returns the loss variable and the total sample count.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        groups: &[CodeGroup],
        attns: &[CodeAttention],
        opts: &ForwardOptions,
    ) -> Result<(TVar<'t>, usize)> {
        if groups.is_empty() {
            return Err(Error::data("batch contains no samples"));
        }
        let mut total: Option<TVar<'t>> = None;
        let mut samples = 0;
        for group in groups {
            let attn = attns.get(group.code_index).ok_or_else(|| {
                Error::data(format!("code index {} has no attention view", group.code_index))
            })?;
            let out = self.forward(tape, bound, &group.features, attn, opts);
            let loss = bce_loss(out.probs, &group.targets, &group.active);
            samples += group.features.numel() / self.config.input_len();
            total = Some(match total {
                Some(t) => t.add_same(loss),
                None => loss,
            });
        }
        Ok((total.expect("non-empty groups"), samples))
    }

    /// End-to-end decode of one received vector.
    pub fn decode(
        &self,
        registry: &CodeRegistry,
        attns: &[CodeAttention],
        code: &CodeSpec,
        y: &LlrVector,
        opts: &ForwardOptions,
    ) -> Result<Decoded> {
        let idx = registry
            .index_of(&code.name)
            .ok_or_else(|| Error::config(format!("code '{}' is not registered", code.name)))?;
        let attn = &attns[idx];
        let pre = preprocess(code, y)?;
        let std_in = standardize(registry, code, &pre)?;
        let features = Tensor::from_vec(&[1, self.config.input_len()], std_in.features.clone());

        let tape = Tape::new();
        let bound = self.bind(&tape);
        let out = self.forward(&tape, &bound, &features, attn, opts);
        let probs = out.probs.value();
        let z_hat: Vec<f64> = probs.data()[..code.n].to_vec();
        // Flip estimate 1 at probability > 1/2; exact 0.5 stays "no flip".
        let z_sign: Vec<f64> = z_hat
            .iter()
            .map(|&p| if p > 0.5 { -1.0 } else { 1.0 })
            .collect();
        let x_hat = postprocess(y, &z_sign)?;
        Ok(Decoded {
            z_hat,
            x_hat,
            macs: tape.macs(),
        })
    }
}

/// Same-shape residual add (the suffix-broadcast `add` covers it, this alias
/// just states the intent at call sites).
trait AddSame<'t> {
    fn add_same(self, rhs: TVar<'t>) -> TVar<'t>;
}

impl<'t> AddSame<'t> for TVar<'t> {
    fn add_same(self, rhs: TVar<'t>) -> TVar<'t> {
        assert_eq!(self.shape(), rhs.shape(), "residual shapes differ");
        self.add(rhs)
    }
}
