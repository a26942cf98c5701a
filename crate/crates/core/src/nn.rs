//! Parameter bank, layer building blocks, and attention primitives.
//!
//! Parameters live in a flat [`ParamBank`] as plain `f64` buffers. A forward
//! pass runs inside a [`Ctx`], which materializes each parameter as a tensor
//! leaf on demand — on the context's tape when training, as a constant when
//! evaluating — so the exact same layer code serves both modes. Batch-level
//! data parallelism uses one context (and therefore one tape) per sample;
//! per-parameter gradients are merged afterwards in parameter order.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel_of, Gradients, SurrogateKind, Tape, Tensor};

// ── Parameter storage ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Flat, ordered parameter store. Registration order is the canonical
/// parameter order used for gradient merges and persistence.
#[derive(Clone, Debug, Default)]
pub struct ParamBank {
    params: Vec<Param>,
}

impl ParamBank {
    pub fn new() -> Self {
        ParamBank { params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        debug_assert_eq!(numel_of(&shape), value.len(), "param {name}");
        self.params.push(Param {
            name: name.to_string(),
            shape,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Overwrite a parameter's values (weight surgery in tests, loading).
    pub fn set_value(&mut self, id: ParamId, value: Vec<f64>) -> Result<()> {
        let p = self.get_mut(id);
        if value.len() != p.value.len() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: p.shape.clone(),
                right: vec![value.len()],
            });
        }
        p.value = value;
        Ok(())
    }
}

/// Xavier-uniform initialization.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

// ── Forward context ──────────────────────────────────────────────────

/// Per-forward-pass context: resolves parameters to tensors, carries the
/// train/eval switch, strict-mode assertions, the smooth-spike flag used by
/// gradient checks, and a deterministic RNG for dropout masks.
pub struct Ctx<'a> {
    pub bank: &'a ParamBank,
    pub tape: Option<Tape>,
    pub train: bool,
    pub strict: bool,
    /// Replace the hard spike step with its smooth surrogate forward.
    pub smooth_spikes: bool,
    pub surrogate: SurrogateKind,
    rng: Option<RefCell<ChaCha8Rng>>,
    cache: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Ctx<'a> {
    /// Evaluation context: constants, no dropout, no recording.
    pub fn eval(bank: &'a ParamBank, surrogate: SurrogateKind) -> Ctx<'a> {
        Ctx {
            bank,
            tape: None,
            train: false,
            strict: false,
            smooth_spikes: false,
            surrogate,
            rng: None,
            cache: RefCell::new(vec![None; bank.len()]),
        }
    }

    /// Training context recording on `tape`, with a per-sample RNG.
    pub fn train(bank: &'a ParamBank, surrogate: SurrogateKind, tape: Tape, rng: ChaCha8Rng) -> Ctx<'a> {
        Ctx {
            bank,
            tape: Some(tape),
            train: true,
            strict: false,
            smooth_spikes: false,
            surrogate,
            rng: Some(RefCell::new(rng)),
            cache: RefCell::new(vec![None; bank.len()]),
        }
    }

    /// Evaluation-mode context whose parameters resolve to the given
    /// tensors (one per bank entry, in bank order) instead of the bank's
    /// stored values. This is how gradient checks drive a whole model from
    /// externally owned leaves.
    pub fn with_param_tensors(
        bank: &'a ParamBank,
        surrogate: SurrogateKind,
        tensors: Vec<Tensor>,
    ) -> Result<Ctx<'a>> {
        if tensors.len() != bank.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                bank.len(),
                tensors.len()
            )));
        }
        Ok(Ctx {
            bank,
            tape: None,
            train: false,
            strict: false,
            smooth_spikes: false,
            surrogate,
            rng: None,
            cache: RefCell::new(tensors.into_iter().map(Some).collect()),
        })
    }

    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn with_smooth_spikes(mut self, smooth: bool) -> Self {
        self.smooth_spikes = smooth;
        self
    }

    /// Resolve a parameter to a tensor, creating the leaf on first use.
    pub fn param(&self, id: ParamId) -> Result<Tensor> {
        if let Some(t) = &self.cache.borrow()[id.0] {
            return Ok(t.clone());
        }
        let p = self.bank.get(id);
        let t = match &self.tape {
            Some(tape) => tape.leaf(p.value.clone(), p.shape.clone(), true)?,
            None => Tensor::new(p.value.clone(), p.shape.clone())?,
        };
        self.cache.borrow_mut()[id.0] = Some(t.clone());
        Ok(t)
    }

    /// Wrap plain data as an input tensor (non-gradient leaf when recording).
    pub fn input(&self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        match &self.tape {
            Some(tape) => tape.leaf(data, shape, false),
            None => Tensor::new(data, shape),
        }
    }

    /// Train-time inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&self, x: &Tensor, rate: f64) -> Result<Tensor> {
        if !self.train || rate <= 0.0 {
            return Ok(x.clone());
        }
        if rate >= 1.0 {
            return Err(Error::config(format!("dropout rate {rate} out of [0, 1)")));
        }
        let keep = 1.0 - rate;
        let rng_cell = self
            .rng
            .as_ref()
            .ok_or_else(|| Error::contract("training context needs an RNG for dropout"))?;
        let mut rng = rng_cell.borrow_mut();
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        drop(rng);
        let mask_t = self.input(mask, x.shape().to_vec())?;
        x.mul(&mask_t)
    }

    /// Collect per-parameter gradients (bank order) from a backward sweep.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        let cache = self.cache.borrow();
        (0..self.bank.len())
            .map(|i| {
                cache[i]
                    .as_ref()
                    .and_then(|t| grads.wrt(t))
                    .map(|g| g.to_vec())
            })
            .collect()
    }
}

// ── Layers ───────────────────────────────────────────────────────────

/// Dense layer `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init(bank: &mut ParamBank, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = bank.register(
            &format!("{name}.w"),
            vec![d_in, d_out],
            xavier(rng, d_in, d_out, d_in * d_out),
        );
        let b = bank.register(&format!("{name}.b"), vec![d_out], vec![0.0; d_out]);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let last = *x.shape().last().ok_or_else(|| Error::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: vec![self.d_in],
        })?;
        if last != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: x.shape().to_vec(),
                right: vec![self.d_in, self.d_out],
            });
        }
        let w = ctx.param(self.w)?;
        let b = ctx.param(self.b)?;
        x.matmul(&w)?.add(&b)
    }
}

/// Per-feature normalization over the token axis (axis 0) with a learnable
/// per-feature gain and bias. This is the batch-norm stand-in used inside
/// encoder and spiking blocks: statistics come from the tokens of the
/// current sample rather than from a running batch.
#[derive(Clone, Debug)]
pub struct FeatureNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

pub const FEATURE_NORM_EPS: f64 = 1e-5;

impl FeatureNorm {
    pub fn init(bank: &mut ParamBank, name: &str, d: usize) -> Self {
        let gain = bank.register(&format!("{name}.gain"), vec![d], vec![1.0; d]);
        let bias = bank.register(&format!("{name}.bias"), vec![d], vec![0.0; d]);
        FeatureNorm { gain, bias, d }
    }

    /// `x` is `[tokens, d]`; each column is centered and scaled.
    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.d {
            return Err(Error::ShapeMismatch {
                op: "feature_norm",
                left: x.shape().to_vec(),
                right: vec![self.d],
            });
        }
        let mu = x.mean_axis(0)?; // [d]
        let centered = x.sub(&mu)?;
        let var = centered.mul(&centered)?.mean_axis(0)?;
        let denom = var.shift(FEATURE_NORM_EPS)?.sqrt()?;
        let norm = centered.div(&denom)?;
        let gain = ctx.param(self.gain)?;
        let bias = ctx.param(self.bias)?;
        norm.mul(&gain)?.add(&bias)
    }
}

/// Layer norm over the last axis with learnable gain/bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

impl LayerNorm {
    pub fn init(bank: &mut ParamBank, name: &str, d: usize) -> Self {
        let gain = bank.register(&format!("{name}.gain"), vec![d], vec![1.0; d]);
        let bias = bank.register(&format!("{name}.bias"), vec![d], vec![0.0; d]);
        LayerNorm { gain, bias, d }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let gain = ctx.param(self.gain)?;
        let bias = ctx.param(self.bias)?;
        x.layer_norm(&gain, &bias)
    }
}

/// Two-layer perceptron with ReLU, used as the residual MLP in attention
/// blocks.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn init(bank: &mut ParamBank, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) -> Self {
        Mlp {
            l1: Linear::init(bank, rng, &format!("{name}.fc1"), d, hidden),
            l2: Linear::init(bank, rng, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.forward(ctx, x)?.relu()?;
        self.l2.forward(ctx, &h)
    }
}

// ── Attention ────────────────────────────────────────────────────────

/// Single-head scaled dot-product attention with learned Q/K/V projections.
/// Queries come from the first argument, keys and values from the second.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub d: usize,
}

impl Attention {
    pub fn init(bank: &mut ParamBank, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        let mut reg = |suffix: &str, rng: &mut ChaCha8Rng| {
            bank.register(&format!("{name}.{suffix}"), vec![d, d], xavier(rng, d, d, d * d))
        };
        let wq = reg("wq", rng);
        let wk = reg("wk", rng);
        let wv = reg("wv", rng);
        Attention { wq, wk, wv, d }
    }

    /// `query`: `[nq, d]`, `source`: `[nk, d]` -> `[nq, d]`.
    pub fn forward(&self, ctx: &Ctx, query: &Tensor, source: &Tensor) -> Result<Tensor> {
        if query.shape().last() != Some(&self.d) || source.shape().last() != Some(&self.d) {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: query.shape().to_vec(),
                right: source.shape().to_vec(),
            });
        }
        let q = query.matmul(&ctx.param(self.wq)?)?;
        let k = source.matmul(&ctx.param(self.wk)?)?;
        let v = source.matmul(&ctx.param(self.wv)?)?;
        let scores = q.matmul(&k.t()?)?.scale(1.0 / (self.d as f64).sqrt())?;
        scores.softmax()?.matmul(&v)
    }

    /// Self-attention: queries, keys, and values from the same tokens.
    pub fn self_forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.forward(ctx, x, x)
    }
}

/// Multi-head cross-attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub d: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init(
        bank: &mut ParamBank,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention width {d} is not divisible into {heads} heads"
            )));
        }
        let mut reg = |suffix: &str, rng: &mut ChaCha8Rng| {
            bank.register(&format!("{name}.{suffix}"), vec![d, d], xavier(rng, d, d, d * d))
        };
        let wq = reg("wq", rng);
        let wk = reg("wk", rng);
        let wv = reg("wv", rng);
        let wo = reg("wo", rng);
        Ok(MultiHeadAttention {
            wq,
            wk,
            wv,
            wo,
            d,
            heads,
        })
    }

    /// `query`: `[nq, d]`, `source`: `[nk, d]` -> `[nq, d]`.
    pub fn forward(&self, ctx: &Ctx, query: &Tensor, source: &Tensor) -> Result<Tensor> {
        let q = query.matmul(&ctx.param(self.wq)?)?;
        let k = source.matmul(&ctx.param(self.wk)?)?;
        let v = source.matmul(&ctx.param(self.wv)?)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = k.slice(1, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            let scores = qh.matmul(&kh.t()?)?.scale(scale)?;
            head_outs.push(scores.softmax()?.matmul(&vh)?);
        }
        // Concatenate heads back along the feature axis via transpose:
        // [n, dh] heads -> [dh, n] stacked -> [d, n] -> [n, d].
        let transposed: Vec<Tensor> = head_outs
            .iter()
            .map(|t| t.t())
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = transposed.iter().collect();
        let stacked = Tensor::concat0(&refs)?; // [d, n]
        let merged = stacked.t()?; // [n, d]
        merged.matmul(&ctx.param(self.wo)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn linear_zero_bias_maps_zero_to_zero() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let lin = Linear::init(&mut bank, &mut r, "l", 3, 2);
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let x = Tensor::zeros(vec![4, 3]);
        let y = lin.forward(&ctx, &x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feature_norm_of_zeros_is_zero_with_fresh_params() {
        let mut bank = ParamBank::new();
        let norm = FeatureNorm::init(&mut bank, "n", 3);
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let x = Tensor::zeros(vec![2, 3]);
        let y = norm.forward(&ctx, &x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_with_zero_source_outputs_zero() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let attn = Attention::init(&mut bank, &mut r, "a", 4);
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let q = Tensor::filled(vec![2, 4], 0.5);
        let s = Tensor::zeros(vec![3, 4]);
        let y = attn.forward(&ctx, &q, &s).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn multi_head_rejects_bad_split() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        assert!(MultiHeadAttention::init(&mut bank, &mut r, "m", 6, 4).is_err());
    }

    #[test]
    fn multi_head_shapes() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let mha = MultiHeadAttention::init(&mut bank, &mut r, "m", 8, 2).unwrap();
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let q = Tensor::filled(vec![3, 8], 0.1);
        let s = Tensor::filled(vec![5, 8], 0.2);
        let y = mha.forward(&ctx, &q, &s).unwrap();
        assert_eq!(y.shape(), &[3, 8]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let bank = ParamBank::new();
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let x = Tensor::filled(vec![8], 2.0);
        let y = ctx.dropout(&x, 0.5).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_scales_by_keep_probability() {
        let mut bank = ParamBank::new();
        let mut r = rng();
        let _ = Linear::init(&mut bank, &mut r, "l", 1, 1);
        let tape = Tape::new();
        let ctx = Ctx::train(&bank, SurrogateKind::default(), tape, rng());
        let x = Tensor::filled(vec![32], 1.0);
        let y = ctx.dropout(&x, 0.25).unwrap();
        for v in y.data() {
            assert!(*v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-12);
        }
    }
}
