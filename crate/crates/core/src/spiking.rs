//! Leaky integrate-and-fire dynamics, spiking layers, spiking self-attention,
//! and the multi-stage timestep-shrinkage body.
//!
//! The discrete update is explicit Euler with a unit step:
//! `v <- v * (1 - 1/tau) + (R/tau) * I`, spike where `v >= v_th` (inclusive),
//! spiking neurons reset to `v_reset`. Forward spikes are hard steps; the
//! backward rule is the surrogate configured on the context.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::EventGrid;
use crate::nn::{Ctx, FeatureNorm, Linear, ParamBank};
use crate::tensor::{Tensor, MINMAX_EPS};

// ── Neuron parameters and state ──────────────────────────────────────

/// LIF neuron constants.
#[derive(Clone, Copy, Debug)]
pub struct LifParams {
    /// Membrane time constant in timesteps; must exceed 1.
    pub tau_m: f64,
    /// Membrane resistance (dimensionless gain).
    pub r: f64,
    /// Potential a neuron resets to after spiking.
    pub v_reset: f64,
    /// Initial spiking threshold; must exceed `v_reset`.
    pub v_th_init: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau_m: 2.0,
            r: 1.0,
            v_reset: 0.0,
            v_th_init: 1.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m > 1.0) {
            return Err(Error::config(format!("tau_m must be > 1, got {}", self.tau_m)));
        }
        if !(self.v_th_init > self.v_reset) {
            return Err(Error::config(format!(
                "v_th_init ({}) must exceed v_reset ({})",
                self.v_th_init, self.v_reset
            )));
        }
        Ok(())
    }

    /// Clamp bounds applied to dynamic thresholds.
    pub fn threshold_bounds(&self) -> (f64, f64) {
        (0.1_f64.min(self.v_th_init), 10.0 * self.v_th_init)
    }
}

/// Per-layer neuron state carried across timesteps.
#[derive(Clone, Debug)]
pub struct LifState {
    /// Membrane potential per neuron.
    pub v: Tensor,
    /// Current threshold (scalar per layer, time-varying under dynamic
    /// threshold modulation).
    pub v_th: Tensor,
    /// Last emitted spike tensor.
    pub spikes: Tensor,
}

impl LifState {
    /// Fresh state: potentials at `v_reset`, threshold at `v_th_init`.
    pub fn init(ctx: &Ctx, shape: &[usize], params: &LifParams) -> Result<LifState> {
        params.validate()?;
        let n = shape.iter().product();
        Ok(LifState {
            v: ctx.input(vec![params.v_reset; n], shape.to_vec())?,
            v_th: ctx.input(vec![params.v_th_init], vec![1])?,
            spikes: ctx.input(vec![0.0; n], shape.to_vec())?,
        })
    }
}

/// One LIF step. Returns the advanced state and the emitted spikes.
///
/// Forward uses the hard step (smooth surrogate forward when the context's
/// `smooth_spikes` flag is set, so finite differences can cross-check the
/// tape); backward always uses the surrogate derivative.
pub fn lif_step(
    ctx: &Ctx,
    state: &LifState,
    input_current: &Tensor,
    params: &LifParams,
) -> Result<(LifState, Tensor)> {
    if input_current.shape() != state.v.shape() {
        return Err(Error::ShapeMismatch {
            op: "lif_step",
            left: state.v.shape().to_vec(),
            right: input_current.shape().to_vec(),
        });
    }
    let leak = 1.0 - 1.0 / params.tau_m;
    let gain = params.r / params.tau_m;
    let charged = state.v.scale(leak)?.add(&input_current.scale(gain)?)?;
    let spikes = charged.sub(&state.v_th)?.heaviside(ctx.surrogate, ctx.smooth_spikes)?;
    // v(t+) = v * (1 - s) + v_reset * s
    let keep = spikes.affine(-1.0, 1.0)?;
    let mut v_after = charged.mul(&keep)?;
    if params.v_reset != 0.0 {
        v_after = v_after.add(&spikes.scale(params.v_reset)?)?;
    }
    if ctx.strict && !ctx.smooth_spikes {
        assert_spikes_binary(&spikes)?;
        for (s, v) in spikes.data().iter().zip(v_after.data()) {
            if *s == 1.0 && *v != params.v_reset {
                return Err(Error::contract(format!(
                    "reset invariant violated: spiked neuron has v = {v}"
                )));
            }
        }
    }
    Ok((
        LifState {
            v: v_after,
            v_th: state.v_th.clone(),
            spikes: spikes.clone(),
        },
        spikes,
    ))
}

fn assert_spikes_binary(t: &Tensor) -> Result<()> {
    for v in t.data() {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::contract(format!("non-binary spike value {v}")));
        }
    }
    Ok(())
}

// ── Dynamic thresholds ───────────────────────────────────────────────

/// Scalar modulation factor `phi + omega` from semantic and motion
/// statistics.
///
/// `phi` is the sigmoid of the pooled semantic tensor. `omega` combines the
/// min-max-normalized semantics `N(S)` with the motion grid's per-feature
/// time average (broadcast across `S` when the widths line up, collapsed to
/// its scalar mean otherwise): `omega = mean(-N(S) * log(1/N(S) + E))`.
pub fn threshold_factor(semantics: &Tensor, motion: &Tensor) -> Result<Tensor> {
    let phi = semantics.mean_all()?.sigmoid()?;
    let feature_mean = if motion.shape().len() >= 2 {
        let pooled = motion.mean_axis(0)?;
        let n: usize = pooled.numel();
        pooled.reshape(vec![n])?
    } else {
        motion.clone()
    };
    let semantic_width = semantics.shape().last().copied().unwrap_or(0);
    let e_term = if feature_mean.numel() == semantic_width {
        feature_mean
    } else {
        feature_mean.mean_all()?
    };
    let n = semantics.minmax_norm(MINMAX_EPS)?;
    let inv_n = Tensor::filled(n.shape().to_vec(), 1.0).div(&n)?;
    let arg = inv_n.add(&e_term)?;
    let omega = n.neg()?.mul(&arg.log()?)?.mean_all()?;
    phi.add(&omega)
}

/// Advance a threshold: `clamp((phi + omega) * v_th_prev)` with the bounds
/// from [`LifParams::threshold_bounds`].
pub fn dynamic_threshold(
    v_th_prev: &Tensor,
    semantics: &Tensor,
    motion: &EventGrid,
    params: &LifParams,
) -> Result<Tensor> {
    let factor = threshold_factor(semantics, motion.tensor())?;
    apply_threshold_factor(v_th_prev, &factor, params)
}

/// Multiply a threshold by a precomputed factor and clamp.
pub fn apply_threshold_factor(
    v_th_prev: &Tensor,
    factor: &Tensor,
    params: &LifParams,
) -> Result<Tensor> {
    let (lo, hi) = params.threshold_bounds();
    v_th_prev.mul(factor)?.clamp(lo, hi)
}

// ── Timestep schedule ────────────────────────────────────────────────

/// Strictly decreasing multi-stage timestep plan `(T_i, m_i)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSchedule {
    stages: Vec<(usize, usize)>,
}

impl StageSchedule {
    pub fn new(stages: Vec<(usize, usize)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::contract("schedule must have at least one stage"));
        }
        for (t, m) in &stages {
            if *t < 1 {
                return Err(Error::contract("stage timesteps must be >= 1"));
            }
            if *m < 1 {
                return Err(Error::contract("stage unit counts must be >= 1"));
            }
        }
        for w in stages.windows(2) {
            if w[1].0 >= w[0].0 {
                return Err(Error::contract(format!(
                    "stage timesteps must be strictly decreasing, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(StageSchedule { stages })
    }

    pub fn single(t: usize) -> Result<Self> {
        StageSchedule::new(vec![(t, 1)])
    }

    pub fn stages(&self) -> &[(usize, usize)] {
        &self.stages
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn first_timesteps(&self) -> usize {
        self.stages[0].0
    }
}

/// Average inference timestep: `sum(m_i * T_i) / sum(m_i)`.
pub fn average_timestep(schedule: &StageSchedule) -> f64 {
    let num: usize = schedule.stages.iter().map(|(t, m)| t * m).sum();
    let den: usize = schedule.stages.iter().map(|(_, m)| m).sum();
    num as f64 / den as f64
}

/// Compress a step sequence to `t_next` contiguous bins (sizes differing by
/// at most one, larger bins first); each output step is its bin's mean.
pub fn shrink_timesteps(xs: &[Tensor], t_next: usize) -> Result<Vec<Tensor>> {
    let t = xs.len();
    if t_next >= t {
        return Err(Error::contract(format!(
            "shrink_timesteps needs t_next < t, got {t_next} >= {t}"
        )));
    }
    if t_next == 0 {
        return Err(Error::contract("shrink_timesteps needs t_next >= 1"));
    }
    let base = t / t_next;
    let rem = t % t_next;
    let mut out = Vec::with_capacity(t_next);
    let mut cursor = 0usize;
    for b in 0..t_next {
        let size = if b < rem { base + 1 } else { base };
        let mut acc = xs[cursor].clone();
        for s in 1..size {
            acc = acc.add(&xs[cursor + s])?;
        }
        out.push(acc.scale(1.0 / size as f64)?);
        cursor += size;
    }
    Ok(out)
}

// ── Spiking layers ───────────────────────────────────────────────────

/// A linear projection feeding a LIF layer, optionally normalized.
#[derive(Clone, Debug)]
pub struct SpikingLinear {
    pub lin: Linear,
    pub norm: Option<FeatureNorm>,
    pub d_out: usize,
}

impl SpikingLinear {
    pub fn init(
        bank: &mut ParamBank,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_norm: bool,
    ) -> Self {
        let lin = Linear::init(bank, rng, name, d_in, d_out);
        let norm = with_norm.then(|| FeatureNorm::init(bank, &format!("{name}.norm"), d_out));
        SpikingLinear { lin, norm, d_out }
    }

    /// One timestep: current = (norm of) `x W + b`, then a LIF step.
    ///
    /// `expect_binary` turns on the strict-mode input contract; the first
    /// layer of a stage legitimately receives real-valued bin means.
    pub fn step(
        &self,
        ctx: &Ctx,
        x: &Tensor,
        state: &LifState,
        params: &LifParams,
        expect_binary: bool,
    ) -> Result<(LifState, Tensor)> {
        if ctx.strict && expect_binary && !ctx.smooth_spikes {
            for v in x.data() {
                if *v != 0.0 && *v != 1.0 {
                    return Err(Error::contract(format!(
                        "strict mode: spiking layer expected binary input, found {v}"
                    )));
                }
            }
        }
        let mut current = self.lin.forward(ctx, x)?;
        if let Some(norm) = &self.norm {
            current = norm.forward(ctx, &current)?;
        }
        lif_step(ctx, state, &current, params)
    }
}

/// Softmax-free spiking self-attention: binary Q/K/V from spiking
/// projections, `G = (Q K^T V) * s` with `s = 1/d`, and a spiking output
/// path `SNN(BN(Linear(G)))`.
#[derive(Clone, Debug)]
pub struct SpikingAttention {
    pub q: SpikingLinear,
    pub k: SpikingLinear,
    pub v: SpikingLinear,
    pub out: SpikingLinear,
    pub d: usize,
}

impl SpikingAttention {
    pub fn init(bank: &mut ParamBank, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("spiking attention width must be positive"));
        }
        Ok(SpikingAttention {
            q: SpikingLinear::init(bank, rng, &format!("{name}.q"), d, d, false),
            k: SpikingLinear::init(bank, rng, &format!("{name}.k"), d, d, false),
            v: SpikingLinear::init(bank, rng, &format!("{name}.v"), d, d, false),
            out: SpikingLinear::init(bank, rng, &format!("{name}.out"), d, d, true),
            d,
        })
    }
}

/// Runtime state for one attention block (four LIF layers).
pub struct SpikingAttentionState {
    q: LifState,
    k: LifState,
    v: LifState,
    out: LifState,
}

impl SpikingAttention {
    pub fn init_state(&self, ctx: &Ctx, tokens: usize, params: &LifParams) -> Result<SpikingAttentionState> {
        let shape = [tokens, self.d];
        Ok(SpikingAttentionState {
            q: LifState::init(ctx, &shape, params)?,
            k: LifState::init(ctx, &shape, params)?,
            v: LifState::init(ctx, &shape, params)?,
            out: LifState::init(ctx, &shape, params)?,
        })
    }

    /// One timestep over `[tokens, d]` input.
    pub fn step(
        &self,
        ctx: &Ctx,
        x: &Tensor,
        state: &mut SpikingAttentionState,
        params: &LifParams,
        expect_binary: bool,
    ) -> Result<Tensor> {
        let (qs, q_spikes) = self.q.step(ctx, x, &state.q, params, expect_binary)?;
        let (ks, k_spikes) = self.k.step(ctx, x, &state.k, params, expect_binary)?;
        let (vs, v_spikes) = self.v.step(ctx, x, &state.v, params, expect_binary)?;
        state.q = qs;
        state.k = ks;
        state.v = vs;
        let g = spiking_attention_scores(&q_spikes, &k_spikes, &v_spikes, self.d)?;
        let (os, out_spikes) = self.out.step(ctx, &g, &state.out, params, false)?;
        state.out = os;
        Ok(out_spikes)
    }
}

/// `G = (Q K^T V) * s` with the softmax-free scale `s = 1/d`.
pub fn spiking_attention_scores(q: &Tensor, k: &Tensor, v: &Tensor, d: usize) -> Result<Tensor> {
    if d == 0 {
        return Err(Error::config("attention width must be positive"));
    }
    q.matmul(&k.t()?)?.matmul(v)?.scale(1.0 / d as f64)
}

// ── SpikeFormer body ─────────────────────────────────────────────────

/// Which spiking body processes the motion stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnnBody {
    /// Three spiking linear layers over a single stage.
    Mlp,
    /// Spiking self-attention + spiking MLP units over a shrinking schedule.
    Transformer,
}

/// One spiking unit in a stage.
#[derive(Clone, Debug)]
pub enum SpikeUnit {
    Mlp(Vec<SpikingLinear>),
    Attn {
        attn: SpikingAttention,
        mlp: Vec<SpikingLinear>,
    },
}

impl SpikeUnit {
    /// Process a step sequence, carrying LIF state across timesteps.
    fn forward_seq(
        &self,
        ctx: &Ctx,
        xs: &[Tensor],
        tokens: usize,
        params: &LifParams,
        factor: Option<&Tensor>,
        input_real: bool,
    ) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(xs.len());
        match self {
            SpikeUnit::Mlp(layers) => {
                let mut states: Vec<LifState> = layers
                    .iter()
                    .map(|l| LifState::init(ctx, &[tokens, l.d_out], params))
                    .collect::<Result<_>>()?;
                for x in xs {
                    let mut h = x.clone();
                    for (li, layer) in layers.iter().enumerate() {
                        advance_threshold(&mut states[li], factor, params)?;
                        let expect = li > 0 || !input_real;
                        let (ns, spikes) = layer.step(ctx, &h, &states[li], params, expect)?;
                        states[li] = ns;
                        h = spikes;
                    }
                    out.push(h);
                }
            }
            SpikeUnit::Attn { attn, mlp } => {
                let mut attn_state = attn.init_state(ctx, tokens, params)?;
                let mut mlp_states: Vec<LifState> = mlp
                    .iter()
                    .map(|l| LifState::init(ctx, &[tokens, l.d_out], params))
                    .collect::<Result<_>>()?;
                for x in xs {
                    for st in [&mut attn_state.q, &mut attn_state.k, &mut attn_state.v, &mut attn_state.out] {
                        advance_threshold(st, factor, params)?;
                    }
                    let s = attn.step(ctx, x, &mut attn_state, params, !input_real)?;
                    let mut h = s;
                    for (li, layer) in mlp.iter().enumerate() {
                        advance_threshold(&mut mlp_states[li], factor, params)?;
                        let (ns, spikes) = layer.step(ctx, &h, &mlp_states[li], params, true)?;
                        mlp_states[li] = ns;
                        h = spikes;
                    }
                    out.push(h);
                }
            }
        }
        Ok(out)
    }
}

fn advance_threshold(state: &mut LifState, factor: Option<&Tensor>, params: &LifParams) -> Result<()> {
    if let Some(f) = factor {
        state.v_th = apply_threshold_factor(&state.v_th, f, params)?;
    }
    Ok(())
}

/// The spiking motion-stream body: tokenized event grid in, one pooled rate
/// vector per stage out.
#[derive(Clone, Debug)]
pub struct SpikeFormer {
    pub body: SnnBody,
    pub schedule: StageSchedule,
    /// Tokens per step; the grid's feature width must equal `tokens * d`.
    pub tokens: usize,
    pub d: usize,
    pub stages: Vec<Vec<SpikeUnit>>,
    /// Readout from the flattened rate vector to the fusion width.
    pub rate_proj: Linear,
    pub lif: LifParams,
    pub dynamic_threshold: bool,
}

/// Per-stage pooled rates (after the stage's loss-side time averaging) and
/// the final motion embedding.
pub struct SpikeFormerOut {
    /// `j_i` per stage, each `[out_dim]`.
    pub stage_outputs: Vec<Tensor>,
}

impl SpikeFormerOut {
    pub fn final_output(&self) -> &Tensor {
        self.stage_outputs.last().expect("at least one stage")
    }
}

impl SpikeFormer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        bank: &mut ParamBank,
        rng: &mut ChaCha8Rng,
        name: &str,
        body: SnnBody,
        schedule: StageSchedule,
        tokens: usize,
        d: usize,
        out_dim: usize,
        lif: LifParams,
        dynamic_threshold: bool,
    ) -> Result<Self> {
        lif.validate()?;
        if tokens == 0 || d == 0 {
            return Err(Error::config("spiking body needs positive tokens and width"));
        }
        if body == SnnBody::Mlp && schedule.n_stages() != 1 {
            return Err(Error::config(
                "the spiking MLP body uses a single-stage schedule",
            ));
        }
        let mut stages = Vec::new();
        for (si, (_, m_i)) in schedule.stages().iter().enumerate() {
            let mut units = Vec::new();
            for ui in 0..*m_i {
                let unit_name = format!("{name}.stage{si}.unit{ui}");
                let unit = match body {
                    SnnBody::Mlp => SpikeUnit::Mlp(
                        (0..3)
                            .map(|li| {
                                SpikingLinear::init(
                                    bank,
                                    rng,
                                    &format!("{unit_name}.mlp{li}"),
                                    d,
                                    d,
                                    false,
                                )
                            })
                            .collect(),
                    ),
                    SnnBody::Transformer => SpikeUnit::Attn {
                        attn: SpikingAttention::init(bank, rng, &format!("{unit_name}.attn"), d)?,
                        mlp: (0..2)
                            .map(|li| {
                                SpikingLinear::init(
                                    bank,
                                    rng,
                                    &format!("{unit_name}.mlp{li}"),
                                    d,
                                    d,
                                    false,
                                )
                            })
                            .collect(),
                    },
                };
                units.push(unit);
            }
            stages.push(units);
        }
        let rate_proj = Linear::init(bank, rng, &format!("{name}.rate_proj"), tokens * d, out_dim);
        Ok(SpikeFormer {
            body,
            schedule,
            tokens,
            d,
            stages,
            rate_proj,
            lif,
            dynamic_threshold,
        })
    }

    /// Run the body over a motion grid (`[t, width]` rows, real or event
    /// polarities). `semantics` drives the dynamic threshold when enabled.
    pub fn forward(
        &self,
        ctx: &Ctx,
        motion_rows: &[Tensor],
        motion_grid: &Tensor,
        semantics: Option<&Tensor>,
    ) -> Result<SpikeFormerOut> {
        let width = self.tokens * self.d;
        for row in motion_rows {
            if row.numel() != width {
                return Err(Error::ShapeMismatch {
                    op: "spikeformer",
                    left: row.shape().to_vec(),
                    right: vec![width],
                });
            }
        }
        let t_first = self.schedule.first_timesteps();
        if motion_rows.len() < t_first {
            return Err(Error::config(format!(
                "motion sequence has {} steps but the first stage needs {t_first}",
                motion_rows.len()
            )));
        }

        let factor = match (self.dynamic_threshold, semantics) {
            (true, Some(s)) => Some(threshold_factor(s, motion_grid)?),
            _ => None,
        };

        // Tokenize rows and bin down to the first stage's timestep count.
        let mut seq: Vec<Tensor> = motion_rows
            .iter()
            .map(|r| r.reshape(vec![self.tokens, self.d]))
            .collect::<Result<_>>()?;
        if seq.len() > t_first {
            seq = shrink_timesteps(&seq, t_first)?;
        }

        let n_stages = self.schedule.n_stages();
        let mut stage_outputs = Vec::with_capacity(n_stages);
        for (si, units) in self.stages.iter().enumerate() {
            let mut input_real = true; // bin means (stage entry) are real-valued
            for unit in units {
                seq = unit.forward_seq(ctx, &seq, self.tokens, &self.lif, factor.as_ref(), input_real)?;
                input_real = false;
            }
            // Per-stage output: shrink first (except the last stage), then
            // average over the remaining steps.
            if si + 1 < n_stages {
                let t_next = self.schedule.stages()[si + 1].0;
                seq = shrink_timesteps(&seq, t_next)?;
            }
            let rate = mean_over_steps(&seq)?;
            if ctx.strict && !ctx.smooth_spikes {
                for v in rate.data() {
                    if *v < 0.0 || *v > 1.0 {
                        return Err(Error::contract(format!("rate {v} outside [0, 1]")));
                    }
                }
            }
            let flat = rate.reshape(vec![1, width])?;
            let j = self.rate_proj.forward(ctx, &flat)?.reshape(vec![self.rate_proj.d_out])?;
            stage_outputs.push(j);
        }
        Ok(SpikeFormerOut { stage_outputs })
    }
}

fn mean_over_steps(xs: &[Tensor]) -> Result<Tensor> {
    let mut acc = xs[0].clone();
    for x in &xs[1..] {
        acc = acc.add(x)?;
    }
    acc.scale(1.0 / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Ctx;
    use crate::tensor::SurrogateKind;
    use rand::SeedableRng;

    fn eval_ctx(bank: &ParamBank) -> Ctx<'_> {
        Ctx::eval(bank, SurrogateKind::default())
    }

    #[test]
    fn lif_zero_input_stays_at_rest() {
        let bank = ParamBank::new();
        let ctx = eval_ctx(&bank);
        let params = LifParams::default();
        let mut state = LifState::init(&ctx, &[2], &params).unwrap();
        for _ in 0..5 {
            let (ns, spikes) = lif_step(&ctx, &state, &Tensor::zeros(vec![2]), &params).unwrap();
            assert!(spikes.data().iter().all(|s| *s == 0.0));
            assert!(ns.v.data().iter().all(|v| *v == 0.0));
            state = ns;
        }
    }

    #[test]
    fn lif_subthreshold_charging_never_spikes() {
        // tau=2, R=1, I=1: v = 0.5, 0.75, 0.875, 0.9375, ... < 1 forever.
        let bank = ParamBank::new();
        let ctx = eval_ctx(&bank);
        let params = LifParams::default();
        let mut state = LifState::init(&ctx, &[1], &params).unwrap();
        let input = Tensor::filled(vec![1], 1.0);
        let expected = [0.5, 0.75, 0.875, 0.9375];
        for e in expected {
            let (ns, spikes) = lif_step(&ctx, &state, &input, &params).unwrap();
            assert_eq!(spikes.data()[0], 0.0);
            assert!((ns.v.data()[0] - e).abs() < 1e-15);
            state = ns;
        }
        for _ in 0..20 {
            let (ns, spikes) = lif_step(&ctx, &state, &input, &params).unwrap();
            assert_eq!(spikes.data()[0], 0.0, "asymptote must stay below threshold");
            state = ns;
        }
    }

    #[test]
    fn lif_suprathreshold_spikes_and_resets() {
        // I = 2.5: v = 1.25 >= 1 after one step, spike, reset to 0.
        let bank = ParamBank::new();
        let ctx = eval_ctx(&bank);
        let params = LifParams::default();
        let state = LifState::init(&ctx, &[1], &params).unwrap();
        let input = Tensor::filled(vec![1], 2.5);
        let (ns, spikes) = lif_step(&ctx, &state, &input, &params).unwrap();
        assert_eq!(spikes.data()[0], 1.0);
        assert_eq!(ns.v.data()[0], 0.0);
    }

    #[test]
    fn lif_leak_strictly_decreases_without_input() {
        let bank = ParamBank::new();
        let ctx = eval_ctx(&bank);
        let params = LifParams::default();
        let mut state = LifState {
            v: Tensor::filled(vec![1], 0.9),
            v_th: Tensor::filled(vec![1], 1.0),
            spikes: Tensor::zeros(vec![1]),
        };
        let zero = Tensor::zeros(vec![1]);
        let mut prev = 0.9;
        for _ in 0..10 {
            let (ns, _) = lif_step(&ctx, &state, &zero, &params).unwrap();
            assert!(ns.v.data()[0] < prev);
            prev = ns.v.data()[0];
            state = ns;
        }
    }

    #[test]
    fn schedule_average_timestep() {
        let s = StageSchedule::new(vec![(8, 2), (4, 2)]).unwrap();
        assert_eq!(average_timestep(&s), 6.0);
        let single = StageSchedule::single(5).unwrap();
        assert_eq!(average_timestep(&single), 5.0);
    }

    #[test]
    fn schedule_rejects_non_decreasing() {
        assert!(StageSchedule::new(vec![(4, 1), (4, 1)]).is_err());
        assert!(StageSchedule::new(vec![(4, 1), (6, 1)]).is_err());
        assert!(StageSchedule::new(vec![]).is_err());
        assert!(StageSchedule::new(vec![(4, 0)]).is_err());
    }

    #[test]
    fn shrink_bin_means() {
        let xs: Vec<Tensor> = [1.0, 0.0, 1.0, 1.0]
            .iter()
            .map(|v| Tensor::filled(vec![1], *v))
            .collect();
        let out = shrink_timesteps(&xs, 2).unwrap();
        assert_eq!(out[0].data()[0], 0.5);
        assert_eq!(out[1].data()[0], 1.0);
    }

    #[test]
    fn shrink_uneven_partition_sizes() {
        let xs: Vec<Tensor> = (0..5).map(|v| Tensor::filled(vec![1], v as f64)).collect();
        let out = shrink_timesteps(&xs, 2).unwrap();
        // bins of size 3 and 2
        assert!((out[0].data()[0] - 1.0).abs() < 1e-15);
        assert!((out[1].data()[0] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn shrink_rejects_non_shrinking() {
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(vec![1])).collect();
        assert!(shrink_timesteps(&xs, 3).is_err());
        assert!(shrink_timesteps(&xs, 4).is_err());
    }

    #[test]
    fn attention_scores_hand_case() {
        // Q=[[1,0],[0,1]], K=[[1,1],[0,0]], V=[[1,0],[1,1]]:
        // QK^T=[[1,0],[1,0]], QK^T V=[[1,0],[1,0]], s=1/2 -> [[.5,0],[.5,0]].
        let q = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let k = Tensor::new(vec![1.0, 1.0, 0.0, 0.0], vec![2, 2]).unwrap();
        let v = Tensor::new(vec![1.0, 0.0, 1.0, 1.0], vec![2, 2]).unwrap();
        let g = spiking_attention_scores(&q, &k, &v, 2).unwrap();
        assert_eq!(g.data(), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn threshold_identity_factor_leaves_threshold_unchanged() {
        // Constant semantics make N(S) = 1; a grid whose per-feature time
        // mean is -0.3 gives omega = -log(0.7). Choosing the semantic level
        // c with sigmoid(c) = log(0.7) + 1 makes phi + omega = 1.
        let omega = -(0.7f64.ln()); // +0.3567
        let phi = 1.0 - omega;
        let c = (phi / (1.0 - phi)).ln();
        let s = Tensor::filled(vec![3, 4], c);
        let mut grid_data = vec![0.0; 10 * 4];
        for t in 0..3 {
            for d in 0..4 {
                grid_data[t * 4 + d] = -1.0;
            }
        }
        let grid = EventGrid::from_tensor(Tensor::new(grid_data, vec![10, 4]).unwrap()).unwrap();
        let params = LifParams::default();
        let prev = Tensor::filled(vec![1], 1.0);
        let next = dynamic_threshold(&prev, &s, &grid, &params).unwrap();
        assert!((next.data()[0] - 1.0).abs() < 1e-9, "{}", next.data()[0]);
    }

    #[test]
    fn threshold_decays_when_normalized_semantics_are_one_and_no_events() {
        // N(S) = 1 everywhere, E = 0 -> omega = -log(1) = 0, factor = phi in
        // (0, 1): the threshold decays.
        let s = Tensor::filled(vec![2, 2], 0.4);
        let grid = EventGrid::from_tensor(Tensor::zeros(vec![6, 2])).unwrap();
        let params = LifParams::default();
        let prev = Tensor::filled(vec![1], 1.0);
        let next = dynamic_threshold(&prev, &s, &grid, &params).unwrap();
        let phi = 1.0 / (1.0 + (-0.4f64).exp());
        assert!((next.data()[0] - phi).abs() < 1e-12);
        assert!(next.data()[0] < 1.0);
    }

    #[test]
    fn threshold_clamps_to_bounds() {
        let params = LifParams::default();
        let (lo, hi) = params.threshold_bounds();
        assert_eq!((lo, hi), (0.1, 10.0));
        let factor = Tensor::filled(vec![1], 1e6);
        let hi_out = apply_threshold_factor(&Tensor::filled(vec![1], 1.0), &factor, &params).unwrap();
        assert_eq!(hi_out.data()[0], hi);
        let factor = Tensor::filled(vec![1], 1e-6);
        let lo_out = apply_threshold_factor(&Tensor::filled(vec![1], 1.0), &factor, &params).unwrap();
        assert_eq!(lo_out.data()[0], lo);
    }

    #[test]
    fn spiking_linear_identity_follows_input() {
        // Single neuron, W = 1, small threshold: output spikes mirror input.
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = SpikingLinear::init(&mut bank, &mut rng, "s", 1, 1, false);
        bank.set_value(layer.lin.w, vec![1.0]).unwrap();
        let ctx = eval_ctx(&bank);
        let params = LifParams {
            v_th_init: 0.4,
            ..LifParams::default()
        };
        let mut state = LifState::init(&ctx, &[1, 1], &params).unwrap();
        let inputs = [1.0, 0.0, 1.0, 1.0, 0.0];
        for x in inputs {
            let xt = Tensor::new(vec![x], vec![1, 1]).unwrap();
            let (ns, spikes) = layer.step(&ctx, &xt, &state, &params, true).unwrap();
            assert_eq!(spikes.data()[0], x, "spike should mirror input {x}");
            state = ns;
        }
    }

    #[test]
    fn zero_grid_gives_zero_output_both_bodies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for body in [SnnBody::Mlp, SnnBody::Transformer] {
            let mut bank = ParamBank::new();
            let schedule = match body {
                SnnBody::Mlp => StageSchedule::single(4).unwrap(),
                SnnBody::Transformer => StageSchedule::new(vec![(4, 1), (2, 1)]).unwrap(),
            };
            let sf = SpikeFormer::init(
                &mut bank,
                &mut rng,
                "snn",
                body,
                schedule,
                2,
                3,
                5,
                LifParams::default(),
                false,
            )
            .unwrap();
            let ctx = eval_ctx(&bank);
            let rows: Vec<Tensor> = (0..6).map(|_| Tensor::zeros(vec![6])).collect();
            let grid = Tensor::zeros(vec![6, 6]);
            let out = sf.forward(&ctx, &rows, &grid, None).unwrap();
            for j in &out.stage_outputs {
                assert_eq!(j.shape(), &[5]);
                assert!(j.data().iter().all(|v| *v == 0.0), "{body:?}");
            }
        }
    }

    #[test]
    fn spikeformer_outputs_one_rate_per_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bank = ParamBank::new();
        let sf = SpikeFormer::init(
            &mut bank,
            &mut rng,
            "snn",
            SnnBody::Transformer,
            StageSchedule::new(vec![(6, 1), (4, 1), (2, 1)]).unwrap(),
            2,
            4,
            8,
            LifParams::default(),
            false,
        )
        .unwrap();
        let ctx = eval_ctx(&bank).with_strict(true);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let rows: Vec<Tensor> = (0..12)
            .map(|_| {
                let data: Vec<f64> = (0..8)
                    .map(|_| [-1.0, 0.0, 1.0][rng2.gen_range(0..3usize)])
                    .collect();
                Tensor::new(data, vec![8]).unwrap()
            })
            .collect();
        let grid_data: Vec<f64> = rows.iter().flat_map(|r| r.to_vec()).collect();
        let grid = Tensor::new(grid_data, vec![12, 8]).unwrap();
        let out = sf.forward(&ctx, &rows, &grid, None).unwrap();
        assert_eq!(out.stage_outputs.len(), 3);
    }
}
