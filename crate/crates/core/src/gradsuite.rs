//! Canned gradient-check suites: every differentiable operation, the
//! spiking path against its smooth-surrogate forward, and the end-to-end
//! loss of a small model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckReport, ParamSpec};
use crate::model::{Ablation, Model, ModelConfig};
use crate::nn::Ctx;
use crate::tensor::{SurrogateKind, Tensor, MINMAX_EPS};
use crate::train::{projection_loss, reconstruction_loss, total_loss, triplet_loss};

/// One named gradcheck result.
pub type SuiteResult = Vec<(String, GradCheckReport)>;

fn rnd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn push<F>(out: &mut SuiteResult, name: &str, params: Vec<ParamSpec>, h: f64, f: F) -> Result<()>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let report = check_gradients(f, &params, h)?;
    out.push((name.to_string(), report));
    Ok(())
}

/// Per-operation checks at random points.
pub fn suite_tensor_ops(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SuiteResult::new();
    let h = 1e-5;

    let a = ParamSpec::new("a", vec![3, 4], rnd(&mut rng, 12, -1.0, 1.0));
    let b = ParamSpec::new("b", vec![4, 2], rnd(&mut rng, 8, -1.0, 1.0));
    push(&mut out, "matmul", vec![a, b], h, |p| {
        p[0].matmul(&p[1])?.sum_all()
    })?;

    let a = ParamSpec::new("a", vec![2, 3, 2], rnd(&mut rng, 12, -1.0, 1.0));
    let b = ParamSpec::new("b", vec![2, 2], rnd(&mut rng, 4, -1.0, 1.0));
    push(&mut out, "matmul_batched", vec![a, b], h, |p| {
        p[0].matmul(&p[1])?.exp()?.sum_all()
    })?;

    let x = ParamSpec::new("x", vec![2, 3], rnd(&mut rng, 6, -1.0, 1.0));
    let y = ParamSpec::new("y", vec![3], rnd(&mut rng, 3, 0.5, 1.5));
    push(&mut out, "add_sub_broadcast", vec![x.clone(), y.clone()], h, |p| {
        p[0].add(&p[1])?.sub(&p[1])?.mul(&p[0])?.sum_all()
    })?;
    push(&mut out, "mul_div_broadcast", vec![x.clone(), y], h, |p| {
        p[0].mul(&p[1])?.div(&p[1])?.sum_all()
    })?;

    push(&mut out, "exp_log_chain", vec![x.clone()], h, |p| {
        p[0].exp()?.log()?.sum_all()
    })?;
    push(&mut out, "sigmoid", vec![x.clone()], h, |p| {
        p[0].sigmoid()?.sum_all()
    })?;
    push(&mut out, "relu", vec![x.clone()], h, |p| p[0].relu()?.sum_all())?;
    let pos = ParamSpec::new("x", vec![5], rnd(&mut rng, 5, 0.2, 2.0));
    push(&mut out, "sqrt", vec![pos], h, |p| p[0].sqrt()?.sum_all())?;
    push(&mut out, "affine_neg", vec![x.clone()], h, |p| {
        p[0].affine(2.5, -0.75)?.neg()?.sum_all()
    })?;

    push(&mut out, "surrogate_sigmoid", vec![x.clone()], h, |p| {
        p[0].heaviside(SurrogateKind::Sigmoid { alpha: 4.0 }, true)?.sum_all()
    })?;
    push(&mut out, "surrogate_arctan", vec![x.clone()], h, |p| {
        p[0].heaviside(SurrogateKind::ArcTan { alpha: 2.0 }, true)?.sum_all()
    })?;

    push(&mut out, "clamp_interior", vec![x.clone()], h, |p| {
        p[0].clamp(-10.0, 10.0)?.mul(&p[0])?.sum_all()
    })?;
    push(&mut out, "minmax_norm", vec![x.clone()], h, |p| {
        p[0].minmax_norm(MINMAX_EPS)?.mul(&p[0])?.sum_all()
    })?;

    push(&mut out, "sum_axis", vec![x.clone()], h, |p| {
        p[0].sum_axis(0)?.mul(&p[0].sum_axis(0)?)?.sum_all()
    })?;
    push(&mut out, "mean_pool", vec![x.clone()], h, |p| {
        p[0].mean_axis(1)?.exp()?.sum_all()
    })?;

    let g = ParamSpec::new("gain", vec![3], rnd(&mut rng, 3, 0.5, 1.5));
    let bsp = ParamSpec::new("bias", vec![3], rnd(&mut rng, 3, -0.5, 0.5));
    push(&mut out, "layer_norm", vec![x.clone(), g, bsp], 1e-5, |p| {
        p[0].layer_norm(&p[1], &p[2])?.mul(&p[0])?.sum_all()
    })?;

    push(&mut out, "softmax", vec![x.clone()], h, |p| {
        p[0].softmax()?.mul(&p[0])?.sum_all()
    })?;

    let c1 = ParamSpec::new("c1", vec![2, 2], rnd(&mut rng, 4, -1.0, 1.0));
    let c2 = ParamSpec::new("c2", vec![1, 2], rnd(&mut rng, 2, -1.0, 1.0));
    push(&mut out, "concat_slice_transpose", vec![c1, c2], h, |p| {
        let cat = Tensor::concat0(&[&p[0], &p[1]])?;
        cat.t()?.slice(1, 1, 2)?.reshape(vec![4])?.mul(&cat.slice(0, 0, 2)?.reshape(vec![4])?)?.sum_all()
    })?;

    Ok(out)
}

/// Spiking dynamics against the smooth-surrogate forward, including the
/// dynamic-threshold path.
pub fn suite_spiking(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let mut out = SuiteResult::new();
    let h = 1e-5;
    let surrogate = SurrogateKind::default();

    // Three LIF steps with reset dynamics, smooth forward.
    let w = ParamSpec::new("w", vec![2, 2], rnd(&mut rng, 4, -1.0, 1.0));
    let inputs: Vec<Vec<f64>> = (0..3).map(|_| rnd(&mut rng, 2, -1.0, 1.5)).collect();
    push(&mut out, "lif_chain", vec![w], h, move |p| {
        let mut v = Tensor::zeros(vec![1, 2]);
        let v_th = Tensor::filled(vec![1], 0.6);
        let mut total: Option<Tensor> = None;
        for x in &inputs {
            let xt = Tensor::new(x.clone(), vec![1, 2])?;
            let current = xt.matmul(&p[0])?;
            let charged = v.scale(0.5)?.add(&current.scale(0.5)?)?;
            let s = charged.sub(&v_th)?.heaviside(surrogate, true)?;
            v = charged.mul(&s.affine(-1.0, 1.0)?)?;
            let q = s.mul(&charged)?.sum_all()?;
            total = Some(match total {
                None => q,
                Some(t) => t.add(&q)?,
            });
        }
        Ok(total.expect("steps"))
    })?;

    // Dynamic threshold factor: phi + omega through minmax/log/clamp.
    let s = ParamSpec::new("s", vec![2, 3], rnd(&mut rng, 6, -0.8, 0.8));
    let motion = rnd(&mut rng, 9, -0.3, 0.3);
    push(&mut out, "threshold_factor", vec![s], h, move |p| {
        let grid = Tensor::new(motion.clone(), vec![3, 3])?;
        let f = crate::spiking::threshold_factor(&p[0], &grid)?;
        let th = Tensor::filled(vec![1], 1.0);
        th.mul(&f)?.clamp(0.1, 10.0)?.sum_all()
    })?;

    // Spiking attention scores path (binary projections smoothed).
    let wq = ParamSpec::new("wq", vec![3, 3], rnd(&mut rng, 9, -0.8, 0.8));
    let x_in = rnd(&mut rng, 6, -1.0, 1.0);
    push(&mut out, "spiking_attention", vec![wq], h, move |p| {
        let x = Tensor::new(x_in.clone(), vec![2, 3])?;
        let q = x.matmul(&p[0])?.shift(-0.2)?.heaviside(surrogate, true)?;
        let g = crate::spiking::spiking_attention_scores(&q, &q, &q, 3)?;
        g.sum_all()
    })?;

    Ok(out)
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        frames: 4,
        tokens: 2,
        t_hid: 4,
        t_emb: 4,
        heads: 2,
        t_proj: 3,
        t_fin: 4,
        word_dim: 4,
        snn_tokens: 2,
        stages: vec![[3, 1], [2, 1]],
        ..ModelConfig::default()
    }
}

/// End-to-end loss gradient of a 4-dim toy model (both streams, all stages,
/// triplet + projection + reconstruction), spikes in smooth-forward mode.
pub fn suite_end_to_end(seed: u64) -> Result<SuiteResult> {
    let mut out = SuiteResult::new();
    let cfg = toy_config();
    let model = Model::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let audio_a = Tensor::new(rnd(&mut rng, 16, -0.8, 0.8), vec![4, 4])?;
    let visual_a = Tensor::new(rnd(&mut rng, 16, 0.2, 1.6), vec![4, 4])?;
    let audio_b = Tensor::new(rnd(&mut rng, 16, -0.8, 0.8), vec![4, 4])?;
    let visual_b = Tensor::new(rnd(&mut rng, 16, 0.2, 1.6), vec![4, 4])?;
    let word_a = rnd(&mut rng, 4, -1.0, 1.0);
    let word_b = rnd(&mut rng, 4, -1.0, 1.0);

    let params: Vec<ParamSpec> = model
        .bank
        .iter()
        .map(|p| ParamSpec::new(&p.name, p.shape.clone(), p.value.clone()))
        .collect();
    let surrogate = cfg.surrogate();
    let gamma = 1.0;

    let report = check_gradients(
        move |tensors| {
            let ctx = Ctx::with_param_tensors(&model.bank, surrogate, tensors.to_vec())?
                .with_smooth_spikes(true);
            let fwd_a = model.forward_sample(&ctx, &audio_a, &visual_a)?;
            let fwd_b = model.forward_sample(&ctx, &audio_b, &visual_b)?;
            let w_a = model.project_word(&ctx, &word_a)?;
            let w_b = model.project_word(&ctx, &word_b)?;
            let mut total: Option<Tensor> = None;
            for s in 0..fwd_a.stages.len() {
                let av = vec![fwd_a.stages[s].o_av.clone(), fwd_b.stages[s].o_av.clone()];
                let rc = vec![fwd_a.stages[s].o_rec.clone(), fwd_b.stages[s].o_rec.clone()];
                let ws = vec![w_a.clone(), w_b.clone()];
                let l_p = projection_loss(&av, &ws)?;
                let l_r = reconstruction_loss(&rc, &ws)?;
                let l_n = triplet_loss(&av[0], &ws[0], &av[1], gamma)?
                    .add(&triplet_loss(&av[1], &ws[1], &av[0], gamma)?)?
                    .scale(0.5)?;
                let l = total_loss(&l_n, &l_p, &l_r)?;
                total = Some(match total {
                    None => l,
                    Some(t) => t.add(&l)?,
                });
            }
            Ok(total.expect("stages"))
        },
        &params,
        1e-4,
    )?;
    out.push(("end_to_end_toy".to_string(), report));
    Ok(out)
}

/// Run the named suite (or all).
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteResult> {
    match name {
        "tensorcore" | "tensor" => suite_tensor_ops(seed),
        "spiking" => suite_spiking(seed),
        "model" | "end_to_end" => suite_end_to_end(seed),
        "all" => {
            let mut out = suite_tensor_ops(seed)?;
            out.extend(suite_spiking(seed)?);
            out.extend(suite_end_to_end(seed)?);
            Ok(out)
        }
        other => Err(Error::config(format!(
            "unknown gradcheck module {other:?} (expected tensorcore, spiking, model, all)"
        ))),
    }
}

/// Toy model config shared with the acceptance suite.
pub fn toy_model_config() -> ModelConfig {
    toy_config()
}

/// Toy ablation config (semantic stream only).
pub fn toy_nomim_config() -> ModelConfig {
    ModelConfig {
        ablation: Ablation::NoMim,
        ..toy_config()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_op_suite_passes() {
        let results = suite_tensor_ops(7).unwrap();
        for (name, report) in &results {
            assert!(report.max_rel_err < 1e-5, "{name}: {report:?}");
        }
    }

    #[test]
    fn spiking_suite_passes() {
        let results = suite_spiking(7).unwrap();
        for (name, report) in &results {
            assert!(report.max_rel_err < 1e-4, "{name}: {report:?}");
        }
    }
}
