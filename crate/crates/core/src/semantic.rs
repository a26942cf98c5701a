//! Modality encoders and the recurrent joint learning unit (RJLU).
//!
//! The RJLU keeps a joint knowledge vector `h` across time: per step it
//! gates the previous `h` against the pooled fused representation of the
//! current audio/visual tokens, so every coordinate of `h` stays inside the
//! interval spanned by its previous value and the pooled fusion output.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Attention, Ctx, FeatureNorm, LayerNorm, Linear, Mlp, ParamBank};
use crate::tensor::Tensor;

/// Encoder widths and dropout, per dataset profile.
#[derive(Clone, Copy, Debug)]
pub struct EncoderSpec {
    pub t_in: usize,
    pub t_hid: usize,
    pub t_emb: usize,
    pub dropout: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            t_in: 512,
            t_hid: 512,
            t_emb: 512,
            dropout: 0.25,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.t_hid == 0 || self.t_emb == 0 {
            return Err(Error::config("encoder widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "encoder dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Two blocks of linear -> feature norm -> ReLU -> dropout.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    l1: Linear,
    n1: FeatureNorm,
    l2: Linear,
    n2: FeatureNorm,
}

impl Encoder {
    pub fn init(bank: &mut ParamBank, rng: &mut ChaCha8Rng, name: &str, spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Encoder {
            spec,
            l1: Linear::init(bank, rng, &format!("{name}.f1"), spec.t_in, spec.t_hid),
            n1: FeatureNorm::init(bank, &format!("{name}.f1.norm"), spec.t_hid),
            l2: Linear::init(bank, rng, &format!("{name}.f2"), spec.t_hid, spec.t_emb),
            n2: FeatureNorm::init(bank, &format!("{name}.f2.norm"), spec.t_emb),
        })
    }

    /// `raw`: `[tokens, t_in]` -> `[tokens, t_emb]`.
    pub fn forward(&self, ctx: &Ctx, raw: &Tensor) -> Result<Tensor> {
        if raw.shape().len() != 2 || raw.shape()[1] != self.spec.t_in {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: raw.shape().to_vec(),
                right: vec![self.spec.t_in],
            });
        }
        let h = self.l1.forward(ctx, raw)?;
        let h = self.n1.forward(ctx, &h)?.relu()?;
        let h = ctx.dropout(&h, self.spec.dropout)?;
        let h = self.l2.forward(ctx, &h)?;
        let h = self.n2.forward(ctx, &h)?.relu()?;
        ctx.dropout(&h, self.spec.dropout)
    }
}

/// Joint knowledge carried across time.
#[derive(Clone, Debug)]
pub struct JointKnowledge {
    pub h: Tensor,
    pub step: usize,
}

impl JointKnowledge {
    /// `h^0 = 0`.
    pub fn zeros(ctx: &Ctx, width: usize) -> Result<Self> {
        Ok(JointKnowledge {
            h: ctx.input(vec![0.0; width], vec![width])?,
            step: 0,
        })
    }
}

/// Recurrent joint learning unit.
///
/// One cross-attention block is shared by both modality gates, so identical
/// audio and visual inputs produce identical gates.
#[derive(Clone, Debug)]
pub struct Rjlu {
    pub width: usize,
    gate_ca: Attention,
    sa: Attention,
    ln: LayerNorm,
    mlp: Mlp,
}

/// Output of one RJLU step.
pub struct RjluStep {
    pub h: JointKnowledge,
    /// Fused token representation `S_ahv` (`[3 * tokens, width]`).
    pub fused: Tensor,
}

impl Rjlu {
    pub fn init(bank: &mut ParamBank, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Result<Self> {
        Ok(Rjlu {
            width,
            gate_ca: Attention::init(bank, rng, &format!("{name}.gate_ca"), width),
            sa: Attention::init(bank, rng, &format!("{name}.sa"), width),
            ln: LayerNorm::init(bank, &format!("{name}.ln"), width),
            mlp: Mlp::init(bank, rng, &format!("{name}.mlp"), width, width),
        })
    }

    /// Modality gates: sigmoid of cross-attention between the pooled
    /// modality tokens (query) and the pooled joint knowledge (key/value).
    pub fn gates(
        &self,
        ctx: &Ctx,
        audio: &Tensor,
        visual: &Tensor,
        h_prev: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let h_pooled = h_prev.reshape(vec![1, self.width])?;
        let a_pooled = audio.mean_axis(0)?.reshape(vec![1, self.width])?;
        let v_pooled = visual.mean_axis(0)?.reshape(vec![1, self.width])?;
        let c_a = self.gate_ca.forward(ctx, &a_pooled, &h_pooled)?.sigmoid()?;
        let c_v = self.gate_ca.forward(ctx, &v_pooled, &h_pooled)?.sigmoid()?;
        Ok((c_a.reshape(vec![self.width])?, c_v.reshape(vec![self.width])?))
    }

    /// `S_ahv = MLP(LN(SA(cat(a, h, v)))) + SA(cat(a, h, v))`.
    pub fn fuse(&self, ctx: &Ctx, audio: &Tensor, h_prev: &Tensor, visual: &Tensor) -> Result<Tensor> {
        if audio.shape() != visual.shape() || audio.shape().last() != Some(&self.width) {
            return Err(Error::ShapeMismatch {
                op: "rjlu_fuse",
                left: audio.shape().to_vec(),
                right: visual.shape().to_vec(),
            });
        }
        let tokens = audio.shape()[0];
        // Repeat h across the modality token count so the concatenation has
        // 3x the input tokens.
        let h_row = h_prev.reshape(vec![1, self.width])?;
        let h_tokens = if tokens == 1 {
            h_row.clone()
        } else {
            let rows: Vec<Tensor> = (0..tokens).map(|_| h_row.clone()).collect();
            let refs: Vec<&Tensor> = rows.iter().collect();
            Tensor::concat0(&refs)?
        };
        let cat = Tensor::concat0(&[audio, &h_tokens, visual])?;
        let sa = self.sa.self_forward(ctx, &cat)?;
        let mlp_out = self.mlp.forward(ctx, &self.ln.forward(ctx, &sa)?)?;
        mlp_out.add(&sa)
    }

    /// Convex recurrent update: `h^t = C_av * h^{t-1} + (1 - C_av) *
    /// pool(S_ahv)` with `C_av = (C_a + C_v) / 2`.
    pub fn update(
        &self,
        ctx: &Ctx,
        h_prev: &JointKnowledge,
        c_a: &Tensor,
        c_v: &Tensor,
        fused: &Tensor,
    ) -> Result<JointKnowledge> {
        let _ = ctx;
        let gate = c_a.add(c_v)?.scale(0.5)?;
        let pooled = fused.mean_axis(0)?;
        let keep = gate.mul(&h_prev.h)?;
        let take = gate.affine(-1.0, 1.0)?.mul(&pooled)?;
        Ok(JointKnowledge {
            h: keep.add(&take)?,
            step: h_prev.step + 1,
        })
    }

    /// One full RJLU step.
    pub fn step(
        &self,
        ctx: &Ctx,
        audio: &Tensor,
        visual: &Tensor,
        h_prev: &JointKnowledge,
    ) -> Result<RjluStep> {
        let (c_a, c_v) = self.gates(ctx, audio, visual, &h_prev.h)?;
        let fused = self.fuse(ctx, audio, &h_prev.h, visual)?;
        let h = self.update(ctx, h_prev, &c_a, &c_v, &fused)?;
        Ok(RjluStep { h, fused })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SurrogateKind;
    use rand::SeedableRng;

    fn setup(width: usize) -> (ParamBank, Rjlu) {
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rjlu = Rjlu::init(&mut bank, &mut rng, "rjlu", width).unwrap();
        (bank, rjlu)
    }

    #[test]
    fn encoder_zero_input_zero_output() {
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = EncoderSpec {
            t_in: 4,
            t_hid: 6,
            t_emb: 5,
            dropout: 0.2,
        };
        let enc = Encoder::init(&mut bank, &mut rng, "enc", spec).unwrap();
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let x = Tensor::zeros(vec![3, 4]);
        let y = enc.forward(&ctx, &x).unwrap();
        assert_eq!(y.shape(), &[3, 5]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = EncoderSpec {
            t_in: 4,
            t_hid: 4,
            t_emb: 4,
            dropout: 0.0,
        };
        let enc = Encoder::init(&mut bank, &mut rng, "enc", spec).unwrap();
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        assert!(enc.forward(&ctx, &Tensor::zeros(vec![3, 5])).is_err());
    }

    #[test]
    fn eval_encoder_is_deterministic_across_calls() {
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = EncoderSpec {
            t_in: 4,
            t_hid: 4,
            t_emb: 4,
            dropout: 0.5,
        };
        let enc = Encoder::init(&mut bank, &mut rng, "enc", spec).unwrap();
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let x = Tensor::new(vec![0.3, -0.7, 1.2, 0.05, 0.9, 0.1, -0.2, 0.4], vec![2, 4]).unwrap();
        let y1 = enc.forward(&ctx, &x).unwrap();
        let y2 = enc.forward(&ctx, &x).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn zero_joint_knowledge_gives_half_gates() {
        let (bank, rjlu) = setup(4);
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let a = Tensor::filled(vec![2, 4], 0.3);
        let v = Tensor::filled(vec![2, 4], -0.8);
        let h = Tensor::zeros(vec![4]);
        let (c_a, c_v) = rjlu.gates(&ctx, &a, &v, &h).unwrap();
        assert!(c_a.data().iter().all(|g| (*g - 0.5).abs() < 1e-12));
        assert!(c_v.data().iter().all(|g| (*g - 0.5).abs() < 1e-12));
    }

    #[test]
    fn identical_modalities_give_identical_gates() {
        let (bank, rjlu) = setup(4);
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let a = Tensor::new(vec![0.1, -0.4, 0.9, 0.2, 0.5, 0.0, -0.3, 0.7], vec![2, 4]).unwrap();
        let h = Tensor::new(vec![0.2, 0.4, -0.1, 0.6], vec![4]).unwrap();
        let (c_a, c_v) = rjlu.gates(&ctx, &a, &a, &h).unwrap();
        assert_eq!(c_a.data(), c_v.data());
    }

    #[test]
    fn gates_stay_in_open_unit_interval() {
        let (bank, rjlu) = setup(4);
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        use rand::Rng;
        for _ in 0..20 {
            let rnd = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
            };
            let a = Tensor::new(rnd(&mut rng, 8), vec![2, 4]).unwrap();
            let v = Tensor::new(rnd(&mut rng, 8), vec![2, 4]).unwrap();
            let h = Tensor::new(rnd(&mut rng, 4), vec![4]).unwrap();
            let (c_a, c_v) = rjlu.gates(&ctx, &a, &v, &h).unwrap();
            for g in c_a.data().iter().chain(c_v.data()) {
                assert!(*g > 0.0 && *g < 1.0);
            }
        }
    }

    #[test]
    fn fuse_zero_inputs_zero_output() {
        let (bank, rjlu) = setup(3);
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let a = Tensor::zeros(vec![2, 3]);
        let v = Tensor::zeros(vec![2, 3]);
        let h = Tensor::zeros(vec![3]);
        let fused = rjlu.fuse(&ctx, &a, &h, &v).unwrap();
        assert_eq!(fused.shape(), &[6, 3]);
        assert!(fused.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn fuse_token_count_triples() {
        let (bank, rjlu) = setup(3);
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let a = Tensor::filled(vec![4, 3], 0.2);
        let v = Tensor::filled(vec![4, 3], 0.1);
        let h = Tensor::filled(vec![3], -0.5);
        let fused = rjlu.fuse(&ctx, &a, &h, &v).unwrap();
        assert_eq!(fused.shape(), &[12, 3]);
    }

    #[test]
    fn fuse_residual_surgery_zero_mlp_gives_pure_sa() {
        let (mut bank, rjlu) = setup(3);
        for suffix in ["rjlu.mlp.fc1.w", "rjlu.mlp.fc1.b", "rjlu.mlp.fc2.w", "rjlu.mlp.fc2.b"] {
            let id = bank.by_name(suffix).unwrap();
            let n = bank.get(id).value.len();
            bank.set_value(id, vec![0.0; n]).unwrap();
        }
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let a = Tensor::new(vec![0.4, -0.2, 0.6, 0.1, 0.0, 0.9], vec![2, 3]).unwrap();
        let v = Tensor::new(vec![-0.3, 0.5, 0.2, 0.8, -0.6, 0.1], vec![2, 3]).unwrap();
        let h = Tensor::new(vec![0.25, -0.15, 0.05], vec![3]).unwrap();
        let fused = rjlu.fuse(&ctx, &a, &h, &v).unwrap();

        // Reconstruct SA(cat) directly.
        let h_rows = Tensor::new(
            vec![0.25, -0.15, 0.05, 0.25, -0.15, 0.05],
            vec![2, 3],
        )
        .unwrap();
        let cat = Tensor::concat0(&[&a, &h_rows, &v]).unwrap();
        let sa = rjlu.sa.self_forward(&ctx, &cat).unwrap();
        for (x, y) in fused.data().iter().zip(sa.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn update_endpoints_are_convex() {
        let (bank, rjlu) = setup(2);
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let h_prev = JointKnowledge {
            h: Tensor::new(vec![1.0, -2.0], vec![2]).unwrap(),
            step: 3,
        };
        let fused = Tensor::new(vec![0.5, 0.5, 1.5, 2.5], vec![2, 2]).unwrap();
        let ones = Tensor::filled(vec![2], 1.0);
        let zeros = Tensor::zeros(vec![2]);
        // C_av = 1 keeps h; C_av = 0 takes pooled S.
        let kept = rjlu.update(&ctx, &h_prev, &ones, &ones, &fused).unwrap();
        assert_eq!(kept.h.data(), h_prev.h.data());
        assert_eq!(kept.step, 4);
        let took = rjlu.update(&ctx, &h_prev, &zeros, &zeros, &fused).unwrap();
        assert_eq!(took.h.data(), &[1.0, 1.5]);
    }

    #[test]
    fn update_stays_in_interval_hull() {
        let (bank, rjlu) = setup(3);
        let ctx = Ctx::eval(&bank, SurrogateKind::default());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        use rand::Rng;
        for _ in 0..50 {
            let rnd = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
            };
            let h_prev = JointKnowledge {
                h: Tensor::new(rnd(&mut rng, 3), vec![3]).unwrap(),
                step: 0,
            };
            let fused = Tensor::new(rnd(&mut rng, 6), vec![2, 3]).unwrap();
            let gate: Vec<f64> = (0..3).map(|_| rng.gen_range(0.001..0.999)).collect();
            let g = Tensor::new(gate, vec![3]).unwrap();
            let next = rjlu.update(&ctx, &h_prev, &g, &g, &fused).unwrap();
            let pooled = fused.mean_axis(0).unwrap();
            for i in 0..3 {
                let lo = h_prev.h.data()[i].min(pooled.data()[i]) - 1e-12;
                let hi = h_prev.h.data()[i].max(pooled.data()[i]) + 1e-12;
                assert!(next.h.data()[i] >= lo && next.h.data()[i] <= hi);
            }
        }
    }
}
