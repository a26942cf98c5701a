//! Model configuration and the full dual-stream pipeline.
//!
//! Per sample: raw audio/visual sequences `[frames, dim]` are tokenized and
//! encoded per frame; the RJLU recurs over frames and yields the semantic
//! tokens, the joint knowledge vector, and the fused representation that
//! drives dynamic thresholds. In parallel, the visual sequence becomes a
//! polarity event grid; the audio sequence is lifted by the discrepancy
//! block against the event grid's time average. Both motion grids run
//! through the spiking body, whose per-stage rate outputs gate the semantic
//! tokens in the cross-modal reasoning module before projection into the
//! class-embedding space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WORD_DIM;
use crate::error::{Error, Result};
use crate::events::{feature_egm, EventGrid};
use crate::fusion::{dab_term, CrmFuse, CrossModalTransformer, DabParams, ProjectionHead, ProjectionSpec};
use crate::nn::{Ctx, ParamBank};
use crate::semantic::{Encoder, EncoderSpec, JointKnowledge, Rjlu};
use crate::spiking::{LifParams, SnnBody, SpikeFormer, StageSchedule};
use crate::tensor::{SurrogateKind, Tensor};

/// Which model variant to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Spiking MLP motion body over a single-stage schedule.
    Mdst,
    /// Spiking transformer body with multi-stage timestep shrinkage.
    #[serde(rename = "mdstpp")]
    MdstPp,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdst" => Ok(ModelKind::Mdst),
            "mdstpp" => Ok(ModelKind::MdstPp),
            other => Err(Error::config(format!("unknown model {other:?}"))),
        }
    }
}

/// Ablation switches used by the test harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Remove motion information modeling: the spiking stream is replaced
    /// by zero rate vectors, leaving the semantic stream alone.
    NoMim,
}

/// Dataset profile presets: encoder / projection / word-head dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    VggSound,
    Ucf,
    ActivityNet,
}

impl Profile {
    pub fn dropout(&self) -> (f64, f64, f64) {
        match self {
            Profile::VggSound => (0.20, 0.25, 0.1),
            Profile::Ucf => (0.25, 0.20, 0.1),
            Profile::ActivityNet => (0.10, 0.15, 0.1),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub ablation: Ablation,
    /// Dropout preset; explicit rates below override when set.
    pub profile: Profile,
    pub d_enc: Option<f64>,
    pub d_proj: Option<f64>,
    pub d_wproj: Option<f64>,
    /// Raw feature width per frame (both modalities).
    pub feature_dim: usize,
    /// Frames per sample; must cover the first stage's timesteps.
    pub frames: usize,
    /// Semantic tokens per modality.
    pub tokens: usize,
    pub t_hid: usize,
    pub t_emb: usize,
    /// Cross-modal attention heads.
    pub heads: usize,
    /// Word-head hidden width.
    pub t_proj: usize,
    /// Class-embedding width.
    pub t_fin: usize,
    /// Word-vector input width.
    pub word_dim: usize,
    /// Spiking tokens per step.
    pub snn_tokens: usize,
    /// `[[T_1, m_1], [T_2, m_2], ...]`.
    pub stages: Vec<[usize; 2]>,
    pub tau_m: f64,
    pub resistance: f64,
    pub v_reset: f64,
    pub v_th_init: f64,
    pub surrogate_alpha: f64,
    /// Event contrast threshold in feature-log space.
    pub contrast: f64,
    pub dynamic_threshold: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::MdstPp,
            ablation: Ablation::Full,
            profile: Profile::Ucf,
            d_enc: None,
            d_proj: None,
            d_wproj: None,
            feature_dim: 64,
            frames: 16,
            tokens: 4,
            t_hid: 32,
            t_emb: 32,
            heads: 8,
            t_proj: 64,
            t_fin: 300,
            word_dim: WORD_DIM,
            snn_tokens: 4,
            stages: vec![[8, 1], [6, 1], [4, 1]],
            tau_m: 2.0,
            resistance: 1.0,
            v_reset: 0.0,
            v_th_init: 1.0,
            surrogate_alpha: 4.0,
            contrast: 0.30,
            dynamic_threshold: true,
        }
    }
}

impl ModelConfig {
    pub fn dropout_rates(&self) -> (f64, f64, f64) {
        let (enc, proj, wproj) = self.profile.dropout();
        (
            self.d_enc.unwrap_or(enc),
            self.d_proj.unwrap_or(proj),
            self.d_wproj.unwrap_or(wproj),
        )
    }

    pub fn surrogate(&self) -> SurrogateKind {
        SurrogateKind::Sigmoid {
            alpha: self.surrogate_alpha,
        }
    }

    pub fn lif(&self) -> LifParams {
        LifParams {
            tau_m: self.tau_m,
            r: self.resistance,
            v_reset: self.v_reset,
            v_th_init: self.v_th_init,
        }
    }

    pub fn schedule(&self) -> Result<StageSchedule> {
        let stages: Vec<(usize, usize)> = self.stages.iter().map(|s| (s[0], s[1])).collect();
        match self.kind {
            ModelKind::Mdst => {
                // The MLP body runs a single stage at the first timestep count.
                StageSchedule::single(stages.first().map(|s| s.0).unwrap_or(8))
            }
            ModelKind::MdstPp => StageSchedule::new(stages),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.feature_dim % self.tokens != 0 {
            return Err(Error::config(format!(
                "feature_dim {} must split into {} semantic tokens",
                self.feature_dim, self.tokens
            )));
        }
        if self.snn_tokens == 0 || self.feature_dim % self.snn_tokens != 0 {
            return Err(Error::config(format!(
                "feature_dim {} must split into {} spiking tokens",
                self.feature_dim, self.snn_tokens
            )));
        }
        if self.heads == 0 || self.t_emb % self.heads != 0 {
            return Err(Error::config(format!(
                "t_emb {} is not divisible into {} heads",
                self.t_emb, self.heads
            )));
        }
        let schedule = self.schedule()?;
        if self.frames < schedule.first_timesteps() {
            return Err(Error::config(format!(
                "{} frames cannot feed a first stage of {} timesteps",
                self.frames,
                schedule.first_timesteps()
            )));
        }
        if self.contrast <= 0.0 {
            return Err(Error::config("contrast threshold must be positive"));
        }
        self.lif().validate()?;
        let (d_enc, d_proj, d_wproj) = self.dropout_rates();
        for (name, v) in [("d_enc", d_enc), ("d_proj", d_proj), ("d_wproj", d_wproj)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn t_in(&self) -> usize {
        self.feature_dim / self.tokens
    }

    pub fn snn_width(&self) -> usize {
        self.feature_dim / self.snn_tokens
    }
}

// ── Model ────────────────────────────────────────────────────────────

pub struct Model {
    pub config: ModelConfig,
    pub bank: ParamBank,
    enc_a: Encoder,
    enc_v: Encoder,
    rjlu: Rjlu,
    dab: DabParams,
    snn_a: SpikeFormer,
    snn_v: SpikeFormer,
    crm_a: CrmFuse,
    crm_v: CrmFuse,
    cmt: CrossModalTransformer,
    av_proj: ProjectionHead,
    word_proj: ProjectionHead,
    rec_proj: ProjectionHead,
}

/// Per-stage projected embeddings of one sample.
pub struct StageEmbed {
    pub o_av: Tensor,
    pub o_rec: Tensor,
}

pub struct SampleForward {
    pub stages: Vec<StageEmbed>,
}

impl SampleForward {
    pub fn final_embedding(&self) -> &Tensor {
        &self.stages.last().expect("at least one stage").o_av
    }
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1217_ab1e);
        let mut bank = ParamBank::new();
        let (d_enc, d_proj, d_wproj) = config.dropout_rates();
        let enc_spec = EncoderSpec {
            t_in: config.t_in(),
            t_hid: config.t_hid,
            t_emb: config.t_emb,
            dropout: d_enc,
        };
        let enc_a = Encoder::init(&mut bank, &mut rng, "enc_a", enc_spec)?;
        let enc_v = Encoder::init(&mut bank, &mut rng, "enc_v", enc_spec)?;
        let rjlu = Rjlu::init(&mut bank, &mut rng, "rjlu", config.t_emb)?;
        let dab = DabParams::init(&mut bank, "dab");
        let schedule = config.schedule()?;
        let body = match config.kind {
            ModelKind::Mdst => SnnBody::Mlp,
            ModelKind::MdstPp => SnnBody::Transformer,
        };
        let snn_a = SpikeFormer::init(
            &mut bank,
            &mut rng,
            "snn_a",
            body,
            schedule.clone(),
            config.snn_tokens,
            config.snn_width(),
            config.t_emb,
            config.lif(),
            config.dynamic_threshold,
        )?;
        let snn_v = SpikeFormer::init(
            &mut bank,
            &mut rng,
            "snn_v",
            body,
            schedule,
            config.snn_tokens,
            config.snn_width(),
            config.t_emb,
            config.lif(),
            config.dynamic_threshold,
        )?;
        let crm_a = CrmFuse::init(&mut bank, &mut rng, "crm_a", config.t_emb);
        let crm_v = CrmFuse::init(&mut bank, &mut rng, "crm_v", config.t_emb);
        let cmt = CrossModalTransformer::init(&mut bank, &mut rng, "cmt", config.t_emb, config.heads)?;
        let av_proj = ProjectionHead::init(
            &mut bank,
            &mut rng,
            "av_proj",
            ProjectionSpec {
                d_in: config.t_emb,
                hidden: config.t_hid,
                d_out: config.t_fin,
                dropout: d_proj,
            },
        )?;
        let word_proj = ProjectionHead::init(
            &mut bank,
            &mut rng,
            "word_proj",
            ProjectionSpec {
                d_in: config.word_dim,
                hidden: config.t_proj,
                d_out: config.t_fin,
                dropout: d_wproj,
            },
        )?;
        let rec_proj = ProjectionHead::init(
            &mut bank,
            &mut rng,
            "rec_proj",
            ProjectionSpec {
                d_in: config.t_fin,
                hidden: config.t_proj,
                d_out: config.t_fin,
                dropout: d_proj,
            },
        )?;
        Ok(Model {
            config,
            bank,
            enc_a,
            enc_v,
            rjlu,
            dab,
            snn_a,
            snn_v,
            crm_a,
            crm_v,
            cmt,
            av_proj,
            word_proj,
            rec_proj,
        })
    }

    pub fn n_stages(&self) -> usize {
        match self.config.kind {
            ModelKind::Mdst => 1,
            ModelKind::MdstPp => self.config.stages.len(),
        }
    }

    /// Visual event grid for a sample.
    pub fn event_grid(&self, visual: &Tensor) -> Result<EventGrid> {
        feature_egm(visual, self.config.contrast)
    }

    /// Full forward pass of one sample.
    ///
    /// `audio`/`visual` are raw `[frames, feature_dim]` tensors (constants;
    /// parameters enter through `ctx`).
    pub fn forward_sample(&self, ctx: &Ctx, audio: &Tensor, visual: &Tensor) -> Result<SampleForward> {
        let cfg = &self.config;
        let d = cfg.feature_dim;
        if audio.shape() != [cfg.frames, d] || visual.shape() != [cfg.frames, d] {
            return Err(Error::ShapeMismatch {
                op: "forward_sample",
                left: audio.shape().to_vec(),
                right: vec![cfg.frames, d],
            });
        }

        // Semantic stream: encode per frame, recur the joint knowledge.
        let mut h = JointKnowledge::zeros(ctx, cfg.t_emb)?;
        let mut fused_last: Option<Tensor> = None;
        let mut a_sum: Option<Tensor> = None;
        let mut v_sum: Option<Tensor> = None;
        for t in 0..cfg.frames {
            let a_raw = audio.row(t)?.reshape(vec![cfg.tokens, cfg.t_in()])?;
            let v_raw = visual.row(t)?.reshape(vec![cfg.tokens, cfg.t_in()])?;
            let a_enc = self.enc_a.forward(ctx, &a_raw)?;
            let v_enc = self.enc_v.forward(ctx, &v_raw)?;
            let step = self.rjlu.step(ctx, &a_enc, &v_enc, &h)?;
            h = step.h;
            fused_last = Some(step.fused);
            a_sum = Some(match a_sum {
                None => a_enc,
                Some(s) => s.add(&a_enc)?,
            });
            v_sum = Some(match v_sum {
                None => v_enc,
                Some(s) => s.add(&v_enc)?,
            });
        }
        let inv_t = 1.0 / cfg.frames as f64;
        let a_sem = a_sum.expect("frames >= 1").scale(inv_t)?;
        let v_sem = v_sum.expect("frames >= 1").scale(inv_t)?;
        let fused = fused_last.expect("frames >= 1");

        // Motion stream.
        let n_stages = self.n_stages();
        let (j_a, j_v) = match cfg.ablation {
            Ablation::NoMim => {
                let zero = ctx.input(vec![0.0; cfg.t_emb], vec![cfg.t_emb])?;
                (vec![zero.clone(); n_stages], vec![zero; n_stages])
            }
            Ablation::Full => {
                let grid = self.event_grid(visual)?;
                let grid_tensor = ctx.input(grid.tensor().to_vec(), grid.shape().to_vec())?;
                let v_rows: Vec<Tensor> = (0..cfg.frames)
                    .map(|t| grid_tensor.row(t))
                    .collect::<Result<_>>()?;
                let beta = self.dab.beta(ctx)?;
                let motion_mean = grid_tensor.mean_axis(0)?;
                let a_rows: Vec<Tensor> = (0..cfg.frames)
                    .map(|t| dab_term(&audio.row(t)?, &motion_mean, &beta))
                    .collect::<Result<_>>()?;
                let out_v = self
                    .snn_v
                    .forward(ctx, &v_rows, &grid_tensor, Some(&fused))?;
                let out_a = self
                    .snn_a
                    .forward(ctx, &a_rows, &grid_tensor, Some(&fused))?;
                (out_a.stage_outputs, out_v.stage_outputs)
            }
        };

        // Fusion and projection per stage.
        let mut stages = Vec::with_capacity(n_stages);
        for i in 0..n_stages {
            let p_a = self.crm_a.forward(ctx, &a_sem, &j_a[i])?;
            let p_v = self.crm_v.forward(ctx, &v_sem, &j_v[i])?;
            let f_av = self.cmt.forward(ctx, &p_v, &p_a)?;
            let pooled = f_av.mean_axis(0)?;
            let o_av = self.av_proj.forward_vec(ctx, &pooled)?;
            let o_rec = self.rec_proj.forward_vec(ctx, &o_av)?;
            stages.push(StageEmbed { o_av, o_rec });
        }
        Ok(SampleForward { stages })
    }

    /// Project a class word vector into the shared embedding space.
    pub fn project_word(&self, ctx: &Ctx, word: &[f64]) -> Result<Tensor> {
        if word.len() != self.config.word_dim {
            return Err(Error::ShapeMismatch {
                op: "project_word",
                left: vec![word.len()],
                right: vec![self.config.word_dim],
            });
        }
        let w = ctx.input(word.to_vec(), vec![self.config.word_dim])?;
        self.word_proj.forward_vec(ctx, &w)
    }

    /// Evaluation context for this model.
    pub fn eval_ctx(&self) -> Ctx<'_> {
        Ctx::eval(&self.bank, self.config.surrogate())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            frames: 6,
            tokens: 2,
            t_hid: 6,
            t_emb: 4,
            heads: 2,
            t_proj: 5,
            t_fin: 7,
            word_dim: 7,
            snn_tokens: 2,
            stages: vec![[4, 1], [2, 1]],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation_catches_bad_token_split() {
        let cfg = ModelConfig {
            feature_dim: 10,
            tokens: 4,
            ..tiny_config()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_produces_one_embedding_per_stage() {
        let model = Model::init(tiny_config(), 42).unwrap();
        let ctx = model.eval_ctx();
        let audio = Tensor::filled(vec![6, 8], 0.3);
        let visual = Tensor::filled(vec![6, 8], 0.9);
        let out = model.forward_sample(&ctx, &audio, &visual).unwrap();
        assert_eq!(out.stages.len(), 2);
        for s in &out.stages {
            assert_eq!(s.o_av.shape(), &[7]);
            assert_eq!(s.o_rec.shape(), &[7]);
        }
    }

    #[test]
    fn mdst_has_single_stage() {
        let cfg = ModelConfig {
            kind: ModelKind::Mdst,
            ..tiny_config()
        };
        let model = Model::init(cfg, 1).unwrap();
        let ctx = model.eval_ctx();
        let audio = Tensor::filled(vec![6, 8], 0.1);
        let visual = Tensor::filled(vec![6, 8], 1.1);
        let out = model.forward_sample(&ctx, &audio, &visual).unwrap();
        assert_eq!(out.stages.len(), 1);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = Model::init(tiny_config(), 3).unwrap();
        let ctx = model.eval_ctx();
        let audio = Tensor::filled(vec![6, 8], -0.4);
        let visual = Tensor::filled(vec![6, 8], 0.7);
        let a = model.forward_sample(&ctx, &audio, &visual).unwrap();
        let b = model.forward_sample(&ctx, &audio, &visual).unwrap();
        assert_eq!(a.final_embedding().data(), b.final_embedding().data());
    }

    #[test]
    fn word_projection_width() {
        let model = Model::init(tiny_config(), 3).unwrap();
        let ctx = model.eval_ctx();
        let w = vec![0.1; 7];
        let o = model.project_word(&ctx, &w).unwrap();
        assert_eq!(o.shape(), &[7]);
    }
}
