//! Losses, the Adam optimizer, training loops for both model variants, and
//! ZSL/GZSL evaluation.
//!
//! Each batch runs one forward pass per sample on an independent tape
//! (data-parallel), stitches the per-sample embeddings into a small shared
//! loss tape, backpropagates the batch loss to per-embedding seed gradients,
//! then backpropagates each sample tape from its seeds (data-parallel
//! again). Parameter gradients merge in sample order, so training is
//! bit-deterministic regardless of thread count.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{synthetic_dataset, Dataset, SplitRatios, SyntheticSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::io;
use crate::model::{Model, ModelConfig, ModelKind, SampleForward};
use crate::nn::{Ctx, ParamBank};
use crate::tensor::{Tape, Tensor};

// ── Losses ───────────────────────────────────────────────────────────

/// Triplet margin and per-stage loss weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    /// One weight per stage; `None` means all ones.
    pub stage_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 1.0,
            stage_weights: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(Error::config("triplet margin gamma must be positive"));
        }
        if let Some(w) = &self.stage_weights {
            if w.iter().any(|x| *x < 0.0) {
                return Err(Error::config("stage weights must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn weight(&self, stage: usize) -> f64 {
        self.stage_weights
            .as_ref()
            .and_then(|w| w.get(stage).copied())
            .unwrap_or(1.0)
    }
}

/// Squared Euclidean distance `sum((a - b)^2)` as a scalar tensor.
pub fn squared_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.sub(b)?;
    d.mul(&d)?.sum_all()
}

/// Distance-margin triplet: `[gamma + d(av+, w+) - d(av-, w+)]_+` summed
/// over both anchor directions (the two directions coincide for a symmetric
/// distance, hence the factor 2).
pub fn triplet_loss(o_av_pos: &Tensor, o_w_pos: &Tensor, o_av_neg: &Tensor, gamma: f64) -> Result<Tensor> {
    let d_pos = squared_distance(o_av_pos, o_w_pos)?;
    let d_neg = squared_distance(o_av_neg, o_w_pos)?;
    d_pos.sub(&d_neg)?.shift(gamma)?.relu()?.scale(2.0)
}

/// Mean over samples of the per-sample squared distance.
pub fn projection_loss(o_av: &[Tensor], o_w: &[Tensor]) -> Result<Tensor> {
    mean_squared_pairs(o_av, o_w, "projection_loss")
}

/// Same form as the projection loss, applied to reconstructed embeddings.
pub fn reconstruction_loss(o_av_rec: &[Tensor], o_w: &[Tensor]) -> Result<Tensor> {
    mean_squared_pairs(o_av_rec, o_w, "reconstruction_loss")
}

fn mean_squared_pairs(a: &[Tensor], b: &[Tensor], op: &'static str) -> Result<Tensor> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let mut acc = squared_distance(&a[0], &b[0])?;
    for (x, y) in a.iter().zip(b).skip(1) {
        acc = acc.add(&squared_distance(x, y)?)?;
    }
    acc.scale(1.0 / a.len() as f64)
}

/// `L_all = L_n + L_p + L_r`.
pub fn total_loss(l_n: &Tensor, l_p: &Tensor, l_r: &Tensor) -> Result<Tensor> {
    l_n.add(l_p)?.add(l_r)
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Plain Adam over the parameter bank.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(bank: &ParamBank, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: bank.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: bank.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Apply one update; `grads` is indexed like the bank, `None` entries
    /// (parameters with no gradient this step) are skipped.
    pub fn step(&mut self, bank: &mut ParamBank, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let value = &mut bank.get_mut(crate::nn::ParamId(pi)).value;
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub stage_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-4,
            batch_size: 16,
            gamma: 1.0,
            stage_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            stage_weights: self.stage_weights.clone(),
        }
    }
}

/// One epoch's averaged loss components. Serialized as metric-log lines.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_n")]
    pub l_n: f64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub per_stage: Vec<f64>,
}

struct SampleBundle {
    ctx_grads: Vec<Option<Vec<f64>>>,
}

struct ForwardBundle<'a> {
    ctx: Ctx<'a>,
    forward: SampleForward,
    o_w: Tensor,
    tape: Tape,
}

fn mix_seed(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the packed inputs
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(c.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Train a model in place. Bit-deterministic given `(seed, config, dataset)`.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    if dataset.splits.train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let loss_cfg = cfg.loss();
    loss_cfg.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let n_stages = model.n_stages();
    let mut adam = Adam::new(&model.bank, cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order = dataset.splits.train.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, 0xe, 0));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = EpochSums::new(n_stages);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (batch_losses, grads) = train_step(model, dataset, batch, &loss_cfg, seed, epoch, step)?;
            adam.step(&mut model.bank, &grads);
            sums.add(&batch_losses);
        }
        history.push(sums.into_metrics(epoch + 1));
    }
    Ok(history)
}

struct EpochSums {
    n: usize,
    l_n: f64,
    l_p: f64,
    l_r: f64,
    per_stage: Vec<f64>,
}

impl EpochSums {
    fn new(n_stages: usize) -> Self {
        EpochSums {
            n: 0,
            l_n: 0.0,
            l_p: 0.0,
            l_r: 0.0,
            per_stage: vec![0.0; n_stages],
        }
    }

    fn add(&mut self, b: &BatchLosses) {
        self.n += 1;
        self.l_n += b.l_n;
        self.l_p += b.l_p;
        self.l_r += b.l_r;
        for (a, v) in self.per_stage.iter_mut().zip(&b.per_stage) {
            *a += v;
        }
    }

    fn into_metrics(self, epoch: usize) -> EpochMetrics {
        let inv = 1.0 / self.n.max(1) as f64;
        let l_n = self.l_n * inv;
        let l_p = self.l_p * inv;
        let l_r = self.l_r * inv;
        EpochMetrics {
            epoch,
            l_n,
            l_p,
            l_r,
            l_total: l_n + l_p + l_r,
            per_stage: self.per_stage.iter().map(|v| v * inv).collect(),
        }
    }
}

struct BatchLosses {
    l_n: f64,
    l_p: f64,
    l_r: f64,
    per_stage: Vec<f64>,
}

type MergedGrads = Vec<Option<Vec<f64>>>;

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &Model,
    dataset: &Dataset,
    batch: &[usize],
    loss_cfg: &LossConfig,
    seed: u64,
    epoch: usize,
    step: usize,
) -> Result<(BatchLosses, MergedGrads)> {
    let n_stages = model.n_stages();

    // Phase A: per-sample forward passes on independent tapes.
    let bundles: Vec<Result<ForwardBundle>> = exec::map_indexed(batch.len(), |bi| {
        let sample = &dataset.samples[batch[bi]];
        let tape = Tape::new();
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, step as u64, bi as u64));
        let ctx = Ctx::train(&model.bank, model.config.surrogate(), tape.clone(), rng);
        let forward = model.forward_sample(&ctx, &sample.audio, &sample.visual)?;
        let o_w = model.project_word(&ctx, &dataset.class(sample.class_id).word)?;
        Ok(ForwardBundle {
            ctx,
            forward,
            o_w,
            tape,
        })
    });
    let bundles: Vec<ForwardBundle> = bundles.into_iter().collect::<Result<_>>()?;

    // Phase B: stitch embedding values into a shared loss tape.
    let loss_tape = Tape::new();
    let t_fin = model.config.t_fin;
    let lift = |t: &Tensor| loss_tape.leaf(t.to_vec(), vec![t_fin], true);
    let mut av: Vec<Vec<Tensor>> = Vec::with_capacity(batch.len());
    let mut rec: Vec<Vec<Tensor>> = Vec::with_capacity(batch.len());
    let mut words: Vec<Tensor> = Vec::with_capacity(batch.len());
    for b in &bundles {
        av.push(b.forward.stages.iter().map(|s| lift(&s.o_av)).collect::<Result<_>>()?);
        rec.push(b.forward.stages.iter().map(|s| lift(&s.o_rec)).collect::<Result<_>>()?);
        words.push(lift(&b.o_w)?);
    }

    // One negative per anchor, uniform over other-class samples in the batch.
    let mut neg_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, step as u64, 0x9e9));
    let classes: Vec<usize> = batch.iter().map(|i| dataset.samples[*i].class_id).collect();
    let negatives: Vec<Option<usize>> = (0..batch.len())
        .map(|i| {
            let others: Vec<usize> = (0..batch.len()).filter(|j| classes[*j] != classes[i]).collect();
            if others.is_empty() {
                None
            } else {
                Some(others[neg_rng.gen_range(0..others.len())])
            }
        })
        .collect();

    let inv_b = 1.0 / batch.len() as f64;
    let mut l_n_acc: Option<Tensor> = None;
    let mut l_p_acc: Option<Tensor> = None;
    let mut l_r_acc: Option<Tensor> = None;
    let mut per_stage = Vec::with_capacity(n_stages);
    let mut total: Option<Tensor> = None;
    for s in 0..n_stages {
        let av_s: Vec<Tensor> = av.iter().map(|v| v[s].clone()).collect();
        let rec_s: Vec<Tensor> = rec.iter().map(|v| v[s].clone()).collect();
        let l_p = projection_loss(&av_s, &words)?;
        let l_r = reconstruction_loss(&rec_s, &words)?;
        let mut l_n: Option<Tensor> = None;
        for i in 0..batch.len() {
            if let Some(j) = negatives[i] {
                let t = triplet_loss(&av_s[i], &words[i], &av_s[j], loss_cfg.gamma)?;
                l_n = Some(match l_n {
                    None => t,
                    Some(acc) => acc.add(&t)?,
                });
            }
        }
        let l_n = match l_n {
            Some(t) => t.scale(inv_b)?,
            None => loss_tape.leaf(vec![0.0], vec![1], false)?,
        };
        let stage_total = total_loss(&l_n, &l_p, &l_r)?;
        let w = loss_cfg.weight(s);
        per_stage.push(stage_total.item() * w);
        let weighted = stage_total.scale(w)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => acc.add(&weighted)?,
        });
        let stack = |acc: Option<Tensor>, t: &Tensor| -> Result<Option<Tensor>> {
            let wt = t.scale(w)?;
            Ok(Some(match acc {
                None => wt,
                Some(a) => a.add(&wt)?,
            }))
        };
        l_n_acc = stack(l_n_acc, &l_n)?;
        l_p_acc = stack(l_p_acc, &l_p)?;
        l_r_acc = stack(l_r_acc, &l_r)?;
    }
    let total = total.expect("at least one stage");
    let grads = loss_tape.backward(&total)?;

    // Phase C: seed each sample tape with its embedding gradients and
    // backpropagate in parallel; merge parameter gradients in batch order.
    let seeds: Vec<Vec<(usize, Vec<f64>)>> = (0..batch.len())
        .map(|i| {
            let mut v: Vec<(usize, Vec<f64>)> = Vec::new();
            for s in 0..n_stages {
                if let Some(g) = grads.wrt(&av[i][s]) {
                    v.push((s * 2, g.to_vec()));
                }
                if let Some(g) = grads.wrt(&rec[i][s]) {
                    v.push((s * 2 + 1, g.to_vec()));
                }
            }
            if let Some(g) = grads.wrt(&words[i]) {
                v.push((usize::MAX, g.to_vec()));
            }
            v
        })
        .collect();

    let work: Vec<(ForwardBundle, Vec<(usize, Vec<f64>)>)> =
        bundles.into_iter().zip(seeds).collect();
    let sample_grads: Vec<Result<SampleBundle>> = exec::map_into(work, |(b, seed_list)| {
        let mut seed_pairs: Vec<(&Tensor, Vec<f64>)> = Vec::new();
        for (slot, g) in &seed_list {
            let target = if *slot == usize::MAX {
                &b.o_w
            } else if slot % 2 == 0 {
                &b.forward.stages[slot / 2].o_av
            } else {
                &b.forward.stages[slot / 2].o_rec
            };
            seed_pairs.push((target, g.clone()));
        }
        let g = b.tape.backward_seeded(&seed_pairs)?;
        Ok(SampleBundle {
            ctx_grads: b.ctx.collect_grads(&g),
        })
    });

    let mut merged: Vec<Option<Vec<f64>>> = vec![None; model.bank.len()];
    for sg in sample_grads {
        let sg = sg?;
        for (pi, g) in sg.ctx_grads.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut merged[pi] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => merged[pi] = Some(g),
                }
            }
        }
    }

    let l_n = l_n_acc.expect("stage loop ran").item();
    let l_p = l_p_acc.expect("stage loop ran").item();
    let l_r = l_r_acc.expect("stage loop ran").item();
    Ok((
        BatchLosses {
            l_n,
            l_p,
            l_r,
            per_stage,
        },
        merged,
    ))
}

// ── Evaluation ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Zsl,
    Gzsl,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(EvalMode::Zsl),
            "gzsl" => Ok(EvalMode::Gzsl),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// Accuracies in percent.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub hm: f64,
    pub zsl_acc: f64,
}

/// `HM = 2US / (U + S)`, zero whenever either accuracy is zero.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u <= 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

/// Nearest projected word vector under squared Euclidean distance.
fn classify(embedding: &[f64], candidates: &[(usize, Vec<f64>)]) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for (class, w) in candidates {
        let d: f64 = embedding.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (*class, d);
        }
    }
    best.0
}

fn accuracy(model: &Model, dataset: &Dataset, idx: &[usize], candidates: &[(usize, Vec<f64>)]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::data("evaluation split is empty"));
    }
    let hits: Vec<Result<bool>> = exec::map_indexed(idx.len(), |k| {
        let sample = &dataset.samples[idx[k]];
        let ctx = model.eval_ctx();
        let fwd = model.forward_sample(&ctx, &sample.audio, &sample.visual)?;
        let pred = classify(fwd.final_embedding().data(), candidates);
        Ok(pred == sample.class_id)
    });
    let mut correct = 0usize;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / idx.len() as f64)
}

fn word_table(model: &Model, dataset: &Dataset, classes: &[usize]) -> Result<Vec<(usize, Vec<f64>)>> {
    let ctx = model.eval_ctx();
    classes
        .iter()
        .map(|c| {
            let w = model.project_word(&ctx, &dataset.class(*c).word)?;
            Ok((*c, w.to_vec()))
        })
        .collect()
}

/// ZSL: unseen test samples ranked against unseen test classes.
/// GZSL: the full test set ranked against every class; summarized by the
/// harmonic mean of seen and unseen accuracy.
pub fn evaluate(model: &Model, dataset: &Dataset, mode: EvalMode) -> Result<EvalReport> {
    match mode {
        EvalMode::Zsl => {
            let candidates = word_table(model, dataset, &dataset.classes_of(&dataset.splits.test_unseen))?;
            let zsl = accuracy(model, dataset, &dataset.splits.test_unseen, &candidates)?;
            Ok(EvalReport {
                zsl_acc: zsl,
                ..EvalReport::default()
            })
        }
        EvalMode::Gzsl => {
            let all: Vec<usize> = dataset.classes.iter().map(|c| c.id).collect();
            let candidates = word_table(model, dataset, &all)?;
            let s = accuracy(model, dataset, &dataset.splits.test_seen, &candidates)?;
            let u = accuracy(model, dataset, &dataset.splits.test_unseen, &candidates)?;
            Ok(EvalReport {
                seen_acc: s,
                unseen_acc: u,
                hm: harmonic_mean(s, u),
                zsl_acc: 0.0,
            })
        }
    }
}

// ── Run orchestration ────────────────────────────────────────────────

/// Top-level run configuration (TOML file; flat key-value with one table
/// level).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory; when unset, a synthetic dataset is generated.
    pub path: Option<String>,
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    #[serde(flatten)]
    pub ratios: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            spec: SyntheticSpec::default(),
            ratios: SplitRatios::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data.path {
            Some(dir) => crate::data::load_features(Path::new(dir)),
            None => synthetic_dataset(&self.data.spec, self.seed, &self.data.ratios),
        }
    }
}

/// Final-report payload written next to the metric log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub model: ModelKind,
    pub epochs: usize,
    pub n_params: usize,
    pub final_metrics: EpochMetrics,
}

/// Train per the config and persist `config.json`, `metrics.jsonl`,
/// `report.json`, and `weights/` under `out_dir`. Byte-identical for
/// identical `(config, seed)`.
pub fn run_training(config: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    let dataset = config.dataset()?;
    let mut model = Model::init(config.model.clone(), config.seed)?;
    let history = train(&mut model, &dataset, &config.train, config.seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    io::write_json_pretty(&out_dir.join("config.json"), config)?;
    io::write_jsonl(&out_dir.join("metrics.jsonl"), &history)?;
    io::save_weights(&out_dir.join("weights"), &model.bank)?;
    let report = RunReport {
        seed: config.seed,
        model: config.model.kind,
        epochs: config.train.epochs,
        n_params: model.bank.n_scalars(),
        final_metrics: history.last().cloned().ok_or_else(|| Error::config("zero epochs"))?,
    };
    io::write_json_pretty(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Load a trained run directory back into a model.
pub fn load_run(out_dir: &Path) -> Result<(RunConfig, Model)> {
    let text = std::fs::read_to_string(out_dir.join("config.json"))
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
    let mut model = Model::init(config.model.clone(), config.seed)?;
    io::load_weights(&out_dir.join("weights"), &mut model.bank)?;
    Ok((config, model))
}

/// Train the spiking-MLP variant (single-stage schedule).
pub fn train_mdst(
    mut model_cfg: ModelConfig,
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model, Vec<EpochMetrics>)> {
    model_cfg.kind = ModelKind::Mdst;
    let mut model = Model::init(model_cfg, seed)?;
    let history = train(&mut model, dataset, train_cfg, seed)?;
    Ok((model, history))
}

/// Train the spiking-transformer variant with timestep shrinkage.
pub fn train_mdstpp(
    mut model_cfg: ModelConfig,
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model, Vec<EpochMetrics>)> {
    model_cfg.kind = ModelKind::MdstPp;
    let mut model = Model::init(model_cfg, seed)?;
    let history = train(&mut model, dataset, train_cfg, seed)?;
    Ok((model, history))
}
