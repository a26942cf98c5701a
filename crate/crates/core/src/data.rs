//! Synthetic background-confounded dataset, file ingestion, and splits.
//!
//! The generator builds classes in background groups: group-mates share one
//! static background vector, one motion amplitude/phase profile, and differ
//! only in the integer frequency of their motion sinusoid. Frequencies are
//! chosen coprime to the frame count, so the multiset of per-frame values is
//! identical for group-mates — any time-pooled statistic is blind to the
//! difference, while frame-to-frame dynamics (and therefore event rates)
//! separate them cleanly. Class word vectors are mixed from the same group
//! attributes and frequency slots, which is what makes unseen classes
//! rankable at all.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// Width of the class word-embedding space.
pub const WORD_DIM: usize = 300;

// ── Spec and dataset types ───────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_seen_classes: usize,
    pub n_unseen_classes: usize,
    pub samples_per_class: usize,
    /// Frames per sample.
    pub frames: usize,
    pub feature_dim: usize,
    /// Classes per shared-background group (>= 2).
    pub group_size: usize,
    /// Visual feature noise.
    pub noise_sigma: f64,
    /// Audio feature noise.
    pub audio_noise_sigma: f64,
    /// Residual randomness mixed into class word codes.
    pub word_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_seen_classes: 8,
            n_unseen_classes: 4,
            samples_per_class: 40,
            frames: 16,
            feature_dim: 64,
            group_size: 2,
            noise_sigma: 0.05,
            audio_noise_sigma: 0.05,
            word_noise: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_seen_classes == 0 || self.n_unseen_classes == 0 {
            return Err(Error::config("need at least one seen and one unseen class"));
        }
        if self.group_size < 2 {
            return Err(Error::config("background groups need at least 2 classes"));
        }
        if self.n_seen_classes % self.group_size != 0 || self.n_unseen_classes % self.group_size != 0
        {
            return Err(Error::config(format!(
                "seen ({}) and unseen ({}) class counts must be multiples of the group size ({})",
                self.n_seen_classes, self.n_unseen_classes, self.group_size
            )));
        }
        if self.frames < 2 {
            return Err(Error::config("samples need at least 2 frames"));
        }
        if self.feature_dim == 0 || self.samples_per_class == 0 {
            return Err(Error::config("feature_dim and samples_per_class must be positive"));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_seen_classes + self.n_unseen_classes
    }
}

#[derive(Clone, Debug)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub word: Vec<f64>,
    pub seen: bool,
    pub group: usize,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub class_id: usize,
    /// `[frames, feature_dim]`.
    pub audio: Tensor,
    /// `[frames, feature_dim]`.
    pub visual: Tensor,
}

/// Sample-index lists per split. Unseen classes never appear in `train`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<usize>,
    pub val_unseen: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: Vec<ClassInfo>,
    pub samples: Vec<Sample>,
    pub splits: DatasetSplits,
}

impl Dataset {
    pub fn class(&self, id: usize) -> &ClassInfo {
        &self.classes[id]
    }

    pub fn seen_class_ids(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| c.seen).map(|c| c.id).collect()
    }

    pub fn unseen_class_ids(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| !c.seen).map(|c| c.id).collect()
    }

    /// Classes present among the given sample indices (sorted, deduplicated).
    pub fn classes_of(&self, idx: &[usize]) -> Vec<usize> {
        let mut ids: Vec<usize> = idx.iter().map(|i| self.samples[*i].class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// The invariant every split must satisfy.
    pub fn validate_splits(&self) -> Result<()> {
        let s = &self.splits;
        let mut seen_marks = vec![0u8; self.samples.len()];
        for (name, list) in [
            ("train", &s.train),
            ("val_unseen", &s.val_unseen),
            ("test_seen", &s.test_seen),
            ("test_unseen", &s.test_unseen),
        ] {
            for i in list {
                if *i >= self.samples.len() {
                    return Err(Error::data(format!("split {name} references sample {i}")));
                }
                seen_marks[*i] += 1;
                if seen_marks[*i] > 1 {
                    return Err(Error::data(format!(
                        "sample {} appears in more than one split",
                        self.samples[*i].id
                    )));
                }
            }
        }
        for i in s.train.iter().chain(&s.test_seen) {
            if !self.classes[self.samples[*i].class_id].seen {
                return Err(Error::data(format!(
                    "unseen-class sample {} leaked into a seen split",
                    self.samples[*i].id
                )));
            }
        }
        for i in s.val_unseen.iter().chain(&s.test_unseen) {
            if self.classes[self.samples[*i].class_id].seen {
                return Err(Error::data(format!(
                    "seen-class sample {} leaked into an unseen split",
                    self.samples[*i].id
                )));
            }
        }
        Ok(())
    }
}

// ── Synthetic generation ─────────────────────────────────────────────

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn quantize(v: f64) -> f64 {
    io::quantize_f32(v)
}

/// Generate the confounded dataset (without splits; see [`make_splits`]).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed_da_7a);
    let n_classes = spec.n_classes();
    let n_groups = n_classes / spec.group_size;
    let d = spec.feature_dim;
    let t_len = spec.frames;
    let q = 8; // group attribute width

    // Dataset-level mixing matrices.
    let bg_mix: Vec<f64> = (0..d * q).map(|_| normal(&mut rng)).collect();
    let audio_mix: Vec<f64> = (0..d * d).map(|_| normal(&mut rng)).collect();
    let word_group_mix: Vec<f64> = (0..WORD_DIM * q).map(|_| normal(&mut rng)).collect();
    let word_freq_mix: Vec<f64> = (0..WORD_DIM * spec.group_size)
        .map(|_| normal(&mut rng))
        .collect();

    // Group attributes -> backgrounds and shared motion profiles.
    let mut group_attr = Vec::with_capacity(n_groups);
    let mut group_bg = Vec::with_capacity(n_groups);
    let mut group_amp = Vec::with_capacity(n_groups);
    let mut group_phase = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let z: Vec<f64> = (0..q).map(|_| normal(&mut rng)).collect();
        let mut bg = vec![0.0; d];
        for k in 0..d {
            let mut u = 0.0;
            for j in 0..q {
                u += bg_mix[k * q + j] * z[j];
            }
            bg[k] = 1.2 + 0.4 * (u / (q as f64).sqrt()).tanh();
        }
        group_attr.push(z);
        group_bg.push(bg);
        group_amp.push((0..d).map(|_| rng.gen_range(0.3..0.7)).collect::<Vec<f64>>());
        group_phase.push((0..d).map(|_| rng.gen_range(0.0..TAU)).collect::<Vec<f64>>());
    }

    // Classes: group-mates share everything but the motion frequency.
    // Odd frequencies stay coprime to power-of-two frame counts, so the
    // per-frame value multiset is frequency-independent.
    let mut classes = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let group = c / spec.group_size;
        let slot = c % spec.group_size;
        let seen = c < spec.n_seen_classes;
        let mut word = vec![0.0; WORD_DIM];
        for k in 0..WORD_DIM {
            let mut v = 0.0;
            for j in 0..q {
                v += word_group_mix[k * q + j] * group_attr[group][j];
            }
            v += 1.5 * word_freq_mix[k * spec.group_size + slot];
            v += spec.word_noise * normal(&mut rng);
            word[k] = v;
        }
        let norm = word.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in word.iter_mut() {
            *v = quantize(*v / norm);
        }
        classes.push(ClassInfo {
            id: c,
            name: format!("class_{c:02}"),
            word,
            seen,
            group,
        });
    }

    // Samples.
    let mut samples = Vec::with_capacity(n_classes * spec.samples_per_class);
    for c in 0..n_classes {
        let group = c / spec.group_size;
        let slot = c % spec.group_size;
        let freq = (1 + 2 * slot) as f64;
        let bg = &group_bg[group];
        let amp = &group_amp[group];
        let phase = &group_phase[group];
        for s in 0..spec.samples_per_class {
            let theta = rng.gen_range(0.0..TAU);
            let mut motion = vec![0.0; t_len * d];
            for t in 0..t_len {
                for k in 0..d {
                    motion[t * d + k] =
                        amp[k] * (TAU * freq * t as f64 / t_len as f64 + phase[k] + theta).sin();
                }
            }
            let mut visual = vec![0.0; t_len * d];
            let mut audio = vec![0.0; t_len * d];
            for t in 0..t_len {
                for k in 0..d {
                    visual[t * d + k] = quantize(
                        bg[k] + motion[t * d + k] + spec.noise_sigma * normal(&mut rng),
                    );
                }
                for k in 0..d {
                    let mut v = 0.0;
                    for j in 0..d {
                        v += audio_mix[k * d + j] * motion[t * d + j];
                    }
                    audio[t * d + k] = quantize(
                        v / (d as f64).sqrt() + spec.audio_noise_sigma * normal(&mut rng),
                    );
                }
            }
            samples.push(Sample {
                id: format!("s{c:02}_{s:03}"),
                class_id: c,
                audio: Tensor::new(audio, vec![t_len, d])?,
                visual: Tensor::new(visual, vec![t_len, d])?,
            });
        }
    }

    Ok(Dataset {
        classes,
        samples,
        splits: DatasetSplits::default(),
    })
}

// ── Splits ───────────────────────────────────────────────────────────

/// Class-level split plan.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitRatios {
    /// Unseen classes held for validation.
    pub val_unseen_classes: usize,
    /// Unseen classes held for testing.
    pub test_unseen_classes: usize,
    /// Fraction of each seen class's samples held out as seen test data.
    pub test_seen_fraction: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            val_unseen_classes: 2,
            test_unseen_classes: 2,
            test_seen_fraction: 0.25,
        }
    }
}

/// Deterministic class-level splits. Unseen background groups are assigned
/// whole to validation or test, so every unseen candidate set keeps its
/// confounded partner class.
pub fn make_splits(dataset: &Dataset, seed: u64, ratios: &SplitRatios) -> Result<DatasetSplits> {
    let unseen = dataset.unseen_class_ids();
    if ratios.val_unseen_classes + ratios.test_unseen_classes != unseen.len() {
        return Err(Error::config(format!(
            "split plan covers {} unseen classes but the dataset has {}",
            ratios.val_unseen_classes + ratios.test_unseen_classes,
            unseen.len()
        )));
    }
    if !(0.0..1.0).contains(&ratios.test_seen_fraction) {
        return Err(Error::config("test_seen_fraction must be in [0, 1)"));
    }

    // Group unseen classes by background group.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for c in &unseen {
        groups.entry(dataset.classes[*c].group).or_default().push(*c);
    }
    let group_size = groups.values().next().map(|v| v.len()).unwrap_or(1);
    if ratios.val_unseen_classes % group_size != 0 {
        return Err(Error::config(
            "val_unseen_classes must be a whole number of background groups",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SEED_SALT);
    let mut group_list: Vec<Vec<usize>> = groups.into_values().collect();
    shuffle(&mut group_list, &mut rng);
    let val_groups = ratios.val_unseen_classes / group_size;
    let mut val_classes: Vec<usize> = group_list[..val_groups].concat();
    let mut test_classes: Vec<usize> = group_list[val_groups..].concat();
    val_classes.sort_unstable();
    test_classes.sort_unstable();

    let mut splits = DatasetSplits::default();
    // Seen classes: hold out a deterministic per-class sample fraction.
    for c in dataset.seen_class_ids() {
        let mut idx: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class_id == c)
            .map(|(i, _)| i)
            .collect();
        shuffle(&mut idx, &mut rng);
        let held = (idx.len() as f64 * ratios.test_seen_fraction).round() as usize;
        splits.test_seen.extend_from_slice(&idx[..held]);
        splits.train.extend_from_slice(&idx[held..]);
    }
    for (i, s) in dataset.samples.iter().enumerate() {
        if val_classes.contains(&s.class_id) {
            splits.val_unseen.push(i);
        } else if test_classes.contains(&s.class_id) {
            splits.test_unseen.push(i);
        }
    }
    splits.train.sort_unstable();
    splits.test_seen.sort_unstable();
    Ok(splits)
}

const SPLIT_SEED_SALT: u64 = 0x53_50_4c_49_54; // "SPLIT"

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Generate and split in one step with the default plan.
pub fn synthetic_dataset(spec: &SyntheticSpec, seed: u64, ratios: &SplitRatios) -> Result<Dataset> {
    let mut ds = generate_synthetic(spec, seed)?;
    ds.splits = make_splits(&ds, seed, ratios)?;
    ds.validate_splits()?;
    Ok(ds)
}

// ── Persistence ──────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    sample_id: String,
    class_id: usize,
    audio_file: String,
    visual_file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassEntry {
    class_id: usize,
    name: String,
    vector: Vec<f64>,
    seen: bool,
    group: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SplitsFile {
    train: Vec<String>,
    val_unseen: Vec<String>,
    test_seen: Vec<String>,
    test_unseen: Vec<String>,
}

/// Save a dataset under `dir`: `manifest.jsonl`, `classes.jsonl`,
/// `splits.json`, and one SPKT tensor per modality per sample.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let tensors = dir.join("tensors");
    std::fs::create_dir_all(&tensors).map_err(|e| Error::io(tensors.display().to_string(), e))?;
    let mut manifest = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let audio_file = format!("tensors/{}_audio.spkt", s.id);
        let visual_file = format!("tensors/{}_visual.spkt", s.id);
        io::write_spkt(&dir.join(&audio_file), &s.audio)?;
        io::write_spkt(&dir.join(&visual_file), &s.visual)?;
        manifest.push(ManifestEntry {
            sample_id: s.id.clone(),
            class_id: s.class_id,
            audio_file,
            visual_file,
        });
    }
    io::write_jsonl(&dir.join("manifest.jsonl"), &manifest)?;
    let classes: Vec<ClassEntry> = dataset
        .classes
        .iter()
        .map(|c| ClassEntry {
            class_id: c.id,
            name: c.name.clone(),
            vector: c.word.clone(),
            seen: c.seen,
            group: c.group,
        })
        .collect();
    io::write_jsonl(&dir.join("classes.jsonl"), &classes)?;
    let id_of = |idx: &[usize]| -> Vec<String> {
        idx.iter().map(|i| dataset.samples[*i].id.clone()).collect()
    };
    io::write_json_pretty(
        &dir.join("splits.json"),
        &SplitsFile {
            train: id_of(&dataset.splits.train),
            val_unseen: id_of(&dataset.splits.val_unseen),
            test_seen: id_of(&dataset.splits.test_seen),
            test_unseen: id_of(&dataset.splits.test_unseen),
        },
    )
}

/// Load and validate a dataset directory produced by [`save_dataset`] (or by
/// an external feature-extraction pipeline following the same layout).
pub fn load_features(dir: &Path) -> Result<Dataset> {
    let manifest: Vec<ManifestEntry> = io::read_jsonl(&dir.join("manifest.jsonl"))?;
    if manifest.is_empty() {
        return Err(Error::data(format!(
            "{}: manifest is empty",
            dir.display()
        )));
    }
    let class_entries: Vec<ClassEntry> = io::read_jsonl(&dir.join("classes.jsonl"))?;
    if class_entries.is_empty() {
        return Err(Error::data("class-embedding file is empty"));
    }
    let mut classes: Vec<ClassInfo> = class_entries
        .into_iter()
        .map(|c| {
            if c.vector.len() != WORD_DIM {
                return Err(Error::data(format!(
                    "class {}: word vector has {} dims, expected {WORD_DIM}",
                    c.class_id,
                    c.vector.len()
                )));
            }
            Ok(ClassInfo {
                id: c.class_id,
                name: c.name,
                word: c.vector,
                seen: c.seen,
                group: c.group,
            })
        })
        .collect::<Result<_>>()?;
    classes.sort_by_key(|c| c.id);
    for (i, c) in classes.iter().enumerate() {
        if c.id != i {
            return Err(Error::data(format!(
                "class ids must be dense starting at 0; found {} at position {i}",
                c.id
            )));
        }
    }

    let mut samples = Vec::with_capacity(manifest.len());
    let mut shape: Option<Vec<usize>> = None;
    for entry in &manifest {
        if entry.class_id >= classes.len() {
            return Err(Error::data(format!(
                "sample {}: unknown class {}",
                entry.sample_id, entry.class_id
            )));
        }
        for file in [&entry.audio_file, &entry.visual_file] {
            let path = dir.join(file);
            if !path.exists() {
                return Err(Error::data(format!(
                    "sample {}: missing tensor file {}",
                    entry.sample_id,
                    path.display()
                )));
            }
        }
        let audio = io::read_spkt(&dir.join(&entry.audio_file))?;
        let visual = io::read_spkt(&dir.join(&entry.visual_file))?;
        if audio.shape().len() != 2 || visual.shape().len() != 2 {
            return Err(Error::data(format!(
                "sample {}: tensors must be [frames, dim]",
                entry.sample_id
            )));
        }
        match &shape {
            None => shape = Some(visual.shape().to_vec()),
            Some(s) => {
                if visual.shape() != s.as_slice() || audio.shape() != s.as_slice() {
                    return Err(Error::data(format!(
                        "sample {}: shape {:?}/{:?} differs from {:?}",
                        entry.sample_id,
                        audio.shape(),
                        visual.shape(),
                        s
                    )));
                }
            }
        }
        samples.push(Sample {
            id: entry.sample_id.clone(),
            class_id: entry.class_id,
            audio,
            visual,
        });
    }

    let split_file: SplitsFile = {
        let path = dir.join("splits.json");
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?
    };
    let index: BTreeMap<&str, usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let resolve = |ids: &[String], split: &str| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| {
                    Error::data(format!("split {split} references unknown sample {id}"))
                })
            })
            .collect()
    };
    let splits = DatasetSplits {
        train: resolve(&split_file.train, "train")?,
        val_unseen: resolve(&split_file.val_unseen, "val_unseen")?,
        test_seen: resolve(&split_file.test_seen, "test_seen")?,
        test_unseen: resolve(&split_file.test_unseen, "test_unseen")?,
    };
    let ds = Dataset {
        classes,
        samples,
        splits,
    };
    ds.validate_splits()?;
    Ok(ds)
}

// ── Brute-force baselines ────────────────────────────────────────────
//
// Two deliberately simple classifiers that certify the confound: the
// background statistic cannot separate group-mates, the motion statistic
// can.

/// Time-mean of the visual sequence (background-dominated statistic).
pub fn background_descriptor(sample: &Sample) -> Vec<f64> {
    let shape = sample.visual.shape();
    let (t_len, d) = (shape[0], shape[1]);
    let mut out = vec![0.0; d];
    for t in 0..t_len {
        for k in 0..d {
            out[k] += sample.visual.data()[t * d + k];
        }
    }
    for v in out.iter_mut() {
        *v /= t_len as f64;
    }
    out
}

/// Per-dimension mean absolute frame difference (motion statistic).
pub fn motion_descriptor(sample: &Sample) -> Vec<f64> {
    let shape = sample.visual.shape();
    let (t_len, d) = (shape[0], shape[1]);
    let mut out = vec![0.0; d];
    for t in 1..t_len {
        for k in 0..d {
            out[k] += (sample.visual.data()[t * d + k] - sample.visual.data()[(t - 1) * d + k]).abs();
        }
    }
    for v in out.iter_mut() {
        *v /= (t_len - 1) as f64;
    }
    out
}

/// Nearest-centroid accuracy of a descriptor over the given candidates.
pub fn nearest_centroid_accuracy(
    dataset: &Dataset,
    train_idx: &[usize],
    eval_idx: &[usize],
    candidates: &[usize],
    descriptor: impl Fn(&Sample) -> Vec<f64>,
) -> f64 {
    let mut centroids: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for i in train_idx {
        let s = &dataset.samples[*i];
        if !candidates.contains(&s.class_id) {
            continue;
        }
        let desc = descriptor(s);
        let entry = centroids
            .entry(s.class_id)
            .or_insert_with(|| (vec![0.0; desc.len()], 0));
        for (a, b) in entry.0.iter_mut().zip(&desc) {
            *a += b;
        }
        entry.1 += 1;
    }
    for (_c, (v, n)) in centroids.iter_mut() {
        for x in v.iter_mut() {
            *x /= *n as f64;
        }
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in eval_idx {
        let s = &dataset.samples[*i];
        if !candidates.contains(&s.class_id) {
            continue;
        }
        let desc = descriptor(s);
        let mut best = None;
        for (c, (centroid, _)) in &centroids {
            let dist: f64 = desc
                .iter()
                .zip(centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.map_or(true, |(_, d)| dist < d) {
                best = Some((*c, dist));
            }
        }
        if let Some((c, _)) = best {
            if c == s.class_id {
                correct += 1;
            }
        }
        total += 1;
    }
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_seen_classes: 4,
            n_unseen_classes: 2,
            samples_per_class: 8,
            frames: 16,
            feature_dim: 16,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn split_sizes_match_spec_counts() {
        let spec = small_spec();
        let ds = synthetic_dataset(
            &spec,
            3,
            &SplitRatios {
                val_unseen_classes: 0,
                test_unseen_classes: 2,
                test_seen_fraction: 0.25,
            },
        )
        .unwrap();
        assert_eq!(ds.samples.len(), 6 * 8);
        assert_eq!(ds.splits.test_unseen.len(), 2 * 8);
        assert_eq!(ds.splits.train.len() + ds.splits.test_seen.len(), 4 * 8);
        assert_eq!(ds.splits.test_seen.len(), 4 * 2); // 25% of 8 per class
    }

    #[test]
    fn zero_noise_samples_differ_only_in_phase() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            audio_noise_sigma: 0.0,
            ..small_spec()
        };
        let ds = generate_synthetic(&spec, 1).unwrap();
        let a = &ds.samples[0];
        let b = &ds.samples[1];
        assert_eq!(a.class_id, b.class_id);
        // Per-dimension amplitude statistics agree even though the raw
        // sequences differ (phase shift only).
        let da = motion_descriptor(a);
        let db = motion_descriptor(b);
        let diff: f64 = da.iter().zip(&db).map(|(x, y)| (x - y).abs()).sum::<f64>() / da.len() as f64;
        assert!(diff < 0.05, "phase-shifted sample stats should agree, diff {diff}");
        assert!(a.visual.data() != b.visual.data());
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = small_spec();
        let a = generate_synthetic(&spec, 9).unwrap();
        let b = generate_synthetic(&spec, 9).unwrap();
        assert_eq!(a.samples[5].visual.data(), b.samples[5].visual.data());
        assert_eq!(a.classes[3].word, b.classes[3].word);
    }

    #[test]
    fn splits_are_seed_deterministic_and_disjoint() {
        let spec = small_spec();
        let ds = generate_synthetic(&spec, 2).unwrap();
        let s1 = make_splits(&ds, 11, &SplitRatios::default()).unwrap();
        let s2 = make_splits(&ds, 11, &SplitRatios::default()).unwrap();
        assert_eq!(s1, s2);
        let ds2 = Dataset {
            splits: s1,
            ..ds
        };
        ds2.validate_splits().unwrap();
    }

    #[test]
    fn ucf_like_class_proportions() {
        // 48 classes total: 30 train, 12 val(U), 6 test(U).
        let spec = SyntheticSpec {
            n_seen_classes: 30,
            n_unseen_classes: 18,
            samples_per_class: 2,
            frames: 4,
            feature_dim: 4,
            group_size: 2,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, 5).unwrap();
        let splits = make_splits(
            &ds,
            5,
            &SplitRatios {
                val_unseen_classes: 12,
                test_unseen_classes: 6,
                test_seen_fraction: 0.0,
            },
        )
        .unwrap();
        let val_classes = ds.classes_of(&splits.val_unseen);
        let test_classes = ds.classes_of(&splits.test_unseen);
        assert_eq!(val_classes.len(), 12);
        assert_eq!(test_classes.len(), 6);
        assert_eq!(ds.seen_class_ids().len(), 30);
    }

    #[test]
    fn confounded_pair_background_blind_motion_sighted() {
        let ds = synthetic_dataset(&SyntheticSpec::default(), 17, &SplitRatios::default()).unwrap();
        // Classes 0 and 1 share a background group and differ in motion.
        let pair = vec![0usize, 1usize];
        let bg_acc = nearest_centroid_accuracy(
            &ds,
            &ds.splits.train,
            &ds.splits.test_seen,
            &pair,
            background_descriptor,
        );
        let motion_acc = nearest_centroid_accuracy(
            &ds,
            &ds.splits.train,
            &ds.splits.test_seen,
            &pair,
            motion_descriptor,
        );
        assert!(bg_acc < 60.0, "background classifier should be near chance, got {bg_acc}");
        assert!(motion_acc > 90.0, "motion classifier should separate, got {motion_acc}");
    }

    #[test]
    fn dataset_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let ds = synthetic_dataset(&spec, 23, &SplitRatios::default()).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_features(dir.path()).unwrap();
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.audio.data(), b.audio.data());
            assert_eq!(a.visual.data(), b.visual.data());
        }
        for (a, b) in ds.classes.iter().zip(&back.classes) {
            assert_eq!(a.word, b.word);
        }
        assert_eq!(back.splits, ds.splits);
    }

    #[test]
    fn load_reports_missing_file_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_dataset(&small_spec(), 23, &SplitRatios::default()).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        std::fs::remove_file(dir.path().join("tensors/s00_000_audio.spkt")).unwrap();
        let err = load_features(dir.path()).unwrap_err().to_string();
        assert!(err.contains("s00_000_audio.spkt"), "{err}");
    }

    #[test]
    fn empty_manifest_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.jsonl"), "").unwrap();
        std::fs::write(dir.path().join("classes.jsonl"), "").unwrap();
        assert!(load_features(dir.path()).is_err());
    }
}
