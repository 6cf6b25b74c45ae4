//! Downstream classifier experiments: train a small CNN on real/synthetic
//! mixtures, score macro-F1 and one-vs-rest macro AUC on the held-out split,
//! and aggregate seeded runs into report rows. The trained classifier doubles
//! as the feature extractor for the distribution metrics.

use std::collections::HashSet;
use std::path::Path;

use candle_core::Tensor;
use candle_nn::{Conv2d, Conv2dConfig, Linear, Module, Optimizer};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::seed_rng;
use crate::dataprep::{SplitItem, ToyClass};
use crate::error::{Error, Result};
use crate::evalsuite::FeatureExtractor;
use crate::nn::{batch_to_tensor, conv2d, linear, ParamStore};
use crate::sampler::image_hash;
use crate::schedule::Image;

pub const N_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    /// Epochs without validation improvement before the LR is reduced.
    pub patience: usize,
    /// Multiplicative LR reduction factor.
    pub factor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Conv block widths; blocks downsample by 2 until the map reaches 4x4.
    pub channels: Vec<usize>,
    pub resolution: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau: PlateauConfig,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
            resolution: 32,
            batch_size: 32,
            lr: 1e-3,
            plateau: PlateauConfig::default(),
            max_epochs: 40,
            early_stop_patience: 12,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("channels", "at least one block required"));
        }
        if self.plateau.patience == 0 {
            return Err(Error::config("plateau.patience", "must be > 0"));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return Err(Error::config("plateau.factor", "must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size/max_epochs", "must be positive"));
        }
        Ok(())
    }
}

struct ClfBlock {
    conv: Conv2d,
}

/// Small CNN: conv-SiLU blocks with stride-2 downsampling, global average
/// pooling into the feature vector, one linear head. No per-sample
/// normalization: global brightness and tint shifts must stay visible to the
/// features, since those are exactly the factors the experiments vary.
pub struct Classifier {
    store: ParamStore,
    blocks: Vec<ClfBlock>,
    head: Linear,
    cfg: ClassifierConfig,
}

impl Classifier {
    pub fn init(cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed_rng(seed, "classifier-init");
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut in_ch = 3usize;
        let mut res = cfg.resolution;
        for (i, &out_ch) in cfg.channels.iter().enumerate() {
            let stride = if res > 4 { 2 } else { 1 };
            let conv_cfg = Conv2dConfig {
                padding: 1,
                stride,
                ..Default::default()
            };
            blocks.push(ClfBlock {
                conv: conv2d(
                    &mut store,
                    &format!("clf.b{i}.conv"),
                    in_ch,
                    out_ch,
                    3,
                    conv_cfg,
                    false,
                    &mut rng,
                )?,
            });
            if stride == 2 {
                res /= 2;
            }
            in_ch = out_ch;
        }
        let head = linear(&mut store, "clf.head", in_ch, N_CLASSES, false, &mut rng)?;
        Ok(Self {
            store,
            blocks,
            head,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn feature_dim(&self) -> usize {
        *self.cfg.channels.last().expect("validated")
    }

    /// Penultimate representation: GAP over the last feature map, (B, d_feat).
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(Error::dimension(format!(
                "classifier expects {0}x{0}, got {h}x{w}",
                self.cfg.resolution
            )));
        }
        let mut hmap = x.clone();
        for b in &self.blocks {
            hmap = candle_nn::ops::silu(&b.conv.forward(&hmap)?)?;
        }
        let (_, _, fh, fw) = hmap.dims4()?;
        Ok((hmap.sum([2, 3])? / ((fh * fw) as f64))?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(&self.forward_features(x)?)?)
    }

    /// Class probabilities for a batch of images, row-major (n, 3).
    pub fn predict_proba(&self, images: &[Image]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), N_CLASSES));
        let mut start = 0usize;
        while start < images.len() {
            let end = (start + 128).min(images.len());
            let x = batch_to_tensor(&images[start..end], self.store.device())?;
            let probs = candle_nn::ops::softmax(&self.logits(&x)?, 1)?.to_vec2::<f32>()?;
            for (i, row) in probs.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out[[start + i, j]] = *v as f64;
                }
            }
            start = end;
        }
        Ok(out)
    }
}

impl FeatureExtractor for Classifier {
    fn features(&self, images: &[Image]) -> Result<Array2<f32>> {
        if images.is_empty() {
            return Err(Error::Degenerate("no images".to_string()));
        }
        let mut out = Array2::zeros((images.len(), self.feature_dim()));
        let mut start = 0usize;
        while start < images.len() {
            let end = (start + 128).min(images.len());
            let x = batch_to_tensor(&images[start..end], self.store.device())?;
            let feats = self.forward_features(&x)?.to_vec2::<f32>()?;
            for (i, row) in feats.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out[[start + i, j]] = *v;
                }
            }
            start = end;
        }
        Ok(out)
    }
}

/// Epoch-level training history (validation losses, LR reduction events).
#[derive(Debug, Clone, Default)]
pub struct FitHistory {
    pub val_losses: Vec<f64>,
    pub lr_events: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub final_lr: f64,
}

fn dataset_tensors(items: &[&SplitItem], device: &candle_core::Device) -> Result<(Tensor, Tensor)> {
    let images: Vec<Image> = items.iter().map(|i| i.image.clone()).collect();
    let labels: Vec<u32> = items.iter().map(|i| i.class_label.index() as u32).collect();
    let x = batch_to_tensor(&images, device)?;
    let y = Tensor::from_vec(labels, items.len(), device)?;
    Ok((x, y))
}

fn mean_ce_loss(clf: &Classifier, items: &[&SplitItem]) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in items.chunks(128) {
        let (x, y) = dataset_tensors(chunk, clf.store.device())?;
        let logits = clf.logits(&x)?;
        let loss = candle_nn::loss::cross_entropy(&logits, &y)?.to_scalar::<f32>()? as f64;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Train with Adam at `cfg.lr`, halving on validation plateaus and stopping
/// early after `early_stop_patience` stale epochs; the best-validation
/// parameters are restored before returning.
pub fn train_classifier(
    train: &[SplitItem],
    val: &[SplitItem],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(Classifier, FitHistory)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("splits", "train and val must be nonempty"));
    }
    let present: HashSet<usize> = train.iter().map(|i| i.class_label.index()).collect();
    if present.len() != N_CLASSES {
        return Err(Error::config(
            "train",
            format!("all {N_CLASSES} classes required, found {}", present.len()),
        ));
    }
    assert_disjoint(&[("train", train), ("val", val)])?;

    let clf = Classifier::init(cfg, seed)?;
    let mut rng = seed_rng(seed, "classifier-train");
    let params = candle_nn::ParamsAdamW {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = candle_nn::AdamW::new(clf.store.vars(), params)?;

    let val_refs: Vec<&SplitItem> = val.iter().collect();
    let mut history = FitHistory {
        final_lr: cfg.lr,
        ..Default::default()
    };
    let mut best_loss = f64::INFINITY;
    let mut best_snapshot = clf.store.snapshot()?;
    let mut stale = 0usize;
    let mut lr = cfg.lr;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch_idx in order.chunks(cfg.batch_size) {
            let items: Vec<&SplitItem> = batch_idx.iter().map(|&i| &train[i]).collect();
            let (x, y) = dataset_tensors(&items, clf.store.device())?;
            let loss = candle_nn::loss::cross_entropy(&clf.logits(&x)?, &y)?;
            let grads = loss.backward()?;
            opt.step(&grads)?;
        }
        let val_loss = mean_ce_loss(&clf, &val_refs)?;
        if !val_loss.is_finite() {
            return Err(Error::numeric("validation loss is not finite"));
        }
        history.val_losses.push(val_loss);
        if val_loss < best_loss {
            best_loss = val_loss;
            best_snapshot = clf.store.snapshot()?;
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale % cfg.plateau.patience == 0 {
                lr *= cfg.plateau.factor;
                opt.set_learning_rate(lr);
                history.lr_events.push((epoch, lr));
                history.final_lr = lr;
            }
            if stale >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    clf.store.restore(&best_snapshot)?;
    Ok((clf, history))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalMetrics {
    pub f1_macro: f64,
    pub auc_macro: f64,
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
}

/// Macro F1 from a confusion matrix with rows = truth, columns = prediction.
pub fn f1_macro_from_confusion(conf: &[[usize; N_CLASSES]; N_CLASSES]) -> f64 {
    let mut sum = 0.0f64;
    for c in 0..N_CLASSES {
        let tp = conf[c][c] as f64;
        let fp: f64 = (0..N_CLASSES).filter(|&r| r != c).map(|r| conf[r][c] as f64).sum();
        let fn_: f64 = (0..N_CLASSES).filter(|&p| p != c).map(|p| conf[c][p] as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        sum += f1;
    }
    sum / N_CLASSES as f64
}

/// Binary AUC by the rank statistic (average ranks over ties).
pub fn auc_binary(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::dimension("scores/labels length mismatch".to_string()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(
            "AUC undefined without both classes".to_string(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // average rank for the tie group, ranks are 1-based
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if positives[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Macro-averaged F1 and one-vs-rest macro AUC on a labeled split.
pub fn evaluate(clf: &Classifier, test: &[SplitItem]) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::config("test", "must be nonempty"));
    }
    let distinct: HashSet<usize> = test.iter().map(|i| i.class_label.index()).collect();
    if distinct.len() < 2 {
        return Err(Error::Degenerate(
            "AUC undefined on a single-class test set".to_string(),
        ));
    }
    let images: Vec<Image> = test.iter().map(|i| i.image.clone()).collect();
    let probs = clf.predict_proba(&images)?;
    let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
    for (i, item) in test.iter().enumerate() {
        let mut argmax = 0usize;
        for j in 1..N_CLASSES {
            if probs[[i, j]] > probs[[i, argmax]] {
                argmax = j;
            }
        }
        confusion[item.class_label.index()][argmax] += 1;
    }
    let f1_macro = f1_macro_from_confusion(&confusion);

    let mut auc_sum = 0.0f64;
    let mut auc_count = 0usize;
    for c in 0..N_CLASSES {
        let positives: Vec<bool> = test.iter().map(|i| i.class_label.index() == c).collect();
        if positives.iter().all(|&p| !p) {
            continue; // class absent from test; skip in macro average
        }
        let scores: Vec<f64> = (0..test.len()).map(|i| probs[[i, c]]).collect();
        auc_sum += auc_binary(&scores, &positives)?;
        auc_count += 1;
    }
    Ok(EvalMetrics {
        f1_macro,
        auc_macro: auc_sum / auc_count as f64,
        confusion,
    })
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// Synthetic image pool for one model variant, images grouped per class.
#[derive(Debug, Clone)]
pub struct SynthPool {
    pub variant: String,
    pub sigma: f64,
    /// Indexed by `ToyClass::index()`.
    pub per_class: [Vec<Image>; N_CLASSES],
}

impl SynthPool {
    pub fn new(variant: impl Into<String>, sigma: f64) -> Self {
        Self {
            variant: variant.into(),
            sigma,
            per_class: [Vec::new(), Vec::new(), Vec::new()],
        }
    }

    pub fn push(&mut self, class: ToyClass, image: Image) {
        self.per_class[class.index()].push(image);
    }

    pub fn min_class_size(&self) -> usize {
        self.per_class.iter().map(Vec::len).min().unwrap_or(0)
    }
}

/// One scored run of one experiment cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub variant: String,
    pub sigma: f64,
    /// Replacement percentage (mixed) or scale percentage (scaling).
    pub ratio_or_scale: u32,
    pub run_seed: u64,
    pub f1_macro: f64,
    pub auc_macro: f64,
    /// Row-major truth x prediction counts, serialized as `a|b|...`.
    pub confusion: String,
}

pub fn confusion_to_string(conf: &[[usize; N_CLASSES]; N_CLASSES]) -> String {
    conf.iter()
        .map(|row| {
            row.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("|")
        })
        .collect::<Vec<_>>()
        .join(";")
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

/// Mean and sample standard deviation of one report cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggRow {
    pub experiment: String,
    pub variant: String,
    pub sigma: f64,
    pub ratio_or_scale: u32,
    pub n_runs: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn merge(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
    }

    /// Collapse runs into per-cell mean and standard deviation.
    pub fn aggregate(&self) -> Vec<AggRow> {
        let mut keys: Vec<(String, String, String, u32)> = Vec::new();
        for r in &self.rows {
            let key = (
                r.experiment.clone(),
                r.variant.clone(),
                format!("{}", r.sigma),
                r.ratio_or_scale,
            );
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.iter()
            .map(|(exp, variant, sigma, ratio)| {
                let cell: Vec<&ReportRow> = self
                    .rows
                    .iter()
                    .filter(|r| {
                        &r.experiment == exp
                            && &r.variant == variant
                            && format!("{}", r.sigma) == *sigma
                            && r.ratio_or_scale == *ratio
                    })
                    .collect();
                let f1: Vec<f64> = cell.iter().map(|r| r.f1_macro).collect();
                let auc: Vec<f64> = cell.iter().map(|r| r.auc_macro).collect();
                let (f1_mean, f1_std) = mean_std(&f1);
                let (auc_mean, auc_std) = mean_std(&auc);
                AggRow {
                    experiment: exp.clone(),
                    variant: variant.clone(),
                    sigma: sigma.parse().unwrap_or(0.0),
                    ratio_or_scale: *ratio,
                    n_runs: cell.len(),
                    f1_mean,
                    f1_std,
                    auc_mean,
                    auc_std,
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "experiment",
            "variant",
            "sigma",
            "ratio_or_scale",
            "run_seed",
            "f1_macro",
            "auc_macro",
            "confusion",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.experiment.clone(),
                r.variant.clone(),
                format!("{}", r.sigma),
                r.ratio_or_scale.to_string(),
                r.run_seed.to_string(),
                format!("{:.9}", r.f1_macro),
                format!("{:.9}", r.auc_macro),
                r.confusion.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        let mut r = csv::Reader::from_path(path)?;
        for record in r.records() {
            let record = record?;
            rows.push(ReportRow {
                experiment: record[0].to_string(),
                variant: record[1].to_string(),
                sigma: record[2].parse().map_err(|_| {
                    Error::config("sigma", format!("bad value {}", &record[2]))
                })?,
                ratio_or_scale: record[3].parse().map_err(|_| {
                    Error::config("ratio_or_scale", format!("bad value {}", &record[3]))
                })?,
                run_seed: record[4].parse().map_err(|_| {
                    Error::config("run_seed", format!("bad value {}", &record[4]))
                })?,
                f1_macro: record[5].parse().map_err(|_| {
                    Error::config("f1_macro", format!("bad value {}", &record[5]))
                })?,
                auc_macro: record[6].parse().map_err(|_| {
                    Error::config("auc_macro", format!("bad value {}", &record[6]))
                })?,
                confusion: record[7].to_string(),
            });
        }
        Ok(Self { rows })
    }
}

/// No image may appear in more than one of the named splits (repeats within
/// a single split are allowed — synthetic pools can contain near-duplicates).
pub fn assert_disjoint(splits: &[(&str, &[SplitItem])]) -> Result<()> {
    let mut seen: HashSet<String> = HashSet::new();
    for (name, items) in splits {
        let own: HashSet<String> = items.iter().map(|i| image_hash(&i.image)).collect();
        for hash in own {
            if !seen.insert(hash) {
                return Err(Error::config(
                    "splits",
                    format!("an image of split {name} also appears in an earlier split"),
                ));
            }
        }
    }
    Ok(())
}

/// Seeded class-balanced selection: a shuffled index order per (run, class),
/// consumed by prefix so larger requests are supersets of smaller ones.
pub fn seeded_prefix(pool_len: usize, take: usize, seed: u64, tag: &str) -> Result<Vec<usize>> {
    if take > pool_len {
        return Err(Error::config(
            "pool",
            format!("requested {take} items from a pool of {pool_len} ({tag})"),
        ));
    }
    let mut rng = seed_rng(seed, tag);
    let mut order: Vec<usize> = (0..pool_len).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.truncate(take);
    Ok(order)
}

/// Shared fixtures for one experiment family.
pub struct ExperimentContext<'a> {
    pub val: &'a [SplitItem],
    pub test: &'a [SplitItem],
    pub clf: &'a ClassifierConfig,
    pub n_runs: usize,
    pub seed: u64,
}

fn run_one(
    experiment: &str,
    variant: &str,
    sigma: f64,
    ratio_or_scale: u32,
    train: Vec<SplitItem>,
    ctx: &ExperimentContext<'_>,
    run_seed: u64,
) -> Result<ReportRow> {
    assert_disjoint(&[("train", &train), ("val", ctx.val), ("test", ctx.test)])?;
    let (clf, _) = train_classifier(&train, ctx.val, ctx.clf, run_seed)?;
    let metrics = evaluate(&clf, ctx.test)?;
    Ok(ReportRow {
        experiment: experiment.to_string(),
        variant: variant.to_string(),
        sigma,
        ratio_or_scale,
        run_seed,
        f1_macro: metrics.f1_macro,
        auc_macro: metrics.auc_macro,
        confusion: confusion_to_string(&metrics.confusion),
    })
}

fn real_by_class(real_train: &[SplitItem]) -> [Vec<&SplitItem>; N_CLASSES] {
    let mut out: [Vec<&SplitItem>; N_CLASSES] = [Vec::new(), Vec::new(), Vec::new()];
    for item in real_train {
        out[item.class_label.index()].push(item);
    }
    out
}

/// Replace `ratio`% of the real training images per class with synthetic
/// ones; validation stays real. `plus_real` appends the row that adds the
/// full real set to 100% synthetic.
pub fn mixed_experiment(
    real_train: &[SplitItem],
    pool: &SynthPool,
    ratios: &[u32],
    plus_real: bool,
    ctx: &ExperimentContext<'_>,
) -> Result<ExperimentReport> {
    let by_class = real_by_class(real_train);
    let mut report = ExperimentReport::default();
    for run in 0..ctx.n_runs {
        let run_seed = crate::config::derive_seed(
            ctx.seed,
            &format!("mixed/{}/run{run}", pool.variant),
        );
        for &ratio in ratios {
            if ratio > 100 {
                return Err(Error::config("ratio", format!("{ratio}% > 100%")));
            }
            let mut train = Vec::new();
            for class in ToyClass::all() {
                let real = &by_class[class.index()];
                let n = real.len();
                let n_synth = n * ratio as usize / 100;
                let n_real = n - n_synth;
                let keep = seeded_prefix(
                    n,
                    n_real,
                    run_seed,
                    &format!("mixed/real/{}", class.index()),
                )?;
                for &i in &keep {
                    train.push(real[i].clone());
                }
                let synth_pool = &pool.per_class[class.index()];
                let take = seeded_prefix(
                    synth_pool.len(),
                    n_synth,
                    run_seed,
                    &format!("mixed/synth/{}", class.index()),
                )?;
                for &i in &take {
                    train.push(SplitItem {
                        image: synth_pool[i].clone(),
                        class_label: class,
                    });
                }
            }
            report.rows.push(run_one(
                "mixed",
                &pool.variant,
                pool.sigma,
                ratio,
                train,
                ctx,
                run_seed,
            )?);
        }
        if plus_real {
            let mut train: Vec<SplitItem> = real_train.to_vec();
            for class in ToyClass::all() {
                let n = by_class[class.index()].len();
                let synth_pool = &pool.per_class[class.index()];
                let take = seeded_prefix(
                    synth_pool.len(),
                    n,
                    run_seed,
                    &format!("mixed/synth/{}", class.index()),
                )?;
                for &i in &take {
                    train.push(SplitItem {
                        image: synth_pool[i].clone(),
                        class_label: class,
                    });
                }
            }
            report.rows.push(run_one(
                "mixed_plus_real",
                &pool.variant,
                pool.sigma,
                100,
                train,
                ctx,
                run_seed,
            )?);
        }
    }
    Ok(report)
}

/// Synthetic-only training at `scales`% of the real per-class size, prefix-
/// nested per run; `plus_real` appends the row that adds the real set to the
/// largest scale.
pub fn scaling_experiment(
    real_train: &[SplitItem],
    pool: &SynthPool,
    scales: &[u32],
    plus_real: bool,
    ctx: &ExperimentContext<'_>,
) -> Result<ExperimentReport> {
    let by_class = real_by_class(real_train);
    let mut report = ExperimentReport::default();
    for run in 0..ctx.n_runs {
        let run_seed = crate::config::derive_seed(
            ctx.seed,
            &format!("scaling/{}/run{run}", pool.variant),
        );
        let assemble = |scale: u32, with_real: bool| -> Result<Vec<SplitItem>> {
            let mut train: Vec<SplitItem> = if with_real {
                real_train.to_vec()
            } else {
                Vec::new()
            };
            for class in ToyClass::all() {
                let n = by_class[class.index()].len() * scale as usize / 100;
                let synth_pool = &pool.per_class[class.index()];
                let take = seeded_prefix(
                    synth_pool.len(),
                    n,
                    run_seed,
                    &format!("scaling/synth/{}", class.index()),
                )?;
                for &i in &take {
                    train.push(SplitItem {
                        image: synth_pool[i].clone(),
                        class_label: class,
                    });
                }
            }
            Ok(train)
        };
        for &scale in scales {
            report.rows.push(run_one(
                "scaling",
                &pool.variant,
                pool.sigma,
                scale,
                assemble(scale, false)?,
                ctx,
                run_seed,
            )?);
        }
        if plus_real {
            let top = scales.iter().copied().max().unwrap_or(100);
            report.rows.push(run_one(
                "scaling_plus_real",
                &pool.variant,
                pool.sigma,
                top,
                assemble(top, true)?,
                ctx,
                run_seed,
            )?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig {
            channels: vec![8, 8],
            resolution: 8,
            batch_size: 8,
            lr: 2e-3,
            plateau: PlateauConfig {
                patience: 2,
                factor: 0.5,
            },
            max_epochs: 12,
            early_stop_patience: 6,
        }
    }

    /// Linearly separable toy set: class k has channel k brightened.
    fn separable_split(n_per_class: usize, seed: u64, jitter: f32) -> Vec<SplitItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for class in ToyClass::all() {
            for _ in 0..n_per_class {
                let mut img = Image::from_shape_fn((3, 8, 8), |_| rng.gen_range(-jitter..jitter));
                for v in img.index_axis_mut(ndarray::Axis(0), class.index()).iter_mut() {
                    *v += 0.8;
                }
                out.push(SplitItem {
                    image: img,
                    class_label: class,
                });
            }
        }
        out
    }

    #[test]
    fn separable_data_reaches_full_accuracy() {
        let train = separable_split(8, 1, 0.3);
        let val = separable_split(3, 2, 0.3);
        let test = separable_split(4, 3, 0.3);
        let (clf, _) = train_classifier(&train, &val, &tiny_cfg(), 7).unwrap();
        let m = evaluate(&clf, &test).unwrap();
        assert_eq!(m.f1_macro, 1.0, "confusion: {:?}", m.confusion);
        assert_eq!(m.auc_macro, 1.0);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let train = separable_split(6, 1, 0.3);
        let val = separable_split(2, 2, 0.3);
        let run = || {
            let (clf, _) = train_classifier(&train, &val, &tiny_cfg(), 5).unwrap();
            evaluate(&clf, &separable_split(3, 9, 0.3)).unwrap().f1_macro
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plateau_halves_lr_then_stops_early() {
        // a learning rate too small to move f32 parameters: validation loss
        // can never improve after epoch 0, so the plateau scheduler and the
        // early stop both fire
        let train = separable_split(4, 1, 0.2);
        let val = separable_split(2, 8, 0.2);
        let cfg = ClassifierConfig {
            lr: 1e-12,
            plateau: PlateauConfig {
                patience: 2,
                factor: 0.5,
            },
            max_epochs: 20,
            early_stop_patience: 5,
            ..tiny_cfg()
        };
        let (_, history) = train_classifier(&train, &val, &cfg, 3).unwrap();
        let (_, lr) = history
            .lr_events
            .first()
            .unwrap_or_else(|| panic!("expected a plateau event, got {history:?}"));
        assert_relative_eq!(*lr, 0.5 * cfg.lr, max_relative = 1e-12);
        assert!(history.stopped_early, "{history:?}");
        assert!(history.val_losses.len() < cfg.max_epochs);
    }

    #[test]
    fn missing_class_rejected() {
        let mut train = separable_split(4, 1, 0.2);
        train.retain(|i| i.class_label != ToyClass::Class2);
        let val = separable_split(2, 2, 0.2);
        assert!(matches!(
            train_classifier(&train, &val, &tiny_cfg(), 1),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn f1_from_hand_confusion() {
        // [[5,0,0],[0,4,1],[0,2,3]]
        // class0: p=1, r=1, f1=1
        // class1: p=4/6, r=4/5, f1=2*(2/3)(4/5)/(2/3+4/5) = 8/11
        // class2: p=3/4, r=3/5, f1=2*(3/4)(3/5)/(3/4+3/5) = 2/3
        let conf = [[5, 0, 0], [0, 4, 1], [0, 2, 3]];
        let f1 = f1_macro_from_confusion(&conf);
        let expect = (1.0 + 8.0 / 11.0 + 2.0 / 3.0) / 3.0;
        assert_relative_eq!(f1, expect, epsilon = 1e-12);
    }

    #[test]
    fn auc_perfect_and_random() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_relative_eq!(auc_binary(&scores, &labels).unwrap(), 1.0, epsilon = 1e-12);

        // ties: all equal scores -> AUC 1/2
        let scores = [0.5, 0.5, 0.5, 0.5];
        assert_relative_eq!(auc_binary(&scores, &labels).unwrap(), 0.5, epsilon = 1e-12);

        // large uniform-random scores -> ~0.5
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 4000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let auc = auc_binary(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    }

    #[test]
    fn auc_single_class_is_error() {
        let scores = [0.5, 0.6];
        let labels = [true, true];
        assert!(matches!(
            auc_binary(&scores, &labels),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn seeded_prefix_is_nested_and_bounded() {
        let a = seeded_prefix(20, 5, 9, "x").unwrap();
        let b = seeded_prefix(20, 11, 9, "x").unwrap();
        assert_eq!(&b[..5], &a[..]);
        assert!(seeded_prefix(4, 5, 9, "x").is_err());
        // no duplicates
        let mut sorted = b.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), b.len());
    }

    fn synth_pool_from(split: &[SplitItem], variant: &str, sigma: f64) -> SynthPool {
        let mut pool = SynthPool::new(variant, sigma);
        for item in split {
            pool.push(item.class_label, item.image.clone());
        }
        pool
    }

    #[test]
    fn mixed_ratio_arithmetic_and_hygiene() {
        let real = separable_split(10, 1, 0.3);
        let val = separable_split(2, 2, 0.3);
        let test = separable_split(2, 3, 0.3);
        let pool = synth_pool_from(&separable_split(10, 40, 0.3), "toy", 0.5);
        let ctx = ExperimentContext {
            val: &val,
            test: &test,
            clf: &tiny_cfg(),
            n_runs: 1,
            seed: 99,
        };
        let report = mixed_experiment(&real, &pool, &[0, 50, 100], true, &ctx).unwrap();
        assert_eq!(report.rows.len(), 4);
        for row in &report.rows {
            assert!(row.f1_macro.is_finite());
        }
        let agg = report.aggregate();
        assert_eq!(agg.len(), 4);
        assert!(agg.iter().all(|a| a.n_runs == 1));
    }

    #[test]
    fn mixed_pool_exhaustion_is_config_error() {
        let real = separable_split(10, 1, 0.3);
        let val = separable_split(2, 2, 0.3);
        let test = separable_split(2, 3, 0.3);
        let pool = synth_pool_from(&separable_split(3, 40, 0.3), "toy", 0.5);
        let ctx = ExperimentContext {
            val: &val,
            test: &test,
            clf: &tiny_cfg(),
            n_runs: 1,
            seed: 99,
        };
        assert!(matches!(
            mixed_experiment(&real, &pool, &[100], false, &ctx),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn scaling_uses_prefix_nesting() {
        let real = separable_split(4, 1, 0.3);
        let val = separable_split(2, 2, 0.3);
        let test = separable_split(2, 3, 0.3);
        let pool = synth_pool_from(&separable_split(10, 40, 0.3), "toy", 0.0);
        let ctx = ExperimentContext {
            val: &val,
            test: &test,
            clf: &tiny_cfg(),
            n_runs: 2,
            seed: 5,
        };
        let report = scaling_experiment(&real, &pool, &[100, 200], true, &ctx).unwrap();
        // 2 runs x (2 scales + plus_real)
        assert_eq!(report.rows.len(), 6);
        let agg = report.aggregate();
        let cell = agg
            .iter()
            .find(|a| a.experiment == "scaling" && a.ratio_or_scale == 200)
            .unwrap();
        assert_eq!(cell.n_runs, 2);
        assert!(cell.f1_std >= 0.0);
    }

    #[test]
    fn report_csv_round_trip() {
        let report = ExperimentReport {
            rows: vec![ReportRow {
                experiment: "mixed".into(),
                variant: "sigma0.5".into(),
                sigma: 0.5,
                ratio_or_scale: 40,
                run_seed: 123,
                f1_macro: 0.875,
                auc_macro: 0.93,
                confusion: "1|0|0;0|1|0;0|0|1".into(),
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        report.write_csv(&path).unwrap();
        let loaded = ExperimentReport::read_csv(&path).unwrap();
        assert_eq!(loaded.rows.len(), 1);
        assert_eq!(loaded.rows[0].ratio_or_scale, 40);
        assert_relative_eq!(loaded.rows[0].f1_macro, 0.875, epsilon = 1e-12);
    }
}
