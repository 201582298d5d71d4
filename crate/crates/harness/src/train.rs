//! SGD training and mAP evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wmnet_core::autograd::Graph;
use wmnet_core::metrics::{coco_thresholds, compute_map, DetectionSet};
use wmnet_core::params::ParamStore;
use wmnet_core::tensor::Tensor;

use crate::checkpoint::{Checkpoint, EpochRecord};
use crate::config::ExperimentConfig;
use crate::data::{generate_split, Sample, Split};
use crate::error::{io_err, Error, Result};
use crate::head::{decode, detection_loss, encode_ground_truth, LossParts, Targets};
use crate::model::Detector;

/// A model with its parameters.
pub struct Trained {
    pub cfg: ExperimentConfig,
    pub store: ParamStore<f32>,
    pub model: Detector,
    pub history: Vec<EpochRecord>,
}

impl Trained {
    /// Freshly initialised from `cfg.seed`.
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = Detector::new(&mut store, cfg, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            model,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ExperimentConfig::parse_str(&ck.config, Path::new("."))?;
        let mut t = Self::init(&cfg)?;
        ck.load_into(&mut t.store)?;
        t.history = ck.history.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.cfg.to_kv(), self.history.clone(), &self.store)
    }

    /// Raw head map for one pair.
    pub fn head_map(&self, s: &Sample) -> Result<Tensor<f32>> {
        let g = Graph::with_params(&self.store);
        let out = self.model.forward(&g, g.constant(s.rgb.clone()), g.constant(s.ir.clone()))?;
        Ok((*g.value(out)).clone())
    }

    pub fn predict(&self, s: &Sample) -> Result<DetectionSet> {
        decode(&self.head_map(s)?, self.cfg.data.canvas)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Learning rate after `step` of `total` steps (cosine decay to zero).
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Trains in place for `cfg.epochs` epochs; `on_epoch` sees each record.
pub fn fit(t: &mut Trained, train: &[Sample], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let cfg = t.cfg.clone();
    let targets: Vec<Targets> = train
        .iter()
        .map(|s| Targets::build(&s.gt, cfg.data.canvas))
        .collect::<Result<_>>()?;
    let mut velocity: Vec<Tensor<f32>> = t.store.values().map(|v| Tensor::zeros(v.shape())).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(cfg.lr, step, total);
            let mut grads: Vec<Tensor<f32>> = t.store.values().map(|v| Tensor::zeros(v.shape())).collect();
            let inv = 1.0 / batch.len() as f32;
            let mut parts_per_sample = Vec::with_capacity(batch.len());
            for &i in batch {
                let g = Graph::with_params(&t.store);
                let out = t.model.forward(&g, g.constant(train[i].rgb.clone()), g.constant(train[i].ir.clone()))?;
                let (loss, parts) = detection_loss(&g, out, &targets[i])?;
                parts_per_sample.push((i, parts));
                if !parts.total().is_finite() {
                    return Err(divergence(t, train, &parts_per_sample, epoch, "non-finite loss"));
                }
                for (acc, pg) in grads.iter_mut().zip(g.backward(loss)?.into_param_grads()) {
                    if let Some(pg) = pg {
                        for (a, &v) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += v * inv;
                        }
                    }
                }
                sum.heat += parts.heat;
                sum.size += parts.size;
                sum.offset += parts.offset;
            }
            let norm: f64 = grads.iter().map(|g| g.sum_sq() as f64).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(divergence(t, train, &parts_per_sample, epoch, "non-finite gradient"));
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                (cfg.grad_clip / norm) as f32
            } else {
                1.0
            };
            let (lr32, mom, wd) = (lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
            let ids: Vec<_> = t.store.ids().collect();
            for ((id, gr), vel) in ids.into_iter().zip(&grads).zip(&mut velocity) {
                let p = t.store.get_mut(id);
                for ((w, &gv), v) in p.data_mut().iter_mut().zip(gr.data()).zip(vel.data_mut()) {
                    *v = mom * *v + gv * clip + wd * *w;
                    *w -= lr32 * *v;
                }
            }
            step += 1;
        }
        let n = train.len() as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            loss: sum.total() / n,
            heat_loss: sum.heat / n,
            size_loss: sum.size / n,
            offset_loss: sum.offset / n,
        };
        log::info!("epoch {epoch}: loss {:.4} (lr {:.5})", rec.loss, rec.lr);
        on_epoch(&rec);
        t.history.push(rec);
    }
    Ok(())
}

/// Writes a diagnostic dump of the offending batch next to the run outputs.
fn divergence(t: &Trained, train: &[Sample], parts: &[(usize, LossParts)], epoch: usize, what: &str) -> Error {
    let dump = serde_json::json!({
        "reason": what,
        "epoch": epoch,
        "config_hash": t.cfg.hash(),
        "batch": parts.iter().map(|(i, p)| serde_json::json!({
            "sample": train[*i].id,
            "heat": p.heat, "size": p.size, "offset": p.offset,
            "rgb_max": train[*i].rgb.max_abs(), "ir_max": train[*i].ir.max_abs(),
            "boxes": train[*i].gt.items.len(),
        })).collect::<Vec<_>>(),
        "non_finite_params": t.store.iter()
            .filter(|p| p.value.check_finite().is_err())
            .map(|p| p.name.clone()).collect::<Vec<_>>(),
    });
    let path = t.cfg.out_dir.join("divergence_dump.json");
    let written = fs::create_dir_all(&t.cfg.out_dir)
        .and_then(|_| fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default()));
    let note = match written {
        Ok(()) => format!("dump written to {}", path.display()),
        Err(e) => format!("dump could not be written: {e}"),
    };
    Error::Diverged(format!("{what} at epoch {epoch}; {note}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub config_hash: String,
    pub images: usize,
    #[serde(rename = "mAP@0.5")]
    pub map50: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub ap50: Vec<Option<f64>>,
    pub ap: Vec<Option<f64>>,
}

/// How predictions are produced during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionSource {
    Model,
    /// Ground truth encoded into a head map and decoded again.
    ForcedGroundTruth,
}

pub fn evaluate_samples(t: &Trained, samples: &[Sample], split: &str, source: PredictionSource) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config(format!("split {split:?} has no images")));
    }
    let preds = samples
        .iter()
        .map(|s| match source {
            PredictionSource::Model => t.predict(s),
            PredictionSource::ForcedGroundTruth => {
                decode(&encode_ground_truth(&s.gt, t.cfg.data.canvas)?, t.cfg.data.canvas)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<DetectionSet> = samples.iter().map(|s| s.gt.clone()).collect();
    let r = compute_map(&preds, &gts, &coco_thresholds())?;
    Ok(EvalReport {
        split: split.to_string(),
        config_hash: t.cfg.hash(),
        images: samples.len(),
        map50: r.map50,
        map: r.map,
        ap50: r.ap50,
        ap: r.ap,
    })
}

/// Evaluates on a regenerated split of the checkpoint's own dataset spec.
pub fn evaluate(ck: &Checkpoint, split: Split, source: PredictionSource) -> Result<EvalReport> {
    let t = Trained::from_checkpoint(ck)?;
    let samples = generate_split(&t.cfg.data, split)?;
    evaluate_samples(&t, &samples, split.name(), source)
}

pub fn append_jsonl<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line).map_err(io_err(path))
}

/// Full run: generate data, train, save `model.ckpt`, log per-epoch records
/// to `train.jsonl` and the final validation metrics to `metrics.jsonl`.
pub fn run_training(cfg: &ExperimentConfig) -> Result<(Checkpoint, EvalReport)> {
    let train = generate_split(&cfg.data, Split::Train)?;
    let val = generate_split(&cfg.data, Split::Val)?;
    let mut t = Trained::init(cfg)?;
    let log_path = cfg.out_dir.join("train.jsonl");
    let mut log_err = None;
    fit(&mut t, &train, |rec| {
        if let Err(e) = append_jsonl(&log_path, rec) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let ck = t.checkpoint();
    ck.save(&cfg.out_dir.join("model.ckpt"))?;
    let report = evaluate_samples(&t, &val, "val", PredictionSource::Model)?;
    append_jsonl(&cfg.out_dir.join("metrics.jsonl"), &report)?;
    Ok((ck, report))
}
