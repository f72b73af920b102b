//! Training loop: batching, objective, NaN guard, clipping, AdamW,
//! projection, stability monitoring, metrics and evaluation.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tide_autograd::{truncate_bptt, Tape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::data::{corrupt, epoch_permutation, normalize, Corruption, Dataset};
use crate::error::{Result, TideError};
use crate::model::{argmax_rows, certainties, ForwardOptions, Tide};
use crate::optim::{clip_global_norm, lr_schedule, AdamW};
use crate::params::Fwd;
use crate::spectral::SpectralReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_ei: f64,
    pub loss_game: f64,
    pub loss_sync: f64,
    pub loss_spec: f64,
    pub rho_ei: f64,
    pub lr: f64,
    /// Cumulative number of skipped updates.
    pub skipped: u64,
    /// Training-batch accuracy.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spectral: Option<SpectralReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
}

/// Returns a report every `interval` steps, never at step 0.
pub fn stability_monitor(model: &Tide, step: u64, interval: u64) -> Result<Option<SpectralReport>> {
    if interval == 0 || step == 0 || step % interval != 0 {
        return Ok(None);
    }
    SpectralReport::compute(&model.dale_weights(), model.euler().alpha_i(), step).map(Some)
}

/// Per-step dropout seed.
pub fn dropout_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

pub struct Trainer {
    pub model: Tide,
    pub opt: AdamW,
    pub step: u64,
    pub skipped: u64,
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub history: Vec<MetricsRecord>,
    inject: BTreeSet<u64>,
    metrics: Option<BufWriter<File>>,
    perm_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: Tide, train: Dataset, test: Option<Dataset>) -> Result<Self> {
        if train.is_empty() {
            return Err(TideError::Data("empty training set".into()));
        }
        if train.shape != model.cfg.model.input_shape {
            return Err(TideError::Data(format!(
                "data shape {:?} vs model input {:?}",
                train.shape, model.cfg.model.input_shape
            )));
        }
        let opt = AdamW::new(&model.params, model.cfg.train.weight_decay);
        Ok(Self {
            model,
            opt,
            step: 0,
            skipped: 0,
            train,
            test,
            history: Vec::new(),
            inject: BTreeSet::new(),
            metrics: None,
            perm_cache: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, train: Dataset, test: Option<Dataset>) -> Result<Self> {
        let (model, opt) = ck.restore()?;
        let mut t = Self::new(model, train, test)?;
        t.opt = opt;
        t.step = ck.step;
        t.skipped = ck.skipped;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.opt, self.step, self.skipped)
    }

    /// Poison the final logits at the given step.
    pub fn inject_nan_at(&mut self, step: u64) {
        self.inject.insert(step);
    }

    /// Stream metrics to a JSONL file; the first line is a header carrying
    /// the config hash.
    pub fn open_metrics(&mut self, path: &Path, append: bool) -> Result<()> {
        let f = std::fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
        let mut w = BufWriter::new(f);
        if !append {
            let header = serde_json::json!({ "config_hash": self.model.cfg.hash(), "kind": "header" });
            writeln!(w, "{header}")?;
        }
        self.metrics = Some(w);
        Ok(())
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.train.len();
        let b = self.model.cfg.train.batch;
        let seed = self.model.cfg.train.seed;
        let start = (step - 1) * b as u64;
        (0..b as u64)
            .map(|k| {
                let g = start + k;
                let (epoch, pos) = (g / n as u64, (g % n as u64) as usize);
                if self.perm_cache.as_ref().map(|c| c.0) != Some(epoch) {
                    self.perm_cache = Some((epoch, epoch_permutation(n, seed, epoch)));
                }
                self.perm_cache.as_ref().unwrap().1[pos]
            })
            .collect()
    }

    /// One optimizer step (or a guarded skip).
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        self.step += 1;
        let step = self.step;
        let cfg = self.model.cfg.clone();
        let idx = self.batch_indices(step);
        let (images, labels) = self.train.batch(&idx);
        let lr = lr_schedule(step, cfg.train.warmup, cfg.train.total_steps, cfg.train.lr);

        let tape = Tape::new();
        let vars = self.model.params.register(&tape);
        let (out, pending) = {
            let f = Fwd::new(&tape, &vars, &self.model.bufs, true, dropout_seed(cfg.train.seed, step));
            let opts = ForwardOptions { step, trace: None, poison_logits: self.inject.contains(&step) };
            let out = self.model.loss(&f, &images, &labels, &opts)?;
            (out, f.take_pending())
        };
        let mut rec = MetricsRecord {
            step,
            loss_total: out.terms.total,
            loss_task: out.terms.task,
            loss_ei: out.terms.ei,
            loss_game: out.terms.game,
            loss_sync: out.terms.sync,
            loss_spec: out.terms.spec,
            rho_ei: out.rho,
            lr,
            skipped: self.skipped,
            accuracy: Some(out.correct as f64 / labels.len() as f64),
            grad_norm: None,
            spectral: None,
            test_accuracy: None,
        };

        let mut ok = out.terms.total.is_finite();
        let mut grads = Vec::new();
        if ok {
            let tape = if cfg.train.tbptt > 0 { truncate_bptt(tape, cfg.train.tbptt) } else { tape };
            let mut g = tape.backward(out.loss);
            grads = vars.iter().map(|&v| g.take(v)).collect::<Vec<Option<Tensor>>>();
            ok = grads.iter().flatten().all(|t| t.all_finite());
        }
        if ok {
            rec.grad_norm = Some(clip_global_norm(&mut grads, cfg.train.clip));
            self.opt.step(&mut self.model.params, &grads, lr);
            self.model.params.apply_constraints();
            self.model.bufs.commit(pending);
        } else {
            self.skipped += 1;
            rec.skipped = self.skipped;
        }
        rec.spectral = stability_monitor(&self.model, step, cfg.train.monitor_interval)?;
        self.log(&rec)?;
        self.history.push(rec.clone());
        Ok(rec)
    }

    pub fn log(&mut self, rec: &MetricsRecord) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            writeln!(w, "{}", serde_json::to_string(rec).map_err(|e| TideError::Data(e.to_string()))?)?;
            w.flush()?;
        }
        Ok(())
    }

    /// Run until `until` steps have been taken, calling `each` after every
    /// step.
    pub fn run_until(&mut self, until: u64, mut each: impl FnMut(&Trainer, &MetricsRecord)) -> Result<()> {
        while self.step < until {
            let rec = self.train_step()?;
            each(self, &rec);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub accuracy: f64,
    pub mean_certainty: f64,
    pub mean_certainty_correct: f64,
    pub mean_certainty_incorrect: f64,
    /// Mean certainty per internal step.
    pub certainty_curve: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    pub corruption: String,
    pub severity: usize,
    pub summary: EvalSummary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub clean: EvalSummary,
    pub corruptions: Vec<CorruptionResult>,
}

/// Evaluate on an already model-ready dataset (eval mode, no buffer writes).
pub fn evaluate(model: &Tide, ds: &Dataset, batch: usize) -> Result<EvalSummary> {
    let ticks = model.cfg.model.ticks;
    let mut correct = 0usize;
    let mut curve = vec![0.0; ticks];
    let (mut c_ok, mut n_ok, mut c_bad, mut n_bad) = (0.0, 0usize, 0.0, 0usize);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = ds.batch(chunk);
        let tape = Tape::new();
        let vars = model.params.register(&tape);
        let f = Fwd::new(&tape, &vars, &model.bufs, false, 0);
        let ro = model.rollout(&f, &images, None)?;
        let cert = certainties(&tape, &ro.logits);
        let preds = argmax_rows(&tape.value(*ro.logits.last().unwrap()));
        for (k, row) in cert.iter().enumerate() {
            curve[k] += row.iter().sum::<f64>();
        }
        for (s, (p, y)) in preds.iter().zip(&labels).enumerate() {
            let c = cert[ticks - 1][s];
            if p == y {
                correct += 1;
                c_ok += c;
                n_ok += 1;
            } else {
                c_bad += c;
                n_bad += 1;
            }
        }
    }
    let n = ds.len().max(1) as f64;
    Ok(EvalSummary {
        n: ds.len(),
        accuracy: correct as f64 / n,
        mean_certainty: (c_ok + c_bad) / n,
        mean_certainty_correct: if n_ok > 0 { c_ok / n_ok as f64 } else { 0.0 },
        mean_certainty_incorrect: if n_bad > 0 { c_bad / n_bad as f64 } else { 0.0 },
        certainty_curve: curve.iter().map(|c| c / n).collect(),
    })
}

/// Clean and corrupted evaluation from a pixel-space dataset.
/// `normalise` is `(mean, std)` for the model input.
pub fn evaluate_with_corruptions(
    model: &Tide,
    raw: &Dataset,
    normalise: Option<(f64, f64)>,
    corruptions: &[Corruption],
    batch: usize,
    seed: u64,
) -> Result<EvalReport> {
    let prep = |d: &Dataset| match normalise {
        Some((m, s)) => normalize(d, m, s),
        None => d.clone(),
    };
    let clean = evaluate(model, &prep(raw), batch)?;
    let mut out = Vec::new();
    for c in corruptions {
        let mut failed = None;
        let cd = raw.map_images(|i, img| match corrupt(img, raw.shape, *c, seed.wrapping_add(i as u64)) {
            Ok(v) => v,
            Err(e) => {
                failed = Some(e);
                img.to_vec()
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        out.push(CorruptionResult {
            corruption: c.kind.name().to_string(),
            severity: c.severity,
            summary: evaluate(model, &prep(&cd), batch)?,
        });
    }
    Ok(EvalReport { config_hash: model.cfg.hash(), clean, corruptions: out })
}
