//! The full recurrent model: backbone, synchronisation latent, attention
//! drive, Dale-constrained Euler dynamics with NLM corrections, lateral
//! inhibition, memory and output head, plus the objective on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tide_autograd::{Tensor, Var};

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::dale::{dale_uniform, DaleWeightSet};
use crate::dynamics::{euler_tape, preactivations_tape, rho_ei_tape, EulerConfig};
use crate::error::{dim_err, Result, TideError};
use crate::memory::{MemStep, Memory};
use crate::nlm::{fifo_push, NlmBank};
use crate::objective::{
    curriculum, ei_loss_tape, game_energy_tape, game_residual_tape, spec_loss, spec_loss_tape, sync_loss_tape,
    task_loss_tape, GameVariant, LossTerms,
};
use crate::params::{BufferId, BufferStore, Constraint, Fwd, LayerNorm, ParamId, ParamStore};
use crate::readout::{certainty, CrossAttention, OutputHead};
use crate::spectral::{perron_sum_ratio, perron_sum_ratio_tape};
use crate::sync::{assemble_latent, sample_pairs, SyncStream, SYNC_LN_EPS};
use crate::wta::Wta;

pub const PERRON_ITERS: usize = 10;

#[derive(Clone, Debug)]
pub struct Recurrent {
    pub w_ee: ParamId,
    pub w_ei: ParamId,
    pub w_ie: ParamId,
    pub w_ii: ParamId,
    pub w_e_in: ParamId,
    pub w_i_in: ParamId,
    pub gain_e: ParamId,
    pub gain_i: ParamId,
    pub r0_e: ParamId,
    pub r0_i: ParamId,
}

/// Discrete choices made during a forward pass. Feeding a trace back in
/// replays them, which makes the loss a smooth function of the parameters
/// around the recorded point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub wta: Vec<Vec<usize>>,
    pub memory: Vec<MemStep>,
    pub selections: Vec<(usize, usize)>,
}

/// Everything the T internal steps produce.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub logits: Vec<Var>,
    pub z: Var,
    pub r_e: Var,
    pub r_e_pre: Var,
    pub r_i: Var,
    /// ReLU inputs of the last Euler update.
    pub act_in_e: Var,
    pub act_in_i: Var,
    /// Drive terms `W_in a` at the last step.
    pub u_e: Var,
    pub u_i: Var,
    pub trace: Trace,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub step: u64,
    pub trace: Option<&'a Trace>,
    /// Replace one final logit by NaN (fault injection).
    pub poison_logits: bool,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub terms: LossTerms,
    /// Batch-mean E-I ratio at the last step.
    pub rho: f64,
    pub predictions: Vec<usize>,
    pub correct: usize,
    pub trace: Trace,
}

#[derive(Clone, Debug)]
pub struct Tide {
    pub cfg: RunConfig,
    pub params: ParamStore,
    pub bufs: BufferStore,
    pub n_e: usize,
    pub n_i: usize,
    pub backbone: Backbone,
    pub rec: Recurrent,
    pub nlm_e: NlmBank,
    pub nlm_i: NlmBank,
    pub sync: [SyncStream; 3],
    pub latent_ln: LayerNorm,
    pub attn: CrossAttention,
    pub wta: Wta,
    pub memory: Memory,
    pub head: OutputHead,
    pub mem_m: BufferId,
    pub mem_v: BufferId,
    pub pair_bufs: [(BufferId, BufferId); 3],
}

fn sym_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let hi = 1.0 / (cols.max(1) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| (rng.random::<f64>() * 2.0 - 1.0) * hi)
}

fn idx_tensor(v: &[usize]) -> Tensor {
    Tensor::new(&[v.len()], v.iter().map(|&i| i as f64).collect())
}

impl Tide {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut params = ParamStore::new();
        let mut bufs = BufferStore::default();
        let (n_e, n_i) = (cfg.n_e(), cfg.n_i());
        let d_sync = cfg.sync.d_sync();
        let m = &cfg.model;

        let backbone = Backbone::new(&mut params, &mut bufs, &cfg.backbone, m.input_shape, cfg.attention.d_attn, &mut rng)?;

        let nonneg = |p: &mut ParamStore, name: &str, t: Tensor| p.add(name, t, Constraint::NonNeg);
        let rec = Recurrent {
            w_ee: nonneg(&mut params, "rec.w_ee", dale_uniform(n_e, n_e, &mut rng)),
            w_ei: nonneg(&mut params, "rec.w_ei", dale_uniform(n_e, n_i, &mut rng)),
            w_ie: nonneg(&mut params, "rec.w_ie", dale_uniform(n_i, n_e, &mut rng)),
            w_ii: nonneg(&mut params, "rec.w_ii", dale_uniform(n_i, n_i, &mut rng)),
            w_e_in: params.add("rec.w_e_in", sym_uniform(n_e, d_sync, &mut rng), Constraint::None),
            w_i_in: params.add("rec.w_i_in", sym_uniform(n_i, d_sync, &mut rng), Constraint::None),
            gain_e: params.add("rec.gain_e", Tensor::full(&[n_e], 1.0), Constraint::None),
            gain_i: params.add("rec.gain_i", Tensor::full(&[n_i], 1.0), Constraint::None),
            r0_e: nonneg(&mut params, "rec.r0_e", Tensor::from_fn(&[n_e], |_| 0.1 * rng.random::<f64>())),
            r0_i: nonneg(&mut params, "rec.r0_i", Tensor::from_fn(&[n_i], |_| 0.1 * rng.random::<f64>())),
        };

        let (win, hid) = (cfg.nlm.window, cfg.nlm.hidden);
        let nlm_e = NlmBank::new(&mut params, "nlm_e", n_e, win, hid, m.tau_e, &mut rng);
        let nlm_i = NlmBank::new(&mut params, "nlm_i", n_i, win, hid, m.tau_i, &mut rng);

        let [pe, pei, pii] = cfg.sync.pairs();
        let s = cfg.train.seed;
        let pairs = [
            sample_pairs(n_e, n_e, pe, s.wrapping_add(0x5e11))?,
            sample_pairs(n_e, n_i, pei, s.wrapping_add(0x5e12))?,
            sample_pairs(n_i, n_i, pii, s.wrapping_add(0x5e13))?,
        ];
        let names = ["ee", "ei", "ii"];
        let widths = [cfg.sync.d_ee, cfg.sync.d_ei, cfg.sync.d_ii];
        let mut pair_bufs = Vec::new();
        let mut streams = Vec::new();
        for ((p, name), w) in pairs.into_iter().zip(names).zip(widths) {
            pair_bufs.push((
                bufs.add(&format!("sync.{name}.idx_a"), idx_tensor(&p.0)),
                bufs.add(&format!("sync.{name}.idx_b"), idx_tensor(&p.1)),
            ));
            streams.push(SyncStream::new(&mut params, &format!("sync.{name}"), p, w, cfg.sync.clamp, &mut rng));
        }
        let sync: [SyncStream; 3] = streams.try_into().expect("three streams");
        let pair_bufs: [(BufferId, BufferId); 3] = pair_bufs.try_into().expect("three streams");
        let latent_ln = LayerNorm::new(&mut params, "sync.latent_ln", d_sync, SYNC_LN_EPS);

        let a = &cfg.attention;
        let attn = CrossAttention::new(&mut params, "attn", d_sync, a.d_attn, a.heads, a.dropout, a.residual, &mut rng)?;
        let w = &cfg.wta;
        let wta = Wta::new(&mut params, "wta", n_e, w.n_lat.unwrap_or(n_i), w.gamma, w.k_max, w.tol, &mut rng);
        let mc = &cfg.memory;
        let memory = Memory::new(&mut params, "memory", mc.d_mem, d_sync, mc.theta, mc.mu, cfg.loss.rho_star, &mut rng);
        let head = OutputHead::new(&mut params, "head", d_sync + mc.d_mem, cfg.head.hidden, m.classes, cfg.head.dropout, &mut rng);
        let mem_m = bufs.add("memory.m", Tensor::zeros(&[mc.d_mem]));
        let mem_v = bufs.add("memory.v", Tensor::zeros(&[mc.d_mem]));

        Ok(Self {
            cfg: cfg.clone(),
            params,
            bufs,
            n_e,
            n_i,
            backbone,
            rec,
            nlm_e,
            nlm_i,
            sync,
            latent_ln,
            attn,
            wta,
            memory,
            head,
            mem_m,
            mem_v,
            pair_bufs,
        })
    }

    /// Re-read the sync pair indices from the buffer store (after loading
    /// a checkpoint).
    pub fn sync_pairs_from_buffers(&mut self) -> Result<()> {
        for (s, (a, b)) in self.sync.iter_mut().zip(self.pair_bufs) {
            let conv = |t: &Tensor| -> Result<Vec<usize>> {
                t.data()
                    .iter()
                    .map(|&x| {
                        if x >= 0.0 && x.fract() == 0.0 {
                            Ok(x as usize)
                        } else {
                            Err(TideError::Checkpoint(format!("bad pair index {x}")))
                        }
                    })
                    .collect()
            };
            s.idx_a = std::rc::Rc::new(conv(self.bufs.get(a))?);
            s.idx_b = std::rc::Rc::new(conv(self.bufs.get(b))?);
        }
        Ok(())
    }

    pub fn euler(&self) -> EulerConfig {
        EulerConfig { tau_e: self.cfg.model.tau_e, tau_i: self.cfg.model.tau_i, dt: self.cfg.model.dt }
    }

    pub fn dale_weights(&self) -> DaleWeightSet {
        let g = |id| self.params.get(id).clone();
        DaleWeightSet {
            w_ee: g(self.rec.w_ee),
            w_ei: g(self.rec.w_ei),
            w_ie: g(self.rec.w_ie),
            w_ii: g(self.rec.w_ii),
            w_e_in: g(self.rec.w_e_in),
            w_i_in: g(self.rec.w_i_in),
        }
    }

    /// Smallest entry over the four recurrent blocks.
    pub fn dale_min(&self) -> f64 {
        [self.rec.w_ee, self.rec.w_ei, self.rec.w_ie, self.rec.w_ii].iter().map(|&id| self.params.get(id).min()).fold(f64::INFINITY, f64::min)
    }

    /// The T internal steps on a batch `[B, C, H, W]`.
    pub fn rollout(&self, f: &Fwd, images: &Tensor, fixed: Option<&Trace>) -> Result<Rollout> {
        let t = f.t;
        let shape = images.shape();
        if shape.len() != 4 {
            return dim_err(format!("expected an image batch [B, C, H, W], got {shape:?}"));
        }
        let b = shape[0];
        let ticks = self.cfg.model.ticks;
        if let Some(tr) = fixed {
            if tr.wta.len() != ticks || tr.memory.len() != ticks {
                return dim_err("trace length does not match the number of internal steps");
            }
        }
        let x = t.constant(images.clone());
        let bb = self.backbone.forward(f, x)?;
        let kv = self.attn.prepare(f, bb.keys, bb.values)?;
        let eu = self.euler();
        let (ne, ni) = (self.n_e, self.n_i);

        let ones = t.constant(Tensor::full(&[b, 1], 1.0));
        let mut r_e = t.mul(ones, t.reshape(f.w(self.rec.r0_e), &[1, ne]));
        let mut r_i = t.mul(ones, t.reshape(f.w(self.rec.r0_i), &[1, ni]));
        let win = self.cfg.nlm.window;
        let mut fifo_e = t.constant(Tensor::zeros(&[b, ne, win]));
        let mut fifo_i = t.constant(Tensor::zeros(&[b, ni, win]));
        let mut accs: Vec<_> = self.sync.iter().map(|s| s.zero_acc(f, b)).collect();
        let mut mem = if self.cfg.memory.persistent {
            crate::memory::MemoryState { m: f.bufs.get(self.mem_m).data().to_vec(), v: f.bufs.get(self.mem_v).data().to_vec() }
        } else {
            crate::memory::MemoryState::zeros(self.cfg.memory.d_mem)
        };
        let w = [
            f.w(self.rec.w_ee),
            f.w(self.rec.w_ei),
            f.w(self.rec.w_ie),
            f.w(self.rec.w_ii),
            f.w(self.rec.w_e_in),
            f.w(self.rec.w_i_in),
        ];

        let mut trace = Trace::default();
        let mut logits = Vec::with_capacity(ticks);
        let mut last = None;
        for tick in 1..=ticks {
            r_e = t.step_edge(r_e, tick);
            r_i = t.step_edge(r_i, tick);
            fifo_e = t.step_edge(fifo_e, tick);
            fifo_i = t.step_edge(fifo_i, tick);
            for a in accs.iter_mut() {
                a.nu = t.step_edge(a.nu, tick);
                a.xi = t.step_edge(a.xi, tick);
            }

            let inputs = [(r_e, r_e), (r_e, r_i), (r_i, r_i)];
            let mut parts = Vec::with_capacity(3);
            for ((s, acc), (xa, xb)) in self.sync.iter().zip(accs.iter_mut()).zip(inputs) {
                let (zp, next) = s.update(f, *acc, xa, xb);
                *acc = next;
                parts.push(zp);
            }
            let widths = [self.cfg.sync.d_ee, self.cfg.sync.d_ei, self.cfg.sync.d_ii];
            let z = assemble_latent(f, [parts[0], parts[1], parts[2]], widths, &self.latent_ln)?;

            let a = self.attn.forward(f, z, kv)?;
            let (h_e, h_i, u_e, u_i) =
                preactivations_tape(t, r_e, r_i, a, w, f.w(self.rec.gain_e), f.w(self.rec.gain_i));
            let corr_e = self.nlm_e.forward(f, fifo_e)?;
            let corr_i = self.nlm_i.forward(f, fifo_i)?;
            let in_e = t.add(h_e, corr_e);
            let in_i = t.add(h_i, corr_i);
            let r_e_pre = euler_tape(t, r_e, in_e, eu.alpha_e());
            r_i = euler_tape(t, r_i, in_i, eu.alpha_i());
            let (r_e_post, counts) = self.wta.forward(f, r_e_pre, fixed.map(|tr| tr.wta[tick - 1].as_slice()));
            r_e = r_e_post;
            trace.wta.push(counts);
            fifo_e = fifo_push(f, fifo_e, r_e);
            fifo_i = fifo_push(f, fifo_i, r_i);

            let rho = t.value(rho_ei_tape(t, r_e_pre, r_i));
            let (read, step) = self.memory.step(f, &mut mem, z, rho.data(), fixed.map(|tr| &tr.memory[tick - 1]));
            trace.memory.push(step);
            logits.push(self.head.forward(f, z, read));
            last = Some((z, r_e_pre, in_e, in_i, u_e, u_i));
        }
        if self.cfg.memory.persistent {
            f.stage(self.mem_m, Tensor::new(&[mem.m.len()], mem.m));
            f.stage(self.mem_v, Tensor::new(&[mem.v.len()], mem.v));
        }
        let (z, r_e_pre, act_in_e, act_in_i, u_e, u_i) = last.expect("at least one tick");
        Ok(Rollout { logits, z, r_e, r_e_pre, r_i, act_in_e, act_in_i, u_e, u_i, trace })
    }

    /// Full objective on a labelled batch.
    pub fn loss(&self, f: &Fwd, images: &Tensor, labels: &[usize], opts: &ForwardOptions) -> Result<LossOutput> {
        let t = f.t;
        if labels.len() != images.shape()[0] {
            return dim_err(format!("{} labels for a batch of {}", labels.len(), images.shape()[0]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.cfg.model.classes) {
            return Err(TideError::Data(format!("label {bad} out of range")));
        }
        let mut ro = self.rollout(f, images, opts.trace)?;
        if opts.poison_logits {
            let last = ro.logits.len() - 1;
            let c = self.cfg.model.classes;
            let poison = Tensor::from_fn(&[labels.len(), c], |i| if i == 0 { f64::NAN } else { 0.0 });
            ro.logits[last] = t.add(ro.logits[last], t.constant(poison));
        }
        let lw = self.cfg.loss.weights();
        let (task, selections) = task_loss_tape(t, &ro.logits, labels, opts.trace.map(|tr| tr.selections.as_slice()));
        let rho = rho_ei_tape(t, ro.r_e_pre, ro.r_i);
        let ei = ei_loss_tape(t, rho, lw.rho_star);
        let d_model = self.cfg.model.d_model;
        let game = match self.cfg.loss.game_variant {
            GameVariant::Energy => game_energy_tape(
                t,
                ro.r_e_pre,
                ro.r_i,
                ro.u_e,
                ro.u_i,
                [f.w(self.rec.w_ee), f.w(self.rec.w_ei), f.w(self.rec.w_ie), f.w(self.rec.w_ii)],
                self.cfg.loss.d_e,
                self.cfg.loss.d_i,
                d_model,
            ),
            GameVariant::Residual => game_residual_tape(t, ro.r_e_pre, ro.r_i, ro.act_in_e, ro.act_in_i, d_model),
        };
        let sync = sync_loss_tape(t, ro.z);
        let spec = if lw.lambda_spec > 0.0 {
            let lee = perron_sum_ratio_tape(t, f.w(self.rec.w_ee), PERRON_ITERS);
            let lii = perron_sum_ratio_tape(t, f.w(self.rec.w_ii), PERRON_ITERS);
            Some(spec_loss_tape(t, lee, lii, lw.tau_ee, lw.tau_ii))
        } else {
            None
        };
        let cw = curriculum(opts.step as f64, lw.t_s as f64, lw.t_w as f64);
        let aux = t.add(t.add(t.scale(ei, lw.lambda_ei), t.scale(game, lw.lambda_game)), t.scale(sync, lw.lambda_sync));
        let mut total = t.add(task, t.scale(aux, cw));
        if let Some(s) = spec {
            total = t.add(total, t.scale(s, lw.lambda_spec));
        }
        let spec_val = match spec {
            Some(s) => t.item(s),
            None => spec_loss(
                perron_sum_ratio(&f.val(self.rec.w_ee), PERRON_ITERS),
                perron_sum_ratio(&f.val(self.rec.w_ii), PERRON_ITERS),
                lw.tau_ee,
                lw.tau_ii,
            ),
        };
        let terms = LossTerms {
            total: t.item(total),
            task: t.item(task),
            ei: t.item(ei),
            game: t.item(game),
            sync: t.item(sync),
            spec: spec_val,
            curriculum: cw,
        };
        let final_logits = t.value(*ro.logits.last().expect("ticks ≥ 1"));
        let predictions = argmax_rows(&final_logits);
        let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        let rho_mean = t.value(rho).mean();
        ro.trace.selections = selections;
        Ok(LossOutput { loss: total, terms, rho: rho_mean, predictions, correct, trace: ro.trace })
    }
}

pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    let c = x.last_dim();
    x.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-tick certainties of one batch, `[tick][sample]`.
pub fn certainties(t: &tide_autograd::Tape, logits: &[Var]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|&o| {
            let v = t.value(o);
            (0..v.shape()[0]).map(|r| certainty(v.row(r))).collect()
        })
        .collect()
}
