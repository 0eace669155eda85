//! The optimization loop: Adam with per-group learning rates, linear
//! warmup, periodic validation with early stopping, scoped gradient
//! routing, and the e-adjustment controller.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamGroup, ParamStore, Scalar, Tape};
use crate::config::{derive_seed, seed_tags, Config, MixKind};
use crate::corpus::{epoch_batches, DatasetSplit, Minibatch, TokenSequence, Vocabulary};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::oommix::{pair_permutation, route_gradients, EController, MixModel};

// ── Adam ────────────────────────────────────────────────────────────────

/// Bias-corrected Adam with one moment pair per parameter buffer.
pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Adam<T> {
        Adam {
            m: store.iter().map(|e| vec![T::from_f64(0.0); e.data.len()]).collect(),
            v: store.iter().map(|e| vec![T::from_f64(0.0); e.data.len()]).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with a per-group learning rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr_for: impl Fn(ParamGroup) -> f64,
    ) {
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let eps = T::from_f64(self.eps);
        for (idx, entry) in store.iter_mut_entries().enumerate() {
            let lr = T::from_f64(lr_for(entry.group));
            let g = grads.get(crate::autodiff::ParamId(idx));
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for k in 0..entry.data.len() {
                m[k] = b1 * m[k] + one_m_b1 * g[k];
                v[k] = b2 * v[k] + one_m_b2 * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                entry.data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup to `base_lr`, constant afterwards.
pub fn lr_schedule(step: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

// ── evaluation ──────────────────────────────────────────────────────────

/// Argmax class with ties broken toward the lowest index.
pub fn argmax_class<T: Scalar>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Accuracy over a split, dropout off.
pub fn evaluate<T: Scalar>(
    store: &ParamStore<T>,
    enc: &Encoder,
    seqs: &[TokenSequence],
    labels: &[usize],
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut correct = 0usize;
    for chunk in seqs.chunks(64).zip(labels.chunks(64)) {
        let (cseq, clab) = chunk;
        let mut tape: Tape<T> = Tape::eval();
        let binding = store.bind(&mut tape)?;
        for (s, &y) in cseq.iter().zip(clab) {
            let (ids, mask) = s.trimmed(0);
            let probs = enc.forward_full(&mut tape, &binding, ids, mask)?;
            if argmax_class(tape.value(probs)) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / seqs.len() as f64)
}

// ── reporting ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub val_acc: f64,
    pub l_c: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub e: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub evals: Vec<MetricsRow>,
    pub best_step: u64,
    pub best_val_acc: f64,
    pub test_acc: f64,
    pub steps_run: u64,
    pub lambda_violations: u64,
    pub metrics_path: Option<String>,
    pub lambda_log_path: Option<String>,
}

/// Where the trainer streams its logs; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct Sinks {
    pub metrics: Option<PathBuf>,
    pub lambda_log: Option<PathBuf>,
}

pub struct Trained<T> {
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub mix: Option<MixModel>,
    pub enc_cfg: EncoderConfig,
    pub vocab: Vocabulary,
    pub report: TrainReport,
}

fn open_sink(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            Ok(Some(BufWriter::new(File::create(p)?)))
        }
    }
}

// ── the loop ────────────────────────────────────────────────────────────

pub fn train<T: Scalar>(cfg: &Config, data: &DatasetSplit, sinks: &Sinks) -> Result<Trained<T>> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("training needs non-empty train and val splits".into()));
    }
    let seed = cfg.seed;
    let (m_g, m_d) = (cfg.m_g(), cfg.m_d());
    let mixing = cfg.mix.strategy.needs_pairs();

    let vocab = Vocabulary::build(&data.train, cfg.model.vocab_cap)?;
    let enc_cfg = EncoderConfig::from_config(cfg, vocab.len(), data.classes);

    let mut store: ParamStore<T> = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_tags::INIT));
    let encoder = Encoder::build(enc_cfg.clone(), &mut store, &mut init_rng)?;
    let mix_model = if cfg.mix.strategy == MixKind::Oommix {
        Some(MixModel::build(&enc_cfg, m_g, m_d, &mut store, &mut init_rng)?)
    } else {
        None
    };

    let encode = |examples: &[crate::corpus::LabeledExample]| -> (Vec<TokenSequence>, Vec<usize>) {
        let seqs = examples.iter().map(|e| vocab.encode(&e.text, enc_cfg.seq_len)).collect();
        let labels = examples.iter().map(|e| e.label).collect();
        (seqs, labels)
    };
    let (train_seqs, train_labels) = encode(&data.train);
    let (val_seqs, val_labels) = encode(&data.val);
    let (test_seqs, test_labels) = encode(&data.test);

    let mut adam = Adam::new(&store, cfg.train.beta1, cfg.train.beta2, cfg.train.eps);
    let mut controller = if cfg.mix.strategy == MixKind::Oommix {
        EController::new(&cfg.mix)
    } else {
        EController::frozen(0.0)
    };
    let mut pairs_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_tags::PAIRS));
    let mut mix_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_tags::GAMMA));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_tags::DROPOUT));

    let mut metrics_file = open_sink(&sinks.metrics)?;
    let mut lambda_file = open_sink(&sinks.lambda_log)?;
    if let Some(f) = lambda_file.as_mut() {
        writeln!(f, "step,alpha,delta,gamma,lambda,l_c,l_g,l_d,e")?;
    }

    let mut evals: Vec<MetricsRow> = Vec::new();
    let mut best: Option<(u64, f64, Vec<Vec<T>>)> = None;
    let mut since_best = 0usize;
    let mut lambda_violations = 0u64;
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut stop = false;

    let max_steps = cfg.train.max_steps as u64;
    let eval_every = cfg.train.eval_every as u64;
    let warmup = cfg.train.warmup as u64;
    'outer: while !stop && step < max_steps {
        let batches =
            epoch_batches(train_seqs.len(), cfg.train.batch, seed, epoch, mixing);
        epoch += 1;
        if batches.is_empty() {
            return Err(Error::Data(format!(
                "{} training examples cannot fill a batch of {}",
                train_seqs.len(),
                cfg.train.batch
            )));
        }
        for idxs in batches {
            step += 1;
            let seqs: Vec<TokenSequence> = idxs.iter().map(|&i| train_seqs[i].clone()).collect();
            let labels: Vec<usize> = idxs.iter().map(|&i| train_labels[i]).collect();
            let batch = Minibatch::assemble(&seqs, &labels);
            let perm = pair_permutation(batch.len(), &mut pairs_rng);

            let mut tape: Tape<T> = Tape::new(true, dropout_rng.random());
            let binding = store.bind(&mut tape)?;
            let e = controller.e();
            let graph = crate::baselines::strategy_dispatch(
                &mut tape,
                &binding,
                &encoder,
                mix_model.as_ref(),
                &cfg.mix,
                m_g,
                m_d,
                &batch,
                &perm,
                e,
                &mut mix_rng,
            )?;
            let bundle = graph.bundle;
            if !bundle.total.is_finite() {
                return Err(Error::Diverged { step, what: format!("loss {}", bundle.total) });
            }
            for m in &graph.mixes {
                let label_sum: f64 = m.mixed_label.iter().sum();
                let label_ok = (label_sum - 1.0).abs() <= 1e-6
                    && m.mixed_label.iter().all(|&p| p >= -1e-6);
                if !m.lambda_in_range() || !label_ok {
                    lambda_violations += 1;
                }
            }

            let mut grads = route_gradients(&mut tape, &store, &binding, &graph)?;
            if !grads.is_finite() {
                return Err(Error::Diverged { step, what: "non-finite gradient".into() });
            }
            if cfg.train.clip > 0.0 {
                grads.clip_global_norm(cfg.train.clip);
            }
            let warm_enc = lr_schedule(step, warmup, cfg.train.lr_encoder);
            let warm_head = lr_schedule(step, warmup, cfg.train.lr_head);
            adam.step(&mut store, &grads, |g| if g.is_encoder() { warm_enc } else { warm_head });

            if cfg.mix.strategy == MixKind::Oommix {
                controller.observe(bundle.l_d);
            }
            if let Some(f) = lambda_file.as_mut() {
                if !graph.mixes.is_empty() {
                    let n = graph.mixes.len() as f64;
                    let mean = |sel: fn(&crate::oommix::MixOutput) -> f64| {
                        graph.mixes.iter().map(sel).sum::<f64>() / n
                    };
                    // γ is logged as the Δ-weighted mean: mean(λ) equals
                    // mean(α) + mean(γΔ), not mean(α) + mean(γ)·mean(Δ),
                    // so a plain γ mean would break the row's identity by
                    // the batch covariance of γ and Δ.
                    let dsum: f64 = graph.mixes.iter().map(|m| m.delta).sum();
                    let gamma_row = if dsum > 0.0 {
                        graph.mixes.iter().map(|m| m.gamma * m.delta).sum::<f64>() / dsum
                    } else {
                        mean(|m| m.gamma)
                    };
                    writeln!(
                        f,
                        "{},{},{},{},{},{},{},{},{}",
                        step,
                        mean(|m| m.alpha),
                        mean(|m| m.delta),
                        gamma_row,
                        mean(|m| m.lambda),
                        bundle.l_c,
                        bundle.l_g,
                        bundle.l_d,
                        e
                    )?;
                }
            }

            let last_chance = step >= max_steps;
            if step % eval_every == 0 || (last_chance && evals.is_empty()) {
                let val_acc = evaluate(&store, &encoder, &val_seqs, &val_labels)?;
                let row = MetricsRow {
                    step,
                    val_acc,
                    l_c: bundle.l_c,
                    l_g: bundle.l_g,
                    l_d: bundle.l_d,
                    e: controller.e(),
                };
                evals.push(row);
                if let Some(f) = metrics_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&row).unwrap())?;
                }
                let improved = match &best {
                    None => true,
                    Some((_, acc, _)) => val_acc > *acc,
                };
                if improved {
                    best = Some((step, val_acc, store.snapshot()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.train.patience {
                        stop = true;
                    }
                }
            }
            if stop || step >= max_steps {
                continue 'outer;
            }
        }
    }

    let (best_step, best_val_acc) = match best {
        Some((s, acc, snapshot)) => {
            store.restore(&snapshot);
            (s, acc)
        }
        None => (step, f64::NAN),
    };
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    if let Some(f) = lambda_file.as_mut() {
        f.flush()?;
    }

    let test_acc = if test_seqs.is_empty() {
        f64::NAN
    } else {
        evaluate(&store, &encoder, &test_seqs, &test_labels)?
    };
    let report = TrainReport {
        evals,
        best_step,
        best_val_acc,
        test_acc,
        steps_run: step,
        lambda_violations,
        metrics_path: sinks.metrics.as_ref().map(|p| p.display().to_string()),
        lambda_log_path: sinks.lambda_log.as_ref().map(|p| p.display().to_string()),
    };
    Ok(Trained { store, encoder, mix: mix_model, enc_cfg, vocab, report })
}

/// Rebuild the model structs over a parameter store loaded from a
/// checkpoint, matching entries by name.
pub fn rebuild<T: Scalar>(
    header: &crate::checkpoint::Header,
    loaded: &ParamStore<T>,
) -> Result<(Encoder, Option<MixModel>, ParamStore<T>)> {
    let cfg = &header.config;
    let enc_cfg = header.encoder.clone();
    let mut store: ParamStore<T> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = Encoder::build(enc_cfg.clone(), &mut store, &mut rng)?;
    let mix = if cfg.mix.strategy == MixKind::Oommix {
        Some(MixModel::build(&enc_cfg, cfg.m_g(), cfg.m_d(), &mut store, &mut rng)?)
    } else {
        None
    };
    for idx in 0..store.len() {
        let id = crate::autodiff::ParamId(idx);
        let name = store.entry(id).name.clone();
        let src = loaded
            .lookup(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {}", name)))?;
        let src_entry = loaded.entry(src);
        if src_entry.shape != store.entry(id).shape {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} vs {:?}",
                name,
                src_entry.shape,
                store.entry(id).shape
            )));
        }
        store.entry_mut(id).data.copy_from_slice(&src_entry.data);
    }
    Ok((encoder, mix, store))
}

/// Tokenize a split with a stored vocabulary and measure accuracy.
pub fn evaluate_examples<T: Scalar>(
    store: &ParamStore<T>,
    enc: &Encoder,
    vocab: &Vocabulary,
    examples: &[crate::corpus::LabeledExample],
) -> Result<f64> {
    let seqs: Vec<TokenSequence> =
        examples.iter().map(|e| vocab.encode(&e.text, enc.cfg.seq_len)).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    evaluate(store, enc, &seqs, &labels)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, cfg: &Config, trained: &Trained<T>) -> Result<()> {
    crate::checkpoint::save(path, cfg, &trained.enc_cfg, &trained.vocab, &trained.store)
}
