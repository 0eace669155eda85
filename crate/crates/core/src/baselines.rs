//! Comparison mixup strategies behind one dispatch point, so every run
//! shares the harness and differences come from the strategy alone.
//!
//! `none` trains the plain classifier. `fixed-sentence` interpolates
//! pooled sentence vectors at a fixed λ. `beta-hidden` mixes hidden
//! states at a configured layer with λ ~ Beta(a, a). `oommix` delegates
//! to the learned generator and discriminator.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::autodiff::{Binding, ParamGroup, Scalar, Tape};
use crate::config::{MixCfg, MixKind};
use crate::corpus::Minibatch;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::oommix::{
    compute_losses, forward_example, mix_embeddings, mix_labels, propagate, LossBundle, LossGraph,
    MixModel, MixOutput, MixSettings,
};

/// One λ ~ Beta(a, a); with `take_max` the draw is reflected to
/// max(λ, 1−λ).
///
/// At small shapes a sizable fraction of the true mass sits within one
/// ulp of 1.0 and the sampler rounds it to exactly 1.0; such draws are
/// rounded to the nearest value inside (0,1) instead. Dropping them
/// would visibly bias the mean.
pub fn sample_beta_lambda(a: f64, take_max: bool, rng: &mut ChaCha8Rng) -> Result<f64> {
    let dist =
        Beta::new(a, a).map_err(|e| Error::Config(format!("beta shape {}: {}", a, e)))?;
    let lam: f64 = dist.sample(rng);
    let lam = lam.max(f64::MIN_POSITIVE).min(1.0 - f64::EPSILON / 2.0);
    Ok(if take_max { lam.max(1.0 - lam) } else { lam })
}

/// L_C alone; any batch size.
pub fn classification_losses<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    enc: &Encoder,
    batch: &Minibatch,
    m_g: usize,
    m_d: usize,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut parts = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let f = forward_example(
            tape,
            binding,
            enc,
            &batch.ids[i],
            &batch.masks[i],
            batch.labels[i],
            m_g,
            m_d,
        )?;
        parts.push(f.l_c);
    }
    let l_c_node = tape.mean_scalars(&parts)?;
    let l_c = tape.scalar(l_c_node).to_f64();
    Ok(LossGraph {
        bundle: LossBundle { l_c, l_g: 0.0, l_d: 0.0, e: 0.0, total: l_c },
        l_c_node,
        l_g_node: None,
        l_d_node: None,
        lg_groups: Vec::new(),
        mixes: Vec::new(),
    })
}

/// Sentence-level mixup: pooled vectors and labels interpolated at a
/// fixed λ, classified by the shared head. No discriminator term.
pub fn fixed_sentence_losses<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    enc: &Encoder,
    batch: &Minibatch,
    perm: &[usize],
    lambda: f64,
    m_g: usize,
    m_d: usize,
) -> Result<LossGraph> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::Data(format!("batch of {} cannot form mixture pairs", n)));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("fixed λ {} outside [0,1]", lambda)));
    }
    let mut fwd = Vec::with_capacity(n);
    for i in 0..n {
        fwd.push(forward_example(
            tape,
            binding,
            enc,
            &batch.ids[i],
            &batch.masks[i],
            batch.labels[i],
            m_g,
            m_d,
        )?);
    }
    let l_c_parts: Vec<_> = fwd.iter().map(|f| f.l_c).collect();
    let l_c_node = tape.mean_scalars(&l_c_parts)?;

    let mut l_g_parts = Vec::with_capacity(n);
    let mut mixes = Vec::with_capacity(n);
    for i in 0..n {
        let j = perm[i];
        let lam = tape.constant(vec![T::from_f64(lambda)], vec![])?;
        let mixed = tape.mix(fwd[i].pooled, fwd[j].pooled, lam)?;
        let mixed_label = mix_labels(tape, batch.labels[i], batch.labels[j], lam, enc.cfg.classes)?;
        let probs = enc.classify_pooled(tape, binding, mixed)?;
        l_g_parts.push(tape.kl_loss(probs, mixed_label)?);
        mixes.push(MixOutput {
            i,
            j,
            alpha: lambda,
            delta: 0.0,
            gamma: 0.0,
            lambda,
            mixed,
            mixed_label: tape.value(mixed_label).iter().map(|&v| Scalar::to_f64(v)).collect(),
        });
    }
    let l_g_node = tape.mean_scalars(&l_g_parts)?;
    let (l_c, l_g) = (tape.scalar(l_c_node).to_f64(), tape.scalar(l_g_node).to_f64());
    Ok(LossGraph {
        bundle: LossBundle { l_c, l_g, l_d: 0.0, e: 0.0, total: l_c + l_g },
        l_c_node,
        l_g_node: Some(l_g_node),
        l_d_node: None,
        // the mix happens after pooling, so its gradient trains everything
        lg_groups: vec![
            ParamGroup::EncoderBelowMg,
            ParamGroup::EncoderMgAndAbove,
            ParamGroup::ClassifierHead,
        ],
        mixes,
    })
}

/// Hidden-state mixup at layer `m_g` with λ ~ Beta(a, a); the mixed
/// sequence rides the ordinary encoder stack to the classifier.
pub fn beta_hidden_losses<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    enc: &Encoder,
    batch: &Minibatch,
    perm: &[usize],
    a: f64,
    take_max: bool,
    m_g: usize,
    m_d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossGraph> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::Data(format!("batch of {} cannot form mixture pairs", n)));
    }
    let mut fwd = Vec::with_capacity(n);
    for i in 0..n {
        fwd.push(forward_example(
            tape,
            binding,
            enc,
            &batch.ids[i],
            &batch.masks[i],
            batch.labels[i],
            m_g,
            m_d,
        )?);
    }
    let l_c_parts: Vec<_> = fwd.iter().map(|f| f.l_c).collect();
    let l_c_node = tape.mean_scalars(&l_c_parts)?;

    let mut l_g_parts = Vec::with_capacity(n);
    let mut mixes = Vec::with_capacity(n);
    for i in 0..n {
        let j = perm[i];
        let lambda = sample_beta_lambda(a, take_max, rng)?;
        let lam = tape.constant(vec![T::from_f64(lambda)], vec![])?;
        let mixed = mix_embeddings(tape, &fwd[i].at_mg, &fwd[j].at_mg, lam)?;
        let mixed_label = mix_labels(tape, batch.labels[i], batch.labels[j], lam, enc.cfg.classes)?;
        let fin = propagate(tape, binding, enc, mixed.clone(), enc.cfg.layers)?;
        let probs = enc.classify(tape, binding, fin.node, &fin.mask)?;
        l_g_parts.push(tape.kl_loss(probs, mixed_label)?);
        mixes.push(MixOutput {
            i,
            j,
            alpha: lambda,
            delta: 0.0,
            gamma: 0.0,
            lambda,
            mixed: mixed.node,
            mixed_label: tape.value(mixed_label).iter().map(|&v| Scalar::to_f64(v)).collect(),
        });
    }
    let l_g_node = tape.mean_scalars(&l_g_parts)?;
    let (l_c, l_g) = (tape.scalar(l_c_node).to_f64(), tape.scalar(l_g_node).to_f64());
    Ok(LossGraph {
        bundle: LossBundle { l_c, l_g, l_d: 0.0, e: 0.0, total: l_c + l_g },
        l_c_node,
        l_g_node: Some(l_g_node),
        l_d_node: None,
        lg_groups: vec![ParamGroup::EncoderMgAndAbove, ParamGroup::ClassifierHead],
        mixes,
    })
}

/// Build the selected strategy's loss graph on one batch.
#[allow(clippy::too_many_arguments)]
pub fn strategy_dispatch<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    enc: &Encoder,
    model: Option<&MixModel>,
    mix: &MixCfg,
    m_g: usize,
    m_d: usize,
    batch: &Minibatch,
    perm: &[usize],
    e: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossGraph> {
    match mix.strategy {
        MixKind::None => classification_losses(tape, binding, enc, batch, m_g, m_d),
        MixKind::FixedSentence => fixed_sentence_losses(
            tape,
            binding,
            enc,
            batch,
            perm,
            mix.fixed_lambda,
            m_g,
            m_d,
        ),
        MixKind::BetaHidden => beta_hidden_losses(
            tape,
            binding,
            enc,
            batch,
            perm,
            mix.beta_a,
            mix.beta_max,
            m_g,
            m_d,
            rng,
        ),
        MixKind::Oommix => {
            let model = model
                .ok_or_else(|| Error::Config("oommix strategy without generator".into()))?;
            compute_losses(
                tape,
                binding,
                enc,
                model,
                batch,
                perm,
                MixSettings::new(e, mix.ld_form),
                rng,
            )
        }
    }
}
