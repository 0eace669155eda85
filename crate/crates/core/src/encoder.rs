//! M-layer transformer encoder classifier with accessible intermediate
//! layers, so other modules can split the forward pass at any layer m,
//! interpolate there, and resume.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::params::{self, ParamGroup, ParamId, ParamStore};
use crate::autodiff::{Binding, NodeId, Scalar, Tape};
use crate::config::Config;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Layer count M.
    pub layers: usize,
    /// Width D.
    pub width: usize,
    pub heads: usize,
    /// Maximum sequence length L.
    pub seq_len: usize,
    /// Feed-forward width.
    pub ff: usize,
    /// Vocabulary size V actually in use.
    pub vocab: usize,
    /// Class count C.
    pub classes: usize,
    pub dropout: f64,
    /// Layers 1..=boundary (plus embeddings) form the encoder-below-mg
    /// parameter group; the rest are encoder-mg-and-above.
    pub group_boundary: usize,
}

impl EncoderConfig {
    pub fn from_config(cfg: &Config, vocab: usize, classes: usize) -> Self {
        EncoderConfig {
            layers: cfg.model.layers,
            width: cfg.model.width,
            heads: cfg.model.heads,
            seq_len: cfg.model.seq_len,
            ff: cfg.ff_width(),
            vocab,
            classes,
            dropout: cfg.model.dropout,
            group_boundary: cfg.m_g(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

// ── shared transformer block ────────────────────────────────────────────

/// Parameter handles of one post-LN transformer block. Also used by the
/// generator and discriminator towers, which own single blocks.
pub(crate) struct BlockIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

impl BlockIds {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        ff: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<BlockIds> {
        let mut mat = |store: &mut ParamStore<T>, name: &str, r: usize, c: usize| {
            store.register(
                &format!("{}.{}", prefix, name),
                vec![r, c],
                params::trunc_normal(rng, INIT_STD, r * c),
                group,
            )
        };
        let wq = mat(store, "attn.wq", d, d)?;
        let wk = mat(store, "attn.wk", d, d)?;
        let wv = mat(store, "attn.wv", d, d)?;
        let wo = mat(store, "attn.wo", d, d)?;
        let w1 = mat(store, "ff.w1", d, ff)?;
        let w2 = mat(store, "ff.w2", ff, d)?;
        let vecp = |store: &mut ParamStore<T>, name: &str, n: usize, val: Vec<T>| {
            store.register(&format!("{}.{}", prefix, name), vec![n], val, group)
        };
        let bq = vecp(store, "attn.bq", d, params::zeros(d))?;
        let bv = vecp(store, "attn.bv", d, params::zeros(d))?;
        let bo = vecp(store, "attn.bo", d, params::zeros(d))?;
        let b1 = vecp(store, "ff.b1", ff, params::zeros(ff))?;
        let b2 = vecp(store, "ff.b2", d, params::zeros(d))?;
        let ln1_g = vecp(store, "ln1.gamma", d, params::ones(d))?;
        let ln1_b = vecp(store, "ln1.beta", d, params::zeros(d))?;
        let ln2_g = vecp(store, "ln2.gamma", d, params::ones(d))?;
        let ln2_b = vecp(store, "ln2.beta", d, params::zeros(d))?;
        Ok(BlockIds {
            wq, bq, wk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b,
        })
    }

    /// Self-attention + feed-forward with post-LN residuals on h [L,D].
    pub(crate) fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        h: NodeId,
        mask: &[u8],
        heads: usize,
        dropout: f64,
    ) -> Result<NodeId> {
        let d = match *tape.shape(h) {
            [rows, d] if rows == mask.len() => d,
            ref s => return Err(Error::shape("block", format!("h {:?} vs mask {}", s, mask.len()))),
        };
        if d % heads != 0 {
            return Err(Error::shape("block", format!("width {} not divisible by {} heads", d, heads)));
        }
        let dh = d / heads;
        let n = |id: ParamId| binding.node(id);

        let q = tape.matmul(h, n(self.wq))?;
        let q = tape.add_row_broadcast(q, n(self.bq))?;
        // no key bias: a shared offset on every key cancels in the row
        // softmax, leaving an exactly-null parameter direction
        let k = tape.matmul(h, n(self.wk))?;
        let v = tape.matmul(h, n(self.wv))?;
        let v = tape.add_row_broadcast(v, n(self.bv))?;

        let mut ctx = Vec::with_capacity(heads);
        for i in 0..heads {
            let (lo, hi) = (i * dh, (i + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = tape.key_mask_bias(scores, mask)?;
            let attn = tape.softmax(scores)?;
            let attn = tape.dropout(attn, dropout)?;
            ctx.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&ctx)?;
        let proj = tape.matmul(ctx, n(self.wo))?;
        let proj = tape.add_row_broadcast(proj, n(self.bo))?;
        let proj = tape.dropout(proj, dropout)?;
        let res = tape.add(h, proj)?;
        let res = tape.layer_norm(res, n(self.ln1_g), n(self.ln1_b), LN_EPS)?;

        let x = tape.matmul(res, n(self.w1))?;
        let x = tape.add_row_broadcast(x, n(self.b1))?;
        let x = tape.gelu(x);
        let x = tape.matmul(x, n(self.w2))?;
        let x = tape.add_row_broadcast(x, n(self.b2))?;
        let x = tape.dropout(x, dropout)?;
        let res2 = tape.add(res, x)?;
        tape.layer_norm(res2, n(self.ln2_g), n(self.ln2_b), LN_EPS)
    }
}

/// Two-layer head (affine, GELU, affine) applied to a rank-1 vector. The
/// output layer starts at zero so fresh heads emit exactly neutral values
/// (uniform softmax, sigmoid 0.5).
pub(crate) struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl MlpIds {
    pub(crate) fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<MlpIds> {
        let w1 = store.register(
            &format!("{}.w1", prefix),
            vec![d_in, d_hidden],
            params::trunc_normal(rng, INIT_STD, d_in * d_hidden),
            group,
        )?;
        let b1 = store.register(&format!("{}.b1", prefix), vec![d_hidden], params::zeros(d_hidden), group)?;
        let w2 = store.register(
            &format!("{}.w2", prefix),
            vec![d_hidden, d_out],
            params::zeros(d_hidden * d_out),
            group,
        )?;
        let b2 = store.register(&format!("{}.b2", prefix), vec![d_out], params::zeros(d_out), group)?;
        Ok(MlpIds { w1, b1, w2, b2 })
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = tape.vecmat(x, binding.node(self.w1))?;
        let h = tape.add(h, binding.node(self.b1))?;
        let h = tape.gelu(h);
        let o = tape.vecmat(h, binding.node(self.w2))?;
        tape.add(o, binding.node(self.b2))
    }
}

// ── encoder ─────────────────────────────────────────────────────────────

pub struct Encoder {
    pub cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Encoder {
    /// Register all encoder parameters into `store`. Layers up to
    /// `cfg.group_boundary` (and the embeddings) land in the below-mg
    /// group, the rest above; the classification head has its own group.
    pub fn build<T: Scalar>(
        cfg: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Encoder> {
        let (v, d, l) = (cfg.vocab, cfg.width, cfg.seq_len);
        let tok_emb = store.register(
            "enc.tok_emb",
            vec![v, d],
            params::trunc_normal(rng, INIT_STD, v * d),
            ParamGroup::EncoderBelowMg,
        )?;
        let pos_emb = store.register(
            "enc.pos_emb",
            vec![l, d],
            params::trunc_normal(rng, INIT_STD, l * d),
            ParamGroup::EncoderBelowMg,
        )?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 1..=cfg.layers {
            let group = if i <= cfg.group_boundary {
                ParamGroup::EncoderBelowMg
            } else {
                ParamGroup::EncoderMgAndAbove
            };
            blocks.push(BlockIds::register(
                store,
                &format!("enc.l{}", i),
                d,
                cfg.ff,
                group,
                rng,
            )?);
        }
        let head_w = store.register(
            "head.w",
            vec![d, cfg.classes],
            params::zeros(d * cfg.classes),
            ParamGroup::ClassifierHead,
        )?;
        let head_b = store.register(
            "head.b",
            vec![cfg.classes],
            params::zeros(cfg.classes),
            ParamGroup::ClassifierHead,
        )?;
        Ok(Encoder { cfg, tok_emb, pos_emb, blocks, head_w, head_b })
    }

    /// Layer-0 contextual embedding: token plus position rows, dropout in
    /// train mode. `ids` may be shorter than the maximum length; `mask`
    /// must match it.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        ids: &[usize],
        mask: &[u8],
    ) -> Result<NodeId> {
        if ids.len() != mask.len() {
            return Err(Error::shape("embed", format!("{} ids vs {} mask", ids.len(), mask.len())));
        }
        if ids.len() > self.cfg.seq_len {
            return Err(Error::shape(
                "embed",
                format!("sequence {} exceeds max {}", ids.len(), self.cfg.seq_len),
            ));
        }
        let tok = tape.embedding(binding.node(self.tok_emb), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.embedding(binding.node(self.pos_emb), &positions)?;
        let h0 = tape.add(tok, pos)?;
        tape.dropout(h0, self.cfg.dropout)
    }

    /// Apply transformer layers from+1 ..= to.
    pub fn forward_layers<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        h: NodeId,
        mask: &[u8],
        from: usize,
        to: usize,
    ) -> Result<NodeId> {
        if from >= to || to > self.cfg.layers {
            return Err(Error::shape(
                "forward_layers",
                format!("need from < to ≤ {}, got {} → {}", self.cfg.layers, from, to),
            ));
        }
        let mut h = h;
        for block in &self.blocks[from..to] {
            h = block.forward(tape, binding, h, mask, self.cfg.heads, self.cfg.dropout)?;
        }
        Ok(h)
    }

    /// Mean-pool the unmasked rows of a layer-M embedding.
    pub fn pool<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        h: NodeId,
        mask: &[u8],
    ) -> Result<NodeId> {
        tape.masked_mean_rows(h, mask)
    }

    /// Class probabilities from a layer-M embedding.
    pub fn classify<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        h: NodeId,
        mask: &[u8],
    ) -> Result<NodeId> {
        let pooled = self.pool(tape, h, mask)?;
        self.classify_pooled(tape, binding, pooled)
    }

    /// Class probabilities from an already pooled sentence vector.
    pub fn classify_pooled<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        pooled: NodeId,
    ) -> Result<NodeId> {
        let logits = tape.vecmat(pooled, binding.node(self.head_w))?;
        let logits = tape.add(logits, binding.node(self.head_b))?;
        tape.softmax(logits)
    }

    /// Full pass: tokens to class probabilities.
    pub fn forward_full<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        ids: &[usize],
        mask: &[u8],
    ) -> Result<NodeId> {
        let h0 = self.embed(tape, binding, ids, mask)?;
        let hm = self.forward_layers(tape, binding, h0, mask, 0, self.cfg.layers)?;
        self.classify(tape, binding, hm, mask)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::grad_check;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            width: 8,
            heads: 2,
            seq_len: 6,
            ff: 16,
            vocab: 12,
            classes: 3,
            dropout: 0.0,
            group_boundary: 1,
        }
    }

    fn build(cfg: EncoderConfig) -> (Encoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::build(cfg, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    /// Replace the training-scale initialization with O(1) random values;
    /// gradients at init scale (std 0.02) sit near the roundoff floor of
    /// central differences and make relative error meaningless.
    pub(crate) fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..store.len() {
            let id = crate::autodiff::ParamId(i);
            let gamma = store.entry(id).name.contains("gamma");
            for v in store.entry_mut(id).data.iter_mut() {
                *v = if gamma {
                    rand::Rng::random_range(&mut rng, 0.6..1.4)
                } else {
                    rand::Rng::random_range(&mut rng, -0.4..0.4)
                };
            }
        }
    }

    #[test]
    fn embed_is_deterministic_and_shaped() {
        let (enc, store) = build(tiny_cfg());
        let mut tape = Tape::<f64>::eval();
        let binding = store.bind(&mut tape).unwrap();
        let ids = [3usize, 5, 0, 0];
        let mask = [1u8, 1, 0, 0];
        let a = enc.embed(&mut tape, &binding, &ids, &mask).unwrap();
        let b = enc.embed(&mut tape, &binding, &ids, &mask).unwrap();
        assert_eq!(tape.shape(a), &[4, 8]);
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn embed_rejects_bad_ids() {
        let (enc, store) = build(tiny_cfg());
        let mut tape = Tape::<f64>::eval();
        let binding = store.bind(&mut tape).unwrap();
        assert!(enc.embed(&mut tape, &binding, &[99], &[1]).is_err());
        assert!(enc
            .embed(&mut tape, &binding, &[1; 7], &[1; 7])
            .is_err());
    }

    #[test]
    fn padding_content_never_reaches_unmasked_rows() {
        let (enc, store) = build(tiny_cfg());
        let mut tape = Tape::<f64>::eval();
        let binding = store.bind(&mut tape).unwrap();
        let mask = [1u8, 1, 0, 0];
        let run = |tape: &mut Tape<f64>, ids: &[usize]| {
            let h0 = enc.embed(tape, &binding, ids, &mask).unwrap();
            let hm = enc.forward_layers(tape, &binding, h0, &mask, 0, 2).unwrap();
            let probs = enc.classify(tape, &binding, hm, &mask).unwrap();
            (tape.value(hm).to_vec(), tape.value(probs).to_vec())
        };
        let (h_a, p_a) = run(&mut tape, &[3, 5, 0, 0]);
        let (h_b, p_b) = run(&mut tape, &[3, 5, 7, 9]);
        let d = enc.cfg.width;
        assert_eq!(&h_a[..2 * d], &h_b[..2 * d]);
        assert_eq!(p_a, p_b);
    }

    #[test]
    fn composition_identity_at_every_split() {
        let (enc, store) = build(tiny_cfg());
        let mut tape = Tape::<f64>::eval();
        let binding = store.bind(&mut tape).unwrap();
        let ids = [2usize, 4, 6, 1];
        let mask = [1u8, 1, 1, 1];
        let h0 = enc.embed(&mut tape, &binding, &ids, &mask).unwrap();
        let full = enc.forward_layers(&mut tape, &binding, h0, &mask, 0, 2).unwrap();
        for m in 1..2 {
            let lower = enc.forward_layers(&mut tape, &binding, h0, &mask, 0, m).unwrap();
            let upper = enc.forward_layers(&mut tape, &binding, lower, &mask, m, 2).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(tape.value(full)), bits(tape.value(upper)));
        }
        assert!(enc.forward_layers(&mut tape, &binding, h0, &mask, 2, 2).is_err());
    }

    #[test]
    fn classify_zero_head_is_uniform_and_normalized() {
        let (enc, store) = build(tiny_cfg());
        let mut tape = Tape::<f64>::eval();
        let binding = store.bind(&mut tape).unwrap();
        let probs = enc.forward_full(&mut tape, &binding, &[1, 2, 3], &[1, 1, 1]).unwrap();
        let v = tape.value(probs);
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for &p in v {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_is_pool_permutation_invariant() {
        let (enc, store) = build(tiny_cfg());
        let mut tape = Tape::<f64>::eval();
        let binding = store.bind(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..4 * 8).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let mut swapped = data.clone();
        for j in 0..8 {
            swapped.swap(j, 8 + j);
        }
        let h1 = tape.constant(data, vec![4, 8]).unwrap();
        let h2 = tape.constant(swapped, vec![4, 8]).unwrap();
        let mask = [1u8, 1, 1, 0];
        let p1 = enc.classify(&mut tape, &binding, h1, &mask).unwrap();
        let p2 = enc.classify(&mut tape, &binding, h2, &mask).unwrap();
        for (a, b) in tape.value(p1).iter().zip(tape.value(p2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_shift_invariance() {
        let (enc, mut store) = build(tiny_cfg());
        // give the head nonzero weights so the test is not vacuous
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = store.lookup("head.w").unwrap();
        store.entry_mut(w).data = params::trunc_normal(&mut rng, 0.5, 8 * 3);
        let baseline = {
            let mut tape = Tape::<f64>::eval();
            let binding = store.bind(&mut tape).unwrap();
            let p = enc.forward_full(&mut tape, &binding, &[1, 2], &[1, 1]).unwrap();
            tape.value(p).to_vec()
        };
        let b = store.lookup("head.b").unwrap();
        for v in store.entry_mut(b).data.iter_mut() {
            *v += 3.7;
        }
        let shifted = {
            let mut tape = Tape::<f64>::eval();
            let binding = store.bind(&mut tape).unwrap();
            let p = enc.forward_full(&mut tape, &binding, &[1, 2], &[1, 1]).unwrap();
            tape.value(p).to_vec()
        };
        for (a, b) in baseline.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn one_layer_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let block = BlockIds::register(&mut store, "blk", 8, 12, ParamGroup::EncoderBelowMg, &mut rng)
            .unwrap();
        randomize(&mut store, 22);
        let mut tape = Tape::<f64>::eval();
        let binding = store.bind(&mut tape).unwrap();
        let h = tape
            .leaf(
                (0..3 * 8).map(|i| ((i as f64) * 0.37).sin()).collect(),
                vec![3, 8],
                true,
            )
            .unwrap();
        let out = block.forward(&mut tape, &binding, h, &[1, 1, 0], 2, 0.0).unwrap();
        let w = tape.constant((0..3 * 8).map(|i| 0.1 + (i as f64) * 0.013).collect(), vec![3, 8]).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum_all(prod);
        let leaves: Vec<_> = (0..store.len())
            .map(|i| binding.node(crate::autodiff::ParamId(i)))
            .chain([h])
            .collect();
        let report = grad_check(&mut tape, loss, &leaves, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }

    #[test]
    fn end_to_end_gradcheck_two_layers() {
        let (enc, mut store) = build(tiny_cfg());
        randomize(&mut store, 23);
        let mut tape = Tape::<f64>::eval();
        let binding = store.bind(&mut tape).unwrap();
        let probs = enc.forward_full(&mut tape, &binding, &[2, 7, 4], &[1, 1, 1]).unwrap();
        let target = tape.constant(vec![0.0, 1.0, 0.0], vec![3]).unwrap();
        let loss = tape.kl_loss(probs, target).unwrap();
        let leaves: Vec<_> = (0..store.len())
            .map(|i| binding.node(crate::autodiff::ParamId(i)))
            .collect();
        let report = grad_check(&mut tape, loss, &leaves, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "err {} at {} (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst,
            report.worst_analytic,
            report.worst_numeric
        );
    }

    #[test]
    fn group_boundary_splits_layers() {
        let (_, store) = build(tiny_cfg());
        for e in store.iter() {
            let expect = if e.name.starts_with("enc.l2") {
                ParamGroup::EncoderMgAndAbove
            } else if e.name.starts_with("enc.") {
                ParamGroup::EncoderBelowMg
            } else {
                ParamGroup::ClassifierHead
            };
            assert_eq!(e.group, expect, "{}", e.name);
        }
    }
}
