//! Encoder, projector and language model passes with a reusable tape for
//! backpropagation.

use super::float::Float;
use super::layers::{
    attention, attention_backward, gelu, gelu_backward, layernorm, layernorm_backward, linear, linear_backward,
    log_softmax, LnCache,
};
use super::params::{BlockIx, Group, ParamStore};
use super::Model;
use crate::codec::{TokenId, IMG};
use crate::error::{Error, Result};
use crate::synthdata::GrayImage;

/// Row-major `rows x vocab` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Float> Logits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

pub(crate) fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert_ne!(a, b);
    if a < b {
        let (l, r) = v.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = v.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}

fn pair<'a, T>(g: &'a mut Option<&mut ParamStore<T>>, a: usize, b: usize) -> Option<(&'a mut [T], &'a mut [T])> {
    g.as_deref_mut().map(|s| two_mut(&mut s.data, a, b))
}

fn add_into<T: Float>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

pub(crate) struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    pub(crate) qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    fc: Vec<T>,
    act: Vec<T>,
}

/// Shape of a transformer stack.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub d: usize,
    pub heads: usize,
    pub hidden: usize,
}

pub(crate) fn block_forward<T: Float>(
    p: &ParamStore<T>,
    ix: &BlockIx,
    x: &mut [T],
    rows: usize,
    dm: Dims,
    prefix: usize,
) -> BlockCache<T> {
    let w = |i: usize| p.data[i].as_slice();
    let Dims { d, heads, hidden } = dm;
    let (h1, ln1) = layernorm(x, rows, d, w(ix.ln1_g), w(ix.ln1_b));
    let qkv = linear(&h1, rows, w(ix.qkv_w), w(ix.qkv_b), d, 3 * d);
    let (att, probs) = attention(&qkv, rows, d, heads, prefix);
    add_into(x, &linear(&att, rows, w(ix.proj_w), w(ix.proj_b), d, d));
    let (h2, ln2) = layernorm(x, rows, d, w(ix.ln2_g), w(ix.ln2_b));
    let fc = linear(&h2, rows, w(ix.fc_w), w(ix.fc_b), d, hidden);
    let act = gelu(&fc);
    add_into(x, &linear(&act, rows, w(ix.out_w), w(ix.out_b), hidden, d));
    BlockCache { ln1, h1, qkv, probs, att, ln2, h2, fc, act }
}

/// On entry `dx` is the gradient at the block output; on exit at its input.
fn block_backward<T: Float>(
    p: &ParamStore<T>,
    ix: &BlockIx,
    c: &BlockCache<T>,
    dx: &mut [T],
    rows: usize,
    dm: Dims,
    mut grads: Option<&mut ParamStore<T>>,
) {
    let w = |i: usize| p.data[i].as_slice();
    let Dims { d, heads, hidden } = dm;
    let mut dact = vec![T::zero(); rows * hidden];
    linear_backward(&c.act, dx, rows, w(ix.out_w), hidden, d, Some(&mut dact), pair(&mut grads, ix.out_w, ix.out_b));
    let mut dfc = vec![T::zero(); rows * hidden];
    gelu_backward(&c.fc, &dact, &mut dfc);
    let mut dh2 = vec![T::zero(); rows * d];
    linear_backward(&c.h2, &dfc, rows, w(ix.fc_w), d, hidden, Some(&mut dh2), pair(&mut grads, ix.fc_w, ix.fc_b));
    layernorm_backward(&dh2, &c.ln2, rows, d, w(ix.ln2_g), dx, pair(&mut grads, ix.ln2_g, ix.ln2_b));

    let mut datt = vec![T::zero(); rows * d];
    linear_backward(&c.att, dx, rows, w(ix.proj_w), d, d, Some(&mut datt), pair(&mut grads, ix.proj_w, ix.proj_b));
    let dqkv = attention_backward(&datt, &c.qkv, &c.probs, rows, d, heads);
    let mut dh1 = vec![T::zero(); rows * d];
    linear_backward(&c.h1, &dqkv, rows, w(ix.qkv_w), d, 3 * d, Some(&mut dh1), pair(&mut grads, ix.qkv_w, ix.qkv_b));
    layernorm_backward(&dh1, &c.ln1, rows, d, w(ix.ln1_g), dx, pair(&mut grads, ix.ln1_g, ix.ln1_b));
}

pub(crate) struct VisionTape<T> {
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    feats: Vec<T>,
    h1: Vec<T>,
    a1: Vec<T>,
}

pub(crate) struct LmTape<T> {
    rows: usize,
    ids: Vec<TokenId>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    hidden: Vec<T>,
    /// Log-softmax of each target row (`ids.len() - 1` rows).
    logp: Vec<T>,
}

/// Everything needed to backpropagate one image with one or more sequences.
pub struct Tape<T> {
    vision: VisionTape<T>,
    lms: Vec<LmTape<T>>,
}

impl<T: Float> Model<T> {
    pub(crate) fn enc_dims(&self) -> Dims {
        let c = &self.config;
        Dims { d: c.enc_dim, heads: c.enc_heads, hidden: c.mlp_ratio * c.enc_dim }
    }

    pub(crate) fn lm_dims(&self) -> Dims {
        let c = &self.config;
        Dims { d: c.lm_dim, heads: c.lm_heads, hidden: c.mlp_ratio * c.lm_dim }
    }

    fn w(&self, i: usize) -> &[T] {
        &self.params.data[i]
    }

    /// Non-overlapping patches as rows, pixels scaled to [0, 1].
    pub fn patchify(&self, img: &GrayImage) -> Result<Vec<T>> {
        let c = &self.config;
        if img.width != c.image_size || img.height != c.image_size || c.channels != 1 {
            return Err(Error::Shape(format!(
                "image {}x{} does not match model input {}x{}",
                img.width, img.height, c.image_size, c.image_size
            )));
        }
        let (ps, g) = (c.patch_size, c.image_size / c.patch_size);
        let scale = T::lit(1.0 / 255.0);
        let mut out = Vec::with_capacity(c.image_size * c.image_size);
        for py in 0..g {
            for px in 0..g {
                for dy in 0..ps {
                    for dx in 0..ps {
                        out.push(T::from_u8(img.get(px * ps + dx, py * ps + dy)).unwrap() * scale);
                    }
                }
            }
        }
        Ok(out)
    }

    fn encoder_from_patches(&self, patches: &[T]) -> (Vec<T>, Vec<BlockCache<T>>, LnCache<T>) {
        let (l, c) = (&self.layout, &self.config);
        let np = c.num_patches();
        let pd = c.patch_size * c.patch_size * c.channels;
        let mut x = linear(patches, np, self.w(l.patch_w), self.w(l.patch_b), pd, c.enc_dim);
        let dims = self.enc_dims();
        let blocks = l.enc_blocks.iter().map(|ix| block_forward(&self.params, ix, &mut x, np, dims, np)).collect();
        let (mut feats, lnf) = layernorm(&x, np, c.enc_dim, self.w(l.enc_lnf_g), self.w(l.enc_lnf_b));
        if let Some(pe) = l.pos_embed {
            add_into(&mut feats, self.w(pe));
        }
        (feats, blocks, lnf)
    }

    /// Vision features, `num_patches x enc_dim`.
    pub fn encode_image(&self, img: &GrayImage) -> Result<Vec<T>> {
        Ok(self.encoder_from_patches(&self.patchify(img)?).0)
    }

    fn project_cached(&self, feats: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (l, c) = (&self.layout, &self.config);
        let rows = feats.len() / c.enc_dim;
        let h1 = linear(feats, rows, self.w(l.proj1_w), self.w(l.proj1_b), c.enc_dim, c.lm_dim);
        let a1 = gelu(&h1);
        let out = linear(&a1, rows, self.w(l.proj2_w), self.w(l.proj2_b), c.lm_dim, c.lm_dim);
        (out, h1, a1)
    }

    /// Maps features into the language model width.
    pub fn project(&self, feats: &[T]) -> Result<Vec<T>> {
        if !feats.len().is_multiple_of(self.config.enc_dim) {
            return Err(Error::Shape(format!("feature length {} not a multiple of {}", feats.len(), self.config.enc_dim)));
        }
        Ok(self.project_cached(feats).0)
    }

    /// Vision tokens for one image, `num_patches x lm_dim`.
    pub fn vision_tokens(&self, img: &GrayImage) -> Result<Vec<T>> {
        let feats = self.encode_image(img)?;
        Ok(self.project_cached(&feats).0)
    }

    fn vision_forward(&self, img: &GrayImage) -> Result<(Vec<T>, VisionTape<T>)> {
        let patches = self.patchify(img)?;
        let (feats, blocks, lnf) = self.encoder_from_patches(&patches);
        let (tokens, h1, a1) = self.project_cached(&feats);
        Ok((tokens, VisionTape { patches, blocks, lnf, feats, h1, a1 }))
    }

    fn vision_backward(&self, t: &VisionTape<T>, dtok: &[T], grads: &mut ParamStore<T>, trainable: &[Group]) {
        let (l, c) = (&self.layout, &self.config);
        let np = c.num_patches();
        let (e, d) = (c.enc_dim, c.lm_dim);
        let proj = trainable.contains(&Group::Projector);
        let enc = trainable.contains(&Group::Encoder);
        let pos = l.pos_embed.filter(|_| trainable.contains(&Group::PosEmbed));

        let mut g = Some(grads);
        let mut da1 = vec![T::zero(); np * d];
        let pg = if proj { pair(&mut g, l.proj2_w, l.proj2_b) } else { None };
        linear_backward(&t.a1, dtok, np, self.w(l.proj2_w), d, d, Some(&mut da1), pg);
        let mut dh1 = vec![T::zero(); np * d];
        gelu_backward(&t.h1, &da1, &mut dh1);
        let need_feats = enc || pos.is_some();
        let mut dfeats = vec![T::zero(); if need_feats { np * e } else { 0 }];
        let pg = if proj { pair(&mut g, l.proj1_w, l.proj1_b) } else { None };
        linear_backward(&t.feats, &dh1, np, self.w(l.proj1_w), e, d, need_feats.then_some(&mut dfeats[..]), pg);
        let grads = g.unwrap();
        if let Some(pe) = pos {
            add_into(&mut grads.data[pe], &dfeats);
        }
        if !enc {
            return;
        }
        let mut dx = vec![T::zero(); np * e];
        {
            let (dg, db) = two_mut(&mut grads.data, l.enc_lnf_g, l.enc_lnf_b);
            layernorm_backward(&dfeats, &t.lnf, np, e, self.w(l.enc_lnf_g), &mut dx, Some((dg, db)));
        }
        let dims = self.enc_dims();
        for (ix, bc) in l.enc_blocks.iter().zip(&t.blocks).rev() {
            block_backward(&self.params, ix, bc, &mut dx, np, dims, Some(grads));
        }
        let pd = c.patch_size * c.patch_size * c.channels;
        let (dw, db) = two_mut(&mut grads.data, l.patch_w, l.patch_b);
        linear_backward(&t.patches, &dx, np, self.w(l.patch_w), pd, e, None, Some((dw, db)));
    }

    /// Checks ids against vocabulary and length limits.
    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        let c = &self.config;
        if ids.first() != Some(&IMG) {
            return Err(Error::Shape("sequence must start with [IMG]".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        let len = c.num_patches() + ids.len() - 1;
        if len > c.max_seq_len {
            return Err(Error::SequenceOverflow { len, max: c.max_seq_len });
        }
        Ok(())
    }

    /// Input rows of the language model: vision tokens replace `[IMG]`;
    /// text tokens carry a learned position counted from the first text token.
    pub(crate) fn lm_input(&self, vision: &[T], ids: &[TokenId]) -> Vec<T> {
        let l = &self.layout;
        let d = self.config.lm_dim;
        let mut x = Vec::with_capacity(vision.len() + (ids.len() - 1) * d);
        x.extend_from_slice(vision);
        for (p, &id) in ids[1..].iter().enumerate() {
            let te = &self.w(l.wte)[id as usize * d..(id as usize + 1) * d];
            let pe = &self.w(l.wpe)[p * d..(p + 1) * d];
            x.extend(te.iter().zip(pe).map(|(&a, &b)| a + b));
        }
        x
    }

    fn lm_forward(&self, vision: &[T], ids: &[TokenId]) -> Result<LmTape<T>> {
        self.check_ids(ids)?;
        let (l, c) = (&self.layout, &self.config);
        let nv = c.num_patches();
        if vision.len() != nv * c.lm_dim {
            return Err(Error::Shape(format!("expected {} vision values, got {}", nv * c.lm_dim, vision.len())));
        }
        let rows = nv + ids.len() - 1;
        let mut x = self.lm_input(vision, ids);
        let dims = self.lm_dims();
        let blocks = l.lm_blocks.iter().map(|ix| block_forward(&self.params, ix, &mut x, rows, dims, nv)).collect();
        let (hidden, lnf) = layernorm(&x, rows, c.lm_dim, self.w(l.lm_lnf_g), self.w(l.lm_lnf_b));
        let nt = ids.len() - 1;
        let logits = self.head(&hidden, nv - 1, nt);
        let mut logp = Vec::with_capacity(nt * c.vocab_size);
        for r in 0..nt {
            logp.extend(log_softmax(&logits[r * c.vocab_size..(r + 1) * c.vocab_size]));
        }
        Ok(LmTape { rows, ids: ids.to_vec(), blocks, lnf, hidden, logp })
    }

    fn head(&self, hidden: &[T], r0: usize, n: usize) -> Vec<T> {
        let (l, c) = (&self.layout, &self.config);
        let d = c.lm_dim;
        linear(&hidden[r0 * d..(r0 + n) * d], n, self.w(l.head_w), self.w(l.head_b), d, c.vocab_size)
    }

    /// Logits at every text position: row `j` scores the token following `ids[j]`.
    pub fn forward(&self, vision: &[T], ids: &[TokenId]) -> Result<Logits<T>> {
        self.check_ids(ids)?;
        let (l, c) = (&self.layout, &self.config);
        let nv = c.num_patches();
        if vision.len() != nv * c.lm_dim {
            return Err(Error::Shape(format!("expected {} vision values, got {}", nv * c.lm_dim, vision.len())));
        }
        let rows = nv + ids.len() - 1;
        let mut x = self.lm_input(vision, ids);
        let dims = self.lm_dims();
        for ix in &l.lm_blocks {
            block_forward(&self.params, ix, &mut x, rows, dims, nv);
        }
        let (hidden, _) = layernorm(&x, rows, c.lm_dim, self.w(l.lm_lnf_g), self.w(l.lm_lnf_b));
        Ok(Logits { rows: ids.len(), vocab: c.vocab_size, data: self.head(&hidden, nv - 1, ids.len()) })
    }

    /// Sum of answer-token log-probabilities given the image and prompt.
    pub fn sequence_logprob(&self, img: &GrayImage, prompt: &[TokenId], answer: &[TokenId]) -> Result<T> {
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(answer);
        let (_, lps) = self.tape(img, &[&ids])?;
        Ok(lps[0][prompt.len() - 1..].iter().copied().sum())
    }

    /// Runs one image with several sequences, keeping what backward needs.
    /// Returns per-sequence log-probabilities of `ids[1..]`.
    pub fn tape(&self, img: &GrayImage, seqs: &[&[TokenId]]) -> Result<(Tape<T>, Vec<Vec<T>>)> {
        let (tokens, vision) = self.vision_forward(img)?;
        let v = self.config.vocab_size;
        let mut lms = Vec::with_capacity(seqs.len());
        let mut lps = Vec::with_capacity(seqs.len());
        for ids in seqs {
            let t = self.lm_forward(&tokens, ids)?;
            lps.push(ids[1..].iter().enumerate().map(|(r, &id)| t.logp[r * v + id as usize]).collect());
            lms.push(t);
        }
        Ok((Tape { vision, lms }, lps))
    }

    /// Backpropagates `dL/dlogprob` for every target position of every
    /// sequence on the tape. Only groups in `trainable` receive gradients.
    pub fn backward(&self, tape: &Tape<T>, dlogp: &[Vec<T>], grads: &mut ParamStore<T>, trainable: &[Group]) {
        let (l, c) = (&self.layout, &self.config);
        let (nv, d, v) = (c.num_patches(), c.lm_dim, c.vocab_size);
        let lm_train = trainable.contains(&Group::Lm);
        let need_vision = [Group::Encoder, Group::PosEmbed, Group::Projector].iter().any(|g| trainable.contains(g));
        let mut dvision = vec![T::zero(); nv * d];
        for (t, w) in tape.lms.iter().zip(dlogp) {
            let nt = t.ids.len() - 1;
            assert_eq!(w.len(), nt, "one weight per target position");
            // d logp[target] / d logits = onehot - softmax
            let mut dlogits = vec![T::zero(); nt * v];
            for r in 0..nt {
                if w[r] == T::zero() {
                    continue;
                }
                let row = &mut dlogits[r * v..(r + 1) * v];
                for (g, &lp) in row.iter_mut().zip(&t.logp[r * v..(r + 1) * v]) {
                    *g = -w[r] * lp.exp();
                }
                row[t.ids[r + 1] as usize] += w[r];
            }
            let mut dh = vec![T::zero(); t.rows * d];
            {
                let hg = if lm_train { Some(two_mut(&mut grads.data, l.head_w, l.head_b)) } else { None };
                let hid = &t.hidden[(nv - 1) * d..(nv - 1 + nt) * d];
                linear_backward(hid, &dlogits, nt, self.w(l.head_w), d, v, Some(&mut dh[(nv - 1) * d..(nv - 1 + nt) * d]), hg);
            }
            let mut dx = vec![T::zero(); t.rows * d];
            {
                let lg = if lm_train { Some(two_mut(&mut grads.data, l.lm_lnf_g, l.lm_lnf_b)) } else { None };
                layernorm_backward(&dh, &t.lnf, t.rows, d, self.w(l.lm_lnf_g), &mut dx, lg);
            }
            let dims = self.lm_dims();
            for (ix, bc) in l.lm_blocks.iter().zip(&t.blocks).rev() {
                let g = if lm_train { Some(&mut *grads) } else { None };
                block_backward(&self.params, ix, bc, &mut dx, t.rows, dims, g);
            }
            add_into(&mut dvision, &dx[..nv * d]);
            if lm_train {
                for (p, &id) in t.ids[1..].iter().enumerate() {
                    let src = &dx[(nv + p) * d..(nv + p + 1) * d];
                    add_into(&mut grads.data[l.wte][id as usize * d..(id as usize + 1) * d], src);
                    add_into(&mut grads.data[l.wpe][p * d..(p + 1) * d], src);
                }
            }
        }
        if need_vision {
            self.vision_backward(&tape.vision, &dvision, grads, trainable);
        }
    }
}

/// Mean of `-log softmax(row)[target]` over rows whose mask is set.
pub fn nll_loss<T: Float>(logits: &Logits<T>, targets: &[TokenId], mask: &[bool]) -> Result<T> {
    if targets.len() != logits.rows || mask.len() != logits.rows {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows,
            targets.len(),
            mask.len()
        )));
    }
    let mut total = T::zero();
    let mut n = 0usize;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total -= log_softmax(logits.row(r))[t as usize];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / T::from_usize(n).unwrap())
}
