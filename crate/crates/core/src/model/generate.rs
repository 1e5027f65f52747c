//! Greedy decoding with a per-layer key/value cache.

use rayon::prelude::*;

use super::float::Float;
use super::layers::{argmax, gelu, layernorm, linear};
use super::net::block_forward;
use super::Model;
use crate::codec::{TokenId, EOS};
use crate::error::Result;
use crate::synthdata::GrayImage;

struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Model<T> {
    /// Greedy continuation of `prompt` for each image. Each output stops
    /// after its first `[EOS]` (kept), after `max_new` tokens, or when the
    /// context is full. Samples never interact, so results do not depend on
    /// batch composition.
    pub fn generate(&self, images: &[&GrayImage], prompt: &[TokenId], max_new: usize) -> Result<Vec<Vec<TokenId>>> {
        self.check_ids(prompt)?;
        images.par_iter().map(|img| self.generate_one(img, prompt, max_new)).collect()
    }

    fn generate_one(&self, img: &GrayImage, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        let (l, c) = (&self.layout, &self.config);
        let (nv, d) = (c.num_patches(), c.lm_dim);
        let vision = self.vision_tokens(img)?;
        let rows = nv + prompt.len() - 1;
        let mut x = self.lm_input(&vision, prompt);
        let dims = self.lm_dims();
        let mut cache = KvCache { k: Vec::new(), v: Vec::new() };
        for ix in &l.lm_blocks {
            let bc = block_forward(&self.params, ix, &mut x, rows, dims, nv);
            let mut k = Vec::with_capacity((rows + max_new) * d);
            let mut v = Vec::with_capacity((rows + max_new) * d);
            for r in 0..rows {
                let q = &bc.qkv[r * 3 * d..(r + 1) * 3 * d];
                k.extend_from_slice(&q[d..2 * d]);
                v.extend_from_slice(&q[2 * d..]);
            }
            cache.k.push(k);
            cache.v.push(v);
        }
        let mut last = x[(rows - 1) * d..].to_vec();
        let mut out = Vec::new();
        let mut text_pos = prompt.len() - 1;
        while out.len() < max_new {
            let tok = argmax(&self.head_row(&last)) as TokenId;
            out.push(tok);
            if tok == EOS || out.len() == max_new || text_pos >= c.max_text_len() {
                break;
            }
            last = self.step(&mut cache, tok, text_pos);
            text_pos += 1;
        }
        Ok(out)
    }

    fn head_row(&self, x: &[T]) -> Vec<T> {
        let (l, c) = (&self.layout, &self.config);
        let (h, _) = layernorm(x, 1, c.lm_dim, &self.params.data[l.lm_lnf_g], &self.params.data[l.lm_lnf_b]);
        linear(&h, 1, &self.params.data[l.head_w], &self.params.data[l.head_b], c.lm_dim, c.vocab_size)
    }

    /// One new text row through every block, extending the cache.
    fn step(&self, cache: &mut KvCache<T>, tok: TokenId, text_pos: usize) -> Vec<T> {
        let (l, c) = (&self.layout, &self.config);
        let p = &self.params.data;
        let d = c.lm_dim;
        let dims = self.lm_dims();
        let dh = d / dims.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut x: Vec<T> = p[l.wte][tok as usize * d..(tok as usize + 1) * d]
            .iter()
            .zip(&p[l.wpe][text_pos * d..(text_pos + 1) * d])
            .map(|(&a, &b)| a + b)
            .collect();
        for (li, ix) in l.lm_blocks.iter().enumerate() {
            let (h1, _) = layernorm(&x, 1, d, &p[ix.ln1_g], &p[ix.ln1_b]);
            let qkv = linear(&h1, 1, &p[ix.qkv_w], &p[ix.qkv_b], d, 3 * d);
            cache.k[li].extend_from_slice(&qkv[d..2 * d]);
            cache.v[li].extend_from_slice(&qkv[2 * d..]);
            let (ks, vs) = (&cache.k[li], &cache.v[li]);
            let n = ks.len() / d;
            let mut att = vec![T::zero(); d];
            let mut s = vec![T::zero(); n];
            for h in 0..dims.heads {
                let q = &qkv[h * dh..(h + 1) * dh];
                let mut mx = T::neg_infinity();
                for (j, sj) in s.iter_mut().enumerate() {
                    let k = &ks[j * d + h * dh..j * d + (h + 1) * dh];
                    *sj = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    mx = mx.max(*sj);
                }
                let mut z = T::zero();
                for sj in s.iter_mut() {
                    *sj = (*sj - mx).exp();
                    z += *sj;
                }
                let o = &mut att[h * dh..(h + 1) * dh];
                for (j, &sj) in s.iter().enumerate() {
                    let w = sj / z;
                    for (a, &b) in o.iter_mut().zip(&vs[j * d + h * dh..j * d + (h + 1) * dh]) {
                        *a += w * b;
                    }
                }
            }
            let o = linear(&att, 1, &p[ix.proj_w], &p[ix.proj_b], d, d);
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
            let (h2, _) = layernorm(&x, 1, d, &p[ix.ln2_g], &p[ix.ln2_b]);
            let act = gelu(&linear(&h2, 1, &p[ix.fc_w], &p[ix.fc_b], d, dims.hidden));
            let o = linear(&act, 1, &p[ix.out_w], &p[ix.out_b], dims.hidden, d);
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
        }
        x
    }
}
