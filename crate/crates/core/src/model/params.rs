//! Named parameter tensors, their grouping for freezing, and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::float::Float;
use super::ModelConfig;

/// Freezing unit. Every tensor belongs to exactly one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    PosEmbed,
    Projector,
    Lm,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::PosEmbed, Group::Projector, Group::Lm];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Flat list of tensors addressed by index; the [`Layout`] gives names to indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub groups: Vec<Group>,
    pub shapes: Vec<Vec<usize>>,
    pub data: Vec<Vec<T>>,
}

impl<T: Float> ParamStore<T> {
    fn empty() -> Self {
        Self { names: Vec::new(), groups: Vec::new(), shapes: Vec::new(), data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            groups: self.groups.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|d| vec![T::zero(); d.len()]).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for d in &mut self.data {
            for x in d.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().flat_map(|d| d.iter()).fold(T::zero(), |acc, &x| acc + x * x)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|d| d.iter().all(|x| x.is_finite()))
    }

    /// Conversion between precisions, used by gradient checks and checkpoints.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            groups: self.groups.clone(),
            shapes: self.shapes.clone(),
            data: self
                .data
                .iter()
                .map(|d| d.iter().map(|&x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap()).collect())
                .collect(),
        }
    }
}

/// Tensor indices of one pre-norm transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

/// Tensor indices of the whole network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub patch_w: usize,
    pub patch_b: usize,
    pub enc_blocks: Vec<BlockIx>,
    pub enc_lnf_g: usize,
    pub enc_lnf_b: usize,
    pub pos_embed: Option<usize>,
    pub proj1_w: usize,
    pub proj1_b: usize,
    pub proj2_w: usize,
    pub proj2_b: usize,
    pub wte: usize,
    pub wpe: usize,
    pub lm_blocks: Vec<BlockIx>,
    pub lm_lnf_g: usize,
    pub lm_lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

struct Builder<T> {
    store: ParamStore<T>,
    inits: Vec<Init>,
}

impl<T: Float> Builder<T> {
    fn add(&mut self, name: String, group: Group, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        self.store.names.push(name);
        self.store.groups.push(group);
        self.store.shapes.push(shape);
        self.store.data.push(vec![T::zero(); n]);
        self.inits.push(init);
        self.store.data.len() - 1
    }

    fn block(&mut self, prefix: &str, group: Group, d: usize, hidden: usize) -> BlockIx {
        let mut a = |s: &str, shape: Vec<usize>, init| self.add(format!("{prefix}.{s}"), group, shape, init);
        BlockIx {
            ln1_g: a("ln1.g", vec![d], Init::Ones),
            ln1_b: a("ln1.b", vec![d], Init::Zeros),
            qkv_w: a("attn.qkv.w", vec![d, 3 * d], Init::Normal),
            qkv_b: a("attn.qkv.b", vec![3 * d], Init::Zeros),
            // Residual output projections start at zero so each block is the
            // identity at initialization.
            proj_w: a("attn.proj.w", vec![d, d], Init::Zeros),
            proj_b: a("attn.proj.b", vec![d], Init::Zeros),
            ln2_g: a("ln2.g", vec![d], Init::Ones),
            ln2_b: a("ln2.b", vec![d], Init::Zeros),
            fc_w: a("mlp.fc.w", vec![d, hidden], Init::Normal),
            fc_b: a("mlp.fc.b", vec![hidden], Init::Zeros),
            out_w: a("mlp.out.w", vec![hidden, d], Init::Zeros),
            out_b: a("mlp.out.b", vec![d], Init::Zeros),
        }
    }
}

/// Builds the layout and freshly initialized parameters for `cfg`.
pub fn build<T: Float>(cfg: &ModelConfig) -> (Layout, ParamStore<T>) {
    let mut b = Builder { store: ParamStore::empty(), inits: Vec::new() };
    let (e, d) = (cfg.enc_dim, cfg.lm_dim);
    let pd = cfg.patch_size * cfg.patch_size * cfg.channels;
    let np = cfg.num_patches();

    let patch_w = b.add("enc.patch.w".into(), Group::Encoder, vec![pd, e], Init::Normal);
    let patch_b = b.add("enc.patch.b".into(), Group::Encoder, vec![e], Init::Zeros);
    let enc_blocks =
        (0..cfg.enc_layers).map(|i| b.block(&format!("enc.h{i}"), Group::Encoder, e, cfg.mlp_ratio * e)).collect();
    let enc_lnf_g = b.add("enc.ln_f.g".into(), Group::Encoder, vec![e], Init::Ones);
    let enc_lnf_b = b.add("enc.ln_f.b".into(), Group::Encoder, vec![e], Init::Zeros);
    let pos_embed = cfg.use_pos_embed.then(|| b.add("pos_embed".into(), Group::PosEmbed, vec![np, e], Init::Zeros));
    let proj1_w = b.add("proj.fc1.w".into(), Group::Projector, vec![e, d], Init::Normal);
    let proj1_b = b.add("proj.fc1.b".into(), Group::Projector, vec![d], Init::Zeros);
    let proj2_w = b.add("proj.fc2.w".into(), Group::Projector, vec![d, d], Init::Normal);
    let proj2_b = b.add("proj.fc2.b".into(), Group::Projector, vec![d], Init::Zeros);
    let wte = b.add("lm.wte".into(), Group::Lm, vec![cfg.vocab_size, d], Init::Normal);
    let wpe = b.add("lm.wpe".into(), Group::Lm, vec![cfg.max_text_len(), d], Init::Normal);
    let lm_blocks =
        (0..cfg.lm_layers).map(|i| b.block(&format!("lm.h{i}"), Group::Lm, d, cfg.mlp_ratio * d)).collect();
    let lm_lnf_g = b.add("lm.ln_f.g".into(), Group::Lm, vec![d], Init::Ones);
    let lm_lnf_b = b.add("lm.ln_f.b".into(), Group::Lm, vec![d], Init::Zeros);
    let head_w = b.add("lm.head.w".into(), Group::Lm, vec![d, cfg.vocab_size], Init::Normal);
    let head_b = b.add("lm.head.b".into(), Group::Lm, vec![cfg.vocab_size], Init::Zeros);

    let layout = Layout {
        patch_w,
        patch_b,
        enc_blocks,
        enc_lnf_g,
        enc_lnf_b,
        pos_embed,
        proj1_w,
        proj1_b,
        proj2_w,
        proj2_b,
        wte,
        wpe,
        lm_blocks,
        lm_lnf_g,
        lm_lnf_b,
        head_w,
        head_b,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let normal = Normal::new(0.0, cfg.init_std).expect("positive std");
    for (data, init) in b.store.data.iter_mut().zip(&b.inits) {
        match init {
            Init::Zeros => {}
            Init::Ones => data.iter_mut().for_each(|x| *x = T::one()),
            Init::Normal => {
                for x in data.iter_mut() {
                    // Truncated at two standard deviations.
                    let v = loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * cfg.init_std {
                            break v;
                        }
                    };
                    *x = T::lit(v);
                }
            }
        }
    }
    (layout, b.store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_groups_cover_everything() {
        let cfg = ModelConfig::default();
        let (layout, p) = build::<f32>(&cfg);
        let mut names = p.names.clone();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), p.len());
        for g in Group::ALL {
            assert!(p.groups.contains(&g), "{g:?}");
        }
        assert_eq!(p.shapes[layout.pos_embed.unwrap()], vec![cfg.num_patches(), cfg.enc_dim]);
        assert_eq!(p.groups[layout.pos_embed.unwrap()], Group::PosEmbed);
    }

    #[test]
    fn pos_embed_is_absent_when_disabled() {
        let cfg = ModelConfig { use_pos_embed: false, ..ModelConfig::default() };
        let (layout, p) = build::<f32>(&cfg);
        assert!(layout.pos_embed.is_none());
        assert!(!p.groups.contains(&Group::PosEmbed));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::default();
        let (_, a) = build::<f32>(&cfg);
        let (_, b) = build::<f32>(&cfg);
        assert_eq!(a, b);
        let bound = 2.0 * cfg.init_std as f32 + 1e-7;
        assert!(a.data.iter().flatten().all(|x| x.abs() <= bound.max(1.0)));
        let c = build::<f32>(&ModelConfig { init_seed: 1, ..cfg }).1;
        assert_ne!(a, c);
    }
}
