use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::codec::{self, TokenId, EOS, IMG};
use crate::synthdata::GrayImage;

fn random_image(size: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = GrayImage::filled(size, size, 0);
    img.data.iter_mut().for_each(|v| *v = rng.random());
    img
}

/// Every tensor filled with noise so no gradient path is trivially zero.
fn randomized<T: Float>(cfg: ModelConfig, seed: u64, scale: f64) -> Model<T> {
    let mut m = Model::<T>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (d, name) in m.params.data.iter_mut().zip(&m.params.names) {
        let base = if name.ends_with(".g") { 1.0 } else { 0.0 };
        d.iter_mut().for_each(|v| *v = T::lit(base + scale * rng.random_range(-1.0..1.0)));
    }
    m
}

fn micro_ids(m: &Model<f64>) -> Vec<TokenId> {
    let v = m.config.vocab();
    vec![IMG, v.x_token(3), v.y_token(7), v.x_token(20), v.y_token(7), v.x_token(20), EOS]
}

fn masked_nll(m: &Model<f64>, img: &GrayImage, ids: &[TokenId], mask: &[bool]) -> f64 {
    let (_, lps) = m.tape(img, &[ids]).unwrap();
    let n = mask[1..].iter().filter(|&&b| b).count() as f64;
    -lps[0].iter().zip(&mask[1..]).filter(|(_, &b)| b).map(|(l, _)| l).sum::<f64>() / n
}

/// Largest per-tensor relative error between analytic and central-difference gradients.
fn check_grads(
    m: &Model<f64>,
    analytic: &ParamStore<f64>,
    loss: &dyn Fn(&Model<f64>) -> f64,
    h: f64,
) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for t in 0..m.params.len() {
        let num: Vec<f64> = (0..m.params.data[t].len())
            .map(|i| {
                let mut p = m.clone();
                p.params.data[t][i] += h;
                let up = loss(&p);
                p.params.data[t][i] -= 2.0 * h;
                let down = loss(&p);
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff: f64 = num.iter().zip(&analytic.data[t]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt()
            + analytic.data[t].iter().map(|a| a * a).sum::<f64>().sqrt();
        out.push((m.params.names[t].clone(), if scale < 1e-12 { diff } else { diff / scale }));
    }
    out
}

#[test]
fn nll_gradients_match_central_differences() {
    let m = randomized::<f64>(ModelConfig::micro(), 1, 0.3);
    let img = random_image(32, 2);
    let ids = micro_ids(&m);
    let mask = [false, false, true, true, false, true, true];
    let n = mask[1..].iter().filter(|&&b| b).count() as f64;
    let (tape, _) = m.tape(&img, &[&ids]).unwrap();
    let w: Vec<f64> = mask[1..].iter().map(|&b| if b { -1.0 / n } else { 0.0 }).collect();
    let mut g = m.zero_grads();
    m.backward(&tape, &[w], &mut g, &Group::ALL);
    for (name, err) in check_grads(&m, &g, &|p| masked_nll(p, &img, &ids, &mask), 1e-5) {
        assert!(err < 1e-5, "{name}: relative error {err:e}");
    }
}

#[test]
fn frozen_groups_receive_no_gradient() {
    let m = randomized::<f64>(ModelConfig::micro(), 3, 0.3);
    let img = random_image(32, 4);
    let ids = micro_ids(&m);
    let (tape, lps) = m.tape(&img, &[&ids]).unwrap();
    let mut g = m.zero_grads();
    m.backward(&tape, &[vec![-1.0; lps[0].len()]], &mut g, &[Group::PosEmbed, Group::Projector, Group::Lm]);
    for ((d, grp), name) in g.data.iter().zip(&g.groups).zip(&g.names) {
        let nz = d.iter().any(|&v| v != 0.0);
        assert_eq!(nz, *grp != Group::Encoder, "{name}");
    }
}

#[test]
fn projector_maps_zero_to_zero_at_init() {
    let m = Model::<f64>::new(ModelConfig::micro()).unwrap();
    let out = m.project(&vec![0.0; m.config.num_patches() * m.config.enc_dim]).unwrap();
    assert_eq!(out.len(), m.config.num_patches() * m.config.lm_dim);
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn projector_jacobian_matches_central_differences() {
    let m = randomized::<f64>(ModelConfig::micro(), 5, 0.5);
    let (np, e, d) = (m.config.num_patches(), m.config.enc_dim, m.config.lm_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f: Vec<f64> = (0..np * e).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = m.project(&f).unwrap();
    // Row-wise independent: check d out[r, :] / d f[r, :] for the first row.
    for j in 0..e {
        let mut a = f.clone();
        let mut b = f.clone();
        a[j] += 1e-6;
        b[j] -= 1e-6;
        let (pa, pb) = (m.project(&a).unwrap(), m.project(&b).unwrap());
        for k in 0..d {
            let fd = (pa[k] - pb[k]) / 2e-6;
            // analytic: W2^T diag(gelu'(h)) W1^T
            let l = &m.layout;
            let h: Vec<f64> = (0..d)
                .map(|c| m.params.data[l.proj1_b][c] + (0..e).map(|i| f[i] * m.params.data[l.proj1_w][i * d + c]).sum::<f64>())
                .collect();
            let mut dg = vec![0.0; d];
            layers::gelu_backward(&h, &vec![1.0; d], &mut dg);
            let an: f64 = (0..d).map(|c| m.params.data[l.proj1_w][j * d + c] * dg[c] * m.params.data[l.proj2_w][c * d + k]).sum();
            assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-3), "{j},{k}: {fd} vs {an}");
        }
        assert_eq!(pa[d..], base[d..]);
    }
}

#[test]
fn logits_at_earlier_positions_ignore_later_tokens() {
    let m = randomized::<f32>(ModelConfig::micro(), 7, 0.3);
    let img = random_image(32, 8);
    let vis = m.vision_tokens(&img).unwrap();
    let v = m.config.vocab();
    let ids = vec![IMG, v.x_token(1), v.y_token(2), v.x_token(3), v.y_token(4)];
    let base = m.forward(&vis, &ids).unwrap();
    assert_eq!((base.rows, base.vocab), (ids.len(), m.config.vocab_size));
    for t in 1..ids.len() {
        let mut alt = ids.clone();
        alt[t] = v.x_token(30);
        let l = m.forward(&vis, &alt).unwrap();
        for r in 0..t {
            assert!(l.row(r).iter().zip(base.row(r)).all(|(a, b)| a.to_bits() == b.to_bits()), "t={t} r={r}");
        }
    }
}

#[test]
fn untrained_default_model_gives_finite_small_logits() {
    let m = Model::<f32>::new(ModelConfig::default()).unwrap();
    let img = random_image(128, 9);
    let vis = m.vision_tokens(&img).unwrap();
    let ids = codec::sft_prompt(&m.config.vocab()).ids;
    let l = m.forward(&vis, &ids).unwrap();
    assert!(l.data.iter().all(|v| v.is_finite() && v.abs() < 50.0));
    for r in 0..l.rows {
        let s: f32 = layers::log_softmax(l.row(r)).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn sequence_too_long_overflows() {
    let m = Model::<f32>::new(ModelConfig::micro()).unwrap();
    let vis = vec![0.0; m.config.num_patches() * m.config.lm_dim];
    let mut ids = vec![IMG];
    ids.extend(std::iter::repeat_n(EOS, m.config.max_text_len() + 1));
    assert!(matches!(m.forward(&vis, &ids), Err(Error::SequenceOverflow { .. })));
    ids.pop();
    assert!(m.forward(&vis, &ids).is_ok());
}

#[test]
fn nll_loss_reference_values() {
    let uniform = Logits { rows: 2, vocab: 5, data: vec![0.3f64; 10] };
    let l = nll_loss(&uniform, &[1, 4], &[true, true]).unwrap();
    assert!((l - (5f64).ln()).abs() < 1e-12);
    assert!(matches!(nll_loss(&uniform, &[1, 4], &[false, false]), Err(Error::EmptyLoss)));
    let mut sharp = vec![0.0f64; 5];
    sharp[2] = 60.0;
    let l = nll_loss(&Logits { rows: 1, vocab: 5, data: sharp }, &[2], &[true]).unwrap();
    assert!(l < 1e-20);

    // Scalar re-implementation on a 3-token example.
    let data = vec![0.5, -1.0, 2.0, 0.1, 0.0, 3.0, -2.0, 1.0, 1.5];
    let lg = Logits { rows: 3, vocab: 3, data: data.clone() };
    let targets = [2, 0, 1];
    let mut want = 0.0;
    for r in [0usize, 2] {
        let row = &data[r * 3..r * 3 + 3];
        let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
        want -= (row[targets[r] as usize].exp() / z).ln();
    }
    want /= 2.0;
    let got = nll_loss(&lg, &targets, &[true, false, true]).unwrap();
    assert!((got - want).abs() < 1e-6);
}

#[test]
fn sequence_logprob_agrees_with_nll_and_is_additive() {
    let m = randomized::<f64>(ModelConfig::micro(), 11, 0.3);
    let img = random_image(32, 12);
    let ids = micro_ids(&m);
    let (prompt, answer) = ids.split_at(3);
    let lp = m.sequence_logprob(&img, prompt, answer).unwrap();

    let vis = m.vision_tokens(&img).unwrap();
    let logits = m.forward(&vis, &ids).unwrap();
    let mut targets = ids[1..].to_vec();
    targets.push(0);
    let mask: Vec<bool> = (0..ids.len()).map(|j| j + 1 >= prompt.len() && j + 1 < ids.len()).collect();
    let nll = nll_loss(&logits, &targets, &mask).unwrap();
    assert!((lp + nll * answer.len() as f64).abs() < 1e-5);

    let (a, b) = answer.split_at(2);
    let mut pa = prompt.to_vec();
    pa.extend_from_slice(a);
    let split = m.sequence_logprob(&img, prompt, a).unwrap() + m.sequence_logprob(&img, &pa, b).unwrap();
    assert!((lp - split).abs() < 1e-10);
}

#[test]
fn length_one_answer_under_uniform_logits_is_minus_log_v() {
    let mut m = Model::<f64>::new(ModelConfig::micro()).unwrap();
    let l = m.layout.clone();
    m.params.data[l.head_w].iter_mut().for_each(|v| *v = 0.0);
    let img = random_image(32, 13);
    let lp = m.sequence_logprob(&img, &[IMG], &[EOS]).unwrap();
    assert!((lp + (m.config.vocab_size as f64).ln()).abs() < 1e-12);
}

fn naive_greedy(m: &Model<f64>, img: &GrayImage, prompt: &[TokenId], max_new: usize) -> Vec<TokenId> {
    let vis = m.vision_tokens(img).unwrap();
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new {
        let l = m.forward(&vis, &ids).unwrap();
        let t = layers::argmax(l.row(l.rows - 1)) as TokenId;
        out.push(t);
        ids.push(t);
        if t == EOS || m.check_ids(&[ids.as_slice(), &[EOS]].concat()).is_err() {
            break;
        }
    }
    out
}

#[test]
fn cached_generation_matches_full_recompute() {
    for seed in 0..4 {
        let m = randomized::<f64>(ModelConfig::micro(), 20 + seed, 0.4);
        let img = random_image(32, 30 + seed);
        let prompt = [IMG, m.config.vocab().x_token(5)];
        let got = m.generate(&[&img], &prompt, 12).unwrap();
        assert_eq!(got[0], naive_greedy(&m, &img, &prompt, 12), "seed {seed}");
        assert!(got[0].len() <= 12);
        if let Some(p) = got[0].iter().position(|&t| t == EOS) {
            assert_eq!(p, got[0].len() - 1);
        }
    }
}

#[test]
fn generation_is_batch_invariant_and_budgeted() {
    let m = randomized::<f32>(ModelConfig::micro(), 40, 0.4);
    let imgs: Vec<GrayImage> = (0..8).map(|s| random_image(32, 50 + s)).collect();
    let refs: Vec<&GrayImage> = imgs.iter().collect();
    let batch = m.generate(&refs, &[IMG], 4).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        assert_eq!(m.generate(&[img], &[IMG], 4).unwrap()[0], batch[i]);
        assert!(batch[i].len() <= 4);
    }
}

#[test]
fn greedy_argmax_ignores_positive_logit_scaling() {
    let row = [0.1f64, 2.5, -3.0, 2.4];
    for s in [0.01, 1.0, 7.5, 1e3] {
        let scaled: Vec<f64> = row.iter().map(|v| v * s).collect();
        assert_eq!(layers::argmax(&scaled), 1);
    }
}

fn permute_patches(img: &GrayImage, patch: usize, perm: &[usize]) -> GrayImage {
    let g = img.width / patch;
    let mut out = img.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (sx, sy, dx, dy) = ((src % g) * patch, (src / g) * patch, (dst % g) * patch, (dst / g) * patch);
        for y in 0..patch {
            for x in 0..patch {
                out.set(dx + x, dy + y, img.get(sx + x, sy + y));
            }
        }
    }
    out
}

#[test]
fn position_table_breaks_patch_permutation_equivariance() {
    let perm = [2usize, 0, 3, 1];
    let img = random_image(32, 60);
    let pimg = permute_patches(&img, 16, &perm);
    for use_pos in [false, true] {
        let cfg = ModelConfig { enc_layers: 0, use_pos_embed: use_pos, ..ModelConfig::micro() };
        let m = randomized::<f64>(cfg, 61, 0.5);
        let (a, b) = (m.encode_image(&img).unwrap(), m.encode_image(&pimg).unwrap());
        let e = m.config.enc_dim;
        let equivariant = perm.iter().enumerate().all(|(dst, &src)| {
            b[dst * e..(dst + 1) * e].iter().zip(&a[src * e..(src + 1) * e]).all(|(x, y)| (x - y).abs() < 1e-12)
        });
        assert_eq!(equivariant, !use_pos);
    }
}

#[test]
fn encode_rejects_wrong_image_size() {
    let m = Model::<f32>::new(ModelConfig::micro()).unwrap();
    assert!(matches!(m.encode_image(&GrayImage::filled(31, 32, 0)), Err(Error::Shape(_))));
}
