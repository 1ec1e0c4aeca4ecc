//! Untrained single-head transformer standing in for the noise predictor
//! `ε_θ(z_t, t, c)`.
//!
//! A latent of shape H×W×C is cut into p×p patches per channel; each
//! (channel, patch) pair becomes one token, so the weights do not depend on
//! the channel count. Tokens are ordered channel-major, then patch row, then
//! patch column.
//!
//! Every block exposes its self-attention keys and values through an
//! [`AttentionTap`], which is how branches exchange K/V during blending.

use crate::attention::value_guidance;
use crate::error::{Error, Result};
use crate::field::{matmul, matmul_transposed, softmax_rows, Field, Rng};

pub const DEFAULT_PATCH_SIZE: usize = 4;
pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_BLOCKS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: Field,
    wk: Field,
    wv: Field,
    wo: Field,
    w_mlp: Field,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    seed: u64,
    patch_size: usize,
    embed_dim: usize,
    w_in: Field,
    blocks: Vec<Block>,
    w_head: Field,
}

/// Keys and values of one attention block, both `[tokens, embed_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub key: Field,
    pub value: Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapMode {
    Record,
    ReplaceKv,
    Passthrough,
}

/// Interception point for the self-attention of every block.
///
/// In `Record` mode each block's own K/V are appended to `recorded`. In
/// `ReplaceKv` mode block `b` uses `overrides[b]`; if `value_guidance_alpha`
/// is set the override value is treated as `V_per` and combined with the
/// block's own value as `V_per + α(V_per − V_own)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTap {
    pub mode: TapMode,
    pub recorded: Vec<KvPair>,
    pub overrides: Vec<KvPair>,
    pub value_guidance_alpha: Option<f32>,
}

impl AttentionTap {
    pub fn record() -> Self {
        Self {
            mode: TapMode::Record,
            recorded: Vec::new(),
            overrides: Vec::new(),
            value_guidance_alpha: None,
        }
    }

    pub fn passthrough() -> Self {
        Self {
            mode: TapMode::Passthrough,
            ..Self::record()
        }
    }

    pub fn replace(overrides: Vec<KvPair>, value_guidance_alpha: Option<f32>) -> Self {
        Self {
            mode: TapMode::ReplaceKv,
            recorded: Vec::new(),
            overrides,
            value_guidance_alpha,
        }
    }
}

/// Condition vector built from prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    tokens: Vec<String>,
    token_vectors: Vec<Field>,
    vector: Field,
}

impl PromptEmbedding {
    /// Splits on whitespace and lowercases. An empty prompt gives a zero vector.
    pub fn from_prompt(prompt: &str, embed_dim: usize) -> Self {
        let tokens: Vec<String> = prompt.split_whitespace().map(str::to_lowercase).collect();
        Self::from_tokens(&tokens, embed_dim)
    }

    pub fn from_tokens(tokens: &[String], embed_dim: usize) -> Self {
        let token_vectors: Vec<Field> = tokens
            .iter()
            .map(|tok| Rng::new(fnv1a(tok.as_bytes())).randn(&[embed_dim]))
            .collect();
        let mut sum = vec![0.0f64; embed_dim];
        for v in &token_vectors {
            for (s, &x) in sum.iter_mut().zip(v.data()) {
                *s += f64::from(x);
            }
        }
        let n = token_vectors.len().max(1) as f64;
        let vector = Field::new(&[embed_dim], sum.iter().map(|s| (s / n) as f32).collect())
            .expect("embed_dim is positive");
        Self {
            tokens: tokens.to_vec(),
            token_vectors,
            vector,
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token_vectors(&self) -> &[Field] {
        &self.token_vectors
    }

    pub fn vector(&self) -> &Field {
        &self.vector
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Standard transformer sinusoid: `[sin(p·ω_0), cos(p·ω_0), sin(p·ω_1), …]`
/// with `ω_i = 10000^(−2i/D)`.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = position / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin() as f32
            } else {
                angle.cos() as f32
            }
        })
        .collect()
}

/// Draws weights in this order: input projection, then per block
/// `W_q, W_k, W_v, W_o, W_mlp`, then the output head. Each is standard normal
/// scaled by `1/√fan_in`.
pub fn build_denoiser(
    seed: u64,
    patch_size: usize,
    embed_dim: usize,
    n_blocks: usize,
) -> Result<Denoiser> {
    if patch_size == 0 || embed_dim < 2 || embed_dim % 2 != 0 || n_blocks == 0 {
        return Err(Error::Parameter(format!(
            "need patch_size >= 1, even embed_dim >= 2, n_blocks >= 1; got {patch_size}, \
             {embed_dim}, {n_blocks}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut draw = |fan_in: usize, fan_out: usize| {
        let scale = 1.0 / (fan_in as f32).sqrt();
        rng.randn(&[fan_in, fan_out]).scale(scale)
    };
    let patch_len = patch_size * patch_size;
    let w_in = draw(patch_len, embed_dim);
    let blocks = (0..n_blocks)
        .map(|_| Block {
            wq: draw(embed_dim, embed_dim),
            wk: draw(embed_dim, embed_dim),
            wv: draw(embed_dim, embed_dim),
            wo: draw(embed_dim, embed_dim),
            w_mlp: draw(embed_dim, embed_dim),
        })
        .collect();
    let w_head = draw(embed_dim, patch_len);
    Ok(Denoiser {
        seed,
        patch_size,
        embed_dim,
        w_in,
        blocks,
        w_head,
    })
}

impl Default for Denoiser {
    fn default() -> Self {
        build_denoiser(0, DEFAULT_PATCH_SIZE, DEFAULT_EMBED_DIM, DEFAULT_BLOCKS)
            .expect("default dims are valid")
    }
}

impl Denoiser {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// All weight fields in draw order.
    pub fn weights(&self) -> Vec<&Field> {
        let mut out = vec![&self.w_in];
        for b in &self.blocks {
            out.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w_mlp]);
        }
        out.push(&self.w_head);
        out
    }

    pub fn embed(&self, prompt: &str) -> PromptEmbedding {
        PromptEmbedding::from_prompt(prompt, self.embed_dim)
    }

    /// Checks that `shape` is an H×W×C latent tiled by the patch size.
    pub fn check_latent_shape(&self, shape: &[usize]) -> Result<()> {
        let p = self.patch_size;
        match *shape {
            [h, w, c] if h % p == 0 && w % p == 0 && c > 0 => Ok(()),
            _ => Err(Error::Dimension(format!(
                "latent shape {shape:?} must be H×W×C with H, W divisible by {p}"
            ))),
        }
    }

    pub fn predict_noise(
        &self,
        z_t: &Field,
        t: usize,
        cond: &PromptEmbedding,
        tap: Option<&mut AttentionTap>,
    ) -> Result<Field> {
        self.check_latent_shape(z_t.shape())?;
        if t == 0 {
            return Err(Error::Parameter("timestep must be >= 1".into()));
        }
        if cond.vector().len() != self.embed_dim {
            return Err(Error::Dimension(format!(
                "condition has {} dims, denoiser expects {}",
                cond.vector().len(),
                self.embed_dim
            )));
        }
        let mut tap = tap;
        if let Some(tap) = tap.as_deref_mut() {
            match tap.mode {
                TapMode::Record => tap.recorded.clear(),
                TapMode::ReplaceKv if tap.overrides.len() != self.blocks.len() => {
                    return Err(Error::Dimension(format!(
                        "tap has {} overrides for {} blocks",
                        tap.overrides.len(),
                        self.blocks.len()
                    )));
                }
                _ => {}
            }
        }

        let shape = z_t.shape();
        let channels = shape[2];
        let patches = self.patchify(z_t);
        let mut hidden = matmul(&patches, &self.w_in)?;
        let tokens_per_channel = hidden.shape()[0] / channels;
        let time = sinusoidal_embedding(t as f64, self.embed_dim);
        let d = self.embed_dim;
        for (tok, row) in hidden.data_mut().chunks_exact_mut(d).enumerate() {
            let channel = sinusoidal_embedding((tok / tokens_per_channel) as f64, d);
            for j in 0..d {
                row[j] += time[j] + cond.vector().data()[j] + channel[j];
            }
        }

        let inv_sqrt_d = 1.0 / (d as f32).sqrt();
        for (b, block) in self.blocks.iter().enumerate() {
            let q = matmul(&hidden, &block.wq)?;
            let mut k = matmul(&hidden, &block.wk)?;
            let mut v = matmul(&hidden, &block.wv)?;
            if let Some(tap) = tap.as_deref_mut() {
                match tap.mode {
                    TapMode::Record => tap.recorded.push(KvPair {
                        key: k.clone(),
                        value: v.clone(),
                    }),
                    TapMode::ReplaceKv => {
                        let over = &tap.overrides[b];
                        if over.key.shape() != k.shape() || over.value.shape() != v.shape() {
                            return Err(Error::Dimension(format!(
                                "block {b}: override K/V {:?}/{:?} vs own {:?}",
                                over.key.shape(),
                                over.value.shape(),
                                k.shape()
                            )));
                        }
                        k = over.key.clone();
                        v = match tap.value_guidance_alpha {
                            Some(alpha) => value_guidance(&over.value, &v, alpha)?,
                            None => over.value.clone(),
                        };
                    }
                    TapMode::Passthrough => {}
                }
            }
            let scores = matmul_transposed(&q, &k)?.scale(inv_sqrt_d);
            let attended = matmul(&softmax_rows(&scores)?, &v)?;
            hidden = hidden.add(&matmul(&attended, &block.wo)?)?;
            let mlp = matmul(&hidden, &block.w_mlp)?.map(f32::tanh);
            hidden = hidden.add(&mlp)?;
        }

        let out = matmul(&hidden, &self.w_head)?;
        self.unpatchify(&out, shape)
    }

    fn patchify(&self, z: &Field) -> Field {
        let (h, w, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let p = self.patch_size;
        let (nh, nw) = (h / p, w / p);
        let mut data = Vec::with_capacity(z.len());
        for ch in 0..c {
            for pr in 0..nh {
                for pc in 0..nw {
                    for i in 0..p {
                        for j in 0..p {
                            data.push(z.data()[((pr * p + i) * w + pc * p + j) * c + ch]);
                        }
                    }
                }
            }
        }
        Field::new(&[c * nh * nw, p * p], data).expect("patch count matches")
    }

    fn unpatchify(&self, tokens: &Field, shape: &[usize]) -> Result<Field> {
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let p = self.patch_size;
        let (nh, nw) = (h / p, w / p);
        let mut data = vec![0.0; h * w * c];
        let mut src = tokens.data().iter();
        for ch in 0..c {
            for pr in 0..nh {
                for pc in 0..nw {
                    for i in 0..p {
                        for j in 0..p {
                            data[((pr * p + i) * w + pc * p + j) * c + ch] =
                                *src.next().expect("token count matches");
                        }
                    }
                }
            }
        }
        Field::new(shape, data)
    }
}

pub fn predict_noise(
    d: &Denoiser,
    z_t: &Field,
    t: usize,
    cond: &PromptEmbedding,
    tap: Option<&mut AttentionTap>,
) -> Result<Field> {
    d.predict_noise(z_t, t, cond, tap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(seed: u64, shape: &[usize]) -> Field {
        Rng::new(seed).randn(shape)
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_denoiser(1, 4, 32, 2).unwrap();
        let b = build_denoiser(1, 4, 32, 2).unwrap();
        assert_eq!(a, b);
        let c = build_denoiser(2, 4, 32, 2).unwrap();
        assert!(a
            .weights()
            .iter()
            .zip(c.weights())
            .any(|(x, y)| !x.bit_eq(y)));
    }

    #[test]
    fn build_rejects_bad_dims() {
        assert!(build_denoiser(0, 0, 32, 2).is_err());
        assert!(build_denoiser(0, 4, 31, 2).is_err());
        assert!(build_denoiser(0, 4, 32, 0).is_err());
    }

    #[test]
    fn weight_variance_near_inverse_fan_in() {
        let d = build_denoiser(9, 4, 32, 2).unwrap();
        let w = &d.weights()[1];
        assert_eq!(w.shape(), &[32, 32]);
        let n = w.len() as f64;
        let mean = w.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        let var = w
            .data()
            .iter()
            .map(|&x| (f64::from(x) - mean).powi(2))
            .sum::<f64>()
            / n;
        let target = 1.0 / 32.0;
        assert!((var - target).abs() / target < 0.2, "var {var}");
    }

    #[test]
    fn prompt_embedding_is_stable_per_token() {
        let a = PromptEmbedding::from_prompt("a red Cat", 32);
        let b = PromptEmbedding::from_prompt("A  red cat", 32);
        assert!(a.vector().bit_eq(b.vector()));
        assert!(a.token_vectors()[2].bit_eq(&b.token_vectors()[2]));
        let c = PromptEmbedding::from_prompt("a red dog", 32);
        assert!(!a.vector().bit_eq(c.vector()));
        assert_eq!(PromptEmbedding::from_prompt("", 32).vector(), &Field::zeros(&[32]));
    }

    #[test]
    fn output_shape_is_preserved() {
        let d = Denoiser::default();
        let cond = d.embed("shape");
        for h in [8, 16, 32] {
            for w in [8, 16, 32] {
                for c in [1, 3] {
                    let z = latent(3, &[h, w, c]);
                    let out = d.predict_noise(&z, 7, &cond, None).unwrap();
                    assert_eq!(out.shape(), &[h, w, c]);
                    assert!(out.is_finite());
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = Denoiser::default();
        let cond = d.embed("x");
        assert!(d.predict_noise(&Field::zeros(&[6, 8, 1]), 1, &cond, None).is_err());
        assert!(d.predict_noise(&Field::zeros(&[8, 8]), 1, &cond, None).is_err());
        assert!(d.predict_noise(&Field::zeros(&[8, 8, 1]), 0, &cond, None).is_err());
        let wrong = PromptEmbedding::from_prompt("x", 16);
        assert!(d.predict_noise(&Field::zeros(&[8, 8, 1]), 1, &wrong, None).is_err());
    }

    #[test]
    fn passthrough_tap_is_neutral() {
        let d = Denoiser::default();
        let cond = d.embed("neutral");
        let z = latent(4, &[16, 16, 1]);
        let plain = d.predict_noise(&z, 10, &cond, None).unwrap();
        let mut tap = AttentionTap::passthrough();
        let tapped = d.predict_noise(&z, 10, &cond, Some(&mut tap)).unwrap();
        assert!(plain.bit_eq(&tapped));
        let mut rec = AttentionTap::record();
        let recorded = d.predict_noise(&z, 10, &cond, Some(&mut rec)).unwrap();
        assert!(plain.bit_eq(&recorded));
        assert_eq!(rec.recorded.len(), 2);
    }

    #[test]
    fn self_replacement_is_identity() {
        let d = Denoiser::default();
        let cond = d.embed("identity");
        let z = latent(5, &[16, 8, 3]);
        let mut rec = AttentionTap::record();
        let plain = d.predict_noise(&z, 3, &cond, Some(&mut rec)).unwrap();
        let mut replace = AttentionTap::replace(rec.recorded.clone(), None);
        let again = d.predict_noise(&z, 3, &cond, Some(&mut replace)).unwrap();
        assert!(plain.bit_eq(&again));
        let mut guided = AttentionTap::replace(rec.recorded, Some(0.15));
        let again = d.predict_noise(&z, 3, &cond, Some(&mut guided)).unwrap();
        assert!(plain.bit_eq(&again));
    }

    #[test]
    fn foreign_keys_change_output() {
        let d = Denoiser::default();
        let cond = d.embed("swap");
        let mut rec = AttentionTap::record();
        d.predict_noise(&latent(6, &[16, 16, 1]), 3, &cond, Some(&mut rec)).unwrap();
        let z = latent(7, &[16, 16, 1]);
        let plain = d.predict_noise(&z, 3, &cond, None).unwrap();
        let mut replace = AttentionTap::replace(rec.recorded, None);
        let swapped = d.predict_noise(&z, 3, &cond, Some(&mut replace)).unwrap();
        assert!(plain.sub(&swapped).unwrap().norm() > 0.0);
    }

    #[test]
    fn override_shape_mismatch_is_rejected() {
        let d = Denoiser::default();
        let cond = d.embed("x");
        let mut rec = AttentionTap::record();
        d.predict_noise(&latent(1, &[8, 8, 1]), 3, &cond, Some(&mut rec)).unwrap();
        let mut replace = AttentionTap::replace(rec.recorded.clone(), None);
        let err = d.predict_noise(&latent(1, &[16, 16, 1]), 3, &cond, Some(&mut replace));
        assert!(matches!(err, Err(Error::Dimension(_))));
        let mut short = AttentionTap::replace(rec.recorded[..1].to_vec(), None);
        assert!(d
            .predict_noise(&latent(1, &[8, 8, 1]), 3, &cond, Some(&mut short))
            .is_err());
    }

    #[test]
    fn small_input_perturbation_stays_bounded() {
        let d = Denoiser::default();
        let cond = d.embed("lipschitz");
        let z = latent(8, &[16, 16, 1]);
        let base = d.predict_noise(&z, 25, &cond, None).unwrap();
        let mut bumped = z.clone();
        bumped.data_mut()[37] += 1e-3;
        let out = d.predict_noise(&bumped, 25, &cond, None).unwrap();
        let delta = out.sub(&base).unwrap().norm();
        assert!(delta < 1.0 && delta.is_finite(), "delta {delta}");
    }

    #[test]
    fn sinusoid_layout() {
        let e = sinusoidal_embedding(0.0, 4);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_embedding(1.0, 2);
        assert!((e[0] - 1f32.sin()).abs() < 1e-7);
    }
}
