//! Semantic global reasoning block and the small network around it.
//!
//! Feature maps are flattened to `[W·H, channels]` with pixel index
//! `y·W + x`; grid coordinates exposed to positional codes are 1-based.
//!
//! Pipeline: stem (two 3×3 convolutions) → positional features `X'` →
//! sigmoid region masks `P` → unnormalised tokens `Pᵀ·(X'·W_d)` → centroid
//! codes → pre-norm transformer → back-projection `P·T` mapped to `C`
//! channels and added to `X` → 1×1 segmentation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sinusoid, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgrConfig {
    pub width: usize,
    pub height: usize,
    /// Feature channels `C`.
    pub channels: usize,
    /// Concept count `K`.
    pub concepts: usize,
    /// Active concepts per image `L`.
    pub max_active: usize,
    /// Token width `D`.
    pub token_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_classes: usize,
}

impl Default for SgrConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            channels: 16,
            concepts: 16,
            max_active: 8,
            token_dim: 16,
            num_layers: 2,
            num_heads: 4,
            num_classes: 4,
        }
    }
}

impl SgrConfig {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || self.num_classes == 0 {
            return bad("grid and class count must be positive".into());
        }
        if !(self.concepts > self.max_active && self.max_active > 0) {
            return bad(format!("need K > L > 0, got K={} L={}", self.concepts, self.max_active));
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return bad(format!("channel count must be even, got {}", self.channels));
        }
        if self.num_heads == 0 || self.token_dim == 0 || self.token_dim % (2 * self.num_heads) != 0 {
            return bad(format!(
                "token dim {} must be divisible by 2 x {} heads",
                self.token_dim, self.num_heads
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub query: T,
    pub key: T,
    pub value: T,
    pub attn_out: T,
    pub ff_norm_gain: T,
    pub ff_norm_bias: T,
    pub ff_in: T,
    pub ff_in_bias: T,
    pub ff_out: T,
    pub ff_out_bias: T,
}

/// All learnable tensors, generic so the same layout holds both stored
/// tensors and their tape handles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub stem1: T,
    pub stem1_bias: T,
    pub stem2: T,
    pub stem2_bias: T,
    /// `[2C, K]`; column `k` is the concept embedding `b_k`.
    pub concept_bank: T,
    /// `[2C, D]` dimensionality reduction of `X'`.
    pub reduce: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_gain: T,
    pub final_norm_bias: T,
    /// `[D, C]` map applied to back-projected tokens.
    pub output: T,
    pub head: T,
    pub head_bias: T,
}

pub type SgrParameters = Params<Tensor>;
pub type ParamVars = Params<Var>;

impl<T> LayerParams<T> {
    fn refs(&self) -> [&T; 12] {
        [
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.query,
            &self.key,
            &self.value,
            &self.attn_out,
            &self.ff_norm_gain,
            &self.ff_norm_bias,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.attn_out,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_bias,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            attn_norm_gain: it.next()?,
            attn_norm_bias: it.next()?,
            query: it.next()?,
            key: it.next()?,
            value: it.next()?,
            attn_out: it.next()?,
            ff_norm_gain: it.next()?,
            ff_norm_bias: it.next()?,
            ff_in: it.next()?,
            ff_in_bias: it.next()?,
            ff_out: it.next()?,
            ff_out_bias: it.next()?,
        })
    }
}

impl<T> Params<T> {
    /// Every tensor in a fixed order.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let head = [
            &self.stem1,
            &self.stem1_bias,
            &self.stem2,
            &self.stem2_bias,
            &self.concept_bank,
            &self.reduce,
        ];
        let tail = [
            &self.final_norm_gain,
            &self.final_norm_bias,
            &self.output,
            &self.head,
            &self.head_bias,
        ];
        head.into_iter()
            .chain(self.layers.iter().flat_map(|l| l.refs()))
            .chain(tail)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let head = [
            &mut self.stem1,
            &mut self.stem1_bias,
            &mut self.stem2,
            &mut self.stem2_bias,
            &mut self.concept_bank,
            &mut self.reduce,
        ];
        let tail = [
            &mut self.final_norm_gain,
            &mut self.final_norm_bias,
            &mut self.output,
            &mut self.head,
            &mut self.head_bias,
        ];
        head.into_iter()
            .chain(self.layers.iter_mut().flat_map(|l| l.refs_mut()))
            .chain(tail)
    }

    /// Rebuilds from the order produced by [`Params::iter`].
    pub fn from_ordered(items: Vec<T>, num_layers: usize) -> Option<Self> {
        let mut it = items.into_iter();
        let stem1 = it.next()?;
        let stem1_bias = it.next()?;
        let stem2 = it.next()?;
        let stem2_bias = it.next()?;
        let concept_bank = it.next()?;
        let reduce = it.next()?;
        let layers = (0..num_layers)
            .map(|_| LayerParams::from_iter(&mut it))
            .collect::<Option<Vec<_>>>()?;
        let out = Self {
            stem1,
            stem1_bias,
            stem2,
            stem2_bias,
            concept_bank,
            reduce,
            layers,
            final_norm_gain: it.next()?,
            final_norm_bias: it.next()?,
            output: it.next()?,
            head: it.next()?,
            head_bias: it.next()?,
        };
        it.next().is_none().then_some(out)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        let mapped: Vec<U> = self.iter().map(&mut f).collect();
        Params::from_ordered(mapped, self.layers.len()).expect("same layout")
    }
}

impl SgrParameters {
    /// Seeded Gaussian initialisation with fan-in scaling; norms start at
    /// identity and biases at zero.
    pub fn init(cfg: &SgrConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize, fan_in: usize| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(vec![rows, cols], data).expect("positive extents")
        };
        let (c, d, k) = (cfg.channels, cfg.token_dim, cfg.concepts);
        let stem1 = gauss(27, c, 27);
        let stem2 = gauss(9 * c, c, 9 * c);
        let concept_bank = gauss(2 * c, k, 2 * c);
        let reduce = gauss(2 * c, d, 2 * c);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                attn_norm_gain: Tensor::full(&[d], 1.0),
                attn_norm_bias: Tensor::zeros(&[d]),
                query: gauss(d, d, d),
                key: gauss(d, d, d),
                value: gauss(d, d, d),
                attn_out: gauss(d, d, d),
                ff_norm_gain: Tensor::full(&[d], 1.0),
                ff_norm_bias: Tensor::zeros(&[d]),
                ff_in: gauss(d, 4 * d, d),
                ff_in_bias: Tensor::zeros(&[4 * d]),
                ff_out: gauss(4 * d, d, 4 * d),
                ff_out_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let output = gauss(d, c, d * k);
        let head = gauss(c, cfg.num_classes, c);
        Ok(Params {
            stem1,
            stem1_bias: Tensor::zeros(&[c]),
            stem2,
            stem2_bias: Tensor::zeros(&[c]),
            concept_bank,
            reduce,
            layers,
            final_norm_gain: Tensor::full(&[d], 1.0),
            final_norm_bias: Tensor::zeros(&[d]),
            output,
            head,
            head_bias: Tensor::zeros(&[cfg.num_classes]),
        })
    }

    /// Puts every tensor on `tape`, as gradient leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        self.map(|t| {
            if trainable {
                tape.leaf(t.clone().with_grad(true))
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn num_values(&self) -> usize {
        self.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(Tensor::is_finite)
    }
}

/// Detached soft masks, `[W·H, K]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMasks {
    pub width: usize,
    pub height: usize,
    pub concepts: usize,
    pub values: Vec<f64>,
}

impl RegionMasks {
    pub fn new(width: usize, height: usize, concepts: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height * concepts {
            return Err(Error::Dimension {
                what: "region masks",
                expected: width * height * concepts,
                got: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            concepts,
            values,
        })
    }

    pub fn from_tape(tape: &Tape, masks: Var, width: usize, height: usize) -> Result<Self> {
        let t = tape.value(masks);
        let (_, k) = t.dims2().ok_or(Error::Dimension {
            what: "region mask rank",
            expected: 2,
            got: t.shape().len(),
        })?;
        Self::new(width, height, k, t.data().to_vec())
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Mask `k` over all pixels.
    pub fn mask(&self, k: usize) -> Vec<f64> {
        self.values.iter().skip(k).step_by(self.concepts).copied().collect()
    }
}

/// Sinusoidal codes of the 1-based column and row index of every pixel,
/// each `[W·H, C]`.
pub fn positional_grids(width: usize, height: usize, channels: usize) -> (Tensor, Tensor) {
    let n = width * height;
    let mut px = Vec::with_capacity(n * channels);
    let mut py = Vec::with_capacity(n * channels);
    for y in 0..height {
        for x in 0..width {
            px.extend((0..channels).map(|j| sinusoid((x + 1) as f64, j, channels)));
            py.extend((0..channels).map(|j| sinusoid((y + 1) as f64, j, channels)));
        }
    }
    (
        Tensor::new(vec![n, channels], px).expect("sized"),
        Tensor::new(vec![n, channels], py).expect("sized"),
    )
}

/// `[X + PE(x) | X + PE(y)]`, `[W·H, 2C]`.
pub fn add_positional_embedding(tape: &mut Tape, x: Var, width: usize, height: usize) -> Result<Var> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    if c == 0 || c % 2 != 0 {
        return Err(Error::Config(format!("positional embedding needs an even channel count, got {c}")));
    }
    let (px, py) = positional_grids(width, height, c);
    let px = tape.constant(px);
    let py = tape.constant(py);
    let with_x = tape.add(x, px)?;
    let with_y = tape.add(x, py)?;
    Ok(tape.concat_cols(&[with_x, with_y])?)
}

/// `sigmoid(X' · bank)`, `[W·H, K]`.
pub fn compute_region_masks(tape: &mut Tape, x_pos: Var, concept_bank: Var) -> Result<Var> {
    let logits = tape.conv1x1(x_pos, concept_bank)?;
    Ok(tape.sigmoid(logits)?)
}

/// Tokens `Pᵀ · (X' · W_d)`, `[K, D]`, without normalising by mask mass.
/// Also returns `Pᵀ`.
pub fn aggregate_tokens(tape: &mut Tape, masks: Var, x_pos: Var, reduce: Var) -> Result<(Var, Var)> {
    let reduced = tape.conv1x1(x_pos, reduce)?;
    let masks_t = tape.transpose(masks)?;
    let tokens = tape.matmul(masks_t, reduced)?;
    Ok((tokens, masks_t))
}

/// Mask-weighted centroids `[K, 2]` in 1-based `(x, y)` grid coordinates.
pub fn mask_centroids(tape: &mut Tape, masks_t: Var, width: usize, height: usize) -> Result<Var> {
    let n = width * height;
    let mut coords = Vec::with_capacity(2 * n);
    for y in 0..height {
        for x in 0..width {
            coords.push((x + 1) as f64);
            coords.push((y + 1) as f64);
        }
    }
    let coords = tape.constant(Tensor::new(vec![n, 2], coords)?);
    let ones = tape.constant(Tensor::full(&[n, 2], 1.0));
    let weighted = tape.matmul(masks_t, coords)?;
    // both columns hold the mask mass
    let mass = tape.matmul(masks_t, ones)?;
    if tape.value(mass).data().iter().any(|&m| m <= 0.0) {
        return Err(Error::ZeroMass);
    }
    let inv = tape.pow(mass, -1.0)?;
    Ok(tape.mul(weighted, inv)?)
}

/// `T' = T + PE(centroid)`; returns `(T', centroids)`.
pub fn encode_token_positions(
    tape: &mut Tape,
    tokens: Var,
    masks_t: Var,
    width: usize,
    height: usize,
) -> Result<(Var, Var)> {
    let d = tape.shape(tokens)[1];
    let centroids = mask_centroids(tape, masks_t, width, height)?;
    let codes = tape.sinusoid_encode(centroids, d)?;
    Ok((tape.add(tokens, codes)?, centroids))
}

fn silu(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.sigmoid(x)?;
    Ok(tape.mul(x, s)?)
}

fn head_columns(tape: &mut Tape, x_t: Var, head: usize, width: usize) -> Result<Var> {
    let rows: Vec<usize> = (head * width..(head + 1) * width).collect();
    let sel = tape.select_rows(x_t, &rows)?;
    Ok(tape.transpose(sel)?)
}

fn self_attention(tape: &mut Tape, x: Var, layer: &LayerParams<Var>, num_heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let dh = d / num_heads;
    let q = tape.matmul(x, layer.query)?;
    let k = tape.matmul(x, layer.key)?;
    let v = tape.matmul(x, layer.value)?;
    let (qt, kt, vt) = (tape.transpose(q)?, tape.transpose(k)?, tape.transpose(v)?);
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = head_columns(tape, qt, h, dh)?;
        let kh_t = tape.select_rows(kt, &(h * dh..(h + 1) * dh).collect::<Vec<_>>())?;
        let vh = head_columns(tape, vt, h, dh)?;
        let scores = tape.matmul(qh, kh_t)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    Ok(tape.matmul(cat, layer.attn_out)?)
}

/// Pre-norm encoder: per layer `x += MHA(LN(x))`, `x += FFN(LN(x))` with a
/// SiLU feed-forward of width `4D`, then a final normalisation.
pub fn transformer_encode(
    tape: &mut Tape,
    tokens: Var,
    layers: &[LayerParams<Var>],
    final_gain: Var,
    final_bias: Var,
    num_heads: usize,
) -> Result<Var> {
    let mut x = tokens;
    for layer in layers {
        let normed = tape.layer_norm(x, layer.attn_norm_gain, layer.attn_norm_bias, NORM_EPS)?;
        let attn = self_attention(tape, normed, layer, num_heads)?;
        x = tape.add(x, attn)?;
        let normed = tape.layer_norm(x, layer.ff_norm_gain, layer.ff_norm_bias, NORM_EPS)?;
        let hidden = tape.matmul(normed, layer.ff_in)?;
        let hidden = tape.add_row(hidden, layer.ff_in_bias)?;
        let hidden = silu(tape, hidden)?;
        let out = tape.matmul(hidden, layer.ff_out)?;
        let out = tape.add_row(out, layer.ff_out_bias)?;
        x = tape.add(x, out)?;
    }
    Ok(tape.layer_norm(x, final_gain, final_bias, NORM_EPS)?)
}

/// `X + (P · T_out) · W_out`.
pub fn back_project_fuse(tape: &mut Tape, refined: Var, masks: Var, x: Var, output: Var) -> Result<Var> {
    let per_pixel = tape.matmul(masks, refined)?;
    let mapped = tape.conv1x1(per_pixel, output)?;
    Ok(tape.add(x, mapped)?)
}

/// Handles to the intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub features: Var,
    pub positional: Var,
    pub masks: Var,
    pub masks_t: Var,
    pub tokens: Var,
    pub centroids: Var,
    pub refined: Var,
    pub fused: Var,
    pub logits: Var,
}

/// Stem: two SiLU 3×3 convolutions, `[W·H, 3] → [W·H, C]`.
pub fn stem(tape: &mut Tape, image: Var, p: &ParamVars, cfg: &SgrConfig) -> Result<Var> {
    let h = tape.conv3x3(image, p.stem1, cfg.width, cfg.height)?;
    let h = tape.add_row(h, p.stem1_bias)?;
    let h = silu(tape, h)?;
    let h = tape.conv3x3(h, p.stem2, cfg.width, cfg.height)?;
    let h = tape.add_row(h, p.stem2_bias)?;
    silu(tape, h)
}

pub fn sgr_forward(tape: &mut Tape, image: Var, p: &ParamVars, cfg: &SgrConfig) -> Result<ForwardOutput> {
    let n = cfg.pixels();
    if tape.shape(image) != [n, 3] {
        return Err(Error::Dimension {
            what: "image values",
            expected: n * 3,
            got: tape.value(image).len(),
        });
    }
    if !tape.value(image).is_finite() {
        return Err(Error::Config("image contains non-finite values".into()));
    }
    let features = stem(tape, image, p, cfg)?;
    let positional = add_positional_embedding(tape, features, cfg.width, cfg.height)?;
    let masks = compute_region_masks(tape, positional, p.concept_bank)?;
    let (tokens, masks_t) = aggregate_tokens(tape, masks, positional, p.reduce)?;
    let (tokens_pos, centroids) = encode_token_positions(tape, tokens, masks_t, cfg.width, cfg.height)?;
    let refined = transformer_encode(
        tape,
        tokens_pos,
        &p.layers,
        p.final_norm_gain,
        p.final_norm_bias,
        cfg.num_heads,
    )?;
    let fused = back_project_fuse(tape, refined, masks, features, p.output)?;
    let logits = tape.conv1x1(fused, p.head)?;
    let logits = tape.add_row(logits, p.head_bias)?;
    Ok(ForwardOutput {
        features,
        positional,
        masks,
        masks_t,
        tokens,
        centroids,
        refined,
        fused,
        logits,
    })
}

/// Image values as a `[W·H, 3]` constant.
pub fn image_constant(tape: &mut Tape, image: &[f64], cfg: &SgrConfig) -> Result<Var> {
    Ok(tape.constant(Tensor::new(vec![cfg.pixels(), 3], image.to_vec()).map_err(|_| {
        Error::Dimension {
            what: "image values",
            expected: cfg.pixels() * 3,
            got: image.len(),
        }
    })?))
}

/// Detached prediction for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub classes: Vec<u32>,
    pub masks: RegionMasks,
    pub centroids: Vec<(f64, f64)>,
}

pub fn predict(params: &SgrParameters, cfg: &SgrConfig, image: &[f64]) -> Result<Prediction> {
    let mut tape = Tape::new();
    let p = params.register(&mut tape, false);
    let img = image_constant(&mut tape, image, cfg)?;
    let out = sgr_forward(&mut tape, img, &p, cfg)?;
    let logits = tape.value(out.logits).data().to_vec();
    let classes = logits
        .chunks(cfg.num_classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as u32)
                .unwrap_or(0)
        })
        .collect();
    let centroids = tape.value(out.centroids).data().chunks(2).map(|c| (c[0], c[1])).collect();
    Ok(Prediction {
        logits,
        classes,
        masks: RegionMasks::from_tape(&tape, out.masks, cfg.width, cfg.height)?,
        centroids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small() -> SgrConfig {
        SgrConfig {
            width: 8,
            height: 8,
            channels: 4,
            concepts: 6,
            max_active: 4,
            token_dim: 4,
            num_layers: 2,
            num_heads: 2,
            num_classes: 4,
        }
    }

    #[test]
    fn config_validation() {
        assert!(SgrConfig::default().validate().is_ok());
        let paper = SgrConfig {
            concepts: 256,
            max_active: 64,
            ..SgrConfig::default()
        };
        assert!(paper.validate().is_ok());
        for bad in [
            SgrConfig { channels: 5, ..small() },
            SgrConfig { max_active: 6, ..small() },
            SgrConfig { max_active: 0, ..small() },
            SgrConfig { token_dim: 6, ..small() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn params_round_trip_through_order() {
        let p = SgrParameters::init(&small(), 1).unwrap();
        let flat: Vec<Tensor> = p.iter().cloned().collect();
        assert_eq!(flat.len(), 6 + 12 * 2 + 5);
        let back = SgrParameters::from_ordered(flat, 2).unwrap();
        assert_eq!(back, p);
        let json = serde_json::to_string(&p).unwrap();
        let parsed: SgrParameters = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, p);
    }

    #[test]
    fn positional_embedding_of_zero_features() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[6, 4]));
        let xp = add_positional_embedding(&mut tape, x, 3, 2).unwrap();
        let v = tape.value(xp).data();
        assert_eq!(tape.shape(xp), &[6, 8]);
        // pixel (x=1, y=1)
        let expect = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for j in 0..4 {
            assert_relative_eq!(v[j], expect[j]);
            assert_relative_eq!(v[4 + j], expect[j]);
        }
        // same column, different rows: x-half equal, y-half differs
        let (r0, r1) = (&v[0..8], &v[3 * 8..4 * 8]);
        assert_eq!(r0[..4], r1[..4]);
        assert_ne!(r0[4..], r1[4..]);
    }

    #[test]
    fn odd_channels_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        assert!(add_positional_embedding(&mut tape, x, 2, 2).is_err());
    }

    #[test]
    fn zero_concept_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 2], vec![1.0, -2.0, 0.5, 3.0, 7.0, 1.0, 0.0, 0.0]).unwrap());
        let bank = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, -1.0]).unwrap());
        let p = compute_region_masks(&mut tape, x, bank).unwrap();
        let m = RegionMasks::from_tape(&tape, p, 2, 2).unwrap();
        assert!(m.mask(0).iter().all(|&v| v == 0.5));
        let second = m.mask(1);
        let by_hand = [3.0f64, -2.5, 6.0, 0.0].map(|z| 1.0 / (1.0 + (-z).exp()));
        for (a, b) in second.iter().zip(by_hand) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn saturated_mask_approaches_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1e3, 1e3]).unwrap());
        let bank = tape.constant(Tensor::new(vec![2, 1], vec![0.1, 0.1]).unwrap());
        let p = compute_region_masks(&mut tape, x, bank).unwrap();
        assert!(tape.value(p).item() > 1.0 - 1e-12);
    }

    #[test]
    fn one_hot_mask_picks_a_pixel() {
        let mut tape = Tape::new();
        let xpos = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let masks = tape.constant(Tensor::new(vec![3, 1], vec![0.0, 1.0, 0.0]).unwrap());
        let (t, _) = aggregate_tokens(&mut tape, masks, xpos, eye).unwrap();
        assert_eq!(tape.value(t).data(), &[3.0, 4.0]);
        let half = tape.constant(Tensor::full(&[3, 1], 0.5));
        let ones = tape.constant(Tensor::full(&[3, 2], 1.0));
        let (t, _) = aggregate_tokens(&mut tape, half, ones, eye).unwrap();
        assert_eq!(tape.value(t).data(), &[1.5, 1.5]);
    }

    #[test]
    fn centroid_cases() {
        let (w, h) = (4, 6);
        let mut tape = Tape::new();
        let mut vals = vec![0.0; w * h * 3];
        for v in vals.iter_mut().step_by(3) {
            *v = 0.7;
        }
        // region 1: point mass at 1-based (3, 5)
        vals[((5 - 1) * w + (3 - 1)) * 3 + 1] = 1.0;
        // region 2: 0.2 at (1,1), 0.6 at (4,1)
        vals[2] = 0.2;
        vals[3 * 3 + 2] = 0.6;
        let m = tape.constant(Tensor::new(vec![w * h, 3], vals).unwrap());
        let mt = tape.transpose(m).unwrap();
        let c = mask_centroids(&mut tape, mt, w, h).unwrap();
        let c = tape.value(c).data();
        assert_relative_eq!(c[0], 2.5, epsilon = 1e-12);
        assert_relative_eq!(c[1], 3.5, epsilon = 1e-12);
        assert_relative_eq!(c[2], 3.0);
        assert_relative_eq!(c[3], 5.0);
        assert_relative_eq!(c[4], 3.25, epsilon = 1e-12);
        assert_relative_eq!(c[5], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_tokens_leave_features_unchanged() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let t = tape.constant(Tensor::zeros(&[3, 2]));
        let p = tape.constant(Tensor::full(&[2, 3], 0.3));
        let w = tape.constant(Tensor::full(&[2, 2], 0.7));
        let y = back_project_fuse(&mut tape, t, p, x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn one_hot_back_projection() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let t = tape.constant(Tensor::new(vec![2, 2], vec![9.0, 9.0, 2.0, 3.0]).unwrap());
        let p = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 2.0]).unwrap());
        let y = back_project_fuse(&mut tape, t, p, x, w).unwrap();
        // [2, 3]·W = [5, 6]
        assert_eq!(tape.value(y).data(), &[6.0, 7.0]);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = small();
        let params = SgrParameters::init(&cfg, 3).unwrap();
        let image: Vec<f64> = (0..cfg.pixels() * 3).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let a = predict(&params, &cfg, &image).unwrap();
        let b = predict(&params, &cfg, &image).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logits.len(), cfg.pixels() * cfg.num_classes);
        assert!(a.masks.values.iter().all(|&v| v > 0.0 && v < 1.0));
        for &(cx, cy) in &a.centroids {
            assert!((1.0..=8.0).contains(&cx) && (1.0..=8.0).contains(&cy));
        }
        assert!(predict(&params, &cfg, &image[1..]).is_err());
    }
}
