//! Toy image and text encoders sharing one embedding space.
//!
//! The image tower patchifies the raster, linearly embeds each patch, mean
//! pools, and runs a two-layer MLP; the text tower looks up token embeddings,
//! mean pools, and runs a two-layer MLP. Each tower ends in a linear
//! projection into the shared space. The four weight groups (two towers, two
//! projections) can be frozen independently, which the optimizer honors.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::RasterImage;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("image is {got_w}x{got_h}, config wants {want}x{want}")]
    WrongImageSize { want: usize, got_w: usize, got_h: usize },
    #[error("caption is empty")]
    EmptyCaption,
    #[error("token list is empty")]
    EmptyTokenList,
    #[error("vocabulary has no {UNK_TOKEN} entry")]
    MissingUnk,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared embedding dimension.
    pub embed_dim: usize,
    pub patch_size: usize,
    /// Square image edge in pixels.
    pub image_size: usize,
    pub vocab_size: usize,
    /// Token cap per caption (hard ceiling 96).
    pub max_tokens: usize,
    /// Width of tower MLPs and token embeddings.
    pub hidden_dim: usize,
    pub seed: u64,
}

/// Hard cap on caption length in tokens.
pub const MAX_TOKENS_CAP: usize = 96;

impl Default for ModelConfig {
    /// Desk-scale defaults, trainable on one CPU core in minutes.
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            patch_size: 8,
            image_size: 32,
            vocab_size: 8192,
            max_tokens: 32,
            hidden_dim: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The full-scale arrangement: 512-d shared space, 96-token captions.
    pub fn paper_scale() -> Self {
        ModelConfig {
            embed_dim: 512,
            patch_size: 32,
            image_size: 224,
            vocab_size: 32_000,
            max_tokens: 96,
            hidden_dim: 512,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.max_tokens == 0 || self.max_tokens > MAX_TOKENS_CAP {
            return Err(EncoderError::InvalidConfig(format!(
                "max_tokens {} outside 1..={MAX_TOKENS_CAP}",
                self.max_tokens
            )));
        }
        if self.embed_dim < 2 {
            return Err(EncoderError::InvalidConfig(format!(
                "embed_dim {} < 2",
                self.embed_dim
            )));
        }
        if self.hidden_dim == 0 || self.vocab_size == 0 {
            return Err(EncoderError::InvalidConfig(
                "hidden_dim and vocab_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn patches_per_image(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

// ── Vocabulary and tokenization ─────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Ids are positions in `tokens`; the list must contain [`UNK_TOKEN`].
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, EncoderError> {
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if !index.contains_key(UNK_TOKEN) {
            return Err(EncoderError::MissingUnk);
        }
        Ok(Vocab { tokens, index })
    }

    /// Top-`max_size − 1` corpus tokens by frequency (ties alphabetical),
    /// with [`UNK_TOKEN`] at id 0.
    pub fn build<'a>(captions: impl Iterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for caption in captions {
            for token in word_tokens(&caption.to_lowercase()) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size.saturating_sub(1))
                .map(|(t, _)| t),
        );
        Vocab::from_tokens(tokens).expect("unk inserted above")
    }

    pub fn unk_id(&self) -> u32 {
        self.index[UNK_TOKEN]
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or_else(|| self.unk_id())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Alphanumeric runs of the input, in order, case preserved.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCaption {
    pub ids: Vec<u32>,
    pub text: String,
}

/// Lowercase, split on whitespace/punctuation, map through the vocabulary
/// (unknown → UNK), truncate to a prefix of `max_tokens` ids.
pub fn tokenize(caption: &str, vocab: &Vocab, max_tokens: usize) -> Result<TokenizedCaption, EncoderError> {
    let lowered = caption.to_lowercase();
    let words = word_tokens(&lowered);
    if words.is_empty() {
        return Err(EncoderError::EmptyCaption);
    }
    let ids = words.iter().take(max_tokens).map(|w| vocab.id(w)).collect();
    Ok(TokenizedCaption {
        ids,
        text: caption.to_string(),
    })
}

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    ImageTower,
    TextTower,
    ImageProj,
    TextProj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FreezeFlags {
    pub image_tower: bool,
    pub text_tower: bool,
    pub image_proj: bool,
    pub text_proj: bool,
}

impl FreezeFlags {
    pub fn none() -> Self {
        FreezeFlags::default()
    }

    pub fn all() -> Self {
        FreezeFlags {
            image_tower: true,
            text_tower: true,
            image_proj: true,
            text_proj: true,
        }
    }

    /// The warm-up arrangement: towers frozen, projections learning.
    pub fn towers_only() -> Self {
        FreezeFlags {
            image_tower: true,
            text_tower: true,
            image_proj: false,
            text_proj: false,
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::ImageTower => self.image_tower,
            ParamGroup::TextTower => self.text_tower,
            ParamGroup::ImageProj => self.image_proj,
            ParamGroup::TextProj => self.text_proj,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: &'static str,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Names, groups, and shapes of every weight array, in serialization order.
fn array_specs(cfg: &ModelConfig) -> Vec<(&'static str, ParamGroup, usize, usize)> {
    use ParamGroup::*;
    let h = cfg.hidden_dim;
    vec![
        ("image.patch_embed", ImageTower, cfg.patch_dim(), h),
        ("image.mlp_w1", ImageTower, h, h),
        ("image.mlp_b1", ImageTower, 1, h),
        ("image.mlp_w2", ImageTower, h, h),
        ("image.mlp_b2", ImageTower, 1, h),
        ("text.embed", TextTower, cfg.vocab_size, h),
        ("text.mlp_w1", TextTower, h, h),
        ("text.mlp_b1", TextTower, 1, h),
        ("text.mlp_w2", TextTower, h, h),
        ("text.mlp_b2", TextTower, 1, h),
        ("proj.image", ImageProj, h, cfg.embed_dim),
        ("proj.text", TextProj, h, cfg.embed_dim),
    ]
}

// indices into the array list, fixed by array_specs order
const A_PATCH_EMBED: usize = 0;
const A_IMG_W1: usize = 1;
const A_IMG_B1: usize = 2;
const A_IMG_W2: usize = 3;
const A_IMG_B2: usize = 4;
const A_TOK_EMBED: usize = 5;
const A_TXT_W1: usize = 6;
const A_TXT_B1: usize = 7;
const A_TXT_W2: usize = 8;
const A_TXT_B2: usize = 9;
const A_PROJ_IMG: usize = 10;
const A_PROJ_TXT: usize = 11;

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    arrays: Vec<NamedArray>,
    pub freeze: FreezeFlags,
}

impl ModelParams {
    /// Seeded initialization: weights uniform(−a, a) with
    /// a = sqrt(6 / (fan_in + fan_out)); biases zero.
    pub fn init(config: &ModelConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let arrays = array_specs(config)
            .into_iter()
            .map(|(name, group, rows, cols)| {
                let data = if name.ends_with("_b1") || name.ends_with("_b2") {
                    vec![0.0; rows * cols]
                } else {
                    let a = (6.0 / (rows + cols) as f64).sqrt();
                    (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect()
                };
                NamedArray {
                    name,
                    group,
                    tensor: Tensor::matrix(rows, cols, data).expect("spec shapes are consistent"),
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            arrays,
            freeze: FreezeFlags::none(),
        })
    }

    /// Rebuild parameters from stored (name, group, shape, data) entries,
    /// validated positionally against the canonical array layout.
    pub fn from_weight_data(
        config: ModelConfig,
        entries: Vec<(String, ParamGroup, Vec<usize>, Vec<f64>)>,
        freeze: FreezeFlags,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let specs = array_specs(&config);
        if entries.len() != specs.len() {
            return Err(EncoderError::InvalidConfig(format!(
                "expected {} weight arrays, got {}",
                specs.len(),
                entries.len()
            )));
        }
        let mut arrays = Vec::with_capacity(specs.len());
        for ((ename, egroup, eshape, edata), (name, group, rows, cols)) in
            entries.into_iter().zip(specs)
        {
            if ename != name || egroup != group || eshape != [rows, cols] {
                return Err(EncoderError::InvalidConfig(format!(
                    "array {ename} {eshape:?} does not match expected {name} [{rows}, {cols}]"
                )));
            }
            arrays.push(NamedArray {
                name,
                group,
                tensor: Tensor::new(eshape, edata)?,
            });
        }
        Ok(ModelParams {
            config,
            arrays,
            freeze,
        })
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    /// Update a weight array in place (the optimizer's write path).
    pub fn set_array_data(&mut self, index: usize, data: Vec<f64>) -> Result<(), EncoderError> {
        let shape = self.arrays[index].tensor.shape().to_vec();
        self.arrays[index].tensor = Tensor::new(shape, data)?;
        Ok(())
    }

    /// Mark groups frozen/unfrozen; the optimizer and the tape both honor it.
    pub fn set_frozen(&mut self, flags: FreezeFlags) {
        self.freeze = flags;
    }

    /// Register every array on a tape: frozen groups as constants (no
    /// gradient requirement recorded), the rest as parameters.
    pub fn watch(&self, tape: &mut Tape) -> TapedParams {
        let arrays = self
            .arrays
            .iter()
            .map(|a| {
                if self.freeze.is_frozen(a.group) {
                    tape.constant(&a.tensor)
                } else {
                    tape.param(&a.tensor)
                }
            })
            .collect();
        TapedParams { arrays }
    }

    /// Register every array as a constant (forward-only encoding).
    pub fn watch_inference(&self, tape: &mut Tape) -> TapedParams {
        let arrays = self.arrays.iter().map(|a| tape.constant(&a.tensor)).collect();
        TapedParams { arrays }
    }

    /// Raw (unnormalized) image embedding, forward only.
    pub fn embed_image(&self, img: &RasterImage) -> Result<Vec<f64>, EncoderError> {
        let mut tape = Tape::new();
        let taped = self.watch_inference(&mut tape);
        let emb = encode_image(&mut tape, &taped, &self.config, img)?;
        Ok(emb.into_data())
    }

    /// Raw (unnormalized) text embedding, forward only.
    pub fn embed_text(&self, tokens: &TokenizedCaption) -> Result<Vec<f64>, EncoderError> {
        let mut tape = Tape::new();
        let taped = self.watch_inference(&mut tape);
        let emb = encode_text(&mut tape, &taped, tokens)?;
        Ok(emb.into_data())
    }
}

/// Tape-registered views of the weight arrays, in the canonical order.
pub struct TapedParams {
    arrays: Vec<Tensor>,
}

impl TapedParams {
    pub fn array(&self, index: usize) -> &Tensor {
        &self.arrays[index]
    }

    pub fn arrays(&self) -> &[Tensor] {
        &self.arrays
    }
}

// ── Forward passes ──────────────────────────────────────────────────────

/// Rearrange H×W×3 unit-interval pixels into a (patches × patch_dim) matrix.
/// Within a patch, values are row-major with interleaved RGB.
pub fn patchify(pixels: &[f64], cfg: &ModelConfig) -> Result<Tensor, EncoderError> {
    let side = cfg.image_size;
    if pixels.len() != side * side * 3 {
        let got = ((pixels.len() / 3) as f64).sqrt() as usize;
        return Err(EncoderError::WrongImageSize {
            want: side,
            got_w: got,
            got_h: got,
        });
    }
    let p = cfg.patch_size;
    let per_side = side / p;
    let mut data = Vec::with_capacity(cfg.patches_per_image() * cfg.patch_dim());
    for py in 0..per_side {
        for px in 0..per_side {
            for dy in 0..p {
                for dx in 0..p {
                    let x = px * p + dx;
                    let y = py * p + dy;
                    let base = (y * side + x) * 3;
                    data.extend_from_slice(&pixels[base..base + 3]);
                }
            }
        }
    }
    Ok(Tensor::matrix(cfg.patches_per_image(), cfg.patch_dim(), data)?)
}

fn mlp(
    tape: &mut Tape,
    input: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<Tensor, TensorError> {
    let h1 = tape.matmul(input, w1)?;
    let h1 = tape.add_row(&h1, b1)?;
    let h1 = tape.tanh(&h1)?;
    let h2 = tape.matmul(&h1, w2)?;
    tape.add_row(&h2, b2)
}

/// Image tower output before projection: patchify → linear embed →
/// mean-pool → MLP. Returns a `1×hidden` row.
pub fn image_tower(
    tape: &mut Tape,
    params: &TapedParams,
    cfg: &ModelConfig,
    pixels: &[f64],
) -> Result<Tensor, EncoderError> {
    let patches = patchify(pixels, cfg)?;
    let embedded = tape.matmul(&patches, params.array(A_PATCH_EMBED))?;
    let pooled = tape.mean_rows(&embedded)?;
    Ok(mlp(
        tape,
        &pooled,
        params.array(A_IMG_W1),
        params.array(A_IMG_B1),
        params.array(A_IMG_W2),
        params.array(A_IMG_B2),
    )?)
}

/// Full image encoding: tower output times the image projection,
/// a `1×embed_dim` row.
pub fn encode_image(
    tape: &mut Tape,
    params: &TapedParams,
    cfg: &ModelConfig,
    img: &RasterImage,
) -> Result<Tensor, EncoderError> {
    if img.width != cfg.image_size || img.height != cfg.image_size {
        return Err(EncoderError::WrongImageSize {
            want: cfg.image_size,
            got_w: img.width,
            got_h: img.height,
        });
    }
    encode_image_pixels(tape, params, cfg, &img.to_unit_reals())
}

/// As [`encode_image`] but over already-converted unit-interval reals.
pub fn encode_image_pixels(
    tape: &mut Tape,
    params: &TapedParams,
    cfg: &ModelConfig,
    pixels: &[f64],
) -> Result<Tensor, EncoderError> {
    let features = image_tower(tape, params, cfg, pixels)?;
    Ok(tape.matmul(&features, params.array(A_PROJ_IMG))?)
}

/// Text tower output before projection: embedding lookup → mean-pool → MLP.
pub fn text_tower(
    tape: &mut Tape,
    params: &TapedParams,
    tokens: &TokenizedCaption,
) -> Result<Tensor, EncoderError> {
    if tokens.ids.is_empty() {
        return Err(EncoderError::EmptyTokenList);
    }
    let indices: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
    let rows = tape.gather_rows(params.array(A_TOK_EMBED), &indices)?;
    let pooled = tape.mean_rows(&rows)?;
    Ok(mlp(
        tape,
        &pooled,
        params.array(A_TXT_W1),
        params.array(A_TXT_B1),
        params.array(A_TXT_W2),
        params.array(A_TXT_B2),
    )?)
}

/// Full text encoding: tower output times the text projection.
pub fn encode_text(
    tape: &mut Tape,
    params: &TapedParams,
    tokens: &TokenizedCaption,
) -> Result<Tensor, EncoderError> {
    let features = text_tower(tape, params, tokens)?;
    Ok(tape.matmul(&features, params.array(A_PROJ_TXT))?)
}
