use std::collections::BTreeMap;

use super::vocab::{VocabLayout, VocabSizes};
use super::ModelError;
use crate::num::{Float, FLOAT_DTYPE};

/// Slots per block for each segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub speech: usize,
    pub n_img: usize,
    pub image: usize,
    pub text: usize,
    pub action: usize,
}

impl Default for BlockGeometry {
    fn default() -> Self {
        Self {
            speech: 5,
            n_img: 1,
            image: 4,
            text: 8,
            action: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: VocabSizes,
    pub rope_theta: [Float; 2],
    pub block: BlockGeometry,
    pub max_context_blocks: usize,
    /// 0 = f64, 1 = f32; must match the build.
    pub precision: u8,
}

pub const DEFAULT_VOCAB: VocabSizes = VocabSizes {
    prompt: 3,
    speech: 83,
    image: 218,
    text: 28,
    action: 7,
};

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 16,
            d_ff: 128,
            vocab: DEFAULT_VOCAB,
            rope_theta: [10000.0, 10000.0],
            block: BlockGeometry::default(),
            max_context_blocks: 64,
            precision: FLOAT_DTYPE,
        }
    }
}

impl ModelConfig {
    /// The reduced geometry used by the shipped training configs.
    pub fn small() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 8,
            d_ff: 64,
            ..Self::default()
        }
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout::new(self.vocab)
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("n_layers, d_model and d_ff must be positive".into());
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads={} must be a positive multiple of n_kv_heads={}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_head == 0 || self.d_head % 2 != 0 {
            return fail(format!("d_head={} must be even and positive", self.d_head));
        }
        if self.rope_theta.iter().any(|&t| !(t > 1.0) || !t.is_finite()) {
            return fail("rope_theta must be finite and > 1".into());
        }
        let b = self.block;
        if b.speech == 0 || b.n_img == 0 || b.image == 0 || b.text == 0 || b.action == 0 {
            return fail("block geometry slots must be positive".into());
        }
        let v = self.vocab;
        if v.text < 2 || v.action < 1 || v.speech < 1 {
            return fail("vocab needs silence/pad text ids, a noop action and a speech pad".into());
        }
        if self.precision != FLOAT_DTYPE {
            return fail(format!(
                "config precision code {} does not match this build ({})",
                self.precision, FLOAT_DTYPE
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let v = self.vocab;
        let b = self.block;
        let lines = [
            format!("n_layers={}", self.n_layers),
            format!("d_model={}", self.d_model),
            format!("n_heads={}", self.n_heads),
            format!("n_kv_heads={}", self.n_kv_heads),
            format!("d_head={}", self.d_head),
            format!("d_ff={}", self.d_ff),
            format!("vocab.prompt={}", v.prompt),
            format!("vocab.speech={}", v.speech),
            format!("vocab.image={}", v.image),
            format!("vocab.text={}", v.text),
            format!("vocab.action={}", v.action),
            format!("rope_theta.speech={:?}", self.rope_theta[0]),
            format!("rope_theta.action={:?}", self.rope_theta[1]),
            format!("block.speech={}", b.speech),
            format!("block.n_img={}", b.n_img),
            format!("block.image={}", b.image),
            format!("block.text={}", b.text),
            format!("block.action={}", b.action),
            format!("max_context_blocks={}", self.max_context_blocks),
            format!("precision={}", if self.precision == 0 { "f64" } else { "f32" }),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Parse `key=value` lines. Missing keys keep their defaults; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut c = Self::default();
        for (k, v) in parse_kv(text)? {
            apply_key(&mut c, &k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Apply one `model.*`-style key. Shared with the trainer config parser.
pub fn apply_key(c: &mut ModelConfig, key: &str, value: &str) -> Result<(), ModelError> {
    let u = || -> Result<usize, ModelError> {
        value
            .parse()
            .map_err(|_| ModelError::Config(format!("{key}: expected an unsigned integer, got {value:?}")))
    };
    let f = || -> Result<Float, ModelError> {
        value
            .parse()
            .map_err(|_| ModelError::Config(format!("{key}: expected a number, got {value:?}")))
    };
    match key {
        "n_layers" => c.n_layers = u()?,
        "d_model" => c.d_model = u()?,
        "n_heads" => c.n_heads = u()?,
        "n_kv_heads" => c.n_kv_heads = u()?,
        "d_head" => c.d_head = u()?,
        "d_ff" => c.d_ff = u()?,
        "vocab.prompt" => c.vocab.prompt = u()?,
        "vocab.speech" => c.vocab.speech = u()?,
        "vocab.image" => c.vocab.image = u()?,
        "vocab.text" => c.vocab.text = u()?,
        "vocab.action" => c.vocab.action = u()?,
        "rope_theta" => c.rope_theta = [f()?; 2],
        "rope_theta.speech" => c.rope_theta[0] = f()?,
        "rope_theta.action" => c.rope_theta[1] = f()?,
        "block.speech" => c.block.speech = u()?,
        "block.n_img" => c.block.n_img = u()?,
        "block.image" => c.block.image = u()?,
        "block.text" => c.block.text = u()?,
        "block.action" => c.block.action = u()?,
        "max_context_blocks" => c.max_context_blocks = u()?,
        "precision" => {
            c.precision = match value {
                "f64" => 0,
                "f32" => 1,
                _ => return Err(ModelError::Config(format!("precision must be f64 or f32, got {value:?}"))),
            }
        }
        _ => return Err(ModelError::Config(format!("unknown model key {key:?}"))),
    }
    Ok(())
}

/// Flat `key=value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ModelError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(ModelError::Config(format!("line {}: duplicate key {:?}", i + 1, k.trim())));
        }
    }
    Ok(out)
}
