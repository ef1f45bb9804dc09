//! Deterministic toy text encoder: FNV-1a token hashing into a fixed
//! vocabulary of frozen embeddings, followed by a position-aware two-layer
//! mixer. Stands in for the frozen CLIP encoder of the full-scale system.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{fnv1a64, randn_seeded, tensor_checksum};

/// `(seq_len, d_text)` conditioning matrix; a pure function of the input
/// string.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub values: Tensor,
}

impl TextEmbedding {
    pub fn seq_len(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_text: usize,
    pub seq_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            d_text: 64,
            seq_len: 16,
        }
    }
}

// Fixed stream seed for the frozen tables; not tied to any run seed.
const TABLE_SEED: u64 = 0x52454d_00;

#[derive(Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    table: Tensor, // (V, d)
    pos: Tensor,   // (L, d)
    w1: Tensor,    // (d, d)
    b1: Tensor,    // (d,)
    w2: Tensor,    // (d, d)
    b2: Tensor,    // (d,)
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig) -> Result<Self> {
        if config.vocab_size == 0 || config.d_text == 0 || config.seq_len == 0 {
            return Err(Error::Param("text encoder dims must be positive".into()));
        }
        let d = config.d_text;
        let scale = 1.0 / (d as f64).sqrt();
        let table = (randn_seeded(&[config.vocab_size, d], DType::F32, TABLE_SEED)? * 1.0)?;
        let pos = (randn_seeded(&[config.seq_len, d], DType::F32, TABLE_SEED + 1)? * 0.5)?;
        let w1 = (randn_seeded(&[d, d], DType::F32, TABLE_SEED + 2)? * scale)?;
        let b1 = Tensor::zeros((d,), DType::F32, &Device::Cpu)?;
        let w2 = (randn_seeded(&[d, d], DType::F32, TABLE_SEED + 3)? * scale)?;
        let b2 = Tensor::zeros((d,), DType::F32, &Device::Cpu)?;
        Ok(Self {
            config,
            table,
            pos,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn token_id(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.config.vocab_size as u64) as usize
    }

    fn tokenize(&self, expression: &str) -> Vec<String> {
        expression
            .to_lowercase()
            .split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
            .filter(|t| !t.is_empty())
            .collect()
    }

    /// Encodes an expression into a `(seq_len, d_text)` matrix, padding
    /// with zero rows and truncating beyond `seq_len`.
    pub fn encode(&self, expression: &str) -> Result<TextEmbedding> {
        let tokens = self.tokenize(expression);
        if tokens.is_empty() {
            return Err(Error::Param(format!(
                "expression '{expression}' has no tokens"
            )));
        }
        let (l, d) = (self.config.seq_len, self.config.d_text);
        let n = tokens.len().min(l);
        let mut rows = Vec::with_capacity(l);
        for (i, tok) in tokens.iter().take(n).enumerate() {
            let e = self.table.narrow(0, self.token_id(tok), 1)?; // (1, d)
            let p = self.pos.narrow(0, i, 1)?;
            let x = (&e + &p)?;
            let h = x.matmul(&self.w1)?.broadcast_add(&self.b1)?.tanh()?;
            let out = (e + h.matmul(&self.w2)?.broadcast_add(&self.b2)?)?;
            rows.push(out);
        }
        if n < l {
            rows.push(Tensor::zeros((l - n, d), DType::F32, &Device::Cpu)?);
        }
        Ok(TextEmbedding {
            values: Tensor::cat(&rows, 0)?,
        })
    }

    /// True if every distinct token in `expressions` hashes to a distinct
    /// vocabulary id.
    pub fn collision_free(&self, expressions: &[String]) -> bool {
        let mut seen: std::collections::HashMap<usize, String> = Default::default();
        for expr in expressions {
            for tok in self.tokenize(expr) {
                let id = self.token_id(&tok);
                if let Some(prev) = seen.get(&id) {
                    if prev != &tok {
                        return false;
                    }
                } else {
                    seen.insert(id, tok);
                }
            }
        }
        true
    }

    /// Fingerprint of the frozen tables; unchanged across any training run.
    pub fn checksum(&self) -> Result<String> {
        tensor_checksum([
            ("table", &self.table),
            ("pos", &self.pos),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ])
    }
}
