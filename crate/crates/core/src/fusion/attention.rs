use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Tensor};

use crate::nn::{host, softmax_last, LayerNorm, Linear, Mlp, ParamStore};
use crate::{Error, Result};

/// Additive bias used for masked-out attention logits.
const MASKED: f32 = -1e9;

/// Query-key pair counters, head-agnostic. One pair is one query attending
/// to one key (or one sampling location for deformable attention).
#[derive(Debug, Default)]
pub struct AttnStats {
    pub encoder: AtomicU64,
    pub cross: AtomicU64,
    pub self_attn: AtomicU64,
}

impl AttnStats {
    pub fn add_encoder(&self, n: usize) {
        self.encoder.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn add_cross(&self, n: usize) {
        self.cross.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn add_self(&self, n: usize) {
        self.self_attn.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> PairCounts {
        PairCounts {
            encoder: self.encoder.load(Ordering::Relaxed),
            cross: self.cross.load(Ordering::Relaxed),
            self_attn: self.self_attn.load(Ordering::Relaxed),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PairCounts {
    pub encoder: u64,
    pub cross: u64,
    pub self_attn: u64,
}

impl PairCounts {
    pub fn total(&self) -> u64 {
        self.encoder + self.cross + self.self_attn
    }

    pub fn decoder(&self) -> u64 {
        self.cross + self.self_attn
    }
}

/// Boolean attention mask `B x Nq x T`; `true` means the pair may attend.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub batch: usize,
    pub n_queries: usize,
    pub n_tokens: usize,
    pub allow: Vec<bool>,
}

impl AttentionMask {
    pub fn full(batch: usize, n_queries: usize, n_tokens: usize) -> Self {
        Self { batch, n_queries, n_tokens, allow: vec![true; batch * n_queries * n_tokens] }
    }

    /// Builds a mask and replaces every all-false row by an all-true row.
    pub fn new(batch: usize, n_queries: usize, n_tokens: usize, mut allow: Vec<bool>) -> Result<Self> {
        if allow.len() != batch * n_queries * n_tokens {
            return Err(Error::Shape(format!(
                "mask has {} entries, expected {batch} x {n_queries} x {n_tokens}",
                allow.len()
            )));
        }
        if n_tokens > 0 {
            for row in allow.chunks_mut(n_tokens) {
                if row.iter().all(|&a| !a) {
                    row.fill(true);
                }
            }
        }
        Ok(Self { batch, n_queries, n_tokens, allow })
    }

    pub fn is_full(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// Row-wise concatenation `[self | other]` along the token axis.
    pub fn concat_tokens(&self, other: &AttentionMask) -> Result<Self> {
        if self.batch != other.batch || self.n_queries != other.n_queries {
            return Err(Error::Shape("masks disagree on batch or query count".into()));
        }
        let mut allow = Vec::with_capacity(self.allow.len() + other.allow.len());
        for r in 0..self.batch * self.n_queries {
            allow.extend_from_slice(&self.allow[r * self.n_tokens..(r + 1) * self.n_tokens]);
            allow.extend_from_slice(&other.allow[r * other.n_tokens..(r + 1) * other.n_tokens]);
        }
        Ok(Self { batch: self.batch, n_queries: self.n_queries, n_tokens: self.n_tokens + other.n_tokens, allow })
    }

    /// Additive logit bias `B x 1 x Nq x T`, `None` when nothing is masked.
    pub fn bias(&self, dtype: DType) -> Result<Option<Tensor>> {
        if self.is_full() {
            return Ok(None);
        }
        let v = self.allow.iter().map(|&a| if a { 0.0 } else { MASKED }).collect();
        Ok(Some(host(v, &[self.batch, 1, self.n_queries, self.n_tokens], dtype)?))
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::InvalidConfig(format!("d_model {d} not divisible by {n_heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d)?,
            k: Linear::new(ps, &format!("{name}.k"), d, d)?,
            v: Linear::new(ps, &format!("{name}.v"), d, d)?,
            o: Linear::new(ps, &format!("{name}.o"), d, d)?,
            n_heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.n_heads, d / self.n_heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Attention weights `B x heads x Nq x T` of projected queries and keys.
    pub fn weights(&self, q: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (qh, kh) = (self.split(q)?, self.split(k)?);
        let dh = qh.dims()[3] as f64;
        let logits = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? / dh.sqrt())?;
        let logits = match bias {
            Some(b) => logits.broadcast_add(b)?,
            None => logits,
        };
        softmax_last(&logits)
    }

    /// Attends projected queries `q` to projected keys/values, returning the
    /// merged heads before the output projection.
    pub fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let w = self.weights(q, k, bias)?;
        let out = w.matmul(&self.split(v)?)?;
        let (b, h, n, dh) = out.dims4()?;
        Ok(out.transpose(1, 2)?.reshape((b, n, h * dh))?)
    }

    /// Full attention with inputs for queries, keys and values.
    pub fn forward(&self, xq: &Tensor, xk: &Tensor, xv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let a = self.attend(&self.q.forward(xq)?, &self.k.forward(xk)?, &self.v.forward(xv)?, bias)?;
        self.o.forward(&a)
    }
}

fn check_finite(x: &Tensor) -> Result<()> {
    let s = x.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("attention input".into()))
    }
}

fn batched(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        2 => Ok((x.unsqueeze(0)?, true)),
        3 => Ok((x.clone(), false)),
        r => Err(Error::Shape(format!("attention expects rank 2 or 3 tokens, got rank {r}"))),
    }
}

fn unbatch(x: Tensor, squeeze: bool) -> Result<Tensor> {
    Ok(if squeeze { x.squeeze(0)? } else { x })
}

/// Self-attention over `T x d` (or `B x T x d`) tokens.
pub fn msa(attn: &MultiHeadAttention, x: &Tensor) -> Result<Tensor> {
    check_finite(x)?;
    let (xb, sq) = batched(x)?;
    unbatch(attn.forward(&xb, &xb, &xb, None)?, sq)
}

/// Cross-attention of queries `x` to context `y`.
pub fn mca(attn: &MultiHeadAttention, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_finite(x)?;
    check_finite(y)?;
    let (xb, sq) = batched(x)?;
    let (yb, _) = batched(y)?;
    unbatch(attn.forward(&xb, &yb, &yb, None)?, sq)
}

/// Cross-attention restricted by `mask` (empty rows attend everywhere).
pub fn masked_cross_attention(
    attn: &MultiHeadAttention,
    x: &Tensor,
    y: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    check_finite(x)?;
    check_finite(y)?;
    let (xb, sq) = batched(x)?;
    let (yb, _) = batched(y)?;
    let (b, nq, _) = xb.dims3()?;
    let t = yb.dims()[1];
    if (mask.batch, mask.n_queries, mask.n_tokens) != (b, nq, t) {
        return Err(Error::Shape(format!(
            "mask {}x{}x{} for {b}x{nq} queries and {t} tokens",
            mask.batch, mask.n_queries, mask.n_tokens
        )));
    }
    let bias = mask.bias(x.dtype())?;
    unbatch(attn.forward(&xb, &yb, &yb, bias.as_ref())?, sq)
}

/// Pre-normalized block: `y = MSA(LN(z)) + z`, `z' = MLP(LN(y)) + y`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, n_heads: usize, d_ffn: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, n_heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), d, d_ffn, d)?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let y = (msa(&self.attn, &self.ln1.forward(z)?)? + z)?;
        Ok((self.mlp.forward(&self.ln2.forward(&y)?)? + y)?)
    }
}
