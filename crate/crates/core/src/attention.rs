//! Reference and tiled attention kernels.
//!
//! Three evaluation paths over the same math, `softmax(Q Kᵀ / scale) V`:
//!
//! - [`naive_attention`]: one head, dense score matrix, always `f64`. This is
//!   the correctness oracle for everything else.
//! - [`tiled_prefill_attention`]: a causal query chunk against the whole KV
//!   cache, streamed over KV tiles with an online softmax (running row max,
//!   running denominator, rescaled accumulator).
//! - [`decode_attention_splitk`] + [`merge_partials`]: single-token decode
//!   split along the KV dimension, each split producing an output and a
//!   log-sum-exp that are combined afterwards.
//!
//! The tiled and split paths are generic over the element type so an `f32`
//! run can mimic kernel numerics; tests hold `f64` to 1e-10 and `f32` to 1e-3.

use std::ops::Range;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },
    #[error("inconsistent state: {0}")]
    InconsistentState(String),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Head layout of a model. `scale` divides the raw dot products.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub scale: f64,
}

impl ModelShape {
    pub fn new(
        num_q_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
        scale: f64,
    ) -> Result<Self> {
        let shape = Self {
            num_q_heads,
            num_kv_heads,
            head_dim,
            scale,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Shape with the conventional `sqrt(head_dim)` temperature.
    pub fn with_default_scale(
        num_q_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        Self::new(
            num_q_heads,
            num_kv_heads,
            head_dim,
            (head_dim as f64).sqrt(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_kv_heads == 0 || self.num_q_heads == 0 {
            return Err(AttentionError::Domain(
                "head counts must be positive".into(),
            ));
        }
        if self.num_q_heads % self.num_kv_heads != 0 {
            return Err(AttentionError::Domain(format!(
                "{} query heads are not divisible into {} kv groups",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if self.head_dim == 0 {
            return Err(AttentionError::Domain("head_dim must be >= 1".into()));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(AttentionError::Domain(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }
}

/// KV head serving query head `q_head` under grouped-query attention.
pub fn gqa_kv_head(q_head: usize, shape: &ModelShape) -> Result<usize> {
    if q_head >= shape.num_q_heads {
        return Err(AttentionError::Index {
            index: q_head,
            limit: shape.num_q_heads,
        });
    }
    Ok(q_head / shape.group_size())
}

/// Keys and values of one request, laid out `[context_len, num_kv_heads, head_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    pub k: Array3<T>,
    pub v: Array3<T>,
}

impl<T: Float> KvCache<T> {
    pub fn new(k: Array3<T>, v: Array3<T>) -> Result<Self> {
        if k.dim() != v.dim() {
            return Err(AttentionError::Dimension(format!(
                "K {:?} vs V {:?}",
                k.dim(),
                v.dim()
            )));
        }
        Ok(Self { k, v })
    }

    pub fn context_len(&self) -> usize {
        self.k.dim().0
    }

    fn check_shape(&self, shape: &ModelShape) -> Result<()> {
        let (_, heads, dim) = self.k.dim();
        if heads != shape.num_kv_heads || dim != shape.head_dim {
            return Err(AttentionError::Dimension(format!(
                "cache has {heads} heads x {dim} dims, shape wants {} x {}",
                shape.num_kv_heads, shape.head_dim
            )));
        }
        Ok(())
    }

    fn cast<U: Float>(&self) -> KvCache<U> {
        KvCache {
            k: self.k.mapv(|x| U::from(x).unwrap()),
            v: self.v.mapv(|x| U::from(x).unwrap()),
        }
    }
}

/// A contiguous slice of a prompt's queries, `[chunk_len, num_q_heads, head_dim]`.
/// `position_offset` counts the prompt tokens before the chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryChunk<T> {
    pub q: Array3<T>,
    pub position_offset: usize,
}

impl<T: Float> QueryChunk<T> {
    pub fn chunk_len(&self) -> usize {
        self.q.dim().0
    }

    pub fn cast<U: Float>(&self) -> QueryChunk<U> {
        QueryChunk {
            q: self.q.mapv(|x| U::from(x).unwrap()),
            position_offset: self.position_offset,
        }
    }
}

/// The single query token of a decode step, `[num_q_heads, head_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeQuery<T> {
    pub q: Array2<T>,
}

/// Attention restricted to a KV range: normalized output plus the row-wise
/// log-sum-exp of the scaled scores over that range.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPartial<T> {
    /// `[rows, head_dim]`
    pub output: Array2<T>,
    /// `[rows]`
    pub lse: Vec<T>,
    pub kv_range: Range<usize>,
}

/// Dense single-head attention in `f64`.
///
/// With `causal_offset = Some(c)`, query row `i` sees keys `0..=c + i`.
pub fn naive_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    scale: f64,
    causal_offset: Option<i64>,
) -> Result<Array2<f64>> {
    let (m, d) = q.dim();
    let (n, dk) = k.dim();
    if m == 0 || n == 0 {
        return Err(AttentionError::Dimension(format!(
            "empty operand: m={m}, n={n}"
        )));
    }
    if dk != d || v.dim() != (n, d) {
        return Err(AttentionError::Dimension(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if !(scale > 0.0) {
        return Err(AttentionError::Domain(format!(
            "scale must be positive, got {scale}"
        )));
    }

    let scores = q.dot(&k.t()) / scale;
    let probs = masked_softmax(&scores, causal_offset)?;
    Ok(probs.dot(&v))
}

/// Row-normalized softmax of `scores` with the causal convention of
/// [`naive_attention`]; masked entries are exactly zero.
pub fn masked_softmax(scores: &Array2<f64>, causal_offset: Option<i64>) -> Result<Array2<f64>> {
    let (m, n) = scores.dim();
    let mut probs = Array2::<f64>::zeros((m, n));
    for i in 0..m {
        let visible = match causal_offset {
            None => n,
            Some(c) => {
                let last = c + i as i64;
                if last < 0 {
                    return Err(AttentionError::Domain(format!(
                        "query row {i} has every key masked"
                    )));
                }
                (last as usize + 1).min(n)
            }
        };
        let row = scores.row(i);
        let max = row
            .iter()
            .take(visible)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..visible {
            let e = (row[j] - max).exp();
            probs[[i, j]] = e;
            denom += e;
        }
        for j in 0..visible {
            probs[[i, j]] /= denom;
        }
    }
    Ok(probs)
}

/// Causal attention of a prompt chunk against every cached key up to each
/// query's absolute position, computed tile by tile with an online softmax.
///
/// Returns `[chunk_len, num_q_heads, head_dim]`.
pub fn tiled_prefill_attention<T: Float>(
    chunk: &QueryChunk<T>,
    cache: &KvCache<T>,
    shape: &ModelShape,
    tile_q: usize,
    tile_kv: usize,
) -> Result<Array3<T>> {
    shape.validate()?;
    cache.check_shape(shape)?;
    if tile_q == 0 || tile_kv == 0 {
        return Err(AttentionError::Domain("tile sizes must be >= 1".into()));
    }
    let (chunk_len, q_heads, dim) = chunk.q.dim();
    if q_heads != shape.num_q_heads || dim != shape.head_dim {
        return Err(AttentionError::Dimension(format!(
            "chunk has {q_heads} heads x {dim} dims, shape wants {} x {}",
            shape.num_q_heads, shape.head_dim
        )));
    }
    let needed = chunk.position_offset + chunk_len;
    if cache.context_len() < needed {
        return Err(AttentionError::InconsistentState(format!(
            "cache holds {} positions but the chunk reaches position {}",
            cache.context_len(),
            needed
        )));
    }

    let scale = T::from(shape.scale).unwrap();
    let mut out = Array3::<T>::zeros((chunk_len, q_heads, dim));
    let mut scores = vec![T::zero(); tile_kv];

    for h in 0..q_heads {
        let kv_head = h / shape.group_size();
        let keys = cache.k.index_axis(Axis(1), kv_head);
        let values = cache.v.index_axis(Axis(1), kv_head);
        let queries = chunk.q.index_axis(Axis(1), h);

        for q_start in (0..chunk_len).step_by(tile_q) {
            let q_end = (q_start + tile_q).min(chunk_len);
            let rows = q_end - q_start;
            let mut row_max = vec![T::neg_infinity(); rows];
            let mut row_sum = vec![T::zero(); rows];
            let mut acc = Array2::<T>::zeros((rows, dim));
            // keys visible to the last row of this tile
            let kv_limit = chunk.position_offset + q_end;

            for kv_start in (0..kv_limit).step_by(tile_kv) {
                let kv_end = (kv_start + tile_kv).min(kv_limit);
                for r in 0..rows {
                    let last_visible = chunk.position_offset + q_start + r;
                    if kv_start > last_visible {
                        continue;
                    }
                    let hi = kv_end.min(last_visible + 1);
                    let qrow = queries.row(q_start + r);
                    let mut tile_max = T::neg_infinity();
                    for j in kv_start..hi {
                        let s = dot(qrow.iter(), keys.row(j).iter()) / scale;
                        scores[j - kv_start] = s;
                        tile_max = tile_max.max(s);
                    }
                    let new_max = row_max[r].max(tile_max);
                    let correction = (row_max[r] - new_max).exp();
                    let mut acc_row = acc.row_mut(r);
                    acc_row.mapv_inplace(|x| x * correction);
                    let mut sum = row_sum[r] * correction;
                    for j in kv_start..hi {
                        let w = (scores[j - kv_start] - new_max).exp();
                        sum = sum + w;
                        for (a, &x) in acc_row.iter_mut().zip(values.row(j).iter()) {
                            *a = *a + w * x;
                        }
                    }
                    row_sum[r] = sum;
                    row_max[r] = new_max;
                }
            }

            for r in 0..rows {
                let inv = T::one() / row_sum[r];
                for c in 0..dim {
                    out[[q_start + r, h, c]] = acc[[r, c]] * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Contiguous near-equal partition of `0..len` into `parts` ranges; earlier
/// ranges take the remainder so lengths differ by at most one.
pub fn split_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    if parts == 0 {
        return Vec::new();
    }
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Result of a split decode: the partials plus the split count actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDecode<T> {
    pub partials: Vec<AttentionPartial<T>>,
    pub requested_splits: usize,
    pub effective_splits: usize,
}

impl<T> SplitDecode<T> {
    /// True when more splits were asked for than there are cached positions.
    pub fn was_reduced(&self) -> bool {
        self.effective_splits < self.requested_splits
    }
}

/// Decode attention for one token split along the KV dimension.
///
/// Asking for more splits than cached positions silently clamps to
/// `context_len`; [`SplitDecode::was_reduced`] reports it.
pub fn decode_attention_splitk<T: Float>(
    query: &DecodeQuery<T>,
    cache: &KvCache<T>,
    shape: &ModelShape,
    num_splits: usize,
) -> Result<SplitDecode<T>> {
    shape.validate()?;
    cache.check_shape(shape)?;
    if query.q.dim() != (shape.num_q_heads, shape.head_dim) {
        return Err(AttentionError::Dimension(format!(
            "decode query {:?}, shape wants ({}, {})",
            query.q.dim(),
            shape.num_q_heads,
            shape.head_dim
        )));
    }
    let n = cache.context_len();
    if n == 0 {
        return Err(AttentionError::Domain(
            "decode against an empty cache".into(),
        ));
    }
    if num_splits == 0 {
        return Err(AttentionError::Domain("num_splits must be >= 1".into()));
    }
    let effective = num_splits.min(n);
    let scale = T::from(shape.scale).unwrap();
    let (heads, dim) = query.q.dim();

    let partials = split_ranges(n, effective)
        .into_iter()
        .map(|range| {
            let mut output = Array2::<T>::zeros((heads, dim));
            let mut lse = vec![T::zero(); heads];
            for h in 0..heads {
                let kv_head = h / shape.group_size();
                let qrow = query.q.row(h);
                let scores: Vec<T> = range
                    .clone()
                    .map(|j| {
                        dot(
                            qrow.iter(),
                            cache.k.slice(ndarray::s![j, kv_head, ..]).iter(),
                        ) / scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                let mut out_row = output.row_mut(h);
                for (s, j) in scores.iter().zip(range.clone()) {
                    let w = (*s - max).exp();
                    denom = denom + w;
                    for (o, &x) in out_row
                        .iter_mut()
                        .zip(cache.v.slice(ndarray::s![j, kv_head, ..]).iter())
                    {
                        *o = *o + w * x;
                    }
                }
                out_row.mapv_inplace(|x| x / denom);
                lse[h] = max + denom.ln();
            }
            AttentionPartial {
                output,
                lse,
                kv_range: range,
            }
        })
        .collect();

    Ok(SplitDecode {
        partials,
        requested_splits: num_splits,
        effective_splits: effective,
    })
}

/// Log-sum-exp combination of split partials.
///
/// Parts are summed in ascending `kv_range.start` order whatever order they
/// arrive in, so the result is bitwise identical under permutation.
pub fn merge_partials<T: Float>(parts: &[AttentionPartial<T>]) -> Result<Array2<T>> {
    let first = parts
        .first()
        .ok_or_else(|| AttentionError::Domain("no partials to merge".into()))?;
    let dims = first.output.dim();
    if parts
        .iter()
        .any(|p| p.output.dim() != dims || p.lse.len() != dims.0)
    {
        return Err(AttentionError::Dimension(
            "partials disagree on shape".into(),
        ));
    }

    let mut order: Vec<&AttentionPartial<T>> = parts.iter().collect();
    order.sort_by_key(|p| (p.kv_range.start, p.kv_range.end));
    for pair in order.windows(2) {
        if pair[1].kv_range.start < pair[0].kv_range.end {
            return Err(AttentionError::InconsistentState(format!(
                "kv ranges {:?} and {:?} overlap",
                pair[0].kv_range, pair[1].kv_range
            )));
        }
    }
    if order.len() == 1 {
        return Ok(first.output.clone());
    }

    let (rows, dim) = dims;
    let mut merged = Array2::<T>::zeros((rows, dim));
    for r in 0..rows {
        let max = order
            .iter()
            .map(|p| p.lse[r])
            .fold(T::neg_infinity(), T::max);
        let total = max
            + order
                .iter()
                .fold(T::zero(), |acc, p| acc + (p.lse[r] - max).exp())
                .ln();
        for p in &order {
            let w = (p.lse[r] - total).exp();
            for c in 0..dim {
                merged[[r, c]] = merged[[r, c]] + w * p.output[[r, c]];
            }
        }
    }
    Ok(merged)
}

/// Naive evaluation of a full chunk/cache pair, head by head, through the
/// dense oracle. Used to cross-check the tiled path.
pub fn naive_prefill_attention(
    chunk: &QueryChunk<f64>,
    cache: &KvCache<f64>,
    shape: &ModelShape,
) -> Result<Array3<f64>> {
    cache.check_shape(shape)?;
    let (chunk_len, heads, dim) = chunk.q.dim();
    let mut out = Array3::<f64>::zeros((chunk_len, heads, dim));
    for h in 0..heads {
        let kv_head = gqa_kv_head(h, shape)?;
        let o = naive_attention(
            chunk.q.index_axis(Axis(1), h),
            cache.k.index_axis(Axis(1), kv_head),
            cache.v.index_axis(Axis(1), kv_head),
            shape.scale,
            Some(chunk.position_offset as i64),
        )?;
        out.index_axis_mut(Axis(1), h).assign(&o);
    }
    Ok(out)
}

/// Dense decode attention for one token, `[num_q_heads, head_dim]`.
pub fn naive_decode_attention(
    query: &DecodeQuery<f64>,
    cache: &KvCache<f64>,
    shape: &ModelShape,
) -> Result<Array2<f64>> {
    cache.check_shape(shape)?;
    let (heads, dim) = query.q.dim();
    let mut out = Array2::<f64>::zeros((heads, dim));
    for h in 0..heads {
        let kv_head = gqa_kv_head(h, shape)?;
        let q = query.q.slice(ndarray::s![h..h + 1, ..]);
        let o = naive_attention(
            q,
            cache.k.index_axis(Axis(1), kv_head),
            cache.v.index_axis(Axis(1), kv_head),
            shape.scale,
            None,
        )?;
        out.row_mut(h).assign(&o.row(0));
    }
    Ok(out)
}

/// Runs the tiled path in `f32` on `f64` inputs and widens the result.
pub fn tiled_prefill_attention_f32(
    chunk: &QueryChunk<f64>,
    cache: &KvCache<f64>,
    shape: &ModelShape,
    tile_q: usize,
    tile_kv: usize,
) -> Result<Array3<f64>> {
    let out = tiled_prefill_attention::<f32>(&chunk.cast(), &cache.cast(), shape, tile_q, tile_kv)?;
    Ok(out.mapv(f64::from))
}

/// Largest elementwise `|a - b| / max(|b|, floor)`.
pub fn max_relative_error<'a, I>(actual: I, expected: I, floor: f64) -> f64
where
    I: IntoIterator<Item = &'a f64>,
{
    actual
        .into_iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max)
}

fn dot<'a, T: Float + 'a>(a: impl Iterator<Item = &'a T>, b: impl Iterator<Item = &'a T>) -> T {
    a.zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
