//! Task-aware relation modeling.
//!
//! Videos in an episode are not embedded in isolation: each sequence first
//! passes through an intra-relation stage (pre-norm multi-head
//! self-attention with a residual connection, so zero weights give identity
//! behavior), then an inter-relation stage that scores pairwise semantic
//! correlation between temporally pooled videos and mixes the pool by those
//! scores, and finally an expand-concatenate-fuse step that merges the
//! per-frame features with the episode-level summary back into a T x C
//! embedding.
//!
//! The correlation scorer is a learnable bilinear form on projected pooled
//! features. By default scores pass through a sigmoid and stay
//! unnormalized, so a video's own weight may fall below 1 and irrelevant
//! pool members are suppressed; a row-softmax mode is available for
//! normalized mixing.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::types::Episode;

/// Checkpoint container magic.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HYRS";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Model shape: channel count, attention heads, correlation projection
/// width, positional table length, and auxiliary-head class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub channels: usize,
    pub heads: usize,
    pub corr_dim: usize,
    pub t_max: usize,
    pub global_classes: usize,
}

impl ModelDims {
    pub fn new(
        channels: usize,
        heads: usize,
        corr_dim: usize,
        t_max: usize,
        global_classes: usize,
    ) -> Result<Self> {
        if channels == 0 || heads == 0 || corr_dim == 0 || t_max == 0 || global_classes == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !channels.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "head count {heads} must divide channel count {channels}"
            )));
        }
        Ok(Self { channels, heads, corr_dim, t_max, global_classes })
    }

    /// Default head count and correlation width for a channel count:
    /// 2 heads at the desk-scale C <= 64 profile, 8 above.
    pub fn for_profile(channels: usize, t_max: usize, global_classes: usize) -> Result<Self> {
        let heads = if channels <= 64 { 2 } else { 8 };
        Self::new(channels, heads, (channels / 2).max(1), t_max, global_classes)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// How correlation scores are normalized into mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaNorm {
    /// Sigmoid of the scaled bilinear score; rows are unnormalized.
    #[default]
    Sigmoid,
    /// Softmax over each row; weights sum to 1.
    RowSoftmax,
}

/// Which videos form the inter-relation pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolScope {
    /// Queries participate in the pool alongside the support set.
    #[default]
    SupportAndQuery,
    /// Only support videos form the pool.
    SupportOnly,
}

/// Forward-pass options (not learnable, not part of checkpoints).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RelationOptions {
    #[serde(default)]
    pub kappa_norm: KappaNorm,
    #[serde(default)]
    pub pool_scope: PoolScope,
}

/// One attention head's projections (each C x C/h).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// All learnable weights: attention (with layer-norm gain/bias and an
/// additive positional table), the correlation scorer, the fuse projection,
/// and the auxiliary classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationModelParams {
    pub ln_gamma: Matrix,
    pub ln_beta: Matrix,
    pub pos: Matrix,
    pub heads: Vec<HeadParams>,
    pub wo: Matrix,
    pub inter_w1: Matrix,
    pub inter_w2: Matrix,
    pub inter_temp: Matrix,
    pub fuse_w: Matrix,
    pub fuse_b: Matrix,
    pub aux_w: Matrix,
    pub aux_b: Matrix,
}

fn uniform_fan_in(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, rng.uniform_range(-bound, bound));
        }
    }
    m
}

impl RelationModelParams {
    /// Training start point, chosen so the forward pass begins close to
    /// identity with every path live for gradients. Attention projections
    /// get scaled-uniform fan-in weights; the output projection and
    /// positional table start at one tenth of that scale. The correlation
    /// scorer starts with shared projections, making the mixing weights
    /// self- and same-content-selective from the first step, and the fuse
    /// starts as [I | 0.1 I]: per-frame features pass through while a
    /// small episode-summary component already flows, so the scorer and
    /// fuse receive useful gradients immediately. The auxiliary head
    /// starts at zero.
    pub fn init(dims: &ModelDims, rng: &mut Rng) -> Self {
        let c = dims.channels;
        let dk = dims.head_dim();
        let heads = (0..dims.heads)
            .map(|_| HeadParams {
                wq: uniform_fan_in(rng, c, dk),
                wk: uniform_fan_in(rng, c, dk),
                wv: uniform_fan_in(rng, c, dk),
            })
            .collect();
        let mut fuse_w = Matrix::zeros(2 * c, c);
        for i in 0..c {
            fuse_w.set(i, i, 1.0);
            fuse_w.set(c + i, i, 0.1);
        }
        let scorer = uniform_fan_in(rng, c, dims.corr_dim);
        Self {
            ln_gamma: Matrix::filled(1, c, 1.0),
            ln_beta: Matrix::zeros(1, c),
            pos: uniform_fan_in(rng, dims.t_max, c).scale(0.1),
            heads,
            wo: uniform_fan_in(rng, c, c).scale(0.1),
            inter_w1: scorer.clone(),
            inter_w2: scorer,
            inter_temp: Matrix::scalar(1.0),
            fuse_w,
            fuse_b: Matrix::zeros(1, c),
            aux_w: Matrix::zeros(c, dims.global_classes),
            aux_b: Matrix::zeros(1, dims.global_classes),
        }
    }

    /// The exact-identity configuration: attention value path and positional
    /// table zero, fuse selecting the per-frame block, so the enhanced
    /// features equal the inputs bit for bit.
    pub fn identity(dims: &ModelDims) -> Self {
        let c = dims.channels;
        let dk = dims.head_dim();
        let heads = (0..dims.heads)
            .map(|_| HeadParams {
                wq: Matrix::zeros(c, dk),
                wk: Matrix::zeros(c, dk),
                wv: Matrix::zeros(c, dk),
            })
            .collect();
        let mut fuse_w = Matrix::zeros(2 * c, c);
        for i in 0..c {
            fuse_w.set(i, i, 1.0);
        }
        Self {
            ln_gamma: Matrix::filled(1, c, 1.0),
            ln_beta: Matrix::zeros(1, c),
            pos: Matrix::zeros(dims.t_max, c),
            heads,
            wo: Matrix::zeros(c, c),
            inter_w1: Matrix::zeros(c, dims.corr_dim),
            inter_w2: Matrix::zeros(c, dims.corr_dim),
            inter_temp: Matrix::scalar(1.0),
            fuse_w,
            fuse_b: Matrix::zeros(1, c),
            aux_w: Matrix::zeros(c, dims.global_classes),
            aux_b: Matrix::zeros(1, dims.global_classes),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            channels: self.wo.rows(),
            heads: self.heads.len(),
            corr_dim: self.inter_w1.cols(),
            t_max: self.pos.rows(),
            global_classes: self.aux_w.cols(),
        }
    }

    /// Canonical (name, matrix) listing; the checkpoint format and the
    /// optimizer state both follow this order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("intra.ln.gamma".into(), &self.ln_gamma),
            ("intra.ln.beta".into(), &self.ln_beta),
            ("intra.pos".into(), &self.pos),
        ];
        for (i, head) in self.heads.iter().enumerate() {
            out.push((format!("intra.h{i}.wq"), &head.wq));
            out.push((format!("intra.h{i}.wk"), &head.wk));
            out.push((format!("intra.h{i}.wv"), &head.wv));
        }
        out.push(("intra.wo".into(), &self.wo));
        out.push(("inter.w1".into(), &self.inter_w1));
        out.push(("inter.w2".into(), &self.inter_w2));
        out.push(("inter.temp".into(), &self.inter_temp));
        out.push(("fuse.w".into(), &self.fuse_w));
        out.push(("fuse.b".into(), &self.fuse_b));
        out.push(("aux.w".into(), &self.aux_w));
        out.push(("aux.b".into(), &self.aux_b));
        out
    }

    pub fn ordered_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.ln_gamma, &mut self.ln_beta, &mut self.pos];
        for head in self.heads.iter_mut() {
            out.push(&mut head.wq);
            out.push(&mut head.wk);
            out.push(&mut head.wv);
        }
        out.push(&mut self.wo);
        out.push(&mut self.inter_w1);
        out.push(&mut self.inter_w2);
        out.push(&mut self.inter_temp);
        out.push(&mut self.fuse_w);
        out.push(&mut self.fuse_b);
        out.push(&mut self.aux_w);
        out.push(&mut self.aux_b);
        out
    }

    /// Registers every weight on a tape in canonical order.
    pub fn to_tape(&self, tape: &Tape, requires_grad: bool) -> ParamTensors {
        ParamTensors {
            ln_gamma: tape.leaf(self.ln_gamma.clone(), requires_grad),
            ln_beta: tape.leaf(self.ln_beta.clone(), requires_grad),
            pos: tape.leaf(self.pos.clone(), requires_grad),
            heads: self
                .heads
                .iter()
                .map(|h| HeadTensors {
                    wq: tape.leaf(h.wq.clone(), requires_grad),
                    wk: tape.leaf(h.wk.clone(), requires_grad),
                    wv: tape.leaf(h.wv.clone(), requires_grad),
                })
                .collect(),
            wo: tape.leaf(self.wo.clone(), requires_grad),
            inter_w1: tape.leaf(self.inter_w1.clone(), requires_grad),
            inter_w2: tape.leaf(self.inter_w2.clone(), requires_grad),
            inter_temp: tape.leaf(self.inter_temp.clone(), requires_grad),
            fuse_w: tape.leaf(self.fuse_w.clone(), requires_grad),
            fuse_b: tape.leaf(self.fuse_b.clone(), requires_grad),
            aux_w: tape.leaf(self.aux_w.clone(), requires_grad),
            aux_b: tape.leaf(self.aux_b.clone(), requires_grad),
        }
    }

    /// Serializes to the checkpoint container: magic, version u16 LE, then
    /// per matrix: name length u16 LE, name bytes, rows u32 LE, cols u32
    /// LE, row-major little-endian f32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, matrix) in self.named() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(matrix.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(matrix.cols() as u32).to_le_bytes());
            for &v in matrix.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cursor, &mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, got: magic });
        }
        let mut version = [0u8; 2];
        read_exact(&mut cursor, &mut version)?;
        let version = u16::from_le_bytes(version);
        if version != CHECKPOINT_VERSION {
            return Err(Error::InvalidCheckpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }

        let mut matrices: Vec<(String, Matrix)> = Vec::new();
        while !cursor.is_empty() {
            let mut len = [0u8; 2];
            read_exact(&mut cursor, &mut len)?;
            let len = u16::from_le_bytes(len) as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut cursor, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::InvalidCheckpoint("non-UTF-8 matrix name".into()))?;
            let mut dim = [0u8; 4];
            read_exact(&mut cursor, &mut dim)?;
            let rows = u32::from_le_bytes(dim) as usize;
            read_exact(&mut cursor, &mut dim)?;
            let cols = u32::from_le_bytes(dim) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 4];
            for _ in 0..rows * cols {
                read_exact(&mut cursor, &mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            matrices.push((name, Matrix::from_vec(rows, cols, data)?));
        }

        let head_count = (0..)
            .take_while(|i| matrices.iter().any(|(n, _)| n == &format!("intra.h{i}.wq")))
            .count();

        let mut take = |name: &str| -> Result<Matrix> {
            let at = matrices
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::InvalidCheckpoint(format!("missing matrix `{name}`")))?;
            Ok(matrices.remove(at).1)
        };

        let ln_gamma = take("intra.ln.gamma")?;
        let ln_beta = take("intra.ln.beta")?;
        let pos = take("intra.pos")?;
        let mut heads = Vec::new();
        for i in 0..head_count {
            heads.push(HeadParams {
                wq: take(&format!("intra.h{i}.wq"))?,
                wk: take(&format!("intra.h{i}.wk"))?,
                wv: take(&format!("intra.h{i}.wv"))?,
            });
        }
        if heads.is_empty() {
            return Err(Error::InvalidCheckpoint("no attention heads found".into()));
        }
        let params = Self {
            ln_gamma,
            ln_beta,
            pos,
            heads,
            wo: take("intra.wo")?,
            inter_w1: take("inter.w1")?,
            inter_w2: take("inter.w2")?,
            inter_temp: take("inter.temp")?,
            fuse_w: take("fuse.w")?,
            fuse_b: take("fuse.b")?,
            aux_w: take("aux.w")?,
            aux_b: take("aux.b")?,
        };
        if !matrices.is_empty() {
            return Err(Error::InvalidCheckpoint(format!(
                "unexpected matrix `{}`",
                matrices[0].0
            )));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(cursor: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if cursor.len() < buf.len() {
        return Err(Error::TruncatedFile { expected: buf.len(), got: cursor.len() });
    }
    let (head, rest) = cursor.split_at(buf.len());
    buf.copy_from_slice(head);
    *cursor = rest;
    Ok(())
}

/// Tape-registered weights, aligned with [`RelationModelParams::named`].
pub struct HeadTensors {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

pub struct ParamTensors {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub pos: Tensor,
    pub heads: Vec<HeadTensors>,
    pub wo: Tensor,
    pub inter_w1: Tensor,
    pub inter_w2: Tensor,
    pub inter_temp: Tensor,
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    pub aux_w: Tensor,
    pub aux_b: Tensor,
}

impl ParamTensors {
    pub fn ordered(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = vec![&self.ln_gamma, &self.ln_beta, &self.pos];
        for head in &self.heads {
            out.push(&head.wq);
            out.push(&head.wk);
            out.push(&head.wv);
        }
        out.push(&self.wo);
        out.push(&self.inter_w1);
        out.push(&self.inter_w2);
        out.push(&self.inter_temp);
        out.push(&self.fuse_w);
        out.push(&self.fuse_b);
        out.push(&self.aux_w);
        out.push(&self.aux_b);
        out
    }

    /// Gradients in canonical order; parameters without a gradient path
    /// yield zeros.
    pub fn grads(&self) -> Vec<Matrix> {
        self.ordered()
            .into_iter()
            .map(|t| {
                let (r, c) = t.shape();
                t.grad().unwrap_or_else(|| Matrix::zeros(r, c))
            })
            .collect()
    }
}

/// Per-video temporal modeling plus the attention matrices of every head
/// (each row-stochastic). Output shape equals input shape and the residual
/// skips the positional table, so zero weights give exact identity.
pub fn intra_relation_with_attention(
    f: &Tensor,
    p: &ParamTensors,
) -> Result<(Tensor, Vec<Matrix>)> {
    let (t, c) = f.shape();
    let (t_max, pc) = p.pos.shape();
    if c != pc {
        return Err(Error::ShapeMismatch(format!(
            "sequence has {c} channels, model expects {pc}"
        )));
    }
    if t > t_max {
        return Err(Error::ShapeMismatch(format!(
            "sequence length {t} exceeds positional table length {t_max}"
        )));
    }

    let with_pos = f.add(&p.pos.slice_rows(0, t)?)?;
    let normed = with_pos
        .layer_norm_rows()
        .mul_elem(&p.ln_gamma.broadcast_row(t)?)?
        .add(&p.ln_beta.broadcast_row(t)?)?;

    let mut attentions = Vec::with_capacity(p.heads.len());
    let mut concat: Option<Tensor> = None;
    for head in &p.heads {
        let q = normed.matmul(&head.wq)?;
        let k = normed.matmul(&head.wk)?;
        let v = normed.matmul(&head.wv)?;
        let dk = q.shape().1 as f64;
        let attn = q.matmul(&k.transpose())?.scale(1.0 / dk.sqrt()).row_softmax();
        attentions.push(attn.value());
        let out = attn.matmul(&v)?;
        concat = Some(match concat {
            Some(prev) => prev.concat_cols(&out)?,
            None => out,
        });
    }
    let concat = concat.expect("at least one head");
    let msa = concat.matmul(&p.wo)?;
    Ok((f.add(&msa)?, attentions))
}

/// [`intra_relation_with_attention`] without the attention snapshots.
pub fn intra_relation(f: &Tensor, p: &ParamTensors) -> Result<Tensor> {
    intra_relation_with_attention(f, p).map(|(out, _)| out)
}

/// Inter-relation output: per-video episode-aware summaries, the pooled
/// per-video vectors they were built from, and the correlation weights.
pub struct InterRelation {
    /// One 1 x C summary per input video.
    pub enhanced: Vec<Tensor>,
    /// Temporally pooled per-video vectors (1 x C each).
    pub pooled: Vec<Tensor>,
    /// Mixing weights: one row per video, one column per pool member.
    pub correlation: Tensor,
}

/// Cross-video enhancement. Every video's temporally pooled feature is
/// scored against the first `pool_len` videos (the pool) and replaced by
/// the correlation-weighted sum of pooled pool features.
pub fn inter_relation(
    feats: &[Tensor],
    p: &ParamTensors,
    kappa_norm: KappaNorm,
    pool_len: usize,
) -> Result<InterRelation> {
    if feats.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    if pool_len == 0 || pool_len > feats.len() {
        return Err(Error::Cardinality(format!(
            "pool length {pool_len} out of range for {} videos",
            feats.len()
        )));
    }

    let pooled: Vec<Tensor> = feats.iter().map(|f| f.global_avg_pool_rows()).collect();
    let mut stacked = pooled[0].clone();
    for v in &pooled[1..] {
        stacked = stacked.concat_rows(v)?;
    }
    let pool = stacked.slice_rows(0, pool_len)?;

    // The scorer sees standardized pooled features so its raw scores are
    // O(1) regardless of the feature scale; the mixed output below still
    // uses the raw pooled features.
    let left = stacked.layer_norm_rows().matmul(&p.inter_w1)?;
    let right = pool.layer_norm_rows().matmul(&p.inter_w2)?;
    let scale = 1.0 / (p.inter_w1.shape().1 as f64).sqrt();
    let scores = left
        .matmul(&right.transpose())?
        .scale(scale)
        .scale_by_scalar(&p.inter_temp)?;
    let correlation = match kappa_norm {
        KappaNorm::Sigmoid => scores.sigmoid(),
        KappaNorm::RowSoftmax => scores.row_softmax(),
    };

    let mixed = correlation.matmul(&pool)?;
    let enhanced = (0..feats.len())
        .map(|i| mixed.slice_rows(i, 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(InterRelation { enhanced, pooled, correlation })
}

/// Expand-concatenate-fuse: broadcast the 1 x C summary to T rows, append
/// it channel-wise to the T x C frame features, and project back to T x C.
pub fn aggregate(f_a: &Tensor, f_e: &Tensor, p: &ParamTensors) -> Result<Tensor> {
    let t = f_a.shape().0;
    let expanded = f_e.broadcast_row(t)?;
    let joined = f_a.concat_cols(&expanded)?;
    joined.matmul(&p.fuse_w)?.add(&p.fuse_b.broadcast_row(t)?)
}

/// Episode-level embeddings: enhanced supports and queries (input shape
/// preserved), the pooled per-video vectors, and a snapshot of the
/// correlation weights (rows ordered supports then queries).
pub struct EpisodeEmbeddings {
    pub support_enhanced: Vec<Tensor>,
    pub query_enhanced: Vec<Tensor>,
    pub pooled: Vec<Tensor>,
    pub correlation: Matrix,
}

/// Runs the full relation pipeline over an episode on the tape `p` was
/// registered on. Sequences enter in support order then query order; the
/// unlabeled set is not embedded here (pseudo-labeling presents unlabeled
/// videos as queries instead).
pub fn forward_episode(
    e: &Episode,
    p: &ParamTensors,
    options: RelationOptions,
) -> Result<EpisodeEmbeddings> {
    let n_support = e.support.len();
    let sequences: Vec<&Matrix> = e
        .support
        .iter()
        .map(|(f, _)| &f.frames)
        .chain(e.query.iter().map(|(f, _)| &f.frames))
        .collect();
    if sequences.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    let (t, c) = sequences[0].shape();
    for s in &sequences {
        if s.shape() != (t, c) {
            return Err(Error::ShapeMismatch(format!(
                "episode mixes {}x{} and {t}x{c} sequences",
                s.rows(),
                s.cols()
            )));
        }
    }

    let tape = p.ln_gamma.tape();
    let intra: Vec<Tensor> = sequences
        .iter()
        .map(|s| intra_relation(&tape.constant((*s).clone()), p))
        .collect::<Result<_>>()?;

    let pool_len = match options.pool_scope {
        PoolScope::SupportAndQuery => intra.len(),
        PoolScope::SupportOnly => n_support,
    };
    let inter = inter_relation(&intra, p, options.kappa_norm, pool_len)?;

    let mut enhanced = Vec::with_capacity(intra.len());
    for (f_a, f_e) in intra.iter().zip(inter.enhanced.iter()) {
        enhanced.push(aggregate(f_a, f_e, p)?);
    }
    let query_enhanced = enhanced.split_off(n_support);
    Ok(EpisodeEmbeddings {
        support_enhanced: enhanced,
        query_enhanced,
        pooled: inter.pooled,
        correlation: inter.correlation.value(),
    })
}

/// Evaluation-mode forward pass: fresh tape, no gradients recorded.
pub fn forward_episode_eval(
    e: &Episode,
    params: &RelationModelParams,
    options: RelationOptions,
) -> Result<EpisodeEmbeddings> {
    let tape = Tape::new();
    let p = params.to_tape(&tape, false);
    forward_episode(e, &p, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FeatureSequence;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, rng.uniform_range(-1.0, 1.0));
            }
        }
        m
    }

    fn dims() -> ModelDims {
        ModelDims::new(8, 2, 4, 6, 3).unwrap()
    }

    #[test]
    fn head_count_must_divide_channels() {
        assert!(ModelDims::new(8, 3, 4, 6, 3).is_err());
    }

    #[test]
    fn identity_params_pass_input_through_intra() {
        let mut rng = Rng::new(300);
        let params = RelationModelParams::identity(&dims());
        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let f = tape.constant(random_matrix(&mut rng, 4, 8));
        let out = intra_relation(&f, &p).unwrap();
        assert_eq!(out.value(), f.value());
    }

    #[test]
    fn single_frame_attention_is_one() {
        let mut rng = Rng::new(301);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let f = tape.constant(random_matrix(&mut rng, 1, 8));
        let (_, attentions) = intra_relation_with_attention(&f, &p).unwrap();
        for attn in attentions {
            assert_eq!(attn.shape(), (1, 1));
            assert!((attn.get(0, 0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = Rng::new(302);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let f = tape.constant(random_matrix(&mut rng, 4, 8));
        let (_, attentions) = intra_relation_with_attention(&f, &p).unwrap();
        assert_eq!(attentions.len(), 2);
        for attn in attentions {
            for r in 0..attn.rows() {
                let total: f64 = attn.row(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn intra_matches_straight_line_attention_oracle() {
        // Dense-loop scaled dot-product attention, no tape involved.
        let mut rng = Rng::new(303);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let x = random_matrix(&mut rng, 4, 8);

        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let out = intra_relation(&tape.constant(x.clone()), &p).unwrap().value();

        // Oracle: x + pos, layer norm, per-head attention, concat, output
        // projection, residual from raw x.
        let t = 4;
        let c = 8;
        let mut normed = Matrix::zeros(t, c);
        for r in 0..t {
            let row: Vec<f64> =
                (0..c).map(|j| x.get(r, j) + params.pos.get(r, j)).collect();
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for j in 0..c {
                normed.set(
                    r,
                    j,
                    (row[j] - mean) * inv * params.ln_gamma.get(0, j)
                        + params.ln_beta.get(0, j),
                );
            }
        }
        let mut concat = Matrix::zeros(t, c);
        for (h, head) in params.heads.iter().enumerate() {
            let dk = c / 2;
            let q = normed.matmul(&head.wq).unwrap();
            let k = normed.matmul(&head.wk).unwrap();
            let v = normed.matmul(&head.wv).unwrap();
            for a in 0..t {
                let mut weights = vec![0.0; t];
                for b in 0..t {
                    let mut dot = 0.0;
                    for j in 0..dk {
                        dot += q.get(a, j) * k.get(b, j);
                    }
                    weights[b] = dot / (dk as f64).sqrt();
                }
                let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for j in 0..dk {
                    let mut acc = 0.0;
                    for b in 0..t {
                        acc += exps[b] / total * v.get(b, j);
                    }
                    concat.set(a, h * dk + j, acc);
                }
            }
        }
        let expected = x.add(&concat.matmul(&params.wo).unwrap()).unwrap();
        for r in 0..t {
            for j in 0..c {
                assert!(
                    (out.get(r, j) - expected.get(r, j)).abs() < 1e-10,
                    "({r},{j}): {} vs {}",
                    out.get(r, j),
                    expected.get(r, j)
                );
            }
        }
    }

    #[test]
    fn inter_single_video_softmax_weight_is_one() {
        let mut rng = Rng::new(304);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let f = tape.constant(random_matrix(&mut rng, 4, 8));
        let inter = inter_relation(&[f], &p, KappaNorm::RowSoftmax, 1).unwrap();
        let kappa = inter.correlation.value();
        assert_eq!(kappa.shape(), (1, 1));
        assert!((kappa.get(0, 0) - 1.0).abs() < 1e-12);
        let expected = inter.pooled[0].value();
        let got = inter.enhanced[0].value();
        for c in 0..8 {
            assert!((got.get(0, c) - expected.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn inter_identical_videos_split_softmax_weight() {
        let mut rng = Rng::new(305);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let m = random_matrix(&mut rng, 4, 8);
        let a = tape.constant(m.clone());
        let b = tape.constant(m);
        let inter = inter_relation(&[a, b], &p, KappaNorm::RowSoftmax, 2).unwrap();
        let kappa = inter.correlation.value();
        for r in 0..2 {
            for c in 0..2 {
                assert!((kappa.get(r, c) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inter_matches_double_loop_oracle() {
        let mut rng = Rng::new(306);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let mats: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 4, 8)).collect();
        let feats: Vec<Tensor> = mats.iter().map(|m| tape.constant(m.clone())).collect();
        let inter = inter_relation(&feats, &p, KappaNorm::Sigmoid, 3).unwrap();

        // Oracle: pool by hand, standardize for the scorer, score every
        // pair, sigmoid, weighted sum of the raw pooled vectors.
        let pooled: Vec<Vec<f64>> = mats
            .iter()
            .map(|m| (0..8).map(|c| (0..4).map(|r| m.get(r, c)).sum::<f64>() / 4.0).collect())
            .collect();
        let standardize = |v: &[f64]| -> Vec<f64> {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            v.iter().map(|x| (x - mean) * inv).collect()
        };
        let project = |v: &[f64], w: &Matrix| -> Vec<f64> {
            (0..w.cols())
                .map(|j| (0..8).map(|i| v[i] * w.get(i, j)).sum())
                .collect()
        };
        for i in 0..3 {
            let mut expected = [0.0; 8];
            for j in 0..3 {
                let pi = project(&standardize(&pooled[i]), &params.inter_w1);
                let pj = project(&standardize(&pooled[j]), &params.inter_w2);
                let score: f64 = pi.iter().zip(&pj).map(|(x, y)| x * y).sum::<f64>()
                    / (4.0f64).sqrt()
                    * params.inter_temp.scalar_value();
                let kappa = 1.0 / (1.0 + (-score).exp());
                for c in 0..8 {
                    expected[c] += kappa * pooled[j][c];
                }
            }
            let got = inter.enhanced[i].value();
            for c in 0..8 {
                assert!(
                    (got.get(0, c) - expected[c]).abs() < 1e-10,
                    "video {i} channel {c}"
                );
            }
        }
    }

    #[test]
    fn aggregate_identity_blocks() {
        let mut rng = Rng::new(307);
        let dims = dims();
        let tape = Tape::new();
        let f_a = tape.constant(random_matrix(&mut rng, 4, 8));
        let f_e = tape.constant(random_matrix(&mut rng, 1, 8));

        // Fuse = [I | 0] keeps the frame features.
        let mut params = RelationModelParams::identity(&dims);
        let p = params.to_tape(&tape, false);
        assert_eq!(aggregate(&f_a, &f_e, &p).unwrap().value(), f_a.value());

        // Fuse = [0 | I] repeats the broadcast summary on every row.
        params.fuse_w = Matrix::zeros(16, 8);
        for i in 0..8 {
            params.fuse_w.set(8 + i, i, 1.0);
        }
        let p = params.to_tape(&tape, false);
        let out = aggregate(&f_a, &f_e, &p).unwrap().value();
        for r in 0..4 {
            for c in 0..8 {
                assert_eq!(out.get(r, c), f_e.value().get(0, c));
            }
        }
    }

    #[test]
    fn aggregate_matches_per_row_oracle() {
        let mut rng = Rng::new(308);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let f_a = random_matrix(&mut rng, 4, 8);
        let f_e = random_matrix(&mut rng, 1, 8);
        let out = aggregate(&tape.constant(f_a.clone()), &tape.constant(f_e.clone()), &p)
            .unwrap()
            .value();
        for r in 0..4 {
            for j in 0..8 {
                let mut acc = params.fuse_b.get(0, j);
                for i in 0..8 {
                    acc += f_a.get(r, i) * params.fuse_w.get(i, j);
                    acc += f_e.get(0, i) * params.fuse_w.get(8 + i, j);
                }
                assert!((out.get(r, j) - acc).abs() < 1e-10);
            }
        }
    }

    fn episode(rng: &mut Rng) -> Episode {
        let mk = |rng: &mut Rng, id: &str| {
            FeatureSequence::new(random_matrix(rng, 4, 8), id).unwrap()
        };
        Episode {
            support: vec![(mk(rng, "s0"), 0), (mk(rng, "s1"), 1)],
            query: vec![(mk(rng, "q0"), Some(0))],
            unlabeled: Vec::new(),
            n_way: 2,
            k_shot: 1,
        }
    }

    #[test]
    fn forward_identity_params_returns_inputs() {
        let mut rng = Rng::new(309);
        let e = episode(&mut rng);
        let params = RelationModelParams::identity(&dims());
        let emb = forward_episode_eval(&e, &params, RelationOptions::default()).unwrap();
        assert_eq!(emb.support_enhanced[0].value(), e.support[0].0.frames);
        assert_eq!(emb.support_enhanced[1].value(), e.support[1].0.frames);
        assert_eq!(emb.query_enhanced[0].value(), e.query[0].0.frames);
    }

    #[test]
    fn forward_shapes_preserved() {
        let mut rng = Rng::new(310);
        let e = episode(&mut rng);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let emb = forward_episode_eval(&e, &params, RelationOptions::default()).unwrap();
        assert_eq!(emb.support_enhanced.len(), 2);
        assert_eq!(emb.query_enhanced.len(), 1);
        for t in emb.support_enhanced.iter().chain(&emb.query_enhanced) {
            assert_eq!(t.shape(), (4, 8));
        }
        assert_eq!(emb.correlation.shape(), (3, 3));
    }

    #[test]
    fn pool_scope_changes_query_embedding() {
        let mut rng = Rng::new(311);
        let e = episode(&mut rng);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let both = forward_episode_eval(
            &e,
            &params,
            RelationOptions { pool_scope: PoolScope::SupportAndQuery, ..Default::default() },
        )
        .unwrap();
        let support_only = forward_episode_eval(
            &e,
            &params,
            RelationOptions { pool_scope: PoolScope::SupportOnly, ..Default::default() },
        )
        .unwrap();
        assert_eq!(both.correlation.shape(), (3, 3));
        assert_eq!(support_only.correlation.shape(), (3, 2));
        assert_ne!(
            both.query_enhanced[0].value(),
            support_only.query_enhanced[0].value()
        );
    }

    #[test]
    fn permuting_videos_permutes_inter_outputs() {
        let mut rng = Rng::new(312);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let mats: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 4, 8)).collect();

        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let feats: Vec<Tensor> = mats.iter().map(|m| tape.constant(m.clone())).collect();
        let base = inter_relation(&feats, &p, KappaNorm::Sigmoid, 3).unwrap();

        let perm = [2usize, 0, 1];
        let tape2 = Tape::new();
        let p2 = params.to_tape(&tape2, false);
        let feats2: Vec<Tensor> =
            perm.iter().map(|&i| tape2.constant(mats[i].clone())).collect();
        let permuted = inter_relation(&feats2, &p2, KappaNorm::Sigmoid, 3).unwrap();

        for (new_pos, &old_pos) in perm.iter().enumerate() {
            // Correlation entries are permuted exactly; the mixed outputs
            // re-order a floating-point sum, so compare to 1e-12.
            let got = permuted.enhanced[new_pos].value();
            let want = base.enhanced[old_pos].value();
            for c in 0..8 {
                assert!((got.get(0, c) - want.get(0, c)).abs() < 1e-12);
            }
            for (new_col, &old_col) in perm.iter().enumerate() {
                assert_eq!(
                    permuted.correlation.value().get(new_pos, new_col),
                    base.correlation.value().get(old_pos, old_col)
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = Rng::new(313);
        let params = RelationModelParams::init(&dims(), &mut rng);
        let bytes = params.to_bytes();
        let restored = RelationModelParams::from_bytes(&bytes).unwrap();
        // Serialization casts through f32, so a second roundtrip is exact.
        assert_eq!(restored.to_bytes(), bytes);
        assert_eq!(restored.dims(), params.dims());
    }

    #[test]
    fn checkpoint_bad_magic() {
        let mut bytes = RelationModelParams::identity(&dims()).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            RelationModelParams::from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn checkpoint_truncated() {
        let bytes = RelationModelParams::identity(&dims()).to_bytes();
        assert!(matches!(
            RelationModelParams::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::TruncatedFile { .. })
        ));
    }
}
