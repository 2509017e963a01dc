//! Training objective: cross-entropy over negative-distance logits, an
//! auxiliary dataset-level classification loss, and temporal-coherence
//! regularization of the enhanced features.
//!
//! Three coherence forms are implemented. The inverse-difference-moment form
//! pulls every frame pair together with weight 1/((a-b)^2+1). The hard-margin
//! form pulls adjacent frames together and pushes all non-adjacent pairs
//! apart by one fixed margin. The smooth form combines them: pairs within a
//! window delta keep the inverse-difference weighting, and pairs beyond it
//! are pushed apart by a margin that grows smoothly with the gap,
//! m_ab = 1 - exp(-(|a-b|-delta)^2 / (2 sigma^2)).
//!
//! All pair sums run over ordered pairs, so symmetric terms count twice.
//! Distances inside the regularizers are cosine distances, matching the
//! set-matching metric.

use std::str::FromStr;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::relation::{EpisodeEmbeddings, ParamTensors};
use crate::types::Episode;

/// The implemented temporal-coherence regularizers. The serialized names
/// match the CLI `--coherence` vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CoherenceKind {
    #[serde(rename = "idm")]
    Idm,
    #[serde(rename = "hard")]
    HardMargin,
    #[serde(rename = "smooth")]
    SmoothTcr,
}

impl CoherenceKind {
    pub fn name(&self) -> &'static str {
        match self {
            CoherenceKind::Idm => "idm",
            CoherenceKind::HardMargin => "hard",
            CoherenceKind::SmoothTcr => "smooth",
        }
    }
}

impl FromStr for CoherenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idm" => Ok(CoherenceKind::Idm),
            "hard" => Ok(CoherenceKind::HardMargin),
            "smooth" => Ok(CoherenceKind::SmoothTcr),
            other => Err(Error::InvalidConfig(format!("unknown coherence kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for CoherenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss-combination weights and regularizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_aux: f64,
    pub lambda_tcr: f64,
    /// Hard-margin size, in (0, 1].
    pub margin: f64,
    /// Smooth-coherence window; must stay below the sequence length.
    pub delta: usize,
    /// Width of the smooth margin ramp.
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_aux: 1.0, lambda_tcr: 0.1, margin: 0.5, delta: 2, sigma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_aux < 0.0 || self.lambda_tcr < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "margin must lie in (0, 1], got {}",
                self.margin
            )));
        }
        if self.delta == 0 {
            return Err(Error::InvalidConfig("delta must be at least 1".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Mean over queries of -log softmax(logits)[label].
pub fn episode_ce_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (q, n) = logits.shape();
    if labels.len() != q {
        return Err(Error::Cardinality(format!(
            "{} labels for {} logit rows",
            labels.len(),
            q
        )));
    }
    let mut one_hot = Matrix::zeros(q, n);
    for (row, &label) in labels.iter().enumerate() {
        if label >= n {
            return Err(Error::LabelOutOfRange { label, classes: n });
        }
        one_hot.set(row, label, 1.0);
    }
    let mask = logits.tape().constant(one_hot);
    Ok(logits
        .row_log_softmax()
        .mul_elem(&mask)?
        .sum()
        .scale(-1.0 / q as f64))
}

/// Cross-entropy of the auxiliary head over temporally pooled embeddings
/// (one 1 x C vector per video) against dataset-level class labels.
pub fn aux_semantic_loss(
    pooled: &[Tensor],
    global_labels: &[usize],
    params: &ParamTensors,
) -> Result<Tensor> {
    if pooled.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    if pooled.len() != global_labels.len() {
        return Err(Error::Cardinality(format!(
            "{} pooled embeddings for {} labels",
            pooled.len(),
            global_labels.len()
        )));
    }
    let mut stacked = pooled[0].clone();
    for t in &pooled[1..] {
        stacked = stacked.concat_rows(t)?;
    }
    let rows = pooled.len();
    let logits = stacked
        .matmul(&params.aux_w)?
        .add(&params.aux_b.broadcast_row(rows)?)?;
    episode_ce_loss(&logits, global_labels)
}

fn pair_distances(f: &Tensor) -> Result<Tensor> {
    Ok(f.cosine_similarity_rows(f)?.scale(-1.0).add_scalar(1.0))
}

fn require_frames(f: &Tensor, min: usize) -> Result<usize> {
    let t = f.shape().0;
    if t < min {
        return Err(Error::TooShort { min, got: t });
    }
    Ok(t)
}

/// Inverse-difference-moment coherence: sum over all ordered pairs (a, b)
/// of d(f_a, f_b) / ((a-b)^2 + 1).
pub fn idm_regularizer(f: &Tensor) -> Result<Tensor> {
    let t = require_frames(f, 2)?;
    let mut weights = Matrix::zeros(t, t);
    for a in 0..t {
        for b in 0..t {
            let gap = a.abs_diff(b) as f64;
            weights.set(a, b, 1.0 / (gap * gap + 1.0));
        }
    }
    let w = f.tape().constant(weights);
    Ok(pair_distances(f)?.mul_elem(&w)?.sum())
}

/// Hard-margin coherence: adjacent ordered pairs contribute their distance,
/// pairs further apart contribute max(0, margin - distance).
pub fn hard_margin_regularizer(f: &Tensor, margin: f64) -> Result<Tensor> {
    let t = require_frames(f, 2)?;
    let mut adjacent = Matrix::zeros(t, t);
    let mut separated = Matrix::zeros(t, t);
    for a in 0..t {
        for b in 0..t {
            match a.abs_diff(b) {
                0 => {}
                1 => adjacent.set(a, b, 1.0),
                _ => separated.set(a, b, 1.0),
            }
        }
    }
    let tape = f.tape();
    let d = pair_distances(f)?;
    let pull = d.mul_elem(&tape.constant(adjacent))?.sum();
    let push = d
        .scale(-1.0)
        .add_scalar(margin)
        .relu()
        .mul_elem(&tape.constant(separated))?
        .sum();
    pull.add(&push)
}

/// Margin for a frame gap beyond the window:
/// 1 - exp(-(gap - delta)^2 / (2 sigma^2)). Non-decreasing in the gap with
/// limit 1.
pub fn smooth_margin(gap: usize, delta: usize, sigma: f64) -> f64 {
    debug_assert!(gap > delta);
    let x = (gap - delta) as f64;
    1.0 - (-x * x / (2.0 * sigma * sigma)).exp()
}

/// Smooth temporal coherence: ordered pairs with gap <= delta keep the
/// inverse-difference weighting; pairs beyond the window are pushed apart
/// by the smoothly growing margin [`smooth_margin`].
pub fn smooth_tcr_regularizer(f: &Tensor, delta: usize, sigma: f64) -> Result<Tensor> {
    let t = require_frames(f, 2)?;
    if delta == 0 || delta >= t {
        return Err(Error::BadWindow { delta, frames: t });
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }

    let mut near_weights = Matrix::zeros(t, t);
    let mut far_mask = Matrix::zeros(t, t);
    let mut far_margin = Matrix::zeros(t, t);
    for a in 0..t {
        for b in 0..t {
            let gap = a.abs_diff(b);
            if gap == 0 {
                continue;
            }
            if gap <= delta {
                let g = gap as f64;
                near_weights.set(a, b, 1.0 / (g * g + 1.0));
            } else {
                far_mask.set(a, b, 1.0);
                far_margin.set(a, b, smooth_margin(gap, delta, sigma));
            }
        }
    }
    let tape = f.tape();
    let d = pair_distances(f)?;
    let pull = d.mul_elem(&tape.constant(near_weights))?.sum();
    let push = tape
        .constant(far_margin)
        .sub(&d)?
        .relu()
        .mul_elem(&tape.constant(far_mask))?
        .sum();
    pull.add(&push)
}

/// Dispatch over [`CoherenceKind`].
pub fn coherence_regularizer(
    f: &Tensor,
    kind: CoherenceKind,
    weights: &LossWeights,
) -> Result<Tensor> {
    match kind {
        CoherenceKind::Idm => idm_regularizer(f),
        CoherenceKind::HardMargin => hard_margin_regularizer(f, weights.margin),
        CoherenceKind::SmoothTcr => smooth_tcr_regularizer(f, weights.delta, weights.sigma),
    }
}

/// Raw component values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub aux: f64,
    pub tcr: f64,
    pub total: f64,
}

/// Combined objective: query cross-entropy, plus lambda_aux times the
/// auxiliary semantic loss over every video with a known dataset-level
/// label, plus lambda_tcr times the mean coherence regularizer over all
/// enhanced features (supports and queries alike). Component terms with a
/// zero weight are skipped entirely.
pub fn total_loss(
    episode: &Episode,
    emb: &EpisodeEmbeddings,
    logits: &Tensor,
    params: &ParamTensors,
    global_labels: &[Option<usize>],
    weights: &LossWeights,
    coherence: Option<CoherenceKind>,
) -> Result<(Tensor, LossTerms)> {
    weights.validate()?;
    let query_labels: Vec<usize> = episode
        .query
        .iter()
        .map(|(f, label)| {
            label.ok_or_else(|| {
                Error::Cardinality(format!("query `{}` has no label for training", f.video_id))
            })
        })
        .collect::<Result<_>>()?;

    let enhanced: Vec<&Tensor> = emb
        .support_enhanced
        .iter()
        .chain(emb.query_enhanced.iter())
        .collect();
    if global_labels.len() != enhanced.len() {
        return Err(Error::Cardinality(format!(
            "{} global labels for {} videos",
            global_labels.len(),
            enhanced.len()
        )));
    }

    let ce = episode_ce_loss(logits, &query_labels)?;
    let mut total = ce.clone();
    let mut terms = LossTerms { ce: ce.scalar_value(), aux: 0.0, tcr: 0.0, total: 0.0 };

    if weights.lambda_aux > 0.0 {
        let mut pooled = Vec::new();
        let mut labels = Vec::new();
        for (t, label) in enhanced.iter().zip(global_labels.iter()) {
            if let Some(label) = label {
                pooled.push(t.global_avg_pool_rows());
                labels.push(*label);
            }
        }
        if !pooled.is_empty() {
            let aux = aux_semantic_loss(&pooled, &labels, params)?;
            terms.aux = aux.scalar_value();
            total = total.add(&aux.scale(weights.lambda_aux))?;
        }
    }

    if let Some(kind) = coherence {
        if weights.lambda_tcr > 0.0 {
            let mut acc: Option<Tensor> = None;
            for t in &enhanced {
                let reg = coherence_regularizer(t, kind, weights)?;
                acc = Some(match acc {
                    Some(prev) => prev.add(&reg)?,
                    None => reg,
                });
            }
            let mean = acc
                .ok_or(Error::EmptyEpisode)?
                .scale(1.0 / enhanced.len() as f64);
            terms.tcr = mean.scalar_value();
            total = total.add(&mean.scale(weights.lambda_tcr))?;
        }
    }

    terms.total = total.scalar_value();
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::matrix::cosine_similarity;
    use crate::rng::Rng;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, rng.uniform_range(-1.0, 1.0));
            }
        }
        m
    }

    #[test]
    fn ce_uniform_logits_is_ln_n() {
        let tape = Tape::new();
        let logits = tape.constant(Matrix::zeros(2, 5));
        let loss = episode_ce_loss(&logits, &[0, 3]).unwrap().scalar_value();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_saturated_logits_vanish() {
        let tape = Tape::new();
        let mut m = Matrix::zeros(1, 4);
        m.set(0, 2, 20.0);
        let logits = tape.constant(m);
        let loss = episode_ce_loss(&logits, &[2]).unwrap().scalar_value();
        assert!(loss < 1e-6);
    }

    #[test]
    fn ce_label_out_of_range() {
        let tape = Tape::new();
        let logits = tape.constant(Matrix::zeros(1, 3));
        assert!(matches!(
            episode_ce_loss(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn ce_matches_loop_oracle() {
        let mut rng = Rng::new(400);
        let logits = random_matrix(&mut rng, 3, 4);
        let labels = [2usize, 0, 3];
        let tape = Tape::new();
        let loss = episode_ce_loss(&tape.constant(logits.clone()), &labels)
            .unwrap()
            .scalar_value();

        let mut expected = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            expected += lse - row[label];
        }
        expected /= 3.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    fn param_tensors(tape: &Tape, c: usize, g: usize) -> ParamTensors {
        use crate::relation::{ModelDims, RelationModelParams};
        let dims = ModelDims::new(c, 1, c, 4, g).unwrap();
        RelationModelParams::identity(&dims).to_tape(tape, false)
    }

    #[test]
    fn aux_zero_head_is_ln_g() {
        let tape = Tape::new();
        let params = param_tensors(&tape, 4, 7);
        let pooled = vec![tape.constant(Matrix::filled(1, 4, 0.3))];
        let loss = aux_semantic_loss(&pooled, &[5], &params).unwrap().scalar_value();
        assert!((loss - 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aux_single_class_is_zero() {
        let tape = Tape::new();
        let params = param_tensors(&tape, 4, 1);
        let pooled = vec![tape.constant(Matrix::filled(1, 4, 0.3))];
        let loss = aux_semantic_loss(&pooled, &[0], &params).unwrap().scalar_value();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn aux_matches_loop_oracle() {
        use crate::relation::{ModelDims, RelationModelParams};
        let mut rng = Rng::new(401);
        let dims = ModelDims::new(4, 1, 4, 4, 3).unwrap();
        let mut params = RelationModelParams::identity(&dims);
        params.aux_w = random_matrix(&mut rng, 4, 3);
        params.aux_b = random_matrix(&mut rng, 1, 3);

        let vecs: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut rng, 1, 4)).collect();
        let labels = [1usize, 2];

        let tape = Tape::new();
        let pt = params.to_tape(&tape, false);
        let pooled: Vec<_> = vecs.iter().map(|v| tape.constant(v.clone())).collect();
        let loss = aux_semantic_loss(&pooled, &labels, &pt).unwrap().scalar_value();

        let mut expected = 0.0;
        for (v, &label) in vecs.iter().zip(labels.iter()) {
            let logits: Vec<f64> = (0..3)
                .map(|j| {
                    params.aux_b.get(0, j)
                        + (0..4).map(|i| v.get(0, i) * params.aux_w.get(i, j)).sum::<f64>()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            expected += lse - logits[label];
        }
        expected /= 2.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn idm_identical_frames_is_zero() {
        let tape = Tape::new();
        let f = tape.constant(Matrix::filled(3, 4, 0.7));
        assert_eq!(idm_regularizer(&f).unwrap().scalar_value(), 0.0);
    }

    #[test]
    fn idm_two_orthogonal_frames() {
        let tape = Tape::new();
        let f = tape.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let loss = idm_regularizer(&f).unwrap().scalar_value();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn idm_requires_two_frames() {
        let tape = Tape::new();
        let f = tape.constant(Matrix::filled(1, 4, 1.0));
        assert!(matches!(
            idm_regularizer(&f),
            Err(Error::TooShort { min: 2, got: 1 })
        ));
    }

    fn idm_oracle(f: &Matrix) -> f64 {
        let t = f.rows();
        let mut total = 0.0;
        for a in 0..t {
            for b in 0..t {
                let gap = (a as f64 - b as f64).abs();
                let d = 1.0 - cosine_similarity(f.row(a), f.row(b), 1e-8);
                total += d / (gap * gap + 1.0);
            }
        }
        total
    }

    #[test]
    fn idm_matches_loop_oracle() {
        let mut rng = Rng::new(402);
        let f = random_matrix(&mut rng, 4, 5);
        let tape = Tape::new();
        let loss = idm_regularizer(&tape.constant(f.clone())).unwrap().scalar_value();
        assert!((loss - idm_oracle(&f)).abs() < 1e-12);
    }

    #[test]
    fn hard_margin_identical_frames() {
        let tape = Tape::new();
        let f = tape.constant(Matrix::filled(3, 4, 0.7));
        let loss = hard_margin_regularizer(&f, 0.5).unwrap().scalar_value();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_margin_zero_margin_drops_push_term() {
        let mut rng = Rng::new(403);
        let f = random_matrix(&mut rng, 4, 5);
        let tape = Tape::new();
        let ft = tape.constant(f.clone());
        let loss = hard_margin_regularizer(&ft, f64::MIN_POSITIVE).unwrap().scalar_value();
        let mut adjacent_only = 0.0;
        for a in 0..4usize {
            for b in 0..4usize {
                if a.abs_diff(b) == 1 {
                    adjacent_only += 1.0 - cosine_similarity(f.row(a), f.row(b), 1e-8);
                }
            }
        }
        assert!((loss - adjacent_only).abs() < 1e-12);
    }

    fn hard_margin_oracle(f: &Matrix, m: f64) -> f64 {
        let t = f.rows();
        let mut total = 0.0;
        for a in 0..t {
            for b in 0..t {
                let d = 1.0 - cosine_similarity(f.row(a), f.row(b), 1e-8);
                match a.abs_diff(b) {
                    0 => {}
                    1 => total += d,
                    _ => total += (m - d).max(0.0),
                }
            }
        }
        total
    }

    #[test]
    fn hard_margin_matches_loop_oracle() {
        let mut rng = Rng::new(404);
        let f = random_matrix(&mut rng, 4, 5);
        let tape = Tape::new();
        let loss =
            hard_margin_regularizer(&tape.constant(f.clone()), 0.5).unwrap().scalar_value();
        assert!((loss - hard_margin_oracle(&f, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn smooth_margin_value_and_monotonicity() {
        let m = smooth_margin(3, 2, 1.0);
        assert!((m - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
        let mut last = 0.0;
        for gap in 3..30 {
            let m = smooth_margin(gap, 2, 1.0);
            assert!(m >= last, "margin not monotone at gap {gap}");
            last = m;
        }
        assert!((last - 1.0).abs() < 1e-9, "margin should approach 1, got {last}");
    }

    #[test]
    fn smooth_tcr_identical_frames_pays_far_margins() {
        let tape = Tape::new();
        let f = tape.constant(Matrix::filled(4, 3, 0.5));
        let loss = smooth_tcr_regularizer(&f, 2, 1.0).unwrap().scalar_value();
        // Only the ordered pairs with gap 3 contribute, each the full margin.
        let expected = 2.0 * smooth_margin(3, 2, 1.0);
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn smooth_tcr_window_boundary_uses_pull_branch() {
        // With delta = T-1 no pair exceeds the window; gap == delta pairs
        // use the inverse-difference weighting.
        let mut rng = Rng::new(405);
        let f = random_matrix(&mut rng, 3, 4);
        let tape = Tape::new();
        let loss =
            smooth_tcr_regularizer(&tape.constant(f.clone()), 2, 1.0).unwrap().scalar_value();
        let mut expected = 0.0;
        for a in 0..3usize {
            for b in 0..3usize {
                let gap = a.abs_diff(b);
                if gap >= 1 {
                    let d = 1.0 - cosine_similarity(f.row(a), f.row(b), 1e-8);
                    expected += d / ((gap * gap) as f64 + 1.0);
                }
            }
        }
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn smooth_tcr_rejects_bad_window() {
        let tape = Tape::new();
        let f = tape.constant(Matrix::filled(4, 3, 0.5));
        assert!(matches!(
            smooth_tcr_regularizer(&f, 4, 1.0),
            Err(Error::BadWindow { delta: 4, frames: 4 })
        ));
    }

    fn smooth_oracle(f: &Matrix, delta: usize, sigma: f64) -> f64 {
        let t = f.rows();
        let mut total = 0.0;
        for a in 0..t {
            for b in 0..t {
                let gap = a.abs_diff(b);
                if gap == 0 {
                    continue;
                }
                let d = 1.0 - cosine_similarity(f.row(a), f.row(b), 1e-8);
                if gap <= delta {
                    total += d / ((gap * gap) as f64 + 1.0);
                } else {
                    let x = (gap - delta) as f64;
                    let m = 1.0 - (-x * x / (2.0 * sigma * sigma)).exp();
                    total += (m - d).max(0.0);
                }
            }
        }
        total
    }

    #[test]
    fn smooth_tcr_matches_loop_oracle() {
        let mut rng = Rng::new(406);
        let f = random_matrix(&mut rng, 6, 5);
        let tape = Tape::new();
        let loss =
            smooth_tcr_regularizer(&tape.constant(f.clone()), 2, 1.0).unwrap().scalar_value();
        assert!((loss - smooth_oracle(&f, 2, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn regularizers_nonnegative_and_vanish_on_repeats() {
        let mut rng = Rng::new(407);
        for _ in 0..10 {
            let f = random_matrix(&mut rng, 5, 4);
            let tape = Tape::new();
            let ft = tape.constant(f);
            assert!(idm_regularizer(&ft).unwrap().scalar_value() >= 0.0);
            assert!(hard_margin_regularizer(&ft, 0.5).unwrap().scalar_value() >= 0.0);
            assert!(smooth_tcr_regularizer(&ft, 2, 1.0).unwrap().scalar_value() >= 0.0);
        }
        // A single frame repeated: the IDM form and the pull branch of the
        // smooth form are exactly zero.
        let tape = Tape::new();
        let f = tape.constant(Matrix::filled(3, 4, 0.9));
        assert_eq!(idm_regularizer(&f).unwrap().scalar_value(), 0.0);
        let loss = smooth_tcr_regularizer(&f, 2, 1.0).unwrap().scalar_value();
        assert_eq!(loss, 0.0, "no far pairs at T=3, delta=2");
    }
}
