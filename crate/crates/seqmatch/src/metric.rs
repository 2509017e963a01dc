//! Frame-set distances between sequences.
//!
//! A video pair is compared through its frame-distance matrix (pairwise
//! cosine distances). On top of that matrix live the set-matching measures:
//! the standard Hausdorff distance (max over per-frame minima, optionally
//! bidirectional), the directed modified Hausdorff distance (mean over
//! per-frame minima), and the bidirectional mean Hausdorff metric that sums
//! both directed means. Two alignment baselines are included for
//! comparison: frame-by-frame diagonal matching and classic DTW.
//!
//! Everything exists in two forms: plain-matrix functions used during
//! evaluation and the `match` command, and tape composites used inside the
//! training loss (min is differentiable almost everywhere; ties route the
//! subgradient to the lowest index).

use std::str::FromStr;

use crate::autograd::{self, Tensor, COSINE_EPS};
use crate::error::{Error, Result};
use crate::matrix::{cosine_similarity, Matrix};
use crate::relation::EpisodeEmbeddings;
use crate::types::Episode;

/// Pairwise frame distances: entry (a, b) is the cosine distance between
/// frame a of one sequence and frame b of the other. Entries lie in [0, 2].
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    values: Matrix,
}

impl DistanceMatrix {
    /// Wraps a precomputed distance matrix. Entries must be finite and
    /// non-negative (up to rounding).
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::ShapeMismatch(
                "distance matrix contains non-finite entries".into(),
            ));
        }
        if values.data().iter().any(|&v| v < -1e-9) {
            return Err(Error::ShapeMismatch(
                "distance matrix contains negative entries".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn transposed(&self) -> DistanceMatrix {
        DistanceMatrix { values: self.values.transpose() }
    }
}

/// The implemented distance measures over a frame-distance matrix. The
/// serialized names match the CLI `--metric` vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MetricKind {
    /// Directed Hausdorff: max over rows of the per-row minimum.
    #[serde(rename = "hausdorff")]
    Hausdorff,
    /// Max of both directed Hausdorff terms.
    #[serde(rename = "bihausdorff")]
    HausdorffBidirectional,
    /// Directed modified Hausdorff: mean over rows of the per-row minimum.
    #[serde(rename = "mhd")]
    ModifiedHausdorffDirected,
    /// Bidirectional mean Hausdorff: sum of both directed means.
    #[serde(rename = "bimhm")]
    BiMhm,
    /// Frame-by-frame matching: mean of the diagonal.
    #[serde(rename = "diagonal")]
    Diagonal,
    /// Classic DTW cumulative cost normalized by (Ta + Tb).
    #[serde(rename = "dtw")]
    PlainDtw,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Hausdorff,
        MetricKind::HausdorffBidirectional,
        MetricKind::ModifiedHausdorffDirected,
        MetricKind::BiMhm,
        MetricKind::Diagonal,
        MetricKind::PlainDtw,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Hausdorff => "hausdorff",
            MetricKind::HausdorffBidirectional => "bihausdorff",
            MetricKind::ModifiedHausdorffDirected => "mhd",
            MetricKind::BiMhm => "bimhm",
            MetricKind::Diagonal => "diagonal",
            MetricKind::PlainDtw => "dtw",
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hausdorff" => Ok(MetricKind::Hausdorff),
            "bihausdorff" => Ok(MetricKind::HausdorffBidirectional),
            "mhd" => Ok(MetricKind::ModifiedHausdorffDirected),
            "bimhm" => Ok(MetricKind::BiMhm),
            "diagonal" => Ok(MetricKind::Diagonal),
            "dtw" => Ok(MetricKind::PlainDtw),
            other => Err(Error::UnknownMetric(other.into())),
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Cosine frame-distance matrix between two sequences with equal channel
/// counts: entry (a, b) = 1 - dot(x_a, y_b) / max(|x_a| * |y_b|, eps).
pub fn frame_distances(x: &Matrix, y: &Matrix) -> Result<DistanceMatrix> {
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch(format!(
            "frame_distances channel mismatch: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    let mut values = Matrix::zeros(x.rows(), y.rows());
    for a in 0..x.rows() {
        for b in 0..y.rows() {
            values.set(a, b, 1.0 - cosine_similarity(x.row(a), y.row(b), COSINE_EPS));
        }
    }
    Ok(DistanceMatrix { values })
}

fn row_min(values: &Matrix, r: usize) -> f64 {
    let mut best = f64::INFINITY;
    for c in 0..values.cols() {
        let v = values.get(r, c);
        if v < best {
            best = v;
        }
    }
    best
}

fn col_min(values: &Matrix, c: usize) -> f64 {
    let mut best = f64::INFINITY;
    for r in 0..values.rows() {
        let v = values.get(r, c);
        if v < best {
            best = v;
        }
    }
    best
}

/// Standard Hausdorff distance: max_a min_b D[a,b], and with `bidirectional`
/// the max of that and max_b min_a D[a,b].
pub fn hausdorff(d: &DistanceMatrix, bidirectional: bool) -> f64 {
    let values = &d.values;
    let forward = (0..values.rows())
        .map(|r| row_min(values, r))
        .fold(f64::NEG_INFINITY, f64::max);
    if !bidirectional {
        return forward;
    }
    let backward = (0..values.cols())
        .map(|c| col_min(values, c))
        .fold(f64::NEG_INFINITY, f64::max);
    forward.max(backward)
}

/// Directed modified Hausdorff distance: (1/Ta) sum_a min_b D[a,b].
pub fn modified_hausdorff_directed(d: &DistanceMatrix) -> f64 {
    let values = &d.values;
    let total: f64 = (0..values.rows()).map(|r| row_min(values, r)).sum();
    total / values.rows() as f64
}

/// Bidirectional mean Hausdorff metric:
/// (1/Ta) sum_a min_b D[a,b] + (1/Tb) sum_b min_a D[a,b].
///
/// Exchanging the two sequences transposes D and swaps the two terms, so
/// the result is exactly symmetric.
pub fn bi_mhm(d: &DistanceMatrix) -> f64 {
    let values = &d.values;
    let forward: f64 =
        (0..values.rows()).map(|r| row_min(values, r)).sum::<f64>() / values.rows() as f64;
    let backward: f64 =
        (0..values.cols()).map(|c| col_min(values, c)).sum::<f64>() / values.cols() as f64;
    forward + backward
}

/// Frame-by-frame baseline: mean of the diagonal. Requires a square matrix.
pub fn diagonal_distance(d: &DistanceMatrix) -> Result<f64> {
    let values = &d.values;
    if values.rows() != values.cols() {
        return Err(Error::NotSquare { rows: values.rows(), cols: values.cols() });
    }
    let total: f64 = (0..values.rows()).map(|i| values.get(i, i)).sum();
    Ok(total / values.rows() as f64)
}

/// Classic DTW baseline: cumulative cost with steps {(1,0),(0,1),(1,1)},
/// anchored at both corners, normalized by (Ta + Tb).
pub fn dtw_distance(d: &DistanceMatrix) -> f64 {
    let (cost, _) = autograd::dtw_forward(&d.values);
    cost / (d.values.rows() + d.values.cols()) as f64
}

/// Dispatches over [`MetricKind`].
pub fn metric_distance(d: &DistanceMatrix, kind: MetricKind) -> Result<f64> {
    Ok(match kind {
        MetricKind::Hausdorff => hausdorff(d, false),
        MetricKind::HausdorffBidirectional => hausdorff(d, true),
        MetricKind::ModifiedHausdorffDirected => modified_hausdorff_directed(d),
        MetricKind::BiMhm => bi_mhm(d),
        MetricKind::Diagonal => diagonal_distance(d)?,
        MetricKind::PlainDtw => dtw_distance(d),
    })
}

/// Frame distances then metric in one step.
pub fn sequence_distance(x: &Matrix, y: &Matrix, kind: MetricKind) -> Result<f64> {
    metric_distance(&frame_distances(x, y)?, kind)
}

/// One row of the `match` correspondence table.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// Frame index into the first sequence, 1-based.
    pub frame: usize,
    /// Index of the nearest frame in the second sequence, 1-based; ties
    /// resolve to the lowest index.
    pub matched: usize,
    pub distance: f64,
}

/// Per-frame argmin correspondences of the first sequence against the
/// second.
pub fn frame_correspondences(d: &DistanceMatrix) -> Vec<FrameMatch> {
    let values = &d.values;
    (0..values.rows())
        .map(|r| {
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for c in 0..values.cols() {
                if values.get(r, c) < best {
                    best = values.get(r, c);
                    arg = c;
                }
            }
            FrameMatch { frame: r + 1, matched: arg + 1, distance: best }
        })
        .collect()
}

/// Frame-wise mean of each class's support sequences, preserving T x C so
/// set matching still operates on frame sets when K > 1. Supports
/// per-class counts that differ from K (augmented episodes).
pub fn class_prototypes(features: &[(Matrix, usize)], n_way: usize) -> Result<Vec<Matrix>> {
    let mut sums: Vec<Option<(Matrix, usize)>> = vec![None; n_way];
    for (f, class) in features {
        if *class >= n_way {
            return Err(Error::LabelOutOfRange { label: *class, classes: n_way });
        }
        match &mut sums[*class] {
            Some((sum, count)) => {
                *sum = sum.add(f)?;
                *count += 1;
            }
            None => sums[*class] = Some((f.clone(), 1)),
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(class, slot)| {
            let (sum, count) = slot.ok_or_else(|| {
                Error::Cardinality(format!("class {class} has no support examples"))
            })?;
            Ok(sum.scale(1.0 / count as f64))
        })
        .collect()
}

/// Negative-distance logits for every query against every class prototype:
/// a |Q| x N matrix with entry (q, c) = -distance(query_q, prototype_c).
pub fn episode_logits(
    emb: &EpisodeEmbeddings,
    episode: &Episode,
    kind: MetricKind,
) -> Result<Matrix> {
    let support: Vec<(Matrix, usize)> = emb
        .support_enhanced
        .iter()
        .zip(episode.support.iter())
        .map(|(t, (_, class))| (t.value(), *class))
        .collect();
    let prototypes = class_prototypes(&support, episode.n_way)?;

    let mut logits = Matrix::zeros(emb.query_enhanced.len(), episode.n_way);
    for (qi, q) in emb.query_enhanced.iter().enumerate() {
        let qv = q.value();
        for (class, proto) in prototypes.iter().enumerate() {
            logits.set(qi, class, -sequence_distance(&qv, proto, kind)?);
        }
    }
    Ok(logits)
}

/// Cosine frame-distance matrix on the tape: 1 - cosine_similarity_rows.
pub fn frame_distances_tape(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(x.cosine_similarity_rows(y)?.scale(-1.0).add_scalar(1.0))
}

/// Tape counterpart of [`metric_distance`]; `d` is a frame-distance tensor.
pub fn metric_distance_tape(d: &Tensor, kind: MetricKind) -> Result<Tensor> {
    Ok(match kind {
        MetricKind::Hausdorff => d.row_min().max_all(),
        MetricKind::HausdorffBidirectional => {
            let forward = d.row_min().max_all();
            let backward = d.transpose().row_min().max_all();
            forward.concat_cols(&backward)?.max_all()
        }
        MetricKind::ModifiedHausdorffDirected => d.row_min().mean(),
        MetricKind::BiMhm => d.row_min().mean().add(&d.transpose().row_min().mean())?,
        MetricKind::Diagonal => {
            let (rows, cols) = d.shape();
            if rows != cols {
                return Err(Error::NotSquare { rows, cols });
            }
            let mask = d.tape().constant(Matrix::identity(rows));
            d.mul_elem(&mask)?.sum().scale(1.0 / rows as f64)
        }
        MetricKind::PlainDtw => d.dtw_cost(),
    })
}

/// Tape counterpart of [`episode_logits`].
pub fn episode_logits_tape(
    emb: &EpisodeEmbeddings,
    episode: &Episode,
    kind: MetricKind,
) -> Result<Tensor> {
    let n_way = episode.n_way;
    let mut sums: Vec<Option<(Tensor, usize)>> = vec![None; n_way];
    for (t, (_, class)) in emb.support_enhanced.iter().zip(episode.support.iter()) {
        if *class >= n_way {
            return Err(Error::LabelOutOfRange { label: *class, classes: n_way });
        }
        sums[*class] = Some(match sums[*class].take() {
            Some((sum, count)) => (sum.add(t)?, count + 1),
            None => (t.clone(), 1),
        });
    }
    let prototypes: Vec<Tensor> = sums
        .into_iter()
        .enumerate()
        .map(|(class, slot)| {
            let (sum, count) = slot.ok_or_else(|| {
                Error::Cardinality(format!("class {class} has no support examples"))
            })?;
            Ok(sum.scale(1.0 / count as f64))
        })
        .collect::<Result<_>>()?;

    let mut rows: Option<Tensor> = None;
    for q in &emb.query_enhanced {
        let mut row: Option<Tensor> = None;
        for proto in &prototypes {
            let d = frame_distances_tape(q, proto)?;
            let logit = metric_distance_tape(&d, kind)?.scale(-1.0);
            row = Some(match row {
                Some(prev) => prev.concat_cols(&logit)?,
                None => logit,
            });
        }
        let row = row.expect("episode has at least one class");
        rows = Some(match rows {
            Some(prev) => prev.concat_rows(&row)?,
            None => row,
        });
    }
    rows.ok_or(Error::EmptyEpisode)
}
