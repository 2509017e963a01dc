//! Domain types shared by every module: frame-feature sequences, episodes,
//! and the label space.
//!
//! A video is a `T x C` matrix of per-frame feature vectors; frames are
//! numbered 1..T in documentation (0-based internally) and row order is
//! temporal order. An episode is one sampled N-way K-shot task: a support
//! set of N*K labeled sequences, a query set, and an optional unlabeled
//! pool for the semi-supervised regime. All sequences within an episode
//! share the same T and C.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floating-point width of all public numeric computation, in bits.
/// Feature files store 32-bit payloads; everything in memory is `f64`.
pub const FLOAT_WIDTH_BITS: u32 = 64;

/// One video: `T` frames by `C` channels, plus an opaque identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Matrix,
    pub video_id: String,
}

impl FeatureSequence {
    pub fn new(frames: Matrix, video_id: impl Into<String>) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature sequence must have T >= 1 and C >= 1, got {}x{}",
                frames.rows(),
                frames.cols()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::ShapeMismatch(
                "feature sequence contains non-finite entries".into(),
            ));
        }
        Ok(Self { frames, video_id: video_id.into() })
    }

    /// Number of frames T.
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// Channel count C.
    pub fn channels(&self) -> usize {
        self.frames.cols()
    }

    /// Temporal mean of the frames: a 1 x C vector.
    pub fn pooled(&self) -> Matrix {
        self.frames.mean_rows()
    }
}

/// One sampled few-shot task.
#[derive(Debug, Clone)]
pub struct Episode {
    /// N*K labeled sequences; class indices are episode-local in [0, N).
    pub support: Vec<(FeatureSequence, usize)>,
    /// Queries to classify; labels are present during training/evaluation
    /// and `None` at pure inference time.
    pub query: Vec<(FeatureSequence, Option<usize>)>,
    /// Unlabeled pool for the semi-supervised regime; empty otherwise.
    pub unlabeled: Vec<FeatureSequence>,
    pub n_way: usize,
    pub k_shot: usize,
}

impl Episode {
    /// All sequences in deterministic order: support first, then query,
    /// then unlabeled.
    pub fn all_sequences(&self) -> impl Iterator<Item = &FeatureSequence> {
        self.support
            .iter()
            .map(|(f, _)| f)
            .chain(self.query.iter().map(|(f, _)| f))
            .chain(self.unlabeled.iter())
    }

    pub fn frame_count(&self) -> usize {
        self.support.first().map(|(f, _)| f.len()).unwrap_or(0)
    }

    pub fn channel_count(&self) -> usize {
        self.support.first().map(|(f, _)| f.channels()).unwrap_or(0)
    }
}

/// Checks the episode invariants: N*K support structure with exactly K
/// examples of each of N distinct classes, query labels drawn from those
/// classes, and a single shared (T, C) across every sequence.
///
/// Augmented episodes produced by pseudo-labeling intentionally break the
/// exact-K structure and are not expected to pass this check.
pub fn validate_episode(e: &Episode) -> Result<()> {
    if e.n_way == 0 || e.k_shot == 0 {
        return Err(Error::Cardinality(format!(
            "n_way and k_shot must be positive, got {} and {}",
            e.n_way, e.k_shot
        )));
    }
    if e.support.len() != e.n_way * e.k_shot {
        return Err(Error::Cardinality(format!(
            "support has {} sequences, expected N*K = {}",
            e.support.len(),
            e.n_way * e.k_shot
        )));
    }

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, class) in &e.support {
        *counts.entry(*class).or_insert(0) += 1;
    }
    if counts.len() != e.n_way {
        return Err(Error::Cardinality(format!(
            "support covers {} distinct classes, expected {}",
            counts.len(),
            e.n_way
        )));
    }
    for (class, count) in &counts {
        if *count != e.k_shot {
            return Err(Error::Cardinality(format!(
                "class {class} appears {count} times in support, expected {}",
                e.k_shot
            )));
        }
    }
    for (_, label) in &e.query {
        if let Some(label) = label {
            if !counts.contains_key(label) {
                return Err(Error::Cardinality(format!(
                    "query label {label} is not a support class"
                )));
            }
        }
    }

    let mut seqs = e.all_sequences();
    let first = seqs.next().ok_or(Error::EmptyEpisode)?;
    let (t, c) = (first.len(), first.channels());
    for f in seqs {
        if f.len() != t || f.channels() != c {
            return Err(Error::ShapeMismatch(format!(
                "sequence `{}` is {}x{}, episode shape is {}x{}",
                f.video_id,
                f.len(),
                f.channels(),
                t,
                c
            )));
        }
    }
    Ok(())
}

/// Dense mapping from class names to indices in [0, global_classes).
/// Backs the auxiliary classification head, which predicts the dataset-level
/// class of each video rather than its episode-local slot.
#[derive(Debug, Clone, Default)]
pub struct LabelSpace {
    by_name: BTreeMap<String, usize>,
    names: Vec<String>,
}

impl LabelSpace {
    /// Builds the space from label names; indices follow first-seen order
    /// after lexicographic sort, so the mapping is input-order independent.
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut unique: Vec<String> = labels.into_iter().map(Into::into).collect();
        unique.sort();
        unique.dedup();
        let by_name = unique
            .iter()
            .enumerate()
            .map(|(i, name)| (name.clone(), i))
            .collect();
        Self { by_name, names: unique }
    }

    pub fn global_classes(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name_of(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }
}
