//! Episode construction for the three training regimes.
//!
//! Supervised sampling draws N classes and K+Q videos per class from the
//! labeled index. Semi-supervised sampling adds an unlabeled pool in the
//! distractor setting (half from the episode's classes, half from outside
//! classes); pseudo-labeling classifies that pool against the support set
//! and folds high-confidence predictions back into it. The unsupervised
//! regime clusters temporally pooled features first and then samples
//! episodes with clusters as pseudo-classes.
//!
//! The index file is line-oriented UTF-8: one JSON object per line with
//! fields `id`, `label` (nullable), `path`, and `split`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::data::read_sequence;
#[cfg(test)]
use crate::matrix::Matrix;
use crate::error::{Error, Result};
use crate::metric::{episode_logits, MetricKind};
use crate::relation::{forward_episode_eval, RelationModelParams, RelationOptions};
use crate::rng::Rng;
use crate::types::{Episode, FeatureSequence, LabelSpace};

/// Dataset partition. Meta-train and meta-test hold disjoint classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    MetaTrain,
    MetaTest,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::MetaTrain => f.write_str("meta-train"),
            Split::MetaTest => f.write_str("meta-test"),
        }
    }
}

/// One index record.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub label: Option<String>,
    /// Feature-file path, resolved relative to the index location.
    pub path: PathBuf,
    pub split: Split,
}

/// The sampling source: index records plus the directory paths resolve
/// against.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    entries: Vec<IndexEntry>,
    base_dir: PathBuf,
}

impl DatasetIndex {
    pub fn new(entries: Vec<IndexEntry>, base_dir: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Cardinality(format!("duplicate video id `{}`", e.id)));
            }
        }
        Ok(Self { entries, base_dir })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let file = BufReader::new(fs::File::open(path)?);
        let mut entries = Vec::new();
        for line in file.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str::<IndexEntry>(&line)?);
        }
        Self::new(entries, base_dir)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Label space over the labeled entries of one split.
    pub fn label_space(&self, split: Split) -> LabelSpace {
        LabelSpace::from_labels(
            self.entries
                .iter()
                .filter(|e| e.split == split)
                .filter_map(|e| e.label.clone()),
        )
    }
}

/// Index plus every feature sequence loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    index: DatasetIndex,
    features: HashMap<String, FeatureSequence>,
}

impl Dataset {
    /// Loads every feature file referenced by the index.
    pub fn load(index: DatasetIndex) -> Result<Self> {
        let mut features = HashMap::with_capacity(index.entries.len());
        for e in &index.entries {
            let path = if e.path.is_absolute() {
                e.path.clone()
            } else {
                index.base_dir.join(&e.path)
            };
            let mut seq = read_sequence(&path)?;
            seq.video_id = e.id.clone();
            features.insert(e.id.clone(), seq);
        }
        Ok(Self { index, features })
    }

    /// Builds an in-memory dataset without touching the filesystem.
    pub fn from_parts(pairs: Vec<(IndexEntry, FeatureSequence)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(pairs.len());
        let mut features = HashMap::with_capacity(pairs.len());
        for (entry, seq) in pairs {
            features.insert(entry.id.clone(), seq);
            entries.push(entry);
        }
        let index = DatasetIndex::new(entries, PathBuf::new())?;
        Ok(Self { index, features })
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn sequence(&self, id: &str) -> Result<&FeatureSequence> {
        self.features
            .get(id)
            .ok_or_else(|| Error::InsufficientData(format!("unknown video id `{id}`")))
    }

    /// (frames, channels) of the first entry.
    pub fn shape(&self) -> Result<(usize, usize)> {
        let first = self
            .index
            .entries
            .first()
            .ok_or_else(|| Error::InsufficientData("empty dataset".into()))?;
        let seq = self.sequence(&first.id)?;
        Ok((seq.len(), seq.channels()))
    }

    /// Entries of a split keyed by stored label, label-sorted for
    /// deterministic iteration. Unlabeled entries are skipped.
    fn by_class(&self, split: Split) -> BTreeMap<&str, Vec<&IndexEntry>> {
        let mut map: BTreeMap<&str, Vec<&IndexEntry>> = BTreeMap::new();
        for e in self.index.entries.iter().filter(|e| e.split == split) {
            if let Some(label) = &e.label {
                map.entry(label.as_str()).or_default().push(e);
            }
        }
        map
    }

    /// Dataset-level class index of a video under the split's label space,
    /// if the video is labeled.
    pub fn global_label(&self, id: &str, space: &LabelSpace) -> Option<usize> {
        self.index
            .entries
            .iter()
            .find(|e| e.id == id)
            .and_then(|e| e.label.as_deref())
            .and_then(|label| space.index_of(label))
    }
}

fn draw_episode(
    groups: &[(&str, Vec<&IndexEntry>)],
    ds: &Dataset,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    rng: &mut Rng,
) -> Result<(Episode, Vec<String>)> {
    let need = k_shot + queries_per_class;
    let eligible: Vec<usize> = (0..groups.len())
        .filter(|&g| groups[g].1.len() >= need)
        .collect();
    if eligible.len() < n_way {
        return Err(Error::InsufficientData(format!(
            "need {n_way} classes with at least {need} videos, found {}",
            eligible.len()
        )));
    }

    let chosen = rng.sample_indices(eligible.len(), n_way);
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * queries_per_class);
    let mut class_names = Vec::with_capacity(n_way);
    for (local, &pick) in chosen.iter().enumerate() {
        let (name, videos) = &groups[eligible[pick]];
        class_names.push((*name).to_string());
        let picks = rng.sample_indices(videos.len(), need);
        for (j, &v) in picks.iter().enumerate() {
            let seq = ds.sequence(&videos[v].id)?.clone();
            if j < k_shot {
                support.push((seq, local));
            } else {
                query.push((seq, Some(local)));
            }
        }
    }
    let episode = Episode {
        support,
        query,
        unlabeled: Vec::new(),
        n_way,
        k_shot,
    };
    Ok((episode, class_names))
}

/// Samples one N-way K-shot episode from the labeled entries of a split.
/// Support and query sets are disjoint by video id.
pub fn sample_supervised(
    ds: &Dataset,
    split: Split,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let groups: Vec<(&str, Vec<&IndexEntry>)> = ds.by_class(split).into_iter().collect();
    draw_episode(&groups, ds, n_way, k_shot, queries_per_class, rng).map(|(e, _)| e)
}

/// Supervised episode plus an unlabeled pool in the distractor setting:
/// half the pool comes from the episode's own classes (videos outside the
/// support and query sets), half from other classes of the split. Short
/// pools simply take what is available.
pub fn sample_semi_supervised(
    ds: &Dataset,
    split: Split,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    unlabeled_total: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let groups: Vec<(&str, Vec<&IndexEntry>)> = ds.by_class(split).into_iter().collect();
    let (mut episode, class_names) =
        draw_episode(&groups, ds, n_way, k_shot, queries_per_class, rng)?;
    if unlabeled_total == 0 {
        return Ok(episode);
    }

    let used: HashSet<&str> = episode
        .support
        .iter()
        .map(|(f, _)| f.video_id.as_str())
        .chain(episode.query.iter().map(|(f, _)| f.video_id.as_str()))
        .collect();
    let episode_classes: HashSet<&str> = class_names.iter().map(String::as_str).collect();

    let mut in_class: Vec<&IndexEntry> = Vec::new();
    let mut out_class: Vec<&IndexEntry> = Vec::new();
    for (name, videos) in &groups {
        for e in videos {
            if used.contains(e.id.as_str()) {
                continue;
            }
            if episode_classes.contains(name) {
                in_class.push(e);
            } else {
                out_class.push(e);
            }
        }
    }

    let want_in = (unlabeled_total / 2).min(in_class.len());
    let want_out = (unlabeled_total - unlabeled_total / 2).min(out_class.len());
    let mut pool = Vec::with_capacity(want_in + want_out);
    for &i in &rng.sample_indices(in_class.len(), want_in) {
        pool.push(ds.sequence(&in_class[i].id)?.clone());
    }
    for &i in &rng.sample_indices(out_class.len(), want_out) {
        pool.push(ds.sequence(&out_class[i].id)?.clone());
    }
    rng.shuffle(&mut pool);
    episode.unlabeled = pool;
    Ok(episode)
}

/// A prediction for one unlabeled video.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PseudoLabel {
    pub video_id: String,
    pub predicted: usize,
    /// Max softmax probability over the negative-distance logits.
    pub confidence: f64,
}

/// Pseudo-labeling output: the augmented episode and the prediction for
/// every unlabeled video (accepted into the support set or not).
#[derive(Debug, Clone)]
pub struct Augmented {
    pub episode: Episode,
    pub pseudo_labels: Vec<PseudoLabel>,
}

/// Classifies each unlabeled video against the current support set (the
/// unlabeled pool rides through the relation module in the query position)
/// and appends predictions with confidence >= `tau` to the support set
/// under their predicted class. Original support entries are never
/// relabeled, and no class outside the episode's N classes can be added.
/// The returned episode's support is no longer balanced, so it is not
/// expected to pass `validate_episode`.
///
/// Confidence is the max softmax probability of the negative-distance
/// logits scaled by `confidence_scale`. Cosine distances span at most
/// [0, 2], so an unscaled softmax cannot exceed ~0.3 in a 5-way task;
/// the scale puts thresholds like 0.7 in a meaningful range.
pub fn pseudo_label_and_augment(
    episode: &Episode,
    params: &RelationModelParams,
    options: RelationOptions,
    metric: MetricKind,
    tau: f64,
    confidence_scale: f64,
) -> Result<Augmented> {
    if episode.unlabeled.is_empty() {
        return Ok(Augmented { episode: episode.clone(), pseudo_labels: Vec::new() });
    }

    let probe = Episode {
        support: episode.support.clone(),
        query: episode.unlabeled.iter().map(|f| (f.clone(), None)).collect(),
        unlabeled: Vec::new(),
        n_way: episode.n_way,
        k_shot: episode.k_shot,
    };
    let emb = forward_episode_eval(&probe, params, options)?;
    let logits = episode_logits(&emb, &probe, metric)?;

    let mut augmented = episode.clone();
    augmented.unlabeled = Vec::new();
    let mut pseudo_labels = Vec::with_capacity(episode.unlabeled.len());
    for (row, video) in episode.unlabeled.iter().enumerate() {
        let scores: Vec<f64> = logits.row(row).iter().map(|s| s * confidence_scale).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let mut predicted = 0;
        let mut confidence = f64::NEG_INFINITY;
        for (class, &e) in exp.iter().enumerate() {
            let p = e / total;
            if p > confidence {
                confidence = p;
                predicted = class;
            }
        }
        if confidence >= tau {
            augmented.support.push((video.clone(), predicted));
        }
        pseudo_labels.push(PseudoLabel { video_id: video.video_id.clone(), predicted, confidence });
    }
    Ok(Augmented { episode: augmented, pseudo_labels })
}

/// One video's pseudo-class.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClusterAssignment {
    pub video_id: String,
    pub cluster: usize,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations with kmeans++ seeding. Terminates at an assignment
/// fixpoint or after `max_iters`; empty clusters are re-seeded from the
/// point farthest from its assigned center. Returns per-point cluster
/// indices and the final inertia.
pub fn kmeans_cluster(
    points: &[Vec<f64>],
    n_clusters: usize,
    rng: &mut Rng,
    max_iters: usize,
) -> Result<(Vec<usize>, f64)> {
    if n_clusters == 0 || points.len() < n_clusters {
        return Err(Error::TooFewPoints { need: n_clusters.max(1), got: points.len() });
    }

    // kmeans++ seeding: subsequent centers drawn proportionally to the
    // squared distance from the nearest existing center.
    let mut centers: Vec<Vec<f64>> = vec![points[rng.below(points.len())].clone()];
    while centers.len() < n_clusters {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| squared_distance(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.below(points.len())
        };
        centers.push(points[next].clone());
    }

    let dims = points[0].len();
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for (c, center) in centers.iter().enumerate() {
                let d = squared_distance(p, center);
                if d < best {
                    best = d;
                    arg = c;
                }
            }
            if assignment[i] != arg {
                assignment[i] = arg;
                changed = true;
            }
        }

        let mut sums = vec![vec![0.0; dims]; n_clusters];
        let mut counts = vec![0usize; n_clusters];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &v) in sums[assignment[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..n_clusters {
            if counts[c] == 0 {
                // Re-seed from the point farthest from its own center.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        squared_distance(&points[a], &centers[assignment[a]])
                            .total_cmp(&squared_distance(&points[b], &centers[assignment[b]]))
                    })
                    .expect("nonempty points");
                centers[c] = points[far].clone();
                assignment[far] = c;
                changed = true;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centers[c][j] = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &c)| squared_distance(p, &centers[c]))
        .sum();
    Ok((assignment, inertia))
}

/// Clusters the temporally pooled features of a split's videos into
/// pseudo-classes.
pub fn cluster_videos(
    ds: &Dataset,
    split: Split,
    n_clusters: usize,
    rng: &mut Rng,
    max_iters: usize,
) -> Result<Vec<ClusterAssignment>> {
    let ids: Vec<&str> = ds
        .index()
        .entries()
        .iter()
        .filter(|e| e.split == split)
        .map(|e| e.id.as_str())
        .collect();
    let points: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| Ok(ds.sequence(id)?.pooled().data().to_vec()))
        .collect::<Result<_>>()?;
    let (assignment, _) = kmeans_cluster(&points, n_clusters, rng, max_iters)?;
    Ok(ids
        .iter()
        .zip(assignment)
        .map(|(id, cluster)| ClusterAssignment { video_id: (*id).to_string(), cluster })
        .collect())
}

/// Samples an episode with clusters as pseudo-classes; otherwise the
/// supervised contract.
pub fn sample_unsupervised(
    assignments: &[ClusterAssignment],
    ds: &Dataset,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let mut clusters: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for a in assignments {
        clusters.entry(a.cluster).or_default().push(a.video_id.as_str());
    }

    let need = k_shot + queries_per_class;
    let eligible: Vec<&Vec<&str>> =
        clusters.values().filter(|members| members.len() >= need).collect();
    if eligible.len() < n_way {
        return Err(Error::InsufficientData(format!(
            "need {n_way} clusters with at least {need} members, found {}",
            eligible.len()
        )));
    }

    let chosen = rng.sample_indices(eligible.len(), n_way);
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (local, &pick) in chosen.iter().enumerate() {
        let members = eligible[pick];
        let picks = rng.sample_indices(members.len(), need);
        for (j, &v) in picks.iter().enumerate() {
            let seq = ds.sequence(members[v])?.clone();
            if j < k_shot {
                support.push((seq, local));
            } else {
                query.push((seq, Some(local)));
            }
        }
    }
    Ok(Episode { support, query, unlabeled: Vec::new(), n_way, k_shot })
}
