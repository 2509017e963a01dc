//! Feature-file I/O and synthetic sequence generation.
//!
//! Feature file layout, all little-endian: magic `FSEQ`, version u16,
//! frame count T u32, channel count C u32, dtype code u8 (0 = 32-bit
//! float), then exactly T*C*4 payload bytes in row-major order.
//! Values round-trip bit-exactly because sequences produced by this module
//! hold f32-representable values.
//!
//! The generator builds each class from an ordered list of unit-norm
//! subaction prototypes laid out over T frames in contiguous blocks. A
//! misaligned instance permutes the subaction order (the frame set is
//! unchanged, the temporal order is not), per-frame Gaussian noise is
//! added on top, and with the label-noise rate the stored label is
//! replaced by a uniformly random other class.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::episodes::{DatasetIndex, IndexEntry, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::types::FeatureSequence;

pub const FEATURE_MAGIC: [u8; 4] = *b"FSEQ";
pub const FEATURE_VERSION: u16 = 1;
pub const DTYPE_F32_LE: u8 = 0;

const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 1;

/// Writes a sequence as a feature file. Values are stored as f32; inputs
/// from this crate's generator are already f32-representable, so a
/// write-then-read round trip is bit-exact.
pub fn write_sequence(path: impl AsRef<Path>, f: &FeatureSequence) -> Result<()> {
    let frames = &f.frames;
    let mut bytes = Vec::with_capacity(HEADER_LEN + frames.data().len() * 4);
    bytes.extend_from_slice(&FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    bytes.push(DTYPE_F32_LE);
    for &v in frames.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Reads a feature file; the video id is the file stem.
pub fn read_sequence(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile { expected: HEADER_LEN, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic { expected: FEATURE_MAGIC, got: magic });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::InvalidConfig(format!("unsupported feature file version {version}")));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let dtype = bytes[14];
    if dtype != DTYPE_F32_LE {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let expected = t * c * 4;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::TruncatedFile { expected, got: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "feature file has {} trailing bytes",
            payload.len() - expected
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|chunk| f32::from_le_bytes(chunk.try_into().unwrap()) as f64)
        .collect();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    FeatureSequence::new(Matrix::from_vec(t, c, data)?, id)
}

/// Synthetic corpus description.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Total class count; the last `meta_test_classes` go to the meta-test
    /// split.
    pub n_classes: usize,
    pub meta_test_classes: usize,
    pub videos_per_class: usize,
    /// Subactions per class, laid out over the frames in order.
    pub subactions: usize,
    pub frames: usize,
    pub channels: usize,
    /// Probability that a video's subaction order is permuted.
    pub misalignment_rate: f64,
    pub noise_sigma: f64,
    /// Probability that a video's stored label is replaced by a random
    /// other class.
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 30,
            meta_test_classes: 6,
            videos_per_class: 30,
            subactions: 4,
            frames: 8,
            channels: 64,
            misalignment_rate: 0.0,
            noise_sigma: 0.3,
            label_noise_rate: 0.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.videos_per_class == 0 {
            return Err(Error::InvalidConfig("class and video counts must be positive".into()));
        }
        if self.meta_test_classes >= self.n_classes {
            return Err(Error::InvalidConfig(format!(
                "meta_test_classes {} must leave at least one training class of {}",
                self.meta_test_classes, self.n_classes
            )));
        }
        if self.subactions == 0 || self.subactions > self.frames {
            return Err(Error::InvalidConfig(format!(
                "subactions {} must lie in [1, frames {}]",
                self.subactions, self.frames
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channels must be positive".into()));
        }
        for (name, rate) in [
            ("misalignment_rate", self.misalignment_rate),
            ("label_noise_rate", self.label_noise_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidConfig(format!("{name} {rate} outside [0, 1]")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn class_name(class: usize) -> String {
        format!("c{class:03}")
    }
}

fn unit_prototype(rng: &mut Rng, channels: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..channels).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Generates the corpus under `out_dir` (feature files plus `index.jsonl`)
/// and returns the index. Identical specs produce byte-identical files.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;

    let mut rng = Rng::new(spec.seed);
    let prototypes: Vec<Vec<Vec<f64>>> = (0..spec.n_classes)
        .map(|_| (0..spec.subactions).map(|_| unit_prototype(&mut rng, spec.channels)).collect())
        .collect();

    let train_classes = spec.n_classes - spec.meta_test_classes;
    let mut entries = Vec::with_capacity(spec.n_classes * spec.videos_per_class);
    for class in 0..spec.n_classes {
        let split = if class < train_classes { Split::MetaTrain } else { Split::MetaTest };
        for video in 0..spec.videos_per_class {
            let id = format!("{}_v{video:03}", SynthSpec::class_name(class));

            let mut order: Vec<usize> = (0..spec.subactions).collect();
            if rng.uniform() < spec.misalignment_rate {
                rng.shuffle(&mut order);
            }

            let mut frames = Matrix::zeros(spec.frames, spec.channels);
            for t in 0..spec.frames {
                let slot = t * spec.subactions / spec.frames;
                let proto = &prototypes[class][order[slot]];
                for c in 0..spec.channels {
                    let v = proto[c] + spec.noise_sigma * rng.normal();
                    frames.set(t, c, (v as f32) as f64);
                }
            }

            let mut label = class;
            if spec.label_noise_rate > 0.0 && rng.uniform() < spec.label_noise_rate {
                let offset = 1 + rng.below(spec.n_classes - 1);
                label = (class + offset) % spec.n_classes;
            }

            let file = format!("{id}.fseq");
            write_sequence(out_dir.join(&file), &FeatureSequence::new(frames, id.clone())?)?;
            entries.push(IndexEntry {
                id,
                label: Some(SynthSpec::class_name(label)),
                path: file.into(),
                split,
            });
        }
    }

    let index = DatasetIndex::new(entries, out_dir.to_path_buf())?;
    index.save(out_dir.join("index.jsonl"))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{bi_mhm, diagonal_distance, frame_distances};

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("seqmatch-data-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tmpdir("roundtrip");
        let mut rng = Rng::new(500);
        let mut frames = Matrix::zeros(8, 64);
        for r in 0..8 {
            for c in 0..64 {
                frames.set(r, c, (rng.uniform_range(-1.0, 1.0) as f32) as f64);
            }
        }
        let f = FeatureSequence::new(frames, "sample").unwrap();
        let path = dir.join("sample.fseq");
        write_sequence(&path, &f).unwrap();
        let back = read_sequence(&path).unwrap();
        assert_eq!(back.frames, f.frames);
        assert_eq!(back.video_id, "sample");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tmpdir("magic");
        let path = dir.join("bad.fseq");
        fs::write(&path, b"XXXX\x01\x00\x01\x00\x00\x00\x01\x00\x00\x00\x00ABCD").unwrap();
        assert!(matches!(read_sequence(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tmpdir("trunc");
        let f = FeatureSequence::new(Matrix::filled(2, 2, 0.5), "t").unwrap();
        let path = dir.join("t.fseq");
        write_sequence(&path, &f).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_sequence(&path),
            Err(Error::TruncatedFile { expected: 16, got: 12 })
        ));
    }

    #[test]
    fn unsupported_dtype_rejected() {
        let dir = tmpdir("dtype");
        let f = FeatureSequence::new(Matrix::filled(1, 1, 0.5), "d").unwrap();
        let path = dir.join("d.fseq");
        write_sequence(&path, &f).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[14] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_sequence(&path), Err(Error::UnsupportedDtype(9))));
    }

    #[test]
    fn noiseless_classes_are_identical() {
        let dir = tmpdir("noiseless");
        let spec = SynthSpec {
            n_classes: 3,
            meta_test_classes: 1,
            videos_per_class: 3,
            misalignment_rate: 0.0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let index = generate_synthetic(&spec, &dir).unwrap();
        let a = read_sequence(dir.join("c000_v000.fseq")).unwrap();
        let b = read_sequence(dir.join("c000_v001.fseq")).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(index.entries().len(), 9);
    }

    #[test]
    fn generation_is_deterministic() {
        let d1 = tmpdir("det1");
        let d2 = tmpdir("det2");
        let spec = SynthSpec {
            n_classes: 2,
            meta_test_classes: 1,
            videos_per_class: 2,
            misalignment_rate: 0.5,
            label_noise_rate: 0.2,
            ..Default::default()
        };
        generate_synthetic(&spec, &d1).unwrap();
        generate_synthetic(&spec, &d2).unwrap();
        for name in ["c000_v000.fseq", "c001_v001.fseq", "index.jsonl"] {
            assert_eq!(
                fs::read(d1.join(name)).unwrap(),
                fs::read(d2.join(name)).unwrap(),
                "{name} differs"
            );
        }
    }

    #[test]
    fn misaligned_videos_share_frame_sets() {
        let dir = tmpdir("mis");
        let spec = SynthSpec {
            n_classes: 2,
            meta_test_classes: 1,
            videos_per_class: 8,
            misalignment_rate: 1.0,
            noise_sigma: 0.0,
            seed: 11,
            ..Default::default()
        };
        generate_synthetic(&spec, &dir).unwrap();
        let videos: Vec<FeatureSequence> = (0..8)
            .map(|v| read_sequence(dir.join(format!("c000_v{v:03}.fseq"))).unwrap())
            .collect();
        let mut saw_permuted = false;
        for i in 0..videos.len() {
            for j in (i + 1)..videos.len() {
                let d = frame_distances(&videos[i].frames, &videos[j].frames).unwrap();
                assert!(bi_mhm(&d).abs() < 1e-9, "same-class set distance should vanish");
                if videos[i].frames != videos[j].frames {
                    saw_permuted = true;
                    assert!(diagonal_distance(&d).unwrap() > 1e-3);
                }
            }
        }
        assert!(saw_permuted, "expected at least one non-identity permutation");
    }

    #[test]
    fn label_noise_rate_within_binomial_bound() {
        let dir = tmpdir("labelnoise");
        let spec = SynthSpec {
            n_classes: 10,
            meta_test_classes: 2,
            videos_per_class: 100,
            channels: 4,
            label_noise_rate: 0.3,
            seed: 13,
            ..Default::default()
        };
        let index = generate_synthetic(&spec, &dir).unwrap();
        let total = index.entries().len() as f64;
        let corrupted = index
            .entries()
            .iter()
            .filter(|e| {
                let true_class = e.id.split("_v").next().unwrap();
                e.label.as_deref() != Some(true_class)
            })
            .count() as f64;
        let mean = 0.3 * total;
        let sigma = (total * 0.3 * 0.7).sqrt();
        assert!(
            (corrupted - mean).abs() <= 3.0 * sigma,
            "corrupted {corrupted} outside {mean} +- 3*{sigma}"
        );
    }

    #[test]
    fn separability_of_noiseless_classes() {
        let dir = tmpdir("separable");
        let spec = SynthSpec {
            n_classes: 4,
            meta_test_classes: 1,
            videos_per_class: 2,
            misalignment_rate: 1.0,
            noise_sigma: 0.0,
            seed: 17,
            ..Default::default()
        };
        generate_synthetic(&spec, &dir).unwrap();
        let load = |class: usize, v: usize| {
            read_sequence(dir.join(format!("{}_v{v:03}.fseq", SynthSpec::class_name(class))))
                .unwrap()
        };
        for class in 0..4 {
            let d = frame_distances(&load(class, 0).frames, &load(class, 1).frames).unwrap();
            assert!(bi_mhm(&d).abs() < 1e-9);
        }
        for a in 0..4 {
            for b in (a + 1)..4 {
                let d = frame_distances(&load(a, 0).frames, &load(b, 0).frames).unwrap();
                assert!(bi_mhm(&d) > 1e-3, "classes {a} and {b} too close");
            }
        }
    }
}
