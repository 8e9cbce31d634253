//! Shared data types: images, latent features, masks, translation records,
//! hyperparameters, and the dataset manifest format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    BadChannels(usize),
    #[error("image value {value} outside [-1, 1]")]
    OutOfRange { value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("manifest line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error("manifest invalid: {0}")]
    ManifestInvalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which image domain a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::X => write!(f, "X"),
            Domain::Y => write!(f, "Y"),
        }
    }
}

/// An image in normalized `[-1, 1]` range, shape `channels × height × width`.
#[derive(Debug, Clone)]
pub struct ImageTensor<S: Scalar> {
    pub data: Array3<S>,
    pub domain: Domain,
}

impl<S: Scalar> ImageTensor<S> {
    /// Construct with range and channel validation.
    pub fn new(data: Array3<S>, domain: Domain) -> Result<Self, DomainError> {
        let c = data.dim().0;
        if c != 1 && c != 3 {
            return Err(DomainError::BadChannels(c));
        }
        let one = S::one();
        for &v in data.iter() {
            if v < -one || v > one {
                return Err(DomainError::OutOfRange { value: v.to_f64() });
            }
        }
        Ok(ImageTensor { data, domain })
    }

    /// Construct without range validation. Used for intermediates that may
    /// legitimately exceed `[-1, 1]`, such as noise-perturbed images.
    pub fn from_raw(data: Array3<S>, domain: Domain) -> Self {
        ImageTensor { data, domain }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Latent features produced by a generator encoder, shape `C × H × W`.
#[derive(Debug, Clone)]
pub struct FeatureMap<S: Scalar> {
    pub data: Array3<S>,
}

/// Per-element unmatchability scores in `[0, 1]`, same shape as the
/// feature map it was predicted from.
#[derive(Debug, Clone)]
pub struct UnmatchabilityMask<S: Scalar> {
    pub data: Array3<S>,
}

/// Image-resolution weighting that selects matchable regions, shape
/// `1 × height × width`, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ConsistencyMask<S: Scalar> {
    pub data: Array3<S>,
}

/// Every quantity produced by one backward + forward cycle pass.
#[derive(Debug, Clone)]
pub struct TranslationBundle<S: Scalar> {
    pub x: ImageTensor<S>,
    pub y: ImageTensor<S>,
    pub x_gen: ImageTensor<S>,
    pub y_gen: ImageTensor<S>,
    pub y_gen_clean: ImageTensor<S>,
    pub x_rec: ImageTensor<S>,
    pub y_rec: ImageTensor<S>,
    pub y_rec_clean: ImageTensor<S>,
    pub z_gen: FeatureMap<S>,
    pub z_rec: FeatureMap<S>,
    pub m_gen: UnmatchabilityMask<S>,
    pub m_rec: UnmatchabilityMask<S>,
    pub z_gen_unmatch: FeatureMap<S>,
    pub z_gen_match: FeatureMap<S>,
}

impl<S: Scalar> TranslationBundle<S> {
    /// Largest absolute deviation of `z_gen_match + z_gen_unmatch` from
    /// `z_gen`; zero up to floating-point error by construction.
    pub fn split_exactness_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for ((&a, &b), &z) in self
            .z_gen_match
            .data
            .iter()
            .zip(self.z_gen_unmatch.data.iter())
            .zip(self.z_gen.data.iter())
        {
            worst = worst.max(((a + b) - z).to_f64().abs());
        }
        worst
    }
}

/// Weights and schedule constants for training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub lambda_reg: f64,
    pub lambda_match: f64,
    pub epsilon_amplitude: f64,
    pub encoder_depth: i32,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Channel width of the first generator layer; residual blocks run at
    /// four times this. 64 reproduces the standard full-scale backbone.
    pub base_width: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            lambda_cyc: 10.0,
            lambda_id: 0.5,
            lambda_reg: 0.3,
            lambda_match: 1.0,
            epsilon_amplitude: 0.01,
            encoder_depth: 8,
            batch_size: 1,
            epochs: 200,
            learning_rate: 0.002,
            sigma1: 5.0,
            sigma2: 10.0,
            base_width: 64,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), DomainError> {
        let ok = self.lambda_cyc >= 0.0
            && self.lambda_id >= 0.0
            && self.lambda_reg >= 0.0
            && self.lambda_match >= 0.0
            && self.epsilon_amplitude >= 0.0;
        if !ok {
            return Err(DomainError::ManifestInvalid(
                "loss weights and noise amplitude must be non-negative".into(),
            ));
        }
        if !(-1..=8).contains(&self.encoder_depth) {
            return Err(DomainError::ManifestInvalid(format!(
                "encoder_depth {} outside [-1, 8]",
                self.encoder_depth
            )));
        }
        if self.batch_size == 0 {
            return Err(DomainError::ManifestInvalid("batch_size must be positive".into()));
        }
        if self.sigma1 >= self.sigma2 {
            return Err(DomainError::ManifestInvalid(format!(
                "sigma1 {} must be below sigma2 {}",
                self.sigma1, self.sigma2
            )));
        }
        if self.base_width == 0 {
            return Err(DomainError::ManifestInvalid("base_width must be positive".into()));
        }
        Ok(())
    }
}

/// Map 8-bit pixels linearly onto `[-1, 1]`.
pub fn normalize_image<S: Scalar>(
    raw: &Array3<u8>,
    domain: Domain,
) -> Result<ImageTensor<S>, DomainError> {
    let c = raw.dim().0;
    if c != 1 && c != 3 {
        return Err(DomainError::BadChannels(c));
    }
    let data = raw.mapv(|v| S::from_f64(v as f64 / 127.5 - 1.0));
    Ok(ImageTensor { data, domain })
}

/// Map `[-1, 1]` values back to 8-bit pixels: clamp, then round half up.
pub fn denormalize_image<S: Scalar>(img: &ImageTensor<S>) -> Array3<u8> {
    img.data.mapv(|v| {
        let v = v.to_f64().clamp(-1.0, 1.0);
        ((v + 1.0) * 127.5 + 0.5).floor() as u8
    })
}

/// Train/test designation of a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One manifest record. `None` fields were written as `-`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub source_id: Option<String>,
    pub target_id: Option<String>,
    pub mask_path: Option<String>,
}

/// Dataset description shared between builders, trainers, and evaluators.
///
/// Serialized as UTF-8 text: `key=value` header lines followed by one
/// tab-separated record per line (`source_id`, `target_id`, `mask_path`,
/// absent fields written as `-`).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub source_dir: PathBuf,
    pub target_dir: PathBuf,
    pub split: Split,
    pub unmatchable_ratio: f64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(0.0..=1.0).contains(&self.unmatchable_ratio) {
            return Err(DomainError::ManifestInvalid(format!(
                "unmatchable_ratio {} outside [0, 1]",
                self.unmatchable_ratio
            )));
        }
        if self.split == Split::Test {
            for (i, e) in self.entries.iter().enumerate() {
                if e.source_id.is_none() || e.target_id.is_none() {
                    return Err(DomainError::ManifestInvalid(format!(
                        "test split entry {i} is not paired"
                    )));
                }
            }
        }
        for (i, e) in self.entries.iter().enumerate() {
            for id in [&e.source_id, &e.target_id, &e.mask_path].into_iter().flatten() {
                if id.contains('\t') || id.contains('\n') || id == "-" {
                    return Err(DomainError::ManifestInvalid(format!(
                        "entry {i} contains a reserved character or sentinel: {id:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// All present source ids in manifest order.
    pub fn source_ids(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter_map(|e| e.source_id.as_deref())
            .collect()
    }

    /// All present target ids in manifest order.
    pub fn target_ids(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter_map(|e| e.target_id.as_deref())
            .collect()
    }

    /// Serialize to the text format. Output is byte-stable for equal inputs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("source_dir={}\n", self.source_dir.display()));
        out.push_str(&format!("target_dir={}\n", self.target_dir.display()));
        out.push_str(&format!("split={}\n", self.split));
        out.push_str(&format!("unmatchable_ratio={}\n", self.unmatchable_ratio));
        for e in &self.entries {
            let field = |v: &Option<String>| v.clone().unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                field(&e.source_id),
                field(&e.target_id),
                field(&e.mask_path)
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DomainError> {
        let mut header: BTreeMap<String, String> = BTreeMap::new();
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            if line.contains('\t') {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 3 {
                    return Err(DomainError::ManifestParse {
                        line: lineno,
                        msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
                    });
                }
                let opt = |v: &str| {
                    if v == "-" {
                        None
                    } else {
                        Some(v.to_string())
                    }
                };
                entries.push(ManifestEntry {
                    source_id: opt(fields[0]),
                    target_id: opt(fields[1]),
                    mask_path: opt(fields[2]),
                });
            } else if let Some((k, v)) = line.split_once('=') {
                header.insert(k.to_string(), v.to_string());
            } else {
                return Err(DomainError::ManifestParse {
                    line: lineno,
                    msg: format!("neither a key=value header nor a record: {line:?}"),
                });
            }
        }
        let get = |k: &str| {
            header.get(k).cloned().ok_or_else(|| DomainError::ManifestParse {
                line: 0,
                msg: format!("missing header key {k:?}"),
            })
        };
        let split = match get("split")?.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(DomainError::ManifestParse {
                    line: 0,
                    msg: format!("unknown split {other:?}"),
                })
            }
        };
        let ratio_text = get("unmatchable_ratio")?;
        let unmatchable_ratio =
            ratio_text.parse::<f64>().map_err(|e| DomainError::ManifestParse {
                line: 0,
                msg: format!("unmatchable_ratio {ratio_text:?}: {e}"),
            })?;
        let manifest = DatasetManifest {
            source_dir: PathBuf::from(get("source_dir")?),
            target_dir: PathBuf::from(get("target_dir")?),
            split,
            unmatchable_ratio,
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DomainError> {
        self.validate()?;
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DomainError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let zeros = Array3::<u8>::zeros((3, 2, 2));
        let t = normalize_image::<f64>(&zeros, Domain::X).unwrap();
        assert!(t.data.iter().all(|&v| v == -1.0));

        let full = Array3::<u8>::from_elem((1, 2, 2), 255);
        let t = normalize_image::<f64>(&full, Domain::Y).unwrap();
        assert!(t.data.iter().all(|&v| v == 1.0));

        // 127.5 is not attainable by u8 input but the map is linear: check
        // symmetry around it instead.
        let a = normalize_image::<f64>(&Array3::from_elem((1, 1, 1), 127), Domain::X).unwrap();
        let b = normalize_image::<f64>(&Array3::from_elem((1, 1, 1), 128), Domain::X).unwrap();
        assert!((a.data[[0, 0, 0]] + b.data[[0, 0, 0]]).abs() < 1e-12);
    }

    #[test]
    fn denormalize_rounds_half_up() {
        let img = ImageTensor::from_raw(Array3::from_elem((1, 1, 1), 0.0f64), Domain::X);
        assert_eq!(denormalize_image(&img)[[0, 0, 0]], 128);
        let img = ImageTensor::from_raw(Array3::from_elem((1, 1, 1), -1.0f64), Domain::X);
        assert_eq!(denormalize_image(&img)[[0, 0, 0]], 0);
        let img = ImageTensor::from_raw(Array3::from_elem((1, 1, 1), 1.0f64), Domain::X);
        assert_eq!(denormalize_image(&img)[[0, 0, 0]], 255);
        // Out-of-range values clamp before rounding.
        let img = ImageTensor::from_raw(Array3::from_elem((1, 1, 1), 1.7f64), Domain::X);
        assert_eq!(denormalize_image(&img)[[0, 0, 0]], 255);
    }

    #[test]
    fn round_trip_is_identity_on_every_byte() {
        let raw = Array::from_shape_fn((1, 16, 16), |(_, i, j)| (i * 16 + j) as u8);
        for s in ["f32", "f64"] {
            let back = match s {
                "f32" => {
                    let t = normalize_image::<f32>(&raw, Domain::X).unwrap();
                    denormalize_image(&t)
                }
                _ => {
                    let t = normalize_image::<f64>(&raw, Domain::X).unwrap();
                    denormalize_image(&t)
                }
            };
            assert_eq!(back, raw, "{s} round trip");
        }
    }

    #[test]
    fn image_tensor_rejects_bad_channels_and_range() {
        let two_ch = Array3::<f64>::zeros((2, 4, 4));
        assert!(matches!(
            ImageTensor::new(two_ch, Domain::X),
            Err(DomainError::BadChannels(2))
        ));
        let hot = Array3::from_elem((3, 2, 2), 1.2f64);
        assert!(matches!(
            ImageTensor::new(hot, Domain::X),
            Err(DomainError::OutOfRange { .. })
        ));
    }

    #[test]
    fn hyperparameter_defaults_validate() {
        let hp = Hyperparameters::default();
        assert!(hp.validate().is_ok());
        assert_eq!(hp.lambda_cyc, 10.0);
        assert_eq!(hp.lambda_id, 0.5);
        assert_eq!(hp.learning_rate, 0.002);
        assert_eq!(hp.epochs, 200);

        let mut bad = hp.clone();
        bad.encoder_depth = 9;
        assert!(bad.validate().is_err());
        let mut bad = hp.clone();
        bad.sigma1 = 10.0;
        assert!(bad.validate().is_err());
        let mut bad = hp;
        bad.lambda_reg = -0.1;
        assert!(bad.validate().is_err());
    }

    fn sample_manifest() -> DatasetManifest {
        DatasetManifest {
            source_dir: PathBuf::from("x"),
            target_dir: PathBuf::from("y"),
            split: Split::Train,
            unmatchable_ratio: 0.4,
            entries: vec![
                ManifestEntry {
                    source_id: Some("0000.png".into()),
                    target_id: Some("0000.png".into()),
                    mask_path: Some("masks/0000.png".into()),
                },
                ManifestEntry {
                    source_id: Some("0001.png".into()),
                    target_id: None,
                    mask_path: None,
                },
            ],
        }
    }

    #[test]
    fn manifest_round_trips_byte_exactly() {
        let m = sample_manifest();
        let text = m.to_text();
        let parsed = DatasetManifest::from_text(&text).unwrap();
        assert_eq!(parsed, m);
        assert_eq!(parsed.to_text(), text);
        assert!(text.contains("unmatchable_ratio=0.4\n"));
        assert!(text.contains("0001.png\t-\t-\n"));
    }

    #[test]
    fn manifest_rejects_unpaired_test_split() {
        let mut m = sample_manifest();
        m.split = Split::Test;
        assert!(m.validate().is_err());
        m.entries.truncate(1);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn manifest_parse_errors_carry_line_numbers() {
        let text = "source_dir=x\ntarget_dir=y\nsplit=train\nunmatchable_ratio=0.5\na\tb\n";
        let err = DatasetManifest::from_text(text).unwrap_err();
        match err {
            DomainError::ManifestParse { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn manifest_id_listing_skips_absent_fields() {
        let m = sample_manifest();
        assert_eq!(m.source_ids(), vec!["0000.png", "0001.png"]);
        assert_eq!(m.target_ids(), vec!["0000.png"]);
    }
}
