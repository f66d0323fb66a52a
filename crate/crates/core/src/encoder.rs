//! Where instance and prompt embeddings come from: FEMB dumps produced by
//! an external encoder, or the synthetic generator.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::femb::{self, Precision};
use crate::dataset::{load_manifest, synth_generate, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::numerics::{normalize_rows_in_place, Matrix};
use crate::rng;

pub const DEFAULT_TEST_BAGS_PER_CLASS: usize = 8;

/// Hex SHA-256.
pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checksum over the exact `f64` contents of a matrix.
pub fn matrix_checksum(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// JSON sidecar stored next to a FEMB file as `<file>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub encoder: String,
    #[serde(default)]
    pub preprocessing: String,
    /// SHA-256 of the FEMB file bytes.
    pub checksum: String,
    /// Token count of each class prompt when the file holds token sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_lengths: Option<Vec<usize>>,
}

pub fn sidecar_path(femb_path: &Path) -> PathBuf {
    let mut s = femb_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `m` and its sidecar; the checksum field is filled in here.
pub fn write_with_sidecar(
    path: &Path,
    m: &Matrix,
    precision: Precision,
    mut prov: Provenance,
) -> Result<Provenance> {
    let bytes = femb::encode(m, precision);
    std::fs::write(path, &bytes)?;
    prov.checksum = checksum(&bytes);
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&prov)?)?;
    Ok(prov)
}

/// Reads a FEMB file and, when present, its sidecar. A sidecar whose
/// checksum disagrees with the file is an error.
pub fn read_with_sidecar(path: &Path) -> Result<(Matrix, Option<Provenance>)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let (m, used) = femb::decode(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::InvalidInput(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    let side = sidecar_path(path);
    let prov = if side.exists() {
        let p: Provenance = serde_json::from_reader(crate::error::open(&side)?)?;
        let actual = checksum(&bytes);
        if p.checksum != actual {
            return Err(Error::InvalidInput(format!(
                "{}: checksum {actual} does not match sidecar {}",
                path.display(),
                p.checksum
            )));
        }
        Some(p)
    } else {
        None
    };
    Ok((m, prov))
}

/// Per-class prompt material for the prior branch.
#[derive(Debug, Clone, PartialEq)]
pub enum Prompts {
    /// One text feature per class (`N×d`).
    Features(Matrix),
    /// One token sequence per class (each `len_c×e`).
    Tokens(Vec<Matrix>),
}

/// Informative synthetic prompt features: each class prototype plus
/// Gaussian noise of standard deviation `noise` per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticPrompts {
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticPrompts {
    fn default() -> Self {
        Self {
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    File {
        manifest: PathBuf,
        #[serde(default)]
        test_manifest: Option<PathBuf>,
        /// FEMB prompt file: `N×d` features, or token rows when its
        /// sidecar lists `sequence_lengths`.
        #[serde(default)]
        prompts: Option<PathBuf>,
    },
    Synthetic {
        #[serde(default)]
        spec: SynthSpec,
        /// Held-out bags per class, drawn from an independent seed stream.
        #[serde(default = "default_test_bags")]
        test_bags_per_class: usize,
        #[serde(default)]
        prompts: Option<SyntheticPrompts>,
    },
}

fn default_test_bags() -> usize {
    DEFAULT_TEST_BAGS_PER_CLASS
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Synthetic {
            spec: SynthSpec::default(),
            test_bags_per_class: DEFAULT_TEST_BAGS_PER_CLASS,
            prompts: None,
        }
    }
}

impl SourceConfig {
    /// Parses a config value, reporting an unrecognised `kind` as such
    /// rather than as a generic decoding failure.
    pub fn from_value(v: serde_json::Value) -> Result<Self> {
        match v.get("kind").and_then(|k| k.as_str()) {
            Some("file" | "synthetic") => Ok(serde_json::from_value(v)?),
            Some(other) => Err(Error::Unknown {
                what: "source kind",
                name: other.to_string(),
            }),
            None => Err(Error::InvalidInput("source config needs a `kind`".into())),
        }
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        if let SourceConfig::File {
            manifest,
            test_manifest,
            prompts,
        } = self
        {
            *manifest = base.join(&*manifest);
            if let Some(p) = test_manifest {
                *p = base.join(&*p);
            }
            if let Some(p) = prompts {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    File,
    Synthetic,
}

/// Resolved, immutable embeddings for one experiment.
#[derive(Debug, Clone)]
pub struct EmbeddingSource {
    pub kind: SourceKind,
    pub dim: usize,
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub prompts: Option<Prompts>,
    pub encoder: String,
    /// Covers the training embeddings, the test embeddings and the prompts.
    pub checksum: String,
}

/// The unit basis vector of each class, as used by the synthetic generator.
pub fn synthetic_prototypes(num_classes: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(num_classes, dim);
    for c in 0..num_classes {
        m.set(c, c, 1.0);
    }
    m
}

pub fn synthetic_prompt_features(spec: &SynthSpec, prompts: &SyntheticPrompts) -> Result<Matrix> {
    if !(prompts.noise.is_finite() && prompts.noise >= 0.0) {
        return Err(Error::InvalidInput(
            "prompt noise must be finite and >= 0".into(),
        ));
    }
    let mut rng = rng::stream(prompts.seed, 21);
    let mut m = synthetic_prototypes(spec.num_classes, spec.dim);
    for v in m.as_mut_slice() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += prompts.noise * z;
    }
    normalize_rows_in_place(&mut m)?;
    Ok(m)
}

/// The held-out draw paired with a synthetic training spec.
pub fn test_spec(spec: &SynthSpec, bags: usize) -> SynthSpec {
    SynthSpec {
        bags_per_class: bags,
        seed: rng::derive_seed(spec.seed, 31),
        ..spec.clone()
    }
}

fn load_prompts(path: &Path) -> Result<Prompts> {
    let (m, prov) = read_with_sidecar(path)?;
    match prov.and_then(|p| p.sequence_lengths) {
        None => Ok(Prompts::Features(m)),
        Some(lens) => {
            if lens.iter().sum::<usize>() != m.rows() {
                return Err(Error::InvalidInput(format!(
                    "{}: sequence lengths sum to {} but file holds {} token rows",
                    path.display(),
                    lens.iter().sum::<usize>(),
                    m.rows()
                )));
            }
            let mut at = 0;
            let seqs = lens
                .iter()
                .map(|&len| {
                    let s = m.select_rows(&(at..at + len).collect::<Vec<_>>());
                    at += len;
                    s
                })
                .collect();
            Ok(Prompts::Tokens(seqs))
        }
    }
}

pub fn resolve_source(cfg: &SourceConfig) -> Result<EmbeddingSource> {
    let (kind, train, test, prompts, encoder) = match cfg {
        SourceConfig::File {
            manifest,
            test_manifest,
            prompts,
        } => {
            let train = load_manifest(manifest)?;
            let test = test_manifest.as_deref().map(load_manifest).transpose()?;
            let prompts = prompts.as_deref().map(load_prompts).transpose()?;
            let encoder = prompts_encoder_name(cfg).unwrap_or_else(|| "external".to_string());
            (SourceKind::File, train, test, prompts, encoder)
        }
        SourceConfig::Synthetic {
            spec,
            test_bags_per_class,
            prompts,
        } => {
            let train = synth_generate(spec)?;
            let test = (*test_bags_per_class > 0)
                .then(|| synth_generate(&test_spec(spec, *test_bags_per_class)))
                .transpose()?;
            let prompts = prompts
                .as_ref()
                .map(|p| synthetic_prompt_features(spec, p).map(Prompts::Features))
                .transpose()?;
            (
                SourceKind::Synthetic,
                train,
                test,
                prompts,
                "synthetic".to_string(),
            )
        }
    };
    let dim = train.dim;
    if let Some(t) = &test {
        if t.dim != dim {
            return Err(Error::DimConflict {
                instances: dim,
                prompts: t.dim,
            });
        }
        if t.classes.len() != train.classes.len() {
            return Err(Error::InvalidInput(
                "train and test datasets disagree on classes".into(),
            ));
        }
    }
    match &prompts {
        Some(Prompts::Features(f)) => {
            if f.cols() != dim {
                return Err(Error::DimConflict {
                    instances: dim,
                    prompts: f.cols(),
                });
            }
            if f.rows() != train.num_classes() {
                return Err(Error::InvalidInput(format!(
                    "prompt file has {} rows for {} classes",
                    f.rows(),
                    train.num_classes()
                )));
            }
        }
        Some(Prompts::Tokens(t)) if t.len() != train.num_classes() => {
            return Err(Error::InvalidInput(format!(
                "prompt file has {} sequences for {} classes",
                t.len(),
                train.num_classes()
            )));
        }
        _ => {}
    }

    let mut h = Sha256::new();
    h.update(matrix_checksum(&train.store.rows));
    if let Some(t) = &test {
        h.update(matrix_checksum(&t.store.rows));
    }
    match &prompts {
        Some(Prompts::Features(f)) => h.update(matrix_checksum(f)),
        Some(Prompts::Tokens(ts)) => ts.iter().for_each(|t| h.update(matrix_checksum(t))),
        None => {}
    }
    Ok(EmbeddingSource {
        kind,
        dim,
        train,
        test,
        prompts,
        encoder,
        checksum: hex::encode(h.finalize()),
    })
}

fn prompts_encoder_name(cfg: &SourceConfig) -> Option<String> {
    let SourceConfig::File {
        prompts: Some(p), ..
    } = cfg
    else {
        return None;
    };
    let side = sidecar_path(p);
    let prov: Provenance = serde_json::from_reader(std::fs::File::open(side).ok()?).ok()?;
    Some(prov.encoder)
}
