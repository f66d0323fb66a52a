use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{femb, Bag, Dataset, EmbeddingStore};
use crate::error::{self, Error, Result};
use crate::numerics::{normalize_rows_in_place, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub dim: usize,
    pub classes: Vec<String>,
    pub bags: Vec<BagEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagEntry {
    pub id: String,
    pub label: usize,
    /// FEMB file, relative to the manifest.
    pub embeddings: String,
    pub n: usize,
    /// First row of this bag inside `embeddings`; bags may share a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_labels: Option<String>,
}

/// Loads and validates a dataset manifest. Rows are L2-normalized.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(error::open(path)?))?;
    let base = path.parent().unwrap_or(Path::new("."));

    // Each distinct embedding file is loaded once and appended to the store.
    let mut file_base: HashMap<PathBuf, (usize, usize)> = HashMap::new();
    let mut blocks: Vec<Matrix> = Vec::new();
    let mut total_rows = 0usize;
    let mut bags = Vec::with_capacity(manifest.bags.len());

    for entry in &manifest.bags {
        let file = base.join(&entry.embeddings);
        let (start_of_file, file_rows) = match file_base.get(&file) {
            Some(&v) => v,
            None => {
                let m = femb::read_matrix(&file)?;
                if m.cols() != manifest.dim {
                    return Err(Error::DimensionMismatch {
                        bag: entry.id.clone(),
                        expected: manifest.dim,
                        actual: m.cols(),
                    });
                }
                let v = (total_rows, m.rows());
                total_rows += m.rows();
                blocks.push(m);
                file_base.insert(file.clone(), v);
                v
            }
        };
        let offset = entry.offset.unwrap_or(0);
        if offset + entry.n > file_rows || (entry.offset.is_none() && entry.n != file_rows) {
            return Err(Error::RowCountMismatch {
                bag: entry.id.clone(),
                declared: offset + entry.n,
                actual: file_rows,
            });
        }
        if entry.label >= manifest.classes.len() {
            return Err(Error::LabelOutOfRange {
                bag: entry.id.clone(),
                label: entry.label,
                num_classes: manifest.classes.len(),
            });
        }
        let instance_labels = match &entry.instance_labels {
            Some(rel) => {
                let labels: Vec<usize> = serde_json::from_reader(std::io::BufReader::new(
                    error::open(&base.join(rel))?,
                ))?;
                if labels.len() != entry.n {
                    return Err(Error::RowCountMismatch {
                        bag: entry.id.clone(),
                        declared: entry.n,
                        actual: labels.len(),
                    });
                }
                Some(labels)
            }
            None => None,
        };
        let start = start_of_file + offset;
        bags.push(Bag {
            id: entry.id.clone(),
            label: entry.label,
            start,
            end: start + entry.n,
            instance_labels,
        });
    }

    let mut data = Vec::with_capacity(total_rows * manifest.dim);
    for b in blocks {
        data.extend(b.into_vec());
    }
    let mut rows = Matrix::new(total_rows, manifest.dim, data)?;
    normalize_rows_in_place(&mut rows)?;

    let ds = Dataset {
        name: manifest.name,
        dim: manifest.dim,
        classes: manifest.classes,
        bags,
        store: EmbeddingStore::new(rows),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `manifest.json` plus one FEMB file (and label file) per bag into
/// `dir`. Returns the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.bags.len());
    for (i, bag) in ds.bags.iter().enumerate() {
        let emb_name = format!("bag_{i:05}.femb");
        let rows: Vec<usize> = bag.range().collect();
        femb::write_matrix(
            &dir.join(&emb_name),
            &ds.store.rows.select_rows(&rows),
            femb::Precision::F32,
        )?;
        let instance_labels = match &bag.instance_labels {
            Some(labels) => {
                let name = format!("bag_{i:05}.labels.json");
                std::fs::write(dir.join(&name), serde_json::to_vec(labels)?)?;
                Some(name)
            }
            None => None,
        };
        entries.push(BagEntry {
            id: bag.id.clone(),
            label: bag.label,
            embeddings: emb_name,
            n: bag.len(),
            offset: None,
            instance_labels,
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        dim: ds.dim,
        classes: ds.classes.clone(),
        bags: entries,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}
