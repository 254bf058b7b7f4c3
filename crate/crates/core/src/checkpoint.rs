//! Checkpoint directories: a `tensors.pydt` file of named tensors plus a
//! `manifest.json` listing their names, shapes and run metadata.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{read_pydt, write_pydt};
use crate::nn::{Param, ParamStore};
use crate::real::Real;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.pydt";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Free-form run information (iteration, configuration, ...).
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named single-precision tensors grouped by `/`-separated namespaces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<Param<f32>>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    /// Appends tensors under `namespace/`.
    pub fn insert<R: Real>(&mut self, namespace: &str, tensors: &[Param<R>]) {
        for p in tensors {
            self.tensors.push(Param {
                name: format!("{namespace}/{}", p.name),
                shape: p.shape.clone(),
                data: p.data.iter().map(|v| v.f64() as f32).collect(),
            });
        }
    }

    pub fn insert_store<R: Real>(&mut self, namespace: &str, store: &ParamStore<R>) {
        self.insert(namespace, store.params());
    }

    /// Tensors under `namespace/` with the prefix removed, in stored order.
    pub fn namespace<R: Real>(&self, namespace: &str) -> Vec<Param<R>> {
        let prefix = format!("{namespace}/");
        self.tensors
            .iter()
            .filter_map(|p| {
                p.name.strip_prefix(&prefix).map(|rest| Param {
                    name: rest.to_string(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| R::of(v as f64)).collect(),
                })
            })
            .collect()
    }

    pub fn has_namespace(&self, namespace: &str) -> bool {
        let prefix = format!("{namespace}/");
        self.tensors.iter().any(|p| p.name.starts_with(&prefix))
    }

    /// Loads `namespace/` into `store`, requiring identical names and shapes.
    pub fn restore_store<R: Real>(&self, namespace: &str, store: &mut ParamStore<R>) -> Result<()> {
        let tensors = self.namespace::<R>(namespace);
        if tensors.is_empty() {
            return Err(Error::Checkpoint(format!("no tensors under {namespace}/")));
        }
        store.load_from(&tensors)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        // write to temporaries first so an interrupted save keeps the old files
        let tensors_tmp = dir.join(format!("{TENSORS_FILE}.tmp"));
        let file = File::create(&tensors_tmp).map_err(|e| Error::io(&tensors_tmp, e))?;
        let mut out = BufWriter::new(file);
        for p in &self.tensors {
            write_pydt(&mut out, &p.shape, &p.data).map_err(|e| Error::io(&tensors_tmp, e))?;
        }
        out.flush().map_err(|e| Error::io(&tensors_tmp, e))?;
        drop(out);
        let manifest_tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&manifest_tmp, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&manifest_tmp, e))?;
        let tensors_path = dir.join(TENSORS_FILE);
        fs::rename(&tensors_tmp, &tensors_path).map_err(|e| Error::io(&tensors_path, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::rename(&manifest_tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let tensors_path = dir.join(TENSORS_FILE);
        let file = File::open(&tensors_path).map_err(|e| Error::io(&tensors_path, e))?;
        let mut input = BufReader::new(file);
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let (dims, data) = read_pydt(&mut input)?.ok_or_else(|| {
                Error::Checkpoint(format!("tensor file ends before {}", entry.name))
            })?;
            if dims != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, manifest says {:?}",
                    entry.name, dims, entry.shape
                )));
            }
            tensors.push(Param {
                name: entry.name.clone(),
                shape: dims,
                data,
            });
        }
        if read_pydt(&mut input)?.is_some() {
            return Err(Error::Checkpoint(
                "tensor file has records beyond the manifest".into(),
            ));
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }
}
