//! On-disk format of an [`OfflineBundle`]: a JSON manifest plus flat
//! little-endian `f64` arrays, each with a SHA-256 checksum.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{ParameterBox, ParameterPartition, ReducedBasis};
use crate::domain::{ComponentDistribution, TensorGrid, UnivariateGrid};
use crate::error::{Error, Result};
use crate::hjb::ValueField;
use crate::model::ParameterDomain;
use crate::pipeline::{BoxData, BundleMeta, OfflineBundle, OfflineConfig};
use crate::reduced::{EvaluationTable, InputTable};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayRef {
    file: String,
    len: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum InputKind {
    Constant,
    PerNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableManifest {
    dim: usize,
    control_dim: usize,
    nodes: usize,
    drift: Vec<ArrayRef>,
    input: Vec<(InputKind, ArrayRef)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BoxManifest {
    lower: Vec<f64>,
    upper: Vec<f64>,
    depth: usize,
    basis_shape: (usize, usize),
    basis: ArrayRef,
    distributions: Vec<ComponentDistribution>,
    coarse_shape: Vec<usize>,
    coarse_nodes: ArrayRef,
    fine_shape: Vec<usize>,
    fine_nodes: ArrayRef,
    table: TableManifest,
    values: ArrayRef,
    penalty: f64,
    vi_iterations: usize,
    vi_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    meta: BundleMeta,
    config: OfflineConfig,
    domain_lower: Vec<f64>,
    domain_upper: Vec<f64>,
    /// Box indicators may be infinite, so they live in a binary array.
    indicators: ArrayRef,
    boxes: Vec<BoxManifest>,
}

fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("array length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Serialized bundle: manifest text and named binary arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleFiles {
    pub manifest: Vec<u8>,
    pub arrays: Vec<(String, Vec<u8>)>,
}

struct Writer {
    arrays: Vec<(String, Vec<u8>)>,
}

impl Writer {
    fn push(&mut self, file: String, values: &[f64]) -> ArrayRef {
        let bytes = encode(values);
        let sha256 = hex::encode(Sha256::digest(&bytes));
        self.arrays.push((file.clone(), bytes));
        ArrayRef {
            file,
            len: values.len(),
            sha256,
        }
    }
}

fn grid_nodes(grid: &TensorGrid) -> (Vec<usize>, Vec<f64>) {
    (
        grid.shape(),
        grid.axes().iter().flat_map(|a| a.nodes().iter().copied()).collect(),
    )
}

impl OfflineBundle {
    pub fn to_files(&self) -> Result<BundleFiles> {
        let mut w = Writer { arrays: Vec::new() };
        let indicators = w.push("indicators.bin".into(), &self.partition.indicators);
        let boxes = self
            .boxes
            .iter()
            .enumerate()
            .map(|(i, data)| {
                let b = &self.partition.boxes[i];
                let basis = self.partition.bases[i].matrix();
                let basis_ref = w.push(format!("box{i}_basis.bin"), basis.as_slice());
                let (coarse_shape, coarse) = grid_nodes(&data.coarse);
                let coarse_nodes = w.push(format!("box{i}_coarse_nodes.bin"), &coarse);
                let (fine_shape, fine) = grid_nodes(&data.fine);
                let fine_nodes = w.push(format!("box{i}_fine_nodes.bin"), &fine);
                let t = &data.table;
                let drift = t
                    .drift_terms()
                    .iter()
                    .enumerate()
                    .map(|(q, v)| w.push(format!("box{i}_drift{q}.bin"), v))
                    .collect();
                let input = t
                    .input_terms()
                    .iter()
                    .enumerate()
                    .map(|(q, it)| {
                        let file = format!("box{i}_input{q}.bin");
                        match it {
                            InputTable::Constant(v) => (InputKind::Constant, w.push(file, v)),
                            InputTable::PerNode(v) => (InputKind::PerNode, w.push(file, v)),
                        }
                    })
                    .collect();
                let values = w.push(format!("box{i}_values.bin"), data.field.values());
                BoxManifest {
                    lower: b.lower.clone(),
                    upper: b.upper.clone(),
                    depth: b.depth,
                    basis_shape: (basis.nrows(), basis.ncols()),
                    basis: basis_ref,
                    distributions: data.distributions.clone(),
                    coarse_shape,
                    coarse_nodes,
                    fine_shape,
                    fine_nodes,
                    table: TableManifest {
                        dim: t.dim(),
                        control_dim: t.control_dim(),
                        nodes: t.num_nodes(),
                        drift,
                        input,
                    },
                    values,
                    penalty: data.field.penalty(),
                    vi_iterations: data.vi_iterations,
                    vi_converged: data.vi_converged,
                }
            })
            .collect();
        let manifest = Manifest {
            schema: SCHEMA_VERSION,
            meta: self.meta.clone(),
            config: self.config.clone(),
            domain_lower: self.partition.domain.lower().to_vec(),
            domain_upper: self.partition.domain.upper().to_vec(),
            indicators,
            boxes,
        };
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        Ok(BundleFiles {
            manifest: text,
            arrays: w.arrays,
        })
    }

    pub fn from_files(files: &BundleFiles) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&files.manifest)?;
        if manifest.schema != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                manifest.schema
            )));
        }
        let read = |r: &ArrayRef| -> Result<Vec<f64>> {
            let (_, bytes) = files
                .arrays
                .iter()
                .find(|(name, _)| *name == r.file)
                .ok_or_else(|| Error::Format(format!("missing array {}", r.file)))?;
            if hex::encode(Sha256::digest(bytes)) != r.sha256 {
                return Err(Error::Checksum {
                    path: r.file.clone().into(),
                });
            }
            let v = decode(bytes)?;
            if v.len() != r.len {
                return Err(Error::Format(format!(
                    "array {} holds {} values, manifest says {}",
                    r.file,
                    v.len(),
                    r.len
                )));
            }
            Ok(v)
        };
        let grid = |shape: &[usize], r: &ArrayRef| -> Result<TensorGrid> {
            let nodes = read(r)?;
            if shape.iter().sum::<usize>() != nodes.len() {
                return Err(Error::Format(format!("grid shape does not match {}", r.file)));
            }
            let mut offset = 0;
            let axes = shape
                .iter()
                .map(|&h| {
                    let axis = UnivariateGrid::new(nodes[offset..offset + h].to_vec());
                    offset += h;
                    axis
                })
                .collect::<Result<_>>()?;
            TensorGrid::new(axes)
        };
        let domain = ParameterDomain::new(manifest.domain_lower.clone(), manifest.domain_upper.clone())?;
        let indicators = read(&manifest.indicators)?;
        let mut boxes = Vec::new();
        let mut bases = Vec::new();
        let mut data = Vec::new();
        for bm in &manifest.boxes {
            boxes.push(ParameterBox {
                lower: bm.lower.clone(),
                upper: bm.upper.clone(),
                depth: bm.depth,
            });
            let (n, l) = bm.basis_shape;
            let cols = DMatrix::from_vec(n, l, read(&bm.basis)?);
            bases.push(ReducedBasis::from_orthonormal(cols)?);
            let coarse = grid(&bm.coarse_shape, &bm.coarse_nodes)?;
            let fine = grid(&bm.fine_shape, &bm.fine_nodes)?;
            let t = &bm.table;
            let table = EvaluationTable::from_parts(
                t.dim,
                t.control_dim,
                t.nodes,
                t.drift.iter().map(&read).collect::<Result<_>>()?,
                t.input
                    .iter()
                    .map(|(kind, r)| {
                        let v = read(r)?;
                        Ok(match kind {
                            InputKind::Constant => InputTable::Constant(v),
                            InputKind::PerNode => InputTable::PerNode(v),
                        })
                    })
                    .collect::<Result<_>>()?,
            )?;
            let field = ValueField::new(coarse.clone(), read(&bm.values)?, bm.penalty)?;
            data.push(BoxData {
                distributions: bm.distributions.clone(),
                coarse,
                fine,
                table,
                field,
                vi_iterations: bm.vi_iterations,
                vi_converged: bm.vi_converged,
            });
        }
        if indicators.len() != boxes.len() {
            return Err(Error::Format("indicator count differs from box count".into()));
        }
        Ok(OfflineBundle {
            meta: manifest.meta,
            config: manifest.config,
            partition: ParameterPartition {
                domain,
                boxes,
                bases,
                indicators,
            },
            boxes: data,
        })
    }

    /// Writes the manifest and the arrays into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let files = self.to_files()?;
        fs::create_dir_all(dir)?;
        for (name, bytes) in &files.arrays {
            fs::write(dir.join(name), bytes)?;
        }
        fs::write(dir.join(MANIFEST), &files.manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_bytes = fs::read(dir.join(MANIFEST))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        let mut names = vec![manifest.indicators.file.clone()];
        for b in &manifest.boxes {
            names.push(b.basis.file.clone());
            names.push(b.coarse_nodes.file.clone());
            names.push(b.fine_nodes.file.clone());
            names.extend(b.table.drift.iter().map(|r| r.file.clone()));
            names.extend(b.table.input.iter().map(|(_, r)| r.file.clone()));
            names.push(b.values.file.clone());
        }
        let arrays = names
            .into_iter()
            .map(|name| {
                if name.contains(['/', '\\']) || name.starts_with('.') {
                    return Err(Error::Format(format!("invalid array file name {name}")));
                }
                let bytes = fs::read(dir.join(&name))?;
                Ok((name, bytes))
            })
            .collect::<Result<_>>()?;
        Self::from_files(&BundleFiles {
            manifest: manifest_bytes,
            arrays,
        })
    }
}
