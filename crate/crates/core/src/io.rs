//! On-disk formats.
//!
//! Every artifact is a directory holding `meta.json` plus raw little-endian
//! `f32` row-major tensors, one `.bin` file per tensor.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::joint::{JointModel, ModelConfig};
use crate::nn::ParamStore;
use crate::phantom::{generate_phantom, random_spec, PhantomCase, PhantomSpec};
use crate::strain::{DisplacementField, Image, ImageSequence, Modality, MyocardiumMask, StrainMatrix, TosCurve};

pub const CASE_FORMAT: &str = "densecine-case";
pub const CHECKPOINT_FORMAT: &str = "densecine-checkpoint";
pub const DATASET_FORMAT: &str = "densecine-dataset";
const VERSION: u32 = 1;

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Json { path: path.into(), source: e })
}

pub fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_f32(path: impl AsRef<Path>, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: impl AsRef<Path>, expected_len: usize) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} f32 values, found {} bytes",
            path.display(),
            expected_len,
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CaseMeta {
    format: String,
    version: u32,
    seed: u64,
    spec: PhantomSpec,
    centroid: [f64; 2],
    insertion_points: [[f64; 2]; 2],
    tensors: std::collections::BTreeMap<String, TensorEntry>,
}

fn check_format(path: &Path, found: &str, version: u32, expected: &str) -> Result<()> {
    if found != expected || version != VERSION {
        return Err(Error::Format(format!(
            "{}: expected {expected} v{VERSION}, found {found} v{version}",
            path.display()
        )));
    }
    Ok(())
}

pub fn save_case(dir: impl AsRef<Path>, case: &PhantomCase) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let (h, w) = case.dense.shape();
    let s = &case.spec;
    let mut tensors = std::collections::BTreeMap::new();
    let mut put = |name: &str, shape: Vec<usize>, values: Vec<f64>| -> Result<()> {
        let file = format!("{name}.bin");
        write_f32(dir.join(&file), values)?;
        tensors.insert(name.to_string(), TensorEntry { file, shape });
        Ok(())
    };
    put("cine", vec![case.cine.len(), h, w], case.cine.frames.iter().flat_map(|f| f.data.iter().copied()).collect())?;
    put("dense", vec![case.dense.len(), h, w], case.dense.frames.iter().flat_map(|f| f.data.iter().copied()).collect())?;
    put(
        "disp",
        vec![case.gt_displacements_dense.len(), 2, h, w],
        case.gt_displacements_dense.iter().flat_map(|f| f.ux.iter().chain(&f.uy).copied()).collect(),
    )?;
    put("strain", vec![s.n_sectors, s.t_dense], case.gt_strain.values.clone())?;
    put("tos", vec![s.n_sectors], case.gt_tos.values.clone())?;
    put("mask", vec![h, w], case.myocardium.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    write_json(
        dir.join("meta.json"),
        &CaseMeta {
            format: CASE_FORMAT.into(),
            version: VERSION,
            seed: case.seed,
            spec: case.spec.clone(),
            centroid: case.myocardium.centroid,
            insertion_points: case.myocardium.insertion_points,
            tensors,
        },
    )
}

pub fn load_case(dir: impl AsRef<Path>) -> Result<PhantomCase> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: CaseMeta = read_json(&meta_path)?;
    check_format(&meta_path, &meta.format, meta.version, CASE_FORMAT)?;
    let s = &meta.spec;
    s.validate()?;
    let g = s.grid_size;
    let tensor = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let entry = meta
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("{}: missing tensor {name}", meta_path.display())))?;
        if entry.shape != shape {
            return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", entry.shape)));
        }
        Ok(read_f32(dir.join(&entry.file), shape.iter().product())?.into_iter().map(f64::from).collect())
    };
    let frames = |name: &str, t: usize| -> Result<Vec<Image>> {
        let v = tensor(name, &[t, g, g])?;
        Ok(v.chunks(g * g).map(|c| Image { h: g, w: g, data: c.to_vec() }).collect())
    };
    let disp = tensor("disp", &[s.t_dense, 2, g, g])?;
    let gt_displacements_dense = disp
        .chunks(2 * g * g)
        .map(|c| DisplacementField { h: g, w: g, ux: c[..g * g].to_vec(), uy: c[g * g..].to_vec() })
        .collect();
    let mask = tensor("mask", &[g, g])?.into_iter().map(|v| v > 0.5).collect();
    Ok(PhantomCase {
        spec: s.clone(),
        seed: meta.seed,
        cine: ImageSequence::new(frames("cine", s.t_cine)?, s.cine_dt_ms, Modality::Cine)?,
        dense: ImageSequence::new(frames("dense", s.t_dense)?, s.dense_dt_ms, Modality::Dense)?,
        gt_displacements_dense,
        gt_strain: StrainMatrix {
            n_sectors: s.n_sectors,
            n_frames: s.t_dense,
            values: tensor("strain", &[s.n_sectors, s.t_dense])?,
            dt_ms: s.dense_dt_ms,
        },
        gt_tos: TosCurve::new(tensor("tos", &[s.n_sectors])?),
        myocardium: MyocardiumMask { h: g, w: g, mask, centroid: meta.centroid, insertion_points: meta.insertion_points },
    })
}

/// Train/validation/test sizes for `n` cases (fractions 0.56 / 0.22 / rest).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.56 * n as f64).round() as usize;
    let val = ((0.22 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub base_spec: PhantomSpec,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

pub fn case_name(seed: u64) -> String {
    format!("case_{seed:06}")
}

/// Spec-level dataset without touching disk: `count` cases with seeds
/// `seed..seed+count`, each with a random activation pattern.
pub fn generate_cases(base: &PhantomSpec, count: usize, seed: u64) -> Result<Vec<PhantomCase>> {
    (0..count as u64)
        .map(|i| {
            let s = seed + i;
            generate_phantom(&random_spec(base, s), s)
        })
        .collect()
}

/// Writes a dataset directory: one subdirectory per case plus `manifest.json`.
pub fn write_dataset(dir: impl AsRef<Path>, base: &PhantomSpec, count: usize, seed: u64) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    base.validate()?;
    let dir = dir.as_ref();
    let (n_train, n_val, _) = split_sizes(count);
    let names: Vec<String> = (0..count as u64).map(|i| case_name(seed + i)).collect();
    create_dir(dir)?;
    for (i, name) in names.iter().enumerate() {
        let s = seed + i as u64;
        save_case(dir.join(name), &generate_phantom(&random_spec(base, s), s)?)?;
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: VERSION,
        seed,
        base_spec: base.clone(),
        train: names[..n_train].to_vec(),
        val: names[n_train..n_train + n_val].to_vec(),
        test: names[n_train + n_val..].to_vec(),
    };
    write_json(dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join("manifest.json");
    let m: DatasetManifest = read_json(&path)?;
    check_format(&path, &m.format, m.version, DATASET_FORMAT)?;
    Ok(m)
}

pub fn load_split(dir: impl AsRef<Path>, names: &[String]) -> Result<Vec<PhantomCase>> {
    names.iter().map(|n| load_case(dir.as_ref().join(n))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    group: String,
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    version: u32,
    model: ModelConfig,
    params: Vec<ParamEntry>,
}

fn groups<F>(m: &JointModel<F>) -> [(&'static str, &ParamStore<F>); 3] {
    [("reg", &m.reg.store), ("strain", &m.strain.store), ("lma", &m.lma.store)]
}

/// Saves the model as one `.bin` per named parameter tensor.
pub fn save_model(dir: impl AsRef<Path>, model: &JointModel<f32>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut params = Vec::new();
    for (group, store) in groups(model) {
        for ((name, shape), values) in store.names.iter().zip(&store.shapes).zip(&store.values) {
            let file = format!("{name}.bin");
            write_f32(dir.join(&file), values.iter().map(|&v| v as f64))?;
            params.push(ParamEntry { group: group.into(), name: name.clone(), file, shape: shape.clone() });
        }
    }
    write_json(
        dir.join("meta.json"),
        &CheckpointMeta { format: CHECKPOINT_FORMAT.into(), version: VERSION, model: model.config.clone(), params },
    )
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<JointModel<f32>> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: CheckpointMeta = read_json(&meta_path)?;
    check_format(&meta_path, &meta.format, meta.version, CHECKPOINT_FORMAT)?;
    let mut model = JointModel::<f32>::init(meta.model.clone(), 0)?;
    let stores: [(&str, &mut ParamStore<f32>); 3] =
        [("reg", &mut model.reg.store), ("strain", &mut model.strain.store), ("lma", &mut model.lma.store)];
    for (group, store) in stores {
        let entries: Vec<&ParamEntry> = meta.params.iter().filter(|p| p.group == group).collect();
        if entries.len() != store.len() {
            return Err(Error::Format(format!("{}: group {group} has {} tensors, model needs {}", meta_path.display(), entries.len(), store.len())));
        }
        for e in entries {
            let idx = store
                .index_of(&e.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {}", e.name)))?;
            if store.shapes[idx] != e.shape {
                return Err(Error::Format(format!("{}: shape {:?}, expected {:?}", e.name, e.shape, store.shapes[idx])));
            }
            store.values[idx] = read_f32(dir.join(&e.file), store.values[idx].len())?;
        }
    }
    Ok(model)
}

/// Fails when `dir` exists and is non-empty, unless `force` is set.
pub fn prepare_output_dir(dir: impl AsRef<Path>, force: bool) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!("{} exists and is not empty (use --force)", dir.display())));
        }
    }
    create_dir(dir)?;
    Ok(dir.to_path_buf())
}
