//! Model checkpoints: a little-endian tensor blob plus a JSON sidecar with
//! the configuration and training history.
//!
//! Blob layout: magic `SMPF`, `u32` format version, `u8` byte width of the
//! stored scalars, `u32` tensor count, then per tensor a `u32`-prefixed
//! UTF-8 name, `u32` rank, `u64` dims and the row-major data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::pfn::{PfnConfig, PfnModel};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::train::{StepLog, TrainConfig, TrainStatus};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SMPF";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub precision: Precision,
    pub model: PfnConfig,
    pub flow: Option<FlowConfig>,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
    pub train: Option<TrainConfig>,
    /// Configuration of the task prior the model was trained on.
    #[serde(default)]
    pub prior: serde_json::Value,
    /// Every random stream of a run is derived from `(train.seed, step)`, so
    /// this step count is the full RNG state needed to continue.
    pub steps_done: usize,
    pub status: Option<TrainStatus>,
    #[serde(default)]
    pub loss_history: Vec<StepLog>,
}

impl CheckpointMeta {
    pub fn untrained<T: Scalar>(model: &PfnModel<T>, init_seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            precision: T::PRECISION,
            model: model.config.clone(),
            flow: model.flow.clone(),
            init_seed,
            train: None,
            prior: serde_json::Value::Null,
            steps_done: 0,
            status: None,
            loss_history: Vec::new(),
        }
    }
}

/// Path of the JSON sidecar next to a blob.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut name = blob.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    blob.with_file_name(name)
}

pub fn save<T: Scalar>(model: &PfnModel<T>, meta: &CheckpointMeta, blob: &Path) -> Result<()> {
    if meta.precision != T::PRECISION {
        return Err(Error::Format(format!("sidecar says {} but the model is {}", meta.precision, T::PRECISION)));
    }
    let file = File::create(blob).map_err(|e| Error::io(blob, e))?;
    let mut w = BufWriter::new(file);
    write_blob(model, &mut w).map_err(|e| Error::io(blob, e))?;
    w.flush().map_err(|e| Error::io(blob, e))?;
    let side = sidecar_path(blob);
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

fn write_blob<T: Scalar>(model: &PfnModel<T>, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u8(T::PRECISION.byte_width() as u8)?;
    w.write_u32::<LittleEndian>(model.params.len() as u32)?;
    for (name, t) in model.params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            match T::PRECISION {
                Precision::F32 => w.write_f32::<LittleEndian>(v.to_f32().unwrap_or(f32::NAN))?,
                Precision::F64 => w.write_f64::<LittleEndian>(v.to_f64_lossy())?,
            }
        }
    }
    Ok(())
}

/// Loads a checkpoint into a model of scalar type `T`, converting the stored
/// precision if needed. Tensor names and shapes must match the architecture
/// described by the sidecar.
pub fn load<T: Scalar>(blob: &Path) -> Result<(PfnModel<T>, CheckpointMeta)> {
    let side = sidecar_path(blob);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", meta.format_version)));
    }
    let mut model = PfnModel::<T>::new(meta.model.clone(), meta.flow.clone(), meta.init_seed)?;
    let file = File::open(blob).map_err(|e| Error::io(blob, e))?;
    let mut r = BufReader::new(file);
    read_blob(&mut model, &mut r, meta.precision).map_err(|e| match e {
        BlobError::Io(e) => Error::io(blob, e),
        BlobError::Format(m) => Error::Format(m),
    })?;
    Ok((model, meta))
}

enum BlobError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for BlobError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            BlobError::Format("truncated blob".into())
        } else {
            BlobError::Io(e)
        }
    }
}

fn read_blob<T: Scalar>(model: &mut PfnModel<T>, r: &mut impl Read, precision: Precision) -> std::result::Result<(), BlobError> {
    let fmt = |m: String| BlobError::Format(m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported blob version {version}")));
    }
    let width = r.read_u8()? as usize;
    if width != precision.byte_width() {
        return Err(fmt(format!("blob stores {width}-byte scalars, sidecar says {precision}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != model.params.len() {
        return Err(fmt(format!("{count} tensors, architecture has {}", model.params.len())));
    }
    for i in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        if len > 4096 {
            return Err(fmt("tensor name too long".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| fmt("tensor name is not UTF-8".into()))?;
        if name != model.params.name(i) {
            return Err(fmt(format!("tensor {i} is `{name}`, expected `{}`", model.params.name(i))));
        }
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        if shape != model.params.tensor(i).shape() {
            return Err(fmt(format!("tensor `{name}` has shape {shape:?}, expected {:?}", model.params.tensor(i).shape())));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = match precision {
                Precision::F32 => r.read_f32::<LittleEndian>()? as f64,
                Precision::F64 => r.read_f64::<LittleEndian>()?,
            };
            data.push(T::of(v));
        }
        *model.params.tensor_mut(i) = Tensor::new(shape, data).map_err(|e| fmt(e.to_string()))?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fmt("trailing bytes after the last tensor".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PfnConfig {
        PfnConfig {
            width: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            max_classes: 3,
            max_features: 4,
            ..PfnConfig::desk()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = PfnModel::<f64>::new(tiny(), Some(FlowConfig::default()), 5).unwrap();
        save(&model, &CheckpointMeta::untrained(&model, 5), &path).unwrap();
        assert!(sidecar_path(&path).exists());
        let (back, meta) = load::<f64>(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(meta.init_seed, 5);
    }

    #[test]
    fn loads_across_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m32.bin");
        let model = PfnModel::<f32>::new(tiny(), None, 2).unwrap();
        save(&model, &CheckpointMeta::untrained(&model, 2), &path).unwrap();
        let (wide, _) = load::<f64>(&path).unwrap();
        assert_eq!(wide.params.cast::<f32>(), model.params);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let model = PfnModel::<f64>::new(tiny(), None, 1).unwrap();
        save(&model, &CheckpointMeta::untrained(&model, 1), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        std::fs::write(&path, &extra).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_precision_mismatch_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let model = PfnModel::<f64>::new(tiny(), None, 1).unwrap();
        let mut meta = CheckpointMeta::untrained(&model, 1);
        meta.precision = Precision::F32;
        assert!(save(&model, &meta, &dir.path().join("m.bin")).is_err());
    }
}
