//! Binary model checkpoints ("LLST").
//!
//! A checkpoint carries the model configuration as a JSON header followed by
//! one named record per parameter slot. Loading rebuilds the architecture from
//! the header and then requires every slot to be present with its exact shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TwoStreamModel};
use crate::params::{ParamKind, Parameters};
use crate::tensor::{Precision, Real};

pub const MAGIC: &[u8; 4] = b"LLST";
pub const VERSION: u32 = 1;

/// Free-form provenance stored next to the configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: usize,
    /// Unrolled steps (clips per episode) the model was trained with.
    pub steps: usize,
    pub clip_frames: usize,
    pub val_accuracy: Option<f64>,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub model: TwoStreamModel<T>,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::NormScale => 2,
        ParamKind::NormShift => 3,
        ParamKind::RunningMean => 4,
        ParamKind::RunningVar => 5,
    }
}

fn precision_code(p: Precision) -> u8 {
    match p {
        Precision::Train32 => 0,
        Precision::Check64 => 1,
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u8(precision_code(T::PRECISION))?;
        let header = serde_json::to_vec(&Header {
            config: self.config,
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        let views = self.model.views();
        w.write_u32::<LittleEndian>(views.len() as u32)?;
        for v in views {
            w.write_u16::<LittleEndian>(v.name.len() as u16)?;
            w.write_all(v.name.as_bytes())?;
            w.write_u8(kind_code(v.kind))?;
            w.write_u8(v.shape.len() as u8)?;
            for &d in &v.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &x in v.data {
                match T::PRECISION {
                    Precision::Train32 => w.write_f32::<LittleEndian>(x.as_f64() as f32)?,
                    Precision::Check64 => w.write_f64::<LittleEndian>(x.as_f64())?,
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let wide = match r.read_u8()? {
            0 => false,
            1 => true,
            c => return Err(Error::Format(format!("unknown precision code {c}"))),
        };
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let Header { config, meta } = serde_json::from_slice(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = TwoStreamModel::<T>::init(&config, 0)?;
        let records = r.read_u32::<LittleEndian>()? as usize;
        let mut views = model.views_mut();
        if records != views.len() {
            return Err(Error::Format(format!(
                "checkpoint has {records} records, configuration needs {}",
                views.len()
            )));
        }
        for v in views.iter_mut() {
            let n = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let kind = r.read_u8()?;
            let rank = r.read_u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            if name != v.name || kind != kind_code(v.kind) || shape != v.shape {
                return Err(Error::Format(format!(
                    "record '{name}' {shape:?} does not match slot '{}' {:?}",
                    v.name, v.shape
                )));
            }
            for x in v.data.iter_mut() {
                let value = if wide {
                    r.read_f64::<LittleEndian>()?
                } else {
                    f64::from(r.read_f32::<LittleEndian>()?)
                };
                *x = T::of(value);
            }
        }
        drop(views);
        Ok(Self { config, meta, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
