//! Binary checkpoint format.
//!
//! ```text
//! "DPT1" | u32 version
//! u32 metadata length | UTF-8 `key = value` lines
//! u32 parameter count
//! per parameter: u32 name length | name | u32 ndim | u64 dims… | u8 is_f64 | u8 frozen | u64 offset
//! raw little-endian data; offsets are relative to the start of this section
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numcore::{Parameter, ParameterStore};

const MAGIC: &[u8; 4] = b"DPT1";
const VERSION: u32 = 1;

/// Storage width of parameter data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    /// Lossy export; reloaded values are widened back to `f64`.
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub config_hash: String,
    pub seed: u64,
    /// File name of the denoised graph this checkpoint was trained on or produced.
    pub denoised_graph: Option<String>,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Free-form extra metadata (e.g. the prompt variant).
    pub extra: BTreeMap<String, String>,
    pub store: ParameterStore,
}

impl Checkpoint {
    pub fn new(stage: u8, config_hash: impl Into<String>, store: ParameterStore) -> Self {
        Self {
            stage,
            config_hash: config_hash.into(),
            seed: store.seed(),
            denoised_graph: None,
            loss_trace: Vec::new(),
            extra: BTreeMap::new(),
            store,
        }
    }

    pub fn expect_stage(&self, expected: u8) -> Result<()> {
        if self.stage == expected {
            Ok(())
        } else {
            Err(Error::StageMismatch {
                expected,
                found: self.stage,
            })
        }
    }

    fn metadata(&self) -> String {
        let trace: Vec<String> = self.loss_trace.iter().map(|x| format!("{x:?}")).collect();
        let mut meta = format!(
            "stage = {}\nconfig_hash = {}\nseed = {}\n",
            self.stage, self.config_hash, self.seed
        );
        if let Some(g) = &self.denoised_graph {
            meta.push_str(&format!("denoised_graph = {g}\n"));
        }
        meta.push_str(&format!("loss_trace = {}\n", trace.join(",")));
        for (k, v) in &self.extra {
            meta.push_str(&format!("{k} = {v}\n"));
        }
        meta
    }

    pub fn write_to<W: Write>(&self, out: &mut W, precision: Precision) -> Result<()> {
        let meta = self.metadata();
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        write_u32(out, meta.len())?;
        out.write_all(meta.as_bytes())?;
        write_u32(out, self.store.len())?;

        let width = match precision {
            Precision::F64 => 8u64,
            Precision::F32 => 4,
        };
        let mut offset = 0u64;
        for (name, p) in self.store.iter() {
            let (r, c) = p.shape();
            write_u32(out, name.len())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&2u32.to_le_bytes())?;
            out.write_all(&(r as u64).to_le_bytes())?;
            out.write_all(&(c as u64).to_le_bytes())?;
            out.write_all(&[u8::from(precision == Precision::F64), u8::from(p.frozen)])?;
            out.write_all(&offset.to_le_bytes())?;
            offset += width * p.len() as u64;
        }
        for (_, p) in self.store.iter() {
            for &x in p.value.iter() {
                match precision {
                    Precision::F64 => out.write_all(&x.to_le_bytes())?,
                    Precision::F32 => out.write_all(&(x as f32).to_le_bytes())?,
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, Precision::F64).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out, Precision::F64)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(input)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(input)? as usize;
        let meta = String::from_utf8(read_bytes(input, meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;

        let mut fields = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line {line:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let mut take = |key: &str| {
            fields
                .remove(key)
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {key}")))
        };
        let stage = take("stage")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad stage".into()))?;
        let config_hash = take("config_hash")?;
        let seed = take("seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad seed".into()))?;
        let trace = take("loss_trace")?;
        let loss_trace = trace
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint("bad loss trace".into()))?;
        let denoised_graph = fields.remove("denoised_graph");

        let count = read_u32(input)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(input)? as usize;
            let name = String::from_utf8(read_bytes(input, name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = read_u32(input)?;
            if ndim != 2 {
                return Err(Error::Checkpoint(format!("{name}: expected 2 dims, got {ndim}")));
            }
            let rows = read_u64(input)? as usize;
            let cols = read_u64(input)? as usize;
            let flags = read_bytes(input, 2)?;
            let offset = read_u64(input)?;
            manifest.push((name, rows, cols, flags[0] == 1, flags[1] == 1, offset));
        }

        let mut store = ParameterStore::new(seed);
        let mut position = 0u64;
        for (name, rows, cols, is_f64, frozen, offset) in manifest {
            if offset != position {
                return Err(Error::Checkpoint(format!("{name}: offset {offset}, expected {position}")));
            }
            let n = rows * cols;
            let width = if is_f64 { 8 } else { 4 };
            let raw = read_bytes(input, n * width)?;
            let data: Vec<f64> = if is_f64 {
                raw.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect()
            };
            position += (n * width) as u64;
            let value = Array2::from_shape_vec((rows, cols), data).expect("sized by manifest");
            let mut param = Parameter::new(value);
            param.frozen = frozen;
            store.insert_parameter(name, param);
        }

        Ok(Self {
            stage,
            config_hash,
            seed,
            denoised_graph,
            loss_trace,
            extra: fields,
            store,
        })
    }
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated checkpoint: {e}"))
}

fn write_u32<W: Write>(out: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint("length exceeds u32".into()))?;
    out.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_bytes<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}
