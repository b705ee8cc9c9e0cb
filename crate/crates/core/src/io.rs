//! Little-endian binary containers for models and sample sets, and the
//! on-disk dataset layout.
//!
//! Every container starts with the magic `FHUG`, a `u16` format version, a
//! `u8` record kind and a `u8` element width (4 or 8 bytes).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learner::{ModelArch, ModelParams};
use crate::signal::{SpatioTemporalMap, Waveform};
use crate::synth::{Benchmark, BenchmarkConfig, ClientData, Split, SyntheticSample};

const MAGIC: &[u8; 4] = b"FHUG";
const VERSION: u16 = 1;
const KIND_MODEL: u8 = 1;
const KIND_SAMPLES: u8 = 2;

/// Element type of stored sample values. Models are always stored as `f64`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn width(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_width(w: u8) -> Result<Self> {
        match w {
            4 => Ok(Dtype::F32),
            8 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unsupported element width {other}"))),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Writer {
    buf: Vec<u8>,
    dtype: Dtype,
}

impl Writer {
    fn new(kind: u8, dtype: Dtype) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(kind);
        buf.push(dtype.width());
        Self { buf, dtype }
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn values(&mut self, vs: &[f64]) {
        match self.dtype {
            Dtype::F64 => vs.iter().for_each(|v| self.buf.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => vs
                .iter()
                .for_each(|v| self.buf.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    dtype: Dtype,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], kind: u8) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing container magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        if bytes[6] != kind {
            return Err(Error::Format(format!(
                "expected record kind {kind}, found {}",
                bytes[6]
            )));
        }
        Ok(Self {
            bytes,
            pos: 8,
            dtype: Dtype::from_width(bytes[7])?,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated container".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let w = self.dtype.width() as usize;
        let raw = self.take(n.checked_mul(w).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(match self.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_model(m: &ModelParams) -> Result<Vec<u8>> {
    let mut w = Writer::new(KIND_MODEL, Dtype::F64);
    let a = &m.arch;
    for v in [a.time, a.rows, a.channels, a.n_filters, a.taps] {
        w.u32(v)?;
    }
    w.u64(m.theta.len() as u64);
    w.values(&m.theta);
    Ok(w.buf)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes, KIND_MODEL)?;
    let arch = ModelArch {
        time: r.u32()?,
        rows: r.u32()?,
        channels: r.u32()?,
        n_filters: r.u32()?,
        taps: r.u32()?,
    };
    let n = r.u64()? as usize;
    let theta = r.values(n)?;
    r.finish()?;
    ModelParams::new(arch, theta)
}

pub fn write_model(path: &Path, m: &ModelParams) -> Result<()> {
    fs::write(path, encode_model(m)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelParams> {
    decode_model(&fs::read(path)?)
}

/// Sample records: shape header, then per sample `gt_hr`, the ground-truth
/// signal and the map values in time-major order.
pub fn encode_samples(samples: &[SyntheticSample], dtype: Dtype) -> Result<Vec<u8>> {
    let mut w = Writer::new(KIND_SAMPLES, dtype);
    w.u64(samples.len() as u64);
    let (shape, fs) = match samples.first() {
        Some(s) => (s.x.shape(), s.x.fs()),
        None => ([0, 0, 0], 0.0),
    };
    for v in shape {
        w.u32(v)?;
    }
    w.f64(fs);
    for s in samples {
        if s.x.shape() != shape || s.x.fs() != fs {
            return Err(Error::Shape("samples in one container must share shape and fs".into()));
        }
        w.f64(s.gt_hr);
        w.values(s.gt_signal.samples());
        w.values(s.x.values());
    }
    Ok(w.buf)
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<SyntheticSample>> {
    let mut r = Reader::new(bytes, KIND_SAMPLES)?;
    let count = r.u64()? as usize;
    let (t, s, c) = (r.u32()?, r.u32()?, r.u32()?);
    let fs = r.f64()?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let gt_hr = r.f64()?;
        let gt = r.values(t)?;
        let values = r.values(t * s * c)?;
        out.push(SyntheticSample {
            x: SpatioTemporalMap::new(t, s, c, fs, values)?,
            gt_signal: Waveform::new(gt, fs)?,
            gt_hr,
        });
    }
    r.finish()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub samples: usize,
}

/// Dataset directory manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub dtype: Dtype,
    pub config: BenchmarkConfig,
    pub files: BTreeMap<String, FileEntry>,
}

pub const DATASET_FORMAT: &str = "fedhug-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// SHA-256 of the canonical JSON form of a serializable value.
pub fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

fn client_dir(id: u32) -> String {
    format!("client_{id}")
}

/// Writes `bench` under `dir`: one container per split plus the manifest.
pub fn save_benchmark(
    dir: &Path,
    config: &BenchmarkConfig,
    seed: u64,
    bench: &Benchmark,
    dtype: Dtype,
) -> Result<DatasetManifest> {
    let mut files = BTreeMap::new();
    let mut put = |rel: String, samples: &[SyntheticSample]| -> Result<()> {
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let bytes = encode_samples(samples, dtype)?;
        fs::write(&path, &bytes)?;
        files.insert(
            rel,
            FileEntry {
                sha256: sha256_hex(&bytes),
                samples: samples.len(),
            },
        );
        Ok(())
    };
    put("pretrain/train.bin".into(), &bench.pretrain.train)?;
    put("pretrain/val.bin".into(), &bench.pretrain.val)?;
    for c in &bench.clients {
        put(format!("{}/train.bin", client_dir(c.id)), &c.split.train)?;
        put(format!("{}/val.bin", client_dir(c.id)), &c.split.val)?;
    }
    put("target/test.bin".into(), &bench.target)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        name: config.name.clone(),
        seed,
        config_hash: json_hash(config)?,
        dtype,
        config: config.clone(),
        files,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes =
        fs::read(&path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unknown dataset format {:?}", m.format)));
    }
    Ok(m)
}

/// Loads a dataset directory, verifying every file hash.
pub fn load_benchmark(dir: &Path) -> Result<(DatasetManifest, Benchmark)> {
    let manifest = read_manifest(dir)?;
    let load = |rel: &str| -> Result<Vec<SyntheticSample>> {
        let entry = manifest
            .files
            .get(rel)
            .ok_or_else(|| Error::Format(format!("manifest lists no {rel}")))?;
        let bytes = fs::read(dir.join(rel))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Format(format!("hash mismatch for {rel}")));
        }
        decode_samples(&bytes)
    };
    let pretrain = Split {
        train: load("pretrain/train.bin")?,
        val: load("pretrain/val.bin")?,
    };
    let clients = manifest
        .config
        .clients
        .iter()
        .map(|p| {
            Ok(ClientData {
                id: p.id,
                split: Split {
                    train: load(&format!("{}/train.bin", client_dir(p.id)))?,
                    val: load(&format!("{}/val.bin", client_dir(p.id)))?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let target = load("target/test.bin")?;
    Ok((
        manifest,
        Benchmark {
            pretrain,
            clients,
            target,
        },
    ))
}
