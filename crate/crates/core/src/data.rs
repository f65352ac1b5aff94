//! Feature interchange: the LIFQ binary record format, JSON manifests,
//! seeded train/test splits and the synthetic feature generator.
//!
//! LIFQ layout, all integers little-endian:
//!
//! ```text
//! magic "LIFQ" | version u16 = 1 | tensor count u8 = 2
//! per tensor:  dtype u8 (1 = f32) | ndim u8 | dims u32[ndim] | f32 data row-major
//! mos f64 | id length u16 | id UTF-8 bytes
//! ```
//!
//! The first tensor is stage-3, the second stage-4.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decoder::StageFeatures;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LIFQ_MAGIC: &[u8; 4] = b"LIFQ";
pub const LIFQ_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub stage3: Tensor,
    pub stage4: Tensor,
    pub mos: f64,
}

impl FeatureRecord {
    pub fn features(&self) -> StageFeatures {
        StageFeatures {
            stage3: self.stage3.clone(),
            stage4: self.stage4.clone(),
        }
    }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn push_tensor_f32(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let ndim = u8::try_from(t.shape().len())
        .map_err(|_| Error::Argument(format!("too many dimensions: {:?}", t.shape())))?;
    buf.push(DTYPE_F32);
    buf.push(ndim);
    for &d in t.shape() {
        let d =
            u32::try_from(d).map_err(|_| Error::Argument(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_feature_record(record: &FeatureRecord) -> Result<Vec<u8>> {
    let id = record.id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::Argument(format!("record id longer than {} bytes", u16::MAX)))?;
    let mut buf = Vec::with_capacity(64 + 4 * (record.stage3.numel() + record.stage4.numel()));
    buf.extend_from_slice(LIFQ_MAGIC);
    buf.extend_from_slice(&LIFQ_VERSION.to_le_bytes());
    buf.push(2);
    push_tensor_f32(&mut buf, &record.stage3)?;
    push_tensor_f32(&mut buf, &record.stage4)?;
    buf.extend_from_slice(&record.mos.to_le_bytes());
    buf.extend_from_slice(&id_len.to_le_bytes());
    buf.extend_from_slice(id);
    Ok(buf)
}

pub fn write_feature_file(record: &FeatureRecord, path: &Path) -> Result<()> {
    write_atomic(path, &encode_feature_record(record)?)
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                field,
                detail: format!("truncated at byte {} (need {n} more)", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

fn read_tensor_f32(cur: &mut Cursor<'_>) -> Result<Tensor> {
    let dtype = cur.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format {
            field: "dtype",
            detail: format!("expected {DTYPE_F32} (float32), found {dtype}"),
        });
    }
    let ndim = cur.u8("ndim")? as usize;
    if ndim == 0 {
        return Err(Error::Format {
            field: "ndim",
            detail: "tensor must have at least one dimension".into(),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = cur.u32("dims")? as usize;
        if d == 0 {
            return Err(Error::Format {
                field: "dims",
                detail: "zero-sized dimension".into(),
            });
        }
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format {
            field: "dims",
            detail: format!("element count overflows: {shape:?}"),
        })?;
    let raw = cur.take(numel.saturating_mul(4), "data")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn decode_feature_record(bytes: &[u8]) -> Result<FeatureRecord> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != LIFQ_MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!("expected \"LIFQ\", found {magic:?}"),
        });
    }
    let version = cur.u16("version")?;
    if version != LIFQ_VERSION {
        return Err(Error::Format {
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let count = cur.u8("tensor count")?;
    if count != 2 {
        return Err(Error::Format {
            field: "tensor count",
            detail: format!("expected 2, found {count}"),
        });
    }
    let stage3 = read_tensor_f32(&mut cur)?;
    let stage4 = read_tensor_f32(&mut cur)?;
    let mos = cur.f64("mos")?;
    let id_len = cur.u16("id length")? as usize;
    let id = std::str::from_utf8(cur.take(id_len, "id")?)
        .map_err(|e| Error::Format {
            field: "id",
            detail: e.to_string(),
        })?
        .to_owned();
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            field: "trailer",
            detail: format!("{} unexpected trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(FeatureRecord {
        id,
        stage3,
        stage4,
        mos,
    })
}

pub fn read_feature_file(path: &Path) -> Result<FeatureRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_record(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub mos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub records: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    /// Directory that relative record paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            records: Vec::new(),
            metadata: BTreeMap::new(),
            root: root.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_owned(),
            source,
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format {
                field: "version",
                detail: format!("unsupported manifest version {}", m.version),
            });
        }
        m.root = path.parent().map(Path::to_owned).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_owned(),
            source,
        })?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format {
                    field: "records",
                    detail: format!("duplicate id `{}`", r.id),
                });
            }
            if !r.mos.is_finite() {
                return Err(Error::Format {
                    field: "mos",
                    detail: format!("non-finite label for `{}`", r.id),
                });
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Reads the feature file behind `id` and checks it agrees with the
    /// manifest entry.
    pub fn load_record(&self, id: &str) -> Result<FeatureRecord> {
        let entry = self
            .entry(id)
            .ok_or_else(|| Error::Argument(format!("id `{id}` not in manifest")))?;
        let record = read_feature_file(&self.resolve(entry))?;
        if record.id != entry.id || record.mos.to_bits() != entry.mos.to_bits() {
            return Err(Error::Format {
                field: "record",
                detail: format!(
                    "file for `{}` holds id `{}` mos {} (manifest mos {})",
                    entry.id, record.id, record.mos, entry.mos
                ),
            });
        }
        Ok(record)
    }

    pub fn load_records(&self, ids: &[String]) -> Result<Vec<FeatureRecord>> {
        ids.iter().map(|id| self.load_record(id)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: f64,
    pub run_index: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.8,
            run_index: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle of the manifest ids; the first `floor(f·n)` go to train.
pub fn split(manifest: &Manifest, spec: &SplitSpec) -> Result<Split> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let n = manifest.records.len();
    if n < 2 {
        return Err(Error::Argument(format!(
            "split needs at least 2 records, got {n}"
        )));
    }
    let mut ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.run_index);
    ids.shuffle(&mut rng);
    let n_train = (spec.train_fraction * n as f64).floor() as usize;
    let test = ids.split_off(n_train);
    Ok(Split { train: ids, test })
}

/// Median; an even count averages the two central values.
pub fn median_of_runs(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("median of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Constants of the planted label function.
pub const PLANTED_A: f64 = 3.0;
pub const PLANTED_B: f64 = 2.0;
pub const PLANTED_C: f64 = 1.0;

/// `50 + 25·tanh(a·m4 + b·m3 + c·m4²)` with `m3`, `m4` the means of all
/// stage-3 and stage-4 entries.
pub fn planted_mos(stage3: &Tensor, stage4: &Tensor) -> f64 {
    let m3 = stage3.sum() / stage3.numel() as f64;
    let m4 = stage4.sum() / stage4.numel() as f64;
    50.0 + 25.0 * (PLANTED_A * m4 + PLANTED_B * m3 + PLANTED_C * m4 * m4).tanh()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthDims {
    pub stage3: [usize; 3],
    pub stage4: [usize; 3],
}

impl Default for SynthDims {
    fn default() -> Self {
        Self {
            stage3: [14, 14, 16],
            stage4: [7, 7, 32],
        }
    }
}

impl std::str::FromStr for SynthDims {
    type Err = Error;

    /// Parses `H3xW3xC3,H4xW4xC4`, e.g. `14x14x16,7x7x32`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |part: &str| -> Result<[usize; 3]> {
            let dims: Vec<usize> = part
                .split('x')
                .map(|d| d.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Argument(format!("bad dims `{part}`: {e}")))?;
            match dims.as_slice() {
                &[h, w, c] if h > 0 && w > 0 && c > 0 => Ok([h, w, c]),
                _ => Err(Error::Argument(format!(
                    "expected HxWxC with positive sizes, got `{part}`"
                ))),
            }
        };
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| Error::Argument(format!("expected `H3xW3xC3,H4xW4xC4`, got `{s}`")))?;
        Ok(Self {
            stage3: parse(a)?,
            stage4: parse(b)?,
        })
    }
}

impl std::fmt::Display for SynthDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [a, b, c] = self.stage3;
        let [d, e, g] = self.stage4;
        write!(f, "{a}x{b}x{c},{d}x{e}x{g}")
    }
}

/// Standard deviation of the per-record stage offsets. Records differ in
/// their stage means by this scale, which spreads the planted labels over
/// most of the tanh range.
pub const SYNTH_LATENT_STD: f64 = 0.25;

/// One synthetic record: each stage is a per-record offset plus unit
/// Gaussian noise, stored at f32 precision; the label is the planted function
/// of the stored values.
pub fn synth_record<R: rand::Rng>(rng: &mut R, id: String, dims: &SynthDims) -> FeatureRecord {
    let latent = Normal::new(0.0, SYNTH_LATENT_STD).expect("positive std");
    let noise = Normal::new(0.0, 1.0).expect("positive std");
    let mut sample = |shape: [usize; 3]| {
        let offset: f64 = latent.sample(rng);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| (offset + noise.sample(rng)) as f32 as f64)
            .collect();
        Tensor::new(&shape, data).expect("shape matches")
    };
    let stage3 = sample(dims.stage3);
    let stage4 = sample(dims.stage4);
    let mos = planted_mos(&stage3, &stage4);
    FeatureRecord {
        id,
        stage3,
        stage4,
        mos,
    }
}

/// Generates `count` records into `out_dir` and writes `manifest.json`.
pub fn synth_generate(
    count: usize,
    seed: u64,
    dims: &SynthDims,
    out_dir: &Path,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Argument("count must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest::new(out_dir);
    for i in 0..count {
        let id = format!("synth-{i:05}");
        let record = synth_record(&mut rng, id.clone(), dims);
        let file = format!("{id}.lifq");
        write_feature_file(&record, &out_dir.join(&file))?;
        manifest.records.push(ManifestEntry {
            id,
            path: file,
            mos: record.mos,
        });
    }
    let meta = &mut manifest.metadata;
    meta.insert("generator".into(), "synthetic-planted".into());
    meta.insert("seed".into(), seed.into());
    meta.insert("dims".into(), dims.to_string().into());
    meta.insert("C3".into(), dims.stage3[2].into());
    meta.insert("C4".into(), dims.stage4[2].into());
    meta.insert(
        "planted".into(),
        serde_json::json!({
            "formula": "50 + 25*tanh(a*mean(stage4) + b*mean(stage3) + c*mean(stage4)^2)",
            "a": PLANTED_A, "b": PLANTED_B, "c": PLANTED_C,
        }),
    );
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
