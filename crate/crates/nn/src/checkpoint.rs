//! Self-contained checkpoint directories.
//!
//! Layout:
//! - `manifest.json` — format version, kind, config fingerprint, iteration, tensor index and
//!   component-specific metadata (e.g. latent statistics);
//! - `params.bin` — raw little-endian tensor blobs in index order;
//! - `config.toml` — the full run configuration;
//! - `losses.csv` — optional loss history.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use noiseprompt_core::config::RunConfig;
use noiseprompt_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const CONFIG: &str = "config.toml";
const LOSSES: &str = "losses.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub fingerprint: String,
    pub iteration: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub fingerprint: String,
    pub iteration: usize,
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
    pub config: RunConfig,
    /// `(iteration, loss)` history.
    pub losses: Vec<(usize, f64)>,
}

/// What `load` checks against.
#[derive(Debug, Clone, Default)]
pub struct Expect<'a> {
    pub kind: Option<&'a str>,
    pub fingerprint: Option<&'a str>,
    /// Accept a fingerprint mismatch.
    pub allow_mismatch: bool,
}

fn cerr(e: candle_core::Error) -> Error {
    Error::Contract(e.to_string())
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len();
            let flat = t.flatten_all().map_err(cerr)?;
            let dtype = match t.dtype() {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>().map_err(cerr)? {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                    "f64"
                }
                _ => {
                    for v in flat.to_dtype(DType::F32).and_then(|t| t.to_vec1::<f32>()).map_err(cerr)? {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                    "f32"
                }
            };
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype.into(),
                shape: t.dims().to_vec(),
                offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            fingerprint: self.fingerprint.clone(),
            iteration: self.iteration,
            tensors: entries,
            meta: self.meta.clone(),
        };
        write(&dir.join(PARAMS), &blob)?;
        write(
            &dir.join(MANIFEST),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
        )?;
        write(&dir.join(CONFIG), self.config.to_toml().as_bytes())?;
        let mut csv = String::from("iteration,loss\n");
        for (k, l) in &self.losses {
            csv.push_str(&format!("{k},{l:e}\n"));
        }
        write(&dir.join(LOSSES), csv.as_bytes())
    }

    pub fn load(dir: &Path, expect: &Expect) -> Result<Checkpoint> {
        let mpath = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint {} has format version {}, expected {FORMAT_VERSION}",
                dir.display(),
                manifest.format_version
            )));
        }
        if let Some(kind) = expect.kind {
            if manifest.kind != kind {
                return Err(Error::Config(format!(
                    "checkpoint {} holds a {} model, expected {kind}",
                    dir.display(),
                    manifest.kind
                )));
            }
        }
        if let Some(fp) = expect.fingerprint {
            if manifest.fingerprint != fp && !expect.allow_mismatch {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with config {}, current config is {fp}",
                    dir.display(),
                    manifest.fingerprint
                )));
            }
        }
        let ppath = dir.join(PARAMS);
        let blob = std::fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let width = if e.dtype == "f64" { 8 } else { 4 };
            let bytes = blob.get(e.offset..e.offset + n * width).ok_or_else(|| Error::Parse {
                path: ppath.clone(),
                msg: format!("tensor {} runs past the end of the archive", e.name),
            })?;
            let t = match e.dtype.as_str() {
                "f64" => {
                    let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.clone(), &Device::Cpu)
                }
                "f32" => {
                    let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.clone(), &Device::Cpu)
                }
                other => {
                    return Err(Error::Parse {
                        path: ppath.clone(),
                        msg: format!("unknown dtype {other}"),
                    })
                }
            }
            .map_err(cerr)?;
            tensors.insert(e.name.clone(), t);
        }
        let config = RunConfig::load(&dir.join(CONFIG))?;
        let losses = read_losses(&dir.join(LOSSES))?;
        Ok(Checkpoint {
            kind: manifest.kind,
            fingerprint: manifest.fingerprint,
            iteration: manifest.iteration,
            tensors,
            meta: manifest.meta,
            config,
            losses,
        })
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

fn write(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_losses(path: &Path) -> Result<Vec<(usize, f64)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l.split_once(',').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                msg: format!("bad loss row {l:?}"),
            })?;
            let parse = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                msg,
            };
            Ok((
                k.parse().map_err(|e| parse(format!("{e}")))?,
                v.parse().map_err(|e| parse(format!("{e}")))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("a.weight".into(), Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap());
        tensors.insert("b".into(), Tensor::new(&[1e-300f64, 7.0, -0.0], &Device::Cpu).unwrap());
        Checkpoint {
            kind: "pae".into(),
            fingerprint: "abc".into(),
            iteration: 12,
            tensors,
            meta: serde_json::json!({"note": 1}),
            config: RunConfig::desk(),
            losses: vec![(0, 0.5), (10, 0.25)],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        c.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path(), &Expect { kind: Some("pae"), fingerprint: Some("abc"), ..Default::default() }).unwrap();
        assert_eq!(back.iteration, 12);
        assert_eq!(back.losses, c.losses);
        assert_eq!(back.config, c.config);
        assert_eq!(back.meta, c.meta);
        for (k, t) in &c.tensors {
            let b = &back.tensors[k];
            assert_eq!(b.dims(), t.dims());
            assert_eq!(b.dtype(), t.dtype());
            assert_eq!(
                b.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap(),
                t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
            );
        }
    }

    #[test]
    fn mismatches_rejected_unless_overridden() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let wrong_fp = Expect { fingerprint: Some("zzz"), ..Default::default() };
        assert!(matches!(Checkpoint::load(dir.path(), &wrong_fp), Err(Error::Config(_))));
        let allowed = Expect { fingerprint: Some("zzz"), allow_mismatch: true, ..Default::default() };
        assert!(Checkpoint::load(dir.path(), &allowed).is_ok());
        let wrong_kind = Expect { kind: Some("pdit"), ..Default::default() };
        assert!(matches!(Checkpoint::load(dir.path(), &wrong_kind), Err(Error::Config(_))));
        // bump the format version
        let m = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&m).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&m, text).unwrap();
        assert!(matches!(Checkpoint::load(dir.path(), &Expect::default()), Err(Error::Config(_))));
    }
}
