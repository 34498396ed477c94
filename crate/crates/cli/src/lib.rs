//! Stage runner behind the `kgcorrect` binary. Each stage reads artifacts
//! from the configured paths, writes its outputs atomically and records a
//! manifest with input and output hashes.

pub mod config;
pub mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kgcorrect::io::{sha256_file, sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{RunConfig, Variant};
pub use stages::{run_stage, Stage};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] kgcorrect::Error),
}

impl CliError {
    /// 1 for usage, configuration and ordering mistakes; 2 for bad data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(kgcorrect::Error::Config(_) | kgcorrect::Error::MissingArtifact { .. }) => 1,
            CliError::Core(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Where every artifact lives for a resolved config.
#[derive(Clone, Debug)]
pub struct Layout {
    pub store: PathBuf,
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub index: PathBuf,
    pub reports: PathBuf,
    pub manifests: PathBuf,
    pub variant: Variant,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        let p = &cfg.paths;
        Layout {
            store: p.store.clone(),
            data: p.data.clone(),
            checkpoints: p.checkpoints.clone(),
            index: p.index.clone(),
            reports: p.reports.clone(),
            manifests: p.manifests.clone(),
            variant: cfg.variant,
        }
    }

    pub fn kg_entities(&self) -> PathBuf {
        self.store.join("entities.tsv")
    }

    pub fn kg_triples(&self) -> PathBuf {
        self.store.join("triples.tsv")
    }

    pub fn ingest_report(&self) -> PathBuf {
        self.store.join("ingest.json")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.store.join("embeddings.ckpt")
    }

    pub fn vocab(&self) -> PathBuf {
        self.data.join("vocab.txt")
    }

    pub fn dataset_file(&self, name: &str) -> PathBuf {
        self.data.join(format!("{name}.tsv"))
    }

    pub fn mined(&self, name: &str) -> PathBuf {
        self.data.join(format!("{name}.mined.tsv"))
    }

    pub fn miner(&self) -> PathBuf {
        self.checkpoints.join("miner.ckpt")
    }

    pub fn l1(&self) -> PathBuf {
        self.checkpoints.join(self.variant.name()).join("l1.ckpt")
    }

    pub fn l2(&self) -> PathBuf {
        self.checkpoints.join(self.variant.name()).join("l2.ckpt")
    }

    pub fn entity_index(&self) -> PathBuf {
        self.index.join(format!("{}.bin", self.variant.name()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.reports.join(self.variant.name())
    }

    pub fn sweep(&self) -> PathBuf {
        self.report_dir().join("sweep.json")
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.report_dir().join(format!("report.{ext}"))
    }

    pub fn manifest(&self, stage: &str, per_variant: bool) -> PathBuf {
        let name = if per_variant { format!("{stage}.{}.json", self.variant.name()) } else { format!("{stage}.json") };
        self.manifests.join(name)
    }

    /// Manifest keys: paths relative to the directory holding `manifests/`.
    fn key(&self, p: &Path) -> String {
        let root = self.manifests.parent().unwrap_or(Path::new(""));
        p.strip_prefix(root).unwrap_or(p).display().to_string()
    }
}

/// Errors unless `p` exists, naming the stage that writes it.
pub fn require(p: &Path, producer: &'static str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(kgcorrect::Error::MissingArtifact { path: p.to_path_buf(), producer }.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub variant: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    pub finished_at: u64,
}

impl Manifest {
    /// Equal up to wall time and finish timestamp.
    pub fn same_run(&self, other: &Manifest) -> bool {
        let strip = |m: &Manifest| Manifest { wall_time_secs: 0.0, finished_at: 0, ..m.clone() };
        strip(self) == strip(other)
    }
}

/// Collects hashes while a stage runs, then writes the manifest.
pub(crate) struct Recorder<'a> {
    layout: &'a Layout,
    stage: &'static str,
    per_variant: bool,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Recorder<'a> {
    pub fn new(layout: &'a Layout, stage: &'static str, per_variant: bool) -> Self {
        Recorder {
            layout,
            stage,
            per_variant,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, p: &Path) -> Result<()> {
        self.inputs.insert(self.layout.key(p), sha256_file(p)?);
        Ok(())
    }

    pub fn output(&mut self, p: &Path) -> Result<()> {
        self.outputs.insert(self.layout.key(p), sha256_file(p)?);
        Ok(())
    }

    pub fn input_bytes(&mut self, p: &Path, bytes: &[u8]) {
        self.inputs.insert(self.layout.key(p), sha256_hex(bytes));
    }

    pub fn output_bytes(&mut self, p: &Path, bytes: &[u8]) {
        self.outputs.insert(self.layout.key(p), sha256_hex(bytes));
    }

    pub fn finish(self, cfg: &RunConfig) -> Result<Manifest> {
        let m = Manifest {
            stage: self.stage.to_string(),
            variant: self.per_variant.then(|| self.layout.variant.name().to_string()),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            finished_at: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        let path = self.layout.manifest(self.stage, self.per_variant);
        write_json(&path, &m)?;
        log::info!("{} finished in {:.1}s", self.stage, m.wall_time_secs);
        Ok(m)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = kgcorrect::io::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| kgcorrect::Error::format("json", format!("{}: {e}", path.display())).into())
}

pub(crate) fn mkdirs(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| kgcorrect::Error::io(dir, e))?;
    }
    Ok(())
}
