//! Run configuration: one TOML file, overlaid on the built-in defaults, then
//! `--set key=value` overrides. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use kgcorrect::evalharness::{DEFAULT_CLEAN_TR_CAP, DEFAULT_THETAS};
use kgcorrect::graphenc::GatConfig;
use kgcorrect::io::sha256_hex;
use kgcorrect::kgpretrain::PretrainConfig;
use kgcorrect::nn::TrainConfig;
use kgcorrect::pipeline::TriggerRule;
use kgcorrect::rerankspan::{CrossEncoderConfig, LossWeights};
use kgcorrect::retrieval::BiEncoderConfig;
use kgcorrect::synthdata::{GenConfig, KgSynthConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoGat,
    NoKg,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoGat, Variant::NoKg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGat => "no_gat",
            Variant::NoKg => "no_kg",
        }
    }

    pub fn use_gat(self) -> bool {
        self == Variant::Full
    }

    pub fn use_descriptions(self) -> bool {
        self != Variant::NoKg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Input KG files read by `ingest` (written by `synth-kg`).
    pub entities: PathBuf,
    pub triples: PathBuf,
    /// Utterance templates; the built-in set when unset.
    pub templates: Option<PathBuf>,
    pub store: PathBuf,
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub index: PathBuf,
    pub reports: PathBuf,
    pub manifests: PathBuf,
}

impl Paths {
    pub fn under(root: &Path) -> Self {
        Paths {
            entities: root.join("input/entities.tsv"),
            triples: root.join("input/triples.tsv"),
            templates: None,
            store: root.join("kg"),
            data: root.join("data"),
            checkpoints: root.join("checkpoints"),
            index: root.join("index"),
            reports: root.join("reports"),
            manifests: root.join("manifests"),
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            entities: "fixtures/kg/entities.tsv".into(),
            triples: "fixtures/kg/triples.tsv".into(),
            ..Paths::under(Path::new("run"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub gen: GenConfig,
    pub vocab_min_count: usize,
    /// Neighbour cap for entity subgraphs.
    pub max_neighbors: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            gen: GenConfig::default(),
            vocab_min_count: 2,
            max_neighbors: kgcorrect::kgstore::DEFAULT_MAX_NEIGHBORS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinerConfig {
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L1Config {
    pub model: BiEncoderConfig,
    pub train: TrainConfig,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L2Config {
    pub model: CrossEncoderConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub thetas: Vec<f64>,
    pub clean_tr_cap: f64,
    /// Used when no sweep result exists.
    pub theta: f64,
    pub always_trigger: bool,
    pub min_rank_score: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 10,
            thetas: DEFAULT_THETAS.to_vec(),
            clean_tr_cap: DEFAULT_CLEAN_TR_CAP,
            theta: 5.0,
            always_trigger: false,
            min_rank_score: None,
        }
    }
}

impl EvalConfig {
    pub fn rule(&self, theta: f64) -> TriggerRule {
        let mut r = if self.always_trigger { TriggerRule::always() } else { TriggerRule::threshold(theta) };
        r.min_rank_score = self.min_rank_score;
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub paths: Paths,
    pub synth: KgSynthConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub miner: MinerConfig,
    pub l1: L1Config,
    pub l2: L2Config,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Desk scale: small encoders and graph layers, one CPU core.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::Full,
            paths: Paths::default(),
            synth: KgSynthConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig { gen: GenConfig { l1_train: 15_000, ..GenConfig::default() }, ..DataConfig::default() },
            miner: MinerConfig {
                train: TrainConfig { lr: 2e-3, batch: 64, epochs: 10 },
            },
            l1: L1Config {
                model: BiEncoderConfig::default(),
                train: TrainConfig { lr: 2e-3, batch: 64, epochs: 10 },
                negatives: 1,
            },
            l2: L2Config {
                model: CrossEncoderConfig::default(),
                train: TrainConfig { lr: 2e-3, batch: 32, epochs: 2 },
                loss: LossWeights::default(),
                negatives: 4,
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// The published hyperparameters; far too slow for a CPU.
    pub fn full_scale() -> Self {
        let gat = GatConfig::full_scale();
        let d = RunConfig::default();
        RunConfig {
            l1: L1Config {
                model: BiEncoderConfig { gat: gat.clone(), ..d.l1.model.clone() },
                train: TrainConfig { lr: 8e-4, batch: 64, epochs: 10 },
                ..d.l1.clone()
            },
            l2: L2Config {
                model: CrossEncoderConfig { gat, ..d.l2.model.clone() },
                train: TrainConfig { lr: 5e-4, batch: 32, epochs: 4 },
                ..d.l2.clone()
            },
            ..d
        }
    }

    /// Every output path placed under `root`; inputs keep their defaults.
    pub fn with_root(mut self, root: &Path) -> Self {
        let (e, t, tpl) = (self.paths.entities.clone(), self.paths.triples.clone(), self.paths.templates.clone());
        self.paths = Paths { entities: e, triples: t, templates: tpl, ..Paths::under(root) };
        self
    }

    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut base = toml::Value::try_from(RunConfig::default()).map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            let t: Table = text.parse().map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            overlay(&mut base, Value::Table(t));
        }
        for kv in overrides {
            set_key(&mut base, kv)?;
        }
        base.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn l1_model(&self) -> BiEncoderConfig {
        BiEncoderConfig {
            use_gat: self.variant.use_gat(),
            use_descriptions: self.variant.use_descriptions(),
            ..self.l1.model.clone()
        }
    }

    pub fn miner_model(&self) -> BiEncoderConfig {
        self.l1.model.without_kg()
    }

    pub fn l2_model(&self) -> CrossEncoderConfig {
        CrossEncoderConfig {
            use_gat: self.variant.use_gat(),
            use_descriptions: self.variant.use_descriptions(),
            ..self.l2.model.clone()
        }
    }
}

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_key(base: &mut Value, kv: &str) -> Result<(), CliError> {
    let (key, raw) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{kv}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    // Bare words that are not TOML literals are taken as strings.
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut slot = base;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Usage(format!("bad override key `{key}`")));
        }
        let Value::Table(t) = slot else {
            return Err(CliError::Usage(format!("`{key}`: `{}` is not a table", parts[..n].join("."))));
        };
        if n + 1 == parts.len() {
            t.insert(part.to_string(), value);
            return Ok(());
        }
        slot = t.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::resolve(None, &[]).unwrap(), c);
    }

    #[test]
    fn full_scale_values_recorded() {
        let p = RunConfig::full_scale();
        assert_eq!(p.l1.train, TrainConfig { lr: 8e-4, batch: 64, epochs: 10 });
        assert_eq!(p.l2.train, TrainConfig { lr: 5e-4, batch: 32, epochs: 4 });
        assert_eq!((p.l1.model.gat.layers, p.l1.model.gat.heads, p.l1.model.gat.hidden), (4, 8, 400));
        assert_eq!(p.l2.model.gat.hidden, 400);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::resolve(
            None,
            &["seed=7".into(), "l1.train.lr=0.01".into(), "variant=no_gat".into(), "eval.thetas=[1.0, 2.0]".into(), "paths.store=/tmp/x".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.l1.train.lr, 0.01);
        assert_eq!(c.variant, Variant::NoGat);
        assert_eq!(c.eval.thetas, vec![1.0, 2.0]);
        assert_eq!(c.paths.store, PathBuf::from("/tmp/x"));
        assert!(c.l1_model().use_descriptions && !c.l1_model().use_gat);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::resolve(None, &["l1.train.momentum=0.9".into()]).is_err());
        assert!(RunConfig::resolve(None, &["bogus=1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["eval.k.x=1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["noequals".into()]).is_err());
    }

    #[test]
    fn file_overlays_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[l2.train]\nepochs = 1\n").unwrap();
        let c = RunConfig::resolve(Some(&p), &["seed=4".into()]).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.l2.train.epochs, 1);
        assert_eq!(c.l2.train.lr, RunConfig::default().l2.train.lr);
        std::fs::write(&p, "[l2.train]\nwarmup = 1\n").unwrap();
        assert!(RunConfig::resolve(Some(&p), &[]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
