use std::fmt::Write as _;
use std::path::Path;

use kgcorrect::catalog::Catalog;
use kgcorrect::evalharness::{outcomes_at, subset_report, sweep_theta, MetricsReport, SetKind, Sweep, Table};
use kgcorrect::io::{read_to_string, sha256_file};
use kgcorrect::kgpretrain::{pretrain, EmbeddingTable};
use kgcorrect::kgstore::{ingest_files, KnowledgeGraph};
use kgcorrect::nn::Checkpoint;
use kgcorrect::pipeline::{Analysis, System};
use kgcorrect::rerankspan::{train_l2, L2Model};
use kgcorrect::retrieval::{build_index, train_l1, EntityIndex, L1Model};
use kgcorrect::synthdata::{
    attach_negatives, default_templates, generate, l1_samples, l2_samples, mine_hard_negatives, parse_templates, read_samples,
    synth_kg, write_samples, RephraseSample,
};
use kgcorrect::textenc::Vocab;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{require, write_json, Layout, Manifest, Recorder, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    SynthKg,
    Ingest,
    PretrainKg,
    GenData,
    TrainMiner,
    MineNegatives,
    TrainL1,
    BuildIndex,
    TrainL2,
    SweepTheta,
    Evaluate,
}

impl Stage {
    /// Data preparation shared by every variant.
    pub const SHARED: [Stage; 6] = [
        Stage::SynthKg,
        Stage::Ingest,
        Stage::PretrainKg,
        Stage::GenData,
        Stage::TrainMiner,
        Stage::MineNegatives,
    ];
    pub const PER_VARIANT: [Stage; 5] = [Stage::TrainL1, Stage::BuildIndex, Stage::TrainL2, Stage::SweepTheta, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthKg => "synth-kg",
            Stage::Ingest => "ingest",
            Stage::PretrainKg => "pretrain-kg",
            Stage::GenData => "gen-data",
            Stage::TrainMiner => "train-miner",
            Stage::MineNegatives => "mine-negatives",
            Stage::TrainL1 => "train-l1",
            Stage::BuildIndex => "build-index",
            Stage::TrainL2 => "train-l2",
            Stage::SweepTheta => "sweep-theta",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn per_variant(self) -> bool {
        Stage::PER_VARIANT.contains(&self)
    }
}

pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<Manifest> {
    log::info!("{} with config {}:\n{}", stage.name(), cfg.hash(), cfg.to_toml());
    let layout = Layout::new(cfg);
    let mut rec = Recorder::new(&layout, stage.name(), stage.per_variant());
    match stage {
        Stage::SynthKg => synth(cfg, &mut rec)?,
        Stage::Ingest => ingest(cfg, &layout, &mut rec)?,
        Stage::PretrainKg => pretrain_kg(cfg, &layout, &mut rec)?,
        Stage::GenData => gen_data(cfg, &layout, &mut rec)?,
        Stage::TrainMiner => train_miner(cfg, &layout, &mut rec)?,
        Stage::MineNegatives => mine(cfg, &layout, &mut rec)?,
        Stage::TrainL1 => train_first(cfg, &layout, &mut rec)?,
        Stage::BuildIndex => index(cfg, &layout, &mut rec)?,
        Stage::TrainL2 => train_second(cfg, &layout, &mut rec)?,
        Stage::SweepTheta => {
            sweep(cfg, &layout, &mut rec)?;
        }
        Stage::Evaluate => {
            evaluate(cfg, &layout, &mut rec)?;
        }
    }
    rec.finish(cfg)
}

/// Shared stages once, then the per-variant stages for each of `variants`.
pub fn run_all(cfg: &RunConfig, variants: &[crate::Variant]) -> Result<Vec<Manifest>> {
    let mut out = Vec::new();
    for s in Stage::SHARED {
        out.push(run_stage(cfg, s)?);
    }
    for &v in variants {
        let c = RunConfig { variant: v, ..cfg.clone() };
        for s in Stage::PER_VARIANT {
            out.push(run_stage(&c, s)?);
        }
    }
    Ok(out)
}

fn synth(cfg: &RunConfig, rec: &mut Recorder) -> Result<()> {
    let kg = synth_kg(&cfg.synth, cfg.seed)?;
    let (e, t) = (&cfg.paths.entities, &cfg.paths.triples);
    kgcorrect::io::write_atomic(e, kg.entities.as_bytes())?;
    kgcorrect::io::write_atomic(t, kg.triples.as_bytes())?;
    rec.output(e)?;
    rec.output(t)
}

fn ingest(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder) -> Result<()> {
    let (e, t) = (&cfg.paths.entities, &cfg.paths.triples);
    require(e, "synth-kg")?;
    require(t, "synth-kg")?;
    let (kg, report) = ingest_files(e, t)?;
    crate::mkdirs(&layout.kg_entities())?;
    kg.write_tsv(&layout.kg_entities(), &layout.kg_triples())?;
    #[derive(Serialize)]
    struct Summary {
        entities: usize,
        relations: usize,
        triples: usize,
        index_surfaces: usize,
        entity_lines: usize,
        triple_lines: usize,
        malformed_entity_lines: Vec<usize>,
        malformed_triple_lines: Vec<usize>,
        duplicate_descriptions: usize,
        dropped_triples: usize,
    }
    let summary = Summary {
        entities: kg.num_entities(),
        relations: kg.num_relations(),
        triples: kg.triples().len(),
        index_surfaces: kg.filter_index_entities().len(),
        entity_lines: report.entity_lines,
        triple_lines: report.triple_lines,
        malformed_entity_lines: report.malformed_entity_lines,
        malformed_triple_lines: report.malformed_triple_lines,
        duplicate_descriptions: report.duplicate_descriptions,
        dropped_triples: report.dropped_triples,
    };
    write_json(&layout.ingest_report(), &summary)?;
    println!(
        "ingested {} entities, {} triples ({} index surfaces)",
        summary.entities, summary.triples, summary.index_surfaces
    );
    rec.input(e)?;
    rec.input(t)?;
    rec.output(&layout.kg_entities())?;
    rec.output(&layout.kg_triples())?;
    rec.output(&layout.ingest_report())
}

pub fn load_kg(layout: &Layout) -> Result<KnowledgeGraph> {
    require(&layout.kg_entities(), "ingest")?;
    require(&layout.kg_triples(), "ingest")?;
    Ok(ingest_files(&layout.kg_entities(), &layout.kg_triples())?.0)
}

fn pretrain_kg(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder) -> Result<()> {
    let kg = load_kg(layout)?;
    let (tbl, log) = pretrain(&kg, &cfg.pretrain, cfg.seed)?;
    if let Some(l) = log.epoch_loss.last() {
        println!("pretrained {} epochs, final loss {l:.4}", log.epoch_loss.len());
    }
    tbl.save(&layout.embeddings(), &cfg.hash())?;
    rec.input(&layout.kg_entities())?;
    rec.input(&layout.kg_triples())?;
    rec.output(&layout.embeddings())
}

fn gen_data(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder) -> Result<()> {
    let kg = load_kg(layout)?;
    let templates = match &cfg.paths.templates {
        Some(p) => {
            rec.input(p)?;
            parse_templates(&read_to_string(p)?)?
        }
        None => default_templates(),
    };
    let entries = kg.filter_index_entities();
    let data = generate(&kg, &entries, &templates, &cfg.data.gen, cfg.seed)?;
    data.save(&layout.data)?;
    let catalog = Catalog::build(&kg, None, &entries, cfg.data.max_neighbors)?;
    let vocab = Vocab::build(
        data.l2_train
            .iter()
            .flat_map(|s| [s.source.as_str(), s.target.as_str()])
            .chain(catalog.entries().iter().map(|e| e.text.as_str())),
        cfg.data.vocab_min_count,
    );
    vocab.save(&layout.vocab())?;
    println!(
        "generated {} L1, {} L2, {} friction test, {} clean test samples; vocabulary {}",
        data.l1_train.len(),
        data.l2_train.len(),
        data.friction_test.len(),
        data.clean_test.len(),
        vocab.len()
    );
    rec.input(&layout.kg_entities())?;
    rec.input(&layout.kg_triples())?;
    for name in DATA_FILES {
        rec.output(&layout.dataset_file(name))?;
    }
    rec.output(&layout.vocab())
}

const DATA_FILES: [&str; 4] = ["l1_train", "l2_train", "friction_test", "clean_test"];

fn load_vocab(layout: &Layout) -> Result<Vocab> {
    require(&layout.vocab(), "gen-data")?;
    Ok(Vocab::load(&layout.vocab())?)
}

fn load_set(layout: &Layout, name: &str) -> Result<Vec<RephraseSample>> {
    let p = layout.dataset_file(name);
    require(&p, "gen-data")?;
    Ok(read_samples(&p)?)
}

fn load_mined(layout: &Layout, name: &str) -> Result<Vec<RephraseSample>> {
    let p = layout.mined(name);
    require(&p, "mine-negatives")?;
    Ok(read_samples(&p)?)
}

/// The embedding table when `needed`, else `None`.
fn load_table(layout: &Layout, needed: bool) -> Result<Option<EmbeddingTable>> {
    if !needed {
        return Ok(None);
    }
    require(&layout.embeddings(), "pretrain-kg")?;
    Ok(Some(EmbeddingTable::load(&layout.embeddings())?))
}

pub fn catalog(cfg: &RunConfig, kg: &KnowledgeGraph, tbl: Option<&EmbeddingTable>) -> Result<Catalog> {
    Ok(Catalog::build(kg, tbl, &kg.filter_index_entities(), cfg.data.max_neighbors)?)
}

fn train_miner(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder) -> Result<()> {
    let kg = load_kg(layout)?;
    let vocab = load_vocab(layout)?;
    let train = load_set(layout, "l1_train")?;
    let cat = catalog(cfg, &kg, None)?;
    let mut m = L1Model::new(&cfg.miner_model(), vocab, None, cfg.seed)?;
    let log = train_l1(&mut m, &cat, &l1_samples(&train, 0), &cfg.miner.train, cfg.seed)?;
    report_losses("miner", &log.epoch_loss);
    m.checkpoint(&cfg.hash()).save(&layout.miner())?;
    rec.input(&layout.vocab())?;
    rec.input(&layout.dataset_file("l1_train"))?;
    rec.output(&layout.miner())
}

fn report_losses(what: &str, losses: &[f64]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("{what}: {} epochs, loss {first:.4} -> {last:.4}", losses.len());
    }
}

fn mine(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder) -> Result<()> {
    let kg = load_kg(layout)?;
    let vocab = load_vocab(layout)?;
    require(&layout.miner(), "train-l1 --miner")?;
    let m = L1Model::load(&cfg.miner_model(), vocab, None, &Checkpoint::load(&layout.miner())?)?;
    let cat = catalog(cfg, &kg, None)?;
    let idx = build_index(&m, &cat, &sha256_file(&layout.miner())?)?;
    for (name, count) in [("l1_train", cfg.l1.negatives), ("l2_train", cfg.l2.negatives)] {
        let mut set = load_set(layout, name)?;
        let mined = mine_hard_negatives(&m, &idx, &set, count, cfg.seed)?;
        let padded = mined.iter().filter(|x| x.padded).count();
        attach_negatives(&mut set, mined)?;
        write_samples(&layout.mined(name), &set)?;
        println!("{name}: {count} negatives per sample, {padded} padded");
        rec.input(&layout.dataset_file(name))?;
        rec.output(&layout.mined(name))?;
    }
    rec.input(&layout.miner())
}

fn rel_table(tbl: &Option<EmbeddingTable>) -> Option<&kgcorrect::nn::Tensor> {
    tbl.as_ref().map(|t| &t.rels)
}

fn train_first(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder) -> Result<()> {
    let kg = load_kg(layout)?;
    let vocab = load_vocab(layout)?;
    let train = load_mined(layout, "l1_train")?;
    let tbl = load_table(layout, cfg.variant.use_gat())?;
    let cat = catalog(cfg, &kg, tbl.as_ref())?;
    let mut m = L1Model::new(&cfg.l1_model(), vocab, rel_table(&tbl), cfg.seed)?;
    let log = train_l1(&mut m, &cat, &l1_samples(&train, cfg.l1.negatives), &cfg.l1.train, cfg.seed)?;
    report_losses("L1", &log.epoch_loss);
    m.checkpoint(&cfg.hash()).save(&layout.l1())?;
    rec.input(&layout.vocab())?;
    rec.input(&layout.mined("l1_train"))?;
    if tbl.is_some() {
        rec.input(&layout.embeddings())?;
    }
    rec.output(&layout.l1())
}

fn index(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder) -> Result<()> {
    let kg = load_kg(layout)?;
    let vocab = load_vocab(layout)?;
    require(&layout.l1(), "train-l1")?;
    let tbl = load_table(layout, cfg.variant.use_gat())?;
    let cat = catalog(cfg, &kg, tbl.as_ref())?;
    let m = L1Model::load(&cfg.l1_model(), vocab, rel_table(&tbl), &Checkpoint::load(&layout.l1())?)?;
    let idx = build_index(&m, &cat, &sha256_file(&layout.l1())?)?;
    idx.save(&layout.entity_index())?;
    println!("indexed {} surfaces", idx.len());
    rec.input(&layout.l1())?;
    if tbl.is_some() {
        rec.input(&layout.embeddings())?;
    }
    rec.output_bytes(&layout.entity_index(), &index_bytes(idx));
    Ok(())
}

/// Index bytes with the build timestamp zeroed, for manifest hashes.
fn index_bytes(idx: EntityIndex) -> Vec<u8> {
    EntityIndex { built_at: 0, ..idx }.to_bytes()
}

fn train_second(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder) -> Result<()> {
    let kg = load_kg(layout)?;
    let vocab = load_vocab(layout)?;
    let train = load_mined(layout, "l2_train")?;
    let tbl = load_table(layout, cfg.variant.use_gat())?;
    let cat = catalog(cfg, &kg, tbl.as_ref())?;
    let mut m = L2Model::new(&cfg.l2_model(), vocab, rel_table(&tbl), cfg.seed)?;
    let log = train_l2(&mut m, &cat, &l2_samples(&train, cfg.l2.negatives), &cfg.l2.train, &cfg.l2.loss, cfg.seed)?;
    report_losses("L2", &log.epoch_loss);
    m.checkpoint(&cfg.hash()).save(&layout.l2())?;
    rec.input(&layout.vocab())?;
    rec.input(&layout.mined("l2_train"))?;
    if tbl.is_some() {
        rec.input(&layout.embeddings())?;
    }
    rec.output(&layout.l2())
}

/// Loads both trained layers and the index, refusing an index built from a
/// different L1 checkpoint.
pub fn load_system(cfg: &RunConfig) -> Result<System> {
    let layout = Layout::new(cfg);
    require(&layout.entity_index(), "build-index")?;
    require(&layout.l1(), "train-l1")?;
    require(&layout.l2(), "train-l2")?;
    let index = EntityIndex::load(&layout.entity_index())?;
    let l1_hash = sha256_file(&layout.l1())?;
    if index.checkpoint_hash != l1_hash {
        return Err(kgcorrect::Error::Checkpoint(format!(
            "index {} was built from another L1 checkpoint; rerun build-index",
            layout.entity_index().display()
        ))
        .into());
    }
    let kg = load_kg(&layout)?;
    let vocab = load_vocab(&layout)?;
    let tbl = load_table(&layout, cfg.variant.use_gat())?;
    let cat = catalog(cfg, &kg, tbl.as_ref())?;
    let l1 = L1Model::load(&cfg.l1_model(), vocab.clone(), rel_table(&tbl), &Checkpoint::load(&layout.l1())?)?;
    let l2 = L2Model::load(&cfg.l2_model(), vocab, rel_table(&tbl), &Checkpoint::load(&layout.l2())?)?;
    Ok(System { l1, l2, catalog: cat, index })
}

/// Freshly initialised layers with the same shapes and seed as training uses.
pub fn untrained_system(cfg: &RunConfig) -> Result<System> {
    let layout = Layout::new(cfg);
    let kg = load_kg(&layout)?;
    let vocab = load_vocab(&layout)?;
    let tbl = load_table(&layout, cfg.variant.use_gat())?;
    let cat = catalog(cfg, &kg, tbl.as_ref())?;
    let l1 = L1Model::new(&cfg.l1_model(), vocab.clone(), rel_table(&tbl), cfg.seed)?;
    let l2 = L2Model::new(&cfg.l2_model(), vocab, rel_table(&tbl), cfg.seed)?;
    let index = build_index(&l1, &cat, "untrained")?;
    Ok(System { l1, l2, catalog: cat, index })
}

/// Test sets with their cached analyses.
pub struct Analyzed {
    pub friction: Vec<RephraseSample>,
    pub clean: Vec<RephraseSample>,
    pub friction_analyses: Vec<Analysis>,
    pub clean_analyses: Vec<Analysis>,
}

pub fn analyze_tests(sys: &System, layout: &Layout, k: usize) -> Result<Analyzed> {
    let friction = load_set(layout, "friction_test")?;
    let clean = load_set(layout, "clean_test")?;
    let run = |set: &[RephraseSample]| set.iter().map(|s| sys.analyze(&s.source, k)).collect::<kgcorrect::Result<Vec<_>>>();
    Ok(Analyzed {
        friction_analyses: run(&friction)?,
        clean_analyses: run(&clean)?,
        friction,
        clean,
    })
}

impl Analyzed {
    pub fn sweep(&self, cfg: &RunConfig) -> Result<Sweep> {
        Ok(sweep_theta(&cfg.eval.thetas, cfg.eval.clean_tr_cap, |theta| {
            let mut rule = cfg.eval.rule(theta);
            rule.mode = kgcorrect::pipeline::TriggerMode::Threshold;
            rule.theta = theta;
            let f = outcomes_at(&self.friction_analyses, &self.friction, &rule)?;
            let c = outcomes_at(&self.clean_analyses, &self.clean, &rule)?;
            Ok((
                MetricsReport::from_outcomes(&format!("theta={theta}"), SetKind::Friction, &f),
                MetricsReport::from_outcomes(&format!("theta={theta}"), SetKind::Clean, &c),
            ))
        })?)
    }

    /// Threshold reports at `theta` (friction subsets and clean) followed by
    /// always-trigger friction subsets.
    pub fn reports(&self, cfg: &RunConfig, theta: f64) -> Result<Vec<MetricsReport>> {
        let v = cfg.variant.name();
        let mut rule = kgcorrect::pipeline::TriggerRule::threshold(theta);
        rule.min_rank_score = cfg.eval.min_rank_score;
        let mut out = subset_report(&outcomes_at(&self.friction_analyses, &self.friction, &rule)?, &self.friction, &format!("{v}/theta={theta}"))?;
        out.push(MetricsReport::from_outcomes(
            &format!("{v}/theta={theta}/clean"),
            SetKind::Clean,
            &outcomes_at(&self.clean_analyses, &self.clean, &rule)?,
        ));
        let mut always = kgcorrect::pipeline::TriggerRule::always();
        always.min_rank_score = cfg.eval.min_rank_score;
        out.extend(subset_report(&outcomes_at(&self.friction_analyses, &self.friction, &always)?, &self.friction, &format!("{v}/always"))?);
        Ok(out)
    }
}

fn record_eval_inputs(layout: &Layout, rec: &mut Recorder) -> Result<()> {
    for p in [layout.l1(), layout.l2(), layout.dataset_file("friction_test"), layout.dataset_file("clean_test")] {
        rec.input(&p)?;
    }
    rec.input_bytes(&layout.entity_index(), &index_bytes(EntityIndex::load(&layout.entity_index())?));
    Ok(())
}

fn sweep(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder) -> Result<Sweep> {
    let sys = load_system(cfg)?;
    let a = analyze_tests(&sys, layout, cfg.eval.k)?;
    let s = a.sweep(cfg)?;
    print!("{}", sweep_text(&s));
    write_json(&layout.sweep(), &s)?;
    record_eval_inputs(layout, rec)?;
    rec.output(&layout.sweep())?;
    Ok(s)
}

pub fn sweep_text(s: &Sweep) -> String {
    let mut out = String::new();
    let rows: Vec<MetricsReport> = s.points.iter().flat_map(|p| [p.friction.clone(), p.clean.clone()]).collect();
    write!(out, "{}", Table(&rows)).unwrap();
    writeln!(out, "chosen theta {}{}", s.chosen, if s.infeasible { " (no theta met the clean cap)" } else { "" }).unwrap();
    for p in &s.points {
        writeln!(out, "{}", p.friction.to_kv()).unwrap();
        writeln!(out, "{}", p.clean.to_kv()).unwrap();
    }
    out
}

/// θ chosen by `sweep-theta` when its output exists, else the configured one.
pub fn chosen_theta(cfg: &RunConfig) -> Result<f64> {
    let p = Layout::new(cfg).sweep();
    if p.exists() {
        Ok(crate::read_json::<Sweep>(&p)?.chosen)
    } else {
        Ok(cfg.eval.theta)
    }
}

fn evaluate(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder) -> Result<Vec<MetricsReport>> {
    let theta = chosen_theta(cfg)?;
    let sys = load_system(cfg)?;
    let a = analyze_tests(&sys, layout, cfg.eval.k)?;
    let reports = a.reports(cfg, theta)?;
    let table = Table(&reports).to_string();
    let kv: String = reports.iter().map(|r| r.to_kv() + "\n").collect();
    print!("{table}");
    kgcorrect::io::write_atomic(&layout.report("txt"), table.as_bytes())?;
    kgcorrect::io::write_atomic(&layout.report("kv"), kv.as_bytes())?;
    write_json(&layout.report("json"), &reports)?;
    record_eval_inputs(layout, rec)?;
    if layout.sweep().exists() {
        rec.input(&layout.sweep())?;
    }
    for ext in ["txt", "kv", "json"] {
        rec.output(&layout.report(ext))?;
    }
    Ok(reports)
}

pub fn load_reports(p: &Path) -> Result<Vec<MetricsReport>> {
    crate::read_json(p)
}
