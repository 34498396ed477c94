use std::fmt::Write as _;
use std::io::{BufRead, Write as _};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kgcorrect::evalharness::compare;
use kgcorrect::pipeline::{NluHypothesis, RewriteResult, TriggerRule};
use kgcorrect_cli::stages::{chosen_theta, load_reports, load_system, run_all};
use kgcorrect_cli::{run_stage, CliError, Result, RunConfig, Stage, Variant};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "kgcorrect", version, about = "Entity correction for query rewriting")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// full, no_gat or no_kg.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Place every output under this directory.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic KG to the configured input paths.
    SynthKg,
    Ingest {
        #[arg(long)]
        entities: Option<PathBuf>,
        #[arg(long)]
        triples: Option<PathBuf>,
        /// Store directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    PretrainKg,
    GenData,
    TrainL1 {
        /// Train the KG-free miner used by mine-negatives.
        #[arg(long)]
        miner: bool,
    },
    MineNegatives,
    BuildIndex,
    TrainL2,
    SweepTheta,
    Evaluate,
    /// Every stage in order; all variants unless `--variants` is given.
    RunAll {
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Per-label differences `b − a` between two report.json files.
    Compare { a: PathBuf, b: PathBuf },
    /// Top-K retrieval for one utterance.
    Query {
        #[arg(long)]
        k: Option<usize>,
        utterance: String,
    },
    /// Re-rank score and best span for one utterance and index surface.
    ScorePair { utterance: String, entity: String },
    Rewrite {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        theta: Option<f64>,
        /// Rewrite with the best non-null span regardless of θ.
        #[arg(long)]
        always: bool,
        /// NLU hypothesis as `Domain | Intent | Slot: value | ...`.
        #[arg(long)]
        hypothesis: Option<String>,
        /// JSON lines with `utterance` and optional `hypothesis`; writes JSON lines.
        #[arg(long, conflicts_with = "utterance")]
        batch: Option<PathBuf>,
        #[arg(required_unless_present = "batch")]
        utterance: Option<String>,
    },
}

fn parse_variant(s: &str) -> Result<Variant> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| CliError::Usage(format!("unknown variant `{s}` (full, no_gat, no_kg)")))
}

fn resolve(g: &Global, extra: &[String]) -> Result<RunConfig> {
    let mut sets = g.overrides.clone();
    if let Some(s) = g.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(v) = &g.variant {
        sets.push(format!("variant=\"{}\"", parse_variant(v)?.name()));
    }
    sets.extend_from_slice(extra);
    let cfg = RunConfig::resolve(g.config.as_deref(), &sets)?;
    Ok(match &g.work_dir {
        Some(d) => cfg.with_root(d),
        None => cfg,
    })
}

fn quoted(k: &str, p: &std::path::Path) -> String {
    format!("{k}={}", toml::Value::String(p.display().to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let stage = |s: Stage, extra: &[String]| -> Result<()> {
        run_stage(&resolve(g, extra)?, s)?;
        Ok(())
    };
    match cli.cmd {
        Cmd::SynthKg => stage(Stage::SynthKg, &[]),
        Cmd::Ingest { entities, triples, out } => {
            let mut extra = Vec::new();
            extra.extend(entities.map(|p| quoted("paths.entities", &p)));
            extra.extend(triples.map(|p| quoted("paths.triples", &p)));
            extra.extend(out.map(|p| quoted("paths.store", &p)));
            stage(Stage::Ingest, &extra)
        }
        Cmd::PretrainKg => stage(Stage::PretrainKg, &[]),
        Cmd::GenData => stage(Stage::GenData, &[]),
        Cmd::TrainL1 { miner: true } => stage(Stage::TrainMiner, &[]),
        Cmd::TrainL1 { miner: false } => stage(Stage::TrainL1, &[]),
        Cmd::MineNegatives => stage(Stage::MineNegatives, &[]),
        Cmd::BuildIndex => stage(Stage::BuildIndex, &[]),
        Cmd::TrainL2 => stage(Stage::TrainL2, &[]),
        Cmd::SweepTheta => stage(Stage::SweepTheta, &[]),
        Cmd::Evaluate => stage(Stage::Evaluate, &[]),
        Cmd::RunAll { variants } => {
            let vs = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| parse_variant(v)).collect::<Result<_>>()?
            };
            run_all(&resolve(g, &[])?, &vs)?;
            Ok(())
        }
        Cmd::Compare { a, b } => {
            for d in compare(&load_reports(&a)?, &load_reports(&b)?) {
                let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:+.4}"));
                println!(
                    "label={}\tde_p={}\tdnlu_p={}\tdtr={:+.4}\tdctr={}",
                    d.label,
                    f(d.entity_precision),
                    f(d.nlu_precision),
                    d.trigger_rate,
                    f(d.correct_trigger_rate)
                );
            }
            Ok(())
        }
        Cmd::Query { k, utterance } => {
            let cfg = resolve(g, &[])?;
            let sys = load_system(&cfg)?;
            let hits = sys.index.top_k(&sys.l1.encode_utterance(&utterance), k.unwrap_or(cfg.eval.k))?;
            for (n, h) in hits.iter().enumerate() {
                println!("{}\t{:.4}\t{}", n + 1, h.score, h.surface);
            }
            Ok(())
        }
        Cmd::ScorePair { utterance, entity } => {
            let cfg = resolve(g, &[])?;
            let sys = load_system(&cfg)?;
            let e = sys
                .catalog
                .get(&entity)
                .ok_or_else(|| kgcorrect::Error::Invalid(format!("`{entity}` is not an index surface")))?;
            let (scores, spans) = sys.l2.score_pairs(&utterance, &[e])?;
            let words: Vec<&str> = utterance.split_whitespace().collect();
            println!("rank_score\t{:.4}", scores[0]);
            println!("span_margin\t{:.4}", spans[0].margin());
            if let Some((i, j, _)) = spans[0].best {
                println!("best_span\t{}-{}\t{}", i - 1, j - 1, words[i - 1..j].join(" "));
            }
            Ok(())
        }
        Cmd::Rewrite { k, theta, always, hypothesis, batch, utterance } => {
            let cfg = resolve(g, &[])?;
            let sys = load_system(&cfg)?;
            let k = k.unwrap_or(cfg.eval.k);
            let mut rule = if always || cfg.eval.always_trigger {
                TriggerRule::always()
            } else {
                TriggerRule::threshold(match theta {
                    Some(t) => t,
                    None => chosen_theta(&cfg)?,
                })
            };
            rule.min_rank_score = cfg.eval.min_rank_score;
            match (batch, utterance) {
                (Some(path), _) => rewrite_batch(&sys, &path, k, &rule),
                (None, Some(u)) => {
                    let hyp = hypothesis.map(|h| parse_hyp(&h)).transpose()?;
                    let r = sys.rewrite(&u, hyp.as_ref(), k, &rule)?;
                    print!("{}", render(&u, &r));
                    Ok(())
                }
                (None, None) => Err(CliError::Usage("give an utterance or --batch".into())),
            }
        }
    }
}

fn parse_hyp(s: &str) -> Result<NluHypothesis> {
    s.parse::<NluHypothesis>().map_err(|e| CliError::Usage(format!("hypothesis `{s}`: {e}")))
}

fn render(input: &str, r: &RewriteResult) -> String {
    let mut out = String::new();
    let opt = |o: &Option<String>| o.clone().unwrap_or_else(|| "-".into());
    writeln!(out, "triggered\t{}", r.triggered).unwrap();
    match r.span.word_range() {
        Some((i, j)) => writeln!(out, "span\t{i}-{j}\t{}", opt(&r.span_text)).unwrap(),
        None => writeln!(out, "span\tnull").unwrap(),
    }
    writeln!(out, "entity\t{}", opt(&r.entity)).unwrap();
    writeln!(out, "output\t{}", r.output(input)).unwrap();
    if let Some(h) = &r.rewritten_hypothesis {
        writeln!(out, "hypothesis\t{h}").unwrap();
    }
    if let Some(d) = &r.diagnostic {
        writeln!(out, "diagnostic\t{d}").unwrap();
    }
    for (n, h) in r.trace.retrieved.iter().enumerate() {
        let rr = r.trace.reranked.iter().find(|x| x.surface == h.surface).map_or(f64::NAN, |x| x.score);
        writeln!(out, "candidate\t{}\t{}\tretrieval={:.4}\trerank={:.4}", n + 1, h.surface, h.score, rr).unwrap();
    }
    out
}

#[derive(Deserialize)]
struct BatchIn {
    utterance: String,
    #[serde(default)]
    hypothesis: Option<String>,
}

#[derive(Serialize)]
struct BatchOut<'a> {
    input: &'a str,
    output: &'a str,
    #[serde(flatten)]
    result: &'a RewriteResult,
}

fn rewrite_batch(sys: &kgcorrect::pipeline::System, path: &std::path::Path, k: usize, rule: &TriggerRule) -> Result<()> {
    let f = std::fs::File::open(path).map_err(|e| kgcorrect::Error::io(path, e))?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| kgcorrect::Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BatchIn = serde_json::from_str(&line)
            .map_err(|e| kgcorrect::Error::format("batch line", format!("{}:{}: {e}", path.display(), n + 1)))?;
        let hyp = rec.hypothesis.as_deref().map(parse_hyp).transpose()?;
        let r = sys.rewrite(&rec.utterance, hyp.as_ref(), k, rule)?;
        let out = BatchOut { input: &rec.utterance, output: r.output(&rec.utterance), result: &r };
        writeln!(w, "{}", serde_json::to_string(&out).expect("serializable")).map_err(|e| kgcorrect::Error::io("stdout", e))?;
    }
    Ok(())
}
