//! Entity precision, NLU precision, trigger rate and correct trigger rate,
//! the θ sweep and per-subset reports.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{decide, Analysis, RewriteResult, TriggerRule};
use crate::synthdata::RephraseSample;

pub const DEFAULT_THETAS: [f64; 5] = [3.0, 4.0, 5.0, 6.0, 7.0];
pub const DEFAULT_CLEAN_TR_CAP: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Friction,
    Clean,
}

/// Per-sample result against gold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    pub triggered: bool,
    pub entity_correct: bool,
    pub hypothesis_correct: bool,
}

impl Outcome {
    /// Correctness requires a trigger; hypotheses compare in canonical
    /// serialized form.
    pub fn of(result: &RewriteResult, gold: &RephraseSample) -> Self {
        if !result.triggered {
            return Outcome::default();
        }
        let entity_correct = gold.target_entity.is_some() && result.entity == gold.target_entity;
        let hypothesis_correct = gold.target_entity.is_some()
            && result
                .rewritten_hypothesis
                .as_ref()
                .is_some_and(|h| h.to_string() == gold.gold_hypothesis.to_string());
        Outcome {
            triggered: true,
            entity_correct,
            hypothesis_correct,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub triggered: usize,
    pub entity_correct: usize,
    pub hypothesis_correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub set: SetKind,
    pub counts: Counts,
    /// Set when the report covers no samples.
    pub empty: bool,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

impl MetricsReport {
    pub fn from_outcomes(label: &str, set: SetKind, outcomes: &[Outcome]) -> Self {
        let mut c = Counts {
            total: outcomes.len(),
            ..Counts::default()
        };
        for o in outcomes {
            c.triggered += usize::from(o.triggered);
            c.entity_correct += usize::from(o.triggered && o.entity_correct);
            c.hypothesis_correct += usize::from(o.triggered && o.hypothesis_correct);
        }
        MetricsReport {
            label: label.to_string(),
            set,
            counts: c,
            empty: outcomes.is_empty(),
        }
    }

    pub fn trigger_rate(&self) -> f64 {
        ratio(self.counts.triggered, self.counts.total).unwrap_or(0.0)
    }

    /// `None` on clean sets and when nothing triggered.
    pub fn entity_precision(&self) -> Option<f64> {
        self.friction().and_then(|c| ratio(c.entity_correct, c.triggered))
    }

    pub fn nlu_precision(&self) -> Option<f64> {
        self.friction().and_then(|c| ratio(c.hypothesis_correct, c.triggered))
    }

    /// `None` on clean sets.
    pub fn correct_trigger_rate(&self) -> Option<f64> {
        self.friction().map(|c| ratio(c.hypothesis_correct, c.total).unwrap_or(0.0))
    }

    fn friction(&self) -> Option<&Counts> {
        (self.set == SetKind::Friction).then_some(&self.counts)
    }

    /// `label=... key=value ...`, with `undefined` for missing precisions.
    pub fn to_kv(&self) -> String {
        let c = &self.counts;
        let mut s = format!(
            "label={} set={} total={} triggered={} tr={:.6}",
            self.label,
            match self.set {
                SetKind::Friction => "friction",
                SetKind::Clean => "clean",
            },
            c.total,
            c.triggered,
            self.trigger_rate()
        );
        if self.set == SetKind::Friction {
            let f = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.6}"));
            write!(
                s,
                " entity_correct={} hypothesis_correct={} ep={} nlup={} ctr={}",
                c.entity_correct,
                c.hypothesis_correct,
                f(self.entity_precision()),
                f(self.nlu_precision()),
                f(self.correct_trigger_rate())
            )
            .unwrap();
        }
        if self.empty {
            s.push_str(" empty=1");
        }
        s
    }
}

/// Aligned text table of several reports.
pub struct Table<'a>(pub &'a [MetricsReport]);

impl fmt::Display for Table<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        writeln!(f, "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7}", "set", "n", "E-P", "NLU-P", "TR", "CTR")?;
        for r in self.0 {
            writeln!(
                f,
                "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7}",
                r.label,
                r.counts.total,
                pct(r.entity_precision()),
                pct(r.nlu_precision()),
                pct(Some(r.trigger_rate())),
                pct(r.correct_trigger_rate())
            )?;
        }
        Ok(())
    }
}

/// Checks alignment and scores results against gold samples.
pub fn evaluate(results: &[RewriteResult], gold: &[RephraseSample], label: &str, set: SetKind) -> Result<MetricsReport> {
    Ok(MetricsReport::from_outcomes(label, set, &outcomes(results, gold)?))
}

pub fn outcomes(results: &[RewriteResult], gold: &[RephraseSample]) -> Result<Vec<Outcome>> {
    if results.len() != gold.len() {
        return Err(Error::Invalid(format!("{} results for {} gold samples", results.len(), gold.len())));
    }
    Ok(results.iter().zip(gold).map(|(r, g)| Outcome::of(r, g)).collect())
}

/// Applies θ to cached analyses and scores the decisions.
pub fn outcomes_at(analyses: &[Analysis], gold: &[RephraseSample], rule: &TriggerRule) -> Result<Vec<Outcome>> {
    if analyses.len() != gold.len() {
        return Err(Error::Invalid(format!("{} analyses for {} gold samples", analyses.len(), gold.len())));
    }
    Ok(analyses
        .iter()
        .zip(gold)
        .map(|(a, g)| Outcome::of(&decide(a, &g.source, Some(&g.hypothesis), rule), g))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaPoint {
    pub theta: f64,
    pub friction: MetricsReport,
    pub clean: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub chosen: f64,
    /// No θ met the clean-set cap; `chosen` has the lowest clean TR instead.
    pub infeasible: bool,
    pub points: Vec<ThetaPoint>,
}

/// Keeps θ whose clean TR is at most `clean_tr_cap`, then maximises friction
/// CTR; ties go to the larger θ.
pub fn sweep_theta(
    thetas: &[f64],
    clean_tr_cap: f64,
    mut eval: impl FnMut(f64) -> Result<(MetricsReport, MetricsReport)>,
) -> Result<Sweep> {
    if thetas.is_empty() {
        return Err(Error::Config("empty theta list".into()));
    }
    if !(0.0..=1.0).contains(&clean_tr_cap) {
        return Err(Error::Config(format!("clean_tr_cap {clean_tr_cap} outside [0, 1]")));
    }
    let points = thetas
        .iter()
        .map(|&theta| {
            let (friction, clean) = eval(theta)?;
            Ok(ThetaPoint { theta, friction, clean })
        })
        .collect::<Result<Vec<_>>>()?;
    // Cross-multiplied count ratios keep the comparison exact.
    let ctr_cmp = |a: &Counts, b: &Counts| (a.hypothesis_correct * b.total.max(1)).cmp(&(b.hypothesis_correct * a.total.max(1)));
    let tr_cmp = |a: &Counts, b: &Counts| (a.triggered * b.total.max(1)).cmp(&(b.triggered * a.total.max(1)));
    let within = |p: &&ThetaPoint| p.clean.counts.triggered as f64 <= clean_tr_cap * p.clean.counts.total as f64;
    let best = points
        .iter()
        .filter(within)
        .max_by(|a, b| ctr_cmp(&a.friction.counts, &b.friction.counts).then(a.theta.total_cmp(&b.theta)));
    let (chosen, infeasible) = match best {
        Some(p) => (p.theta, false),
        None => {
            let p = points
                .iter()
                .min_by(|a, b| tr_cmp(&a.clean.counts, &b.clean.counts).then(b.theta.total_cmp(&a.theta)))
                .expect("non-empty");
            log::warn!("no theta meets clean trigger-rate cap {clean_tr_cap}; using {}", p.theta);
            (p.theta, true)
        }
    };
    Ok(Sweep { chosen, infeasible, points })
}

/// Overall, zero-shot, few-shot and kg-relation reports.
pub fn subset_report(outcomes: &[Outcome], samples: &[RephraseSample], prefix: &str) -> Result<Vec<MetricsReport>> {
    if outcomes.len() != samples.len() {
        return Err(Error::Invalid(format!("{} outcomes for {} samples", outcomes.len(), samples.len())));
    }
    let pick = |f: fn(&RephraseSample) -> bool| -> Vec<Outcome> {
        outcomes.iter().zip(samples).filter(|(_, s)| f(s)).map(|(o, _)| *o).collect()
    };
    let subsets: [(&str, fn(&RephraseSample) -> bool); 4] = [
        ("overall", |_| true),
        ("zero_shot", |s| s.tags.zero_shot),
        ("few_shot", |s| s.tags.few_shot),
        ("kg_relation", |s| s.tags.kg_relation),
    ];
    Ok(subsets
        .iter()
        .map(|(name, f)| {
            let label = if prefix.is_empty() { name.to_string() } else { format!("{prefix}/{name}") };
            let r = MetricsReport::from_outcomes(&label, SetKind::Friction, &pick(*f));
            if r.empty {
                log::warn!("subset {label} is empty");
            }
            r
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Delta {
    pub label: String,
    pub entity_precision: Option<f64>,
    pub nlu_precision: Option<f64>,
    pub trigger_rate: f64,
    pub correct_trigger_rate: Option<f64>,
}

/// `b − a` per matching label; labels missing from `b` are skipped.
pub fn compare(a: &[MetricsReport], b: &[MetricsReport]) -> Vec<Delta> {
    let diff = |x: Option<f64>, y: Option<f64>| Some(y? - x?);
    a.iter()
        .filter_map(|ra| {
            let rb = b.iter().find(|r| r.label == ra.label)?;
            Some(Delta {
                label: ra.label.clone(),
                entity_precision: diff(ra.entity_precision(), rb.entity_precision()),
                nlu_precision: diff(ra.nlu_precision(), rb.nlu_precision()),
                trigger_rate: rb.trigger_rate() - ra.trigger_rate(),
                correct_trigger_rate: diff(ra.correct_trigger_rate(), rb.correct_trigger_rate()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::NluHypothesis;
    use crate::rerankspan::{Ranked, SpanScores};
    use crate::synthdata::SplitTags;
    use proptest::prelude::*;

    fn o(t: bool, e: bool, h: bool) -> Outcome {
        Outcome {
            triggered: t,
            entity_correct: e,
            hypothesis_correct: h,
        }
    }

    #[test]
    fn ten_sample_fixture() {
        let mut v = vec![o(true, true, true); 3];
        v.extend(vec![o(true, true, false); 3]);
        v.extend(vec![o(false, false, false); 4]);
        let r = MetricsReport::from_outcomes("friction", SetKind::Friction, &v);
        assert_eq!(r.trigger_rate(), 0.6);
        assert_eq!(r.nlu_precision(), Some(0.5));
        assert_eq!(r.correct_trigger_rate(), Some(0.3));
        assert_eq!(r.entity_precision(), Some(1.0));
    }

    #[test]
    fn nothing_triggered_leaves_precisions_undefined() {
        let r = MetricsReport::from_outcomes("f", SetKind::Friction, &[o(false, false, false); 5]);
        assert_eq!(r.trigger_rate(), 0.0);
        assert_eq!(r.correct_trigger_rate(), Some(0.0));
        assert_eq!(r.entity_precision(), None);
        assert_eq!(r.nlu_precision(), None);
        assert!(r.to_kv().contains("ep=undefined"));
    }

    #[test]
    fn clean_reports_carry_trigger_rate_only() {
        let r = MetricsReport::from_outcomes("clean", SetKind::Clean, &[o(true, false, false), o(false, false, false)]);
        assert_eq!(r.trigger_rate(), 0.5);
        assert_eq!(r.entity_precision(), None);
        assert_eq!(r.nlu_precision(), None);
        assert_eq!(r.correct_trigger_rate(), None);
        assert!(!r.to_kv().contains("ctr"));
    }

    #[test]
    fn outcomes_require_trigger_and_exact_hypothesis() {
        let hyp: NluHypothesis = "Music | PlayMusicIntent | SongName: bad boy dance".parse().unwrap();
        let gold = RephraseSample {
            source: "play bad boy dance".into(),
            target: "play bad romance".into(),
            corrupt_span: Some((1, 3)),
            corrupt_text: Some("bad boy dance".into()),
            target_entity: Some("bad romance".into()),
            hypothesis: hyp.clone(),
            gold_hypothesis: "Music | PlayMusicIntent | SongName: bad romance".parse().unwrap(),
            tags: SplitTags::default(),
            hard_negatives: vec![],
            padded: false,
        };
        let analysis = |top: &str| Analysis {
            retrieved: vec![],
            reranked: vec![Ranked { surface: top.into(), score: 1.0 }],
            span: Some(SpanScores {
                null_score: 0.0,
                best: Some((2, 4, 9.0)),
            }),
            diagnostic: None,
        };
        let got = outcomes_at(&[analysis("bad romance"), analysis("bad romans")], &[gold.clone(), gold.clone()], &TriggerRule::threshold(5.0)).unwrap();
        assert_eq!(got, vec![o(true, true, true), o(true, false, false)]);
        let none = outcomes_at(&[analysis("bad romance")], &[gold], &TriggerRule::threshold(10.0)).unwrap();
        assert_eq!(none, vec![Outcome::default()]);
    }

    fn point_reports(fr: (usize, usize, usize), cl: (usize, usize)) -> (MetricsReport, MetricsReport) {
        let c = |total, triggered, hyp| Counts {
            total,
            triggered,
            entity_correct: hyp,
            hypothesis_correct: hyp,
        };
        (
            MetricsReport {
                label: "f".into(),
                set: SetKind::Friction,
                counts: c(fr.0, fr.1, fr.2),
                empty: false,
            },
            MetricsReport {
                label: "c".into(),
                set: SetKind::Clean,
                counts: c(cl.0, cl.1, 0),
                empty: false,
            },
        )
    }

    #[test]
    fn singleton_sweep() {
        let s = sweep_theta(&[5.0], 0.02, |_| Ok(point_reports((10, 5, 3), (100, 1)))).unwrap();
        assert_eq!(s.chosen, 5.0);
        assert!(!s.infeasible);
        assert_eq!(DEFAULT_THETAS, [3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn monotone_sweep_keeps_suffix_and_prefers_larger_theta() {
        // Trigger rates fall with θ; CTR ties between 6 and 7.
        let table = |t: f64| match t as i64 {
            3 => point_reports((100, 90, 60), (100, 9)),
            4 => point_reports((100, 80, 58), (100, 5)),
            5 => point_reports((100, 70, 50), (100, 2)),
            6 => point_reports((100, 60, 50), (100, 1)),
            _ => point_reports((100, 55, 50), (100, 0)),
        };
        let s = sweep_theta(&DEFAULT_THETAS, 0.02, |t| Ok(table(t))).unwrap();
        let survivors: Vec<f64> = s.points.iter().filter(|p| p.clean.trigger_rate() <= 0.02).map(|p| p.theta).collect();
        assert_eq!(survivors, vec![5.0, 6.0, 7.0]);
        assert_eq!(s.chosen, 7.0);
        let strict = sweep_theta(&DEFAULT_THETAS, 0.0, |t| Ok(table(t))).unwrap();
        assert_eq!(strict.chosen, 7.0);
        let none = sweep_theta(&[3.0, 4.0], 0.01, |t| Ok(table(t))).unwrap();
        assert!(none.infeasible);
        assert_eq!(none.chosen, 4.0);
        assert!(sweep_theta(&[], 0.02, |t| Ok(table(t))).is_err());
    }

    fn tagged(n: usize, seed: u64) -> (Vec<Outcome>, Vec<RephraseSample>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let hyp: NluHypothesis = "A | B".parse().unwrap();
        let mut outs = Vec::new();
        let mut samples = Vec::new();
        for _ in 0..n {
            let t = rng.gen_bool(0.6);
            outs.push(o(t, t && rng.gen_bool(0.7), t && rng.gen_bool(0.5)));
            let zero = rng.gen_bool(0.3);
            samples.push(RephraseSample {
                source: "x".into(),
                target: "y".into(),
                corrupt_span: Some((0, 0)),
                corrupt_text: Some("x".into()),
                target_entity: Some("y".into()),
                hypothesis: hyp.clone(),
                gold_hypothesis: hyp.clone(),
                tags: SplitTags {
                    zero_shot: zero,
                    few_shot: !zero && rng.gen_bool(0.5),
                    kg_relation: rng.gen_bool(0.3),
                    clean: false,
                },
                hard_negatives: vec![],
                padded: false,
            });
        }
        (outs, samples)
    }

    #[test]
    fn subset_totals_and_self_comparison() {
        let (outs, samples) = tagged(300, 1);
        let reps = subset_report(&outs, &samples, "full").unwrap();
        assert_eq!(reps.len(), 4);
        assert_eq!(reps[0].counts.total, 300);
        assert!(reps[1].counts.total + reps[2].counts.total <= 300);
        for d in compare(&reps, &reps) {
            assert_eq!(d.trigger_rate, 0.0);
            assert!(d.entity_precision.is_none_or(|v| v == 0.0));
            assert!(d.correct_trigger_rate.is_none_or(|v| v == 0.0));
        }
        let empty = subset_report(&[], &[], "").unwrap();
        assert!(empty.iter().all(|r| r.empty && r.counts.total == 0));
        assert_eq!(reps, subset_report(&outs, &samples, "full").unwrap());
    }

    #[test]
    fn ctr_identity_on_random_outcomes() {
        let (outs, _) = tagged(1000, 2);
        let r = MetricsReport::from_outcomes("f", SetKind::Friction, &outs);
        let direct = outs.iter().filter(|o| o.triggered && o.hypothesis_correct).count();
        assert_eq!(r.counts.hypothesis_correct, direct);
        let (tr, nlup, ctr) = (r.trigger_rate(), r.nlu_precision().unwrap(), r.correct_trigger_rate().unwrap());
        assert!((tr * nlup - ctr).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ctr_is_count_level_product(flags in proptest::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 0..200)) {
            let outs: Vec<Outcome> = flags.iter().map(|&(t, e, h)| o(t, e, h)).collect();
            let r = MetricsReport::from_outcomes("f", SetKind::Friction, &outs);
            let c = r.counts;
            prop_assert!(c.hypothesis_correct <= c.triggered && c.triggered <= c.total);
            prop_assert_eq!(c.hypothesis_correct, outs.iter().filter(|o| o.triggered && o.hypothesis_correct).count());
            if let Some(p) = r.nlu_precision() {
                prop_assert!((r.trigger_rate() * p - r.correct_trigger_rate().unwrap()).abs() < 1e-12);
            }
        }
    }
}
