//! End-to-end rewrite: retrieve, re-rank, detect the span, and replace it
//! textually in the utterance and in its NLU hypothesis.

use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};

use crate::catalog::{Catalog, EntityFeatures};
use crate::error::{Error, Result};
use crate::rerankspan::{L2Model, Ranked, SpanPrediction, SpanScores};
use crate::retrieval::{EntityIndex, Hit, L1Model};

/// `Domain | Intent | name: value | name: value ...`
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NluHypothesis {
    pub domain: String,
    pub intent: String,
    pub slots: Vec<(String, String)>,
}

impl fmt::Display for NluHypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {}", self.domain, self.intent)?;
        for (name, value) in &self.slots {
            write!(f, " | {name}: {value}")?;
        }
        Ok(())
    }
}

impl FromStr for NluHypothesis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |d: String| Error::format("hypothesis", d);
        let mut parts = s.split(" | ");
        let domain = parts.next().filter(|d| !d.is_empty()).ok_or_else(|| bad(format!("missing domain in `{s}`")))?;
        let intent = parts.next().ok_or_else(|| bad(format!("missing intent in `{s}`")))?;
        let slots = parts
            .map(|p| {
                p.split_once(": ")
                    .map(|(n, v)| (n.to_string(), v.to_string()))
                    .ok_or_else(|| bad(format!("slot `{p}` lacks `name: value`")))
            })
            .collect::<Result<_>>()?;
        Ok(NluHypothesis {
            domain: domain.to_string(),
            intent: intent.to_string(),
            slots,
        })
    }
}

impl Serialize for NluHypothesis {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Byte offsets of whole-word occurrences of `needle` in `hay`.
fn whole_word_matches(hay: &str, needle: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(p) = hay[from..].find(needle) {
        let at = from + p;
        let end = at + needle.len();
        let left = at == 0 || hay[..at].ends_with(char::is_whitespace);
        let right = end == hay.len() || hay[end..].starts_with(char::is_whitespace);
        if left && right {
            out.push(at);
            from = end;
        } else {
            from = at + hay[at..].chars().next().map_or(1, char::len_utf8);
        }
    }
    out
}

/// Replaces every whole-word occurrence of `span_text` in slot values by
/// `entity`; the flag is false when nothing matched.
pub fn rewrite_hypothesis(hyp: &NluHypothesis, span_text: &str, entity: &str) -> (NluHypothesis, bool) {
    let mut out = hyp.clone();
    let mut any = false;
    if span_text.is_empty() {
        return (out, false);
    }
    for (_, value) in &mut out.slots {
        let hits = whole_word_matches(value, span_text);
        if hits.is_empty() {
            continue;
        }
        any = true;
        let mut s = String::with_capacity(value.len());
        let mut last = 0;
        for at in hits {
            s.push_str(&value[last..at]);
            s.push_str(entity);
            last = at + span_text.len();
        }
        s.push_str(&value[last..]);
        *value = s;
    }
    if !any {
        log::warn!("span `{span_text}` not found in hypothesis `{hyp}`");
    }
    (out, any)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    /// Non-null span under θ and a winning surface that differs from the span text.
    Threshold,
    /// Always rewrite with the best non-null span.
    Always,
}

/// How a cached analysis becomes a trigger decision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TriggerRule {
    pub theta: f64,
    pub mode: TriggerMode,
    /// Optional extra gate on the top-1 rerank score; off by default.
    pub min_rank_score: Option<f64>,
}

impl TriggerRule {
    pub fn threshold(theta: f64) -> Self {
        TriggerRule {
            theta,
            mode: TriggerMode::Threshold,
            min_rank_score: None,
        }
    }

    pub fn always() -> Self {
        TriggerRule {
            theta: f64::NEG_INFINITY,
            mode: TriggerMode::Always,
            min_rank_score: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trace {
    pub retrieved: Vec<Hit>,
    pub reranked: Vec<Ranked>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewriteResult {
    pub triggered: bool,
    pub span: SpanPrediction,
    pub span_text: Option<String>,
    /// Top-1 re-ranked surface.
    pub entity: Option<String>,
    pub rewritten_utterance: Option<String>,
    pub rewritten_hypothesis: Option<NluHypothesis>,
    pub trace: Trace,
    pub diagnostic: Option<String>,
}

impl RewriteResult {
    /// The rewrite if triggered, else the input unchanged.
    pub fn output<'a>(&'a self, input: &'a str) -> &'a str {
        self.rewritten_utterance.as_deref().unwrap_or(input)
    }
}

/// Retrieval and re-ranking output for one utterance, reusable across θ.
#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub retrieved: Vec<Hit>,
    pub reranked: Vec<Ranked>,
    pub span: Option<SpanScores>,
    pub diagnostic: Option<String>,
}

/// Everything needed to rewrite: both layers, their entity features and the index.
pub struct System {
    pub l1: L1Model,
    pub l2: L2Model,
    pub catalog: Catalog,
    pub index: EntityIndex,
}

impl System {
    pub fn analyze(&self, utterance: &str, k: usize) -> Result<Analysis> {
        if utterance.split_whitespace().next().is_none() {
            return Ok(Analysis {
                retrieved: Vec::new(),
                reranked: Vec::new(),
                span: None,
                diagnostic: Some("empty utterance".into()),
            });
        }
        let retrieved = self.index.top_k(&self.l1.encode_utterance(utterance), k)?;
        let cands: Vec<&EntityFeatures> = retrieved.iter().filter_map(|h| self.catalog.get(&h.surface)).collect();
        if cands.is_empty() {
            return Ok(Analysis {
                retrieved,
                reranked: Vec::new(),
                span: None,
                diagnostic: Some("no candidates".into()),
            });
        }
        let out = self.l2.rerank(utterance, &cands)?;
        Ok(Analysis {
            retrieved,
            reranked: out.ranked,
            span: Some(out.span),
            diagnostic: None,
        })
    }

    pub fn rewrite(&self, utterance: &str, hypothesis: Option<&NluHypothesis>, k: usize, rule: &TriggerRule) -> Result<RewriteResult> {
        let a = self.analyze(utterance, k)?;
        Ok(decide(&a, utterance, hypothesis, rule))
    }
}

/// Applies the trigger rule to a cached analysis.
pub fn decide(a: &Analysis, utterance: &str, hypothesis: Option<&NluHypothesis>, rule: &TriggerRule) -> RewriteResult {
    let entity = a.reranked.first().map(|r| r.surface.clone());
    let theta = match rule.mode {
        TriggerMode::Threshold => rule.theta,
        TriggerMode::Always => f64::NEG_INFINITY,
    };
    let null = SpanPrediction {
        start: 0,
        end: 0,
        score: a.span.map_or(0.0, |s| s.null_score),
        is_null: true,
    };
    let span = a.span.map_or(null, |s| s.decode(theta));
    let mut result = RewriteResult {
        triggered: false,
        span,
        span_text: None,
        entity: entity.clone(),
        rewritten_utterance: None,
        rewritten_hypothesis: None,
        trace: Trace {
            retrieved: a.retrieved.clone(),
            reranked: a.reranked.clone(),
        },
        diagnostic: a.diagnostic.clone(),
    };
    let (Some(entity), Some((i, j))) = (entity, span.word_range()) else {
        return result;
    };
    let words: Vec<&str> = utterance.split_whitespace().collect();
    let span_text = words[i..=j].join(" ");
    result.span_text = Some(span_text.clone());
    if rule.mode == TriggerMode::Threshold && span_text.to_lowercase() == entity {
        result.diagnostic = Some("winning entity equals span text".into());
        return result;
    }
    if let (Some(gate), Some(top)) = (rule.min_rank_score, a.reranked.first()) {
        if top.score < gate {
            result.diagnostic = Some("top rerank score below gate".into());
            return result;
        }
    }
    let rewritten: Vec<&str> = words[..i]
        .iter()
        .copied()
        .chain(std::iter::once(entity.as_str()))
        .chain(words[j + 1..].iter().copied())
        .collect();
    result.triggered = true;
    result.rewritten_utterance = Some(rewritten.join(" "));
    result.rewritten_hypothesis = hypothesis.map(|h| rewrite_hypothesis(h, &span_text, &entity).0);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn music_hyp() -> NluHypothesis {
        "Music | PlayMusicIntent | ArtistName: lady gaga | SongName: bad boy dance".parse().unwrap()
    }

    fn analysis(top: &str, best: Option<(usize, usize, f64)>) -> Analysis {
        Analysis {
            retrieved: vec![],
            reranked: vec![Ranked { surface: top.into(), score: 1.0 }],
            span: Some(SpanScores { null_score: 0.0, best }),
            diagnostic: None,
        }
    }

    #[test]
    fn hypothesis_format() {
        let h = music_hyp();
        assert_eq!(h.domain, "Music");
        assert_eq!(h.slots[1], ("SongName".to_string(), "bad boy dance".to_string()));
        assert_eq!(h.to_string(), "Music | PlayMusicIntent | ArtistName: lady gaga | SongName: bad boy dance");
        assert!("".parse::<NluHypothesis>().is_err());
        assert!("A | B | broken".parse::<NluHypothesis>().is_err());
        let bare: NluHypothesis = "Weather | GetWeather".parse().unwrap();
        assert!(bare.slots.is_empty());
    }

    #[test]
    fn hypothesis_replacement() {
        let (h, ok) = rewrite_hypothesis(&music_hyp(), "bad boy dance", "bad romance");
        assert!(ok);
        assert_eq!(h.slots[1].1, "bad romance");
        assert_eq!(h.slots[0].1, "lady gaga");
        let (same, ok) = rewrite_hypothesis(&music_hyp(), "poker face", "x");
        assert!(!ok);
        assert_eq!(same, music_hyp());
        let two: NluHypothesis = "A | B | X: play carsen city | Y: carsen city".parse().unwrap();
        let (h, _) = rewrite_hypothesis(&two, "carsen city", "carson city");
        assert_eq!(h.slots[0].1, "play carson city");
        assert_eq!(h.slots[1].1, "carson city");
        let partial: NluHypothesis = "A | B | X: scarsen city".parse().unwrap();
        assert!(!rewrite_hypothesis(&partial, "carsen city", "z").1);
    }

    #[test]
    fn bad_romance_rewrite() {
        let utt = "play bad boy dance by lady gaga";
        let r = decide(&analysis("bad romance", Some((2, 4, 9.0))), utt, Some(&music_hyp()), &TriggerRule::threshold(5.0));
        assert!(r.triggered);
        assert_eq!(r.span_text.as_deref(), Some("bad boy dance"));
        assert_eq!(r.output(utt), "play bad romance by lady gaga");
        assert_eq!(r.rewritten_hypothesis.unwrap().slots[1].1, "bad romance");
    }

    #[test]
    fn null_span_and_noop_guard_leave_input_untouched() {
        let utt = "play bad romance by lady gaga";
        let null = decide(&analysis("bad romance", Some((2, 3, 1.0))), utt, None, &TriggerRule::threshold(5.0));
        assert!(!null.triggered && null.span.is_null);
        assert_eq!(null.output(utt), utt);
        assert!(null.rewritten_hypothesis.is_none());
        let same = decide(&analysis("bad romance", Some((2, 3, 9.0))), utt, None, &TriggerRule::threshold(5.0));
        assert!(!same.triggered);
        assert!(same.rewritten_utterance.is_none());
        let always = decide(&analysis("lady gaga", Some((2, 3, -9.0))), utt, None, &TriggerRule::always());
        assert!(always.triggered);
        let gated = TriggerRule {
            min_rank_score: Some(2.0),
            ..TriggerRule::threshold(5.0)
        };
        let blocked = decide(&analysis("lady gaga", Some((2, 3, 9.0))), utt, None, &gated);
        assert!(!blocked.triggered);
    }

    #[test]
    fn empty_utterance_is_untriggered() {
        let a = Analysis {
            retrieved: vec![],
            reranked: vec![],
            span: None,
            diagnostic: Some("empty utterance".into()),
        };
        let r = decide(&a, "", None, &TriggerRule::always());
        assert!(!r.triggered);
        assert!(r.diagnostic.is_some());
    }

    proptest! {
        #[test]
        fn hypothesis_roundtrip(domain in "[A-Za-z]{1,8}", intent in "[A-Za-z]{0,12}",
                                slots in proptest::collection::vec(("[A-Za-z]{1,8}", "[a-z0-9 ]{0,16}"), 0..4)) {
            let h = NluHypothesis { domain, intent, slots };
            let back: NluHypothesis = h.to_string().parse().unwrap();
            prop_assert_eq!(back, h);
        }

        #[test]
        fn triggered_rewrite_only_touches_the_span(words in proptest::collection::vec("[a-z]{1,5}", 1..9), i in 0usize..9, len in 1usize..4, ent in "[a-z]{1,6}( [a-z]{1,6})?") {
            let i = i % words.len();
            let j = (i + len - 1).min(words.len() - 1);
            let utt = words.join(" ");
            let r = decide(&analysis(&ent, Some((i + 1, j + 1, 1.0))), &utt, None, &TriggerRule::threshold(0.0));
            if words[i..=j].join(" ") == ent {
                prop_assert!(!r.triggered);
            } else {
                let out = r.output(&utt);
                let want = [words[..i].join(" "), ent.clone(), words[j + 1..].join(" ")]
                    .iter().filter(|s| !s.is_empty()).cloned().collect::<Vec<_>>().join(" ");
                prop_assert_eq!(out, want.as_str());
            }
        }
    }
}
