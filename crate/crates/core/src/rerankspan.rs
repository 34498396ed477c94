//! Second layer: a cross encoder over `SENTINEL utt SEP entity_text` that
//! scores each candidate (MLP over the sentinel vector and the pooled graph
//! vector) and detects the corrupt span with start/end vectors:
//! `s_ij = W_S·T_i + W_E·T_j`. The null span is `(0, 0)`.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, EntityFeatures};
use crate::error::{Error, Result};
use crate::graphenc::{Gat, GatConfig};
use crate::nn::{adam_step, Checkpoint, Graph, Init, Linear, ParamId, ParamStore, Tensor, TrainConfig, Var};
use crate::retrieval::TrainLog;
use crate::textenc::{prepare_pair, utt_position, EncoderConfig, Encoded, TextEncoder, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossEncoderConfig {
    pub encoder: EncoderConfig,
    pub gat: GatConfig,
    pub rank_hidden: usize,
    pub use_gat: bool,
    pub use_descriptions: bool,
    pub max_span_len: usize,
}

impl Default for CrossEncoderConfig {
    fn default() -> Self {
        CrossEncoderConfig {
            encoder: EncoderConfig::default(),
            gat: GatConfig::default(),
            rank_hidden: 64,
            use_gat: true,
            use_descriptions: true,
            max_span_len: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rank: f64,
    pub span: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rank: 1.0, span: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSampleL2 {
    pub source: String,
    /// `None` for clean samples, which train the null span only.
    pub positive: Option<String>,
    pub hard_negatives: Vec<String>,
    /// Inclusive word range in `source`.
    pub span: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpanPrediction {
    /// Sequence positions; `(0, 0)` is the null span.
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub is_null: bool,
}

impl SpanPrediction {
    /// Inclusive word range in the utterance, if non-null.
    pub fn word_range(&self) -> Option<(usize, usize)> {
        (!self.is_null).then(|| (self.start - 1, self.end - 1))
    }
}

/// Start/end logits of one pair, reduced to what decoding needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanScores {
    pub null_score: f64,
    /// Best non-null `(start, end, score)`, if the utterance has any words.
    pub best: Option<(usize, usize, f64)>,
}

impl SpanScores {
    /// `s* − s_00`, or −∞ when there is no non-null span.
    pub fn margin(&self) -> f64 {
        self.best.map_or(f64::NEG_INFINITY, |(_, _, s)| s - self.null_score)
    }

    /// The best span iff `s* − s_00 > θ`, else null.
    pub fn decode(&self, theta: f64) -> SpanPrediction {
        match self.best {
            Some((start, end, score)) if score - self.null_score > theta => SpanPrediction {
                start,
                end,
                score,
                is_null: false,
            },
            _ => SpanPrediction {
                start: 0,
                end: 0,
                score: self.null_score,
                is_null: true,
            },
        }
    }
}

/// `W_S·T_i + W_E·T_j` over a pair whose utterance occupies `1..=n_utt`.
pub fn span_score(w_s: &[f64], w_e: &[f64], t: &Tensor, n_utt: usize, i: usize, j: usize) -> Result<f64> {
    let null = i == 0 && j == 0;
    if !null && (i == 0 || i > j || j > n_utt) || j >= t.rows() {
        return Err(Error::SpanOutOfRange { start: i, end: j, len: n_utt });
    }
    if w_s.len() != t.cols() || w_e.len() != t.cols() {
        return Err(Error::Dimension(format!("span vectors {} vs hidden {}", w_s.len(), t.cols())));
    }
    let dot = |w: &[f64], r: usize| w.iter().zip(t.row(r)).map(|(a, b)| a * b).sum::<f64>();
    Ok(dot(w_s, i) + dot(w_e, j))
}

/// Exhaustive decoding from per-position start and end logits; ties keep the
/// earliest `(start, end)`.
pub fn decode_span(start_logits: &[f64], end_logits: &[f64], n_utt: usize, max_span_len: usize) -> SpanScores {
    let null_score = start_logits[0] + end_logits[0];
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 1..=n_utt {
        for j in i..=(i + max_span_len.max(1) - 1).min(n_utt) {
            let s = start_logits[i] + end_logits[j];
            if best.is_none_or(|(_, _, b)| s > b) {
                best = Some((i, j, s));
            }
        }
    }
    SpanScores { null_score, best }
}

#[derive(Clone, Debug)]
pub struct CrossEncoder {
    pub cfg: CrossEncoderConfig,
    enc: TextEncoder,
    gat: Option<Gat>,
    rank1: Linear,
    rank2: Linear,
    pub w_start: ParamId,
    pub w_end: ParamId,
}

/// Forward outputs for a batch of pairs.
pub struct PairBatch {
    /// `pairs × 1` candidate scores.
    pub rank: Var,
    /// `Σ len × 1` start and end logits.
    pub start: Var,
    pub end: Var,
    pub seqs: Vec<(usize, usize)>,
}

impl CrossEncoder {
    pub fn new(store: &mut ParamStore, cfg: &CrossEncoderConfig, vocab_size: usize, rel_table: Option<&Tensor>) -> Result<Self> {
        let h = cfg.encoder.hidden;
        let enc = TextEncoder::new(store, "l2.enc", &cfg.encoder, vocab_size)?;
        let gat = if cfg.use_gat {
            let rels = rel_table.ok_or_else(|| Error::Config("graph encoder enabled without a relation table".into()))?;
            Some(Gat::new(store, "l2.gat", &cfg.gat, rels)?)
        } else {
            None
        };
        let rank_in = h + if cfg.use_gat { cfg.gat.hidden } else { 0 };
        let bound = 1.0 / (h as f64).sqrt();
        Ok(CrossEncoder {
            cfg: cfg.clone(),
            enc,
            gat,
            rank1: Linear::new(store, "l2.rank1", rank_in, cfg.rank_hidden, true),
            rank2: Linear::new(store, "l2.rank2", cfg.rank_hidden, 1, true),
            w_start: store.add("l2.w_start", h, 1, Init::Uniform(bound)),
            w_end: store.add("l2.w_end", h, 1, Init::Uniform(bound)),
        })
    }

    pub fn prepare(&self, vocab: &Vocab, utterance: &str, e: &EntityFeatures) -> Encoded {
        let text = if self.cfg.use_descriptions { &e.text } else { &e.surface };
        prepare_pair(vocab, &self.cfg.encoder, utterance, text)
    }

    /// `pairs[k]` is encoded with entity `ents[k]`.
    pub fn forward(&self, g: &mut Graph, pairs: &[&Encoded], ents: &[&EntityFeatures]) -> Result<PairBatch> {
        let out = self.enc.forward(g, pairs);
        let cls = self.enc.pooled(g, &out);
        let feat = match &self.gat {
            Some(gat) => {
                let graphs: Vec<&[_]> = ents.iter().map(|e| e.graphs.as_slice()).collect();
                let gv = gat.encode_entities(g, &graphs)?;
                g.concat_cols(&[cls, gv])
            }
            None => cls,
        };
        let hdn = self.rank1.forward(g, feat);
        let act = g.gelu(hdn);
        let rank = self.rank2.forward(g, act);
        let ws = g.param(self.w_start);
        let we = g.param(self.w_end);
        let start = g.matmul(out.tokens, ws);
        let end = g.matmul(out.tokens, we);
        Ok(PairBatch {
            rank,
            start,
            end,
            seqs: out.seqs,
        })
    }

    /// Start + end cross-entropy of pair `k` over positions `0..=n_utt`.
    fn span_loss(&self, g: &mut Graph, b: &PairBatch, k: usize, n_utt: usize, gold: (usize, usize)) -> Var {
        let (row0, _) = b.seqs[k];
        let pos: Vec<usize> = (row0..=row0 + n_utt).collect();
        let s = g.gather_rows(b.start, &pos);
        let s = g.reshape(s, 1, n_utt + 1);
        let e = g.gather_rows(b.end, &pos);
        let e = g.reshape(e, 1, n_utt + 1);
        let ls = g.cross_entropy_rows(s, &[gold.0]);
        let le = g.cross_entropy_rows(e, &[gold.1]);
        g.add(ls, le)
    }

    /// Mean joint loss over samples; `None` if no sample is usable.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        vocab: &Vocab,
        catalog: &Catalog,
        samples: &[&TrainSampleL2],
        weights: &LossWeights,
    ) -> Result<Option<Var>> {
        struct Plan {
            first: usize,
            count: usize,
            friction: bool,
            gold: (usize, usize),
            n_utt: usize,
        }
        let mut pairs = Vec::new();
        let mut ents = Vec::new();
        let mut plans = Vec::new();
        for s in samples {
            let Some(p) = prepare_l2(self, vocab, catalog, s) else { continue };
            let first = pairs.len();
            let n_utt = p.pairs[0].n_utt;
            plans.push(Plan {
                first,
                count: p.pairs.len(),
                friction: s.positive.is_some(),
                gold: p.gold,
                n_utt,
            });
            pairs.extend(p.pairs);
            ents.extend(p.ents);
        }
        if plans.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&Encoded> = pairs.iter().collect();
        let b = self.forward(g, &refs, &ents)?;
        let mut total: Option<Var> = None;
        for p in &plans {
            let mut term = self.span_loss(g, &b, p.first, p.n_utt, p.gold);
            term = g.scale(term, weights.span);
            if p.friction {
                let scores = g.slice_rows(b.rank, p.first, p.count);
                let scores = g.reshape(scores, 1, p.count);
                let nll = g.cross_entropy_rows(scores, &[0]);
                let nll = g.scale(nll, weights.rank);
                term = g.add(term, nll);
            }
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
        let total = total.expect("at least one plan");
        Ok(Some(g.scale(total, 1.0 / plans.len() as f64)))
    }
}

struct PreparedL2<'c> {
    pairs: Vec<Encoded>,
    ents: Vec<&'c EntityFeatures>,
    gold: (usize, usize),
}

/// Pair encodings for one sample: positive first then known negatives, or for
/// a clean sample its first known negative. `None` when unusable.
fn prepare_l2<'c>(net: &CrossEncoder, vocab: &Vocab, catalog: &'c Catalog, s: &TrainSampleL2) -> Option<PreparedL2<'c>> {
    let negs = s.hard_negatives.iter().filter_map(|n| catalog.get(n));
    let ents: Vec<&EntityFeatures> = match &s.positive {
        Some(p) => std::iter::once(catalog.get(p)?)
            .chain(negs.filter(|e| &e.surface != p))
            .collect(),
        None => negs.take(1).collect(),
    };
    if ents.is_empty() {
        return None;
    }
    let pairs: Vec<Encoded> = ents.iter().map(|e| net.prepare(vocab, &s.source, e)).collect();
    let gold = match (s.positive.is_some(), s.span) {
        (true, Some((i, j))) if i <= j && j < pairs[0].n_utt => (utt_position(i), utt_position(j)),
        (true, _) => return None,
        (false, _) => (0, 0),
    };
    Some(PreparedL2 { pairs, ents, gold })
}

/// A cross encoder with its parameters and vocabulary.
pub struct L2Model {
    pub net: CrossEncoder,
    pub store: ParamStore,
    pub vocab: Vocab,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ranked {
    pub surface: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankOutput {
    pub ranked: Vec<Ranked>,
    /// Span scores on the top-1 candidate's pair.
    pub span: SpanScores,
}

impl L2Model {
    pub fn new(cfg: &CrossEncoderConfig, vocab: Vocab, rel_table: Option<&Tensor>, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let net = CrossEncoder::new(&mut store, cfg, vocab.len(), rel_table)?;
        Ok(L2Model { net, store, vocab })
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint::from_store(&self.store, config_hash)
    }

    pub fn load(cfg: &CrossEncoderConfig, vocab: Vocab, rel_table: Option<&Tensor>, ck: &Checkpoint) -> Result<Self> {
        let mut m = L2Model::new(cfg, vocab, rel_table, 0)?;
        ck.load_into(&mut m.store)?;
        Ok(m)
    }

    /// Rank scores plus per-pair span logits for `utterance` against `ents`.
    pub fn score_pairs(&self, utterance: &str, ents: &[&EntityFeatures]) -> Result<(Vec<f64>, Vec<SpanScores>)> {
        let pairs: Vec<Encoded> = ents.iter().map(|e| self.net.prepare(&self.vocab, utterance, e)).collect();
        let refs: Vec<&Encoded> = pairs.iter().collect();
        let mut g = Graph::new(&self.store.params);
        let b = self.net.forward(&mut g, &refs, ents)?;
        let rank = g.value(b.rank).data().to_vec();
        let (st, en) = (g.value(b.start).data(), g.value(b.end).data());
        let spans = b
            .seqs
            .iter()
            .zip(&pairs)
            .map(|(&(r, len), p)| decode_span(&st[r..r + len], &en[r..r + len], p.n_utt, self.net.cfg.max_span_len))
            .collect();
        Ok((rank, spans))
    }

    /// Candidates by score descending (ties by surface, then input order) and
    /// the span scores of the winning pair.
    pub fn rerank(&self, utterance: &str, candidates: &[&EntityFeatures]) -> Result<RerankOutput> {
        if candidates.is_empty() {
            return Err(Error::Invalid("rerank needs at least one candidate".into()));
        }
        let (scores, spans) = self.score_pairs(utterance, candidates)?;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| rank_order((scores[a], &candidates[a].surface), (scores[b], &candidates[b].surface)));
        Ok(RerankOutput {
            ranked: order
                .iter()
                .map(|&i| Ranked {
                    surface: candidates[i].surface.clone(),
                    score: scores[i],
                })
                .collect(),
            span: spans[order[0]],
        })
    }

    pub fn loss(&self, catalog: &Catalog, samples: &[&TrainSampleL2], weights: &LossWeights) -> Result<Option<f64>> {
        let mut g = Graph::new(&self.store.params);
        Ok(self
            .net
            .batch_loss(&mut g, &self.vocab, catalog, samples, weights)?
            .map(|l| g.value(l).item()))
    }
}

fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Shuffled mini-batch training of the joint loss; unusable samples (positive
/// unknown, gold span cut by truncation, clean sample without a candidate)
/// are dropped and counted.
pub fn train_l2(
    model: &mut L2Model,
    catalog: &Catalog,
    samples: &[TrainSampleL2],
    cfg: &TrainConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<TrainLog> {
    let usable: Vec<&TrainSampleL2> = samples
        .iter()
        .filter(|s| prepare_l2(&model.net, &model.vocab, catalog, s).is_some())
        .collect();
    let mut log = TrainLog {
        dropped: samples.len() - usable.len(),
        ..TrainLog::default()
    };
    if log.dropped > 0 {
        log::warn!("dropped {} unusable l2 samples", log.dropped);
    }
    let adam = cfg.adam(usable.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = usable;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            model.store.zero_grads();
            let mut g = Graph::new(&model.store.params);
            let Some(loss) = model.net.batch_loss(&mut g, &model.vocab, catalog, chunk, weights)? else {
                continue;
            };
            total += g.value(loss).item();
            g.backward(loss, &mut model.store.grads);
            drop(g);
            adam_step(&mut model.store, &adam, step)?;
            step += 1;
            batches += 1;
            if batches % 100 == 0 {
                log::debug!("l2 epoch {epoch} batch {batches}: running loss {:.4}", total / batches as f64);
            }
        }
        let mean = total / batches.max(1) as f64;
        log::info!("l2 epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphenc::GatInput;
    use crate::kgpretrain::EmbeddingTable;
    use crate::kgstore::{Direction, Edge, Subgraph};
    use crate::nn::grad_check;
    use rand::Rng;

    fn tiny_cfg(use_gat: bool) -> CrossEncoderConfig {
        CrossEncoderConfig {
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                hidden: 8,
                max_len: 20,
                ffn: 8,
                trigram_buckets: 37,
            },
            gat: GatConfig {
                layers: 2,
                heads: 2,
                hidden: 4,
                ..GatConfig::default()
            },
            rank_hidden: 6,
            use_gat,
            use_descriptions: true,
            max_span_len: 6,
        }
    }

    fn fixture() -> (Catalog, Vocab, EmbeddingTable) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |r, c| Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let tbl = EmbeddingTable { nodes: rand_t(8, 3), rels: rand_t(2, 3) };
        let mut cat = Catalog::default();
        let names = [
            ("bad romance", "song"),
            ("bad blood", "song"),
            ("lady gaga", "artist"),
            ("carson city", "city"),
            ("corbin city", "city"),
        ];
        for (i, (s, d)) in names.iter().enumerate() {
            let sub = Subgraph {
                center: i,
                edges: vec![Edge { rel: i % 2, dir: Direction::Incoming, neighbor: 5 + i % 3 }],
            };
            cat.push(EntityFeatures {
                surface: s.to_string(),
                ids: vec![i],
                text: format!("{s} [des] {d}"),
                graphs: vec![GatInput::from_subgraph(&sub, &tbl).unwrap()],
            });
        }
        let vocab = Vocab::build(["play bad boy dance by lady gaga", "weather in carson city song artist"], 1);
        (cat, vocab, tbl)
    }

    fn friction() -> TrainSampleL2 {
        TrainSampleL2 {
            source: "play bad boy dance by lady gaga".into(),
            positive: Some("bad romance".into()),
            hard_negatives: vec!["bad blood".into(), "lady gaga".into(), "carson city".into(), "corbin city".into()],
            span: Some((1, 3)),
        }
    }

    fn clean() -> TrainSampleL2 {
        TrainSampleL2 {
            source: "weather in carson city".into(),
            positive: None,
            hard_negatives: vec!["carson city".into()],
            span: None,
        }
    }

    #[test]
    fn span_score_example() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 5.0], vec![1.0, 1.0], vec![4.0, 7.0]]);
        assert_eq!(span_score(&[1.0, 0.0], &[0.0, 1.0], &t, 3, 1, 3).unwrap(), 9.0);
        assert_eq!(span_score(&[1.0, 0.0], &[0.0, 1.0], &t, 3, 0, 0).unwrap(), 0.0);
        assert!(span_score(&[1.0, 0.0], &[0.0, 1.0], &t, 3, 0, 2).is_err());
        assert!(span_score(&[1.0, 0.0], &[0.0, 1.0], &t, 3, 3, 1).is_err());
        assert!(span_score(&[1.0, 0.0], &[0.0, 1.0], &t, 2, 1, 3).is_err());
    }

    #[test]
    fn decode_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let len = n + 1 + rng.gen_range(0..4);
            let s: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let e: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let got = decode_span(&s, &e, n, 6);
            let mut want = (0, 0, f64::NEG_INFINITY);
            for i in 1..=n {
                for j in i..=n {
                    if j - i < 6 && s[i] + e[j] > want.2 {
                        want = (i, j, s[i] + e[j]);
                    }
                }
            }
            assert_eq!(got.best, Some(want));
            assert_eq!(got.null_score, s[0] + e[0]);
        }
    }

    #[test]
    fn threshold_limits_and_fixture() {
        let mut s = vec![0.0; 5];
        let mut e = vec![0.0; 5];
        s[2] = 2.2;
        e[3] = 2.0;
        let sc = decode_span(&s, &e, 4, 6);
        assert!((sc.margin() - 4.2).abs() < 1e-12);
        assert!(!sc.decode(3.0).is_null);
        assert_eq!((sc.decode(3.0).start, sc.decode(3.0).end), (2, 3));
        assert_eq!(sc.decode(3.0).word_range(), Some((1, 2)));
        assert!(sc.decode(5.0).is_null);
        assert!(sc.decode(f64::INFINITY).is_null);
        assert!(!sc.decode(f64::NEG_INFINITY).is_null);
        let null = sc.decode(5.0);
        assert_eq!((null.start, null.end), (0, 0));
        let empty = decode_span(&[1.0, 0.0], &[1.0, 0.0], 0, 6);
        assert!(empty.decode(f64::NEG_INFINITY).is_null);
    }

    #[test]
    fn null_only_batch_has_no_rank_term() {
        let (cat, vocab, tbl) = fixture();
        let m = L2Model::new(&tiny_cfg(true), vocab, Some(&tbl.rels), 1).unwrap();
        let c = clean();
        let only_span = m.loss(&cat, &[&c], &LossWeights { rank: 0.0, span: 1.0 }).unwrap().unwrap();
        let both = m.loss(&cat, &[&c], &LossWeights::default()).unwrap().unwrap();
        assert_eq!(only_span, both);
        let no_span = m.loss(&cat, &[&c], &LossWeights { rank: 1.0, span: 0.0 }).unwrap().unwrap();
        assert_eq!(no_span, 0.0);
    }

    #[test]
    fn singleton_span_softmax_is_zero() {
        let (cat, vocab, tbl) = fixture();
        let m = L2Model::new(&tiny_cfg(false), vocab, Some(&tbl.rels), 2).unwrap();
        let s = TrainSampleL2 {
            source: "".into(),
            positive: None,
            hard_negatives: vec!["lady gaga".into()],
            span: None,
        };
        assert_eq!(m.loss(&cat, &[&s], &LossWeights::default()).unwrap(), Some(0.0));
    }

    #[test]
    fn joint_loss_gradient_check() {
        let (cat, vocab, tbl) = fixture();
        for seed in 0..3 {
            let mut m = L2Model::new(&tiny_cfg(seed != 2), vocab.clone(), Some(&tbl.rels), seed).unwrap();
            let (f, c) = (friction(), clean());
            let net = m.net.clone();
            let v = m.vocab.clone();
            let r = grad_check(
                &mut m.store,
                |g| net.batch_loss(g, &v, &cat, &[&f, &c], &LossWeights::default()).unwrap().unwrap(),
                1e-5,
                6,
                seed,
            );
            assert!(r.max_rel_err < 1e-4, "{} {} vs {}: {}", r.worst_param, r.analytic, r.numeric, r.max_rel_err);
        }
    }

    #[test]
    fn truncated_gold_span_is_dropped() {
        let (cat, vocab, tbl) = fixture();
        let mut cfg = tiny_cfg(false);
        cfg.encoder.max_len = 4;
        let mut m = L2Model::new(&cfg, vocab, Some(&tbl.rels), 3).unwrap();
        let log = train_l2(&mut m, &cat, &[friction(), clean()], &TrainConfig { lr: 0.01, batch: 2, epochs: 1 }, &LossWeights::default(), 0).unwrap();
        assert_eq!(log.dropped, 1);
    }

    #[test]
    fn rerank_orders_and_is_input_order_invariant() {
        let (cat, vocab, tbl) = fixture();
        let m = L2Model::new(&tiny_cfg(true), vocab, Some(&tbl.rels), 4).unwrap();
        let ents: Vec<&EntityFeatures> = cat.entries().iter().collect();
        let a = m.rerank("play bad boy dance by lady gaga", &ents).unwrap();
        let rev: Vec<&EntityFeatures> = ents.iter().rev().copied().collect();
        let b = m.rerank("play bad boy dance by lady gaga", &rev).unwrap();
        for (x, y) in a.ranked.iter().zip(&b.ranked) {
            assert_eq!(x.surface, y.surface);
            assert!((x.score - y.score).abs() < 1e-12);
        }
        assert!(a.ranked.windows(2).all(|w| w[0].score >= w[1].score));
        let one = m.rerank("play x", &ents[..1]).unwrap();
        assert_eq!(one.ranked.len(), 1);
        let dup = m.rerank("play x", &[ents[0], ents[0]]).unwrap();
        assert_eq!(dup.ranked[0], dup.ranked[1]);
    }

    #[test]
    fn training_fits_a_tiny_set() {
        let (cat, vocab, tbl) = fixture();
        let mut m = L2Model::new(&tiny_cfg(true), vocab, Some(&tbl.rels), 5).unwrap();
        let data = vec![friction(), clean()];
        let log = train_l2(&mut m, &cat, &data, &TrainConfig { lr: 0.01, batch: 2, epochs: 80 }, &LossWeights::default(), 0).unwrap();
        assert!(log.epoch_loss.last().unwrap() < &(log.epoch_loss[0] * 0.3), "{:?}", log.epoch_loss);
        let ents: Vec<&EntityFeatures> = cat.entries().iter().collect();
        let out = m.rerank("play bad boy dance by lady gaga", &ents).unwrap();
        assert_eq!(out.ranked[0].surface, "bad romance");
        let span = out.span.decode(0.0);
        assert_eq!(span.word_range(), Some((1, 3)));
    }
}
