//! Word tokenizer, vocabulary and a small pre-LN transformer encoder.
//!
//! Every token embeds as its word vector plus the mean of its hashed
//! character-trigram vectors, so misspelled or unseen words still land near
//! their neighbours. Sequences are encoded in batches: rows of all sequences
//! are stacked and attention runs block-diagonally.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::kgstore::DES_TOKEN;
use crate::nn::{Graph, Init, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

pub const PAD: usize = 0;
pub const SENTINEL: usize = 1;
pub const SEP: usize = 2;
pub const DES: usize = 3;
pub const UNK: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[pad]", "[cls]", "[sep]", DES_TOKEN, "[unk]"];

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// `surface [des] d1 [des] d2 ...`
pub fn build_entity_text(surface: &str, descriptions: &[String]) -> String {
    let mut out = surface.to_string();
    for d in descriptions {
        out.push(' ');
        out.push_str(DES_TOKEN);
        out.push(' ');
        out.push_str(d);
    }
    out
}

/// Hashed character trigrams of `#word#`; special tokens have none.
pub fn trigram_buckets(word: &str, buckets: usize) -> Vec<usize> {
    if buckets == 0 || SPECIAL_TOKENS.contains(&word) {
        return Vec::new();
    }
    let chars: Vec<char> = std::iter::once('#').chain(word.chars()).chain(std::iter::once('#')).collect();
    chars
        .windows(3)
        .map(|w| {
            let mut h = FnvHasher::default();
            let s: String = w.iter().collect();
            h.write(s.as_bytes());
            (h.finish() % buckets as u64) as usize
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::format("vocab", format!("line {} must be `{s}`", i + 1)));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocab", format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Words seen at least `min_count` times, most frequent first (ties by
    /// token), after the reserved tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in tokenize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Vocab::from_tokens(tokens).expect("reserved tokens are placed first")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocab::from_text(&read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub ffn: usize,
    pub trigram_buckets: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            hidden: 64,
            max_len: 48,
            ffn: 128,
            trigram_buckets: 4096,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config("encoder max_len must be at least 3".into()));
        }
        Ok(())
    }
}

/// A tokenized sequence ready for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub trigrams: Vec<Vec<usize>>,
    pub segments: Vec<usize>,
    /// Utterance tokens kept; they occupy positions `1..=n_utt`.
    pub n_utt: usize,
    pub truncated: bool,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, vocab: &Vocab, word: &str, segment: usize, buckets: usize) {
        self.ids.push(vocab.id(word));
        self.trigrams.push(trigram_buckets(word, buckets));
        self.segments.push(segment);
    }

    fn special(&mut self, id: usize, segment: usize) {
        self.ids.push(id);
        self.trigrams.push(Vec::new());
        self.segments.push(segment);
    }
}

/// Sequence position of utterance word `k`.
pub fn utt_position(k: usize) -> usize {
    k + 1
}

/// `SENTINEL w1 .. wn`, truncated to `max_len` positions.
pub fn prepare_single(vocab: &Vocab, cfg: &EncoderConfig, text: &str) -> Encoded {
    let words = tokenize(text);
    let keep = words.len().min(cfg.max_len - 1);
    let mut e = Encoded {
        ids: Vec::with_capacity(keep + 1),
        trigrams: Vec::with_capacity(keep + 1),
        segments: Vec::with_capacity(keep + 1),
        n_utt: keep,
        truncated: keep < words.len(),
    };
    e.special(SENTINEL, 0);
    for w in &words[..keep] {
        e.push(vocab, w, 0, cfg.trigram_buckets);
    }
    e
}

/// `SENTINEL utt SEP entity_text`; the entity side is cut first.
pub fn prepare_pair(vocab: &Vocab, cfg: &EncoderConfig, utterance: &str, entity_text: &str) -> Encoded {
    let utt = tokenize(utterance);
    let ent = tokenize(entity_text);
    let n_utt = utt.len().min(cfg.max_len - 2);
    let n_ent = ent.len().min(cfg.max_len - 2 - n_utt);
    let mut e = Encoded {
        ids: Vec::with_capacity(n_utt + n_ent + 2),
        trigrams: Vec::with_capacity(n_utt + n_ent + 2),
        segments: Vec::with_capacity(n_utt + n_ent + 2),
        n_utt,
        truncated: n_utt < utt.len() || n_ent < ent.len(),
    };
    e.special(SENTINEL, 0);
    for w in &utt[..n_utt] {
        e.push(vocab, w, 0, cfg.trigram_buckets);
    }
    e.special(SEP, 0);
    for w in &ent[..n_ent] {
        e.push(vocab, w, 1, cfg.trigram_buckets);
    }
    e
}

/// Sinusoidal position table, `rows × dim`.
pub fn sinusoid_table(rows: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, dim);
    for p in 0..rows {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = p as f64 * rate;
            t.row_mut(p)[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

/// Word, trigram and segment tables; can be shared by several encoders.
#[derive(Clone, Copy, Debug)]
pub struct TokenEmbeddings {
    pub word: ParamId,
    pub trigram: ParamId,
    pub segment: ParamId,
}

impl TokenEmbeddings {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, vocab_size: usize) -> Self {
        let h = cfg.hidden;
        let bound = (3.0 / h as f64).sqrt();
        TokenEmbeddings {
            word: store.add(format!("{name}.word"), vocab_size, h, Init::Uniform(bound)),
            trigram: store.add(format!("{name}.trigram"), cfg.trigram_buckets.max(1), h, Init::Uniform(bound)),
            segment: store.add(format!("{name}.segment"), 2, h, Init::Uniform(bound)),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: EncoderConfig,
    pub emb: TokenEmbeddings,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    positions: Tensor,
}

/// Output of a batched forward pass.
pub struct EncodedBatch {
    /// All token rows stacked, `Σ len × hidden`.
    pub tokens: Var,
    /// `(start row, len)` of each sequence.
    pub seqs: Vec<(usize, usize)>,
}

impl EncodedBatch {
    pub fn starts(&self) -> Vec<usize> {
        self.seqs.iter().map(|&(s, _)| s).collect()
    }
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, vocab_size: usize) -> Result<Self> {
        let emb = TokenEmbeddings::new(store, &format!("{name}.emb"), cfg, vocab_size);
        TextEncoder::with_embeddings(store, name, cfg, emb)
    }

    pub fn with_embeddings(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, emb: TokenEmbeddings) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), h),
                    q: Linear::new(store, &format!("{p}.q"), h, h, true),
                    k: Linear::new(store, &format!("{p}.k"), h, h, false),
                    v: Linear::new(store, &format!("{p}.v"), h, h, true),
                    o: Linear::new(store, &format!("{p}.o"), h, h, true),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), h),
                    ff1: Linear::new(store, &format!("{p}.ff1"), h, cfg.ffn, true),
                    ff2: Linear::new(store, &format!("{p}.ff2"), cfg.ffn, h, true),
                }
            })
            .collect();
        Ok(TextEncoder {
            cfg: cfg.clone(),
            emb,
            blocks,
            final_ln: LayerNorm::new(store, &format!("{name}.ln_f"), h),
            positions: sinusoid_table(cfg.max_len, h),
        })
    }

    /// Encodes a batch; every sequence must be non-empty and at most `max_len`.
    pub fn forward(&self, g: &mut Graph, batch: &[&Encoded]) -> EncodedBatch {
        let h = self.cfg.hidden;
        let total: usize = batch.iter().map(|e| e.len()).sum();
        let mut ids = Vec::with_capacity(total);
        let mut tri = Vec::with_capacity(total);
        let mut segs = Vec::with_capacity(total);
        let mut pos = Tensor::zeros(total, h);
        let mut seqs = Vec::with_capacity(batch.len());
        let mut row = 0;
        for e in batch {
            assert!(!e.is_empty() && e.len() <= self.cfg.max_len, "sequence length {}", e.len());
            seqs.push((row, e.len()));
            for p in 0..e.len() {
                pos.row_mut(row + p).copy_from_slice(self.positions.row(p));
            }
            ids.extend_from_slice(&e.ids);
            tri.extend(e.trigrams.iter().cloned());
            segs.extend_from_slice(&e.segments);
            row += e.len();
        }
        let w = g.embed(self.emb.word, &ids);
        let t = g.embed_bag(self.emb.trigram, tri, true);
        let s = g.embed(self.emb.segment, &segs);
        let p = g.constant(pos);
        let wt = g.add(w, t);
        let sp = g.add(s, p);
        let mut x = g.add(wt, sp);
        for b in &self.blocks {
            let n1 = b.ln1.forward(g, x);
            let q = b.q.forward(g, n1);
            let k = b.k.forward(g, n1);
            let v = b.v.forward(g, n1);
            let a = g.attention(q, k, v, &seqs, self.cfg.heads);
            let o = b.o.forward(g, a);
            x = g.add(x, o);
            let n2 = b.ln2.forward(g, x);
            let f1 = b.ff1.forward(g, n2);
            let act = g.gelu(f1);
            let f2 = b.ff2.forward(g, act);
            x = g.add(x, f2);
        }
        let tokens = self.final_ln.forward(g, x);
        EncodedBatch { tokens, seqs }
    }

    /// Sentinel rows of each sequence, `batch × hidden`.
    pub fn pooled(&self, g: &mut Graph, out: &EncodedBatch) -> Var {
        g.gather_rows(out.tokens, &out.starts())
    }

    /// Convenience single-text encoding: (pooled vector, token vectors).
    pub fn encode(&self, store: &ParamStore, vocab: &Vocab, text: &str) -> (Vec<f64>, Tensor) {
        let e = prepare_single(vocab, &self.cfg, text);
        let mut g = Graph::new(&store.params);
        let out = self.forward(&mut g, &[&e]);
        let t = g.value(out.tokens).clone();
        (t.row(0).to_vec(), t)
    }

    /// Token vectors over `SENTINEL utt SEP entity_text`.
    pub fn encode_pair(&self, store: &ParamStore, vocab: &Vocab, utterance: &str, entity_text: &str) -> (Encoded, Tensor) {
        let e = prepare_pair(vocab, &self.cfg, utterance, entity_text);
        let mut g = Graph::new(&store.params);
        let out = self.forward(&mut g, &[&e]);
        let t = g.value(out.tokens).clone();
        (e, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use proptest::prelude::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            hidden: 8,
            max_len: 12,
            ffn: 12,
            trigram_buckets: 31,
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(["play bad romance by lady gaga", "x [des] song", "play x"], 1)
    }

    #[test]
    fn entity_text_layout() {
        assert_eq!(
            build_entity_text("bad romance", &["song".into(), "2011 film".into()]),
            "bad romance [des] song [des] 2011 film"
        );
        assert_eq!(build_entity_text("carson city", &[]), "carson city");
        assert_eq!(build_entity_text("x", &["a".into()]), "x [des] a");
    }

    #[test]
    fn pair_layout_and_positions() {
        let v = vocab();
        let e = prepare_pair(&v, &small_cfg(), "play x", "x [des] song");
        let want: Vec<usize> = vec![SENTINEL, v.id("play"), v.id("x"), SEP, v.id("x"), DES, v.id("song")];
        assert_eq!(e.ids, want);
        assert_eq!(e.n_utt, 2);
        assert_eq!(e.ids[utt_position(1)], v.id("x"));
        assert_eq!(e.segments, vec![0, 0, 0, 0, 1, 1, 1]);
        let empty = prepare_pair(&v, &small_cfg(), "play x", "");
        assert_eq!(empty.ids, vec![SENTINEL, v.id("play"), v.id("x"), SEP]);
    }

    #[test]
    fn pair_truncates_entity_side_first() {
        let v = vocab();
        let cfg = small_cfg();
        let e = prepare_pair(&v, &cfg, "a b c d e f", "g h i j k l m");
        assert_eq!(e.len(), cfg.max_len);
        assert_eq!(e.n_utt, 6);
        assert!(e.truncated);
        let long = prepare_pair(&v, &cfg, &"w ".repeat(30), "z");
        assert_eq!(long.n_utt, cfg.max_len - 2);
        assert_eq!(long.len(), cfg.max_len);
    }

    #[test]
    fn empty_text_is_sentinel_only() {
        let v = vocab();
        let mut s = ParamStore::new(1);
        let enc = TextEncoder::new(&mut s, "t", &small_cfg(), v.len()).unwrap();
        let (pooled, toks) = enc.encode(&s, &v, "");
        assert_eq!(toks.shape(), (1, 8));
        assert!(pooled.iter().all(|x| x.is_finite()));
        let (_, t3) = enc.encode(&s, &v, "play bad romance");
        assert_eq!(t3.rows(), 4);
    }

    #[test]
    fn encoding_is_deterministic_and_batch_independent() {
        let v = vocab();
        let mut s = ParamStore::new(2);
        let enc = TextEncoder::new(&mut s, "t", &small_cfg(), v.len()).unwrap();
        let (a, _) = enc.encode(&s, &v, "play bad romance");
        let (b, _) = enc.encode(&s, &v, "play bad romance");
        assert_eq!(a, b);
        let e1 = prepare_single(&v, &small_cfg(), "lady gaga");
        let e2 = prepare_single(&v, &small_cfg(), "play bad romance");
        let mut g = Graph::new(&s.params);
        let out = enc.forward(&mut g, &[&e1, &e2]);
        let pooled = enc.pooled(&mut g, &out);
        for (x, y) in g.value(pooled).row(1).iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn oov_words_differ_through_trigrams() {
        let v = vocab();
        let mut s = ParamStore::new(3);
        let enc = TextEncoder::new(&mut s, "t", &small_cfg(), v.len()).unwrap();
        assert_eq!(v.id("romanse"), UNK);
        let (a, _) = enc.encode(&s, &v, "romanse");
        let (b, _) = enc.encode(&s, &v, "zzqx");
        assert_ne!(a, b);
    }

    #[test]
    fn pooled_head_gradient_matches_finite_differences() {
        let v = vocab();
        let cfg = small_cfg();
        for seed in 0..3 {
            let mut s = ParamStore::new(seed);
            let enc = TextEncoder::new(&mut s, "t", &cfg, v.len()).unwrap();
            let head = s.add("head", 8, 1, Init::FanIn);
            let e1 = prepare_pair(&v, &cfg, "play bad boy dance", "bad romance [des] song");
            let e2 = prepare_single(&v, &cfg, "lady gaga");
            let r = grad_check(
                &mut s,
                |g| {
                    let out = enc.forward(g, &[&e1, &e2]);
                    let p = enc.pooled(g, &out);
                    let w = g.param(head);
                    let y = g.matmul(p, w);
                    let t = g.tanh(y);
                    g.sum(t)
                },
                1e-6,
                6,
                seed,
            );
            assert!(r.max_rel_err < 1e-4, "{} {}", r.worst_param, r.max_rel_err);
        }
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        assert_eq!(v.token(DES), DES_TOKEN);
        assert_eq!(v.id("[des]"), DES);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn utterance_span_detokenizes(words in proptest::collection::vec("[a-z]{1,6}", 1..10), ent in "[a-z ]{0,20}", i in 0usize..10, j in 0usize..10) {
            let v = vocab();
            let cfg = EncoderConfig { max_len: 48, ..small_cfg() };
            let utt = words.join("  ");
            let e = prepare_pair(&v, &cfg, &utt, &ent);
            prop_assert_eq!(e.n_utt, words.len());
            let (i, j) = (i.min(j) % words.len(), i.max(j) % words.len());
            let (i, j) = (i.min(j), i.max(j));
            let toks = tokenize(&utt);
            prop_assert_eq!(toks[i..=j].join(" "), words[i..=j].join(" "));
            prop_assert_eq!(e.ids[utt_position(i)], v.id(&words[i]));
        }

        #[test]
        fn single_has_n_plus_one_positions(text in "[a-z ]{0,40}") {
            let v = vocab();
            let e = prepare_single(&v, &EncoderConfig { max_len: 48, ..small_cfg() }, &text);
            prop_assert_eq!(e.len(), tokenize(&text).len() + 1);
            prop_assert_eq!(e.ids[0], SENTINEL);
        }
    }
}
