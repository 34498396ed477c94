//! First layer: a bi-encoder scoring utterances against entities by dot
//! product, trained with a softmax over in-batch positives and hard
//! negatives, plus the exact-scan entity index it serves from.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, EntityFeatures};
use crate::error::{Error, Result};
use crate::graphenc::{Gat, GatConfig};
use crate::io::write_atomic;
use crate::kgstore::EntityId;
use crate::nn::{adam_step, Checkpoint, Graph, Linear, ParamStore, Tensor, TrainConfig, Var};
use crate::textenc::{prepare_single, EncoderConfig, Encoded, TextEncoder, TokenEmbeddings, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiEncoderConfig {
    pub encoder: EncoderConfig,
    pub gat: GatConfig,
    pub d_sim: usize,
    pub use_gat: bool,
    pub use_descriptions: bool,
    /// Utterance and entity encoders share token embedding tables.
    pub share_embeddings: bool,
    /// Start the entity tower as a copy of the utterance tower.
    pub tied_init: bool,
}

impl Default for BiEncoderConfig {
    fn default() -> Self {
        BiEncoderConfig {
            encoder: EncoderConfig::default(),
            gat: GatConfig::default(),
            d_sim: 64,
            use_gat: true,
            use_descriptions: true,
            share_embeddings: true,
            tied_init: true,
        }
    }
}

impl BiEncoderConfig {
    /// The miner's configuration: no descriptions, no graph.
    pub fn without_kg(&self) -> Self {
        BiEncoderConfig {
            use_gat: false,
            use_descriptions: false,
            ..self.clone()
        }
    }
}

// Entity encoder weights copy their utterance counterparts; graph rows of
// the entity projection start at zero so text alone decides initial scores.
fn tie_towers(store: &mut ParamStore) {
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in &names {
        let Some(rest) = n.strip_prefix("l1.ent.") else { continue };
        if let Some(src) = store.params.find(&format!("l1.utt.{rest}")) {
            let v = store.value(src).clone();
            let dst = store.params.find(n).expect("listed name");
            *store.value_mut(dst) = v;
        }
    }
    let (Some(src), Some(dst)) = (store.params.find("l1.utt_proj.w"), store.params.find("l1.ent_proj.w")) else {
        return;
    };
    let up = store.value(src).clone();
    let t = store.value_mut(dst);
    for r in 0..t.rows() {
        for c in 0..t.cols() {
            t.row_mut(r)[c] = if r < up.rows() { up.row(r)[c] } else { 0.0 };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSampleL1 {
    pub source: String,
    pub positive: String,
    pub hard_negatives: Vec<String>,
}

/// `E_utt(p) · E_ent(q)`.
pub fn sim(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("sim of {}-dim and {}-dim vectors", p.len(), q.len())));
    }
    Ok(p.iter().zip(q).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Debug)]
pub struct BiEncoder {
    pub cfg: BiEncoderConfig,
    utt: TextEncoder,
    ent: TextEncoder,
    gat: Option<Gat>,
    utt_proj: Linear,
    ent_proj: Linear,
}

impl BiEncoder {
    /// `rel_table` is required when the config enables the graph encoder.
    pub fn new(store: &mut ParamStore, cfg: &BiEncoderConfig, vocab_size: usize, rel_table: Option<&Tensor>) -> Result<Self> {
        let h = cfg.encoder.hidden;
        let utt_emb = TokenEmbeddings::new(store, "l1.utt.emb", &cfg.encoder, vocab_size);
        let ent_emb = if cfg.share_embeddings {
            utt_emb
        } else {
            TokenEmbeddings::new(store, "l1.ent.emb", &cfg.encoder, vocab_size)
        };
        let utt = TextEncoder::with_embeddings(store, "l1.utt", &cfg.encoder, utt_emb)?;
        let ent = TextEncoder::with_embeddings(store, "l1.ent", &cfg.encoder, ent_emb)?;
        let gat = if cfg.use_gat {
            let rels = rel_table.ok_or_else(|| Error::Config("graph encoder enabled without a relation table".into()))?;
            Some(Gat::new(store, "l1.gat", &cfg.gat, rels)?)
        } else {
            None
        };
        let ent_in = h + if cfg.use_gat { cfg.gat.hidden } else { 0 };
        let net = BiEncoder {
            cfg: cfg.clone(),
            utt,
            ent,
            gat,
            utt_proj: Linear::new(store, "l1.utt_proj", h, cfg.d_sim, false),
            ent_proj: Linear::new(store, "l1.ent_proj", ent_in, cfg.d_sim, false),
        };
        if cfg.tied_init {
            tie_towers(store);
        }
        Ok(net)
    }

    pub fn prepare_utterance(&self, vocab: &Vocab, text: &str) -> Encoded {
        prepare_single(vocab, &self.cfg.encoder, text)
    }

    pub fn prepare_entity(&self, vocab: &Vocab, e: &EntityFeatures) -> Encoded {
        let text = if self.cfg.use_descriptions { &e.text } else { &e.surface };
        prepare_single(vocab, &self.cfg.encoder, text)
    }

    /// `batch × d_sim`
    pub fn utt_vectors(&self, g: &mut Graph, batch: &[&Encoded]) -> Var {
        let out = self.utt.forward(g, batch);
        let pooled = self.utt.pooled(g, &out);
        self.utt_proj.forward(g, pooled)
    }

    /// `entities × d_sim`; with `zero_gat` the graph half is replaced by zeros.
    pub fn entity_vectors(&self, g: &mut Graph, vocab: &Vocab, ents: &[&EntityFeatures], zero_gat: bool) -> Result<Var> {
        let encs: Vec<Encoded> = ents.iter().map(|e| self.prepare_entity(vocab, e)).collect();
        let refs: Vec<&Encoded> = encs.iter().collect();
        let out = self.ent.forward(g, &refs);
        let pooled = self.ent.pooled(g, &out);
        let feat = match &self.gat {
            Some(gat) => {
                let gv = if zero_gat {
                    g.constant(Tensor::zeros(ents.len(), gat.cfg.hidden))
                } else {
                    let graphs: Vec<&[_]> = ents.iter().map(|e| e.graphs.as_slice()).collect();
                    gat.encode_entities(g, &graphs)?
                };
                g.concat_cols(&[pooled, gv])
            }
            None => pooled,
        };
        Ok(self.ent_proj.forward(g, feat))
    }

    pub fn encode_utterance(&self, store: &ParamStore, vocab: &Vocab, text: &str) -> Vec<f64> {
        let e = self.prepare_utterance(vocab, text);
        let mut g = Graph::new(&store.params);
        let v = self.utt_vectors(&mut g, &[&e]);
        g.value(v).row(0).to_vec()
    }

    pub fn encode_entity(&self, store: &ParamStore, vocab: &Vocab, e: &EntityFeatures) -> Result<Vec<f64>> {
        let mut g = Graph::new(&store.params);
        let v = self.entity_vectors(&mut g, vocab, &[e], false)?;
        Ok(g.value(v).row(0).to_vec())
    }

    /// Same as [`encode_entity`](Self::encode_entity) with the graph vector forced to zero.
    pub fn encode_entity_without_gat(&self, store: &ParamStore, vocab: &Vocab, e: &EntityFeatures) -> Result<Vec<f64>> {
        let mut g = Graph::new(&store.params);
        let v = self.entity_vectors(&mut g, vocab, &[e], true)?;
        Ok(g.value(v).row(0).to_vec())
    }

    /// Mean NLL of each sample's positive over the batch's score set: all
    /// distinct positives and hard negatives. Unknown negatives are skipped;
    /// every positive must resolve.
    pub fn batch_loss(&self, g: &mut Graph, vocab: &Vocab, catalog: &Catalog, samples: &[&TrainSampleL1]) -> Result<Var> {
        let mut cols: Vec<usize> = Vec::new();
        let col_of = |entry: usize, cols: &mut Vec<usize>| match cols.iter().position(|&c| c == entry) {
            Some(p) => p,
            None => {
                cols.push(entry);
                cols.len() - 1
            }
        };
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            let entry = catalog
                .position(&s.positive)
                .ok_or_else(|| Error::Invalid(format!("positive `{}` not in catalog", s.positive)))?;
            targets.push(col_of(entry, &mut cols));
        }
        for s in samples {
            for n in &s.hard_negatives {
                if let Some(entry) = catalog.position(n) {
                    col_of(entry, &mut cols);
                }
            }
        }
        let encs: Vec<Encoded> = samples.iter().map(|s| self.prepare_utterance(vocab, &s.source)).collect();
        let refs: Vec<&Encoded> = encs.iter().collect();
        let u = self.utt_vectors(g, &refs);
        let ents: Vec<&EntityFeatures> = cols.iter().map(|&c| &catalog.entries()[c]).collect();
        let e = self.entity_vectors(g, vocab, &ents, false)?;
        let scores = g.matmul_nt(u, e);
        Ok(g.cross_entropy_rows(scores, &targets))
    }
}

/// A bi-encoder with its parameters and vocabulary.
pub struct L1Model {
    pub net: BiEncoder,
    pub store: ParamStore,
    pub vocab: Vocab,
}

impl L1Model {
    pub fn new(cfg: &BiEncoderConfig, vocab: Vocab, rel_table: Option<&Tensor>, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let net = BiEncoder::new(&mut store, cfg, vocab.len(), rel_table)?;
        Ok(L1Model { net, store, vocab })
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint::from_store(&self.store, config_hash)
    }

    pub fn load(cfg: &BiEncoderConfig, vocab: Vocab, rel_table: Option<&Tensor>, ck: &Checkpoint) -> Result<Self> {
        let mut m = L1Model::new(cfg, vocab, rel_table, 0)?;
        ck.load_into(&mut m.store)?;
        Ok(m)
    }

    pub fn encode_utterance(&self, text: &str) -> Vec<f64> {
        self.net.encode_utterance(&self.store, &self.vocab, text)
    }

    pub fn encode_entity(&self, e: &EntityFeatures) -> Result<Vec<f64>> {
        self.net.encode_entity(&self.store, &self.vocab, e)
    }

    pub fn loss(&self, catalog: &Catalog, samples: &[&TrainSampleL1]) -> Result<f64> {
        let mut g = Graph::new(&self.store.params);
        let l = self.net.batch_loss(&mut g, &self.vocab, catalog, samples)?;
        Ok(g.value(l).item())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub dropped: usize,
}

/// Shuffled mini-batch training with Adam; samples whose positive is not in
/// the catalog are dropped and counted.
pub fn train_l1(model: &mut L1Model, catalog: &Catalog, samples: &[TrainSampleL1], cfg: &TrainConfig, seed: u64) -> Result<TrainLog> {
    let usable: Vec<&TrainSampleL1> = samples.iter().filter(|s| catalog.get(&s.positive).is_some()).collect();
    let mut log = TrainLog {
        dropped: samples.len() - usable.len(),
        ..TrainLog::default()
    };
    if log.dropped > 0 {
        log::warn!("dropped {} l1 samples whose positive is not indexed", log.dropped);
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
            let loss = model.net.batch_loss(&mut g, &model.vocab, catalog, chunk)?;
            total += g.value(loss).item();
            g.backward(loss, &mut model.store.grads);
            drop(g);
            adam_step(&mut model.store, &adam, step)?;
            step += 1;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::info!("l1 epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexRow {
    pub surface: String,
    pub ids: Vec<EntityId>,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityIndex {
    pub d_sim: usize,
    pub checkpoint_hash: String,
    /// Unix seconds; excluded from determinism comparisons.
    pub built_at: u64,
    pub rows: Vec<IndexRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hit {
    pub surface: String,
    pub ids: Vec<EntityId>,
    pub score: f64,
}

const INDEX_MAGIC: &str = "kgcorrect-index 1";

/// Score descending, then surface ascending.
pub fn hit_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl EntityIndex {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Dot product with every row, accumulated in f64 in index order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.d_sim {
            return Err(Error::Dimension(format!("query has {} dims, index {}", query.len(), self.d_sim)));
        }
        Ok(self
            .rows
            .iter()
            .map(|r| r.vector.iter().zip(query).map(|(&v, q)| v as f64 * q).sum())
            .collect())
    }

    /// Exact top `k` (all rows when `k` exceeds the index).
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        let cmp = |&a: &usize, &b: &usize| hit_order((scores[a], &self.rows[a].surface), (scores[b], &self.rows[b].surface));
        let k = k.min(order.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Hit {
                surface: self.rows[i].surface.clone(),
                ids: self.rows[i].ids.clone(),
                score: scores[i],
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{INDEX_MAGIC}\nrows {}\nd_sim {}\ncheckpoint {}\nbuilt {}\ndata\n",
            self.rows.len(),
            self.d_sim,
            self.checkpoint_hash,
            self.built_at
        );
        let mut out = header.into_bytes();
        for r in &self.rows {
            out.extend_from_slice(&(r.surface.len() as u32).to_le_bytes());
            out.extend_from_slice(r.surface.as_bytes());
            out.extend_from_slice(&(r.ids.len() as u32).to_le_bytes());
            for &id in &r.ids {
                out.extend_from_slice(&(id as u64).to_le_bytes());
            }
            for &v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("index", d.to_string());
        let mut pos = 0;
        let mut line = || -> Result<String> {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated header"))?;
            let s = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not utf-8"))?.to_string();
            pos += end + 1;
            Ok(s)
        };
        if line()? != INDEX_MAGIC {
            return Err(bad("bad magic line"));
        }
        let mut field = |key: &str| -> Result<String> {
            let l = line()?;
            l.strip_prefix(&format!("{key} "))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected `{key}` line")))
        };
        let n: usize = field("rows")?.parse().map_err(|_| bad("bad row count"))?;
        let d_sim: usize = field("d_sim")?.parse().map_err(|_| bad("bad d_sim"))?;
        let checkpoint_hash = field("checkpoint")?;
        let built_at: u64 = field("built")?.parse().map_err(|_| bad("bad timestamp"))?;
        if line()? != "data" {
            return Err(bad("missing data line"));
        }
        let mut rest = &bytes[pos..];
        let mut take = |k: usize| -> Result<&[u8]> {
            if rest.len() < k {
                return Err(bad("truncated row data"));
            }
            let (a, b) = rest.split_at(k);
            rest = b;
            Ok(a)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32_at(take(4)?);
            let surface = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("surface is not utf-8"))?;
            let nid = u32_at(take(4)?);
            let ids = take(8 * nid)?
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
                .collect();
            let vector = take(4 * d_sim)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            rows.push(IndexRow { surface, ids, vector });
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after rows"));
        }
        Ok(EntityIndex {
            d_sim,
            checkpoint_hash,
            built_at,
            rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        EntityIndex::from_bytes(&bytes)
    }
}

/// Encodes every catalog entry (in catalog order) into a single-precision index.
pub fn build_index(model: &L1Model, catalog: &Catalog, checkpoint_hash: &str) -> Result<EntityIndex> {
    if catalog.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut rows = Vec::with_capacity(catalog.len());
    for chunk in catalog.entries().chunks(64) {
        let refs: Vec<&EntityFeatures> = chunk.iter().collect();
        let mut g = Graph::new(&model.store.params);
        let v = model.net.entity_vectors(&mut g, &model.vocab, &refs, false)?;
        let t = g.value(v);
        for (i, e) in chunk.iter().enumerate() {
            let vector: Vec<f32> = t.row(i).iter().map(|&x| x as f32).collect();
            if vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("non-finite vector for `{}`", e.surface)));
            }
            rows.push(IndexRow {
                surface: e.surface.clone(),
                ids: e.ids.clone(),
                vector,
            });
        }
    }
    let built_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    Ok(EntityIndex {
        d_sim: model.net.cfg.d_sim,
        checkpoint_hash: checkpoint_hash.to_string(),
        built_at,
        rows,
    })
}

/// Top-`k` surfaces for an utterance.
pub fn retrieve(model: &L1Model, index: &EntityIndex, utterance: &str, k: usize) -> Result<Vec<Hit>> {
    index.top_k(&model.encode_utterance(utterance), k)
}
