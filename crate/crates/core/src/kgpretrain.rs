//! Translational link-prediction pretraining of node and relation vectors.
//!
//! score(h, r, t) = -‖node(h) + rel(r) - node(t)‖₂, trained with a margin
//! ranking loss against head-or-tail corrupted triples. The resulting table
//! is frozen and fed to the graph encoders as constant input.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgstore::{EntityId, KnowledgeGraph, RelId, Triple};
use crate::nn::{sgd_step, Checkpoint, Graph, Init, ParamId, ParamStore, Tensor, Var};

pub const NODE_TENSOR: &str = "kg.node";
pub const REL_TENSOR: &str = "kg.rel";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub margin: f64,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            dim: 32,
            epochs: 50,
            margin: 1.0,
            lr: 0.01,
            batch: 64,
        }
    }
}

/// Frozen node and relation vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub nodes: Tensor,
    pub rels: Tensor,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.nodes.cols()
    }

    pub fn node(&self, id: EntityId) -> Result<&[f64]> {
        if id >= self.nodes.rows() {
            return Err(Error::UnknownEntity(id));
        }
        Ok(self.nodes.row(id))
    }

    pub fn rel(&self, id: RelId) -> Result<&[f64]> {
        if id >= self.rels.rows() {
            return Err(Error::UnknownRelation(id));
        }
        Ok(self.rels.row(id))
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(config_hash);
        ck.push(NODE_TENSOR, self.nodes.clone());
        ck.push(REL_TENSOR, self.rels.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |n: &str| {
            ck.get(n)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{n}`")))
        };
        let t = EmbeddingTable {
            nodes: get(NODE_TENSOR)?,
            rels: get(REL_TENSOR)?,
        };
        if t.nodes.cols() != t.rels.cols() {
            return Err(Error::Checkpoint("node and relation widths differ".into()));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        self.to_checkpoint(config_hash).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Rounds every value through f32, matching what a reload from disk yields.
    pub fn quantized(&self) -> Self {
        let q = |t: &Tensor| {
            Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|&v| v as f32 as f64).collect())
        };
        EmbeddingTable {
            nodes: q(&self.nodes),
            rels: q(&self.rels),
        }
    }
}

pub fn score_triple(tbl: &EmbeddingTable, h: EntityId, r: RelId, t: EntityId) -> Result<f64> {
    let (hv, rv, tv) = (tbl.node(h)?, tbl.rel(r)?, tbl.node(t)?);
    let sq: f64 = hv
        .iter()
        .zip(rv)
        .zip(tv)
        .map(|((a, b), c)| {
            let d = a + b - c;
            d * d
        })
        .sum();
    Ok(-sq.sqrt())
}

/// Trainable wrapper used during pretraining.
pub struct TransE {
    pub store: ParamStore,
    pub node: ParamId,
    pub rel: ParamId,
}

impl TransE {
    pub fn new(num_nodes: usize, num_rels: usize, dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new(seed);
        let bound = 6.0 / (dim as f64).sqrt();
        let node = store.add(NODE_TENSOR, num_nodes, dim, Init::Uniform(bound));
        let rel = store.add(REL_TENSOR, num_rels, dim, Init::Uniform(bound));
        let mut m = TransE { store, node, rel };
        normalize_rows(m.store.value_mut(rel));
        normalize_rows(m.store.value_mut(node));
        m
    }

    pub fn table(&self) -> EmbeddingTable {
        EmbeddingTable {
            nodes: self.store.value(self.node).clone(),
            rels: self.store.value(self.rel).clone(),
        }
    }

    /// Sum over pairs of max(0, margin - score(pos) + score(neg)).
    pub fn margin_loss(&self, g: &mut Graph, pos: &[Triple], neg: &[Triple], margin: f64) -> Var {
        assert_eq!(pos.len(), neg.len());
        let dist = |g: &mut Graph, ts: &[Triple]| {
            let h: Vec<usize> = ts.iter().map(|t| t.head).collect();
            let r: Vec<usize> = ts.iter().map(|t| t.rel).collect();
            let t: Vec<usize> = ts.iter().map(|t| t.tail).collect();
            let hv = g.embed(self.node, &h);
            let rv = g.embed(self.rel, &r);
            let tv = g.embed(self.node, &t);
            let hr = g.add(hv, rv);
            let resid = g.sub(hr, tv);
            g.row_norm(resid)
        };
        let dp = dist(g, pos);
        let dn = dist(g, neg);
        // margin - score(pos) + score(neg) = margin + d_pos - d_neg
        let diff = g.sub(dp, dn);
        let shifted = g.add_scalar(diff, margin);
        let hinge = g.relu(shifted);
        g.sum(hinge)
    }

    /// One SGD step on a batch; returns the batch loss.
    pub fn step(&mut self, pos: &[Triple], neg: &[Triple], margin: f64, lr: f64) -> Result<f64> {
        self.store.zero_grads();
        let loss = {
            let mut g = Graph::new(&self.store.params);
            let l = self.margin_loss(&mut g, pos, neg, margin);
            g.backward(l, &mut self.store.grads);
            g.value(l).item()
        };
        sgd_step(&mut self.store, lr)?;
        Ok(loss)
    }
}

fn normalize_rows(t: &mut Tensor) {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Corrupts head or tail (coin flip) with a uniformly drawn different entity.
pub fn corrupt(t: &Triple, num_nodes: usize, rng: &mut impl Rng) -> Triple {
    let mut out = *t;
    if num_nodes < 2 {
        return out;
    }
    let replace_head = rng.gen_bool(0.5);
    loop {
        let e = rng.gen_range(0..num_nodes);
        if replace_head && e != t.head {
            out.head = e;
            return out;
        }
        if !replace_head && e != t.tail {
            out.tail = e;
            return out;
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainLog {
    /// Mean per-triple loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains on `triples` (defaults to every KG triple) and returns the frozen table.
pub fn pretrain(kg: &KnowledgeGraph, cfg: &PretrainConfig, seed: u64) -> Result<(EmbeddingTable, PretrainLog)> {
    pretrain_on(kg.num_entities(), kg.num_relations(), kg.triples(), cfg, seed)
}

pub fn pretrain_on(
    num_nodes: usize,
    num_rels: usize,
    triples: &[Triple],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(EmbeddingTable, PretrainLog)> {
    if num_nodes == 0 {
        return Err(Error::NoEntities);
    }
    let mut model = TransE::new(num_nodes, num_rels.max(1), cfg.dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<Triple> = triples.to_vec();
    let mut log = PretrainLog { epoch_loss: Vec::new() };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let neg: Vec<Triple> = chunk.iter().map(|t| corrupt(t, num_nodes, &mut rng)).collect();
            total += model.step(chunk, &neg, cfg.margin, cfg.lr)?;
        }
        normalize_rows(model.store.value_mut(model.node));
        let mean = if order.is_empty() { 0.0 } else { total / order.len() as f64 };
        log::debug!("kg pretrain epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    Ok((model.table(), log))
}

/// Mean reciprocal rank of each true tail among `n_corrupt` random
/// replacement tails (brute-force ranking; ties count against the truth).
pub fn tail_mrr(tbl: &EmbeddingTable, triples: &[Triple], n_corrupt: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tbl.nodes.rows();
    let mut total = 0.0;
    for t in triples {
        let truth = score_triple(tbl, t.head, t.rel, t.tail).expect("valid triple");
        let mut rank = 1;
        for _ in 0..n_corrupt {
            let mut e = rng.gen_range(0..n);
            while e == t.tail && n > 1 {
                e = rng.gen_range(0..n);
            }
            if score_triple(tbl, t.head, t.rel, e).expect("valid id") >= truth {
                rank += 1;
            }
        }
        total += 1.0 / rank as f64;
    }
    total / triples.len().max(1) as f64
}
