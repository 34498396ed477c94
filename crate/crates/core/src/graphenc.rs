//! Graph attention over one-hop subgraphs with relation composition.
//!
//! Each aggregation edge `j → i` carries a message `φ(h_r, h_j)`; attention
//! logits are `LeakyReLU(a_dstᵀ W h_i + a_srcᵀ W m_ij)` normalised over the
//! incoming edges of `i`, and the node update is `ELU(Σ α_ij W m_ij)`.
//! Relation rows are updated as `h_r' = h_r W_rel` between layers. Input node
//! and relation embeddings are constants, so pretrained tables never receive
//! gradient.
//!
//! Several subgraphs are encoded at once as a disjoint union.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgpretrain::EmbeddingTable;
use crate::kgstore::{Direction, RelId, Subgraph};
use crate::nn::{Graph, Init, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `h_j − h_r`
    Subtract,
    /// `h_j ⊙ h_r`
    Product,
    /// `h_j`, ignoring relations (plain GAT)
    NodeOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub slope: f64,
    pub phi: Composition,
    pub pooling: Pooling,
    /// Use the composed message (rather than raw `W h_j`) in the attention logit.
    pub attend_composed: bool,
    pub max_neighbors: usize,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            layers: 2,
            heads: 4,
            hidden: 64,
            slope: 0.2,
            phi: Composition::Subtract,
            pooling: Pooling::Mean,
            attend_composed: true,
            max_neighbors: crate::kgstore::DEFAULT_MAX_NEIGHBORS,
        }
    }
}

impl GatConfig {
    /// 4 layers, 8 heads, hidden 400.
    pub fn full_scale() -> Self {
        GatConfig {
            layers: 4,
            heads: 8,
            hidden: 400,
            ..GatConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "gat needs layers ≥ 1 and hidden {} divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Composition applied to plain vectors.
pub fn compose(phi: Composition, h_r: &[f64], h_j: &[f64]) -> Vec<f64> {
    match phi {
        Composition::Subtract => h_j.iter().zip(h_r).map(|(j, r)| j - r).collect(),
        Composition::Product => h_j.iter().zip(h_r).map(|(j, r)| j * r).collect(),
        Composition::NodeOnly => h_j.to_vec(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelSlot {
    /// Message travels against the stored triple (`i` is the head).
    Forward(RelId),
    /// Message travels along the triple (`j` is the head): learned inverse row.
    Inverse(RelId),
    SelfLoop,
}

/// Aggregation edge: `src` sends a message to `dst`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatEdge {
    pub src: usize,
    pub dst: usize,
    pub rel: RelSlot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatInput {
    /// Center first, then neighbours in subgraph order.
    pub node_vecs: Tensor,
    /// Fixed relation row per edge; zero for inverse and self-loop edges.
    pub rel_vecs: Tensor,
    pub edges: Vec<GatEdge>,
}

impl GatInput {
    /// Star subgraph with messages in both directions plus a self-loop per node.
    pub fn from_subgraph(sub: &Subgraph, tbl: &EmbeddingTable) -> Result<Self> {
        let mut ids = vec![sub.center];
        let local = |id: usize, ids: &mut Vec<usize>| match ids.iter().position(|&x| x == id) {
            Some(p) => p,
            None => {
                ids.push(id);
                ids.len() - 1
            }
        };
        let mut edges = Vec::with_capacity(2 * sub.edges.len() + 1 + sub.edges.len());
        for e in &sub.edges {
            tbl.rel(e.rel)?;
            let j = local(e.neighbor, &mut ids);
            let to_center = match e.dir {
                Direction::Outgoing => RelSlot::Forward(e.rel),
                Direction::Incoming => RelSlot::Inverse(e.rel),
            };
            let to_neighbor = match e.dir.flip() {
                Direction::Outgoing => RelSlot::Forward(e.rel),
                Direction::Incoming => RelSlot::Inverse(e.rel),
            };
            edges.push(GatEdge { src: j, dst: 0, rel: to_center });
            edges.push(GatEdge { src: 0, dst: j, rel: to_neighbor });
        }
        for n in 0..ids.len() {
            edges.push(GatEdge { src: n, dst: n, rel: RelSlot::SelfLoop });
        }
        let d = tbl.dim();
        let mut node_vecs = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            node_vecs.row_mut(r).copy_from_slice(tbl.node(id)?);
        }
        let rel_vecs = fixed_rel_rows(&edges, tbl)?;
        Ok(GatInput { node_vecs, rel_vecs, edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_vecs.rows()
    }
}

/// Fixed relation rows for an edge list.
pub fn fixed_rel_rows(edges: &[GatEdge], tbl: &EmbeddingTable) -> Result<Tensor> {
    let mut t = Tensor::zeros(edges.len(), tbl.dim());
    for (r, e) in edges.iter().enumerate() {
        if let RelSlot::Forward(rel) = e.rel {
            t.row_mut(r).copy_from_slice(tbl.rel(rel)?);
        }
    }
    Ok(t)
}

#[derive(Clone, Debug)]
pub struct GatLayer {
    pub w: ParamId,
    pub a_dst: ParamId,
    pub a_src: ParamId,
    pub w_rel: Option<ParamId>,
    pub heads: usize,
    pub head_dim: usize,
    pub last: bool,
}

#[derive(Clone, Debug)]
pub struct Gat {
    pub cfg: GatConfig,
    pub d_kg: usize,
    pub adapter: ParamId,
    pub inverse_rel: ParamId,
    pub layers: Vec<GatLayer>,
}

/// Combined edge bookkeeping for a batch of inputs.
struct Union {
    src: Vec<usize>,
    dst: Vec<usize>,
    inv_rows: Vec<usize>,
    inv_rels: Vec<usize>,
    self_rows: Vec<usize>,
    nodes: usize,
}

impl Gat {
    /// `rel_table` seeds the inverse relation rows with its negation.
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GatConfig, rel_table: &Tensor) -> Result<Self> {
        cfg.validate()?;
        let d_kg = rel_table.cols();
        let mut neg = rel_table.clone();
        neg.data_mut().iter_mut().for_each(|x| *x = -*x);
        let adapter = store.add(format!("{name}.adapter"), d_kg, cfg.hidden, Init::FanIn);
        let inverse_rel = store.add(format!("{name}.inverse_rel"), neg.rows(), d_kg, Init::Value(neg));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let last = l + 1 == cfg.layers;
            let head_dim = if last { cfg.hidden } else { cfg.hidden / cfg.heads };
            let width = head_dim * cfg.heads;
            let bound = 1.0 / (head_dim as f64).sqrt();
            layers.push(GatLayer {
                w: store.add(format!("{name}.layer{l}.w"), cfg.hidden, width, Init::FanIn),
                a_dst: store.add(format!("{name}.layer{l}.a_dst"), 1, width, Init::Uniform(bound)),
                a_src: store.add(format!("{name}.layer{l}.a_src"), 1, width, Init::Uniform(bound)),
                w_rel: (!last).then(|| store.add(format!("{name}.layer{l}.w_rel"), cfg.hidden, cfg.hidden, Init::FanIn)),
                heads: cfg.heads,
                head_dim,
                last,
            });
        }
        Ok(Gat {
            cfg: cfg.clone(),
            d_kg,
            adapter,
            inverse_rel,
            layers,
        })
    }

    fn union(&self, inputs: &[&GatInput]) -> Result<Union> {
        let mut u = Union {
            src: Vec::new(),
            dst: Vec::new(),
            inv_rows: Vec::new(),
            inv_rels: Vec::new(),
            self_rows: Vec::new(),
            nodes: 0,
        };
        for inp in inputs {
            let n = inp.num_nodes();
            if inp.node_vecs.cols() != self.d_kg || inp.rel_vecs.cols() != self.d_kg {
                return Err(Error::Dimension(format!(
                    "gat expects {}-dim inputs, got nodes {} rels {}",
                    self.d_kg,
                    inp.node_vecs.cols(),
                    inp.rel_vecs.cols()
                )));
            }
            if inp.rel_vecs.rows() != inp.edges.len() {
                return Err(Error::Dimension("one relation row per edge".into()));
            }
            for e in &inp.edges {
                if e.src >= n || e.dst >= n {
                    return Err(Error::Dimension(format!("edge {e:?} outside {n} nodes")));
                }
                let row = u.src.len();
                match e.rel {
                    RelSlot::Inverse(r) => {
                        u.inv_rows.push(row);
                        u.inv_rels.push(r);
                    }
                    RelSlot::SelfLoop => u.self_rows.push(row),
                    RelSlot::Forward(_) => {}
                }
                u.src.push(u.nodes + e.src);
                u.dst.push(u.nodes + e.dst);
            }
            u.nodes += n;
        }
        Ok(u)
    }

    /// Adapted node rows and per-edge relation rows of a batch.
    fn inputs(&self, g: &mut Graph, inputs: &[&GatInput], u: &Union) -> (Var, Var) {
        let rows = |t: fn(&GatInput) -> &Tensor| {
            let mut data = Vec::new();
            let mut n = 0;
            for i in inputs {
                data.extend_from_slice(t(i).data());
                n += t(i).rows();
            }
            Tensor::from_vec(n, self.d_kg, data)
        };
        let x = g.constant(rows(|i| &i.node_vecs));
        let mut r = g.constant(rows(|i| &i.rel_vecs));
        if !u.inv_rows.is_empty() {
            let inv = g.param(self.inverse_rel);
            let picked = g.gather_rows(inv, &u.inv_rels);
            let placed = g.scatter_add_rows(picked, &u.inv_rows, u.src.len());
            r = g.add(r, placed);
        }
        let adapter = g.param(self.adapter);
        (g.matmul(x, adapter), g.matmul(r, adapter))
    }

    fn message(&self, g: &mut Graph, x: Var, r: Var, u: &Union) -> Var {
        let xj = g.gather_rows(x, &u.src);
        match self.cfg.phi {
            Composition::Subtract => g.sub(xj, r),
            Composition::NodeOnly => xj,
            Composition::Product => {
                let mut ones = Tensor::zeros(u.src.len(), self.cfg.hidden);
                for &row in &u.self_rows {
                    ones.row_mut(row).fill(1.0);
                }
                let ones = g.constant(ones);
                let r1 = g.add(r, ones);
                g.mul(xj, r1)
            }
        }
    }

    /// One layer: returns (node output, relation output, α as edges × heads).
    fn layer(&self, g: &mut Graph, l: usize, x: Var, r: Var, u: &Union) -> (Var, Option<Var>, Var) {
        let p = &self.layers[l];
        let w = g.param(p.w);
        let m = self.message(g, x, r, u);
        let wm = g.matmul(m, w);
        let wx = g.matmul(x, w);
        let a_dst = g.param(p.a_dst);
        let a_src = g.param(p.a_src);
        let sd = g.mul_row(wx, a_dst);
        let e_dst = g.block_sum(sd, p.heads);
        let e_dst = g.gather_rows(e_dst, &u.dst);
        let src_feat = if self.cfg.attend_composed {
            wm
        } else {
            g.gather_rows(wx, &u.src)
        };
        let ss = g.mul_row(src_feat, a_src);
        let e_src = g.block_sum(ss, p.heads);
        let logits = g.add(e_dst, e_src);
        let logits = g.leaky_relu(logits, self.cfg.slope);
        let alpha = g.segment_softmax(logits, &u.dst);
        let weights = g.repeat_blocks(alpha, p.head_dim);
        let msg = g.mul(weights, wm);
        let agg = g.scatter_add_rows(msg, &u.dst, u.nodes);
        let out = if p.last {
            let avg = g.mean_blocks(agg, p.heads);
            g.elu(avg)
        } else {
            g.elu(agg)
        };
        let r_next = p.w_rel.map(|wr| {
            let wr = g.param(wr);
            g.matmul(r, wr)
        });
        (out, r_next, alpha)
    }

    /// Final node vectors of the union, `Σ nodes × hidden`.
    fn run(&self, g: &mut Graph, inputs: &[&GatInput], u: &Union) -> Var {
        let (mut x, mut r) = self.inputs(g, inputs, u);
        for l in 0..self.layers.len() {
            let (out, r_next, _) = self.layer(g, l, x, r, u);
            x = out;
            if let Some(rn) = r_next {
                r = rn;
            }
        }
        x
    }

    /// Mean-pooled subgraph vectors, `inputs.len() × hidden`.
    pub fn encode_batch(&self, g: &mut Graph, inputs: &[&GatInput]) -> Result<Var> {
        let u = self.union(inputs)?;
        let x = self.run(g, inputs, &u);
        let mut weights = Tensor::zeros(u.nodes, self.cfg.hidden);
        let mut owner = Vec::with_capacity(u.nodes);
        let mut row = 0;
        for (b, inp) in inputs.iter().enumerate() {
            let n = inp.num_nodes();
            for _ in 0..n {
                weights.row_mut(row).fill(1.0 / n as f64);
                owner.push(b);
                row += 1;
            }
        }
        let w = g.constant(weights);
        let scaled = g.mul(x, w);
        Ok(g.scatter_add_rows(scaled, &owner, inputs.len()))
    }

    /// One row per entity: the mean pooled vector over its subgraphs, or zeros
    /// when it has none.
    pub fn encode_entities(&self, g: &mut Graph, entities: &[&[GatInput]]) -> Result<Var> {
        let flat: Vec<&GatInput> = entities.iter().flat_map(|e| e.iter()).collect();
        if flat.is_empty() {
            return Ok(g.constant(Tensor::zeros(entities.len(), self.cfg.hidden)));
        }
        let pooled = self.encode_batch(g, &flat)?;
        if flat.len() == entities.len() {
            return Ok(pooled);
        }
        let mut weights = Tensor::zeros(flat.len(), self.cfg.hidden);
        let mut owner = Vec::with_capacity(flat.len());
        for (m, e) in entities.iter().enumerate() {
            for _ in e.iter() {
                weights.row_mut(owner.len()).fill(1.0 / e.len() as f64);
                owner.push(m);
            }
        }
        let w = g.constant(weights);
        let scaled = g.mul(pooled, w);
        Ok(g.scatter_add_rows(scaled, &owner, entities.len()))
    }

    /// Pooled vector of one subgraph.
    pub fn encode_subgraph(&self, store: &ParamStore, input: &GatInput) -> Result<Vec<f64>> {
        let mut g = Graph::new(&store.params);
        let v = self.encode_batch(&mut g, &[input])?;
        Ok(g.value(v).row(0).to_vec())
    }

    /// Final node vectors (center first) of one subgraph.
    pub fn node_outputs(&self, store: &ParamStore, input: &GatInput) -> Result<Tensor> {
        let u = self.union(&[input])?;
        let mut g = Graph::new(&store.params);
        let x = self.run(&mut g, &[input], &u);
        Ok(g.value(x).clone())
    }

    /// α (edges × heads) of layer `l`, evaluated on the layer's actual input.
    pub fn attention_coeffs(&self, store: &ParamStore, l: usize, input: &GatInput) -> Result<Tensor> {
        if l >= self.layers.len() {
            return Err(Error::Invalid(format!("gat has {} layers", self.layers.len())));
        }
        let u = self.union(&[input])?;
        let mut g = Graph::new(&store.params);
        let (mut x, mut r) = self.inputs(&mut g, &[input], &u);
        for k in 0..l {
            let (out, rn, _) = self.layer(&mut g, k, x, r, &u);
            x = out;
            if let Some(rn) = rn {
                r = rn;
            }
        }
        let (_, _, alpha) = self.layer(&mut g, l, x, r, &u);
        Ok(g.value(alpha).clone())
    }
}
