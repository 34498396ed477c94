//! Knowledge-graph ingestion, index filtering and one-hop subgraphs.
//!
//! Input files are line-delimited and tab-separated:
//!
//! * entities: `external_id \t surface \t description`, one line per
//!   (entity, description); a repeated external id appends a description.
//! * triples: `head_external_id \t relation_name \t tail_external_id`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub type EntityId = usize;
pub type RelId = usize;

/// Literal separator placed between an entity surface and its descriptions.
pub const DES_TOKEN: &str = "[des]";

pub const DEFAULT_MAX_NEIGHBORS: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: EntityId,
    pub external_id: String,
    pub surface: String,
    pub descriptions: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelId,
    pub tail: EntityId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Outgoing,
    Incoming,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Outgoing => Direction::Incoming,
            Direction::Incoming => Direction::Outgoing,
        }
    }
}

/// One adjacency record: `neighbor` is reached through `rel` in direction `dir`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub rel: RelId,
    pub dir: Direction,
    pub neighbor: EntityId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subgraph {
    pub center: EntityId,
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub surface: String,
    pub ids: Vec<EntityId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub entity_lines: usize,
    pub triple_lines: usize,
    pub malformed_entity_lines: Vec<usize>,
    pub malformed_triple_lines: Vec<usize>,
    pub duplicate_descriptions: usize,
    pub dropped_triples: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<String>,
    triples: Vec<Triple>,
    adjacency: Vec<Vec<Edge>>,
    by_surface: BTreeMap<String, Vec<EntityId>>,
    by_external: HashMap<String, EntityId>,
}

/// Reads the two record streams into a graph. Malformed lines are skipped
/// and logged with their line number; triples naming unknown entities are
/// dropped and counted.
pub fn ingest<E: BufRead, T: BufRead>(entities: E, triples: T) -> Result<(KnowledgeGraph, IngestReport)> {
    let mut report = IngestReport::default();
    let mut ents: Vec<Entity> = Vec::new();
    let mut by_external: HashMap<String, EntityId> = HashMap::new();

    for (lineno, line) in entities.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io("<entities>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.entity_lines += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = match fields.as_slice() {
            [ext, surface] => Some((ext.trim(), normalize(surface), String::new())),
            [ext, surface, desc] => Some((ext.trim(), normalize(surface), desc.trim().to_string())),
            _ => None,
        };
        let Some((ext, surface, desc)) = parsed.filter(|(ext, surface, desc)| {
            !ext.is_empty() && !surface.is_empty() && !surface.contains(DES_TOKEN) && !desc.contains(DES_TOKEN)
        }) else {
            log::warn!("entities line {lineno}: malformed record skipped");
            report.malformed_entity_lines.push(lineno);
            continue;
        };
        match by_external.get(ext) {
            Some(&id) => {
                let e = &mut ents[id];
                if e.surface != surface {
                    log::warn!(
                        "entities line {lineno}: external id {ext} re-declared with surface `{surface}`, keeping `{}`",
                        e.surface
                    );
                    report.malformed_entity_lines.push(lineno);
                    continue;
                }
                if desc.is_empty() {
                    continue;
                }
                if e.descriptions.contains(&desc) {
                    report.duplicate_descriptions += 1;
                } else {
                    e.descriptions.push(desc);
                }
            }
            None => {
                let id = ents.len();
                by_external.insert(ext.to_string(), id);
                ents.push(Entity {
                    id,
                    external_id: ext.to_string(),
                    surface,
                    descriptions: if desc.is_empty() { Vec::new() } else { vec![desc] },
                });
            }
        }
    }
    if ents.is_empty() {
        return Err(Error::NoEntities);
    }

    let mut relations: Vec<String> = Vec::new();
    let mut rel_ids: HashMap<String, RelId> = HashMap::new();
    let mut trips = Vec::new();
    for (lineno, line) in triples.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io("<triples>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.triple_lines += 1;
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [h, r, t] = fields.as_slice() else {
            log::warn!("triples line {lineno}: malformed record skipped");
            report.malformed_triple_lines.push(lineno);
            continue;
        };
        if r.is_empty() {
            log::warn!("triples line {lineno}: empty relation name");
            report.malformed_triple_lines.push(lineno);
            continue;
        }
        let (Some(&head), Some(&tail)) = (by_external.get(*h), by_external.get(*t)) else {
            report.dropped_triples += 1;
            continue;
        };
        let rel = *rel_ids.entry(r.to_string()).or_insert_with(|| {
            relations.push(r.to_string());
            relations.len() - 1
        });
        trips.push(Triple { head, rel, tail });
    }
    if report.dropped_triples > 0 {
        log::info!("dropped {} triples with unknown endpoints", report.dropped_triples);
    }

    Ok((KnowledgeGraph::build(ents, relations, trips, by_external), report))
}

pub fn ingest_files(entities: &Path, triples: &Path) -> Result<(KnowledgeGraph, IngestReport)> {
    let open = |p: &Path| {
        std::fs::File::open(p)
            .map(std::io::BufReader::new)
            .map_err(|e| Error::io(p, e))
    };
    ingest(open(entities)?, open(triples)?)
}

fn normalize(surface: &str) -> String {
    surface.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// A surface is kept in the retrieval index iff it is pure ASCII with no
/// digits and no punctuation.
pub fn is_index_surface(surface: &str) -> bool {
    !surface.trim().is_empty()
        && surface
            .bytes()
            .all(|b| b.is_ascii() && !b.is_ascii_digit() && !b.is_ascii_punctuation())
}

impl KnowledgeGraph {
    fn build(
        entities: Vec<Entity>,
        relations: Vec<String>,
        triples: Vec<Triple>,
        by_external: HashMap<String, EntityId>,
    ) -> Self {
        let mut adjacency = vec![Vec::new(); entities.len()];
        for t in &triples {
            adjacency[t.head].push(Edge {
                rel: t.rel,
                dir: Direction::Outgoing,
                neighbor: t.tail,
            });
            adjacency[t.tail].push(Edge {
                rel: t.rel,
                dir: Direction::Incoming,
                neighbor: t.head,
            });
        }
        let mut by_surface: BTreeMap<String, Vec<EntityId>> = BTreeMap::new();
        for e in &entities {
            by_surface.entry(e.surface.clone()).or_default().push(e.id);
        }
        KnowledgeGraph {
            entities,
            relations,
            triples,
            adjacency,
            by_surface,
            by_external,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity> {
        self.entities.get(id).ok_or(Error::UnknownEntity(id))
    }

    pub fn relation_name(&self, rel: RelId) -> Result<&str> {
        self.relations
            .get(rel)
            .map(String::as_str)
            .ok_or(Error::UnknownRelation(rel))
    }

    pub fn relation_id(&self, name: &str) -> Option<RelId> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn adjacency(&self, id: EntityId) -> Result<&[Edge]> {
        self.adjacency
            .get(id)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownEntity(id))
    }

    pub fn by_external_id(&self, ext: &str) -> Option<EntityId> {
        self.by_external.get(ext).copied()
    }

    /// All entity ids sharing `surface` (polysemy), in id order.
    pub fn lookup(&self, surface: &str) -> &[EntityId] {
        self.by_surface.get(surface).map_or(&[], Vec::as_slice)
    }

    pub fn surfaces(&self) -> impl Iterator<Item = (&str, &[EntityId])> {
        self.by_surface.iter().map(|(s, ids)| (s.as_str(), ids.as_slice()))
    }

    /// Descriptions of every entity sharing `surface`, id order then file order.
    pub fn descriptions_for(&self, surface: &str) -> Vec<&str> {
        self.lookup(surface)
            .iter()
            .flat_map(|&id| self.entities[id].descriptions.iter().map(String::as_str))
            .collect()
    }

    /// True if any entity named `a` shares a triple with any entity named `b`.
    pub fn surfaces_related(&self, a: &str, b: &str) -> bool {
        let targets: HashSet<EntityId> = self.lookup(b).iter().copied().collect();
        self.lookup(a)
            .iter()
            .any(|&id| self.adjacency[id].iter().any(|e| targets.contains(&e.neighbor)))
    }

    /// One entry per surface that survives [`is_index_surface`], grouping
    /// polysemic ids; entries are sorted by surface.
    pub fn filter_index_entities(&self) -> Vec<IndexEntry> {
        self.by_surface
            .iter()
            .filter(|(s, _)| is_index_surface(s))
            .map(|(s, ids)| IndexEntry {
                surface: s.clone(),
                ids: ids.clone(),
            })
            .collect()
    }

    /// The capped one-hop neighbourhood of `id`: adjacency sorted by
    /// (relation, neighbour, direction), first `max_neighbors` kept.
    pub fn one_hop(&self, id: EntityId, max_neighbors: usize) -> Result<Subgraph> {
        let adj = self.adjacency(id)?;
        let mut edges = adj.to_vec();
        edges.sort_by_key(|e| (e.rel, e.neighbor, e.dir));
        edges.truncate(max_neighbors);
        Ok(Subgraph { center: id, edges })
    }

    /// Writes the graph back out in the ingest format.
    pub fn write_tsv(&self, entities: &Path, triples: &Path) -> Result<()> {
        let mut ebuf = String::new();
        for e in &self.entities {
            if e.descriptions.is_empty() {
                ebuf.push_str(&format!("{}\t{}\t\n", e.external_id, e.surface));
            }
            for d in &e.descriptions {
                ebuf.push_str(&format!("{}\t{}\t{}\n", e.external_id, e.surface, d));
            }
        }
        let mut tbuf = String::new();
        for t in &self.triples {
            tbuf.push_str(&format!(
                "{}\t{}\t{}\n",
                self.entities[t.head].external_id, self.relations[t.rel], self.entities[t.tail].external_id
            ));
        }
        write_atomic(entities, ebuf.as_bytes())?;
        write_atomic(triples, tbuf.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn kg(ents: &str, trips: &str) -> KnowledgeGraph {
        ingest(ents.as_bytes(), trips.as_bytes()).unwrap().0
    }

    #[test]
    fn polysemy_lookup_returns_all_ids() {
        let g = kg("Q1\tbad romance\tsong\nQ2\tbad romance\t2011 film\nQ3\tlady gaga\tsinger\n", "");
        assert_eq!(g.lookup("bad romance"), &[0, 1]);
        assert_eq!(g.descriptions_for("bad romance"), vec!["song", "2011 film"]);
    }

    #[test]
    fn empty_triples_give_empty_adjacency() {
        let g = kg("a\tx\t\nb\ty\t\n", "");
        for id in 0..g.num_entities() {
            assert!(g.adjacency(id).unwrap().is_empty());
        }
    }

    #[test]
    fn malformed_lines_are_skipped_and_numbered() {
        let (g, rep) = ingest(
            "a\tfoo\tbar\nbroken-line\nb\t\tdesc\nc\tbaz\twith [des] inside\nd\tqux\t\n".as_bytes(),
            "a\tr\td\na\tr\nzz\tr\ta\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(g.num_entities(), 2);
        assert_eq!(rep.malformed_entity_lines, vec![2, 3, 4]);
        assert_eq!(rep.malformed_triple_lines, vec![2]);
        assert_eq!(rep.dropped_triples, 1);
        assert_eq!(g.triples().len(), 1);
    }

    #[test]
    fn zero_entities_is_an_error() {
        assert!(matches!(ingest("bad\n".as_bytes(), "".as_bytes()), Err(Error::NoEntities)));
    }

    #[test]
    fn repeated_descriptions_dedupe() {
        let (g, rep) = ingest("a\tfoo\tsong\na\tfoo\tsong\na\tfoo\tsingle\n".as_bytes(), "".as_bytes()).unwrap();
        assert_eq!(g.entity(0).unwrap().descriptions, vec!["song", "single"]);
        assert_eq!(rep.duplicate_descriptions, 1);
    }

    #[test]
    fn index_filter_rules() {
        assert!(is_index_surface("bad romance"));
        assert!(!is_index_surface("50 cent"));
        assert!(!is_index_surface("café"));
        assert!(!is_index_surface("don't stop"));
        let g = kg("a\tbad romance\tsong\nb\t50 cent\trapper\nc\tcafé\tshop\n", "");
        let kept: Vec<_> = g.filter_index_entities().into_iter().map(|e| e.surface).collect();
        assert_eq!(kept, vec!["bad romance"]);
    }

    #[test]
    fn one_hop_cases() {
        let g = kg(
            "c\tcenter\t\nx\tx\t\ny\ty\t\nz\tz\t\nlone\tlone\t\n",
            "c\tr1\tz\nc\tr0\ty\nc\tr0\tx\n",
        );
        let lone = g.lookup("lone")[0];
        assert!(g.one_hop(lone, 32).unwrap().edges.is_empty());
        // r1 is interned first (id 0), r0 second (id 1).
        let sub = g.one_hop(0, 2).unwrap();
        assert_eq!(sub.edges.len(), 2);
        assert_eq!(sub.edges[0], Edge { rel: 0, dir: Direction::Outgoing, neighbor: 3 });
        assert_eq!(sub.edges[1], Edge { rel: 1, dir: Direction::Outgoing, neighbor: 1 });
        assert!(matches!(g.one_hop(99, 2), Err(Error::UnknownEntity(99))));
    }

    #[test]
    fn star_graph_matches_sort_oracle() {
        let mut ents = String::from("hub\thub\t\n");
        let mut trips = String::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for i in 0..50 {
            ents.push_str(&format!("n{i}\tnode {i}\t\n"));
            let r = rng.gen_range(0..5);
            if rng.gen_bool(0.5) {
                trips.push_str(&format!("hub\trel{r}\tn{i}\n"));
            } else {
                trips.push_str(&format!("n{i}\trel{r}\thub\n"));
            }
        }
        let g = kg(&ents, &trips);
        let sub = g.one_hop(0, 32).unwrap();
        assert_eq!(sub.edges.len(), 32);
        // Oracle: collect (rel, neighbor, dir) from the raw triples, sort, truncate.
        let mut oracle: Vec<(usize, usize, Direction)> = g
            .triples()
            .iter()
            .map(|t| {
                if t.head == 0 {
                    (t.rel, t.tail, Direction::Outgoing)
                } else {
                    (t.rel, t.head, Direction::Incoming)
                }
            })
            .collect();
        oracle.sort();
        oracle.truncate(32);
        let got: Vec<_> = sub.edges.iter().map(|e| (e.rel, e.neighbor, e.dir)).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn degree_sum_is_twice_triple_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let ents: String = (0..100).map(|i| format!("e{i}\tentity {i}\t\n")).collect();
        let trips: String = (0..300)
            .map(|_| {
                let h = rng.gen_range(0..100);
                let t = rng.gen_range(0..100);
                let r = rng.gen_range(0..6);
                format!("e{h}\tr{r}\te{t}\n")
            })
            .collect();
        let g = kg(&ents, &trips);
        let degree: usize = (0..100).map(|i| g.adjacency(i).unwrap().len()).sum();
        // Recount endpoints straight from the raw records.
        let recount = trips.lines().count() * 2;
        assert_eq!(degree, recount);
        assert_eq!(degree, 600);
    }

    #[test]
    fn ingest_is_idempotent() {
        let e = "a\tfoo\tsong\nb\tbar\tfilm\na\tfoo\tsingle\n";
        let t = "a\tr\tb\nb\ts\ta\n";
        assert_eq!(kg(e, t), kg(e, t));
    }

    #[test]
    fn tsv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = kg("a\tfoo\tsong\nb\tbar\t\na\tfoo\tsingle\n", "a\tr\tb\n");
        let (ep, tp) = (dir.path().join("e.tsv"), dir.path().join("t.tsv"));
        g.write_tsv(&ep, &tp).unwrap();
        assert_eq!(ingest_files(&ep, &tp).unwrap().0, g);
    }

    proptest! {
        #[test]
        fn every_triple_appears_in_both_one_hops(
            trips in proptest::collection::vec((0usize..12, 0usize..3, 0usize..12), 0..40)
        ) {
            let ents: String = (0..12).map(|i| format!("e{i}\tent {i}\t\n")).collect();
            let ts: String = trips.iter().map(|(h, r, t)| format!("e{h}\tr{r}\te{t}\n")).collect();
            let g = kg(&ents, &ts);
            let cap = 4;
            for t in g.triples() {
                let out = g.one_hop(t.head, cap).unwrap();
                let full_out = g.adjacency(t.head).unwrap().len();
                let want = Edge { rel: t.rel, dir: Direction::Outgoing, neighbor: t.tail };
                prop_assert!(out.edges.contains(&want) || full_out > cap);
                let inc = g.one_hop(t.tail, cap).unwrap();
                let full_in = g.adjacency(t.tail).unwrap().len();
                let want = Edge { rel: t.rel, dir: Direction::Incoming, neighbor: t.head };
                prop_assert!(inc.edges.contains(&want) || full_in > cap);
            }
        }

        #[test]
        fn filter_invariant_to_record_order(
            names in proptest::collection::vec("[a-c0-9 .é]{1,6}", 1..20),
            seed in 0u64..1000
        ) {
            use rand::seq::SliceRandom;
            let mut lines: Vec<String> = names
                .iter()
                .enumerate()
                .filter(|(_, n)| !n.trim().is_empty())
                .map(|(i, n)| format!("x{i}\t{n}\t\n"))
                .collect();
            prop_assume!(!lines.is_empty());
            let a = kg(&lines.concat(), "");
            lines.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = kg(&lines.concat(), "");
            let key = |g: &KnowledgeGraph| -> Vec<(String, Vec<String>)> {
                g.filter_index_entities()
                    .into_iter()
                    .map(|e| {
                        let mut ext: Vec<String> =
                            e.ids.iter().map(|&i| g.entity(i).unwrap().external_id.clone()).collect();
                        ext.sort();
                        (e.surface, ext)
                    })
                    .collect()
            };
            let ka = key(&a);
            prop_assert_eq!(&ka, &key(&b));
            for (s, _) in &ka {
                prop_assert!(!a.lookup(s).is_empty());
            }
        }
    }
}
