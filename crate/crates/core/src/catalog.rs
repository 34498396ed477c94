//! Per-surface entity features shared by both model layers.

use std::collections::HashMap;

use crate::error::Result;
use crate::graphenc::GatInput;
use crate::kgpretrain::EmbeddingTable;
use crate::kgstore::{EntityId, IndexEntry, KnowledgeGraph};
use crate::textenc::build_entity_text;

#[derive(Clone, Debug, PartialEq)]
pub struct EntityFeatures {
    pub surface: String,
    pub ids: Vec<EntityId>,
    /// Surface plus every description, `[des]`-separated.
    pub text: String,
    /// One subgraph per KG id; empty when the surface has no KG node.
    pub graphs: Vec<GatInput>,
}

#[derive(Clone, Debug, Default)]
pub struct Catalog {
    entries: Vec<EntityFeatures>,
    by_surface: HashMap<String, usize>,
}

impl Catalog {
    /// Features for `entries`; subgraphs are built only when `tbl` is given.
    pub fn build(
        kg: &KnowledgeGraph,
        tbl: Option<&EmbeddingTable>,
        entries: &[IndexEntry],
        max_neighbors: usize,
    ) -> Result<Self> {
        let mut cat = Catalog::default();
        for e in entries {
            let descriptions: Vec<String> = kg.descriptions_for(&e.surface).into_iter().map(str::to_string).collect();
            let graphs = match tbl {
                Some(tbl) => e
                    .ids
                    .iter()
                    .map(|&id| GatInput::from_subgraph(&kg.one_hop(id, max_neighbors)?, tbl))
                    .collect::<Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            cat.push(EntityFeatures {
                surface: e.surface.clone(),
                ids: e.ids.clone(),
                text: build_entity_text(&e.surface, &descriptions),
                graphs,
            });
        }
        Ok(cat)
    }

    pub fn push(&mut self, f: EntityFeatures) {
        self.by_surface.insert(f.surface.clone(), self.entries.len());
        self.entries.push(f);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, surface: &str) -> Option<&EntityFeatures> {
        self.by_surface.get(surface).map(|&i| &self.entries[i])
    }

    pub fn position(&self, surface: &str) -> Option<usize> {
        self.by_surface.get(surface).copied()
    }

    pub fn entries(&self) -> &[EntityFeatures] {
        &self.entries
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.surface.as_str())
    }
}
