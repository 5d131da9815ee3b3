//! Heterogeneous graph data model and meta-path views.
//!
//! A [`HeteroGraph`] carries typed nodes, typed (relation-labelled) edges,
//! raw features and labels for a designated target node type, and a set of
//! meta-path definitions. Each meta-path induces a [`MetaPathView`]: a
//! binary symmetric adjacency over the target-type nodes (with self-loops)
//! plus the aligned feature matrix every encoder consumes.

mod io;
mod metapath;
mod sampling;
mod synthetic;

pub use io::{load_dataset, save_dataset};
pub use metapath::build_meta_path_view;
pub use sampling::{sample_pairs, PairSample};
pub use synthetic::{generate_synthetic, MetaPathSpec, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub src: String,
    pub dst: String,
}

/// Ordered relation sequence; must start and end at the target node type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaPath {
    pub name: String,
    pub relations: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct HeteroGraph {
    /// (type name, node count) in declaration order.
    pub node_types: Vec<(String, usize)>,
    pub target_type: String,
    pub relations: Vec<Relation>,
    /// (src id, relation index, dst id); ids are local to the endpoint types.
    pub edges: Vec<(usize, usize, usize)>,
    /// Raw features over target-type nodes, N x D_raw.
    pub raw_features: Matrix,
    /// Class index per target-type node, when labeled.
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub meta_paths: Vec<MetaPath>,
}

impl HeteroGraph {
    pub fn type_count(&self, name: &str) -> Option<usize> {
        self.node_types
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
    }

    pub fn target_count(&self) -> usize {
        self.type_count(&self.target_type).unwrap_or(0)
    }

    pub fn relation(&self, name: &str) -> Option<(usize, &Relation)> {
        self.relations
            .iter()
            .enumerate()
            .find(|(_, r)| r.name == name)
    }

    /// Check the structural invariants; called by every constructor path.
    pub fn validate(&self) -> Result<()> {
        if self.node_types.len() + self.relations.len() <= 2 {
            return Err(Error::Validation(format!(
                "not heterogeneous: {} node types + {} relation types must exceed 2",
                self.node_types.len(),
                self.relations.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &self.node_types {
            if !seen.insert(name.clone()) {
                return Err(Error::Validation(format!("duplicate node type {:?}", name)));
            }
        }
        let target = self.target_count();
        if self.type_count(&self.target_type).is_none() {
            return Err(Error::Validation(format!(
                "target type {:?} not declared",
                self.target_type
            )));
        }
        for rel in &self.relations {
            if self.type_count(&rel.src).is_none() || self.type_count(&rel.dst).is_none() {
                return Err(Error::Validation(format!(
                    "relation {:?} references undeclared node types",
                    rel.name
                )));
            }
        }
        for (i, &(src, rel, dst)) in self.edges.iter().enumerate() {
            let r = self.relations.get(rel).ok_or_else(|| {
                Error::Validation(format!("edge {} references unknown relation index {}", i, rel))
            })?;
            let (sc, dc) = (
                self.type_count(&r.src).unwrap_or(0),
                self.type_count(&r.dst).unwrap_or(0),
            );
            if src >= sc || dst >= dc {
                return Err(Error::Validation(format!(
                    "edge {} ({} -[{}]-> {}) out of range: {} has {} nodes, {} has {} nodes",
                    i, src, r.name, dst, r.src, sc, r.dst, dc
                )));
            }
        }
        if self.raw_features.rows() != target {
            return Err(Error::Validation(format!(
                "features cover {} rows but target type {:?} has {} nodes",
                self.raw_features.rows(),
                self.target_type,
                target
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != target {
                return Err(Error::Validation(format!(
                    "labels cover {} nodes but target type has {}",
                    labels.len(),
                    target
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::Validation(format!(
                    "label {} out of range for {} classes",
                    bad, self.num_classes
                )));
            }
        }
        for mp in &self.meta_paths {
            self.validate_meta_path(mp)?;
        }
        Ok(())
    }

    /// A meta-path must be nonempty, chain type-compatibly, and start and
    /// end at the target type.
    pub fn validate_meta_path(&self, mp: &MetaPath) -> Result<()> {
        if mp.relations.is_empty() {
            return Err(Error::MetaPath(format!("{:?} has no relations", mp.name)));
        }
        let mut cur = self.target_type.clone();
        for (i, rname) in mp.relations.iter().enumerate() {
            let (_, rel) = self.relation(rname).ok_or_else(|| {
                Error::MetaPath(format!("{:?} uses undeclared relation {:?}", mp.name, rname))
            })?;
            if rel.src != cur {
                return Err(Error::MetaPath(format!(
                    "{:?} step {}: relation {:?} starts at {:?} but the path is at {:?}",
                    mp.name, i, rname, rel.src, cur
                )));
            }
            cur = rel.dst.clone();
        }
        if cur != self.target_type {
            return Err(Error::MetaPath(format!(
                "{:?} ends at {:?}, must end at target type {:?}",
                mp.name, cur, self.target_type
            )));
        }
        Ok(())
    }
}

/// One meta-path's induced structure over the target nodes.
#[derive(Clone, Debug)]
pub struct MetaPathView {
    pub meta_path: MetaPath,
    /// Binary, symmetric, unit diagonal.
    pub adjacency: Matrix,
    /// Sorted neighbor ids per node, consistent with `adjacency`.
    pub neighbors: Vec<Vec<usize>>,
    /// Aligned features, N x F.
    pub features: Matrix,
}

impl MetaPathView {
    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    /// Off-diagonal edge count, each undirected edge counted once.
    pub fn edge_count(&self) -> usize {
        let mut n = 0;
        for (a, nbrs) in self.neighbors.iter().enumerate() {
            n += nbrs.iter().filter(|&&b| b > a).count();
        }
        n
    }

    pub fn attach_features(&mut self, features: Matrix) -> Result<()> {
        if features.rows() != self.node_count() {
            return Err(Error::ShapeMismatch {
                op: "attach_features",
                detail: format!(
                    "{} feature rows for {} nodes",
                    features.rows(),
                    self.node_count()
                ),
            });
        }
        self.features = features;
        Ok(())
    }
}

#[cfg(test)]
pub(crate) fn tiny_graph() -> HeteroGraph {
    // Papers 0..2, authors 0..1; papers 0,1 share author 0; paper 2 has author 1.
    let relations = vec![
        Relation {
            name: "pa".into(),
            src: "paper".into(),
            dst: "author".into(),
        },
        Relation {
            name: "ap".into(),
            src: "author".into(),
            dst: "paper".into(),
        },
    ];
    let edges = vec![
        (0, 0, 0),
        (1, 0, 0),
        (2, 0, 1),
        (0, 1, 0),
        (0, 1, 1),
        (1, 1, 2),
    ];
    HeteroGraph {
        node_types: vec![("paper".into(), 3), ("author".into(), 2)],
        target_type: "paper".into(),
        relations,
        edges,
        raw_features: Matrix::zeros(3, 4),
        labels: Some(vec![0, 1, 0]),
        num_classes: 2,
        meta_paths: vec![MetaPath {
            name: "pap".into(),
            relations: vec!["pa".into(), "ap".into()],
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_graph_passes() {
        tiny_graph().validate().unwrap();
    }

    #[test]
    fn heterogeneity_condition_enforced() {
        let mut g = tiny_graph();
        g.node_types = vec![("paper".into(), 3)];
        g.relations = vec![Relation {
            name: "pp".into(),
            src: "paper".into(),
            dst: "paper".into(),
        }];
        g.edges.clear();
        g.meta_paths.clear();
        assert!(matches!(g.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn dangling_edge_rejected() {
        let mut g = tiny_graph();
        g.edges.push((9, 0, 0));
        assert!(g.validate().is_err());
    }

    #[test]
    fn label_coverage_checked() {
        let mut g = tiny_graph();
        g.labels = Some(vec![0, 1]);
        assert!(g.validate().is_err());
    }

    #[test]
    fn empty_meta_path_rejected() {
        let g = tiny_graph();
        let mp = MetaPath {
            name: "empty".into(),
            relations: vec![],
        };
        assert!(matches!(g.validate_meta_path(&mp), Err(Error::MetaPath(_))));
    }

    #[test]
    fn type_incompatible_meta_path_rejected() {
        let g = tiny_graph();
        let mp = MetaPath {
            name: "bad".into(),
            relations: vec!["ap".into(), "pa".into()],
        };
        assert!(g.validate_meta_path(&mp).is_err());
        // Ends away from the target type.
        let mp = MetaPath {
            name: "half".into(),
            relations: vec!["pa".into()],
        };
        assert!(g.validate_meta_path(&mp).is_err());
    }
}
