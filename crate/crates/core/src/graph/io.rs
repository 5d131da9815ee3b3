//! Dataset directory I/O.
//!
//! Layout:
//! - `manifest.json` — node type counts, target type, relations, meta-paths,
//!   class count.
//! - `edges.tsv` — `src_id<TAB>relation<TAB>dst_id`, ids 0-based and local
//!   to each node type, LF line endings.
//! - `features.csv` — row i holds the comma-separated features of target
//!   node i. Values are rendered with Rust's shortest round-trip formatting,
//!   so save → load reproduces features bit-exactly.
//! - `labels.tsv` (optional) — `node_id<TAB>class_index`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeteroGraph, MetaPath, Relation};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Serialize, Deserialize)]
struct Manifest {
    node_types: BTreeMap<String, usize>,
    target_type: String,
    relations: Vec<Relation>,
    meta_paths: BTreeMap<String, Vec<String>>,
    num_classes: usize,
}

pub fn load_dataset(dir: &Path) -> Result<HeteroGraph> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;

    let node_types: Vec<(String, usize)> = manifest
        .node_types
        .iter()
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let relations = manifest.relations;

    let rel_index: BTreeMap<&str, usize> = relations
        .iter()
        .enumerate()
        .map(|(i, r)| (r.name.as_str(), i))
        .collect();

    let edges_text = fs::read_to_string(dir.join("edges.tsv"))?;
    let mut edges = Vec::new();
    for (lineno, line) in edges_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (src, rel, dst) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(r), Some(d)) => (s, r, d),
            _ => {
                return Err(Error::Validation(format!(
                    "edges.tsv line {}: expected src<TAB>relation<TAB>dst",
                    lineno + 1
                )))
            }
        };
        let src: usize = src.parse().map_err(|_| {
            Error::Validation(format!("edges.tsv line {}: bad src id {:?}", lineno + 1, src))
        })?;
        let dst: usize = dst.parse().map_err(|_| {
            Error::Validation(format!("edges.tsv line {}: bad dst id {:?}", lineno + 1, dst))
        })?;
        let rel = *rel_index.get(rel).ok_or_else(|| {
            Error::Validation(format!(
                "edges.tsv line {}: unknown relation {:?}",
                lineno + 1,
                rel
            ))
        })?;
        let r = &relations[rel];
        let sc = manifest.node_types.get(&r.src).copied().unwrap_or(0);
        let dc = manifest.node_types.get(&r.dst).copied().unwrap_or(0);
        if src >= sc || dst >= dc {
            return Err(Error::Validation(format!(
                "edges.tsv line {}: edge {} -[{}]-> {} out of range ({} has {} nodes, {} has {})",
                lineno + 1,
                src,
                r.name,
                dst,
                r.src,
                sc,
                r.dst,
                dc
            )));
        }
        edges.push((src, rel, dst));
    }

    let features_text = fs::read_to_string(dir.join("features.csv"))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in features_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|_| {
            Error::Validation(format!("features.csv line {}: bad value", lineno + 1))
        })?);
    }
    let raw_features = Matrix::from_rows(&rows)?;

    let labels_path = dir.join("labels.tsv");
    let labels = if labels_path.exists() {
        let text = fs::read_to_string(&labels_path)?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (id, class) = match (parts.next(), parts.next()) {
                (Some(i), Some(c)) => (i, c),
                _ => {
                    return Err(Error::Validation(format!(
                        "labels.tsv line {}: expected node_id<TAB>class_index",
                        lineno + 1
                    )))
                }
            };
            let id: usize = id.parse().map_err(|_| {
                Error::Validation(format!("labels.tsv line {}: bad node id", lineno + 1))
            })?;
            let class: usize = class.parse().map_err(|_| {
                Error::Validation(format!("labels.tsv line {}: bad class index", lineno + 1))
            })?;
            pairs.push((id, class));
        }
        let n = raw_features.rows();
        let mut labels = vec![usize::MAX; n];
        for (id, class) in pairs {
            if id >= n {
                return Err(Error::Validation(format!(
                    "labels.tsv: node id {} out of range for {} target nodes",
                    id, n
                )));
            }
            labels[id] = class;
        }
        if let Some(missing) = labels.iter().position(|&l| l == usize::MAX) {
            return Err(Error::Validation(format!(
                "labels.tsv: node {} has no label",
                missing
            )));
        }
        Some(labels)
    } else {
        None
    };

    let meta_paths = manifest
        .meta_paths
        .iter()
        .map(|(name, rels)| MetaPath {
            name: name.clone(),
            relations: rels.clone(),
        })
        .collect();

    let g = HeteroGraph {
        node_types,
        target_type: manifest.target_type,
        relations,
        edges,
        raw_features,
        labels,
        num_classes: manifest.num_classes,
        meta_paths,
    };
    g.validate()?;
    Ok(g)
}

pub fn save_dataset(g: &HeteroGraph, dir: &Path) -> Result<()> {
    g.validate()?;
    fs::create_dir_all(dir)?;

    let manifest = Manifest {
        node_types: g.node_types.iter().cloned().collect(),
        target_type: g.target_type.clone(),
        relations: g.relations.clone(),
        meta_paths: g
            .meta_paths
            .iter()
            .map(|mp| (mp.name.clone(), mp.relations.clone()))
            .collect(),
        num_classes: g.num_classes,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut edges = String::new();
    for &(src, rel, dst) in &g.edges {
        edges.push_str(&format!("{}\t{}\t{}\n", src, g.relations[rel].name, dst));
    }
    fs::write(dir.join("edges.tsv"), edges)?;

    let mut features = String::new();
    for r in 0..g.raw_features.rows() {
        let row: Vec<String> = g.raw_features.row(r).iter().map(|v| format!("{}", v)).collect();
        features.push_str(&row.join(","));
        features.push('\n');
    }
    fs::write(dir.join("features.csv"), features)?;

    if let Some(labels) = &g.labels {
        let mut text = String::new();
        for (id, class) in labels.iter().enumerate() {
            text.push_str(&format!("{}\t{}\n", id, class));
        }
        fs::write(dir.join("labels.tsv"), text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tiny_graph;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = tiny_graph();
        // Awkward decimals to exercise round-trip rendering.
        g.raw_features = Matrix::from_vec(
            3,
            2,
            vec![0.1, -2.5e-7, 1.0 / 3.0, 7.25, -0.0, 9.999999999999998],
        )
        .unwrap();
        save_dataset(&g, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.edges.len(), g.edges.len());
        assert_eq!(loaded.raw_features, g.raw_features);
        assert_eq!(loaded.labels, g.labels);
        assert_eq!(loaded.num_classes, g.num_classes);
        let mut names: Vec<_> = g.meta_paths.iter().map(|m| m.name.clone()).collect();
        names.sort();
        let loaded_names: Vec<_> = loaded.meta_paths.iter().map(|m| m.name.clone()).collect();
        assert_eq!(loaded_names, names);
    }

    #[test]
    fn missing_file_reports_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io(_))));
    }

    #[test]
    fn dangling_edge_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let g = tiny_graph();
        save_dataset(&g, dir.path()).unwrap();
        // Append an edge whose id exceeds the author count.
        let mut edges = fs::read_to_string(dir.path().join("edges.tsv")).unwrap();
        edges.push_str("0\tpa\t99\n");
        fs::write(dir.path().join("edges.tsv"), edges).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("out of range"));
        assert!(err.to_string().contains("line 7"), "got: {}", err);
    }

    #[test]
    fn unknown_relation_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let g = tiny_graph();
        save_dataset(&g, dir.path()).unwrap();
        fs::write(dir.path().join("edges.tsv"), "0\tnope\t0\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
