//! TSV ingestion and emission.
//!
//! `nodes.tsv`: header `node_id<TAB>features`, features comma-separated
//! decimal reals. `edges.tsv`: header `src<TAB>rel<TAB>dst`.
//! `labels.tsv` (optional): header `node_id<TAB>class`. UTF-8, LF line
//! endings, dot decimal separator.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Edge, Graph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn read_lines(dir: &Path, name: &str) -> Result<Vec<String>> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingFile(name.to_string()));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Load a graph directory. Node and relation ids are densely
/// re-indexed (file order for nodes, first appearance for relations);
/// the original string ids are retained.
pub fn load_graph(dir: &Path) -> Result<Graph> {
    let node_lines = read_lines(dir, "nodes.tsv")?;
    let edge_lines = read_lines(dir, "edges.tsv")?;

    if node_lines.is_empty() || node_lines[0] != "node_id\tfeatures" {
        return Err(parse_err("nodes.tsv", 1, "expected header 'node_id<TAB>features'"));
    }
    let mut node_names = Vec::new();
    let mut node_index: HashMap<String, u32> = HashMap::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in node_lines.iter().enumerate().skip(1) {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let (id, feats) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("nodes.tsv", lineno, "expected 2 tab-separated fields"))?;
        if node_index.contains_key(id) {
            return Err(parse_err("nodes.tsv", lineno, format!("duplicate node id '{id}'")));
        }
        let mut row = Vec::new();
        for piece in feats.split(',') {
            let v: f32 = piece.trim().parse().map_err(|_| {
                parse_err("nodes.tsv", lineno, format!("bad feature value '{piece}'"))
            })?;
            if !v.is_finite() {
                return Err(parse_err("nodes.tsv", lineno, "non-finite feature value"));
            }
            row.push(v);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(
                    "nodes.tsv",
                    lineno,
                    format!("feature width {} differs from {}", row.len(), w),
                ))
            }
            _ => {}
        }
        node_index.insert(id.to_string(), node_names.len() as u32);
        node_names.push(id.to_string());
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err("nodes.tsv", 1, "no node rows"));
    }
    let d_in = width.unwrap();
    let features = Tensor::new(rows.len(), d_in, rows.into_iter().flatten().collect());

    if edge_lines.is_empty() || edge_lines[0] != "src\trel\tdst" {
        return Err(parse_err("edges.tsv", 1, "expected header 'src<TAB>rel<TAB>dst'"));
    }
    let mut relation_names = Vec::new();
    let mut rel_index: HashMap<String, u32> = HashMap::new();
    let mut edges = Vec::new();
    for (i, line) in edge_lines.iter().enumerate().skip(1) {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(parse_err("edges.tsv", lineno, "expected 3 tab-separated fields"));
        }
        let src = *node_index
            .get(parts[0])
            .ok_or_else(|| parse_err("edges.tsv", lineno, format!("unknown node id '{}'", parts[0])))?;
        let dst = *node_index
            .get(parts[2])
            .ok_or_else(|| parse_err("edges.tsv", lineno, format!("unknown node id '{}'", parts[2])))?;
        if src == dst {
            return Err(parse_err("edges.tsv", lineno, "self-loops are not allowed"));
        }
        let rel = *rel_index.entry(parts[1].to_string()).or_insert_with(|| {
            relation_names.push(parts[1].to_string());
            (relation_names.len() - 1) as u32
        });
        edges.push(Edge { src, rel, dst });
    }

    let mut node_labels = vec![None; node_names.len()];
    let mut class_names = Vec::new();
    let mut class_index: HashMap<String, u32> = HashMap::new();
    if dir.join("labels.tsv").exists() {
        let label_lines = read_lines(dir, "labels.tsv")?;
        if label_lines.is_empty() || label_lines[0] != "node_id\tclass" {
            return Err(parse_err("labels.tsv", 1, "expected header 'node_id<TAB>class'"));
        }
        for (i, line) in label_lines.iter().enumerate().skip(1) {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let (id, class) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("labels.tsv", lineno, "expected 2 tab-separated fields"))?;
            let node = *node_index
                .get(id)
                .ok_or_else(|| parse_err("labels.tsv", lineno, format!("unknown node id '{id}'")))?;
            let cid = *class_index.entry(class.to_string()).or_insert_with(|| {
                class_names.push(class.to_string());
                (class_names.len() - 1) as u32
            });
            node_labels[node as usize] = Some(cid);
        }
    }

    let class_count = class_names.len();
    let relation_count = relation_names.len().max(1);
    if relation_names.is_empty() {
        relation_names.push("0".to_string());
    }
    Graph::build(
        features,
        edges,
        relation_count,
        node_labels,
        class_count,
        node_names,
        relation_names,
        class_names,
    )
}

/// Write a graph back to TSV files. `labels.tsv` is emitted only when
/// at least one node is labeled. Inverse of [`load_graph`] on
/// (features, edges, labels).
pub fn save_graph(g: &Graph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut nodes = String::from("node_id\tfeatures\n");
    for i in 0..g.node_count() {
        let feats: Vec<String> = g
            .feature_row(i as u32)
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        let _ = writeln!(nodes, "{}\t{}", g.node_name(i as u32), feats.join(","));
    }
    write_file(&dir.join("nodes.tsv"), &nodes)?;

    let mut edges = String::from("src\trel\tdst\n");
    for e in g.edges() {
        let _ = writeln!(
            edges,
            "{}\t{}\t{}",
            g.node_name(e.src),
            g.relation_names()[e.rel as usize],
            g.node_name(e.dst)
        );
    }
    write_file(&dir.join("edges.tsv"), &edges)?;

    if g.labeled_nodes().next().is_some() {
        let mut labels = String::from("node_id\tclass\n");
        for (node, class) in g.labeled_nodes() {
            let _ = writeln!(
                labels,
                "{}\t{}",
                g.node_name(node),
                g.class_names()[class as usize]
            );
        }
        write_file(&dir.join("labels.tsv"), &labels)?;
    }
    Ok(())
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}
