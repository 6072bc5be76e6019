//! On-disk dataset directories.
//!
//! ```text
//! <dir>/meta.json     {"name", "nodes", "features", "classes", "label_arity", "feature_format"}
//! <dir>/edges.tsv     <src>\t<dst>
//! <dir>/features.tsv  <node>\t<v_0>\t...\t<v_f-1>      (dense)
//!                     <node>\t<feature>\t<value>        (sparse)
//! <dir>/labels.tsv    <node>\t<class>                   (single)
//!                     <node>\t<c-character 0/1 string>  (multi)
//! ```
//!
//! Blank lines and lines starting with `#` are skipped. Nodes absent from
//! `labels.tsv` are unlabelled.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, LabelArity, RawDataset, RawLabels};
use crate::autodiff::CsrMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Dense,
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    name: String,
    nodes: usize,
    features: usize,
    classes: usize,
    label_arity: LabelArity,
    #[serde(default = "default_format")]
    feature_format: FeatureFormat,
}

fn default_format() -> FeatureFormat {
    FeatureFormat::Sparse
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    pub split_seed: u64,
    /// Divide each feature row by its L1 norm. Off by default: binary
    /// bag-of-words rows are exact in every fixed-point format.
    pub normalise_features: bool,
}

/// Published `(nodes, features, classes)` of well-known datasets, checked on load.
const KNOWN: &[(&str, usize, usize, usize)] = &[
    ("cora", 2708, 1433, 7),
    ("citeseer", 3327, 3703, 6),
    ("pubmed", 19717, 500, 3),
];

/// Reads `<root>/<name>` and preprocesses it into a [`Graph`].
pub fn load_dataset(root: &Path, name: &str, opts: &LoadOptions) -> Result<Graph> {
    let raw = read_raw_dataset(&root.join(name))?;
    if let Some(&(_, n, f, c)) = KNOWN.iter().find(|k| k.0 == name.to_ascii_lowercase()) {
        let got = (raw.num_nodes, raw.features.cols(), raw.num_classes);
        if got != (n, f, c) {
            return Err(Error::Schema(format!(
                "{name}: expected (nodes, features, classes) = {:?}, found {got:?}",
                (n, f, c)
            )));
        }
    }
    Graph::from_raw(&raw, opts)
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, s: Option<&str>, what: &str) -> Result<T> {
    let s = s.ok_or_else(|| Error::ingest(path, format!("line {line}: missing {what}")))?;
    s.parse()
        .map_err(|_| Error::ingest(path, format!("line {line}: cannot parse {what} '{s}'")))
}

fn check_node(path: &Path, line: usize, node: usize, n: usize) -> Result<()> {
    if node >= n {
        return Err(Error::ingest(path, format!("line {line}: node {node} out of range (n = {n})")));
    }
    Ok(())
}

/// Reads a dataset directory without preprocessing.
pub fn read_raw_dataset(dir: &Path) -> Result<RawDataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::ingest(&meta_path, e.to_string()))?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| Error::ingest(&meta_path, e.to_string()))?;
    let n = meta.nodes;

    let edge_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for (ln, l) in lines(&edge_path)? {
        let mut it = l.split_whitespace();
        let u: usize = field(&edge_path, ln, it.next(), "source")?;
        let v: usize = field(&edge_path, ln, it.next(), "target")?;
        check_node(&edge_path, ln, u, n)?;
        check_node(&edge_path, ln, v, n)?;
        edges.push((u, v));
    }

    let feat_path = dir.join("features.tsv");
    let mut triples = Vec::new();
    for (ln, l) in lines(&feat_path)? {
        let mut it = l.split_whitespace();
        let node: usize = field(&feat_path, ln, it.next(), "node")?;
        check_node(&feat_path, ln, node, n)?;
        match meta.feature_format {
            FeatureFormat::Sparse => {
                let j: usize = field(&feat_path, ln, it.next(), "feature index")?;
                let v: f64 = field(&feat_path, ln, it.next(), "value")?;
                if j >= meta.features {
                    return Err(Error::ingest(&feat_path, format!("line {ln}: feature {j} out of range")));
                }
                triples.push((node, j, v));
            }
            FeatureFormat::Dense => {
                let values: Vec<&str> = it.collect();
                if values.len() != meta.features {
                    return Err(Error::ingest(
                        &feat_path,
                        format!("line {ln}: {} values, expected {}", values.len(), meta.features),
                    ));
                }
                for (j, s) in values.into_iter().enumerate() {
                    let v: f64 = field(&feat_path, ln, Some(s), "value")?;
                    if v != 0.0 {
                        triples.push((node, j, v));
                    }
                }
            }
        }
    }
    if triples.iter().any(|t| !t.2.is_finite()) {
        return Err(Error::ingest(&feat_path, "non-finite feature value"));
    }
    let features = CsrMatrix::from_triples(n, meta.features, &triples)?;

    let label_path = dir.join("labels.tsv");
    let c = meta.classes;
    let labels = match meta.label_arity {
        LabelArity::Single => {
            let mut v = vec![None; n];
            for (ln, l) in lines(&label_path)? {
                let mut it = l.split_whitespace();
                let node: usize = field(&label_path, ln, it.next(), "node")?;
                check_node(&label_path, ln, node, n)?;
                let tok = it.next().unwrap_or("");
                if tok.len() > 1 && tok.len() == c && tok.chars().all(|ch| ch == '0' || ch == '1') {
                    return Err(Error::Schema(format!(
                        "{}: line {ln}: multi-hot label in a single-label dataset",
                        label_path.display()
                    )));
                }
                let class: usize = field(&label_path, ln, Some(tok), "class")?;
                if class >= c {
                    return Err(Error::Schema(format!(
                        "{}: line {ln}: class {class} >= {c}",
                        label_path.display()
                    )));
                }
                v[node] = Some(class);
            }
            RawLabels::Single(v)
        }
        LabelArity::Multi => {
            let mut v = vec![None; n];
            for (ln, l) in lines(&label_path)? {
                let mut it = l.split_whitespace();
                let node: usize = field(&label_path, ln, it.next(), "node")?;
                check_node(&label_path, ln, node, n)?;
                let bits = it.next().unwrap_or("");
                if bits.len() != c || !bits.chars().all(|ch| ch == '0' || ch == '1') {
                    return Err(Error::Schema(format!(
                        "{}: line {ln}: expected a {c}-character 0/1 string, found '{bits}'",
                        label_path.display()
                    )));
                }
                v[node] = Some(bits.chars().map(|ch| ch == '1').collect());
            }
            RawLabels::Multi(v)
        }
    };

    Ok(RawDataset {
        name: meta.name,
        num_nodes: n,
        num_classes: c,
        edges,
        features,
        labels,
    })
}

/// Writes a dataset directory (sparse feature format).
pub fn write_raw_dataset(raw: &RawDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        name: raw.name.clone(),
        nodes: raw.num_nodes,
        features: raw.features.cols(),
        classes: raw.num_classes,
        label_arity: raw.labels.arity(),
        feature_format: FeatureFormat::Sparse,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

    let mut w = BufWriter::new(fs::File::create(dir.join("edges.tsv"))?);
    for &(u, v) in &raw.edges {
        writeln!(w, "{u}\t{v}")?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join("features.tsv"))?);
    for i in 0..raw.num_nodes {
        let (cols, vals) = raw.features.row(i);
        for (j, v) in cols.iter().zip(vals) {
            writeln!(w, "{i}\t{j}\t{v}")?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join("labels.tsv"))?);
    match &raw.labels {
        RawLabels::Single(v) => {
            for (i, c) in v.iter().enumerate() {
                if let Some(c) = c {
                    writeln!(w, "{i}\t{c}")?;
                }
            }
        }
        RawLabels::Multi(v) => {
            for (i, bits) in v.iter().enumerate() {
                if let Some(bits) = bits {
                    let s: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
                    writeln!(w, "{i}\t{s}")?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Converts the LINQS citation release (`<name>.content`, `<name>.cites`) into
/// a dataset directory. Node ids are assigned in `.content` order, classes
/// in sorted label-name order; citations naming unknown papers are dropped.
/// Returns the converted dataset and the number of dropped citations.
pub fn convert_linqs(content: &Path, cites: &Path, name: &str, out_dir: &Path) -> Result<(RawDataset, usize)> {
    let content_lines = lines(content)?;
    let mut ids = BTreeMap::new();
    let mut rows = Vec::with_capacity(content_lines.len());
    let mut width = None;
    for (ln, l) in &content_lines {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(Error::ingest(content, format!("line {ln}: too few columns")));
        }
        let f = toks.len() - 2;
        if *width.get_or_insert(f) != f {
            return Err(Error::ingest(content, format!("line {ln}: {f} features, expected {}", width.unwrap())));
        }
        if ids.insert(toks[0].to_string(), rows.len()).is_some() {
            return Err(Error::ingest(content, format!("line {ln}: duplicate paper id {}", toks[0])));
        }
        let mut feats = Vec::new();
        for (j, s) in toks[1..=f].iter().enumerate() {
            let v: f64 = field(content, *ln, Some(s), "feature")?;
            if v != 0.0 {
                feats.push((j, v));
            }
        }
        rows.push((feats, toks[f + 1].to_string()));
    }
    let f = width.ok_or_else(|| Error::ingest(content, "no rows"))?;
    let class_names: Vec<String> = {
        let mut s: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        s.sort();
        s.dedup();
        s
    };
    let n = rows.len();
    let mut triples = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for (i, (feats, class)) in rows.iter().enumerate() {
        triples.extend(feats.iter().map(|&(j, v)| (i, j, v)));
        labels.push(Some(class_names.binary_search(class).expect("class collected above")));
    }
    let mut edges = Vec::new();
    let mut dropped = 0;
    for (ln, l) in lines(cites)? {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(Error::ingest(cites, format!("line {ln}: expected two paper ids")));
        }
        // LINQS lists <cited> <citing>; direction is irrelevant after symmetrisation.
        match (ids.get(toks[1]), ids.get(toks[0])) {
            (Some(&u), Some(&v)) => edges.push((u, v)),
            _ => dropped += 1,
        }
    }
    let raw = RawDataset {
        name: name.to_string(),
        num_nodes: n,
        num_classes: class_names.len(),
        edges,
        features: CsrMatrix::from_triples(n, f, &triples)?,
        labels: RawLabels::Single(labels),
    };
    write_raw_dataset(&raw, out_dir)?;
    Ok((raw, dropped))
}
