//! Connected subgraph samples and their text format.
//!
//! ```text
//! version 1
//! nodes <n>
//! node <id> category <c> points <k>
//! descriptor <11 floats>
//! <x> <y> <z>            (k lines)
//! ...
//! edges <m>
//! edge <src> <dst> <11 floats>
//! ...
//! anchor <id>
//! ```
//!
//! Floats are written with 17 significant digits so a read after a write
//! reproduces every value bit for bit.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::descriptor::{compute_descriptor, Point, SpatialDescriptor, DESCRIPTOR_DIM};
use super::edges::undirected_reach;
use super::geometry::EdgeGeometry;
use super::synth::SceneNode;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const SAMPLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEdge {
    pub src: u32,
    pub dst: u32,
    pub geometry: EdgeGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphSample {
    pub nodes: Vec<SceneNode>,
    pub edges: Vec<SampleEdge>,
    pub anchor: u32,
}

impl SubgraphSample {
    pub fn node_ids(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    /// Map from node id to row index.
    pub fn index(&self) -> HashMap<u32, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    pub fn node(&self, id: u32) -> Option<&SceneNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn anchor_row(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == self.anchor)
    }

    pub fn edge_pairs(&self) -> Vec<(u32, u32)> {
        self.edges.iter().map(|e| (e.src, e.dst)).collect()
    }

    pub fn is_connected(&self) -> bool {
        undirected_reach(&self.node_ids(), &self.edge_pairs()) == self.nodes.len()
    }

    /// Largest axis extent of the bounding box of all node points.
    pub fn scene_extent(&self) -> f64 {
        let pts: Vec<Point> = self.nodes.iter().flat_map(|n| n.points.iter().copied()).collect();
        compute_descriptor(&pts).map(|d| d.max_length).unwrap_or(0.0)
    }

    /// Checks every structural invariant of a training sample.
    pub fn validate(&self, k_min: usize) -> Result<()> {
        if self.nodes.len() < k_min.max(1) {
            return Err(Error::invalid(format!(
                "sample has {} nodes, needs at least {k_min}",
                self.nodes.len()
            )));
        }
        let ids: HashSet<u32> = self.nodes.iter().map(|n| n.id).collect();
        if ids.len() != self.nodes.len() {
            return Err(Error::invalid("duplicate node ids"));
        }
        if !ids.contains(&self.anchor) {
            return Err(Error::invalid(format!("anchor {} is not a node", self.anchor)));
        }
        let mut seen = HashSet::new();
        for e in &self.edges {
            if e.src == e.dst {
                return Err(Error::invalid(format!("self loop on {}", e.src)));
            }
            if !ids.contains(&e.src) || !ids.contains(&e.dst) {
                return Err(Error::invalid(format!("dangling edge {}->{}", e.src, e.dst)));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(Error::invalid(format!("duplicate edge {}->{}", e.src, e.dst)));
            }
        }
        let reached = undirected_reach(&self.node_ids(), &self.edge_pairs());
        if reached != self.nodes.len() {
            return Err(Error::Disconnected {
                reached,
                total: self.nodes.len(),
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f = |v: f64| format!("{v:.16e}");
        let _ = writeln!(s, "version {SAMPLE_VERSION}");
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for n in &self.nodes {
            let _ = writeln!(s, "node {} category {} points {}", n.id, n.category, n.points.len());
            let d: Vec<String> = n.descriptor.to_array().iter().map(|&v| f(v)).collect();
            let _ = writeln!(s, "descriptor {}", d.join(" "));
            for p in &n.points {
                let _ = writeln!(s, "{} {} {}", f(p[0]), f(p[1]), f(p[2]));
            }
        }
        let _ = writeln!(s, "edges {}", self.edges.len());
        for e in &self.edges {
            let r: Vec<String> = e.geometry.0.iter().map(|&v| f(v)).collect();
            let _ = writeln!(s, "edge {} {} {}", e.src, e.dst, r.join(" "));
        }
        let _ = writeln!(s, "anchor {}", self.anchor);
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut p = LineParser::new(text);
        p.keyword_value("version")
            .and_then(|v| {
                if v == SAMPLE_VERSION as usize {
                    Ok(())
                } else {
                    Err(p.err(format!("unsupported version {v}")))
                }
            })?;
        let n_nodes = p.keyword_value("nodes")?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let f = p.fields("node", 6)?;
            if f[2] != "category" || f[4] != "points" {
                return Err(p.err("expected `node <id> category <c> points <k>`"));
            }
            let id = p.int(&f[1], "node id")? as u32;
            let category = p.int(&f[3], "category")? as u32;
            let k = p.int(&f[5], "point count")?;
            let d = p.fields("descriptor", 1 + DESCRIPTOR_DIM)?;
            let mut arr = [0.0; DESCRIPTOR_DIM];
            for (a, s) in arr.iter_mut().zip(&d[1..]) {
                *a = p.float(s, "descriptor value")?;
            }
            let mut points = Vec::with_capacity(k);
            for _ in 0..k {
                let xyz = p.raw_fields(3)?;
                points.push([
                    p.float(&xyz[0], "x")?,
                    p.float(&xyz[1], "y")?,
                    p.float(&xyz[2], "z")?,
                ]);
            }
            nodes.push(SceneNode {
                id,
                category,
                points,
                descriptor: SpatialDescriptor::from_array(&arr),
            });
        }
        let n_edges = p.keyword_value("edges")?;
        let mut edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            let f = p.fields("edge", 3 + DESCRIPTOR_DIM)?;
            let src = p.int(&f[1], "edge source")? as u32;
            let dst = p.int(&f[2], "edge target")? as u32;
            let mut r = [0.0; DESCRIPTOR_DIM];
            for (a, s) in r.iter_mut().zip(&f[3..]) {
                *a = p.float(s, "edge geometry value")?;
            }
            edges.push(SampleEdge {
                src,
                dst,
                geometry: EdgeGeometry(r),
            });
        }
        let anchor = p.keyword_value("anchor")? as u32;
        Ok(SubgraphSample { nodes, edges, anchor })
    }
}

struct LineParser<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> LineParser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.err("unexpected end of file"))
            }
        }
    }

    fn raw_fields(&mut self, n: usize) -> Result<Vec<String>> {
        let l = self.next_line()?;
        let f: Vec<String> = l.split_whitespace().map(str::to_string).collect();
        if f.len() != n {
            return Err(self.err(format!("expected {n} fields, found {}", f.len())));
        }
        Ok(f)
    }

    fn fields(&mut self, keyword: &str, n: usize) -> Result<Vec<String>> {
        let f = self.raw_fields(n).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("`{keyword}` line: {msg}"),
            },
            other => other,
        })?;
        if f[0] != keyword {
            return Err(self.err(format!("expected `{keyword}`, found `{}`", f[0])));
        }
        Ok(f)
    }

    fn keyword_value(&mut self, keyword: &str) -> Result<usize> {
        let f = self.fields(keyword, 2)?;
        self.int(&f[1], keyword)
    }

    fn int(&self, s: &str, what: &str) -> Result<usize> {
        s.parse().map_err(|_| self.err(format!("bad {what} `{s}`")))
    }

    fn float(&self, s: &str, what: &str) -> Result<f64> {
        s.parse().map_err(|_| self.err(format!("bad {what} `{s}`")))
    }
}

/// Uniformly random node id of a sample.
pub fn select_anchor(sample: &SubgraphSample, seed: u64) -> Result<u32> {
    if sample.nodes.is_empty() {
        return Err(Error::invalid("cannot anchor an empty sample"));
    }
    let mut rng = SeededRng::new(seed);
    Ok(sample.nodes[rng.below(sample.nodes.len())].id)
}
