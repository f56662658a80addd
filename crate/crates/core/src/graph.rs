//! Typed graph view of a grid for the neural solver.
//!
//! Node sets: bus, generator, load, shunt. Edge sets: AC lines and
//! transformers between buses, plus one link edge from every generator, load
//! and shunt to its bus. Inactive buses and everything attached to them are
//! left out.
//!
//! Feature columns, in order:
//!
//! | set | columns |
//! |---|---|
//! | bus | `base_kv`, one-hot `bus_type` (PQ, PV, REF, INACTIVE), `vmin`, `vmax` |
//! | generator | `mbase`, `pg`, `pmin`, `pmax`, `qg`, `qmin`, `qmax`, `vg`, `cost_squared`, `cost_linear`, `cost_offset` |
//! | load | `pd`, `qd` |
//! | shunt | `bs`, `gs` |
//! | ac_line | `angmin`, `angmax`, `b_fr`, `b_to`, `br_r`, `br_x`, `rate_a`, `rate_b`, `rate_c` |
//! | transformer | the AC line columns, then `tap`, `shift` |
//! | links | none |

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BranchKind, BusType, Grid, OpfSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Bus,
    Generator,
    Load,
    Shunt,
}

impl NodeType {
    pub const ALL: [NodeType; 4] = [NodeType::Bus, NodeType::Generator, NodeType::Load, NodeType::Shunt];

    pub fn name(self) -> &'static str {
        match self {
            NodeType::Bus => "bus",
            NodeType::Generator => "generator",
            NodeType::Load => "load",
            NodeType::Shunt => "shunt",
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            NodeType::Bus => 7,
            NodeType::Generator => 11,
            NodeType::Load | NodeType::Shunt => 2,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeType {
    AcLine,
    Transformer,
    GenLink,
    LoadLink,
    ShuntLink,
}

impl EdgeType {
    pub const ALL: [EdgeType; 5] = [
        EdgeType::AcLine,
        EdgeType::Transformer,
        EdgeType::GenLink,
        EdgeType::LoadLink,
        EdgeType::ShuntLink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EdgeType::AcLine => "ac_line",
            EdgeType::Transformer => "transformer",
            EdgeType::GenLink => "gen_link",
            EdgeType::LoadLink => "load_link",
            EdgeType::ShuntLink => "shunt_link",
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            EdgeType::AcLine => 9,
            EdgeType::Transformer => 11,
            _ => 0,
        }
    }

    /// Node sets at the (source, destination) ends.
    pub fn endpoints(self) -> (NodeType, NodeType) {
        match self {
            EdgeType::AcLine | EdgeType::Transformer => (NodeType::Bus, NodeType::Bus),
            EdgeType::GenLink => (NodeType::Generator, NodeType::Bus),
            EdgeType::LoadLink => (NodeType::Load, NodeType::Bus),
            EdgeType::ShuntLink => (NodeType::Shunt, NodeType::Bus),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Column-wise mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    pub fn identity(dim: usize) -> Self {
        Moments {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit over the rows of `rows`. Columns with (near) zero spread get a
    /// standard deviation of one so they pass through centered.
    pub fn fit<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for row in rows {
            n += 1;
            for c in 0..dim {
                sum[c] += row[c];
                sq[c] += row[c] * row[c];
            }
        }
        if n == 0 {
            return Moments::identity(dim);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = (0..dim)
            .map(|c| {
                let var = (sq[c] / nf - mean[c] * mean[c]).max(0.0);
                let s = var.sqrt();
                if s > 1e-9 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Moments { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Scalar moments of each solution quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub va: (f64, f64),
    pub vm: (f64, f64),
    pub pg: (f64, f64),
    pub qg: (f64, f64),
    pub pf: (f64, f64),
    pub qf: (f64, f64),
    pub pt: (f64, f64),
    pub qt: (f64, f64),
}

impl TargetStats {
    pub fn identity() -> Self {
        TargetStats {
            va: (0.0, 1.0),
            vm: (0.0, 1.0),
            pg: (0.0, 1.0),
            qg: (0.0, 1.0),
            pf: (0.0, 1.0),
            qf: (0.0, 1.0),
            pt: (0.0, 1.0),
            qt: (0.0, 1.0),
        }
    }
}

/// Feature and target standardization, fitted once on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub nodes: Vec<Moments>,
    pub edges: Vec<Moments>,
    pub targets: TargetStats,
}

impl StandardizationStats {
    /// Zero mean, unit deviation everywhere.
    pub fn identity() -> Self {
        StandardizationStats {
            nodes: NodeType::ALL.iter().map(|t| Moments::identity(t.feature_dim())).collect(),
            edges: EdgeType::ALL.iter().map(|t| Moments::identity(t.feature_dim())).collect(),
            targets: TargetStats::identity(),
        }
    }

    /// Fit over grids and (where present) their solutions.
    pub fn fit<'a>(examples: impl IntoIterator<Item = (&'a Grid, Option<&'a OpfSolution>)>) -> Self {
        let mut node_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 4];
        let mut edge_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 5];
        let mut tv: Vec<Vec<f64>> = vec![Vec::new(); 8];
        for (grid, sol) in examples {
            let raw = RawFeatures::new(grid);
            for t in NodeType::ALL {
                node_rows[t.index()].extend(raw.nodes[t.index()].iter().cloned());
            }
            for t in EdgeType::ALL {
                edge_rows[t.index()].extend(raw.edges[t.index()].iter().cloned());
            }
            if let Some(s) = sol {
                let active: Vec<bool> = grid.buses.iter().map(|b| b.bus_type != BusType::Inactive).collect();
                tv[0].extend(s.va.iter().zip(&active).filter(|(_, a)| **a).map(|(v, _)| *v));
                tv[1].extend(s.vm.iter().zip(&active).filter(|(_, a)| **a).map(|(v, _)| *v));
                for (k, f) in [&s.pg, &s.qg, &s.pf, &s.qf, &s.pt, &s.qt].into_iter().enumerate() {
                    tv[k + 2].extend_from_slice(f);
                }
            }
        }
        let scalar = |v: &[f64]| {
            let m = Moments::fit(1, v.iter().map(std::slice::from_ref));
            (m.mean[0], m.std[0])
        };
        StandardizationStats {
            nodes: NodeType::ALL
                .iter()
                .map(|t| Moments::fit(t.feature_dim(), node_rows[t.index()].iter().map(|r| r.as_slice())))
                .collect(),
            edges: EdgeType::ALL
                .iter()
                .map(|t| Moments::fit(t.feature_dim(), edge_rows[t.index()].iter().map(|r| r.as_slice())))
                .collect(),
            targets: TargetStats {
                va: scalar(&tv[0]),
                vm: scalar(&tv[1]),
                pg: scalar(&tv[2]),
                qg: scalar(&tv[3]),
                pf: scalar(&tv[4]),
                qf: scalar(&tv[5]),
                pt: scalar(&tv[6]),
                qt: scalar(&tv[7]),
            },
        }
    }

    fn check(&self) -> Result<()> {
        let bad = self.nodes.len() != 4
            || self.edges.len() != 5
            || NodeType::ALL
                .iter()
                .any(|t| self.nodes[t.index()].dim() != t.feature_dim())
            || EdgeType::ALL
                .iter()
                .any(|t| self.edges[t.index()].dim() != t.feature_dim());
        if bad {
            return Err(Error::ShapeMismatch(
                "standardization statistics do not match the feature layout".into(),
            ));
        }
        Ok(())
    }
}

/// Unstandardized feature rows and the grid position behind every row.
struct RawFeatures {
    nodes: Vec<Vec<Vec<f64>>>,
    node_elements: Vec<Vec<usize>>,
    edges: Vec<Vec<Vec<f64>>>,
    edge_elements: Vec<Vec<usize>>,
    edge_src: Vec<Vec<usize>>,
    edge_dst: Vec<Vec<usize>>,
}

impl RawFeatures {
    /// Rows for the active part of `grid`. Elements with dangling bus
    /// references are skipped; `to_typed_graph` validates references first.
    fn new(grid: &Grid) -> Self {
        let mut r = RawFeatures {
            nodes: vec![Vec::new(); 4],
            node_elements: vec![Vec::new(); 4],
            edges: vec![Vec::new(); 5],
            edge_elements: vec![Vec::new(); 5],
            edge_src: vec![Vec::new(); 5],
            edge_dst: vec![Vec::new(); 5],
        };
        // Node row of each active bus, by bus id.
        let mut bus_row = std::collections::HashMap::new();
        for (i, b) in grid.buses.iter().enumerate() {
            if b.bus_type == BusType::Inactive {
                continue;
            }
            bus_row.insert(b.id, r.nodes[0].len());
            let mut one_hot = [0.0; 4];
            one_hot[b.bus_type.one_hot_index()] = 1.0;
            let mut row = vec![b.base_kv];
            row.extend_from_slice(&one_hot);
            row.extend_from_slice(&[b.vmin, b.vmax]);
            r.nodes[0].push(row);
            r.node_elements[0].push(i);
        }
        let attach = |r: &mut RawFeatures, nt: NodeType, et: EdgeType, k: usize, bus: usize, row: Vec<f64>| {
            if let Some(&b) = bus_row.get(&bus) {
                let node = r.nodes[nt.index()].len();
                r.nodes[nt.index()].push(row);
                r.node_elements[nt.index()].push(k);
                r.edges[et.index()].push(Vec::new());
                r.edge_elements[et.index()].push(k);
                r.edge_src[et.index()].push(node);
                r.edge_dst[et.index()].push(b);
            }
        };
        for (k, g) in grid.generators.iter().enumerate() {
            let row = vec![
                g.mbase,
                g.pg,
                g.pmin,
                g.pmax,
                g.qg,
                g.qmin,
                g.qmax,
                g.vg,
                g.cost_squared,
                g.cost_linear,
                g.cost_offset,
            ];
            attach(&mut r, NodeType::Generator, EdgeType::GenLink, k, g.bus, row);
        }
        for (k, l) in grid.loads.iter().enumerate() {
            attach(&mut r, NodeType::Load, EdgeType::LoadLink, k, l.bus, vec![l.pd, l.qd]);
        }
        for (k, s) in grid.shunts.iter().enumerate() {
            attach(&mut r, NodeType::Shunt, EdgeType::ShuntLink, k, s.bus, vec![s.bs, s.gs]);
        }
        for (k, br) in grid.branches.iter().enumerate() {
            let (Some(&f), Some(&t)) = (bus_row.get(&br.from_bus), bus_row.get(&br.to_bus)) else {
                continue;
            };
            let mut row = vec![
                br.angmin, br.angmax, br.b_fr, br.b_to, br.br_r, br.br_x, br.rate_a, br.rate_b, br.rate_c,
            ];
            let et = match br.kind {
                BranchKind::AcLine => EdgeType::AcLine,
                BranchKind::Transformer => {
                    row.extend_from_slice(&[br.tap, br.shift]);
                    EdgeType::Transformer
                }
            };
            r.edges[et.index()].push(row);
            r.edge_elements[et.index()].push(k);
            r.edge_src[et.index()].push(f);
            r.edge_dst[et.index()].push(t);
        }
        r
    }
}

/// Tensorized heterogeneous graph. Node and edge sets are indexed by
/// [`NodeType::index`] and [`EdgeType::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct TypedGraph {
    /// Standardized node features, one matrix per node set.
    pub node_features: Vec<Array2<f64>>,
    /// Grid position of the element behind each node row.
    pub node_elements: Vec<Vec<usize>>,
    /// Standardized edge features (zero columns for links).
    pub edge_features: Vec<Array2<f64>>,
    /// Grid position of the element behind each edge (branch position for
    /// lines and transformers, subnode element position for links).
    pub edge_elements: Vec<Vec<usize>>,
    /// Source and destination rows within the endpoint node sets.
    pub edge_src: Vec<Arc<Vec<usize>>>,
    pub edge_dst: Vec<Arc<Vec<usize>>>,
    /// Target moments of the statistics the graph was built with; the model
    /// uses them to map its angle output back to radians.
    pub targets: TargetStats,
}

impl TypedGraph {
    pub fn num_nodes(&self, t: NodeType) -> usize {
        self.node_elements[t.index()].len()
    }

    pub fn num_edges(&self, t: EdgeType) -> usize {
        self.edge_elements[t.index()].len()
    }

    /// Standardized feature `col` of node `row` in set `t`.
    pub fn node_feature(&self, t: NodeType, row: usize, col: usize) -> f64 {
        self.node_features[t.index()][[row, col]]
    }

    pub fn edge_feature(&self, t: EdgeType, row: usize, col: usize) -> f64 {
        self.edge_features[t.index()][[row, col]]
    }

    /// Disjoint union: node and edge sets are stacked, edge endpoints and
    /// element positions are offset per part.
    pub fn disjoint_union(parts: &[&TypedGraph]) -> (TypedGraph, Vec<GraphOffsets>) {
        let mut node_features = Vec::new();
        let mut node_elements = Vec::new();
        let mut edge_features = Vec::new();
        let mut edge_elements = Vec::new();
        let mut edge_src = Vec::new();
        let mut edge_dst = Vec::new();
        let mut offsets: Vec<GraphOffsets> = vec![GraphOffsets::default(); parts.len()];
        for t in NodeType::ALL {
            let views: Vec<_> = parts.iter().map(|p| p.node_features[t.index()].view()).collect();
            node_features.push(ndarray::concatenate(ndarray::Axis(0), &views).expect("node dims agree"));
            let mut el = Vec::new();
            for (p, part) in parts.iter().enumerate() {
                offsets[p].nodes[t.index()] = el.len();
                el.extend_from_slice(&part.node_elements[t.index()]);
            }
            node_elements.push(el);
        }
        for t in EdgeType::ALL {
            let (st, dt) = t.endpoints();
            let views: Vec<_> = parts.iter().map(|p| p.edge_features[t.index()].view()).collect();
            edge_features.push(ndarray::concatenate(ndarray::Axis(0), &views).expect("edge dims agree"));
            let (mut el, mut src, mut dst) = (Vec::new(), Vec::new(), Vec::new());
            for (p, part) in parts.iter().enumerate() {
                offsets[p].edges[t.index()] = el.len();
                el.extend_from_slice(&part.edge_elements[t.index()]);
                let so = offsets[p].nodes[st.index()];
                let d_o = offsets[p].nodes[dt.index()];
                src.extend(part.edge_src[t.index()].iter().map(|s| s + so));
                dst.extend(part.edge_dst[t.index()].iter().map(|d| d + d_o));
            }
            edge_elements.push(el);
            edge_src.push(Arc::new(src));
            edge_dst.push(Arc::new(dst));
        }
        (
            TypedGraph {
                node_features,
                node_elements,
                edge_features,
                edge_elements,
                edge_src,
                edge_dst,
                targets: parts.first().map(|p| p.targets.clone()).unwrap_or_else(TargetStats::identity),
            },
            offsets,
        )
    }
}

/// Where one part of a disjoint union starts in each node and edge set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphOffsets {
    pub nodes: [usize; 4],
    pub edges: [usize; 5],
}

fn standardize(rows: &[Vec<f64>], m: &Moments) -> Array2<f64> {
    let dim = m.dim();
    Array2::from_shape_fn((rows.len(), dim), |(r, c)| (rows[r][c] - m.mean[c]) / m.std[c])
}

/// Build the typed graph of `grid` with features standardized by `stats`.
pub fn to_typed_graph(grid: &Grid, stats: &StandardizationStats) -> Result<TypedGraph> {
    stats.check()?;
    grid.topology()?;
    let raw = RawFeatures::new(grid);
    Ok(TypedGraph {
        node_features: NodeType::ALL
            .iter()
            .map(|t| standardize(&raw.nodes[t.index()], &stats.nodes[t.index()]))
            .collect(),
        node_elements: raw.node_elements,
        edge_features: EdgeType::ALL
            .iter()
            .map(|t| standardize(&raw.edges[t.index()], &stats.edges[t.index()]))
            .collect(),
        edge_elements: raw.edge_elements,
        edge_src: raw.edge_src.into_iter().map(Arc::new).collect(),
        edge_dst: raw.edge_dst.into_iter().map(Arc::new).collect(),
        targets: stats.targets.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_case;
    use crate::cases;

    #[test]
    fn case14_counts() {
        let grid = parse_case(cases::CASE14).unwrap();
        let g = to_typed_graph(&grid, &StandardizationStats::identity()).unwrap();
        assert_eq!(g.num_nodes(NodeType::Bus), 14);
        assert_eq!(g.num_nodes(NodeType::Generator), 5);
        assert_eq!(g.num_nodes(NodeType::Load), 11);
        assert_eq!(g.num_nodes(NodeType::Shunt), 1);
        assert_eq!(g.num_edges(EdgeType::AcLine), 17);
        assert_eq!(g.num_edges(EdgeType::Transformer), 3);
        assert_eq!(g.num_edges(EdgeType::GenLink), 5);
        assert_eq!(g.num_edges(EdgeType::ShuntLink), 1);
    }

    #[test]
    fn identity_stats_pass_raw_features() {
        let grid = parse_case(cases::CASE9).unwrap();
        let g = to_typed_graph(&grid, &StandardizationStats::identity()).unwrap();
        assert_eq!(g.node_feature(NodeType::Bus, 0, 0), grid.buses[0].base_kv);
        assert_eq!(g.node_feature(NodeType::Load, 0, 0), grid.loads[0].pd);
        assert_eq!(g.edge_feature(EdgeType::AcLine, 0, 5), grid.branches[0].br_x);
    }

    #[test]
    fn zero_shunts_give_empty_sets() {
        let grid = parse_case(cases::CASE9).unwrap();
        assert!(grid.shunts.is_empty());
        let g = to_typed_graph(&grid, &StandardizationStats::identity()).unwrap();
        assert_eq!(g.num_nodes(NodeType::Shunt), 0);
        assert_eq!(g.num_edges(EdgeType::ShuntLink), 0);
        assert_eq!(g.node_features[NodeType::Shunt.index()].dim(), (0, 2));
    }

    #[test]
    fn mismatched_stats_are_rejected() {
        let grid = parse_case(cases::CASE9).unwrap();
        let mut stats = StandardizationStats::identity();
        stats.nodes[0] = Moments::identity(3);
        assert!(matches!(to_typed_graph(&grid, &stats), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn inactive_bus_is_excluded() {
        let mut grid = parse_case(cases::CASE9).unwrap();
        let last = grid.buses.len() - 1;
        grid.buses[last].bus_type = BusType::Inactive;
        let id = grid.buses[last].id;
        let g = to_typed_graph(&grid, &StandardizationStats::identity()).unwrap();
        assert_eq!(g.num_nodes(NodeType::Bus), grid.buses.len() - 1);
        let touching = grid
            .branches
            .iter()
            .filter(|b| b.from_bus == id || b.to_bus == id)
            .count();
        assert_eq!(
            g.num_edges(EdgeType::AcLine) + g.num_edges(EdgeType::Transformer),
            grid.branches.len() - touching
        );
    }

    #[test]
    fn union_offsets_endpoints() {
        let grid = parse_case(cases::CASE9).unwrap();
        let g = to_typed_graph(&grid, &StandardizationStats::identity()).unwrap();
        let (u, off) = TypedGraph::disjoint_union(&[&g, &g]);
        assert_eq!(u.num_nodes(NodeType::Bus), 18);
        assert_eq!(off[1].nodes[0], 9);
        let e = g.num_edges(EdgeType::AcLine);
        assert_eq!(u.edge_src[0][e], g.edge_src[0][0] + 9);
    }
}
