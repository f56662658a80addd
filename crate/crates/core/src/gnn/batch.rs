//! Mini-batches as disjoint unions of example graphs.

use crate::error::{Error, Result};
use crate::graph::{to_typed_graph, GraphOffsets, StandardizationStats, TargetStats, TypedGraph};
use crate::grid::{Grid, OpfSolution};

use super::physics::PhysicsConsts;

/// Stacked reference solution columns.
#[derive(Debug, Clone)]
pub struct Targets {
    pub va: Vec<f64>,
    pub vm: Vec<f64>,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub pf: Vec<f64>,
    pub qf: Vec<f64>,
    pub pt: Vec<f64>,
    pub qt: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub graph: TypedGraph,
    pub offsets: Vec<GraphOffsets>,
    pub consts: PhysicsConsts,
    pub targets: Option<Targets>,
    pub target_stats: TargetStats,
}

impl Batch {
    /// Build a batch from grids and optional reference solutions. Targets
    /// are kept only when every example has one.
    pub fn new(items: &[(&Grid, Option<&OpfSolution>)], stats: &StandardizationStats) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let graphs = items
            .iter()
            .map(|(g, _)| to_typed_graph(g, stats))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_graphs(items, &graphs.iter().collect::<Vec<_>>())
    }

    /// Like [`Batch::new`] with graphs that were already built.
    pub fn from_graphs(
        items: &[(&Grid, Option<&OpfSolution>)],
        graphs: &[&TypedGraph],
    ) -> Result<Self> {
        let grids: Vec<&Grid> = items.iter().map(|(g, _)| *g).collect();
        let consts = PhysicsConsts::new(&grids)?;
        let (graph, offsets) = TypedGraph::disjoint_union(graphs);
        let graph_targets = graph.targets.clone();
        let targets = if items.iter().all(|(_, s)| s.is_some()) {
            let mut t = Targets {
                va: Vec::new(),
                vm: Vec::new(),
                pg: Vec::new(),
                qg: Vec::new(),
                pf: Vec::new(),
                qf: Vec::new(),
                pt: Vec::new(),
                qt: Vec::new(),
            };
            for (grid, sol) in items {
                let s = sol.expect("checked above");
                s.check_shape(grid)?;
                t.va.extend_from_slice(&s.va);
                t.vm.extend_from_slice(&s.vm);
                t.pg.extend_from_slice(&s.pg);
                t.qg.extend_from_slice(&s.qg);
                t.pf.extend_from_slice(&s.pf);
                t.qf.extend_from_slice(&s.qf);
                t.pt.extend_from_slice(&s.pt);
                t.qt.extend_from_slice(&s.qt);
            }
            Some(t)
        } else {
            None
        };
        Ok(Batch {
            graph,
            offsets,
            consts,
            targets,
            target_stats: graph_targets,
        })
    }

    pub fn len(&self) -> usize {
        self.consts.n_examples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
