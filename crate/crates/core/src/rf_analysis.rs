//! Analytic maximum receptive fields.
//!
//! Along each axis, a conv/pool node with dilated kernel extent `k*` and
//! stride `s` updates the receptive field and cumulative stride of its input as
//!
//! ```text
//! rf  = rf_prev + (k* - 1) · S_prev
//! S   = S_prev · s
//! ```
//!
//! Merge nodes (add/concat) take the largest predecessor RF and require the
//! predecessors to agree on `S`. All other nodes pass both through.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_graph::{topo_order, ArchGraph, Axis, Dim2, GraphError, NodeKind, Shape};

#[derive(Debug, Error)]
pub enum RfError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(
        "merge node '{node}' has predecessors with unequal cumulative {axis} strides {strides:?}"
    )]
    StrideMismatch {
        node: String,
        axis: &'static str,
        strides: Vec<usize>,
    },
    #[error("coordinate {coord} is outside the {shape} feature map of node '{node}'")]
    OutOfRange {
        node: String,
        coord: Dim2,
        shape: Dim2,
    },
}

/// Dilated kernel extent `d·(k-1)+1`.
pub fn effective_kernel(k: usize, d: usize) -> usize {
    d * (k - 1) + 1
}

/// Receptive-field data for one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRf {
    /// Max RF in input pixels, `[freq, time]`.
    pub rf: Dim2,
    pub cum_stride: Dim2,
    /// Input coordinate of the first pixel of output coordinate 0's window.
    /// Negative when the window starts inside the zero padding.
    pub window_offset: [i64; 2],
}

impl NodeRf {
    fn axis(&self, axis: Axis) -> AxisRf {
        let i = axis_index(axis);
        AxisRf {
            rf: self.rf.get(axis),
            stride: self.cum_stride.get(axis),
            offset: self.window_offset[i],
        }
    }
}

fn axis_index(axis: Axis) -> usize {
    match axis {
        Axis::Freq => 0,
        Axis::Time => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AxisRf {
    rf: usize,
    stride: usize,
    offset: i64,
}

/// Per-node RF data for a whole graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RfReport {
    pub nodes: BTreeMap<String, NodeRf>,
    #[serde(skip)]
    probe: Option<String>,
}

impl RfReport {
    pub fn get(&self, id: &str) -> Option<&NodeRf> {
        self.nodes.get(id)
    }

    pub fn probe_id(&self) -> Option<&str> {
        self.probe.as_deref()
    }

    /// The graph's Max RF.
    pub fn probe_rf(&self) -> Dim2 {
        let id = self
            .probe
            .as_deref()
            .expect("report built from a graph with a probe");
        self.nodes[id].rf
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rf report serializes")
    }
}

/// Max RF, cumulative stride and window offset for every node.
pub fn max_rf(graph: &ArchGraph) -> Result<RfReport, RfError> {
    let order = topo_order(graph)?;
    let mut nodes: BTreeMap<String, NodeRf> = BTreeMap::new();
    for id in &order {
        let node = graph.node(id).expect("ordered id exists");
        let mut per_axis = [AxisRf {
            rf: 1,
            stride: 1,
            offset: 0,
        }; 2];
        for axis in Axis::BOTH {
            let preds: Vec<AxisRf> = node
                .predecessors
                .iter()
                .map(|p| nodes[p].axis(axis))
                .collect();
            per_axis[axis_index(axis)] = match node.kind {
                NodeKind::Input => AxisRf {
                    rf: 1,
                    stride: 1,
                    offset: 0,
                },
                NodeKind::Conv | NodeKind::Maxpool => {
                    let prev = preds[0];
                    let w = node.window(axis);
                    AxisRf {
                        rf: prev.rf + (w.span() - 1) * prev.stride,
                        stride: prev.stride * w.stride,
                        offset: prev.offset - w.pad_before as i64 * prev.stride as i64,
                    }
                }
                NodeKind::Add | NodeKind::Concat => {
                    let stride = preds[0].stride;
                    if preds.iter().any(|p| p.stride != stride) {
                        return Err(RfError::StrideMismatch {
                            node: id.clone(),
                            axis: axis.name(),
                            strides: preds.iter().map(|p| p.stride).collect(),
                        });
                    }
                    AxisRf {
                        rf: preds
                            .iter()
                            .map(|p| p.rf)
                            .max()
                            .expect("merge has predecessors"),
                        stride,
                        offset: preds
                            .iter()
                            .map(|p| p.offset)
                            .min()
                            .expect("merge has predecessors"),
                    }
                }
                NodeKind::Relu
                | NodeKind::Affine
                | NodeKind::CoordConcat
                | NodeKind::OutputProbe => preds[0],
            };
        }
        let [f, t] = per_axis;
        nodes.insert(
            id.clone(),
            NodeRf {
                rf: Dim2::new(f.rf, t.rf),
                cum_stride: Dim2::new(f.stride, t.stride),
                window_offset: [f.offset, t.offset],
            },
        );
    }
    Ok(RfReport {
        nodes,
        probe: graph.probe_node().map(|n| n.id.clone()),
    })
}

/// Inclusive range of input pixel coordinates (zero-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub lo: i64,
    pub hi: i64,
}

impl Interval {
    pub fn new(lo: i64, hi: i64) -> Self {
        debug_assert!(lo <= hi);
        Interval { lo, hi }
    }

    pub fn width(&self) -> u64 {
        (self.hi - self.lo + 1) as u64
    }

    pub fn hull(self, other: Interval) -> Interval {
        Interval::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }

    pub fn contains(&self, x: i64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Intersection with `[0, len-1]`.
    pub fn clip(&self, len: usize) -> Option<Interval> {
        let lo = self.lo.max(0);
        let hi = self.hi.min(len as i64 - 1);
        (lo <= hi).then_some(Interval { lo, hi })
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// Input window of one output unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfWindow {
    pub freq: Interval,
    pub time: Interval,
    /// The windows intersected with the input extent.
    pub freq_clipped: Interval,
    pub time_clipped: Interval,
}

impl RfWindow {
    pub fn axis(&self, axis: Axis) -> Interval {
        match axis {
            Axis::Freq => self.freq,
            Axis::Time => self.time,
        }
    }

    pub fn axis_clipped(&self, axis: Axis) -> Interval {
        match axis {
            Axis::Freq => self.freq_clipped,
            Axis::Time => self.time_clipped,
        }
    }
}

/// Input window of unit `out_coord` of node `node_id`, found by pulling the
/// unit's interval back through every layer between the node and the input
/// and taking the hull where branches meet.
pub fn rf_window(graph: &ArchGraph, node_id: &str, out_coord: Dim2) -> Result<RfWindow, RfError> {
    let shapes = graph.shapes()?;
    rf_window_with_shapes(graph, &shapes, node_id, out_coord)
}

pub(crate) fn rf_window_with_shapes(
    graph: &ArchGraph,
    shapes: &BTreeMap<String, Shape>,
    node_id: &str,
    out_coord: Dim2,
) -> Result<RfWindow, RfError> {
    let shape = shapes
        .get(node_id)
        .ok_or_else(|| GraphError::UnknownNode(node_id.to_string()))?
        .spatial();
    if out_coord.freq >= shape.freq || out_coord.time >= shape.time {
        return Err(RfError::OutOfRange {
            node: node_id.to_string(),
            coord: out_coord,
            shape,
        });
    }
    let order = topo_order(graph)?;
    let input_id = graph
        .input_node()
        .ok_or_else(|| GraphError::Invalid(crate::arch_graph::validate(graph)))?
        .id
        .clone();

    let mut result = [Interval::new(0, 0); 2];
    for axis in Axis::BOTH {
        let c = out_coord.get(axis) as i64;
        let mut pending: BTreeMap<&str, Interval> = BTreeMap::new();
        pending.insert(node_id, Interval::new(c, c));
        for id in order.iter().rev() {
            let Some(iv) = pending.get(id.as_str()).copied() else {
                continue;
            };
            let node = graph.node(id).expect("ordered id exists");
            let pulled = if node.kind.is_windowed() {
                let w = node.window(axis);
                let s = w.stride as i64;
                let p = w.pad_before as i64;
                Interval::new(iv.lo * s - p, iv.hi * s - p + (w.span() as i64 - 1))
            } else {
                iv
            };
            for pred in &node.predecessors {
                pending
                    .entry(pred.as_str())
                    .and_modify(|e| *e = e.hull(pulled))
                    .or_insert(pulled);
            }
        }
        result[axis_index(axis)] = pending[input_id.as_str()];
    }
    let [freq, time] = result;
    let clip = |iv: Interval, len: usize| {
        iv.clip(len)
            .expect("window of an in-range unit touches the input")
    };
    Ok(RfWindow {
        freq,
        time,
        freq_clipped: clip(freq, graph.input_shape.freq),
        time_clipped: clip(time, graph.input_shape.time),
    })
}

/// Conv weights and biases (`k_f·k_t·C_in·C_out/g + C_out`) plus `2·C` per
/// affine node.
pub fn count_params(graph: &ArchGraph) -> u64 {
    graph
        .nodes()
        .map(|n| match n.kind {
            NodeKind::Conv => {
                let k = n.kernel_or_one();
                let ci = n.in_channels.unwrap_or(0) as u64;
                let co = n.out_channels.unwrap_or(0) as u64;
                let g = n.groups_or_one().max(1) as u64;
                (k.freq * k.time) as u64 * ci * co / g + co
            }
            NodeKind::Affine => 2 * n.in_channels.unwrap_or(0) as u64,
            _ => 0,
        })
        .sum()
}

/// Conv weight count only (no biases, no affine parameters), per node.
pub fn conv_weight_counts(graph: &ArchGraph) -> BTreeMap<String, u64> {
    graph
        .nodes()
        .filter(|n| n.kind == NodeKind::Conv)
        .map(|n| {
            let k = n.kernel_or_one();
            let ci = n.in_channels.unwrap_or(0) as u64;
            let co = n.out_channels.unwrap_or(0) as u64;
            (
                n.id.clone(),
                (k.freq * k.time) as u64 * ci * co / n.groups_or_one().max(1) as u64,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_graph::{InputShape, NodeSpec, Padding};

    fn graph(input: InputShape, nodes: Vec<NodeSpec>) -> ArchGraph {
        ArchGraph::validated(input, nodes).unwrap()
    }

    #[test]
    fn effective_kernel_values() {
        assert_eq!(effective_kernel(3, 1), 3);
        assert_eq!(effective_kernel(3, 2), 5);
        assert_eq!(effective_kernel(1, 7), 1);
    }

    #[test]
    fn single_strided_conv() {
        let g = graph(
            InputShape::new(1, 16, 16),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("c", "in", 1, 4, Dim2::square(5), Dim2::square(2)),
                NodeSpec::output_probe("p", "c"),
            ],
        );
        let r = max_rf(&g).unwrap();
        assert_eq!(r.probe_rf(), Dim2::square(5));
        assert_eq!(r.get("p").unwrap().cum_stride, Dim2::square(2));
        assert_eq!(r.get("p").unwrap().window_offset, [-2, -2]);
        assert_eq!(r.get("in").unwrap().rf, Dim2::ONE);
    }

    #[test]
    fn dilation_and_rectangular_kernels() {
        let g = graph(
            InputShape::new(1, 32, 32),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("a", "in", 1, 2, Dim2::new(3, 1), Dim2::ONE)
                    .with_dilation(Dim2::new(2, 3)),
                NodeSpec::conv("b", "a", 2, 2, Dim2::new(1, 3), Dim2::new(2, 1)),
                NodeSpec::conv("c", "b", 2, 2, Dim2::square(3), Dim2::ONE),
                NodeSpec::output_probe("p", "c"),
            ],
        );
        let r = max_rf(&g).unwrap();
        // freq: 1 + 4·1 = 5, +0 (k=1), +2·2 = 9. time: 1 + 0, +2, +2 = 5.
        assert_eq!(r.probe_rf(), Dim2::new(9, 5));
        assert_eq!(r.get("p").unwrap().cum_stride, Dim2::new(2, 1));
    }

    #[test]
    fn merge_takes_the_larger_branch() {
        let g = graph(
            InputShape::new(1, 16, 16),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("a", "in", 1, 2, Dim2::square(3), Dim2::ONE),
                NodeSpec::conv("b", "a", 2, 2, Dim2::square(3), Dim2::ONE),
                NodeSpec::add("sum", vec!["a".into(), "b".into()]),
                NodeSpec::output_probe("p", "sum"),
            ],
        );
        assert_eq!(max_rf(&g).unwrap().probe_rf(), Dim2::square(5));
    }

    #[test]
    fn merge_with_unequal_strides_is_an_error() {
        // Branches reach the same spatial size through different strides.
        let g = graph(
            InputShape::new(1, 8, 8),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("a", "in", 1, 1, Dim2::square(1), Dim2::square(2)),
                NodeSpec::conv("b", "in", 1, 1, Dim2::square(5), Dim2::ONE)
                    .with_padding(Padding::None),
                NodeSpec::concat("cat", vec!["a".into(), "b".into()]),
                NodeSpec::output_probe("p", "cat"),
            ],
        );
        assert!(matches!(max_rf(&g), Err(RfError::StrideMismatch { .. })));
    }

    #[test]
    fn window_of_same_padded_conv_at_origin() {
        let g = graph(
            InputShape::new(1, 8, 8),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("c", "in", 1, 1, Dim2::square(3), Dim2::ONE),
                NodeSpec::output_probe("p", "c"),
            ],
        );
        let w = rf_window(&g, "p", Dim2::new(0, 0)).unwrap();
        assert_eq!(w.freq, Interval::new(-1, 1));
        assert_eq!(w.time, Interval::new(-1, 1));
        assert_eq!(w.freq_clipped, Interval::new(0, 1));
    }

    #[test]
    fn window_of_two_stacked_convs_is_centered() {
        let g = graph(
            InputShape::new(1, 8, 8),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("a", "in", 1, 1, Dim2::square(3), Dim2::ONE),
                NodeSpec::conv("b", "a", 1, 1, Dim2::square(3), Dim2::ONE),
                NodeSpec::output_probe("p", "b"),
            ],
        );
        let w = rf_window(&g, "p", Dim2::new(4, 4)).unwrap();
        assert_eq!(w.freq, Interval::new(2, 6));
        assert_eq!(w.time.width(), 5);
        assert!(matches!(
            rf_window(&g, "p", Dim2::new(8, 0)),
            Err(RfError::OutOfRange { .. })
        ));
    }

    #[test]
    fn window_offset_matches_window_of_unit_zero() {
        let g = graph(
            InputShape::new(1, 32, 32),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("a", "in", 1, 1, Dim2::square(5), Dim2::square(2)),
                NodeSpec::maxpool("b", "a", Dim2::square(2), Dim2::square(2)),
                NodeSpec::conv("c", "b", 1, 1, Dim2::new(3, 1), Dim2::ONE),
                NodeSpec::output_probe("p", "c"),
            ],
        );
        let r = max_rf(&g).unwrap();
        let w = rf_window(&g, "p", Dim2::new(0, 0)).unwrap();
        let n = r.get("p").unwrap();
        assert_eq!([w.freq.lo, w.time.lo], n.window_offset);
        assert_eq!(w.freq.width() as usize, n.rf.freq);
        assert_eq!(w.time.width() as usize, n.rf.time);
    }

    #[test]
    fn parameter_counts() {
        let conv = |g| {
            graph(
                InputShape::new(16, 8, 8),
                vec![
                    NodeSpec::input("in"),
                    NodeSpec::conv("c", "in", 16, 32, Dim2::square(3), Dim2::ONE).with_groups(g),
                    NodeSpec::output_probe("p", "c"),
                ],
            )
        };
        assert_eq!(count_params(&conv(1)), 4640);
        assert_eq!(count_params(&conv(4)), 1184);

        let g = graph(
            InputShape::new(3, 4, 4),
            vec![
                NodeSpec::input("in"),
                NodeSpec::affine("bn", "in", 3),
                NodeSpec::output_probe("p", "bn"),
            ],
        );
        assert_eq!(count_params(&g), 6);
    }

    #[test]
    fn report_json_shape() {
        let g = graph(
            InputShape::new(1, 8, 8),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("c", "in", 1, 1, Dim2::square(3), Dim2::ONE),
                NodeSpec::output_probe("p", "c"),
            ],
        );
        let v: serde_json::Value = serde_json::from_str(&max_rf(&g).unwrap().to_json()).unwrap();
        assert_eq!(v["p"]["rf"], serde_json::json!([3, 3]));
        assert_eq!(v["p"]["cum_stride"], serde_json::json!([1, 1]));
        assert_eq!(v["p"]["window_offset"], serde_json::json!([-1, -1]));
    }
}
