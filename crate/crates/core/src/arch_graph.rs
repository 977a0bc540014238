//! Architecture graphs: a DAG of layer nodes from a single `input` node to a
//! single `output_probe` node.
//!
//! Graphs are read from and written to a JSON document:
//!
//! ```json
//! {
//!   "input_shape": [1, 8, 8],
//!   "nodes": [ { "id": "in", "kind": "input", "predecessors": [] }, ... ],
//!   "version": 1
//! }
//! ```
//!
//! The canonical text form has sorted keys, 2-space indentation, LF line
//! endings, nodes in [`topo_order`], and every defaultable conv/pool field
//! written out explicitly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::damping::DampingSpec;

pub const FORMAT_VERSION: u64 = 1;

/// A (frequency, time) pair of positive integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Dim2 {
    pub freq: usize,
    pub time: usize,
}

impl Dim2 {
    pub const ONE: Dim2 = Dim2 { freq: 1, time: 1 };

    pub const fn new(freq: usize, time: usize) -> Self {
        Dim2 { freq, time }
    }

    pub const fn square(v: usize) -> Self {
        Dim2 { freq: v, time: v }
    }

    pub fn get(&self, axis: Axis) -> usize {
        match axis {
            Axis::Freq => self.freq,
            Axis::Time => self.time,
        }
    }
}

impl From<[usize; 2]> for Dim2 {
    fn from(v: [usize; 2]) -> Self {
        Dim2::new(v[0], v[1])
    }
}

impl From<Dim2> for [usize; 2] {
    fn from(d: Dim2) -> Self {
        [d.freq, d.time]
    }
}

impl fmt::Display for Dim2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} x {}", self.freq, self.time)
    }
}

/// Spatial axis selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Freq,
    Time,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::Freq, Axis::Time];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Freq => "freq",
            Axis::Time => "time",
        }
    }
}

/// Input tensor shape, serialized as `[C, F, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct InputShape {
    pub channels: usize,
    pub freq: usize,
    pub time: usize,
}

impl InputShape {
    pub const fn new(channels: usize, freq: usize, time: usize) -> Self {
        InputShape {
            channels,
            freq,
            time,
        }
    }

    pub fn spatial(&self) -> Dim2 {
        Dim2::new(self.freq, self.time)
    }

    pub fn len(&self) -> usize {
        self.channels * self.freq * self.time
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<[usize; 3]> for InputShape {
    fn from(v: [usize; 3]) -> Self {
        InputShape::new(v[0], v[1], v[2])
    }
}

impl From<InputShape> for [usize; 3] {
    fn from(s: InputShape) -> Self {
        [s.channels, s.freq, s.time]
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.freq, self.time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Conv,
    Maxpool,
    Relu,
    Affine,
    Add,
    Concat,
    CoordConcat,
    OutputProbe,
}

impl NodeKind {
    pub const ALL: [NodeKind; 9] = [
        NodeKind::Input,
        NodeKind::Conv,
        NodeKind::Maxpool,
        NodeKind::Relu,
        NodeKind::Affine,
        NodeKind::Add,
        NodeKind::Concat,
        NodeKind::CoordConcat,
        NodeKind::OutputProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv => "conv",
            NodeKind::Maxpool => "maxpool",
            NodeKind::Relu => "relu",
            NodeKind::Affine => "affine",
            NodeKind::Add => "add",
            NodeKind::Concat => "concat",
            NodeKind::CoordConcat => "coord_concat",
            NodeKind::OutputProbe => "output_probe",
        }
    }

    pub fn from_name(name: &str) -> Option<NodeKind> {
        NodeKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Nodes that slide a window over their input (and so grow the RF).
    pub fn is_windowed(self) -> bool {
        matches!(self, NodeKind::Conv | NodeKind::Maxpool)
    }

    pub fn is_merge(self) -> bool {
        matches!(self, NodeKind::Add | NodeKind::Concat)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding of `k* - 1` split as `⌊(k*-1)/2⌋` before and the rest after.
    Same,
    None,
}

/// One layer of an architecture graph.
///
/// Only the fields that apply to `kind` may be set; [`validate`] reports
/// anything else. Optional conv/pool fields fall back to their defaults via
/// the accessor methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Dim2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<Dim2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<Dim2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<DampingSpec>,
    #[serde(default)]
    pub predecessors: Vec<String>,
}

impl NodeSpec {
    fn bare(id: impl Into<String>, kind: NodeKind, predecessors: Vec<String>) -> Self {
        NodeSpec {
            id: id.into(),
            kind,
            kernel: None,
            stride: None,
            dilation: None,
            groups: None,
            in_channels: None,
            out_channels: None,
            padding: None,
            damping: None,
            predecessors,
        }
    }

    pub fn input(id: impl Into<String>) -> Self {
        Self::bare(id, NodeKind::Input, Vec::new())
    }

    /// Same-padded, undilated, ungrouped convolution.
    pub fn conv(
        id: impl Into<String>,
        pred: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: Dim2,
        stride: Dim2,
    ) -> Self {
        let mut n = Self::bare(id, NodeKind::Conv, vec![pred.into()]);
        n.kernel = Some(kernel);
        n.stride = Some(stride);
        n.dilation = Some(Dim2::ONE);
        n.groups = Some(1);
        n.in_channels = Some(in_channels);
        n.out_channels = Some(out_channels);
        n.padding = Some(Padding::Same);
        n
    }

    /// Unpadded max pooling.
    pub fn maxpool(
        id: impl Into<String>,
        pred: impl Into<String>,
        kernel: Dim2,
        stride: Dim2,
    ) -> Self {
        let mut n = Self::bare(id, NodeKind::Maxpool, vec![pred.into()]);
        n.kernel = Some(kernel);
        n.stride = Some(stride);
        n.padding = Some(Padding::None);
        n
    }

    pub fn relu(id: impl Into<String>, pred: impl Into<String>) -> Self {
        Self::bare(id, NodeKind::Relu, vec![pred.into()])
    }

    pub fn affine(id: impl Into<String>, pred: impl Into<String>, channels: usize) -> Self {
        let mut n = Self::bare(id, NodeKind::Affine, vec![pred.into()]);
        n.in_channels = Some(channels);
        n.out_channels = Some(channels);
        n
    }

    pub fn add(id: impl Into<String>, preds: Vec<String>) -> Self {
        Self::bare(id, NodeKind::Add, preds)
    }

    pub fn concat(id: impl Into<String>, preds: Vec<String>) -> Self {
        Self::bare(id, NodeKind::Concat, preds)
    }

    pub fn coord_concat(
        id: impl Into<String>,
        pred: impl Into<String>,
        in_channels: usize,
    ) -> Self {
        let mut n = Self::bare(id, NodeKind::CoordConcat, vec![pred.into()]);
        n.in_channels = Some(in_channels);
        n.out_channels = Some(in_channels + 1);
        n
    }

    pub fn output_probe(id: impl Into<String>, pred: impl Into<String>) -> Self {
        Self::bare(id, NodeKind::OutputProbe, vec![pred.into()])
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = Some(groups);
        self
    }

    pub fn with_dilation(mut self, dilation: Dim2) -> Self {
        self.dilation = Some(dilation);
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = Some(padding);
        self
    }

    pub fn with_damping(mut self, damping: Option<DampingSpec>) -> Self {
        self.damping = damping;
        self
    }

    pub fn kernel_or_one(&self) -> Dim2 {
        self.kernel.unwrap_or(Dim2::ONE)
    }

    pub fn stride_or_one(&self) -> Dim2 {
        self.stride.unwrap_or(Dim2::ONE)
    }

    pub fn dilation_or_one(&self) -> Dim2 {
        self.dilation.unwrap_or(Dim2::ONE)
    }

    pub fn groups_or_one(&self) -> usize {
        self.groups.unwrap_or(1)
    }

    pub fn padding_or_default(&self) -> Padding {
        self.padding.unwrap_or(match self.kind {
            NodeKind::Conv => Padding::Same,
            _ => Padding::None,
        })
    }

    /// Per-axis window geometry for conv/maxpool nodes; identity otherwise.
    pub fn window(&self, axis: Axis) -> WindowGeometry {
        if !self.kind.is_windowed() {
            return WindowGeometry::IDENTITY;
        }
        let kernel = self.kernel_or_one().get(axis);
        let stride = self.stride_or_one().get(axis);
        let dilation = if self.kind == NodeKind::Conv {
            self.dilation_or_one().get(axis)
        } else {
            1
        };
        let span = dilation * (kernel.max(1) - 1) + 1;
        let pad_before = match self.padding_or_default() {
            Padding::Same => (span - 1) / 2,
            Padding::None => 0,
        };
        let pad_after = match self.padding_or_default() {
            Padding::Same => span - 1 - pad_before,
            Padding::None => 0,
        };
        WindowGeometry {
            kernel,
            stride,
            dilation,
            pad_before,
            pad_after,
        }
    }

    /// Fill in defaults so that two specs describing the same layer compare equal.
    fn canonicalize(&mut self) {
        match self.kind {
            NodeKind::Conv => {
                self.dilation.get_or_insert(Dim2::ONE);
                self.groups.get_or_insert(1);
                self.padding.get_or_insert(Padding::Same);
            }
            NodeKind::Maxpool => {
                self.padding.get_or_insert(Padding::None);
            }
            _ => {}
        }
    }
}

/// Window arithmetic for one axis of a conv or pool layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_before: usize,
    pub pad_after: usize,
}

impl WindowGeometry {
    pub const IDENTITY: WindowGeometry = WindowGeometry {
        kernel: 1,
        stride: 1,
        dilation: 1,
        pad_before: 0,
        pad_after: 0,
    };

    /// Dilated kernel extent `d(k-1)+1`.
    pub fn span(&self) -> usize {
        crate::rf_analysis::effective_kernel(self.kernel, self.dilation)
    }

    /// Output length for an input of length `n`, or `None` if the window
    /// does not fit.
    pub fn output_len(&self, n: usize) -> Option<usize> {
        let padded = n + self.pad_before + self.pad_after;
        if padded < self.span() || self.stride == 0 {
            return None;
        }
        Some((padded - self.span()) / self.stride + 1)
    }
}

/// Per-node tensor shape `(channels, freq, time)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub freq: usize,
    pub time: usize,
}

impl Shape {
    pub fn spatial(&self) -> Dim2 {
        Dim2::new(self.freq, self.time)
    }

    pub fn len(&self) -> usize {
        self.channels * self.freq * self.time
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<InputShape> for Shape {
    fn from(s: InputShape) -> Self {
        Shape {
            channels: s.channels,
            freq: s.freq,
            time: s.time,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.freq, self.time)
    }
}

/// A single invariant breach found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: Option<String>,
    pub message: String,
}

impl Violation {
    fn at(node: &str, message: impl Into<String>) -> Self {
        Violation {
            node: Some(node.to_string()),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Self {
        Violation {
            node: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "node '{}': {}", n, self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("malformed architecture file: {0}")]
    Schema(String),
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    Version(u64),
    #[error("node '{id}' has unknown kind '{kind}'")]
    UnknownKind { id: String, kind: String },
    #[error("duplicate node id '{0}'")]
    DuplicateId(String),
    #[error("node '{node}' references missing predecessor '{predecessor}'")]
    DanglingPredecessor { node: String, predecessor: String },
    #[error("cycle detected through node '{0}'")]
    Cycle(String),
    #[error("no node with id '{0}'")]
    UnknownNode(String),
    #[error("invalid graph: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// An architecture graph. Nodes are keyed by id; edges are the
/// `predecessors` lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchGraph {
    pub input_shape: InputShape,
    nodes: BTreeMap<String, NodeSpec>,
}

impl ArchGraph {
    /// Builds a graph from node specs. Only rejects duplicate ids; call
    /// [`validate`] (or use [`ArchGraph::validated`]) for the full checks.
    pub fn new(
        input_shape: InputShape,
        nodes: impl IntoIterator<Item = NodeSpec>,
    ) -> Result<Self, GraphError> {
        let mut map = BTreeMap::new();
        for mut node in nodes {
            node.canonicalize();
            let id = node.id.clone();
            if map.insert(id.clone(), node).is_some() {
                return Err(GraphError::DuplicateId(id));
            }
        }
        Ok(ArchGraph {
            input_shape,
            nodes: map,
        })
    }

    /// [`ArchGraph::new`] followed by [`validate`].
    pub fn validated(
        input_shape: InputShape,
        nodes: impl IntoIterator<Item = NodeSpec>,
    ) -> Result<Self, GraphError> {
        let g = Self::new(input_shape, nodes)?;
        let v = validate(&g);
        if v.is_empty() {
            Ok(g)
        } else {
            Err(GraphError::Invalid(v))
        }
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut NodeSpec> {
        self.nodes.get_mut(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    pub fn nodes_mut(&mut self) -> impl Iterator<Item = &mut NodeSpec> {
        self.nodes.values_mut()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn single_of_kind(&self, kind: NodeKind) -> Option<&NodeSpec> {
        let mut it = self.nodes.values().filter(|n| n.kind == kind);
        let first = it.next()?;
        if it.next().is_some() {
            None
        } else {
            Some(first)
        }
    }

    pub fn input_node(&self) -> Option<&NodeSpec> {
        self.single_of_kind(NodeKind::Input)
    }

    pub fn probe_node(&self) -> Option<&NodeSpec> {
        self.single_of_kind(NodeKind::OutputProbe)
    }

    /// Ids of the nodes listing `id` as a predecessor, sorted.
    pub fn successors(&self, id: &str) -> Vec<&str> {
        self.nodes
            .values()
            .filter(|n| n.predecessors.iter().any(|p| p == id))
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Forward shape propagation from `input_shape`, assuming a valid graph.
    pub fn shapes(&self) -> Result<BTreeMap<String, Shape>, GraphError> {
        let order = topo_order(self)?;
        let (shapes, violations) = propagate_shapes(self, &order);
        if violations.is_empty() {
            Ok(shapes)
        } else {
            Err(GraphError::Invalid(violations))
        }
    }
}

/// Deterministic topological order: Kahn's algorithm with ties broken by
/// lexicographic id.
pub fn topo_order(graph: &ArchGraph) -> Result<Vec<String>, GraphError> {
    let mut indegree: BTreeMap<&str, usize> = BTreeMap::new();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for node in graph.nodes.values() {
        indegree.entry(node.id.as_str()).or_insert(0);
        for p in &node.predecessors {
            if !graph.nodes.contains_key(p) {
                return Err(GraphError::DanglingPredecessor {
                    node: node.id.clone(),
                    predecessor: p.clone(),
                });
            }
            *indegree.entry(node.id.as_str()).or_insert(0) += 1;
            succ.entry(p.as_str()).or_default().push(node.id.as_str());
        }
    }
    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut order = Vec::with_capacity(graph.nodes.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        if let Some(next) = succ.get(id) {
            for s in next {
                let d = indegree.get_mut(s).expect("successor registered");
                *d -= 1;
                if *d == 0 {
                    ready.insert(s);
                }
            }
        }
    }
    if order.len() == graph.nodes.len() {
        return Ok(order);
    }
    // Every leftover node has an unprocessed predecessor; walking those
    // predecessors must eventually revisit a node, which lies on a cycle.
    let done: BTreeSet<&str> = order.iter().map(String::as_str).collect();
    let mut cur = indegree
        .keys()
        .find(|id| !done.contains(*id))
        .copied()
        .expect("leftover node");
    let mut seen = BTreeSet::new();
    while seen.insert(cur) {
        let node = &graph.nodes[cur];
        cur = node
            .predecessors
            .iter()
            .map(String::as_str)
            .filter(|p| !done.contains(p))
            .min()
            .expect("leftover node has a leftover predecessor");
    }
    Err(GraphError::Cycle(cur.to_string()))
}

/// Checks every structural and shape invariant. An empty list means valid.
pub fn validate(graph: &ArchGraph) -> Vec<Violation> {
    let mut out = Vec::new();

    let inputs: Vec<_> = graph
        .nodes()
        .filter(|n| n.kind == NodeKind::Input)
        .collect();
    let probes: Vec<_> = graph
        .nodes()
        .filter(|n| n.kind == NodeKind::OutputProbe)
        .collect();
    if inputs.len() != 1 {
        out.push(Violation::global(format!(
            "expected exactly one input node, found {}",
            inputs.len()
        )));
    }
    if probes.len() != 1 {
        out.push(Violation::global(format!(
            "expected exactly one output_probe node, found {}",
            probes.len()
        )));
    }
    let s = graph.input_shape;
    if s.channels == 0 || s.freq == 0 || s.time == 0 {
        out.push(Violation::global(format!(
            "input_shape {s} has a zero dimension"
        )));
    }

    for node in graph.nodes() {
        check_fields(node, &mut out);
        for p in &node.predecessors {
            if !graph.nodes.contains_key(p) {
                out.push(Violation::at(
                    &node.id,
                    format!("missing predecessor '{p}'"),
                ));
            }
        }
        let mut uniq = BTreeSet::new();
        for p in &node.predecessors {
            if !uniq.insert(p) {
                out.push(Violation::at(
                    &node.id,
                    format!("predecessor '{p}' listed twice"),
                ));
            }
        }
    }
    if !out.is_empty() {
        return out;
    }

    let order = match topo_order(graph) {
        Ok(o) => o,
        Err(e) => {
            out.push(Violation::global(e.to_string()));
            return out;
        }
    };

    // Reachability: everything must descend from the input and feed the probe.
    let input_id = inputs[0].id.as_str();
    let probe_id = probes[0].id.as_str();
    let mut from_input: BTreeSet<&str> = BTreeSet::new();
    for id in &order {
        let node = &graph.nodes[id];
        if id == input_id
            || node
                .predecessors
                .iter()
                .any(|p| from_input.contains(p.as_str()))
        {
            from_input.insert(id.as_str());
        }
    }
    let mut to_probe: BTreeSet<&str> = BTreeSet::from([probe_id]);
    for id in order.iter().rev() {
        if to_probe.contains(id.as_str()) {
            for p in &graph.nodes[id].predecessors {
                to_probe.insert(p.as_str());
            }
        }
    }
    for id in &order {
        if !from_input.contains(id.as_str()) {
            out.push(Violation::at(id, "not reachable from the input node"));
        }
        if !to_probe.contains(id.as_str()) {
            out.push(Violation::at(id, "does not feed the output_probe node"));
        }
    }

    let (_, shape_violations) = propagate_shapes(graph, &order);
    out.extend(shape_violations);
    out
}

fn check_fields(node: &NodeSpec, out: &mut Vec<Violation>) {
    let id = node.id.as_str();
    let kind = node.kind;
    let allowed: &[&str] = match kind {
        NodeKind::Input
        | NodeKind::Relu
        | NodeKind::Add
        | NodeKind::Concat
        | NodeKind::OutputProbe => &[],
        NodeKind::Conv => &[
            "kernel",
            "stride",
            "dilation",
            "groups",
            "in_channels",
            "out_channels",
            "padding",
            "damping",
        ],
        NodeKind::Maxpool => &["kernel", "stride", "padding"],
        NodeKind::Affine | NodeKind::CoordConcat => &["in_channels", "out_channels"],
    };
    let present = [
        ("kernel", node.kernel.is_some()),
        ("stride", node.stride.is_some()),
        ("dilation", node.dilation.is_some()),
        ("groups", node.groups.is_some()),
        ("in_channels", node.in_channels.is_some()),
        ("out_channels", node.out_channels.is_some()),
        ("padding", node.padding.is_some()),
        ("damping", node.damping.is_some()),
    ];
    for (field, set) in present {
        if set && !allowed.contains(&field) {
            out.push(Violation::at(
                id,
                format!("field '{field}' is not allowed on a {kind} node"),
            ));
        }
    }

    let arity = node.predecessors.len();
    match kind {
        NodeKind::Input if arity != 0 => {
            out.push(Violation::at(id, "input node must have no predecessors"))
        }
        NodeKind::Add | NodeKind::Concat if arity < 2 => out.push(Violation::at(
            id,
            format!("{kind} needs at least 2 predecessors, has {arity}"),
        )),
        NodeKind::Conv
        | NodeKind::Maxpool
        | NodeKind::Relu
        | NodeKind::Affine
        | NodeKind::CoordConcat
        | NodeKind::OutputProbe
            if arity != 1 =>
        {
            out.push(Violation::at(
                id,
                format!("{kind} needs exactly 1 predecessor, has {arity}"),
            ))
        }
        _ => {}
    }

    if kind.is_windowed() {
        if node.kernel.is_none() {
            out.push(Violation::at(id, "missing kernel"));
        }
        if node.stride.is_none() {
            out.push(Violation::at(id, "missing stride"));
        }
        for (name, d) in [
            ("kernel", node.kernel),
            ("stride", node.stride),
            ("dilation", node.dilation),
        ] {
            if let Some(d) = d {
                if d.freq == 0 || d.time == 0 {
                    out.push(Violation::at(
                        id,
                        format!("{name} {d} has a zero component"),
                    ));
                }
            }
        }
    }
    if kind == NodeKind::Conv {
        match (node.in_channels, node.out_channels) {
            (Some(ci), Some(co)) => {
                let g = node.groups_or_one();
                if ci == 0 || co == 0 {
                    out.push(Violation::at(id, "channel counts must be positive"));
                } else if g == 0 {
                    out.push(Violation::at(id, "groups must be positive"));
                } else if ci % g != 0 || co % g != 0 {
                    out.push(Violation::at(
                        id,
                        format!("groups={g} must divide in_channels={ci} and out_channels={co}"),
                    ));
                }
            }
            _ => out.push(Violation::at(id, "conv needs in_channels and out_channels")),
        }
        if let Some(d) = &node.damping {
            if let Err(e) = d.check() {
                out.push(Violation::at(id, e.to_string()));
            }
        }
    }
    if kind == NodeKind::Affine {
        match (node.in_channels, node.out_channels) {
            (Some(a), Some(b)) if a == b && a > 0 => {}
            (Some(_), Some(_)) => out.push(Violation::at(
                id,
                "affine needs in_channels == out_channels > 0",
            )),
            _ => out.push(Violation::at(
                id,
                "affine needs in_channels and out_channels",
            )),
        }
    }
    if kind == NodeKind::CoordConcat {
        if let (Some(a), Some(b)) = (node.in_channels, node.out_channels) {
            if b != a + 1 {
                out.push(Violation::at(
                    id,
                    format!("coord_concat needs out_channels = in_channels + 1, got {a} -> {b}"),
                ));
            }
        }
    }
}

/// Propagates shapes in `order`, collecting violations instead of stopping.
fn propagate_shapes(
    graph: &ArchGraph,
    order: &[String],
) -> (BTreeMap<String, Shape>, Vec<Violation>) {
    let mut shapes: BTreeMap<String, Shape> = BTreeMap::new();
    let mut out = Vec::new();
    for id in order {
        let node = &graph.nodes[id];
        let preds: Option<Vec<Shape>> = node
            .predecessors
            .iter()
            .map(|p| shapes.get(p).copied())
            .collect();
        let Some(preds) = preds else {
            // An upstream node already failed.
            continue;
        };
        let shape = match node_output_shape(graph, node, &preds) {
            Ok(s) => s,
            Err(msg) => {
                out.push(Violation::at(id, msg));
                continue;
            }
        };
        shapes.insert(id.clone(), shape);
    }
    (shapes, out)
}

fn node_output_shape(graph: &ArchGraph, node: &NodeSpec, preds: &[Shape]) -> Result<Shape, String> {
    match node.kind {
        NodeKind::Input => Ok(graph.input_shape.into()),
        NodeKind::Conv | NodeKind::Maxpool => {
            let x = preds[0];
            let channels = if node.kind == NodeKind::Conv {
                let ci = node.in_channels.unwrap_or(0);
                if ci != x.channels {
                    return Err(format!(
                        "in_channels={ci} but predecessor has {} channels",
                        x.channels
                    ));
                }
                node.out_channels.unwrap_or(0)
            } else {
                x.channels
            };
            let fl = node.window(Axis::Freq).output_len(x.freq);
            let tl = node.window(Axis::Time).output_len(x.time);
            match (fl, tl) {
                (Some(f), Some(t)) if f > 0 && t > 0 => Ok(Shape {
                    channels,
                    freq: f,
                    time: t,
                }),
                _ => Err(format!(
                    "kernel {} does not fit input {}x{}",
                    node.kernel_or_one(),
                    x.freq,
                    x.time
                )),
            }
        }
        NodeKind::Relu | NodeKind::OutputProbe => Ok(preds[0]),
        NodeKind::Affine => {
            let c = node.in_channels.unwrap_or(0);
            if c != preds[0].channels {
                return Err(format!(
                    "affine has {c} channels but predecessor has {}",
                    preds[0].channels
                ));
            }
            Ok(preds[0])
        }
        NodeKind::CoordConcat => {
            let x = preds[0];
            if let Some(ci) = node.in_channels {
                if ci != x.channels {
                    return Err(format!(
                        "in_channels={ci} but predecessor has {} channels",
                        x.channels
                    ));
                }
            }
            Ok(Shape {
                channels: x.channels + 1,
                ..x
            })
        }
        NodeKind::Add => {
            let first = preds[0];
            if preds.iter().any(|s| *s != first) {
                let desc: Vec<_> = node
                    .predecessors
                    .iter()
                    .zip(preds)
                    .map(|(p, s)| format!("{p}={s}"))
                    .collect();
                return Err(format!(
                    "add predecessors disagree in shape ({})",
                    desc.join(", ")
                ));
            }
            Ok(first)
        }
        NodeKind::Concat => {
            let first = preds[0];
            if preds.iter().any(|s| s.spatial() != first.spatial()) {
                let desc: Vec<_> = node
                    .predecessors
                    .iter()
                    .zip(preds)
                    .map(|(p, s)| format!("{p}={s}"))
                    .collect();
                return Err(format!(
                    "concat predecessors disagree in spatial shape ({})",
                    desc.join(", ")
                ));
            }
            Ok(Shape {
                channels: preds.iter().map(|s| s.channels).sum(),
                ..first
            })
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    version: u64,
    input_shape: InputShape,
    nodes: Vec<Value>,
}

/// Parses and validates an architecture file.
pub fn parse_arch(text: &str) -> Result<ArchGraph, GraphError> {
    let value: Value = serde_json::from_str(text).map_err(|e| GraphError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let file: ArchFile =
        serde_json::from_value(value).map_err(|e| GraphError::Schema(e.to_string()))?;
    if file.version != FORMAT_VERSION {
        return Err(GraphError::Version(file.version));
    }
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for (i, raw) in file.nodes.into_iter().enumerate() {
        let id = raw
            .get("id")
            .and_then(Value::as_str)
            .unwrap_or("?")
            .to_string();
        match raw.get("kind") {
            Some(Value::String(k)) if NodeKind::from_name(k).is_none() => {
                return Err(GraphError::UnknownKind {
                    id,
                    kind: k.clone(),
                });
            }
            _ => {}
        }
        let node: NodeSpec = serde_json::from_value(raw)
            .map_err(|e| GraphError::Schema(format!("node #{i} ('{id}'): {e}")))?;
        nodes.push(node);
    }
    let graph = ArchGraph::new(file.input_shape, nodes)?;
    for node in graph.nodes() {
        for p in &node.predecessors {
            if graph.node(p).is_none() {
                return Err(GraphError::DanglingPredecessor {
                    node: node.id.clone(),
                    predecessor: p.clone(),
                });
            }
        }
    }
    let violations = validate(&graph);
    if !violations.is_empty() {
        return Err(GraphError::Invalid(violations));
    }
    Ok(graph)
}

/// Canonical text for a valid graph.
pub fn serialize_arch(graph: &ArchGraph) -> Result<String, GraphError> {
    let violations = validate(graph);
    if !violations.is_empty() {
        return Err(GraphError::Invalid(violations));
    }
    let order = topo_order(graph)?;
    let nodes: Vec<Value> = order
        .iter()
        .map(|id| serde_json::to_value(&graph.nodes[id]).expect("node spec serializes"))
        .collect();
    let doc = serde_json::json!({
        "version": FORMAT_VERSION,
        "input_shape": graph.input_shape,
        "nodes": nodes,
    });
    // serde_json's default map is a BTreeMap, so keys come out sorted.
    let mut text = serde_json::to_string_pretty(&doc).expect("json value serializes");
    text.push('\n');
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> ArchGraph {
        ArchGraph::new(
            InputShape::new(1, 8, 8),
            vec![
                NodeSpec::input("a"),
                NodeSpec::conv("b", "a", 1, 4, Dim2::square(3), Dim2::ONE),
                NodeSpec::output_probe("c", "b"),
            ],
        )
        .unwrap()
    }

    const MINIMAL: &str = r#"{
        "version": 1,
        "input_shape": [1, 8, 8],
        "nodes": [
            {"id": "in", "kind": "input"},
            {"id": "conv", "kind": "conv", "kernel": [3, 3], "stride": [1, 1],
             "in_channels": 1, "out_channels": 2, "predecessors": ["in"]},
            {"id": "probe", "kind": "output_probe", "predecessors": ["conv"]}
        ]
    }"#;

    #[test]
    fn minimal_file_parses_to_three_nodes() {
        let g = parse_arch(MINIMAL).unwrap();
        assert_eq!(g.len(), 3);
        let conv = g.node("conv").unwrap();
        assert_eq!(conv.groups, Some(1));
        assert_eq!(conv.padding, Some(Padding::Same));
        assert_eq!(conv.dilation, Some(Dim2::ONE));
    }

    #[test]
    fn canonical_form_is_a_fixed_point() {
        let g = parse_arch(MINIMAL).unwrap();
        let text = serialize_arch(&g).unwrap();
        assert!(text.ends_with("}\n"));
        assert!(!text.contains('\r'));
        let g2 = parse_arch(&text).unwrap();
        assert_eq!(g, g2);
        assert_eq!(serialize_arch(&g2).unwrap(), text);
        // Keys sorted: "input_shape" < "nodes" < "version".
        let a = text.find("\"input_shape\"").unwrap();
        let b = text.find("\"nodes\"").unwrap();
        let c = text.find("\"version\"").unwrap();
        assert!(a < b && b < c);
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_arch("{\n  \"version\": 1,\n  oops\n}").unwrap_err();
        match err {
            GraphError::Syntax { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn parse_errors() {
        let unknown = MINIMAL.replace("\"kind\": \"conv\"", "\"kind\": \"lstm\"");
        assert!(
            matches!(parse_arch(&unknown), Err(GraphError::UnknownKind { kind, .. }) if kind == "lstm")
        );

        let dup = MINIMAL.replace("\"id\": \"probe\"", "\"id\": \"conv\"");
        assert!(matches!(parse_arch(&dup), Err(GraphError::DuplicateId(id)) if id == "conv"));

        let dangling = MINIMAL.replace(
            "\"predecessors\": [\"conv\"]",
            "\"predecessors\": [\"nope\"]",
        );
        assert!(matches!(
            parse_arch(&dangling),
            Err(GraphError::DanglingPredecessor { predecessor, .. }) if predecessor == "nope"
        ));

        let version = MINIMAL.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(parse_arch(&version), Err(GraphError::Version(2))));
    }

    #[test]
    fn topo_order_chain_and_diamond() {
        assert_eq!(topo_order(&chain()).unwrap(), vec!["a", "b", "c"]);

        let diamond = ArchGraph::new(
            InputShape::new(1, 4, 4),
            vec![
                NodeSpec::output_probe("d", "e"),
                NodeSpec::add("e", vec!["c".into(), "b".into()]),
                NodeSpec::relu("c", "a"),
                NodeSpec::relu("b", "a"),
                NodeSpec::input("a"),
            ],
        )
        .unwrap();
        assert_eq!(topo_order(&diamond).unwrap(), vec!["a", "b", "c", "e", "d"]);
        assert!(validate(&diamond).is_empty());
    }

    #[test]
    fn cycle_is_reported() {
        let g = ArchGraph::new(
            InputShape::new(1, 4, 4),
            vec![
                NodeSpec::input("a"),
                NodeSpec::add("b", vec!["a".into(), "c".into()]),
                NodeSpec::relu("c", "b"),
                NodeSpec::output_probe("p", "c"),
            ],
        )
        .unwrap();
        match topo_order(&g) {
            Err(GraphError::Cycle(id)) => assert!(id == "b" || id == "c"),
            r => panic!("expected cycle, got {r:?}"),
        }
        assert!(!validate(&g).is_empty());
    }

    #[test]
    fn add_with_mismatched_channels() {
        let g = ArchGraph::new(
            InputShape::new(1, 8, 8),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("a", "in", 1, 128, Dim2::square(3), Dim2::ONE),
                NodeSpec::conv("b", "in", 1, 256, Dim2::square(3), Dim2::ONE),
                NodeSpec::add("sum", vec!["a".into(), "b".into()]),
                NodeSpec::output_probe("p", "sum"),
            ],
        )
        .unwrap();
        let v = validate(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].node.as_deref(), Some("sum"));
    }

    #[test]
    fn group_divisibility() {
        let g = ArchGraph::new(
            InputShape::new(128, 8, 8),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("c", "in", 128, 129, Dim2::square(3), Dim2::ONE).with_groups(3),
                NodeSpec::output_probe("p", "c"),
            ],
        )
        .unwrap();
        let v = validate(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].message.contains("groups=3"));
    }

    #[test]
    fn structural_violations() {
        let g = ArchGraph::new(
            InputShape::new(1, 8, 8),
            vec![
                NodeSpec::input("in"),
                NodeSpec::relu("r", "in"),
                NodeSpec::relu("dead", "in"),
                NodeSpec::coord_concat("cc", "r", 1),
                NodeSpec::output_probe("p", "cc"),
            ],
        )
        .unwrap();
        let v = validate(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].node.as_deref(), Some("dead"));

        let mut bad = NodeSpec::coord_concat("cc", "in", 1);
        bad.out_channels = Some(3);
        let g = ArchGraph::new(
            InputShape::new(1, 8, 8),
            vec![
                NodeSpec::input("in"),
                bad,
                NodeSpec::output_probe("p", "cc"),
            ],
        )
        .unwrap();
        assert_eq!(validate(&g).len(), 1);

        let g = ArchGraph::new(
            InputShape::new(1, 8, 8),
            vec![NodeSpec::input("in"), NodeSpec::relu("r", "in")],
        )
        .unwrap();
        assert!(validate(&g)
            .iter()
            .any(|v| v.message.contains("output_probe")));
    }

    #[test]
    fn shapes_follow_padding_rules() {
        let g = ArchGraph::validated(
            InputShape::new(1, 9, 8),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("c", "in", 1, 2, Dim2::square(5), Dim2::square(2)),
                NodeSpec::maxpool("p", "c", Dim2::square(2), Dim2::square(2)),
                NodeSpec::coord_concat("cc", "p", 2),
                NodeSpec::output_probe("out", "cc"),
            ],
        )
        .unwrap();
        let s = g.shapes().unwrap();
        assert_eq!(
            s["c"],
            Shape {
                channels: 2,
                freq: 5,
                time: 4
            }
        );
        assert_eq!(
            s["p"],
            Shape {
                channels: 2,
                freq: 2,
                time: 2
            }
        );
        assert_eq!(s["out"].channels, 3);
    }

    #[test]
    fn oversized_unpadded_kernel_is_a_violation() {
        let g = ArchGraph::new(
            InputShape::new(1, 4, 4),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("c", "in", 1, 1, Dim2::square(5), Dim2::ONE)
                    .with_padding(Padding::None),
                NodeSpec::output_probe("p", "c"),
            ],
        )
        .unwrap();
        let v = validate(&g);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("does not fit"));
    }
}
