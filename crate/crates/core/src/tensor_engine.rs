//! A small f64 forward/backward engine over architecture graphs.
//!
//! It exists to produce input gradients for ERF measurement, so it supports
//! exactly the node kinds of [`ArchGraph`] and nothing else: no training loop,
//! no batching. Convolutions are cross-correlations with zero padding.
//!
//! Every reduction runs in a fixed order (bias, then input channel, kernel
//! row, kernel column), and parallel work is split by output channel, so
//! results are bitwise identical for any thread count.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::arch_graph::{
    topo_order, ArchGraph, Axis, Dim2, GraphError, InputShape, NodeKind, NodeSpec, Shape,
    WindowGeometry,
};
use crate::damping::{damp_weights, DampingError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Damping(#[from] DampingError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing parameters for node '{0}'")]
    MissingParams(String),
    #[error("non-finite value produced by node '{0}'")]
    NonFinite(String),
    #[error("probe coordinate {coord} is outside the probe map {shape}")]
    ProbeOutOfRange { coord: Dim2, shape: Dim2 },
}

/// Dense `(channels, freq, time)` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f64>) -> Result<Self, EngineError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(EngineError::Shape(format!(
                "{} values do not fill a {:?} tensor",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let [c, fr, t] = shape;
        let mut data = Vec::with_capacity(c * fr * t);
        for ci in 0..c {
            for fi in 0..fr {
                for ti in 0..t {
                    data.push(f(ci, fi, ti));
                }
            }
        }
        Tensor { shape, data }
    }

    /// Standard-normal noise from a seeded ChaCha8 stream.
    pub fn standard_normal(shape: [usize; 3], seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        Tensor {
            shape,
            data: (0..n).map(|_| dist.sample(&mut rng)).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, f: usize, t: usize) -> f64 {
        self.data[(c * self.shape[1] + f) * self.shape[2] + t]
    }

    pub fn set(&mut self, c: usize, f: usize, t: usize, v: f64) {
        let i = (c * self.shape[1] + f) * self.shape[2] + t;
        self.data[i] = v;
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn shape3(s: Shape) -> [usize; 3] {
    [s.channels, s.freq, s.time]
}

/// Conv kernel block `(C_out, C_in/g, k_f, k_t)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl WeightBlock {
    pub fn filled(shape: [usize; 4], v: f64) -> Self {
        WeightBlock {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], f: impl Fn(usize) -> f64) -> Self {
        WeightBlock {
            shape,
            data: (0..shape.iter().product()).map(f).collect(),
        }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: WeightBlock,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Parameters for every conv and affine node of a graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet {
    pub conv: BTreeMap<String, ConvParams>,
    pub affine: BTreeMap<String, AffineParams>,
}

impl WeightSet {
    /// Expected conv block shape for a node.
    pub fn conv_shape(node: &NodeSpec) -> [usize; 4] {
        let k = node.kernel_or_one();
        let ci = node.in_channels.unwrap_or(0);
        let co = node.out_channels.unwrap_or(0);
        [co, ci / node.groups_or_one().max(1), k.freq, k.time]
    }

    /// Checks that shapes match `graph` and all values are finite.
    pub fn check(&self, graph: &ArchGraph) -> Result<(), EngineError> {
        for node in graph.nodes() {
            match node.kind {
                NodeKind::Conv => {
                    let p = self
                        .conv
                        .get(&node.id)
                        .ok_or_else(|| EngineError::MissingParams(node.id.clone()))?;
                    let want = Self::conv_shape(node);
                    if p.weight.shape != want
                        || p.weight.data.len() != want.iter().product::<usize>()
                        || p.bias.len() != want[0]
                    {
                        return Err(EngineError::Shape(format!(
                            "conv '{}' expects weight {:?} and {} biases, got {:?} and {}",
                            node.id,
                            want,
                            want[0],
                            p.weight.shape,
                            p.bias.len()
                        )));
                    }
                    if !p.weight.data.iter().chain(&p.bias).all(|v| v.is_finite()) {
                        return Err(EngineError::NonFinite(node.id.clone()));
                    }
                }
                NodeKind::Affine => {
                    let p = self
                        .affine
                        .get(&node.id)
                        .ok_or_else(|| EngineError::MissingParams(node.id.clone()))?;
                    let c = node.in_channels.unwrap_or(0);
                    if p.scale.len() != c || p.shift.len() != c {
                        return Err(EngineError::Shape(format!(
                            "affine '{}' expects {c} channels",
                            node.id
                        )));
                    }
                    if !p.scale.iter().chain(&p.shift).all(|v| v.is_finite()) {
                        return Err(EngineError::NonFinite(node.id.clone()));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Fills every parameter with `v` (biases and shifts zero, scales one).
    pub fn constant(graph: &ArchGraph, v: f64) -> Self {
        let mut w = WeightSet::default();
        for node in graph.nodes() {
            match node.kind {
                NodeKind::Conv => {
                    let shape = Self::conv_shape(node);
                    w.conv.insert(
                        node.id.clone(),
                        ConvParams {
                            weight: WeightBlock::filled(shape, v),
                            bias: vec![0.0; shape[0]],
                        },
                    );
                }
                NodeKind::Affine => {
                    let c = node.in_channels.unwrap_or(0);
                    w.affine.insert(
                        node.id.clone(),
                        AffineParams {
                            scale: vec![1.0; c],
                            shift: vec![0.0; c],
                        },
                    );
                }
                _ => {}
            }
        }
        w
    }
}

/// He-style initialization: conv weights ~ N(0, 2/fan_in) with
/// `fan_in = C_in/g · k_f · k_t`, zero biases, identity affines.
///
/// Node `i` (position in [`topo_order`]) draws from ChaCha8 stream `i` of the
/// generator seeded with `seed`, so each node's weights depend only on the
/// seed and its position.
pub fn init_weights(graph: &ArchGraph, seed: u64) -> Result<WeightSet, EngineError> {
    let order = topo_order(graph)?;
    let mut w = WeightSet::constant(graph, 0.0);
    for (i, id) in order.iter().enumerate() {
        let Some(p) = w.conv.get_mut(id) else {
            continue;
        };
        let [_, cin_g, kf, kt] = p.weight.shape;
        let fan_in = (cin_g * kf * kt).max(1) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for v in p.weight.data.iter_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Nonlinearity {
    #[default]
    Relu,
    /// relu nodes pass values (and gradients) through unchanged.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    pub nonlinearity: Nonlinearity,
}

impl EvalOptions {
    pub fn identity() -> Self {
        EvalOptions {
            nonlinearity: Nonlinearity::Identity,
        }
    }
}

/// Per-node outputs of one forward pass, indexed like [`Engine::order`].
#[derive(Debug, Clone)]
pub struct Activations {
    pub values: Vec<Tensor>,
    /// Argmax flat plane index per output element, for maxpool nodes.
    argmax: BTreeMap<usize, Vec<usize>>,
}

impl Activations {
    pub fn get<'a>(&'a self, engine: &Engine<'_>, id: &str) -> Option<&'a Tensor> {
        engine.index.get(id).map(|&i| &self.values[i])
    }
}

/// Input and (optionally) conv parameter gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Tensor,
    /// d/dW of the stored (undamped) weights, and d/db.
    pub conv: BTreeMap<String, ConvParams>,
}

/// Axis geometry for one conv/pool node.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    f: WindowGeometry,
    t: WindowGeometry,
}

impl Geometry {
    fn of(node: &NodeSpec) -> Self {
        Geometry {
            f: node.window(Axis::Freq),
            t: node.window(Axis::Time),
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`: output
/// `o` reads input `o·s + k·d − p`, which must lie in `[0, n)`.
fn tap_range(w: &WindowGeometry, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let shift = (k * w.dilation) as isize - w.pad_before as isize;
    let s = w.stride as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) + s - 1) / s
    };
    let last = n_in as isize - 1 - shift;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(n_out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// A graph prepared for evaluation with one weight set.
pub struct Engine<'a> {
    graph: &'a ArchGraph,
    weights: &'a WeightSet,
    opts: EvalOptions,
    order: Vec<String>,
    index: BTreeMap<String, usize>,
    preds: Vec<Vec<usize>>,
    shapes: Vec<Shape>,
    /// Weights actually convolved: `W ⊙ C` for damped convs.
    effective: BTreeMap<String, WeightBlock>,
    probe: usize,
}

impl<'a> Engine<'a> {
    pub fn new(
        graph: &'a ArchGraph,
        weights: &'a WeightSet,
        opts: EvalOptions,
    ) -> Result<Self, EngineError> {
        let violations = crate::arch_graph::validate(graph);
        if !violations.is_empty() {
            return Err(GraphError::Invalid(violations).into());
        }
        weights.check(graph)?;
        let order = topo_order(graph)?;
        let index: BTreeMap<String, usize> = order
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        let all_shapes = graph.shapes()?;
        let shapes = order.iter().map(|id| all_shapes[id]).collect();
        let preds = order
            .iter()
            .map(|id| {
                graph
                    .node(id)
                    .expect("ordered")
                    .predecessors
                    .iter()
                    .map(|p| index[p])
                    .collect()
            })
            .collect();
        let mut effective = BTreeMap::new();
        for node in graph.nodes().filter(|n| n.kind == NodeKind::Conv) {
            if let Some(spec) = node.damping {
                let k = node.kernel_or_one();
                let c = spec.matrix(k.time, k.freq)?;
                effective.insert(
                    node.id.clone(),
                    damp_weights(&weights.conv[&node.id].weight, &c)?,
                );
            }
        }
        let probe = index[&graph.probe_node().expect("validated").id];
        Ok(Engine {
            graph,
            weights,
            opts,
            order,
            index,
            preds,
            shapes,
            effective,
            probe,
        })
    }

    pub fn order(&self) -> &[String] {
        &self.order
    }

    pub fn input_shape(&self) -> InputShape {
        self.graph.input_shape
    }

    pub fn shape_of(&self, id: &str) -> Option<Shape> {
        self.index.get(id).map(|&i| self.shapes[i])
    }

    pub fn probe_shape(&self) -> Shape {
        self.shapes[self.probe]
    }

    fn node(&self, i: usize) -> &NodeSpec {
        self.graph.node(&self.order[i]).expect("ordered id exists")
    }

    fn conv_weight(&self, id: &str) -> &WeightBlock {
        self.effective
            .get(id)
            .unwrap_or(&self.weights.conv[id].weight)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Activations, EngineError> {
        let want = shape3(self.graph.input_shape.into());
        if input.shape != want {
            return Err(EngineError::Shape(format!(
                "input is {:?}, graph expects {:?}",
                input.shape, want
            )));
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.order.len());
        let mut argmax = BTreeMap::new();
        for i in 0..self.order.len() {
            let node = self.node(i);
            let x = |j: usize| &values[self.preds[i][j]];
            let out_shape = shape3(self.shapes[i]);
            let out = match node.kind {
                NodeKind::Input => input.clone(),
                NodeKind::Conv => {
                    let p = &self.weights.conv[&node.id];
                    conv_forward(x(0), self.conv_weight(&node.id), &p.bias, node, out_shape)
                }
                NodeKind::Maxpool => {
                    let (out, idx) = maxpool_forward(x(0), node, out_shape);
                    argmax.insert(i, idx);
                    out
                }
                NodeKind::Relu => match self.opts.nonlinearity {
                    Nonlinearity::Relu => Tensor {
                        shape: out_shape,
                        data: x(0).data.iter().map(|&v| v.max(0.0)).collect(),
                    },
                    Nonlinearity::Identity => x(0).clone(),
                },
                NodeKind::Affine => {
                    let p = &self.weights.affine[&node.id];
                    let src = x(0);
                    let n = src.plane_len();
                    let mut data = Vec::with_capacity(src.data.len());
                    for c in 0..src.channels() {
                        data.extend(
                            src.data[c * n..(c + 1) * n]
                                .iter()
                                .map(|v| p.scale[c] * v + p.shift[c]),
                        );
                    }
                    Tensor {
                        shape: out_shape,
                        data,
                    }
                }
                NodeKind::Add => {
                    let mut acc = x(0).clone();
                    for j in 1..self.preds[i].len() {
                        acc.add_assign(x(j));
                    }
                    acc
                }
                NodeKind::Concat => {
                    let mut data = Vec::with_capacity(out_shape.iter().product());
                    for j in 0..self.preds[i].len() {
                        data.extend_from_slice(&x(j).data);
                    }
                    Tensor {
                        shape: out_shape,
                        data,
                    }
                }
                NodeKind::CoordConcat => {
                    let src = x(0);
                    let [_, f, t] = src.shape;
                    let mut data = src.data.clone();
                    for fi in 0..f {
                        let v = if f > 1 {
                            fi as f64 / (f - 1) as f64
                        } else {
                            0.0
                        };
                        data.extend(std::iter::repeat_n(v, t));
                    }
                    Tensor {
                        shape: out_shape,
                        data,
                    }
                }
                NodeKind::OutputProbe => x(0).clone(),
            };
            if out.shape != out_shape {
                return Err(EngineError::Shape(format!(
                    "node '{}' produced {:?}, expected {:?}",
                    node.id, out.shape, out_shape
                )));
            }
            if !out.data.iter().all(|v| v.is_finite()) {
                return Err(EngineError::NonFinite(node.id.clone()));
            }
            values.push(out);
        }
        Ok(Activations { values, argmax })
    }

    /// Output gradient that seeds `L = Σ_c probe[c, coord]`.
    pub fn probe_seed(&self, coord: Dim2) -> Result<Tensor, EngineError> {
        let s = self.probe_shape();
        if coord.freq >= s.freq || coord.time >= s.time {
            return Err(EngineError::ProbeOutOfRange {
                coord,
                shape: s.spatial(),
            });
        }
        let mut g = Tensor::zeros(shape3(s));
        for c in 0..s.channels {
            g.set(c, coord.freq, coord.time, 1.0);
        }
        Ok(g)
    }

    /// Probe map midpoint `(⌊F/2⌋, ⌊T/2⌋)`.
    pub fn probe_center(&self) -> Dim2 {
        let s = self.probe_shape();
        Dim2::new(s.freq / 2, s.time / 2)
    }

    /// Reverse-mode pass from a gradient on the probe node's output.
    pub fn backward(
        &self,
        acts: &Activations,
        probe_grad: &Tensor,
        with_params: bool,
    ) -> Result<Gradients, EngineError> {
        if acts.values.len() != self.order.len() {
            return Err(EngineError::Shape(
                "activations do not belong to this graph".into(),
            ));
        }
        if probe_grad.shape != shape3(self.probe_shape()) {
            return Err(EngineError::Shape(format!(
                "probe gradient is {:?}, probe output is {:?}",
                probe_grad.shape,
                shape3(self.probe_shape())
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.order.len()];
        grads[self.probe] = Some(probe_grad.clone());
        let mut param_grads = BTreeMap::new();

        for i in (0..self.order.len()).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = self.node(i);
            let preds = &self.preds[i];
            match node.kind {
                NodeKind::Input => {
                    grads[i] = Some(gout);
                }
                NodeKind::Conv => {
                    let xin = &acts.values[preds[0]];
                    let w = self.conv_weight(&node.id);
                    accumulate(
                        &mut grads,
                        preds[0],
                        conv_backward_input(&gout, w, node, xin.shape),
                    );
                    if with_params {
                        let (mut dw, db) = conv_backward_weight(&gout, xin, node, w.shape);
                        if let Some(spec) = node.damping {
                            // Chain rule through W ⊙ C.
                            let k = node.kernel_or_one();
                            dw = damp_weights(&dw, &spec.matrix(k.time, k.freq)?)?;
                        }
                        param_grads.insert(
                            node.id.clone(),
                            ConvParams {
                                weight: dw,
                                bias: db,
                            },
                        );
                    }
                }
                NodeKind::Maxpool => {
                    let xin_shape = acts.values[preds[0]].shape;
                    let idx = &acts.argmax[&i];
                    let mut gin = Tensor::zeros(xin_shape);
                    let (n_in, n_out) = (gin.plane_len(), gout.plane_len());
                    for c in 0..gout.channels() {
                        for o in 0..n_out {
                            gin.data[c * n_in + idx[c * n_out + o]] += gout.data[c * n_out + o];
                        }
                    }
                    accumulate(&mut grads, preds[0], gin);
                }
                NodeKind::Relu => {
                    let gin = match self.opts.nonlinearity {
                        Nonlinearity::Relu => {
                            let xin = &acts.values[preds[0]];
                            Tensor {
                                shape: gout.shape,
                                data: gout
                                    .data
                                    .iter()
                                    .zip(&xin.data)
                                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                                    .collect(),
                            }
                        }
                        Nonlinearity::Identity => gout,
                    };
                    accumulate(&mut grads, preds[0], gin);
                }
                NodeKind::Affine => {
                    let p = &self.weights.affine[&node.id];
                    let n = gout.plane_len();
                    let mut gin = gout;
                    for c in 0..gin.channels() {
                        for v in &mut gin.data[c * n..(c + 1) * n] {
                            *v *= p.scale[c];
                        }
                    }
                    accumulate(&mut grads, preds[0], gin);
                }
                NodeKind::Add => {
                    for &p in preds {
                        accumulate(&mut grads, p, gout.clone());
                    }
                }
                NodeKind::Concat => {
                    let mut start = 0;
                    for &p in preds {
                        let s = acts.values[p].shape;
                        let len: usize = s.iter().product();
                        let part = Tensor {
                            shape: s,
                            data: gout.data[start..start + len].to_vec(),
                        };
                        start += len;
                        accumulate(&mut grads, p, part);
                    }
                }
                NodeKind::CoordConcat => {
                    let s = acts.values[preds[0]].shape;
                    let len: usize = s.iter().product();
                    accumulate(
                        &mut grads,
                        preds[0],
                        Tensor {
                            shape: s,
                            data: gout.data[..len].to_vec(),
                        },
                    );
                }
                NodeKind::OutputProbe => accumulate(&mut grads, preds[0], gout),
            }
        }
        let input_idx = self.index[&self.graph.input_node().expect("validated").id];
        let input = grads[input_idx]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape3(self.graph.input_shape.into())));
        Ok(Gradients {
            input,
            conv: param_grads,
        })
    }

    /// Probe output `L = Σ_c probe[c, coord]` for one input.
    pub fn probe_value(&self, input: &Tensor, coord: Dim2) -> Result<f64, EngineError> {
        let acts = self.forward(input)?;
        let p = &acts.values[self.probe];
        Ok((0..p.channels())
            .map(|c| p.get(c, coord.freq, coord.time))
            .sum())
    }

    /// Gradient of `Σ_c probe[c, coord]` with respect to the input.
    pub fn input_gradient(&self, input: &Tensor, coord: Dim2) -> Result<Tensor, EngineError> {
        let seed = self.probe_seed(coord)?;
        let acts = self.forward(input)?;
        Ok(self.backward(&acts, &seed, false)?.input)
    }

    /// Smallest nonzero |pre-activation| over all relu inputs. Exact zeros
    /// are skipped: they come from regions that are dead upstream and stay
    /// zero under small input perturbations.
    pub fn relu_margin(&self, acts: &Activations) -> Option<f64> {
        (0..self.order.len())
            .filter(|&i| self.node(i).kind == NodeKind::Relu)
            .flat_map(|i| acts.values[self.preds[i][0]].data.iter().map(|v| v.abs()))
            .filter(|&v| v != 0.0)
            .reduce(f64::min)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn conv_forward(
    x: &Tensor,
    w: &WeightBlock,
    bias: &[f64],
    node: &NodeSpec,
    out_shape: [usize; 3],
) -> Tensor {
    let geo = Geometry::of(node);
    let [cout, cin_g, kf, kt] = w.shape;
    let [_, fin, tin] = x.shape;
    let [_, fout, tout] = out_shape;
    let groups = node.groups_or_one();
    let cout_g = cout / groups;
    let plane_out = fout * tout;

    let mut data = vec![0.0; cout * plane_out];
    data.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(o, out)| {
            out.fill(bias[o]);
            let g = o / cout_g;
            for icl in 0..cin_g {
                let xin = x.plane(g * cin_g + icl);
                for a in 0..kf {
                    let (ylo, yhi) = tap_range(&geo.f, a, fin, fout);
                    for b in 0..kt {
                        let wv = w.data[((o * cin_g + icl) * kf + a) * kt + b];
                        let (xlo, xhi) = tap_range(&geo.t, b, tin, tout);
                        if xlo == xhi {
                            continue;
                        }
                        let tshift = (b * geo.t.dilation) as isize - geo.t.pad_before as isize;
                        for y in ylo..yhi {
                            let iy = (y * geo.f.stride + a * geo.f.dilation) - geo.f.pad_before;
                            let row_in = &xin[iy * tin..(iy + 1) * tin];
                            let row_out = &mut out[y * tout..(y + 1) * tout];
                            if geo.t.stride == 1 {
                                let start = (xlo as isize + tshift) as usize;
                                for (o_v, i_v) in row_out[xlo..xhi]
                                    .iter_mut()
                                    .zip(&row_in[start..start + (xhi - xlo)])
                                {
                                    *o_v += wv * i_v;
                                }
                            } else {
                                for (xo, o_v) in row_out.iter_mut().enumerate().take(xhi).skip(xlo)
                                {
                                    let ix = (xo * geo.t.stride) as isize + tshift;
                                    *o_v += wv * row_in[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor {
        shape: out_shape,
        data,
    }
}

fn conv_backward_input(
    gout: &Tensor,
    w: &WeightBlock,
    node: &NodeSpec,
    in_shape: [usize; 3],
) -> Tensor {
    let geo = Geometry::of(node);
    let [cout, cin_g, kf, kt] = w.shape;
    let [cin, fin, tin] = in_shape;
    let [_, fout, tout] = gout.shape;
    let groups = node.groups_or_one();
    let cout_g = cout / groups;
    let plane_in = fin * tin;

    let mut data = vec![0.0; cin * plane_in];
    data.par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(ic, gin)| {
            let g = ic / cin_g;
            let icl = ic % cin_g;
            for o in g * cout_g..(g + 1) * cout_g {
                let go = gout.plane(o);
                for a in 0..kf {
                    let (ylo, yhi) = tap_range(&geo.f, a, fin, fout);
                    for b in 0..kt {
                        let wv = w.data[((o * cin_g + icl) * kf + a) * kt + b];
                        let (xlo, xhi) = tap_range(&geo.t, b, tin, tout);
                        if xlo == xhi {
                            continue;
                        }
                        let tshift = (b * geo.t.dilation) as isize - geo.t.pad_before as isize;
                        for y in ylo..yhi {
                            let iy = (y * geo.f.stride + a * geo.f.dilation) - geo.f.pad_before;
                            let row_g = &go[y * tout..(y + 1) * tout];
                            let row_in = &mut gin[iy * tin..(iy + 1) * tin];
                            if geo.t.stride == 1 {
                                let start = (xlo as isize + tshift) as usize;
                                for (i_v, g_v) in row_in[start..start + (xhi - xlo)]
                                    .iter_mut()
                                    .zip(&row_g[xlo..xhi])
                                {
                                    *i_v += wv * g_v;
                                }
                            } else {
                                for (xo, g_v) in row_g.iter().enumerate().take(xhi).skip(xlo) {
                                    let ix = (xo * geo.t.stride) as isize + tshift;
                                    row_in[ix as usize] += wv * g_v;
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor {
        shape: in_shape,
        data,
    }
}

fn conv_backward_weight(
    gout: &Tensor,
    x: &Tensor,
    node: &NodeSpec,
    wshape: [usize; 4],
) -> (WeightBlock, Vec<f64>) {
    let geo = Geometry::of(node);
    let [cout, cin_g, kf, kt] = wshape;
    let [_, fin, tin] = x.shape;
    let [_, fout, tout] = gout.shape;
    let cout_g = cout / node.groups_or_one();
    let per_out = cin_g * kf * kt;

    let mut dw = vec![0.0; cout * per_out];
    dw.par_chunks_mut(per_out).enumerate().for_each(|(o, dwo)| {
        let g = o / cout_g;
        let go = gout.plane(o);
        for icl in 0..cin_g {
            let xin = x.plane(g * cin_g + icl);
            for a in 0..kf {
                let (ylo, yhi) = tap_range(&geo.f, a, fin, fout);
                for b in 0..kt {
                    let (xlo, xhi) = tap_range(&geo.t, b, tin, tout);
                    let tshift = (b * geo.t.dilation) as isize - geo.t.pad_before as isize;
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let iy = (y * geo.f.stride + a * geo.f.dilation) - geo.f.pad_before;
                        for xo in xlo..xhi {
                            let ix = ((xo * geo.t.stride) as isize + tshift) as usize;
                            acc += go[y * tout + xo] * xin[iy * tin + ix];
                        }
                    }
                    dwo[(icl * kf + a) * kt + b] = acc;
                }
            }
        }
    });
    let db = (0..cout).map(|o| gout.plane(o).iter().sum()).collect();
    (
        WeightBlock {
            shape: wshape,
            data: dw,
        },
        db,
    )
}

fn maxpool_forward(x: &Tensor, node: &NodeSpec, out_shape: [usize; 3]) -> (Tensor, Vec<usize>) {
    let geo = Geometry::of(node);
    let [c, fin, tin] = x.shape;
    let [_, fout, tout] = out_shape;
    let mut data = Vec::with_capacity(c * fout * tout);
    let mut idx = Vec::with_capacity(c * fout * tout);
    for ch in 0..c {
        let plane = x.plane(ch);
        for y in 0..fout {
            for xo in 0..tout {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                // Row-major scan with a strict comparison keeps the smallest
                // flat index among ties.
                for a in 0..geo.f.kernel {
                    let iy = (y * geo.f.stride + a) as isize - geo.f.pad_before as isize;
                    if iy < 0 || iy >= fin as isize {
                        continue;
                    }
                    for b in 0..geo.t.kernel {
                        let ix = (xo * geo.t.stride + b) as isize - geo.t.pad_before as isize;
                        if ix < 0 || ix >= tin as isize {
                            continue;
                        }
                        let fi = iy as usize * tin + ix as usize;
                        if plane[fi] > best || best_i == usize::MAX {
                            best = plane[fi];
                            best_i = fi;
                        }
                    }
                }
                data.push(best);
                idx.push(best_i);
            }
        }
    }
    (
        Tensor {
            shape: out_shape,
            data,
        },
        idx,
    )
}

/// Runs forward then backward for `Σ_c probe[c, coord]`.
pub fn backward_input(
    graph: &ArchGraph,
    weights: &WeightSet,
    input: &Tensor,
    probe_coord: Dim2,
    opts: EvalOptions,
) -> Result<Tensor, EngineError> {
    Engine::new(graph, weights, opts)?.input_gradient(input, probe_coord)
}

pub fn forward(
    graph: &ArchGraph,
    weights: &WeightSet,
    input: &Tensor,
    opts: EvalOptions,
) -> Result<BTreeMap<String, Tensor>, EngineError> {
    let engine = Engine::new(graph, weights, opts)?;
    let acts = engine.forward(input)?;
    Ok(engine.order.iter().cloned().zip(acts.values).collect())
}

/// One sampled pixel of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    pub pixel: [usize; 3],
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
}

/// Central-difference check of the input gradient of `Σ_c probe[c, center]`
/// at `n_probes` pixels drawn (with a seeded generator) from the probe
/// center's input window.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6·max|∇|)`, where `max|∇|`
/// is the largest analytic gradient magnitude over the whole input; the floor
/// keeps pixels whose true gradient is ~0 from dividing noise by noise.
pub fn grad_check(
    graph: &ArchGraph,
    weights: &WeightSet,
    input: &Tensor,
    n_probes: usize,
    h: f64,
    seed: u64,
    opts: EvalOptions,
) -> Result<GradCheckReport, EngineError> {
    let engine = Engine::new(graph, weights, opts)?;
    let coord = engine.probe_center();
    grad_check_with(&engine, input, n_probes, h, seed, |x| {
        engine.input_gradient(x, coord)
    })
}

/// [`grad_check`] against an arbitrary analytic gradient provider.
pub fn grad_check_with(
    engine: &Engine<'_>,
    input: &Tensor,
    n_probes: usize,
    h: f64,
    seed: u64,
    analytic: impl Fn(&Tensor) -> Result<Tensor, EngineError>,
) -> Result<GradCheckReport, EngineError> {
    let coord = engine.probe_center();
    let grad = analytic(input)?;
    if grad.shape != input.shape {
        return Err(EngineError::Shape(
            "analytic gradient has the wrong shape".into(),
        ));
    }
    let scale = grad.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(f64::MIN_POSITIVE);

    let window =
        crate::rf_analysis::rf_window(engine.graph, engine.order[engine.probe].as_str(), coord)
            .map_err(|e| EngineError::Shape(e.to_string()))?;
    let [c, _, t] = input.shape;
    let (f_iv, t_iv) = (window.freq_clipped, window.time_clipped);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut samples = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let ch = rng.gen_range(0..c);
        let fi = rng.gen_range(f_iv.lo..=f_iv.hi) as usize;
        let ti = rng.gen_range(t_iv.lo..=t_iv.hi) as usize;
        let flat = (ch * input.shape[1] + fi) * t + ti;
        let mut xp = input.clone();
        xp.data[flat] += h;
        let lp = engine.probe_value(&xp, coord)?;
        xp.data[flat] = input.data[flat] - h;
        let lm = engine.probe_value(&xp, coord)?;
        let numeric = (lp - lm) / (2.0 * h);
        let a = grad.data[flat];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel_error = if a == numeric {
            0.0
        } else {
            (a - numeric).abs() / denom
        };
        samples.push(GradSample {
            pixel: [ch, fi, ti],
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        samples,
    })
}
