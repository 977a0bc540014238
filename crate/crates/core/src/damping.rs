//! Filter damping: a fixed factor grid multiplied elementwise into a
//! convolution kernel, so that `(W ⊙ C) ⋆ Z` replaces `W ⋆ Z`.
//!
//! The factor at time index `t` and frequency index `f` is
//!
//! ```text
//! c(t, f) = (1 - m_t·|t - T/2| / (T/2)) · (1 - m_f·|f - F/2| / (F/2))
//! ```
//!
//! with zero-based indices ([`DampingMode::Literal`]). Because the literal
//! form is asymmetric for odd sizes (T = 3 gives 0.1, 0.7, 0.7 at m = 0.9),
//! [`DampingMode::Centered`] measures distance from `(T-1)/2` against a
//! half-width of `(T-1)/2` instead. A size-1 axis always has factor 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_graph::{ArchGraph, NodeKind};
use crate::tensor_engine::{WeightBlock, WeightSet};

#[derive(Debug, Error, PartialEq)]
pub enum DampingError {
    #[error("damping coefficient {name}={value} must lie in [0, 1)")]
    Coefficient { name: &'static str, value: f64 },
    #[error("damping matrix size must be at least 1x1, got T={t} F={f}")]
    Size { t: usize, f: usize },
    #[error("kernel spatial shape {kernel_f}x{kernel_t} (freq x time) does not match damping matrix F={f} T={t}")]
    Shape {
        kernel_f: usize,
        kernel_t: usize,
        f: usize,
        t: usize,
    },
    #[error("no weights for damped conv node '{0}'")]
    MissingWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingMode {
    #[default]
    Literal,
    Centered,
}

impl DampingMode {
    pub fn name(self) -> &'static str {
        match self {
            DampingMode::Literal => "literal",
            DampingMode::Centered => "centered",
        }
    }
}

/// Per-conv damping configuration as stored on graph nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingSpec {
    pub m_t: f64,
    pub m_f: f64,
    #[serde(default)]
    pub mode: DampingMode,
}

impl DampingSpec {
    pub fn new(m_t: f64, m_f: f64) -> Self {
        DampingSpec {
            m_t,
            m_f,
            mode: DampingMode::Literal,
        }
    }

    pub fn with_mode(mut self, mode: DampingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn check(&self) -> Result<(), DampingError> {
        check_coefficient("m_t", self.m_t)?;
        check_coefficient("m_f", self.m_f)
    }

    /// Factor grid for a kernel of `f_size x t_size` (freq x time).
    pub fn matrix(&self, t_size: usize, f_size: usize) -> Result<DampingMatrix, DampingError> {
        DampingMatrix::with_mode(t_size, f_size, self.m_t, self.m_f, self.mode)
    }
}

fn check_coefficient(name: &'static str, value: f64) -> Result<(), DampingError> {
    if (0.0..1.0).contains(&value) {
        Ok(())
    } else {
        Err(DampingError::Coefficient { name, value })
    }
}

/// One axis of the separable factor grid.
pub fn axis_factors(size: usize, m: f64, mode: DampingMode) -> Vec<f64> {
    if size <= 1 {
        return vec![1.0; size];
    }
    match mode {
        DampingMode::Literal => {
            let half = size as f64 / 2.0;
            (0..size)
                .map(|i| 1.0 - m * (i as f64 - half).abs() / half)
                .collect()
        }
        DampingMode::Centered => {
            let half = (size - 1) as f64 / 2.0;
            (0..size)
                .map(|i| 1.0 - m * (i as f64 - half).abs() / half)
                .collect()
        }
    }
}

/// A `T x F` grid of damping factors.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingMatrix {
    t_size: usize,
    f_size: usize,
    pub m_t: f64,
    pub m_f: f64,
    pub mode: DampingMode,
    time_factors: Vec<f64>,
    freq_factors: Vec<f64>,
    /// Row-major over (t, f).
    factors: Vec<f64>,
}

impl DampingMatrix {
    pub fn with_mode(
        t_size: usize,
        f_size: usize,
        m_t: f64,
        m_f: f64,
        mode: DampingMode,
    ) -> Result<Self, DampingError> {
        if t_size == 0 || f_size == 0 {
            return Err(DampingError::Size {
                t: t_size,
                f: f_size,
            });
        }
        check_coefficient("m_t", m_t)?;
        check_coefficient("m_f", m_f)?;
        let time_factors = axis_factors(t_size, m_t, mode);
        let freq_factors = axis_factors(f_size, m_f, mode);
        let factors = time_factors
            .iter()
            .flat_map(|ct| freq_factors.iter().map(move |cf| ct * cf))
            .collect();
        Ok(DampingMatrix {
            t_size,
            f_size,
            m_t,
            m_f,
            mode,
            time_factors,
            freq_factors,
            factors,
        })
    }

    pub fn t_size(&self) -> usize {
        self.t_size
    }

    pub fn f_size(&self) -> usize {
        self.f_size
    }

    /// Factor `c(t, f)`.
    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.factors[t * self.f_size + f]
    }

    pub fn time_factors(&self) -> &[f64] {
        &self.time_factors
    }

    pub fn freq_factors(&self) -> &[f64] {
        &self.freq_factors
    }

    /// Rows indexed by time, columns by frequency.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.factors.chunks(self.f_size)
    }

    pub fn is_identity(&self) -> bool {
        self.factors.iter().all(|&c| c == 1.0)
    }

    /// CSV with one row per frequency index and one column per time index.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for f in 0..self.f_size {
            let row: Vec<String> = (0..self.t_size)
                .map(|t| format!("{:.16e}", self.get(t, f)))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn sidecar_json(&self) -> serde_json::Value {
        serde_json::json!({
            "T": self.t_size,
            "F": self.f_size,
            "m_t": self.m_t,
            "m_f": self.m_f,
            "mode": self.mode.name(),
        })
    }
}

/// Literal-mode damping matrix.
pub fn damping_matrix(
    t_size: usize,
    f_size: usize,
    m_t: f64,
    m_f: f64,
) -> Result<DampingMatrix, DampingError> {
    DampingMatrix::with_mode(t_size, f_size, m_t, m_f, DampingMode::Literal)
}

/// Multiplies every spatial slice of a `(C_out, C_in/g, k_f, k_t)` block by
/// the factor grid. The kernel's freq extent must equal `F` and its time
/// extent `T`.
pub fn damp_weights(w: &WeightBlock, c: &DampingMatrix) -> Result<WeightBlock, DampingError> {
    let [_, _, kf, kt] = w.shape;
    if kf != c.f_size || kt != c.t_size {
        return Err(DampingError::Shape {
            kernel_f: kf,
            kernel_t: kt,
            f: c.f_size,
            t: c.t_size,
        });
    }
    let mut out = w.clone();
    for slice in out.data.chunks_mut(kf * kt) {
        for f in 0..kf {
            for t in 0..kt {
                slice[f * kt + t] *= c.get(t, f);
            }
        }
    }
    Ok(out)
}

/// Folds every conv node's damping into its weights and clears the flags.
/// Forward results are unchanged: the engine damps with the same products.
pub fn bake(
    graph: &ArchGraph,
    weights: &WeightSet,
) -> Result<(ArchGraph, WeightSet), DampingError> {
    let mut graph = graph.clone();
    let mut weights = weights.clone();
    let mut baked: BTreeMap<String, WeightBlock> = BTreeMap::new();
    for node in graph.nodes().filter(|n| n.kind == NodeKind::Conv) {
        let Some(spec) = node.damping else { continue };
        let k = node.kernel_or_one();
        let c = spec.matrix(k.time, k.freq)?;
        let params = weights
            .conv
            .get(&node.id)
            .ok_or_else(|| DampingError::MissingWeights(node.id.clone()))?;
        baked.insert(node.id.clone(), damp_weights(&params.weight, &c)?);
    }
    for (id, w) in baked {
        weights.conv.get_mut(&id).expect("checked above").weight = w;
        graph.node_mut(&id).expect("node exists").damping = None;
    }
    Ok((graph, weights))
}
