//! Effective receptive field measurement.
//!
//! A [`GradientMap`] is the mean over inputs of the absolute input gradient
//! of one probe unit, with channels reduced by summing absolute values.
//! [`erf_stats`] summarizes it per axis with the weighted mean and standard
//! deviation of the marginal sums, and reports the ERF extent as `E = 4σ`.
//!
//! Statistics use 1-based pixel coordinates (`t = 1..=T`); everything in
//! [`crate::tensor_engine`] and [`crate::rf_analysis`] is 0-based. The
//! conversion happens here and nowhere else.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_graph::{ArchGraph, Axis, Dim2};
use crate::rf_analysis::{Interval, RfWindow};
use crate::tensor_engine::{Engine, EngineError, EvalOptions, Tensor, WeightSet};
use crate::tensor_io::{format_csv_grid, parse_csv_grid, IoError};

#[derive(Debug, Error)]
pub enum ErfError {
    #[error("gradient map needs at least one input")]
    NoInputs,
    #[error("input {index} has shape {got:?}, graph expects {want:?}")]
    InputShape {
        index: usize,
        got: [usize; 3],
        want: [usize; 3],
    },
    #[error("gradient map has zero total mass")]
    ZeroMass,
    #[error("interval [{lo}, {hi}] contains no pixel of an axis of length {size}")]
    EmptyInterval { lo: f64, hi: f64, size: usize },
    #[error("grid of {len} values is not {f} x {t}")]
    GridShape { len: usize, f: usize, t: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Which probe unit seeds the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbeSpec {
    /// `(⌊F/2⌋, ⌊T/2⌋)` of the probe feature map.
    #[default]
    Center,
    At(Dim2),
}

/// Mean absolute input gradient, `F` rows by `T` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    f_size: usize,
    t_size: usize,
    grid: Vec<f64>,
    pub n_inputs: usize,
    pub probe: Dim2,
}

impl GradientMap {
    /// Wraps an existing grid (row-major, rows = frequency).
    pub fn from_grid(
        f_size: usize,
        t_size: usize,
        grid: Vec<f64>,
        n_inputs: usize,
        probe: Dim2,
    ) -> Result<Self, ErfError> {
        if grid.len() != f_size * t_size || f_size == 0 || t_size == 0 {
            return Err(ErfError::GridShape {
                len: grid.len(),
                f: f_size,
                t: t_size,
            });
        }
        Ok(GradientMap {
            f_size,
            t_size,
            grid,
            n_inputs,
            probe,
        })
    }

    pub fn f_size(&self) -> usize {
        self.f_size
    }

    pub fn t_size(&self) -> usize {
        self.t_size
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.grid[f * self.t_size + t]
    }

    pub fn size(&self, axis: Axis) -> usize {
        match axis {
            Axis::Freq => self.f_size,
            Axis::Time => self.t_size,
        }
    }

    /// Sum over frequency for each time index.
    pub fn marginal_t(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.t_size];
        for row in self.grid.chunks(self.t_size) {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m
    }

    /// Sum over time for each frequency index.
    pub fn marginal_f(&self) -> Vec<f64> {
        self.grid
            .chunks(self.t_size)
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn marginal(&self, axis: Axis) -> Vec<f64> {
        match axis {
            Axis::Freq => self.marginal_f(),
            Axis::Time => self.marginal_t(),
        }
    }

    /// 0-based (f, t) coordinates of nonzero entries' bounding box, if any.
    pub fn support(&self) -> Option<(Interval, Interval)> {
        let mut bounds: Option<(Interval, Interval)> = None;
        for f in 0..self.f_size {
            for t in 0..self.t_size {
                if self.get(f, t) != 0.0 {
                    let (fi, ti) = (f as i64, t as i64);
                    bounds = Some(match bounds {
                        None => (Interval::new(fi, fi), Interval::new(ti, ti)),
                        Some((a, b)) => {
                            (a.hull(Interval::new(fi, fi)), b.hull(Interval::new(ti, ti)))
                        }
                    });
                }
            }
        }
        bounds
    }

    pub fn to_csv(&self) -> String {
        format_csv_grid(self.t_size, &self.grid)
    }

    pub fn from_csv(text: &str, n_inputs: usize, probe: Dim2) -> Result<Self, ErfError> {
        let (rows, cols, data) = parse_csv_grid(text)?;
        Self::from_grid(rows, cols, data, n_inputs, probe)
    }

    /// ASCII PGM (P2): width T, height F, maxval 255, linear scaling so the
    /// largest entry maps to 255 (an all-zero map stays 0).
    pub fn to_pgm(&self) -> String {
        let max = self.grid.iter().copied().fold(0.0f64, f64::max);
        let mut s = format!("P2\n{} {}\n255\n", self.t_size, self.f_size);
        for row in self.grid.chunks(self.t_size) {
            let px: Vec<String> = row
                .iter()
                .map(|&v| {
                    let p = if max > 0.0 {
                        (255.0 * v / max).round()
                    } else {
                        0.0
                    };
                    (p.clamp(0.0, 255.0) as u8).to_string()
                })
                .collect();
            s.push_str(&px.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Stream offset for noise inputs, clear of the per-node weight streams.
pub const INPUT_STREAM_BASE: u64 = 1 << 32;

/// `n` standard-normal inputs; input `i` uses stream `INPUT_STREAM_BASE + i`.
pub fn noise_inputs(shape: [usize; 3], seed: u64, n: usize) -> Vec<Tensor> {
    (0..n as u64)
        .map(|i| Tensor::standard_normal(shape, seed, INPUT_STREAM_BASE + i))
        .collect()
}

/// Resolves [`ProbeSpec`] against an engine's probe map.
pub fn probe_coord(engine: &Engine<'_>, probe: ProbeSpec) -> Dim2 {
    match probe {
        ProbeSpec::Center => engine.probe_center(),
        ProbeSpec::At(c) => c,
    }
}

/// Mean of `|∇ input|` over `inputs`, channel-reduced by sum of absolute
/// values. Backward passes run in parallel; accumulation follows input order.
pub fn gradient_map(
    graph: &ArchGraph,
    weights: &WeightSet,
    inputs: &[Tensor],
    probe: ProbeSpec,
    opts: EvalOptions,
) -> Result<GradientMap, ErfError> {
    let engine = Engine::new(graph, weights, opts)?;
    gradient_map_with(&engine, inputs, probe)
}

pub fn gradient_map_with(
    engine: &Engine<'_>,
    inputs: &[Tensor],
    probe: ProbeSpec,
) -> Result<GradientMap, ErfError> {
    if inputs.is_empty() {
        return Err(ErfError::NoInputs);
    }
    let s = engine.input_shape();
    let want = [s.channels, s.freq, s.time];
    for (index, x) in inputs.iter().enumerate() {
        if x.shape != want {
            return Err(ErfError::InputShape {
                index,
                got: x.shape,
                want,
            });
        }
    }
    let coord = probe_coord(engine, probe);
    engine.probe_seed(coord)?;

    let plane = s.freq * s.time;
    let per_input: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|x| {
            let g = engine.input_gradient(x, coord)?;
            let mut abs = vec![0.0; plane];
            for c in 0..s.channels {
                for (a, v) in abs.iter_mut().zip(g.plane(c)) {
                    *a += v.abs();
                }
            }
            Ok(abs)
        })
        .collect::<Result<_, EngineError>>()?;

    let mut grid = vec![0.0; plane];
    for m in &per_input {
        for (a, v) in grid.iter_mut().zip(m) {
            *a += v;
        }
    }
    let n = inputs.len() as f64;
    for v in &mut grid {
        *v /= n;
    }
    GradientMap::from_grid(s.freq, s.time, grid, inputs.len(), coord)
}

/// Weighted mean and standard deviation of a marginal over 1-based
/// coordinates. `None` when the marginal has no mass.
pub fn weighted_moments(marginal: &[f64]) -> Option<(f64, f64)> {
    let total: f64 = marginal.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let mu = marginal
        .iter()
        .enumerate()
        .map(|(i, w)| (i + 1) as f64 * w)
        .sum::<f64>()
        / total;
    let var = marginal
        .iter()
        .enumerate()
        .map(|(i, w)| ((i + 1) as f64 - mu).powi(2) * w)
        .sum::<f64>()
        / total;
    Some((mu, var.max(0.0).sqrt()))
}

/// Per-axis ERF summary. `E = 4σ`; coordinates are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfStats {
    pub mu_t: f64,
    pub sigma_t: f64,
    pub e_t: f64,
    pub mu_f: f64,
    pub sigma_f: f64,
    pub e_f: f64,
    pub marginal_t: Vec<f64>,
    pub marginal_f: Vec<f64>,
}

impl ErfStats {
    pub fn mu(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Freq => self.mu_f,
            Axis::Time => self.mu_t,
        }
    }

    pub fn sigma(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Freq => self.sigma_f,
            Axis::Time => self.sigma_t,
        }
    }

    pub fn extent(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Freq => self.e_f,
            Axis::Time => self.e_t,
        }
    }

    /// `[μ − 2σ, μ + 2σ]` clipped to `[1, size]`.
    pub fn erf_box(&self, axis: Axis) -> (f64, f64) {
        let size = match axis {
            Axis::Freq => self.marginal_f.len(),
            Axis::Time => self.marginal_t.len(),
        } as f64;
        let (mu, s) = (self.mu(axis), self.sigma(axis));
        ((mu - 2.0 * s).max(1.0), (mu + 2.0 * s).min(size))
    }
}

pub fn erf_stats(map: &GradientMap) -> Result<ErfStats, ErfError> {
    let marginal_t = map.marginal_t();
    let marginal_f = map.marginal_f();
    let (mu_t, sigma_t) = weighted_moments(&marginal_t).ok_or(ErfError::ZeroMass)?;
    let (mu_f, sigma_f) = weighted_moments(&marginal_f).ok_or(ErfError::ZeroMass)?;
    Ok(ErfStats {
        mu_t,
        sigma_t,
        e_t: 4.0 * sigma_t,
        mu_f,
        sigma_f,
        e_f: 4.0 * sigma_f,
        marginal_t,
        marginal_f,
    })
}

/// Share of a marginal's mass at 1-based coordinates within `[lo, hi]`.
pub fn marginal_mass_fraction(marginal: &[f64], lo: f64, hi: f64) -> Result<f64, ErfError> {
    let first = lo.max(1.0).ceil() as usize;
    let last = hi.min(marginal.len() as f64).floor();
    if last < 1.0 || first as f64 > last {
        return Err(ErfError::EmptyInterval {
            lo,
            hi,
            size: marginal.len(),
        });
    }
    let total: f64 = marginal.iter().sum();
    if total <= 0.0 {
        return Err(ErfError::ZeroMass);
    }
    let inside: f64 = marginal[first - 1..last as usize].iter().sum();
    Ok(inside / total)
}

pub fn mass_fraction(map: &GradientMap, axis: Axis, lo: f64, hi: f64) -> Result<f64, ErfError> {
    marginal_mass_fraction(&map.marginal(axis), lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Pgm,
    Csv,
}

impl HeatmapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HeatmapFormat::Pgm => "pgm",
            HeatmapFormat::Csv => "csv",
        }
    }
}

/// JSON sidecar for a heatmap. Boxes are inclusive 1-based input pixel
/// coordinates `[[f_lo, f_hi], [t_lo, t_hi]]`; `probe` is the 0-based unit
/// in the probe feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    #[serde(rename = "E")]
    pub e: [f64; 2],
    pub erf_box: [[f64; 2]; 2],
    pub max_rf_box: [[i64; 2]; 2],
    pub n_inputs: usize,
    pub probe: [usize; 2],
    pub seed: Option<u64>,
}

impl Sidecar {
    pub fn new(stats: &ErfStats, map: &GradientMap, window: &RfWindow, seed: Option<u64>) -> Self {
        let erf = |a| {
            let (lo, hi) = stats.erf_box(a);
            [lo, hi]
        };
        let rf = |a| {
            let iv = window.axis_clipped(a);
            [iv.lo + 1, iv.hi + 1]
        };
        Sidecar {
            mu: [stats.mu_f, stats.mu_t],
            sigma: [stats.sigma_f, stats.sigma_t],
            e: [stats.e_f, stats.e_t],
            erf_box: [erf(Axis::Freq), erf(Axis::Time)],
            max_rf_box: [rf(Axis::Freq), rf(Axis::Time)],
            n_inputs: map.n_inputs,
            probe: [map.probe.freq, map.probe.time],
            seed,
        }
    }

    /// Whether the ERF box lies inside the Max-RF box on both axes.
    pub fn erf_within_max_rf(&self) -> bool {
        (0..2).all(|a| {
            self.max_rf_box[a][0] as f64 <= self.erf_box[a][0]
                && self.erf_box[a][1] <= self.max_rf_box[a][1] as f64
        })
    }
}

/// Paths written by [`export_heatmap`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub heatmap: PathBuf,
    pub sidecar: PathBuf,
}

fn write(path: &Path, contents: &str) -> Result<(), ErfError> {
    fs::write(path, contents).map_err(|source| ErfError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the map to `path` (extension set from `format`) and the sidecar
/// next to it with a `.json` extension.
pub fn export_heatmap(
    map: &GradientMap,
    window: &RfWindow,
    path: &Path,
    format: HeatmapFormat,
    seed: Option<u64>,
) -> Result<(ExportPaths, Sidecar), ErfError> {
    let stats = erf_stats(map)?;
    let heatmap = path.with_extension(format.extension());
    let sidecar_path = path.with_extension("json");
    let body = match format {
        HeatmapFormat::Pgm => map.to_pgm(),
        HeatmapFormat::Csv => map.to_csv(),
    };
    write(&heatmap, &body)?;
    let sidecar = Sidecar::new(&stats, map, window, seed);
    let mut json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    json.push('\n');
    write(&sidecar_path, &json)?;
    Ok((
        ExportPaths {
            heatmap,
            sidecar: sidecar_path,
        },
        sidecar,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_graph::{InputShape, NodeSpec};

    fn row_map(marginal: &[f64]) -> GradientMap {
        GradientMap::from_grid(1, marginal.len(), marginal.to_vec(), 1, Dim2::new(0, 0)).unwrap()
    }

    #[test]
    fn point_mass() {
        let mut m = vec![0.0; 50];
        m[16] = 3.0;
        let s = erf_stats(&row_map(&m)).unwrap();
        assert_eq!(s.mu_t, 17.0);
        assert_eq!(s.sigma_t, 0.0);
        assert_eq!(s.e_t, 0.0);
        assert_eq!(
            mass_fraction(&row_map(&m), Axis::Time, 10.0, 20.0).unwrap(),
            1.0
        );
    }

    #[test]
    fn uniform_marginal_matches_discrete_variance() {
        for t in [1usize, 2, 7, 256] {
            let s = erf_stats(&row_map(&vec![1.0; t])).unwrap();
            let want = (((t * t) as f64 - 1.0) / 12.0).sqrt();
            assert!((s.sigma_t - want).abs() < 1e-9, "T={t}");
            assert_eq!(s.e_t, 4.0 * s.sigma_t);
            assert!((s.mu_t - (t as f64 + 1.0) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_map_is_centered() {
        let (f, t) = (9, 12);
        let grid: Vec<f64> = (0..f * t)
            .map(|i| {
                let (a, b) = ((i / t) as f64, (i % t) as f64);
                let da = (a - (f - 1) as f64 / 2.0).abs();
                let db = (b - (t - 1) as f64 / 2.0).abs();
                1.0 / (1.0 + da * da + 0.5 * db)
            })
            .collect();
        let s = erf_stats(&GradientMap::from_grid(f, t, grid, 1, Dim2::ONE).unwrap()).unwrap();
        assert!((s.mu_f - 5.0).abs() < 1e-12);
        assert!((s.mu_t - 6.5).abs() < 1e-12);
    }

    #[test]
    fn mass_fraction_edges() {
        let m = row_map(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mass_fraction(&m, Axis::Time, 1.0, 4.0).unwrap(), 1.0);
        assert!((mass_fraction(&m, Axis::Time, 1.5, 3.2).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            mass_fraction(&m, Axis::Time, 2.2, 2.8),
            Err(ErfError::EmptyInterval { .. })
        ));
        assert!(matches!(
            erf_stats(&row_map(&[0.0; 4])),
            Err(ErfError::ZeroMass)
        ));
    }

    #[test]
    fn pgm_and_csv_output() {
        let mut grid = vec![0.0; 6];
        grid[4] = 0.25;
        let m = GradientMap::from_grid(2, 3, grid, 1, Dim2::ONE).unwrap();
        assert_eq!(m.to_pgm(), "P2\n3 2\n255\n0 0 0\n0 255 0\n");
        let back = GradientMap::from_csv(&m.to_csv(), 1, Dim2::ONE).unwrap();
        assert_eq!(back, m);
    }

    fn identity_graph() -> ArchGraph {
        ArchGraph::validated(
            InputShape::new(1, 6, 5),
            vec![
                NodeSpec::input("in"),
                NodeSpec::conv("c", "in", 1, 1, Dim2::ONE, Dim2::ONE),
                NodeSpec::output_probe("p", "c"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn identity_graph_maps_to_the_probe_pixel() {
        let g = identity_graph();
        let w = WeightSet::constant(&g, 1.0);
        let inputs: Vec<_> = (0..3)
            .map(|i| Tensor::standard_normal([1, 6, 5], 1, i))
            .collect();
        let m = gradient_map(&g, &w, &inputs, ProbeSpec::Center, EvalOptions::default()).unwrap();
        assert_eq!(m.probe, Dim2::new(3, 2));
        for f in 0..6 {
            for t in 0..5 {
                assert_eq!(m.get(f, t), if (f, t) == (3, 2) { 1.0 } else { 0.0 });
            }
        }
        let s = erf_stats(&m).unwrap();
        assert_eq!((s.mu_f, s.mu_t, s.e_f, s.e_t), (4.0, 3.0, 0.0, 0.0));
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let g = identity_graph();
        let w = WeightSet::constant(&g, 1.0);
        assert!(matches!(
            gradient_map(&g, &w, &[], ProbeSpec::Center, EvalOptions::default()),
            Err(ErfError::NoInputs)
        ));
        assert!(matches!(
            gradient_map(
                &g,
                &w,
                &[Tensor::zeros([1, 5, 5])],
                ProbeSpec::Center,
                EvalOptions::default()
            ),
            Err(ErfError::InputShape { index: 0, .. })
        ));
    }

    #[test]
    fn sidecar_boxes_are_one_based() {
        let m = row_map(&[0.0, 1.0, 2.0, 1.0, 0.0]);
        let stats = erf_stats(&m).unwrap();
        let window = RfWindow {
            freq: Interval::new(-1, 1),
            time: Interval::new(-2, 6),
            freq_clipped: Interval::new(0, 0),
            time_clipped: Interval::new(0, 4),
        };
        let sc = Sidecar::new(&stats, &m, &window, Some(9));
        assert_eq!(sc.max_rf_box, [[1, 1], [1, 5]]);
        assert_eq!(sc.mu[1], 3.0);
        assert!(sc.erf_within_max_rf());
        let v = serde_json::to_value(&sc).unwrap();
        for key in [
            "mu",
            "sigma",
            "E",
            "erf_box",
            "max_rf_box",
            "n_inputs",
            "probe",
            "seed",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
