//! `RFSW` binary tensor container and CSV grid helpers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RFSW"  u32 version (=1)  u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u32 dim, f64 × Π dims }
//! ```

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::arch_graph::ArchGraph;
use crate::tensor_engine::{AffineParams, ConvParams, Tensor, WeightBlock, WeightSet};

pub const MAGIC: &[u8; 4] = b"RFSW";
pub const VERSION: u32 = 1;
/// Tensor name used for input files.
pub const INPUT_NAME: &str = "input";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not an RFSW file (bad magic)")]
    Magic,
    #[error("unsupported RFSW version {0}")]
    Version(u32),
    #[error("malformed RFSW file: {0}")]
    Format(String),
    #[error("tensor '{0}' not found")]
    Missing(String),
    #[error("CSV line {line}: {message}")]
    Csv { line: usize, message: String },
}

/// A named tensor of any rank.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<(), IoError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| IoError::Format(format!("name '{}' too long", t.name)))?;
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(IoError::Format(format!(
                "tensor '{}' dims do not match its data",
                t.name
            )));
        }
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        let rank =
            u8::try_from(t.dims.len()).map_err(|_| IoError::Format("rank above 255".into()))?;
        w.write_all(&[rank])?;
        for &d in &t.dims {
            let d =
                u32::try_from(d).map_err(|_| IoError::Format("dimension above u32::MAX".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], IoError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => IoError::Format("truncated file".into()),
        _ => IoError::Io(e),
    })?;
    Ok(b)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>, IoError> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(IoError::Magic);
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(IoError::Version(version));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| IoError::Format("tensor name is not UTF-8".into()))?;
        let [rank] = read_array::<1, _>(&mut r)?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}

/// Flattens a weight set into `<node>.weight`, `<node>.bias`, `<node>.scale`
/// and `<node>.shift` tensors, in node-id order.
pub fn weights_to_tensors(w: &WeightSet) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (id, p) in &w.conv {
        out.push(NamedTensor {
            name: format!("{id}.weight"),
            dims: p.weight.shape.to_vec(),
            data: p.weight.data.clone(),
        });
        out.push(NamedTensor {
            name: format!("{id}.bias"),
            dims: vec![p.bias.len()],
            data: p.bias.clone(),
        });
    }
    for (id, p) in &w.affine {
        out.push(NamedTensor {
            name: format!("{id}.scale"),
            dims: vec![p.scale.len()],
            data: p.scale.clone(),
        });
        out.push(NamedTensor {
            name: format!("{id}.shift"),
            dims: vec![p.shift.len()],
            data: p.shift.clone(),
        });
    }
    out
}

/// Rebuilds a weight set for `graph`; shapes are checked by
/// [`WeightSet::check`].
pub fn weights_from_tensors(
    graph: &ArchGraph,
    tensors: Vec<NamedTensor>,
) -> Result<WeightSet, IoError> {
    let mut by_name: BTreeMap<String, NamedTensor> =
        tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut take = |name: String| by_name.remove(&name).ok_or(IoError::Missing(name));
    let mut w = WeightSet::default();
    for node in graph.nodes() {
        match node.kind {
            crate::NodeKind::Conv => {
                let weight = take(format!("{}.weight", node.id))?;
                let bias = take(format!("{}.bias", node.id))?;
                let shape: [usize; 4] =
                    weight.dims.as_slice().try_into().map_err(|_| {
                        IoError::Format(format!("{} must have rank 4", weight.name))
                    })?;
                w.conv.insert(
                    node.id.clone(),
                    ConvParams {
                        weight: WeightBlock {
                            shape,
                            data: weight.data,
                        },
                        bias: bias.data,
                    },
                );
            }
            crate::NodeKind::Affine => {
                let scale = take(format!("{}.scale", node.id))?.data;
                let shift = take(format!("{}.shift", node.id))?.data;
                w.affine
                    .insert(node.id.clone(), AffineParams { scale, shift });
            }
            _ => {}
        }
    }
    w.check(graph).map_err(|e| IoError::Format(e.to_string()))?;
    Ok(w)
}

pub fn input_to_tensors(t: &Tensor) -> Vec<NamedTensor> {
    vec![NamedTensor {
        name: INPUT_NAME.into(),
        dims: t.shape.to_vec(),
        data: t.data.clone(),
    }]
}

/// Reads the tensor named `input` (rank 3, or rank 2 as a single channel).
pub fn input_from_tensors(tensors: Vec<NamedTensor>) -> Result<Tensor, IoError> {
    let t = tensors
        .into_iter()
        .find(|t| t.name == INPUT_NAME)
        .ok_or_else(|| IoError::Missing(INPUT_NAME.into()))?;
    let shape = match t.dims.as_slice() {
        [c, f, tt] => [*c, *f, *tt],
        [f, tt] => [1, *f, *tt],
        _ => return Err(IoError::Format("input tensor must have rank 2 or 3".into())),
    };
    Ok(Tensor {
        shape,
        data: t.data,
    })
}

/// Rows of comma-separated values; every row must have the same length.
pub fn parse_csv_grid(text: &str) -> Result<(usize, usize, Vec<f64>), IoError> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::Csv {
                line: i + 1,
                message: e.to_string(),
            })?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(IoError::Csv {
                    line: i + 1,
                    message: format!("expected {c} columns, found {}", row.len()),
                })
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or(IoError::Csv {
        line: 0,
        message: "empty grid".into(),
    })?;
    Ok((rows, cols, data))
}

/// Full-precision (17 significant digit) CSV of a row-major grid.
pub fn format_csv_grid(cols: usize, data: &[f64]) -> String {
    let mut s = String::with_capacity(data.len() * 24);
    for row in data.chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Single-channel input from a CSV with F rows and T columns.
pub fn input_from_csv(text: &str) -> Result<Tensor, IoError> {
    let (rows, cols, data) = parse_csv_grid(text)?;
    Ok(Tensor {
        shape: [1, rows, cols],
        data,
    })
}
