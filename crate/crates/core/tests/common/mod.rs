//! Seeded random architecture graphs for property tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfscope::arch_graph::{ArchGraph, Dim2, InputShape, NodeSpec};
use rfscope::damping::DampingSpec;

#[derive(Debug, Clone, Copy)]
pub struct RandomGraph {
    /// Windowed layers (conv or pool) on the main path, at least 1.
    pub max_layers: usize,
    pub max_size: usize,
    pub relu: bool,
    pub pools: bool,
    pub branches: bool,
    pub damping: bool,
}

impl Default for RandomGraph {
    fn default() -> Self {
        RandomGraph {
            max_layers: 5,
            max_size: 16,
            relu: true,
            pools: true,
            branches: true,
            damping: false,
        }
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|&d| n.is_multiple_of(d)).collect()
}

struct Gen {
    rng: ChaCha8Rng,
    nodes: Vec<NodeSpec>,
    cfg: RandomGraph,
}

impl Gen {
    fn id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.nodes.len())
    }

    fn axis(&mut self, size: usize) -> (usize, usize, usize) {
        let k = self.rng.gen_range(1..=4usize);
        let d = if k > 1 && self.rng.gen_bool(0.3) {
            2
        } else {
            1
        };
        let s = if size >= 4 && self.rng.gen_bool(0.3) {
            2
        } else {
            1
        };
        (k, s, d)
    }

    /// Random conv; returns (id, out channels, out size).
    fn conv(
        &mut self,
        pred: &str,
        in_c: usize,
        size: Dim2,
        out_c: Option<usize>,
        stride: Option<Dim2>,
    ) -> (String, usize, Dim2) {
        let (kf, sf, df) = self.axis(size.freq);
        let (kt, st, dt) = self.axis(size.time);
        let stride = stride.unwrap_or(Dim2::new(sf, st));
        let groups = *pick(&mut self.rng, &divisors(in_c));
        let out_c = out_c.unwrap_or_else(|| groups * self.rng.gen_range(1..=3usize));
        let groups = if out_c.is_multiple_of(groups) {
            groups
        } else {
            1
        };
        let id = self.id("conv");
        let mut n = NodeSpec::conv(&id, pred, in_c, out_c, Dim2::new(kf, kt), stride)
            .with_dilation(Dim2::new(df, dt))
            .with_groups(groups);
        if self.cfg.damping && self.rng.gen_bool(0.5) {
            let m = [0.0, 0.5, 0.9];
            n = n.with_damping(Some(DampingSpec::new(
                *pick(&mut self.rng, &m),
                *pick(&mut self.rng, &m),
            )));
        }
        self.nodes.push(n);
        let out = Dim2::new(
            size.freq.div_ceil(stride.freq),
            size.time.div_ceil(stride.time),
        );
        (id, out_c, out)
    }

    fn after(&mut self, mut cur: String, c: usize) -> String {
        if self.rng.gen_bool(0.3) {
            let id = self.id("aff");
            self.nodes.push(NodeSpec::affine(&id, cur, c));
            cur = id;
        }
        if self.cfg.relu && self.rng.gen_bool(0.6) {
            let id = self.id("relu");
            self.nodes.push(NodeSpec::relu(&id, cur));
            cur = id;
        }
        cur
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, v: &'a [T]) -> &'a T {
    &v[rng.gen_range(0..v.len())]
}

/// Builds a valid graph from `seed`: a chain of convs, pools and two-branch
/// merges ending in an output probe.
pub fn random_graph(seed: u64, cfg: RandomGraph) -> ArchGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = rng.gen_range(1..=3usize);
    let f0 = rng.gen_range(4..=cfg.max_size);
    let t0 = rng.gen_range(4..=cfg.max_size);
    let layers = rng.gen_range(1..=cfg.max_layers);
    let mut g = Gen {
        rng,
        nodes: vec![NodeSpec::input("in")],
        cfg,
    };
    let (mut cur, mut c, mut size) = ("in".to_string(), c0, Dim2::new(f0, t0));
    for _ in 0..layers {
        let roll = g.rng.gen_range(0..10);
        if cfg.pools && roll < 2 && size.freq >= 2 && size.time >= 2 {
            let id = g.id("pool");
            let k = Dim2::new(g.rng.gen_range(1..=2), g.rng.gen_range(1..=2));
            g.nodes.push(NodeSpec::maxpool(&id, cur, k, k));
            size = Dim2::new(
                (size.freq - k.freq) / k.freq + 1,
                (size.time - k.time) / k.time + 1,
            );
            cur = id;
        } else if cfg.branches && roll < 4 {
            let stride = Dim2::new(
                1,
                if size.time >= 4 {
                    g.rng.gen_range(1..=2)
                } else {
                    1
                },
            );
            let add = g.rng.gen_bool(0.5);
            let (a, ca, out) = g.conv(&cur, c, size, None, Some(stride));
            let (b, cb, _) = g.conv(&cur, c, size, add.then_some(ca), Some(stride));
            let id = g.id("merge");
            let preds = vec![a, b];
            if add {
                g.nodes.push(NodeSpec::add(&id, preds));
                c = ca;
            } else {
                g.nodes.push(NodeSpec::concat(&id, preds));
                c = ca + cb;
            }
            size = out;
            cur = g.after(id, c);
        } else {
            let (id, oc, out) = g.conv(&cur, c, size, None, None);
            c = oc;
            size = out;
            cur = g.after(id, c);
        }
    }
    g.nodes.push(NodeSpec::output_probe("probe", cur));
    ArchGraph::validated(InputShape::new(c0, f0, t0), g.nodes)
        .expect("generator emits valid graphs")
}

/// Conv chain without pools, merges or relu.
pub fn random_linear_chain(seed: u64, max_layers: usize, max_size: usize) -> ArchGraph {
    random_graph(
        seed,
        RandomGraph {
            max_layers,
            max_size,
            relu: false,
            pools: false,
            branches: false,
            damping: false,
        },
    )
}
