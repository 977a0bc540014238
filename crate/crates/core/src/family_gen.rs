//! CP_ResNet and CP_DenseNet generators.
//!
//! Both families share one kernel schedule of 22 slots: slot `k` (1-based)
//! is 3 along axis `d` when `k <= ρ_d` and 1 otherwise. Slot 22 is therefore
//! always 1 for the admissible range `ρ ∈ [0, 21]`.
//!
//! CP_ResNet (input `1 x 256 x T`):
//!
//! ```text
//! conv 5x5/2
//! RB1  3x3, 1x1, P        RB5..RB8   x7..x14   (2x channels)
//! RB2  x1,  x2,  P        RB9..RB12  x15..x22  (4x channels)
//! RB3  x3,  x4
//! RB4  x5,  x6,  P
//! ```
//!
//! CP_DenseNet replaces each conv with a dense layer (1x1 bottleneck, then the
//! scheduled conv, output concatenated to the layer input) and keeps the same
//! pooling positions, with a 1x1 transition conv before the first pool.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_graph::{ArchGraph, Dim2, GraphError, InputShape, NodeSpec};
use crate::damping::DampingSpec;
use crate::rf_analysis::{max_rf, RfError};

/// Number of ρ-controlled kernel slots.
pub const SCHEDULE_LEN: usize = 22;
pub const MAX_RHO: u8 = 21;
/// Mel bins of the reference spectrograms.
pub const DEFAULT_FREQ_BINS: usize = 256;
pub const DEFAULT_TIME_FRAMES: usize = 256;
pub const DEFAULT_BASE_CHANNELS: usize = 128;
pub const DEFAULT_GROWTH_RATE: usize = 64;

#[derive(Debug, Error)]
pub enum FamilyError {
    #[error("rho value {0} is outside [0, {MAX_RHO}]")]
    RhoRange(u8),
    #[error("invalid family configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Rf(#[from] RfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    CpResnet,
    CpDensenet,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::CpResnet => "cp_resnet",
            Family::CpDensenet => "cp_densenet",
        }
    }

    pub fn from_name(s: &str) -> Option<Family> {
        match s {
            "cp_resnet" => Some(Family::CpResnet),
            "cp_densenet" => Some(Family::CpDensenet),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoSpec {
    Uniform(u8),
    PerAxis { freq: u8, time: u8 },
}

impl RhoSpec {
    pub fn freq(self) -> u8 {
        match self {
            RhoSpec::Uniform(r) => r,
            RhoSpec::PerAxis { freq, .. } => freq,
        }
    }

    pub fn time(self) -> u8 {
        match self {
            RhoSpec::Uniform(r) => r,
            RhoSpec::PerAxis { time, .. } => time,
        }
    }
}

/// Everything needed to generate one member of a family.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyConfig {
    pub family: Family,
    pub rho: RhoSpec,
    /// Width of the first stage; later CP_ResNet stages use 2x and 4x.
    pub base_channels: usize,
    /// Dense-layer output channels; CP_DenseNet only.
    pub growth_rate: Option<usize>,
    pub groups: usize,
    pub damping: Option<DampingSpec>,
    pub extra_pools: usize,
    pub input_shape: InputShape,
    /// Two parallel residual branches per block (RF-neutral).
    pub shake_shake: bool,
    /// Frequency coordinate channel before every residual block (RF-neutral).
    pub frequency_aware: bool,
}

impl FamilyConfig {
    pub fn new(family: Family, rho: RhoSpec) -> Self {
        FamilyConfig {
            family,
            rho,
            base_channels: DEFAULT_BASE_CHANNELS,
            growth_rate: match family {
                Family::CpResnet => None,
                Family::CpDensenet => Some(DEFAULT_GROWTH_RATE),
            },
            groups: 1,
            damping: None,
            extra_pools: 0,
            input_shape: InputShape::new(1, DEFAULT_FREQ_BINS, DEFAULT_TIME_FRAMES),
            shake_shake: false,
            frequency_aware: false,
        }
    }

    pub fn cp_resnet(rho: u8) -> Self {
        Self::new(Family::CpResnet, RhoSpec::Uniform(rho))
    }

    pub fn cp_densenet(rho: u8) -> Self {
        Self::new(Family::CpDensenet, RhoSpec::Uniform(rho))
    }

    pub fn per_axis(family: Family, rho_f: u8, rho_t: u8) -> Self {
        Self::new(
            family,
            RhoSpec::PerAxis {
                freq: rho_f,
                time: rho_t,
            },
        )
    }

    pub fn with_base_channels(mut self, c: usize) -> Self {
        self.base_channels = c;
        self
    }

    pub fn with_growth_rate(mut self, g: usize) -> Self {
        self.growth_rate = Some(g);
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn with_damping(mut self, d: Option<DampingSpec>) -> Self {
        self.damping = d;
        self
    }

    pub fn with_extra_pools(mut self, n: usize) -> Self {
        self.extra_pools = n;
        self
    }

    pub fn with_input_shape(mut self, s: InputShape) -> Self {
        self.input_shape = s;
        self
    }

    pub fn with_time_frames(mut self, t: usize) -> Self {
        self.input_shape.time = t;
        self
    }

    pub fn with_shake_shake(mut self, on: bool) -> Self {
        self.shake_shake = on;
        self
    }

    pub fn with_frequency_aware(mut self, on: bool) -> Self {
        self.frequency_aware = on;
        self
    }

    pub fn check(&self) -> Result<(), FamilyError> {
        for r in [self.rho.freq(), self.rho.time()] {
            if r > MAX_RHO {
                return Err(FamilyError::RhoRange(r));
            }
        }
        let cfg = |m: String| Err(FamilyError::Config(m));
        if self.base_channels == 0 {
            return cfg("base_channels must be positive".into());
        }
        if self.groups == 0 {
            return cfg("groups must be positive".into());
        }
        if !self.base_channels.is_multiple_of(self.groups) {
            return cfg(format!(
                "groups={} must divide base_channels={}",
                self.groups, self.base_channels
            ));
        }
        match (self.family, self.growth_rate) {
            (Family::CpResnet, Some(_)) => {
                return cfg("growth_rate applies to cp_densenet only".into())
            }
            (Family::CpDensenet, None) => return cfg("cp_densenet needs a growth_rate".into()),
            (Family::CpDensenet, Some(0)) => return cfg("growth_rate must be positive".into()),
            (Family::CpDensenet, Some(k)) if k % self.groups != 0 => {
                return cfg(format!(
                    "groups={} must divide growth_rate={k}",
                    self.groups
                ))
            }
            _ => {}
        }
        if self.family == Family::CpDensenet && (self.shake_shake || self.frequency_aware) {
            return cfg("shake_shake and frequency_aware variants apply to cp_resnet only".into());
        }
        if let Some(d) = &self.damping {
            d.check().map_err(|e| FamilyError::Config(e.to_string()))?;
        }
        if self.input_shape.channels == 0
            || self.input_shape.freq == 0
            || self.input_shape.time == 0
        {
            return cfg(format!(
                "input_shape {} has a zero dimension",
                self.input_shape
            ));
        }
        Ok(())
    }
}

/// The 22 kernel slots for per-axis ρ values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSchedule {
    pub x: [Dim2; SCHEDULE_LEN],
}

impl KernelSchedule {
    /// Slot `k`, 1-based.
    pub fn slot(&self, k: usize) -> Dim2 {
        self.x[k - 1]
    }
}

pub fn kernel_schedule(rho_f: u8, rho_t: u8) -> Result<KernelSchedule, FamilyError> {
    for r in [rho_f, rho_t] {
        if r > MAX_RHO {
            return Err(FamilyError::RhoRange(r));
        }
    }
    let pick = |k: usize, rho: u8| if k <= rho as usize { 3 } else { 1 };
    let x = std::array::from_fn(|i| Dim2::new(pick(i + 1, rho_f), pick(i + 1, rho_t)));
    Ok(KernelSchedule { x })
}

/// Small helper that names nodes and tracks the current tail of the graph.
struct Builder {
    nodes: Vec<NodeSpec>,
    groups: usize,
    damping: Option<DampingSpec>,
}

impl Builder {
    fn new(groups: usize, damping: Option<DampingSpec>) -> Self {
        Builder {
            nodes: vec![NodeSpec::input("input")],
            groups,
            damping,
        }
    }

    fn push(&mut self, n: NodeSpec) -> String {
        let id = n.id.clone();
        self.nodes.push(n);
        id
    }

    /// conv → affine → relu (relu optional). Returns the tail id.
    #[allow(clippy::too_many_arguments)]
    fn conv_unit(
        &mut self,
        prefix: &str,
        from: &str,
        cin: usize,
        cout: usize,
        kernel: Dim2,
        stride: Dim2,
        grouped: bool,
        relu: bool,
    ) -> String {
        let groups = if grouped { self.groups } else { 1 };
        let conv = self.push(
            NodeSpec::conv(format!("{prefix}.conv"), from, cin, cout, kernel, stride)
                .with_groups(groups)
                .with_damping(self.damping),
        );
        let bn = self.push(NodeSpec::affine(format!("{prefix}.bn"), conv, cout));
        if relu {
            self.push(NodeSpec::relu(format!("{prefix}.relu"), bn))
        } else {
            bn
        }
    }

    fn pool(&mut self, id: String, from: &str) -> String {
        self.push(NodeSpec::maxpool(
            id,
            from,
            Dim2::square(2),
            Dim2::square(2),
        ))
    }
}

/// Block indices (1-based, in 5..=12) after which extra pools go: `n` pools
/// spread evenly over RB5..RB12.
pub fn extra_pool_positions(n: usize) -> Vec<usize> {
    (1..=n).map(|j| 4 + (j * 8) / (n + 1)).collect()
}

/// CP_ResNet with the configured schedule and variants.
pub fn cp_resnet(cfg: &FamilyConfig) -> Result<ArchGraph, FamilyError> {
    if cfg.family != Family::CpResnet {
        return Err(FamilyError::Config(
            "cp_resnet called with a cp_densenet config".into(),
        ));
    }
    cfg.check()?;
    let sched = kernel_schedule(cfg.rho.freq(), cfg.rho.time())?;
    let c = cfg.base_channels;
    let mut b = Builder::new(cfg.groups, cfg.damping);

    let mut tail = b.conv_unit(
        "stem",
        "input",
        cfg.input_shape.channels,
        c,
        Dim2::square(5),
        Dim2::square(2),
        false,
        true,
    );
    let mut width = c;
    let pools_after = [1usize, 2, 4];
    let extra = extra_pool_positions(cfg.extra_pools);

    for rb in 1..=12usize {
        let out = match rb {
            1..=4 => c,
            5..=8 => 2 * c,
            _ => 4 * c,
        };
        let (k1, k2) = if rb == 1 {
            (Dim2::square(3), Dim2::square(1))
        } else {
            (sched.slot(2 * rb - 3), sched.slot(2 * rb - 2))
        };
        let p = format!("rb{rb:02}");

        let (branch_in, branch_cin) = if cfg.frequency_aware {
            (
                b.push(NodeSpec::coord_concat(
                    format!("{p}.coord"),
                    tail.as_str(),
                    width,
                )),
                width + 1,
            )
        } else {
            (tail.clone(), width)
        };
        let branches: &[&str] = if cfg.shake_shake { &["a", "b"] } else { &[""] };
        let mut merge_inputs = Vec::new();
        for name in branches {
            let bp = if name.is_empty() {
                p.clone()
            } else {
                format!("{p}.{name}")
            };
            // The coordinate channel breaks group divisibility, so c1 stays dense then.
            let mid = b.conv_unit(
                &format!("{bp}.c1"),
                &branch_in,
                branch_cin,
                out,
                k1,
                Dim2::ONE,
                !cfg.frequency_aware,
                true,
            );
            let end = b.conv_unit(
                &format!("{bp}.c2"),
                &mid,
                out,
                out,
                k2,
                Dim2::ONE,
                true,
                false,
            );
            merge_inputs.push(end);
        }
        let shortcut = if width != out {
            b.conv_unit(
                &format!("{p}.proj"),
                &tail,
                width,
                out,
                Dim2::ONE,
                Dim2::ONE,
                true,
                false,
            )
        } else {
            tail.clone()
        };
        merge_inputs.insert(0, shortcut);
        let sum = b.push(NodeSpec::add(format!("{p}.add"), merge_inputs));
        tail = b.push(NodeSpec::relu(format!("{p}.out"), sum));
        width = out;

        if pools_after.contains(&rb) {
            tail = b.pool(format!("{p}.pool"), &tail);
        }
        for (i, _) in extra.iter().enumerate().filter(|(_, &pos)| pos == rb) {
            tail = b.pool(format!("{p}.xpool{i}"), &tail);
        }
    }
    b.push(NodeSpec::output_probe("probe", tail));
    finish(cfg, b)
}

/// CP_DenseNet: 24 dense layers with the CP_ResNet pooling positions.
pub fn cp_densenet(cfg: &FamilyConfig) -> Result<ArchGraph, FamilyError> {
    if cfg.family != Family::CpDensenet {
        return Err(FamilyError::Config(
            "cp_densenet called with a cp_resnet config".into(),
        ));
    }
    cfg.check()?;
    let sched = kernel_schedule(cfg.rho.freq(), cfg.rho.time())?;
    let growth = cfg.growth_rate.expect("checked");
    let bottleneck = 4 * growth;
    let mut b = Builder::new(cfg.groups, cfg.damping);

    let mut tail = b.conv_unit(
        "stem",
        "input",
        cfg.input_shape.channels,
        cfg.base_channels,
        Dim2::square(5),
        Dim2::square(2),
        false,
        true,
    );
    let mut width = cfg.base_channels;

    enum Step {
        Dense(Dim2),
        Transition,
        Pool,
    }
    let mut steps = vec![
        Step::Dense(Dim2::square(3)),
        Step::Dense(Dim2::square(1)),
        Step::Transition,
        Step::Pool,
        Step::Dense(sched.slot(1)),
        Step::Dense(sched.slot(2)),
        Step::Pool,
        Step::Dense(sched.slot(3)),
        Step::Dense(sched.slot(4)),
        Step::Dense(sched.slot(5)),
        Step::Dense(sched.slot(6)),
        Step::Pool,
    ];
    // Extra pools sit after the dense-layer pair standing in for RB5..RB12.
    let extra = extra_pool_positions(cfg.extra_pools);
    for rb in 5..=12usize {
        steps.push(Step::Dense(sched.slot(2 * rb - 3)));
        steps.push(Step::Dense(sched.slot(2 * rb - 2)));
        for _ in extra.iter().filter(|&&pos| pos == rb) {
            steps.push(Step::Pool);
        }
    }

    let (mut layer, mut pool) = (0usize, 0usize);
    for step in steps {
        match step {
            Step::Dense(k) => {
                layer += 1;
                let p = format!("dl{layer:02}");
                let mid = b.conv_unit(
                    &format!("{p}.b"),
                    &tail,
                    width,
                    bottleneck,
                    Dim2::ONE,
                    Dim2::ONE,
                    true,
                    true,
                );
                let new = b.conv_unit(
                    &format!("{p}.x"),
                    &mid,
                    bottleneck,
                    growth,
                    k,
                    Dim2::ONE,
                    true,
                    true,
                );
                tail = b.push(NodeSpec::concat(format!("{p}.cat"), vec![tail, new]));
                width += growth;
            }
            Step::Transition => {
                tail = b.conv_unit(
                    "trans",
                    &tail,
                    width,
                    width,
                    Dim2::ONE,
                    Dim2::ONE,
                    true,
                    true,
                );
            }
            Step::Pool => {
                pool += 1;
                tail = b.pool(format!("pool{pool:02}"), &tail);
            }
        }
    }
    debug_assert_eq!(layer, SCHEDULE_LEN + 2);
    b.push(NodeSpec::output_probe("probe", tail));
    finish(cfg, b)
}

fn finish(cfg: &FamilyConfig, b: Builder) -> Result<ArchGraph, FamilyError> {
    Ok(ArchGraph::validated(cfg.input_shape, b.nodes)?)
}

/// Dispatches on `cfg.family`.
pub fn generate(cfg: &FamilyConfig) -> Result<ArchGraph, FamilyError> {
    match cfg.family {
        Family::CpResnet => cp_resnet(cfg),
        Family::CpDensenet => cp_densenet(cfg),
    }
}

/// `(ρ, probe Max RF)` for ρ = 0..=21, computed from generated graphs.
pub fn rho_table(family: Family) -> Result<Vec<(u8, Dim2)>, FamilyError> {
    (0..=MAX_RHO)
        .map(|rho| {
            // Narrow graphs: the RF does not depend on channel widths.
            let cfg = FamilyConfig::new(family, RhoSpec::Uniform(rho)).with_base_channels(4);
            let cfg = match family {
                Family::CpDensenet => cfg.with_growth_rate(4),
                Family::CpResnet => cfg,
            };
            Ok((rho, max_rf(&generate(&cfg)?)?.probe_rf()))
        })
        .collect()
}

/// Aligned text rendering of [`rho_table`].
pub fn rho_table_text(family: Family, rows: &[(u8, Dim2)]) -> String {
    let mut s = format!(
        "{} max receptive field\n{:>5}  {:>11}\n",
        family.name(),
        "rho",
        "max RF"
    );
    for (rho, rf) in rows {
        s.push_str(&format!("{:>5}  {:>5} x {:<5}\n", rho, rf.freq, rf.time));
    }
    s
}

pub fn rho_table_csv(rows: &[(u8, Dim2)]) -> String {
    let mut s = String::from("rho,max_rf_freq,max_rf_time\n");
    for (rho, rf) in rows {
        s.push_str(&format!("{},{},{}\n", rho, rf.freq, rf.time));
    }
    s
}
