//! Memorial mixture-of-experts: experts decompose a backbone feature, task
//! gates assemble per-task features from them, and a per-task memory carries
//! the assembled features from one placement to the next.

pub mod assemble;
pub mod experts;
pub mod gating;
pub mod memory;

use std::fmt;
use std::str::FromStr;

pub use assemble::{assemble, assemble_dense, assemble_sparse, top_k_mask};
pub use experts::{ExpertBank, ExpertNet};
pub use gating::{GateField, GatingNet};
pub use memory::{memory_write, TaskMemory};

use crate::backbone::GridShape;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// Which backbone layers carry a decoder module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Every,
    /// `n` layers spaced evenly along the depth, always ending at the last.
    Evenly(usize),
}

impl Placement {
    /// 1-based backbone layer indices, ascending.
    pub fn layers(&self, total: usize) -> Result<Vec<usize>> {
        match *self {
            Placement::Every => Ok((1..=total).collect()),
            Placement::Evenly(n) if n == 0 || n > total => Err(Error::Config(format!(
                "cannot place {n} modules on {total} layers"
            ))),
            Placement::Evenly(n) => Ok((1..=n).map(|i| (2 * i * total + n) / (2 * n)).collect()),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Every => write!(f, "every"),
            Placement::Evenly(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "every" {
            return Ok(Placement::Every);
        }
        let n = s
            .strip_suffix("-evenly-spaced")
            .unwrap_or(s)
            .parse()
            .map_err(|_| Error::Config(format!("placement must be `every` or a count, got `{s}`")))?;
        Ok(Placement::Evenly(n))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmoeConfig {
    pub experts: usize,
    /// Sparse top-k count; `None` means dense assembly.
    pub k_sel: Option<usize>,
    pub kernel: usize,
    /// Width of the two hidden gating stages; `None` means the token width.
    pub gate_hidden: Option<usize>,
    pub placement: Placement,
    /// Whether the feature memory is read and written.
    pub memory: bool,
}

impl Default for MmoeConfig {
    fn default() -> Self {
        Self {
            experts: 4,
            k_sel: None,
            kernel: 3,
            gate_hidden: None,
            placement: Placement::Every,
            memory: true,
        }
    }
}

impl MmoeConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        if ![1, 3, 5].contains(&self.kernel) {
            return Err(Error::Config(format!("gating kernel must be 1, 3 or 5, got {}", self.kernel)));
        }
        if self.gate_hidden == Some(0) {
            return Err(Error::Config("gate hidden width must be positive".into()));
        }
        if let Some(k) = self.k_sel {
            if k == 0 || k > self.experts {
                return Err(Error::Config(format!("ksel {k} outside 1..={}", self.experts)));
            }
        }
        self.placement.layers(layers).map(|_| ())
    }
}

/// Everything one module evaluation produced for one task, handed to a
/// [`GateObserver`].
#[derive(Clone, Debug)]
pub struct GateRecord {
    /// 1-based backbone layer.
    pub layer: usize,
    pub task: usize,
    pub gates: Tensor,
    pub representatives: Vec<Tensor>,
    /// Memory read by this module (absent at the first placement).
    pub memory_in: Option<Tensor>,
    pub feature: Tensor,
    /// Memory after this module's write.
    pub memory_out: Option<Tensor>,
}

pub type GateObserver<'a> = dyn FnMut(&GateRecord) + 'a;

/// One module attached to a backbone layer.
#[derive(Clone, Debug)]
pub struct MmoeLayer {
    /// 1-based backbone layer.
    pub layer: usize,
    /// 0-based index among placements.
    pub position: usize,
    pub bank: ExpertBank,
    pub gates: Vec<GatingNet>,
    /// Per-task momentum; empty unless this module reads the memory.
    pub alphas: Vec<ParamId>,
}

impl MmoeLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        cfg: &MmoeConfig,
        layer: usize,
        position: usize,
        tasks: usize,
        channels: usize,
    ) -> Result<Self> {
        let bank = ExpertBank::new(store, rng, layer, cfg.experts, channels)?;
        let reads_memory = cfg.memory && position > 0;
        let outputs = cfg.experts + usize::from(reads_memory);
        let gates = (0..tasks)
            .map(|t| {
                GatingNet::new(
                    store,
                    rng,
                    &format!("mmoe{layer}.gate{t}"),
                    layer,
                    t,
                    channels,
                    cfg.gate_hidden.unwrap_or(channels),
                    outputs,
                    cfg.kernel,
                )
            })
            .collect::<Result<_>>()?;
        let alphas = if reads_memory {
            (0..tasks)
                .map(|t| store.trainable(format!("mmoe{layer}.alpha{t}"), Tensor::scalar(1.0)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            layer,
            position,
            bank,
            gates,
            alphas,
        })
    }

    pub fn reads_memory(&self) -> bool {
        !self.alphas.is_empty()
    }

    pub fn gate_columns(&self) -> usize {
        self.bank.len() + usize::from(self.reads_memory())
    }

    /// Runs the experts once, then per task: gate, assemble, and (when
    /// `memory` is given) write the memory. Returns the task features.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        grid: GridShape,
        mut memory: Option<&mut TaskMemory>,
        k_sel: Option<usize>,
        mode: Mode,
        mut observer: Option<&mut GateObserver<'_>>,
    ) -> Result<Vec<Var>> {
        if let Some(mem) = memory.as_deref() {
            let expected = self.position > 0;
            for t in 0..self.gates.len() {
                if mem.is_initialized(t) != expected {
                    return Err(Error::State(format!(
                        "memory for task {t} is {} at placement {}",
                        if expected { "uninitialized" } else { "already initialized" },
                        self.position
                    )));
                }
            }
        }
        if self.reads_memory() && memory.is_none() {
            return Err(Error::State("module reads memory but none was supplied".into()));
        }
        let reps = self.bank.forward(g, store, x, mode)?;
        let mut features = Vec::with_capacity(self.gates.len());
        for (t, gate) in self.gates.iter().enumerate() {
            let scores = gate.forward(g, store, x, grid)?;
            let mem_in = if self.reads_memory() {
                memory.as_deref().and_then(|m| m.get(t))
            } else {
                None
            };
            let f = assemble(g, scores, &reps, mem_in, k_sel)?;
            let mem_out = match memory.as_deref_mut() {
                Some(mem) => {
                    let alpha = self.alphas.get(t).map(|&a| g.param(store, a));
                    Some(mem.write(g, t, f, alpha)?)
                }
                None => None,
            };
            if let Some(obs) = observer.as_deref_mut() {
                obs(&GateRecord {
                    layer: self.layer,
                    task: t,
                    gates: g.value(scores).clone(),
                    representatives: reps.iter().map(|&r| g.value(r).clone()).collect(),
                    memory_in: mem_in.map(|m| g.value(m).clone()),
                    feature: g.value(f).clone(),
                    memory_out: mem_out.map(|m| g.value(m).clone()),
                });
            }
            features.push(f);
        }
        Ok(features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_layers() {
        assert_eq!(Placement::Every.layers(4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(Placement::Evenly(3).layers(12).unwrap(), vec![4, 8, 12]);
        assert_eq!(Placement::Evenly(6).layers(12).unwrap(), vec![2, 4, 6, 8, 10, 12]);
        assert_eq!(Placement::Evenly(3).layers(4).unwrap(), vec![1, 3, 4]);
        assert_eq!(Placement::Evenly(1).layers(4).unwrap(), vec![4]);
        assert!(Placement::Evenly(5).layers(4).is_err());
        assert!(Placement::Evenly(0).layers(4).is_err());
        for total in 1..20 {
            for n in 1..=total {
                let l = Placement::Evenly(n).layers(total).unwrap();
                assert_eq!(l.len(), n);
                assert_eq!(*l.last().unwrap(), total);
                assert!(l.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn placement_parsing() {
        assert_eq!("every".parse::<Placement>().unwrap(), Placement::Every);
        assert_eq!("3".parse::<Placement>().unwrap(), Placement::Evenly(3));
        assert_eq!("2-evenly-spaced".parse::<Placement>().unwrap(), Placement::Evenly(2));
        assert!("sometimes".parse::<Placement>().is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = MmoeConfig::default();
        assert!(cfg.validate(4).is_ok());
        assert!(MmoeConfig { kernel: 2, ..cfg.clone() }.validate(4).is_err());
        assert!(MmoeConfig { k_sel: Some(5), ..cfg.clone() }.validate(4).is_err());
        assert!(MmoeConfig { k_sel: Some(0), ..cfg }.validate(4).is_err());
    }
}
