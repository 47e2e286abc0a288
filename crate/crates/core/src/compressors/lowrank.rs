//! Power-SGD and ACP-SGD power-iteration state.
//!
//! Both methods are exposed in two forms: staged methods on
//! [`LowRankState`] that produce the factor to aggregate and consume the
//! aggregated sum (used by the overlap engine, which fuses many layers into
//! one collective), and the collective one-call forms [`powersgd_step`] and
//! [`acpsgd_step`] that run the stages against a process group.
//!
//! Aggregated factors are divided by the world size (mean).

use serde::{Deserialize, Serialize};

use super::CompressError;
use crate::collectives::ProcessGroup;
use crate::tensor::{derive_seed, matmul, orthogonalize_seeded, seeded_normal, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorSide {
    P,
    Q,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LowRankOptions {
    pub error_feedback: bool,
    /// Start each step from the previous step's factor instead of fresh
    /// noise.
    pub reuse: bool,
}

impl Default for LowRankOptions {
    fn default() -> Self {
        Self {
            error_feedback: true,
            reuse: true,
        }
    }
}

#[derive(Clone, Debug)]
enum Pending {
    Idle,
    /// Power-SGD between the P and Q rounds; `x` is the (EF-mixed) input.
    PowerAwaitP {
        x: Matrix,
    },
    PowerAwaitQ {
        x: Matrix,
    },
    AcpAwait(FactorSide),
}

/// Per-layer state: factors `P (n x r)` and `Q (m x r)`, the local error
/// `E (n x m)`, and the number of completed steps.
#[derive(Clone, Debug)]
pub struct LowRankState {
    p: Matrix,
    q: Matrix,
    e: Matrix,
    step: u64,
    rank: usize,
    seed: u64,
    opts: LowRankOptions,
    pending: Pending,
}

impl LowRankState {
    /// `P0` and `Q0` are standard normal draws from `seed`; every worker
    /// must pass the same seed for the same layer.
    pub fn new(
        rows: usize,
        cols: usize,
        rank: usize,
        seed: u64,
        opts: LowRankOptions,
    ) -> Result<Self, CompressError> {
        if rank == 0 || rank > rows.min(cols) {
            return Err(CompressError::Config(format!(
                "rank {rank} must be in 1..={} for a {rows}x{cols} layer",
                rows.min(cols)
            )));
        }
        Ok(Self {
            p: seeded_normal(rows, rank, derive_seed(seed, &[0])),
            q: seeded_normal(cols, rank, derive_seed(seed, &[1])),
            e: Matrix::zeros(rows, cols),
            step: 0,
            rank,
            seed,
            opts,
            pending: Pending::Idle,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn rows(&self) -> usize {
        self.e.rows()
    }

    pub fn cols(&self) -> usize {
        self.e.cols()
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn error(&self) -> &Matrix {
        &self.e
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn options(&self) -> LowRankOptions {
        self.opts
    }

    /// Power-SGD is between its first and second round.
    pub fn awaiting_p(&self) -> bool {
        matches!(self.pending, Pending::PowerAwaitP { .. })
    }

    /// Factor ACP-SGD computes and aggregates on the next step: P on odd
    /// steps (1, 3, ...), Q on even ones.
    pub fn acp_side(&self) -> FactorSide {
        if (self.step + 1) % 2 == 1 {
            FactorSide::P
        } else {
            FactorSide::Q
        }
    }

    fn check_input(&self, m: &Matrix) -> Result<(), CompressError> {
        if m.shape() != self.e.shape() {
            return Err(CompressError::Mismatch(format!(
                "gradient {:?} does not match layer state {:?}",
                m.shape(),
                self.e.shape()
            )));
        }
        if !matches!(self.pending, Pending::Idle) {
            return Err(CompressError::Mismatch(
                "previous step still in flight".into(),
            ));
        }
        Ok(())
    }

    fn fresh(&self, rows: usize, salt: u64) -> Matrix {
        seeded_normal(
            rows,
            self.rank,
            derive_seed(self.seed, &[2, salt, self.step]),
        )
    }

    fn ortho_seed(&self) -> u64 {
        derive_seed(self.seed, &[3, self.step])
    }

    fn mixed_input(&self, m: &Matrix) -> Result<Matrix, CompressError> {
        Ok(if self.opts.error_feedback {
            m.add(&self.e)?
        } else {
            m.clone()
        })
    }

    fn mean(
        sum: Vec<f32>,
        rows: usize,
        cols: usize,
        world: usize,
    ) -> Result<Matrix, CompressError> {
        let mut m = Matrix::new(rows, cols, sum)?;
        m.scale(1.0 / world as f32);
        Ok(m)
    }

    /// Power-SGD round 1: returns the local `P = (M + E) Q_{t-1}`.
    pub fn power_begin(&mut self, m: &Matrix) -> Result<Vec<f32>, CompressError> {
        self.check_input(m)?;
        let x = self.mixed_input(m)?;
        let q = if self.opts.reuse {
            self.q.clone()
        } else {
            self.fresh(self.cols(), 1)
        };
        let p = matmul(&x, &q, false, false)?;
        self.pending = Pending::PowerAwaitP { x };
        Ok(p.into_data())
    }

    /// Power-SGD round 2: takes the summed `P`, orthogonalizes its mean and
    /// returns the local `Q = (M + E)^T P`.
    pub fn power_after_p(
        &mut self,
        p_sum: Vec<f32>,
        world: usize,
    ) -> Result<Vec<f32>, CompressError> {
        let Pending::PowerAwaitP { x } = std::mem::replace(&mut self.pending, Pending::Idle) else {
            return Err(CompressError::Mismatch(
                "power_after_p without power_begin".into(),
            ));
        };
        let p = Self::mean(p_sum, self.rows(), self.rank, world)?;
        self.p = orthogonalize_seeded(&p, self.ortho_seed())?;
        let q = matmul(&x, &self.p, true, false)?;
        self.pending = Pending::PowerAwaitQ { x };
        Ok(q.into_data())
    }

    /// Power-SGD completion: takes the summed `Q` and returns `P Q^T`.
    pub fn power_finish(&mut self, q_sum: Vec<f32>, world: usize) -> Result<Matrix, CompressError> {
        let Pending::PowerAwaitQ { x } = std::mem::replace(&mut self.pending, Pending::Idle) else {
            return Err(CompressError::Mismatch(
                "power_finish without power_after_p".into(),
            ));
        };
        self.q = Self::mean(q_sum, self.cols(), self.rank, world)?;
        let decoded = matmul(&self.p, &self.q, false, true)?;
        if self.opts.error_feedback {
            self.e = x.sub(&decoded)?;
        }
        self.step += 1;
        Ok(decoded)
    }

    /// ACP-SGD: orthogonalizes the factor reused from the previous step,
    /// computes the other one from `M + E`, updates `E` with the local
    /// approximation, and returns the factor to aggregate.
    pub fn acp_begin(&mut self, m: &Matrix) -> Result<(FactorSide, Vec<f32>), CompressError> {
        self.check_input(m)?;
        let side = self.acp_side();
        let x = self.mixed_input(m)?;
        let seed = self.ortho_seed();
        let local = match side {
            FactorSide::P => {
                let base = if self.opts.reuse {
                    self.q.clone()
                } else {
                    self.fresh(self.cols(), 1)
                };
                self.q = orthogonalize_seeded(&base, seed)?;
                let p = matmul(&x, &self.q, false, false)?;
                if self.opts.error_feedback {
                    self.e = x.sub(&matmul(&p, &self.q, false, true)?)?;
                }
                p
            }
            FactorSide::Q => {
                let base = if self.opts.reuse {
                    self.p.clone()
                } else {
                    self.fresh(self.rows(), 0)
                };
                self.p = orthogonalize_seeded(&base, seed)?;
                let q = matmul(&x, &self.p, true, false)?;
                if self.opts.error_feedback {
                    self.e = x.sub(&matmul(&self.p, &q, false, true)?)?;
                }
                q
            }
        };
        self.pending = Pending::AcpAwait(side);
        Ok((side, local.into_data()))
    }

    /// ACP-SGD completion: stores the mean of the aggregated factor and
    /// returns `P Q^T`.
    pub fn acp_finish(&mut self, sum: Vec<f32>, world: usize) -> Result<Matrix, CompressError> {
        let Pending::AcpAwait(side) = std::mem::replace(&mut self.pending, Pending::Idle) else {
            return Err(CompressError::Mismatch(
                "acp_finish without acp_begin".into(),
            ));
        };
        match side {
            FactorSide::P => self.p = Self::mean(sum, self.rows(), self.rank, world)?,
            FactorSide::Q => self.q = Self::mean(sum, self.cols(), self.rank, world)?,
        }
        self.step += 1;
        Ok(matmul(&self.p, &self.q, false, true)?)
    }
}

/// One Power-SGD step for a single layer: two all-reduces, the second
/// depending on the first.
pub fn powersgd_step(
    state: &mut LowRankState,
    m: &Matrix,
    group: &mut ProcessGroup,
) -> Result<Matrix, CompressError> {
    let world = group.world_size();
    let mut p = state.power_begin(m)?;
    group.ring_all_reduce(&mut p)?;
    let mut q = state.power_after_p(p, world)?;
    group.ring_all_reduce(&mut q)?;
    state.power_finish(q, world)
}

/// One ACP-SGD step for a single layer: a single all-reduce of either P or
/// Q.
pub fn acpsgd_step(
    state: &mut LowRankState,
    m: &Matrix,
    group: &mut ProcessGroup,
) -> Result<Matrix, CompressError> {
    let world = group.world_size();
    let (_, mut f) = state.acp_begin(m)?;
    group.ring_all_reduce(&mut f)?;
    state.acp_finish(f, world)
}
