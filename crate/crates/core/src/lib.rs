//! Deterministic co-simulation of a DC grid and flexible data-center loads,
//! with accounting and marginal carbon-intensity signals.

// NaN-rejecting `!(x >= 0.0)` checks and index loops over dense matrices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coordination;
pub mod dispatch;
pub mod error;
pub mod flexload;
pub mod grid;
pub mod io;
pub(crate) mod lp;
pub mod resilience;
pub mod scenario;
pub mod signals;
pub mod synth;

pub use error::{Error, Result};
pub use coordination::{LoopParams, LoopStatus, LoopTrace, ResponseModel};
pub use dispatch::{DispatchResult, PeriodDispatch};
pub use flexload::{ComputeJob, Criticality, DataCenter, FlexLoads, Schedule};
pub use grid::{Bus, BusId, BusLoads, GenId, Generator, GridCase, Line, LineId, LoadId, LoadPoint, TimeGrid};
pub use resilience::{Contingency, ContingencyKind, EmergencyParams, EpisodeResult};
pub use scenario::{Mode, Scenario, Summary};
pub use signals::{FtciMode, MetricKind, SignalFlags, SignalSeries};
