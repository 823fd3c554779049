//! Spatio-temporal mapping exploration for stateful spiking neural networks.
//!
//! The pipeline runs in four stages: workload and accelerator models are
//! built ([`workload`], [`accelerator`]), the workload is cut into
//! computation tiles ([`tilegraph`]), every unique tile is mapped onto a core
//! by a loop-nest search ([`intramap`]), and the tile graph is scheduled with
//! explicit scratchpad management ([`scheduler`]). [`explorer`] searches the
//! inter-layer schedule space and [`oracle`] replays schedules at element
//! granularity to cross-check the analytical counts.

pub mod accelerator;
pub mod error;
pub mod explorer;
pub mod intramap;
pub mod oracle;
pub mod scheduler;
pub mod tilegraph;
pub mod workload;

pub use accelerator::{builtin_meta_vr, parse_accelerator, AcceleratorModel, Core, LevelId, MemoryLevel, PeArray};
pub use error::{Error, Result};
pub use explorer::{ga_allocate, hybrid_grid_explore, rank_blocks, time_batch_sweep, HybridGrid, HybridPoint, PointSummary};
pub use intramap::{LoopNest, Mapper, MappingCost, TileShape};
pub use oracle::{functional_check, simulate_nest, simulate_schedule, SimCounters};
pub use scheduler::{schedule, Component, OperandClass, ScheduleOptions, ScheduleResult};
pub use tilegraph::{generate_tile_graph, parse_cuts, CutSpec, TileGraph};
pub use workload::{builtin_benchmark, parse_workload, Axis, OpClass, OperandKind, WorkloadGraph};
