//! Functional and analytical model of a PIM-enabled LPDDR memory system
//! serving on-device LLM inference.
//!
//! The address map slices physical addresses into DRAM coordinates; the
//! memory system applies cacheable/non-cacheable attributes and records the
//! command trace; the PIM engine executes GEMV from that trace; the runtime
//! and cost model turn model shapes into prefill, decode and capacity
//! numbers for the six placement scenarios.
//!
//! Numeric code is generic over [`scalar::Scalar`]. The aliases below name
//! the instantiations used by the command-line tool and the tests.

pub mod address_map;
pub mod check;
pub mod config;
pub mod convert;
pub mod cost;
pub mod layout;
pub mod memory;
pub mod model;
pub mod pim;
pub mod report;
pub mod runtime;
pub mod scalar;

/// Exact accumulator for bit-exact GEMV checks.
pub type ExactScalar = num_rational::Ratio<i64>;
/// Exact time base for timeline identities.
pub type ExactTime = num_rational::BigRational;

pub type ExactEngine = pim::PimEngine<ExactScalar>;
pub type Bf16Engine = pim::PimEngine<f32>;
pub type ExactTimeline = runtime::Timeline<ExactTime>;
pub type Timeline = runtime::Timeline<f64>;

pub use address_map::{AddressMap, DramCoord, DramGeometry, Field};
pub use config::RunConfig;
pub use cost::{CostProfile, HardwareSpec, ScenarioKind};
pub use memory::{Attribute, MemorySystem};
pub use model::ModelSpec;
