pub mod error;
pub mod flow;
pub mod grid;
pub mod guidance;
pub mod harness;
pub mod mmdit;
pub mod oracle;
pub mod projection;
pub mod rng;
pub mod toolkit;

pub use error::{Error, Result};
pub use flow::{FlowState, ScalePair, TimeSchedule, VelocityGuide, VelocitySource};
pub use grid::Grid;
