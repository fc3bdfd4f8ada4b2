//! Optimal steering and sampling-based motion planning (DFMT*, DPRM*) for
//! linear-affine systems `ẋ = Ax + Bu + c` under the cost `∫ (1 + uᵀRu) dt`.

pub mod experiment;
pub mod gramian;
pub mod linalg;
pub mod planner;
pub mod scenario;
pub mod spatial;
pub mod steering;
pub mod svg;
pub mod system;
pub mod verify;
pub mod world;

pub use gramian::{GramianAt, GramianError, GramianKernel};
pub use steering::{ConnectionMode, Direction, SteerConfig, Steerer, SteeringError, SteeringResult, Trajectory};
pub use system::{ControllabilityInfo, LinearAffineSystem, SystemError, SystemSpec};
pub use world::{Aabb, Obstacle, ProblemInstance, WorldError};
pub use planner::{dfmt_star, dprm_star, Plan, PlanGraph, PlanStats, PlannerConfig, PlannerError, PlanningInstance, Variant};
