//! Scenario files: a system, state bounds, box obstacles, start and goal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::system::{SystemError, SystemSpec};
use crate::world::{Aabb, ProblemInstance, WorldError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub system: SystemSpec,
    pub bounds: Aabb,
    pub position_dims: Vec<usize>,
    #[serde(default)]
    pub obstacles: Vec<Aabb>,
    pub x_init: Vec<f64>,
    pub goal: Aabb,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("invalid system: {0}")]
    System(#[from] SystemError),
    #[error("invalid scenario: {0}")]
    World(#[from] WorldError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Converts a `serde_json` error into a positioned diagnostic.
pub fn syntax_error(e: serde_json::Error) -> ScenarioError {
    ScenarioError::Syntax { line: e.line(), column: e.column(), message: e.to_string() }
}

impl ScenarioSpec {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(syntax_error)
    }

    pub fn build(&self) -> Result<ProblemInstance, ScenarioError> {
        let sys = self.system.build()?;
        Ok(ProblemInstance::new(
            sys,
            self.bounds.clone(),
            self.position_dims.clone(),
            self.obstacles.clone(),
            self.x_init.clone(),
            self.goal.clone(),
        )?)
    }

    pub fn from_problem(p: &ProblemInstance) -> Self {
        Self {
            system: p.system().to_spec(),
            bounds: p.bounds().clone(),
            position_dims: p.position_dims().to_vec(),
            obstacles: p.obstacles().to_vec(),
            x_init: p.x_init().to_vec(),
            goal: p.goal().clone(),
        }
    }
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<ProblemInstance, ScenarioError> {
    ScenarioSpec::parse(text)?.build()
}

pub fn load_scenario(path: &std::path::Path) -> Result<ProblemInstance, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_scenario(&text)
}

/// The bundled scenarios, by file stem.
pub const BUNDLED: [(&str, &str); 3] = [
    ("free", include_str!("../scenarios/free.json")),
    ("single_wall", include_str!("../scenarios/single_wall.json")),
    ("maze", include_str!("../scenarios/maze.json")),
];

pub fn bundled(name: &str) -> Option<ProblemInstance> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| parse_scenario(text).expect("bundled scenarios are valid"))
}
