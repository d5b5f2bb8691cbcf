//! Class attribute inference from black-box classifier logits.
//!
//! Given attack tuples (one image per value of a sensitive attribute) and
//! logit access to a multi-class model, [`attack::run_attack`] infers the
//! attribute value each class was trained on. Around that sit the candidate
//! filter, oracle providers, a synthetic target model, evaluation and
//! ablation protocols, and relative-attribution aggregation.

pub mod attack;
pub mod attribution;
pub mod error;
pub mod evaluation;
pub mod filter;
pub mod formats;
pub mod oracle;
mod rng;
pub mod simulator;
pub mod space;

pub use attack::{
    predict, relative_advantage, run_attack, AdvantageTable, AdvantageVector, AttackOutcome,
    AttackTuple, ClassPrediction,
};
pub use error::{Error, ErrorClass, Result};
pub use evaluation::{GroundTruth, MetricsReport};
pub use oracle::{Oracle, OracleDescriptor, OracleKind};
pub use simulator::{Scenario, ScenarioConfig};
pub use space::AttributeSpace;
