use std::sync::Arc;

use super::{ImageQuery, ModelMetadata, Oracle};
use crate::error::{Error, Result};
use crate::simulator::{Scenario, SIMULATOR_MODEL_NAME};
use crate::space::AttributeSpace;

/// Calls the simulator directly; image references are ignored and the
/// `(tuple_id, value)` key selects the image.
#[derive(Debug, Clone)]
pub struct SimulatorOracle {
    scenario: Arc<Scenario>,
}

impl SimulatorOracle {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        Self { scenario }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }
}

impl Oracle for SimulatorOracle {
    fn metadata(&self) -> Result<ModelMetadata> {
        Ok(ModelMetadata {
            num_classes: self.scenario.num_classes(),
            name: SIMULATOR_MODEL_NAME.to_string(),
            input_size: [0, 0],
        })
    }

    fn fetch_rows(&self, queries: &[ImageQuery]) -> Result<Vec<Result<Vec<f64>>>> {
        Ok(queries
            .iter()
            .map(|q| {
                self.scenario
                    .simulate_logits(&q.tuple_id, &q.value)
                    .map_err(|e| Error::MalformedTuple {
                        tuple_id: Some(q.tuple_id.clone()),
                        value: q.value.clone(),
                        reason: e.to_string(),
                    })
            })
            .collect())
    }

    fn fetch_attribute_scores(
        &self,
        space: &AttributeSpace,
        queries: &[ImageQuery],
    ) -> Result<Vec<Vec<f64>>> {
        if queries.is_empty() {
            return Err(Error::Config(
                "attribute score request list is empty".into(),
            ));
        }
        if !space.same_values(self.scenario.space()) {
            return Err(Error::Config(format!(
                "simulator models attribute `{}`, not `{}`",
                self.scenario.space().name(),
                space.name()
            )));
        }
        queries
            .iter()
            .map(|q| self.scenario.attribute_scores(&q.tuple_id, &q.value))
            .collect()
    }
}
