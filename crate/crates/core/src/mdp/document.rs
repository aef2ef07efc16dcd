use super::{SafetySpec, TabularMdp};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// JSON form of an MDP together with its safety predicate.
///
/// ```json
/// {"num_states": 2, "num_actions": 2, "gamma": 0.9,
///  "transition": [[[...]]], "reward": [[...]],
///  "safe": [[...]], "action_embedding": [[...]]}
/// ```
///
/// `terminal`, `hazard`, `initial_state` and `r_max` are optional extras.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    #[serde(flatten)]
    pub mdp: TabularMdp,
    #[serde(flatten)]
    pub safety: SafetySpec,
}

impl MdpDocument {
    pub fn new(mdp: TabularMdp, safety: SafetySpec) -> Result<Self> {
        safety.check_compatible(&mdp)?;
        Ok(Self { mdp, safety })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        doc.safety.check_compatible(&doc.mdp)?;
        Ok(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn into_parts(self) -> (TabularMdp, SafetySpec) {
        (self.mdp, self.safety)
    }
}
