//! Categorical design spaces and configurations drawn from them.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONVOLUTION: &str = "Convolution";
pub const HEADS: &str = "Heads";
pub const AGGREGATION: &str = "Aggregation";
pub const ACTIVATION: &str = "Activation";
pub const HIDDEN: &str = "Hidden";
pub const CONNECTIVITY: &str = "Connectivity";
pub const PRE_LAYERS: &str = "Pre-layers";
pub const MP_LAYERS: &str = "MP-layers";
pub const POST_LAYERS: &str = "Post-layers";
pub const LR: &str = "LR";
pub const EPOCHS: &str = "Epochs";

/// One categorical axis of the space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub choices: Vec<String>,
}

impl Dimension {
    pub fn new(name: &str, choices: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            choices: choices.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn choice_index(&self, choice: &str) -> Option<usize> {
        self.choices.iter().position(|c| c == choice)
    }
}

/// An ordered list of independent categorical dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DesignSpace {
    dimensions: Vec<Dimension>,
}

impl<'de> Deserialize<'de> for DesignSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            dimensions: Vec<Dimension>,
        }
        let raw = Raw::deserialize(d)?;
        DesignSpace::new(raw.dimensions).map_err(serde::de::Error::custom)
    }
}

impl DesignSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Result<Self> {
        if dimensions.is_empty() {
            return Err(Error::InvalidSpace("space has no dimensions".into()));
        }
        let mut names = HashSet::new();
        for dim in &dimensions {
            if !names.insert(dim.name.as_str()) {
                return Err(Error::InvalidSpace(format!(
                    "duplicate dimension `{}`",
                    dim.name
                )));
            }
            let distinct: HashSet<_> = dim.choices.iter().collect();
            if dim.choices.len() < 2 || distinct.len() != dim.choices.len() {
                return Err(Error::InvalidSpace(format!(
                    "dimension `{}` needs at least two distinct choices",
                    dim.name
                )));
            }
        }
        Ok(Self { dimensions })
    }

    /// The eleven-dimension GNN space used for the task-model bank.
    pub fn gnn_default() -> Self {
        Self::new(vec![
            Dimension::new(
                CONVOLUTION,
                &["GeneralConv", "GCNConv", "SAGEConv", "GINConv", "GATConv"],
            ),
            Dimension::new(HEADS, &["1", "2", "4"]),
            Dimension::new(AGGREGATION, &["Sum", "Mean", "Max"]),
            Dimension::new(ACTIVATION, &["ReLU", "pReLU", "leaky_ReLU", "ELU"]),
            Dimension::new(HIDDEN, &["64", "256"]),
            Dimension::new(CONNECTIVITY, &["Stack", "Skip-Sum", "Skip-Concat"]),
            Dimension::new(PRE_LAYERS, &["1", "2"]),
            Dimension::new(MP_LAYERS, &["2", "4", "6", "8"]),
            Dimension::new(POST_LAYERS, &["2", "3"]),
            Dimension::new(LR, &["0.1", "0.001"]),
            Dimension::new(EPOCHS, &["200", "800", "1600"]),
        ])
        .expect("default space is valid")
    }

    /// The default space with `Hidden` and `Epochs` shrunk so a trial trains in
    /// well under a second on small synthetic graphs.
    pub fn desk_scale() -> Self {
        Self::gnn_default()
            .with_choices(HIDDEN, &["8", "16"])
            .and_then(|s| s.with_choices(EPOCHS, &["30", "100"]))
            .expect("desk override is valid")
    }

    /// Replaces the choices of an existing dimension.
    pub fn with_choices(mut self, name: &str, choices: &[&str]) -> Result<Self> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::MissingDimension(name.to_string()))?;
        self.dimensions[idx].choices = choices.iter().map(|c| c.to_string()).collect();
        Self::new(self.dimensions)
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dimensions
    }

    pub fn len(&self) -> usize {
        self.dimensions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dimensions.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dimensions.iter().position(|d| d.name == name)
    }

    pub fn dimension(&self, name: &str) -> Option<&Dimension> {
        self.dimensions.iter().find(|d| d.name == name)
    }

    /// Number of configurations in the Cartesian product.
    pub fn cardinality(&self) -> u128 {
        self.dimensions
            .iter()
            .map(|d| d.choices.len() as u128)
            .product()
    }

    /// Returns success iff `config` assigns a legal choice to every dimension.
    pub fn validate(&self, config: &DesignConfig) -> Result<()> {
        self.indices_of(config).map(|_| ())
    }

    /// Choice indices of `config`, aligned with the dimension order.
    pub fn indices_of(&self, config: &DesignConfig) -> Result<Vec<usize>> {
        self.dimensions
            .iter()
            .map(|dim| {
                let choice = config
                    .get(&dim.name)
                    .ok_or_else(|| Error::MissingDimension(dim.name.clone()))?;
                dim.choice_index(choice).ok_or_else(|| Error::UnknownChoice {
                    dimension: dim.name.clone(),
                    choice: choice.to_string(),
                })
            })
            .collect()
    }

    /// Builds a config from per-dimension choice indices.
    ///
    /// Panics if `indices` does not line up with the space.
    pub fn config_from_indices(&self, indices: &[usize]) -> DesignConfig {
        assert_eq!(indices.len(), self.dimensions.len());
        DesignConfig {
            assignment: self
                .dimensions
                .iter()
                .zip(indices)
                .map(|(d, &i)| (d.name.clone(), d.choices[i].clone()))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("space serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// One point in a design space: dimension name to chosen value.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DesignConfig {
    assignment: BTreeMap<String, String>,
}

impl DesignConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, dimension: &str, choice: &str) -> Self {
        self.set(dimension, choice);
        self
    }

    pub fn set(&mut self, dimension: &str, choice: &str) {
        self.assignment
            .insert(dimension.to_string(), choice.to_string());
    }

    pub fn remove(&mut self, dimension: &str) -> Option<String> {
        self.assignment.remove(dimension)
    }

    pub fn get(&self, dimension: &str) -> Option<&str> {
        self.assignment.get(dimension).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.assignment
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

impl std::fmt::Display for DesignConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_config() -> DesignConfig {
        let space = DesignSpace::gnn_default();
        space.config_from_indices(&vec![0; space.len()])
    }

    #[test]
    fn default_space_matches_table() {
        let space = DesignSpace::gnn_default();
        assert_eq!(space.len(), 11);
        assert_eq!(space.dimension(CONVOLUTION).unwrap().choices.len(), 5);
        assert_eq!(space.dimension(MP_LAYERS).unwrap().choices, ["2", "4", "6", "8"]);
        assert_eq!(space.dimension(EPOCHS).unwrap().choices, ["200", "800", "1600"]);
        assert_eq!(space.cardinality(), 5 * 3 * 3 * 4 * 2 * 3 * 2 * 4 * 2 * 2 * 3);
    }

    #[test]
    fn desk_scale_overrides_hidden_and_epochs() {
        let space = DesignSpace::desk_scale();
        assert_eq!(space.dimension(HIDDEN).unwrap().choices, ["8", "16"]);
        assert_eq!(space.dimension(EPOCHS).unwrap().choices, ["30", "100"]);
        assert_eq!(space.len(), 11);
    }

    #[test]
    fn validate_accepts_full_assignment() {
        DesignSpace::gnn_default().validate(&full_config()).unwrap();
    }

    #[test]
    fn validate_reports_missing_dimension() {
        let mut config = full_config();
        config.remove(AGGREGATION);
        match DesignSpace::gnn_default().validate(&config) {
            Err(Error::MissingDimension(d)) => assert_eq!(d, "Aggregation"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_reports_unknown_choice() {
        let config = full_config().with(CONVOLUTION, "FooConv");
        match DesignSpace::gnn_default().validate(&config) {
            Err(Error::UnknownChoice { dimension, choice }) => {
                assert_eq!(dimension, CONVOLUTION);
                assert_eq!(choice, "FooConv");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(DesignSpace::new(vec![]).is_err());
        assert!(DesignSpace::new(vec![Dimension::new("a", &["x"])]).is_err());
        assert!(DesignSpace::new(vec![Dimension::new("a", &["x", "x"])]).is_err());
        assert!(DesignSpace::new(vec![
            Dimension::new("a", &["x", "y"]),
            Dimension::new("a", &["x", "y"])
        ])
        .is_err());
    }

    #[test]
    fn json_round_trip() {
        let space = DesignSpace::desk_scale();
        assert_eq!(DesignSpace::from_json(&space.to_json()).unwrap(), space);
        assert!(DesignSpace::from_json(r#"{"dimensions":[]}"#).is_err());
    }
}
