//! Prunable-layer topology: shapes, modalities and weight tying.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::{DType, TensorMap};

/// User-facing model description. Shapes always come from the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecConfig {
    pub modalities: Vec<String>,
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub name: String,
    pub modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_group: Option<String>,
}

impl ModelSpecConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ModelSpec(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }
}

/// One prunable weight matrix, viewed as a bipartite graph from `in_dim`
/// input nodes to `out_dim` output nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
    pub modality: String,
    pub depth_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_group: Option<String>,
}

impl LayerSpec {
    pub fn size(&self) -> usize {
        self.out_dim * self.in_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunableModel {
    pub modalities: Vec<String>,
    pub layers: Vec<LayerSpec>,
    pub global_param_count: usize,
}

/// Layers of one modality, ordered by depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityGroup<'a> {
    pub modality: &'a str,
    pub layers: Vec<&'a LayerSpec>,
}

/// Validates `config` against the tensors present in `checkpoint`.
pub fn load_model_spec(config: &ModelSpecConfig, checkpoint: &TensorMap) -> Result<PrunableModel> {
    let mut layers = Vec::with_capacity(config.layers.len());
    let mut next_depth: HashMap<&str, usize> = HashMap::new();
    for lc in &config.layers {
        let tensor = checkpoint
            .get(&lc.name)
            .ok_or_else(|| Error::MissingTensor(lc.name.clone()))?;
        if tensor.dtype() != DType::F32 {
            return Err(Error::ShapeMismatch {
                name: lc.name.clone(),
                detail: format!(
                    "prunable weights must be F32, found {}",
                    tensor.dtype().as_str()
                ),
            });
        }
        let &[out_dim, in_dim] = tensor.shape() else {
            return Err(Error::ShapeMismatch {
                name: lc.name.clone(),
                detail: format!("expected a 2-D weight, found shape {:?}", tensor.shape()),
            });
        };
        let counter = next_depth.entry(lc.modality.as_str()).or_insert(0);
        let depth_index = lc.depth_index.unwrap_or(*counter);
        *counter += 1;
        layers.push(LayerSpec {
            name: lc.name.clone(),
            out_dim,
            in_dim,
            modality: lc.modality.clone(),
            depth_index,
            tie_group: lc.tie_group.clone(),
        });
    }
    PrunableModel::new(config.modalities.clone(), layers)
}

impl PrunableModel {
    /// Builds and validates a model from explicit layer specs.
    pub fn new(modalities: Vec<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        let declared: HashSet<&str> = modalities.iter().map(String::as_str).collect();
        if declared.len() != modalities.len() {
            return Err(Error::ModelSpec("duplicate modality declaration".into()));
        }
        let mut names = HashSet::new();
        let mut positions = HashSet::new();
        let mut ties: BTreeMap<&str, &LayerSpec> = BTreeMap::new();
        for layer in &layers {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::ModelSpec(format!(
                    "duplicate layer '{}'",
                    layer.name
                )));
            }
            if !declared.contains(layer.modality.as_str()) {
                return Err(Error::UnknownModality {
                    layer: layer.name.clone(),
                    modality: layer.modality.clone(),
                });
            }
            if layer.out_dim == 0 || layer.in_dim == 0 {
                return Err(Error::ShapeMismatch {
                    name: layer.name.clone(),
                    detail: "dimensions must be at least 1".into(),
                });
            }
            if !positions.insert((layer.modality.as_str(), layer.depth_index)) {
                return Err(Error::ModelSpec(format!(
                    "duplicate depth_index {} in modality '{}'",
                    layer.depth_index, layer.modality
                )));
            }
            if let Some(group) = &layer.tie_group {
                match ties.get(group.as_str()) {
                    None => {
                        ties.insert(group, layer);
                    }
                    Some(first) => {
                        if (first.out_dim, first.in_dim) != (layer.out_dim, layer.in_dim) {
                            return Err(Error::TieShapeConflict(group.clone()));
                        }
                        if first.modality != layer.modality {
                            return Err(Error::TieModalityConflict(group.clone()));
                        }
                    }
                }
            }
        }
        let global_param_count = layers.iter().map(LayerSpec::size).sum();
        Ok(Self {
            modalities,
            layers,
            global_param_count,
        })
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Name of the member whose mask every layer in `name`'s tie group shares.
    pub fn canonical_of<'a>(&'a self, name: &'a str) -> &'a str {
        let Some(group) = self.layer(name).and_then(|l| l.tie_group.as_deref()) else {
            return name;
        };
        self.layers
            .iter()
            .find(|l| l.tie_group.as_deref() == Some(group))
            .map(|l| l.name.as_str())
            .unwrap_or(name)
    }

    pub fn is_canonical(&self, layer: &LayerSpec) -> bool {
        self.canonical_of(&layer.name) == layer.name
    }

    /// Parameters counted once per tie group.
    pub fn unique_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| self.is_canonical(l))
            .map(LayerSpec::size)
            .sum()
    }

    /// Stable digest-friendly JSON of the topology.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: PrunableModel =
            serde_json::from_str(text).map_err(|e| Error::ModelSpec(e.to_string()))?;
        Self::new(raw.modalities, raw.layers)
    }
}

/// Groups layers by modality in declaration order, each sorted by depth.
pub fn partition_by_modality(model: &PrunableModel) -> Vec<ModalityGroup<'_>> {
    model
        .modalities
        .iter()
        .filter_map(|m| {
            let mut layers: Vec<&LayerSpec> =
                model.layers.iter().filter(|l| &l.modality == m).collect();
            if layers.is_empty() {
                return None;
            }
            layers.sort_by_key(|l| l.depth_index);
            Some(ModalityGroup {
                modality: m.as_str(),
                layers,
            })
        })
        .collect()
}

/// Tie groups as lists of layer names. Untied layers form singletons;
/// members keep listing order (the first is canonical) and groups are
/// ordered by their first member's name.
pub fn resolve_tying(model: &PrunableModel) -> Vec<Vec<String>> {
    let mut by_tag: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut groups = Vec::new();
    for layer in &model.layers {
        match &layer.tie_group {
            Some(tag) => by_tag.entry(tag).or_default().push(layer.name.clone()),
            None => groups.push(vec![layer.name.clone()]),
        }
    }
    groups.extend(by_tag.into_values());
    groups.sort_by(|a, b| a[0].cmp(&b[0]));
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorstore::DenseTensor;

    fn checkpoint(shapes: &[(&str, usize, usize)]) -> TensorMap {
        let mut tm = TensorMap::new();
        for &(name, o, i) in shapes {
            tm.insert(
                name,
                DenseTensor::f32(vec![o, i], vec![0.5; o * i]).unwrap(),
            );
        }
        tm
    }

    fn config(json: &str) -> ModelSpecConfig {
        ModelSpecConfig::from_json(json).unwrap()
    }

    #[test]
    fn counts_parameters() {
        let ck = checkpoint(&[("a", 4, 3), ("b", 3, 4)]);
        let cfg = config(
            r#"{"modalities":["vision"],"layers":[{"name":"a","modality":"vision"},{"name":"b","modality":"vision"}]}"#,
        );
        let model = load_model_spec(&cfg, &ck).unwrap();
        assert_eq!(model.global_param_count, 24);
        assert_eq!(model.layers[1].depth_index, 1);
        assert_eq!(load_model_spec(&cfg, &ck).unwrap(), model);
    }

    #[test]
    fn missing_tensor() {
        let ck = checkpoint(&[("a", 4, 3)]);
        let cfg =
            config(r#"{"modalities":["vision"],"layers":[{"name":"zz","modality":"vision"}]}"#);
        let err = load_model_spec(&cfg, &ck).unwrap_err();
        assert!(err.to_string().contains("missing tensor"));
    }

    #[test]
    fn tie_shape_conflict() {
        let ck = checkpoint(&[("a", 4, 3), ("b", 3, 3)]);
        let cfg = config(
            r#"{"modalities":["text"],"layers":[{"name":"a","modality":"text","tie_group":"med"},{"name":"b","modality":"text","tie_group":"med"}]}"#,
        );
        let err = load_model_spec(&cfg, &ck).unwrap_err();
        assert!(err.to_string().contains("tie shape conflict"));
    }

    #[test]
    fn unknown_modality_and_non_matrix() {
        let ck = checkpoint(&[("a", 4, 3)]);
        let cfg = config(r#"{"modalities":["vision"],"layers":[{"name":"a","modality":"audio"}]}"#);
        assert!(matches!(
            load_model_spec(&cfg, &ck),
            Err(Error::UnknownModality { .. })
        ));

        let mut ck = TensorMap::new();
        ck.insert("bias", DenseTensor::f32(vec![3], vec![0.0; 3]).unwrap());
        let cfg =
            config(r#"{"modalities":["vision"],"layers":[{"name":"bias","modality":"vision"}]}"#);
        assert!(matches!(
            load_model_spec(&cfg, &ck),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn layer(name: &str, modality: &str, depth: usize, tie: Option<&str>) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            out_dim: 2,
            in_dim: 2,
            modality: modality.into(),
            depth_index: depth,
            tie_group: tie.map(String::from),
        }
    }

    #[test]
    fn partitions_by_modality() {
        let model = PrunableModel::new(
            vec!["vision".into(), "text".into()],
            vec![
                layer("t1", "text", 1, None),
                layer("v0", "vision", 0, None),
                layer("t0", "text", 0, None),
                layer("v1", "vision", 1, None),
                layer("v2", "vision", 2, None),
            ],
        )
        .unwrap();
        let parts = partition_by_modality(&model);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].modality, "vision");
        assert_eq!(parts[0].layers.len(), 3);
        let text: Vec<_> = parts[1].layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(text, ["t0", "t1"]);

        let empty = PrunableModel::new(vec!["vision".into()], vec![]).unwrap();
        assert!(partition_by_modality(&empty).is_empty());
    }

    #[test]
    fn tying_groups() {
        let untied = PrunableModel::new(
            vec!["text".into()],
            vec![layer("a", "text", 0, None), layer("b", "text", 1, None)],
        )
        .unwrap();
        assert_eq!(
            resolve_tying(&untied),
            vec![vec!["a".to_string()], vec!["b".to_string()]]
        );

        let model = PrunableModel::new(
            vec!["text".into()],
            vec![
                layer("enc.q", "text", 0, Some("q")),
                layer("x", "text", 1, None),
                layer("y", "text", 2, None),
                layer("dec.q", "text", 3, Some("q")),
                layer("z", "text", 4, None),
            ],
        )
        .unwrap();
        let groups = resolve_tying(&model);
        assert_eq!(groups.len(), 4);
        assert_eq!(groups[0], vec!["enc.q".to_string(), "dec.q".to_string()]);
        assert_eq!(model.canonical_of("dec.q"), "enc.q");
        assert_eq!(model.unique_param_count(), 16);
    }

    #[test]
    fn duplicate_depth_rejected() {
        let err = PrunableModel::new(
            vec!["text".into()],
            vec![layer("a", "text", 0, None), layer("b", "text", 0, None)],
        );
        assert!(err.is_err());
    }
}
