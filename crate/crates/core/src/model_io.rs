//! Model interchange: a JSON architecture description plus a GCW1 weight
//! file.
//!
//! GCW1 layout (all integers little-endian):
//!
//! ```text
//! "GCW1"                      4 bytes magic
//! u32 parameter count
//! per parameter:
//!   u32 name length, UTF-8 name
//!   u8  dtype tag (0 = f32, 1 = f64)
//!   u32 ndim, ndim × u32 dims
//!   row-major little-endian payload
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Op};
use crate::error::{Error, Result};
use crate::kernels::{Conv2dParams, Pool2dParams};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"GCW1";
/// Magic plus parameter count.
pub const HEADER_LEN: usize = 8;

fn one_one() -> [usize; 2] {
    [1, 1]
}

/// One layer of a [`ModelSpec`], tagged by `"type"` in JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "one_one")]
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
    },
    Relu {
        name: String,
    },
    Maxpool2d {
        name: String,
        window: [usize; 2],
        /// Defaults to the window size.
        #[serde(default)]
        stride: Option<[usize; 2]>,
    },
    Gap {
        name: String,
    },
    Flatten {
        name: String,
    },
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    Softmax {
        name: String,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv2d { name, .. }
            | LayerSpec::Relu { name }
            | LayerSpec::Maxpool2d { name, .. }
            | LayerSpec::Gap { name }
            | LayerSpec::Flatten { name }
            | LayerSpec::Dense { name, .. }
            | LayerSpec::Softmax { name } => name,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu { .. } => "relu",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
            LayerSpec::Gap { .. } => "gap",
            LayerSpec::Flatten { .. } => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax { .. } => "softmax",
        }
    }

    /// Names and shapes of this layer's parameters, in file order.
    pub fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            LayerSpec::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (
                    format!("{name}.weight"),
                    vec![*out_channels, *in_channels, kernel[0], kernel[1]],
                ),
                (format!("{name}.bias"), vec![*out_channels]),
            ],
            LayerSpec::Dense {
                name,
                in_features,
                out_features,
            } => vec![
                (format!("{name}.weight"), vec![*out_features, *in_features]),
                (format!("{name}.bias"), vec![*out_features]),
            ],
            _ => Vec::new(),
        }
    }
}

/// Per-channel input normalisation: `(sample / 255 - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Preprocess {
    pub fn uniform(channels: usize, mean: f64, std: f64) -> Self {
        Preprocess {
            mean: vec![mean; channels],
            std: vec![std; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<Preprocess>,
}

/// A layer with its per-sample output shape, as reported by `info`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub parameters: usize,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Dense { out_features, .. } => Some(*out_features),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Preprocessing from the model spec, or mean 0.5 / std 0.5 per channel.
    pub fn preprocess(&self) -> Preprocess {
        self.preprocess
            .clone()
            .unwrap_or_else(|| Preprocess::uniform(self.input_shape[0], 0.5, 0.5))
    }

    /// Checks names, layer ordering rules and the shape chain.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("model has no layers".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "input_shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        let mut seen = HashSet::new();
        for layer in &self.layers {
            let name = layer.name();
            if name.is_empty() || name == "input" {
                return Err(Error::InvalidSpec(format!("invalid layer name `{name}`")));
            }
            if !seen.insert(name) {
                return Err(Error::InvalidSpec(format!("duplicate layer name `{name}`")));
            }
        }
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Softmax { .. }) && i != n - 1 {
                return Err(Error::InvalidSpec(format!(
                    "softmax layer `{}` must be last",
                    layer.name()
                )));
            }
        }
        let score_idx = match self.layers[n - 1] {
            LayerSpec::Softmax { .. } if n >= 2 => n - 2,
            LayerSpec::Softmax { .. } => {
                return Err(Error::InvalidSpec("softmax needs a score layer before it".into()))
            }
            _ => n - 1,
        };
        if !matches!(self.layers[score_idx], LayerSpec::Dense { .. }) {
            return Err(Error::InvalidSpec(format!(
                "terminal score layer `{}` must be dense",
                self.layers[score_idx].name()
            )));
        }
        if let Some(labels) = &self.class_labels {
            if labels.len() != self.num_classes() {
                return Err(Error::InvalidSpec(format!(
                    "{} class labels for {} classes",
                    labels.len(),
                    self.num_classes()
                )));
            }
        }
        if let Some(p) = &self.preprocess {
            let c = self.input_shape[0];
            if p.mean.len() != c || p.std.len() != c || p.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
                return Err(Error::InvalidSpec(
                    "preprocess needs one mean and one positive std per input channel".into(),
                ));
            }
        }
        self.layer_table().map(|_| ())
    }

    /// Per-sample output shape of every layer, checking the chain.
    pub fn layer_table(&self) -> Result<Vec<LayerInfo>> {
        let mut shape = self.input_shape.to_vec();
        let mut table = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let chain_err = |reason: String| Error::ShapeChain {
                layer: layer.name().to_string(),
                reason,
            };
            shape = match layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let [c, h, w] = spatial(&shape).map_err(chain_err)?;
                    if c != *in_channels {
                        return Err(chain_err(format!("expects {in_channels} input channels, got {c}")));
                    }
                    if *out_channels == 0 || kernel.contains(&0) || stride.contains(&0) {
                        return Err(chain_err("zero-sized hyperparameter".into()));
                    }
                    let params = Conv2dParams {
                        stride: *stride,
                        padding: *padding,
                    };
                    let [_, k, oh, ow] = crate::kernels::conv2d_output_shape(
                        [1, c, h, w],
                        [*out_channels, c, kernel[0], kernel[1]],
                        params,
                    )
                    .map_err(|e| chain_err(e.to_string()))?;
                    vec![k, oh, ow]
                }
                LayerSpec::Relu { .. } => shape,
                LayerSpec::Maxpool2d { window, stride, .. } => {
                    let [c, h, w] = spatial(&shape).map_err(chain_err)?;
                    if window.contains(&0) {
                        return Err(chain_err("zero-sized window".into()));
                    }
                    let params = Pool2dParams {
                        window: *window,
                        stride: stride.unwrap_or(*window),
                    };
                    let [_, c, oh, ow] = crate::kernels::maxpool2d_output_shape([1, c, h, w], params)
                        .map_err(|e| chain_err(e.to_string()))?;
                    vec![c, oh, ow]
                }
                LayerSpec::Gap { .. } => {
                    let [c, _, _] = spatial(&shape).map_err(chain_err)?;
                    vec![c]
                }
                LayerSpec::Flatten { .. } => vec![shape.iter().product()],
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    ..
                } => {
                    if shape != [*in_features] {
                        return Err(chain_err(format!(
                            "expects [{in_features}] features, got {shape:?}"
                        )));
                    }
                    if *out_features == 0 {
                        return Err(chain_err("zero out_features".into()));
                    }
                    vec![*out_features]
                }
                LayerSpec::Softmax { .. } => {
                    if shape.len() != 1 {
                        return Err(chain_err(format!("expects a flat score vector, got {shape:?}")));
                    }
                    shape
                }
            };
            table.push(LayerInfo {
                name: layer.name().to_string(),
                kind: layer.type_name(),
                output_shape: shape.clone(),
                parameters: layer
                    .parameters()
                    .iter()
                    .map(|(_, s)| s.iter().product::<usize>())
                    .sum(),
            });
        }
        Ok(table)
    }

    /// True when the model ends in global average pooling feeding a single
    /// dense layer (optionally through a flatten and followed by softmax).
    pub fn is_cam_compatible(&self) -> bool {
        self.cam_layers().is_some()
    }

    /// `(feature layer index, dense layer index)` for CAM-compatible models.
    pub(crate) fn cam_layers(&self) -> Option<(usize, usize)> {
        let mut idx = self.layers.len() - 1;
        if matches!(self.layers[idx], LayerSpec::Softmax { .. }) {
            idx = idx.checked_sub(1)?;
        }
        let dense = idx;
        if !matches!(self.layers[dense], LayerSpec::Dense { .. }) {
            return None;
        }
        idx = idx.checked_sub(1)?;
        if matches!(self.layers[idx], LayerSpec::Flatten { .. }) {
            idx = idx.checked_sub(1)?;
        }
        if !matches!(self.layers[idx], LayerSpec::Gap { .. }) {
            return None;
        }
        let features = idx.checked_sub(1)?;
        Some((features, dense))
    }
}

fn spatial(shape: &[usize]) -> std::result::Result<[usize; 3], String> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format!("needs a [C, H, W] input, got {shape:?}")),
    }
}

/// A parameter tensor in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Param {
    pub fn dtype(&self) -> DType {
        match self {
            Param::F32(_) => DType::F32,
            Param::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Param::F32(t) => t.shape(),
            Param::F64(t) => t.shape(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Param::F32(t) => t.cast(),
            Param::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for Param {
    fn from(t: Tensor<f32>) -> Self {
        Param::F32(t)
    }
}

impl From<Tensor<f64>> for Param {
    fn from(t: Tensor<f64>) -> Self {
        Param::F64(t)
    }
}

/// Named parameters (`"<layer>.weight"`, `"<layer>.bias"`) in insertion
/// order. Loading preserves file order, so saving a loaded store reproduces
/// the file byte for byte.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    params: IndexMap<String, Param>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter. A replaced parameter keeps its
    /// original position.
    pub fn insert(&mut self, name: impl Into<String>, param: impl Into<Param>) {
        self.params.insert(name.into(), param.into());
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Every parameterised layer has all its parameters with matching
    /// shapes, and no parameter lacks a layer.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let mut expected = HashSet::new();
        for layer in &spec.layers {
            for (name, shape) in layer.parameters() {
                let param = self
                    .params
                    .get(&name)
                    .ok_or_else(|| Error::MissingParameter(name.clone()))?;
                if param.shape() != shape.as_slice() {
                    return Err(Error::ParameterShape {
                        name,
                        expected: shape,
                        found: param.shape().to_vec(),
                    });
                }
                expected.insert(name);
            }
        }
        if let Some(orphan) = self.params.keys().find(|k| !expected.contains(*k)) {
            return Err(Error::OrphanParameter(orphan.clone()));
        }
        Ok(())
    }

    /// Reorders parameters into the order the model spec declares them.
    pub fn sorted_for(&self, spec: &ModelSpec) -> WeightStore {
        let mut params = IndexMap::new();
        for layer in &spec.layers {
            for (name, _) in layer.parameters() {
                if let Some(p) = self.params.get(&name) {
                    params.insert(name, p.clone());
                }
            }
        }
        for (k, v) in &self.params {
            params.entry(k.clone()).or_insert_with(|| v.clone());
        }
        WeightStore { params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, param) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(param.dtype().tag());
            out.extend_from_slice(&(param.shape().len() as u32).to_le_bytes());
            for &d in param.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match param {
                Param::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Param::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::WeightFormat("bad magic, expected GCW1".into()));
        }
        let count = r.u32("parameter count")?;
        let mut params = IndexMap::new();
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::WeightFormat(format!("parameter {i}: name is not UTF-8")))?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::WeightFormat(format!("`{name}`: unknown dtype tag {tag}")))?;
            let ndim = r.u32("ndim")? as usize;
            if ndim == 0 {
                return Err(Error::WeightFormat(format!("`{name}`: zero dimensions")));
            }
            let mut dims = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                dims.push(r.u32("dims")? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c > 0)
                .ok_or_else(|| Error::WeightFormat(format!("`{name}`: invalid dims {dims:?}")))?;
            let nbytes = count
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::WeightFormat(format!("`{name}`: payload too large")))?;
            let payload = r.take(nbytes, "payload")?;
            let param = match dtype {
                DType::F32 => Param::F32(Tensor::from_parts(
                    dims,
                    payload.chunks_exact(4).map(f32::read_le).collect(),
                )),
                DType::F64 => Param::F64(Tensor::from_parts(
                    dims,
                    payload.chunks_exact(8).map(f64::read_le).collect(),
                )),
            };
            if params.insert(name.clone(), param).is_some() {
                return Err(Error::WeightFormat(format!("duplicate parameter `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightFormat(format!(
                "{} trailing bytes after last parameter",
                bytes.len() - r.pos
            )));
        }
        Ok(WeightStore { params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::WeightFormat(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<ModelSpec> {
    ModelSpec::from_json(&fs::read_to_string(path)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::from_bytes(&fs::read(path)?)
}

/// Loads and cross-validates an architecture and its weights.
pub fn load_model(
    spec_path: impl AsRef<Path>,
    weights_path: impl AsRef<Path>,
) -> Result<(ModelSpec, WeightStore)> {
    let spec = load_spec(spec_path)?;
    let store = load_weights(weights_path)?;
    store.validate(&spec)?;
    Ok((spec, store))
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes())?;
    Ok(())
}

/// Builds a graph in precision `T`; parameters stored in another precision
/// are converted. Layer names become node names.
pub fn build_graph<T: Scalar>(spec: &ModelSpec, store: &WeightStore) -> Result<Graph<T>> {
    spec.validate()?;
    store.validate(spec)?;
    let param = |name: String| -> Arc<Tensor<T>> {
        Arc::new(store.get(&name).expect("validated").to_tensor())
    };
    let mut graph = Graph::new(&spec.input_shape)?;
    for layer in &spec.layers {
        let name = layer.name();
        let op = match layer {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => Op::Conv2d {
                weight: param(format!("{name}.weight")),
                bias: param(format!("{name}.bias")),
                params: Conv2dParams {
                    stride: *stride,
                    padding: *padding,
                },
            },
            LayerSpec::Relu { .. } => Op::Relu,
            LayerSpec::Maxpool2d { window, stride, .. } => Op::MaxPool2d(Pool2dParams {
                window: *window,
                stride: stride.unwrap_or(*window),
            }),
            LayerSpec::Gap { .. } => Op::GlobalAvgPool,
            LayerSpec::Flatten { .. } => Op::Flatten,
            LayerSpec::Dense { .. } => Op::Dense {
                weight: param(format!("{name}.weight")),
                bias: param(format!("{name}.bias")),
            },
            LayerSpec::Softmax { .. } => Op::Softmax,
        };
        graph.push(name, op)?;
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
        "name": "toy",
        "input_shape": [1, 4, 4],
        "layers": [
            {"name": "conv1", "type": "conv2d", "in_channels": 1, "out_channels": 2, "kernel": [3, 3], "padding": [1, 1]},
            {"name": "relu1", "type": "relu"},
            {"name": "gap", "type": "gap"},
            {"name": "fc", "type": "dense", "in_features": 2, "out_features": 2}
        ]
    }"#;

    fn toy_store() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("conv1.weight", Tensor::<f32>::zeros(&[2, 1, 3, 3]).unwrap());
        s.insert("conv1.bias", Tensor::<f32>::zeros(&[2]).unwrap());
        s.insert("fc.weight", Tensor::<f32>::zeros(&[2, 2]).unwrap());
        s.insert("fc.bias", Tensor::<f32>::zeros(&[2]).unwrap());
        s
    }

    #[test]
    fn toy_spec_parses_and_chains() {
        let spec = ModelSpec::from_json(TOY).unwrap();
        let table = spec.layer_table().unwrap();
        assert_eq!(table.len(), 4);
        assert_eq!(table[0].output_shape, [2, 4, 4]);
        assert_eq!(table[2].output_shape, [2]);
        assert_eq!(table[3].output_shape, [2]);
        assert!(spec.is_cam_compatible());
        assert_eq!(spec.preprocess(), Preprocess::uniform(1, 0.5, 0.5));
    }

    #[test]
    fn rejects_broken_chain_naming_layer() {
        let bad = TOY.replace("\"in_features\": 2", "\"in_features\": 3");
        match ModelSpec::from_json(&bad) {
            Err(Error::ShapeChain { layer, .. }) => assert_eq!(layer, "fc"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_fields_and_types() {
        let bad = TOY.replace("\"type\": \"relu\"", "\"type\": \"relu\", \"slope\": 0.1");
        assert!(matches!(ModelSpec::from_json(&bad), Err(Error::Parse(_))));
        let bad = TOY.replace("\"type\": \"relu\"", "\"type\": \"gelu\"");
        assert!(matches!(ModelSpec::from_json(&bad), Err(Error::Parse(_))));
    }

    #[test]
    fn rejects_misplaced_softmax_and_duplicate_names() {
        let bad = TOY.replace(
            "{\"name\": \"relu1\", \"type\": \"relu\"}",
            "{\"name\": \"relu1\", \"type\": \"softmax\"}",
        );
        assert!(matches!(ModelSpec::from_json(&bad), Err(Error::InvalidSpec(_))));
        let bad = TOY.replace("\"name\": \"relu1\"", "\"name\": \"conv1\"");
        assert!(matches!(ModelSpec::from_json(&bad), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn missing_orphan_and_mismatched_parameters() {
        let spec = ModelSpec::from_json(TOY).unwrap();
        assert!(toy_store().validate(&spec).is_ok());

        let mut s = toy_store();
        s.remove("conv1.bias");
        assert!(matches!(s.validate(&spec), Err(Error::MissingParameter(n)) if n == "conv1.bias"));

        let mut s = toy_store();
        s.insert("fc2.weight", Tensor::<f32>::zeros(&[1]).unwrap());
        assert!(matches!(s.validate(&spec), Err(Error::OrphanParameter(n)) if n == "fc2.weight"));

        let mut s = toy_store();
        s.insert("fc.weight", Tensor::<f32>::zeros(&[2, 3]).unwrap());
        assert!(matches!(s.validate(&spec), Err(Error::ParameterShape { .. })));
    }

    #[test]
    fn empty_store_is_header_only() {
        assert_eq!(WeightStore::new().to_bytes().len(), HEADER_LEN);
    }

    #[test]
    fn single_param_file_length() {
        let mut s = WeightStore::new();
        s.insert("w", Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let name_record = 4 + 1 + 1 + 4 + 2 * 4;
        assert_eq!(s.to_bytes().len(), HEADER_LEN + name_record + 16);
        assert_eq!(WeightStore::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    #[test]
    fn truncation_and_garbage_are_categorized() {
        let bytes = toy_store().to_bytes();
        for cut in 0..bytes.len() {
            assert!(matches!(
                WeightStore::from_bytes(&bytes[..cut]),
                Err(Error::WeightFormat(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(WeightStore::from_bytes(&extra), Err(Error::WeightFormat(_))));
        let mut bad_tag = bytes;
        bad_tag[8 + 4 + "conv1.weight".len()] = 9;
        assert!(matches!(WeightStore::from_bytes(&bad_tag), Err(Error::WeightFormat(_))));
    }

    #[test]
    fn build_graph_follows_spec_order() {
        let spec = ModelSpec::from_json(TOY).unwrap();
        let g = build_graph::<f64>(&spec, &toy_store()).unwrap();
        assert_eq!(g.num_layers(), 4);
        let names: Vec<_> = g.nodes()[1..].iter().map(|n| n.name()).collect();
        assert_eq!(names, ["conv1", "relu1", "gap", "fc"]);
    }

    #[test]
    fn softmax_spec_exposes_both_nodes() {
        let text = TOY.replace(
            "\"out_features\": 2}",
            "\"out_features\": 2}, {\"name\": \"prob\", \"type\": \"softmax\"}",
        );
        let spec = ModelSpec::from_json(&text).unwrap();
        let g = build_graph::<f64>(&spec, &toy_store()).unwrap();
        assert_eq!(g.node(g.score_node()).unwrap().name(), "fc");
        assert_eq!(g.softmax_node(), g.node_id("prob"));
    }
}
