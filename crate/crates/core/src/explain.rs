//! Class activation maps, Grad-CAM, guided backpropagation and their fusion.
//!
//! The building blocks are pure functions over tensors and grids:
//! [`compute_alpha`], [`grad_cam`], [`cam`], [`normalize`], [`upsample`] and
//! [`guided_grad_cam`]. [`explain`] wires them to a [`Graph`]: one forward
//! pass, a one-hot seed on the raw (pre-softmax) class score, a backward
//! sweep to the rectified feature maps of the chosen layer, and the map
//! arithmetic on top.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{GradientSeed, Graph, NodeId, Op, OpKind};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Cam,
    GradCam,
    GuidedBackprop,
    GuidedGradCam,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Cam,
        Method::GradCam,
        Method::GuidedBackprop,
        Method::GuidedGradCam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cam => "cam",
            Method::GradCam => "gradcam",
            Method::GuidedBackprop => "gbp",
            Method::GuidedGradCam => "guided-gradcam",
        }
    }

    /// Whether the method yields a coarse localization map.
    pub fn has_heatmap(self) -> bool {
        matches!(self, Method::Cam | Method::GradCam | Method::GuidedGradCam)
    }

    /// Whether the method yields a pixel-space attribution.
    pub fn has_attribution(self) -> bool {
        matches!(self, Method::GuidedBackprop | Method::GuidedGradCam)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cam" => Ok(Method::Cam),
            "gradcam" | "grad-cam" => Ok(Method::GradCam),
            "gbp" | "guided-backprop" => Ok(Method::GuidedBackprop),
            "guided-gradcam" | "ggc" => Ok(Method::GuidedGradCam),
            other => Err(format!(
                "unknown method `{other}` (expected cam, gradcam, gbp or guided-gradcam)"
            )),
        }
    }
}

/// A 2D saliency map over feature-map (or, after upsampling, image) pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    grid: Grid,
    normalized: bool,
    layer: String,
    class_index: usize,
    method: Method,
}

impl Heatmap {
    pub fn new(grid: Grid, method: Method) -> Self {
        Heatmap {
            grid,
            normalized: false,
            layer: String::new(),
            class_index: 0,
            method,
        }
    }

    pub fn with_source(mut self, layer: impl Into<String>, class_index: usize) -> Self {
        self.layer = layer.into();
        self.class_index = class_index;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn method(&self) -> Method {
        self.method
    }

    fn with_grid(&self, grid: Grid) -> Heatmap {
        Heatmap {
            grid,
            layer: self.layer.clone(),
            ..*self
        }
    }
}

/// Signed pixel-space attribution shaped like one model input, `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelAttribution {
    values: Tensor<f64>,
    method: Method,
}

impl PixelAttribution {
    pub fn new(values: Tensor<f64>, method: Method) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::ShapeMismatch {
                op: "pixel attribution",
                left: values.shape().to_vec(),
                right: vec![0; 3],
            });
        }
        Ok(PixelAttribution { values, method })
    }

    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    /// `[C, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }

    pub fn method(&self) -> Method {
        self.method
    }
}

/// Strips a leading batch dimension of one.
fn squeeze3<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 3]> {
    match *t.shape() {
        [k, u, v] | [1, k, u, v] => Ok([k, u, v]),
        _ => Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![0; 3],
        }),
    }
}

/// Feature-map importance weights: the spatial mean of each gradient map.
/// Accepts `[K, u, v]` or `[1, K, u, v]`.
pub fn compute_alpha<T: Scalar>(gradients: &Tensor<T>) -> Result<Vec<f64>> {
    let [_, u, v] = squeeze3(gradients, "compute_alpha")?;
    let z = (u * v) as f64;
    Ok(gradients
        .data()
        .chunks_exact(u * v)
        .map(|plane| plane.iter().map(|g| g.as_f64()).sum::<f64>() / z)
        .collect())
}

fn weighted_sum<T: Scalar>(activations: &Tensor<T>, weights: &[f64], op: &'static str) -> Result<Grid> {
    let [k, u, v] = squeeze3(activations, op)?;
    if weights.len() != k {
        return Err(Error::ShapeMismatch {
            op,
            left: activations.shape().to_vec(),
            right: vec![weights.len()],
        });
    }
    let mut acc = vec![0.0; u * v];
    for (plane, &w) in activations.data().chunks_exact(u * v).zip(weights) {
        for (a, &x) in acc.iter_mut().zip(plane) {
            *a += w * x.as_f64();
        }
    }
    Grid::new(u, v, acc)
}

/// `ReLU(Σ_k α_k · A^k)`, unnormalized.
pub fn grad_cam<T: Scalar>(activations: &Tensor<T>, alpha: &[f64]) -> Result<Heatmap> {
    let grid = weighted_sum(activations, alpha, "grad_cam")?.map(|x| x.max(0.0));
    Ok(Heatmap::new(grid, Method::GradCam))
}

/// `Σ_k w^c_k · A^k` with the final dense layer's weights, unnormalized and
/// not clamped.
pub fn cam<T: Scalar>(activations: &Tensor<T>, class_weights: &[f64]) -> Result<Heatmap> {
    let grid = weighted_sum(activations, class_weights, "cam")?;
    Ok(Heatmap::new(grid, Method::Cam))
}

/// Min-max scaling to `[0, 1]`. A constant map becomes all zeros.
pub fn normalize(map: &Heatmap) -> Heatmap {
    Heatmap {
        normalized: true,
        ..map.with_grid(map.grid.normalized())
    }
}

/// Corner-aligned bilinear upsampling; see [`Grid::upsample`].
pub fn upsample(map: &Heatmap, height: usize, width: usize) -> Result<Heatmap> {
    Ok(map.with_grid(map.grid.upsample(height, width)?))
}

/// Point-wise product of a guided-backprop image with an image-sized map,
/// broadcast across channels.
pub fn guided_grad_cam(gbp: &PixelAttribution, map: &Heatmap) -> Result<PixelAttribution> {
    let [c, h, w] = gbp.shape();
    if map.grid.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "guided_grad_cam",
            left: vec![c, h, w],
            right: map.grid.shape().to_vec(),
        });
    }
    let m = map.grid.data();
    let values = Tensor::from_fn(&[c, h, w], |i| gbp.values.data()[i] * m[i % (h * w)])?;
    PixelAttribution::new(values, Method::GuidedGradCam)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassSelector {
    /// Highest pre-softmax score; ties go to the lowest index.
    Auto,
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSelector {
    /// Rectified output of the last convolution.
    LastConv,
    Named(String),
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelector::LastConv => f.write_str("last-conv"),
            LayerSelector::Named(n) => f.write_str(n),
        }
    }
}

impl FromStr for LayerSelector {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "last-conv" => LayerSelector::LastConv,
            name => LayerSelector::Named(name.to_string()),
        })
    }
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Resolves a layer selector to the node whose output is explained. A
/// convolution directly followed by a ReLU resolves to that ReLU, so maps
/// are always taken over rectified activations.
pub fn resolve_layer<T: Scalar>(graph: &Graph<T>, selector: &LayerSelector) -> Result<NodeId> {
    let id = match selector {
        LayerSelector::LastConv => graph
            .nodes()
            .iter()
            .rposition(|n| n.op().kind() == OpKind::Conv2d)
            .ok_or_else(|| Error::UnknownLayer("last-conv (model has no conv2d layer)".into()))?,
        LayerSelector::Named(name) => graph
            .node_id(name)
            .ok_or_else(|| Error::UnknownLayer(name.clone()))?,
    };
    let node = graph.node(id).expect("resolved id");
    let id = match (node.op().kind(), graph.consumers(id).as_slice()) {
        (OpKind::Conv2d, &[next]) if graph.node(next).map(|n| n.op().kind()) == Some(OpKind::Relu) => next,
        _ => id,
    };
    let node = graph.node(id).expect("resolved id");
    if node.shape().len() != 3 {
        return Err(Error::Layer {
            layer: node.name().to_string(),
            reason: format!("output {:?} is not a [C, H, W] feature map", node.shape()),
        });
    }
    Ok(id)
}

/// For CAM: the feature node feeding global average pooling and the dense
/// score node it feeds.
pub fn cam_nodes<T: Scalar>(graph: &Graph<T>) -> Result<(NodeId, NodeId)> {
    let not_cam = || {
        Error::NotCamCompatible(
            "CAM needs global average pooling feeding a single dense score layer".into(),
        )
    };
    let dense = graph.score_node();
    let node = graph.node(dense).expect("score node");
    if node.op().kind() != OpKind::Dense {
        return Err(not_cam());
    }
    let mut src = node.input().ok_or_else(not_cam)?;
    if graph.node(src).map(|n| n.op().kind()) == Some(OpKind::Flatten) {
        src = graph.node(src).and_then(|n| n.input()).ok_or_else(not_cam)?;
    }
    let gap = graph.node(src).ok_or_else(not_cam)?;
    if gap.op().kind() != OpKind::GlobalAvgPool {
        return Err(not_cam());
    }
    let features = gap.input().ok_or_else(not_cam)?;
    Ok((features, dense))
}

/// Result of [`explain`]. Heatmaps are normalized; `upsampled` matches the
/// input's spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub method: Method,
    pub class_index: usize,
    pub score: f64,
    pub scores: Vec<f64>,
    pub layer: Option<String>,
    pub heatmap: Option<Heatmap>,
    pub upsampled: Option<Heatmap>,
    pub attribution: Option<PixelAttribution>,
}

fn squeeze_batch<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<f64>> {
    t.cast::<f64>().reshape(t.shape()[1..].to_vec())
}

/// Runs forward, seeds the selected class score and produces the requested
/// explanation. `input` must be a batch of one, `[1, C, H, W]`.
pub fn explain<T: Scalar>(
    graph: &mut Graph<T>,
    input: &Tensor<T>,
    class: &ClassSelector,
    layer: &LayerSelector,
    method: Method,
) -> Result<Explanation> {
    let dims = input.dims4("explain")?;
    if dims[0] != 1 {
        return Err(Error::Layer {
            layer: "input".into(),
            reason: format!("explanations need a batch of one, got {:?}", input.shape()),
        });
    }
    let [_, _, height, width] = dims;
    let scores = graph.forward(input)?.to_f64_vec();
    let class_index = match class {
        ClassSelector::Auto => argmax(&scores),
        &ClassSelector::Index(i) if i < scores.len() => i,
        &ClassSelector::Index(i) => {
            return Err(Error::ClassOutOfRange {
                index: i,
                classes: scores.len(),
            })
        }
    };
    let seed = GradientSeed::one_hot(graph.score_node(), class_index);

    let mut heatmap = None;
    let mut layer_name = None;
    match method {
        Method::Cam => {
            let (features, dense) = cam_nodes(graph)?;
            if let LayerSelector::Named(_) = layer {
                let wanted = resolve_layer(graph, layer)?;
                if wanted != features {
                    return Err(Error::NotCamCompatible(format!(
                        "CAM is defined on the maps feeding global average pooling (`{}`), not `{}`",
                        graph.node(features).expect("node").name(),
                        graph.node(wanted).expect("node").name()
                    )));
                }
            }
            let Op::Dense { weight, .. } = graph.node(dense).expect("node").op() else {
                unreachable!("cam_nodes returns a dense node")
            };
            let [_, k] = weight.dims2("cam")?;
            let w: Vec<f64> = weight.data()[class_index * k..][..k]
                .iter()
                .map(|x| x.as_f64())
                .collect();
            let name = graph.node(features).expect("node").name().to_string();
            let raw = cam(graph.output(features)?, &w)?;
            heatmap = Some(normalize(&raw.with_source(name.clone(), class_index)));
            layer_name = Some(name);
        }
        Method::GradCam | Method::GuidedGradCam => {
            let target = resolve_layer(graph, layer)?;
            let grads = graph.backward(&seed, target)?;
            let alpha = compute_alpha(&grads)?;
            let name = graph.node(target).expect("node").name().to_string();
            let raw = grad_cam(graph.output(target)?, &alpha)?;
            heatmap = Some(normalize(&raw.with_source(name.clone(), class_index)));
            layer_name = Some(name);
        }
        Method::GuidedBackprop => {}
    }
    if let Some(h) = heatmap.as_mut() {
        h.method = method;
    }
    let upsampled = heatmap
        .as_ref()
        .map(|h| upsample(h, height, width))
        .transpose()?;

    let attribution = if method.has_attribution() {
        let gbp = PixelAttribution::new(
            squeeze_batch(&graph.backward_guided(&seed)?)?,
            Method::GuidedBackprop,
        )?;
        Some(match &upsampled {
            Some(map) => guided_grad_cam(&gbp, map)?,
            None => gbp,
        })
    } else {
        None
    };

    Ok(Explanation {
        method,
        class_index,
        score: scores[class_index],
        scores,
        layer: layer_name,
        heatmap,
        upsampled,
        attribution,
    })
}
