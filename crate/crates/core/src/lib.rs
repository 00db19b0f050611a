//! A small CNN inference engine with reverse-mode gradients, built to
//! produce class-discriminative visual explanations.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`] and [`kernels`]: dense NCHW tensors and the convolution,
//!   pooling, affine and activation kernels with their backward passes.
//! - [`autodiff`]: a recorded [`Graph`] that runs forward once and can then
//!   differentiate any scalar node with respect to any ancestor, with an
//!   optional guided-ReLU backward rule.
//! - [`model_io`]: JSON architecture descriptions and GCW1 weight files.
//! - [`explain`]: CAM, Grad-CAM, guided backpropagation and Guided Grad-CAM.
//! - [`faithfulness`]: occlusion sensitivity maps and Spearman scoring of
//!   saliency maps against them.
//! - [`imaging`]: PPM/PNG I/O, preprocessing and rendering.
//!
//! ```
//! use saliency::{explain, ClassSelector, LayerSelector, Method};
//! # use std::sync::Arc;
//! # use saliency::{Graph, Op, Tensor, Conv2dParams};
//! # fn main() -> saliency::Result<()> {
//! # let mut graph = Graph::<f64>::new(&[1, 4, 4])?;
//! # graph.push("conv", Op::Conv2d {
//! #     weight: Arc::new(Tensor::full(&[2, 1, 1, 1], 1.0)?),
//! #     bias: Arc::new(Tensor::new(vec![2], vec![0.0, -0.5])?),
//! #     params: Conv2dParams::default(),
//! # })?;
//! # graph.push("relu", Op::Relu)?;
//! # graph.push("gap", Op::GlobalAvgPool)?;
//! # graph.push("fc", Op::Dense {
//! #     weight: Arc::new(Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0])?),
//! #     bias: Arc::new(Tensor::zeros(&[2])?),
//! # })?;
//! let image = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 4) as f64 * 0.3)?;
//! let ex = explain(&mut graph, &image, &ClassSelector::Auto, &LayerSelector::LastConv, Method::GradCam)?;
//! let map = ex.upsampled.unwrap();
//! assert_eq!(map.grid().shape(), [4, 4]);
//! assert!(map.grid().data().iter().all(|v| (0.0..=1.0).contains(v)));
//! # Ok(())
//! # }
//! ```

pub mod autodiff;
pub mod error;
pub mod explain;
pub mod faithfulness;
pub mod grid;
pub mod imaging;
pub mod kernels;
pub mod model_io;
pub mod tensor;

pub use autodiff::{GradientSeed, Graph, Node, NodeId, Op, OpKind};
pub use error::{Error, Result};
pub use explain::{
    cam, compute_alpha, explain, grad_cam, guided_grad_cam, normalize, upsample, ClassSelector,
    Explanation, Heatmap, LayerSelector, Method, PixelAttribution,
};
pub use faithfulness::{
    faithfulness_report, occlusion_map, pool_saliency_to_patches, spearman, CorrelationReport,
    Fill, OcclusionMap, OcclusionParams, ReportMethod, Saliency,
};
pub use grid::Grid;
pub use imaging::{read_image, render_attribution, render_overlay, write_image, FillMode, Image};
pub use kernels::{Conv2dParams, Pool2dParams};
pub use model_io::{build_graph, load_model, save_weights, LayerSpec, ModelSpec, Preprocess, WeightStore};
pub use tensor::{DType, Scalar, Tensor};

// The guide's code listings compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model-format.md")]
    mod model_format {}
    #[doc = include_str!("../../../book/src/explanations.md")]
    mod explanations {}
    #[doc = include_str!("../../../book/src/faithfulness.md")]
    mod faithfulness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
