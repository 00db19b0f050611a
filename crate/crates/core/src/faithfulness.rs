//! Occlusion sensitivity and rank-correlation scoring of saliency maps.
//!
//! An occlusion map slides a patch over the input, replaces it with a fill
//! value and records how much the class score drops. Saliency methods are
//! then scored by the Spearman correlation between their per-patch
//! intensity and that drop.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::explain::{self, ClassSelector, Heatmap, LayerSelector, Method, PixelAttribution};
use crate::grid::Grid;
use crate::tensor::{Scalar, Tensor};

/// Replacement value for occluded pixels, in model-input (preprocessed)
/// units.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Uniform(f64),
    PerChannel(Vec<f64>),
}

impl Fill {
    fn value(&self, channel: usize) -> f64 {
        match self {
            Fill::Uniform(v) => *v,
            Fill::PerChannel(vs) => vs[channel],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionParams {
    pub patch: usize,
    pub stride: usize,
    pub fill: Fill,
    /// Worker threads for the sweep; `None` lets the pool decide.
    pub threads: Option<usize>,
}

impl OcclusionParams {
    /// Patch of `ceil(extent / 8)`, half-patch stride, fill 0 (the dataset
    /// mean after normalisation).
    pub fn default_for(height: usize, width: usize) -> Self {
        let patch = height.max(width).div_ceil(8).max(1);
        OcclusionParams {
            patch,
            stride: (patch / 2).max(1),
            fill: Fill::Uniform(0.0),
            threads: None,
        }
    }
}

/// Score drop per patch position.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap {
    /// `base_score - occluded_score`, signed.
    pub grid: Grid,
    pub patch: usize,
    pub stride: usize,
    pub fill: Fill,
    pub class_index: usize,
    pub base_score: f64,
}

/// Number of patch positions along each axis.
pub fn occlusion_grid_shape(height: usize, width: usize, patch: usize, stride: usize) -> Result<[usize; 2]> {
    if patch == 0 || stride == 0 {
        return Err(Error::Geometry("patch and stride must be at least 1".into()));
    }
    if patch > height || patch > width {
        return Err(Error::Geometry(format!(
            "patch {patch} larger than image {height}x{width}"
        )));
    }
    Ok([(height - patch) / stride + 1, (width - patch) / stride + 1])
}

/// Copy of `image` (`[1, C, H, W]`) with the patch at grid position
/// `(row, col)` replaced by `fill` in every channel.
pub fn occlude<T: Scalar>(
    image: &Tensor<T>,
    row: usize,
    col: usize,
    patch: usize,
    stride: usize,
    fill: &Fill,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = image.dims4("occlude")?;
    let [rows, cols] = occlusion_grid_shape(h, w, patch, stride)?;
    if row >= rows || col >= cols {
        return Err(Error::Geometry(format!(
            "patch position ({row}, {col}) outside {rows}x{cols} grid"
        )));
    }
    if let Fill::PerChannel(v) = fill {
        if v.len() != c {
            return Err(Error::Geometry(format!("{} fill values for {c} channels", v.len())));
        }
    }
    let mut data = image.data().to_vec();
    let (y0, x0) = (row * stride, col * stride);
    for b in 0..n {
        for ch in 0..c {
            let value = T::from_f64(fill.value(ch));
            let plane = &mut data[(b * c + ch) * h * w..][..h * w];
            for y in y0..y0 + patch {
                plane[y * w + x0..y * w + x0 + patch].fill(value);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), data)
}

fn class_score<T: Scalar>(graph: &mut Graph<T>, input: &Tensor<T>, class_index: usize) -> Result<f64> {
    let scores = graph.forward(input)?;
    scores
        .data()
        .get(class_index)
        .map(|s| s.as_f64())
        .ok_or(Error::ClassOutOfRange {
            index: class_index,
            classes: scores.len(),
        })
}

/// Sweeps the patch over `image` (`[1, C, H, W]`) in row-major order. Each
/// worker evaluates its own fork of `graph`, so results do not depend on
/// the thread count.
pub fn occlusion_map<T: Scalar>(
    graph: &Graph<T>,
    image: &Tensor<T>,
    class_index: usize,
    params: &OcclusionParams,
) -> Result<OcclusionMap> {
    let [n, _, h, w] = image.dims4("occlusion_map")?;
    if n != 1 {
        return Err(Error::Geometry(format!("occlusion needs a batch of one, got {n}")));
    }
    let [rows, cols] = occlusion_grid_shape(h, w, params.patch, params.stride)?;
    let base_score = class_score(&mut graph.fork(), image, class_index)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Geometry(format!("thread pool: {e}")))?;
    let drops: Result<Vec<f64>> = pool.install(|| {
        (0..rows * cols)
            .into_par_iter()
            .map_init(
                || graph.fork(),
                |g, p| {
                    let masked = occlude(image, p / cols, p % cols, params.patch, params.stride, &params.fill)?;
                    Ok(base_score - class_score(g, &masked, class_index)?)
                },
            )
            .collect()
    });
    Ok(OcclusionMap {
        grid: Grid::new(rows, cols, drops?)?,
        patch: params.patch,
        stride: params.stride,
        fill: params.fill.clone(),
        class_index,
        base_score,
    })
}

/// Anything that can be pooled onto the occlusion patch grid.
#[derive(Debug, Clone, Copy)]
pub enum Saliency<'a> {
    Attribution(&'a PixelAttribution),
    /// Must already be upsampled to image resolution.
    Map(&'a Heatmap),
}

/// Per patch, the mean over its pixels of the absolute attribution summed
/// across channels.
pub fn pool_saliency_to_patches(saliency: Saliency<'_>, patch: usize, stride: usize) -> Result<Grid> {
    let magnitude = match saliency {
        Saliency::Attribution(a) => {
            let [c, h, w] = a.shape();
            let v = a.values().data();
            Grid::from_fn(h, w, |y, x| (0..c).map(|ch| v[(ch * h + y) * w + x].abs()).sum())?
        }
        Saliency::Map(m) => m.grid().map(f64::abs),
    };
    let [h, w] = magnitude.shape();
    let [rows, cols] = occlusion_grid_shape(h, w, patch, stride)?;
    let area = (patch * patch) as f64;
    Grid::from_fn(rows, cols, |r, c| {
        let (y0, x0) = (r * stride, c * stride);
        let mut total = 0.0;
        for y in y0..y0 + patch {
            for x in x0..x0 + patch {
                total += magnitude.get(y, x);
            }
        }
        total / area
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman's ρ: the Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "spearman",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateRanks);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// What a correlation report scores against the occlusion map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportMethod {
    Explanation(Method),
    /// The occlusion map itself; useful as a sanity reference.
    Occlusion,
}

impl ReportMethod {
    pub fn name(self) -> &'static str {
        match self {
            ReportMethod::Explanation(m) => m.name(),
            ReportMethod::Occlusion => "occlusion",
        }
    }
}

impl fmt::Display for ReportMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReportMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "occlusion" => Ok(ReportMethod::Occlusion),
            other => other.parse().map(ReportMethod::Explanation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub method: String,
    pub spearman_rho: f64,
    pub n_patches: usize,
    pub patch: usize,
    pub stride: usize,
    pub fill: Fill,
    pub class_index: usize,
}

/// Runs one occlusion sweep and scores every method against it.
pub fn faithfulness_report<T: Scalar>(
    graph: &Graph<T>,
    image: &Tensor<T>,
    class: &ClassSelector,
    layer: &LayerSelector,
    methods: &[ReportMethod],
    params: &OcclusionParams,
) -> Result<(OcclusionMap, Vec<CorrelationReport>)> {
    let class_index = match class {
        ClassSelector::Index(i) => *i,
        ClassSelector::Auto => explain::argmax(&graph.fork().forward(image)?.to_f64_vec()),
    };
    let occlusion = occlusion_map(graph, image, class_index, params)?;
    let reference = occlusion.grid.data();
    let mut reports = Vec::with_capacity(methods.len());
    for &method in methods {
        let pooled = match method {
            ReportMethod::Occlusion => occlusion.grid.clone(),
            ReportMethod::Explanation(m) => {
                let ex = explain::explain(
                    &mut graph.fork(),
                    image,
                    &ClassSelector::Index(class_index),
                    layer,
                    m,
                )?;
                let saliency = match (&ex.attribution, &ex.upsampled) {
                    (Some(a), _) => Saliency::Attribution(a),
                    (None, Some(h)) => Saliency::Map(h),
                    (None, None) => unreachable!("every method yields a map or an attribution"),
                };
                pool_saliency_to_patches(saliency, params.patch, params.stride)?
            }
        };
        reports.push(CorrelationReport {
            method: method.name().to_string(),
            spearman_rho: spearman(pooled.data(), reference)?,
            n_patches: reference.len(),
            patch: params.patch,
            stride: params.stride,
            fill: params.fill.clone(),
            class_index,
        });
    }
    Ok((occlusion, reports))
}
