#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use saliency::{
    build_graph, load_model, read_image, Conv2dParams, Graph, ModelSpec, Op, Pool2dParams, Scalar,
    Tensor, WeightStore,
};
use serde::Deserialize;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures")).join(name)
}

pub fn toy(name: &str) -> (ModelSpec, WeightStore) {
    load_model(fixture(&format!("{name}.json")), fixture(&format!("{name}.gcw"))).expect("fixture model")
}

pub fn toy_graph<T: Scalar>(name: &str) -> Graph<T> {
    let (spec, store) = toy(name);
    build_graph(&spec, &store).expect("graph")
}

pub fn read_f32(name: &str) -> Vec<f32> {
    std::fs::read(fixture(name))
        .expect("fixture")
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

#[derive(Debug, Deserialize)]
pub struct Object {
    pub quadrant: usize,
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
}

#[derive(Debug, Deserialize)]
pub struct TwoObject {
    pub file: String,
    pub square: Object,
    pub disc: Object,
}

pub fn two_object_manifest() -> Vec<TwoObject> {
    let text = std::fs::read_to_string(fixture("two_object/manifest.json")).expect("manifest");
    serde_json::from_str(&text).expect("manifest json")
}

/// Loads a two-object image as a preprocessed `[1, 3, 32, 32]` tensor.
pub fn two_object_input<T: Scalar>(spec: &ModelSpec, entry: &TwoObject) -> Tensor<T> {
    let image = read_image(fixture(&format!("two_object/{}", entry.file))).expect("image");
    image.to_tensor(&spec.preprocess()).expect("tensor")
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(rng: &mut StdRng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0))).expect("shape")
}

/// Relative error with a unit floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// A small random network that uses every op kind.
pub fn random_graph(rng: &mut StdRng, with_softmax: bool) -> Graph<f64> {
    let c = rng.gen_range(1..=3);
    let size = 2 * rng.gen_range(2..=4);
    let mut g = Graph::new(&[c, size, size]).expect("graph");
    let k1 = rng.gen_range(2..=4);
    let kernel = if rng.gen_bool(0.5) { 3 } else { 1 };
    let pad = kernel / 2;
    g.push(
        "conv1",
        Op::Conv2d {
            weight: Arc::new(random_tensor(rng, &[k1, c, kernel, kernel])),
            bias: Arc::new(random_tensor(rng, &[k1])),
            params: Conv2dParams { stride: [1, 1], padding: [pad, pad] },
        },
    )
    .expect("conv1");
    g.push("relu1", Op::Relu).expect("relu1");
    g.push("pool1", Op::MaxPool2d(Pool2dParams { window: [2, 2], stride: [2, 2] }))
        .expect("pool1");
    let k2 = rng.gen_range(2..=4);
    g.push(
        "conv2",
        Op::Conv2d {
            weight: Arc::new(random_tensor(rng, &[k2, k1, 1, 1])),
            bias: Arc::new(random_tensor(rng, &[k2])),
            params: Conv2dParams::default(),
        },
    )
    .expect("conv2");
    g.push("relu2", Op::Relu).expect("relu2");
    let classes = rng.gen_range(2..=4);
    let features = if rng.gen_bool(0.5) {
        g.push("gap", Op::GlobalAvgPool).expect("gap");
        k2
    } else {
        g.push("flatten", Op::Flatten).expect("flatten");
        k2 * (size / 2) * (size / 2)
    };
    g.push(
        "fc",
        Op::Dense {
            weight: Arc::new(random_tensor(rng, &[classes, features])),
            bias: Arc::new(random_tensor(rng, &[classes])),
        },
    )
    .expect("fc");
    if with_softmax {
        g.push("softmax", Op::Softmax).expect("softmax");
    }
    g
}

fn values<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.to_f64_vec()
}

/// Random conv2d case with an integral output extent; returns the max
/// relative error against the loop oracle.
pub fn conv_trial<T: Scalar>(rng: &mut StdRng) -> f64 {
    let (n, c, m) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let stride = [rng.gen_range(1..=2), rng.gen_range(1..=2)];
    let pad = [rng.gen_range(0..kh), rng.gen_range(0..kw)];
    // Choose the output extent, then the input extent that produces it exactly.
    let extent = |out: usize, s: usize, k: usize, p: usize| {
        (out..).map(|o| (o - 1) * s + k).find(|&span| span > 2 * p).unwrap() - 2 * p
    };
    let h = extent(rng.gen_range(1..=5), stride[0], kh, pad[0]);
    let w = extent(rng.gen_range(1..=5), stride[1], kw, pad[1]);
    let params = Conv2dParams { stride, padding: pad };
    let x = random_tensor::<T>(rng, &[n, c, h, w]);
    let k = random_tensor::<T>(rng, &[m, c, kh, kw]);
    let b = random_tensor::<T>(rng, &[m]);
    let got = saliency::kernels::conv2d(&x, &k, &b, params).expect("conv2d");
    let (want, shape) =
        oracle::conv2d(&values(&x), [n, c, h, w], &values(&k), [m, c, kh, kw], &values(&b), stride, pad);
    assert_eq!(got.shape(), shape);
    max_rel_err(&values(&got), &want)
}

pub fn pool_trial<T: Scalar>(rng: &mut StdRng) -> f64 {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
    let window = [rng.gen_range(1..=3), rng.gen_range(1..=3)];
    let stride = [rng.gen_range(1..=3), rng.gen_range(1..=3)];
    let (oh, ow) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
    let (h, w) = ((oh - 1) * stride[0] + window[0], (ow - 1) * stride[1] + window[1]);
    let x = random_tensor::<T>(rng, &[n, c, h, w]);
    let (got, _) = saliency::kernels::maxpool2d(&x, Pool2dParams { window, stride }).expect("pool");
    let (want, shape) = oracle::maxpool2d(&values(&x), [n, c, h, w], window, stride);
    assert_eq!(got.shape(), shape);
    max_rel_err(&values(&got), &want)
}

pub fn gap_trial<T: Scalar>(rng: &mut StdRng) -> f64 {
    let dims = [rng.gen_range(1..=2), rng.gen_range(1..=5), rng.gen_range(1..=7), rng.gen_range(1..=7)];
    let x = random_tensor::<T>(rng, &dims);
    let got = saliency::kernels::global_average_pool(&x).expect("gap");
    assert_eq!(got.shape(), [dims[0], dims[1]]);
    max_rel_err(&values(&got), &oracle::gap(&values(&x), dims))
}

pub fn dense_trial<T: Scalar>(rng: &mut StdRng) -> f64 {
    let (n, d, m) = (rng.gen_range(1..=3), rng.gen_range(1..=40), rng.gen_range(1..=8));
    let x = random_tensor::<T>(rng, &[n, d]);
    let wt = random_tensor::<T>(rng, &[m, d]);
    let b = random_tensor::<T>(rng, &[m]);
    let got = saliency::kernels::dense(&x, &wt, &b).expect("dense");
    assert_eq!(got.shape(), [n, m]);
    max_rel_err(&values(&got), &oracle::dense(&values(&x), [n, d], &values(&wt), m, &values(&b)))
}

/// Smallest distance of any ReLU input from 0 and of any pool window's
/// runner-up from its max, over the last forward pass.
fn kink_margin(g: &Graph<f64>) -> f64 {
    let mut margin = f64::INFINITY;
    for node in g.nodes() {
        let Some(src) = node.input() else { continue };
        let x = g.output(src).expect("forwarded");
        match node.op() {
            Op::Relu => {
                for v in x.data() {
                    margin = margin.min(v.abs());
                }
            }
            Op::MaxPool2d(p) => {
                let [n, c, h, w] = x.dims4("margin").expect("4d");
                let d = x.data();
                for plane in 0..n * c {
                    for i in 0..(h - p.window[0]) / p.stride[0] + 1 {
                        for j in 0..(w - p.window[1]) / p.stride[1] + 1 {
                            let mut vals: Vec<f64> = (0..p.window[0])
                                .flat_map(|u| (0..p.window[1]).map(move |v| (u, v)))
                                .map(|(u, v)| d[(plane * h + i * p.stride[0] + u) * w + j * p.stride[1] + v])
                                .collect();
                            vals.sort_by(|a, b| b.total_cmp(a));
                            // A zero maximum comes from a clamped ReLU and is locally constant.
                            if vals.len() > 1 && vals[0] != 0.0 {
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

/// Draws inputs until none sits within `1e-3` of a ReLU kink or pool tie.
pub fn smooth_input(rng: &mut StdRng, g: &mut Graph<f64>) -> Tensor<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(g.input_shape());
    for _ in 0..1000 {
        let x = random_tensor::<f64>(rng, &shape);
        g.forward(&x).expect("forward");
        if kink_margin(g) > 1e-3 {
            return x;
        }
    }
    panic!("no smooth input found");
}

/// Max relative error between the autodiff input gradient and central
/// differences (step `eps`) for one seeded output of `seed_node`.
pub fn fd_input_gradient_error(g: &mut Graph<f64>, x: &Tensor<f64>, seed_node: saliency::NodeId, index: usize, eps: f64) -> f64 {
    g.forward(x).expect("forward");
    let grad = g
        .backward(&saliency::GradientSeed::one_hot(seed_node, index), Graph::<f64>::INPUT)
        .expect("backward");
    let mut fd = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let probe = |delta: f64| {
            let mut d = x.data().to_vec();
            d[i] += delta;
            let mut h = g.fork();
            h.forward(&Tensor::new(x.shape().to_vec(), d).unwrap()).unwrap();
            h.output(seed_node).unwrap().data()[index]
        };
        fd.push((probe(eps) - probe(-eps)) / (2.0 * eps));
    }
    max_rel_err(grad.data(), &fd)
}

/// Occlusion by definition: mask each patch by hand, re-forward a fresh
/// graph, subtract from the unmasked score.
pub fn brute_force_occlusion(
    g: &Graph<f64>,
    image: &Tensor<f64>,
    class: usize,
    patch: usize,
    stride: usize,
    fill: &[f64],
) -> Vec<f64> {
    let [_, c, h, w] = image.dims4("oracle").unwrap();
    let score = |x: &Tensor<f64>| g.fork().forward(x).unwrap().data()[class];
    let base = score(image);
    let mut out = Vec::new();
    let mut top = 0;
    while top + patch <= h {
        let mut left = 0;
        while left + patch <= w {
            let mut d = image.data().to_vec();
            for ch in 0..c {
                for y in top..top + patch {
                    for x in left..left + patch {
                        d[(ch * h + y) * w + x] = fill[ch];
                    }
                }
            }
            out.push(base - score(&Tensor::new(image.shape().to_vec(), d).unwrap()));
            left += stride;
        }
        top += stride;
    }
    out
}

/// conv(3x3, pad 1) -> relu -> pool 2 -> conv 1x1 -> relu -> gap -> dense,
/// with random weights, for a `[c, 4, 4]` input.
pub fn small_net(rng: &mut StdRng, c: usize) -> Graph<f64> {
    let mut g = Graph::new(&[c, 4, 4]).unwrap();
    g.push(
        "conv1",
        Op::Conv2d {
            weight: Arc::new(random_tensor(rng, &[4, c, 3, 3])),
            bias: Arc::new(random_tensor(rng, &[4])),
            params: Conv2dParams { stride: [1, 1], padding: [1, 1] },
        },
    )
    .unwrap();
    g.push("relu1", Op::Relu).unwrap();
    g.push("pool1", Op::MaxPool2d(Pool2dParams { window: [2, 2], stride: [2, 2] })).unwrap();
    g.push(
        "conv2",
        Op::Conv2d {
            weight: Arc::new(random_tensor(rng, &[3, 4, 1, 1])),
            bias: Arc::new(random_tensor(rng, &[3])),
            params: Conv2dParams::default(),
        },
    )
    .unwrap();
    g.push("relu2", Op::Relu).unwrap();
    g.push("gap", Op::GlobalAvgPool).unwrap();
    g.push(
        "fc",
        Op::Dense {
            weight: Arc::new(random_tensor(rng, &[2, 3])),
            bias: Arc::new(random_tensor(rng, &[2])),
        },
    )
    .unwrap();
    g
}

/// The chain of nodes after `from`, as a graph whose input is `from`'s output.
pub fn suffix(g: &Graph<f64>, from: saliency::NodeId) -> Graph<f64> {
    let mut s = Graph::new(g.node(from).unwrap().shape()).unwrap();
    for node in &g.nodes()[from + 1..] {
        s.push(node.name(), node.op().clone()).unwrap();
    }
    s
}

/// Checks on one random net with a leading ReLU that the guided gradient
/// at the input is the upstream guided gradient masked by
/// `input > 0 && upstream > 0`. Returns the number of elements checked.
pub fn guided_masked_copy_trial(rng: &mut StdRng) -> usize {
    let inner = random_graph(rng, false);
    let mut g = Graph::new(inner.input_shape()).unwrap();
    g.push("relu0", Op::Relu).unwrap();
    for node in &inner.nodes()[1..] {
        g.push(node.name(), node.op().clone()).unwrap();
    }
    let mut shape = vec![1];
    shape.extend_from_slice(g.input_shape());
    let x = random_tensor::<f64>(rng, &shape);
    g.forward(&x).unwrap();
    let class = rng.gen_range(0..2);
    let full = g.backward_guided(&saliency::GradientSeed::one_hot(g.score_node(), class)).unwrap();

    let mut rest = suffix(&g, 1);
    rest.forward(g.output(1).unwrap()).unwrap();
    let upstream = rest.backward_guided(&saliency::GradientSeed::one_hot(rest.score_node(), class)).unwrap();
    for ((&got, &xi), &up) in full.data().iter().zip(x.data()).zip(upstream.data()) {
        assert_eq!(got, if xi > 0.0 && up > 0.0 { up } else { 0.0 });
    }
    full.len()
}
