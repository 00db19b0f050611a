use std::path::Path;

use saliency::explain::argmax;
use saliency::imaging::resize_bilinear;
use saliency::{
    build_graph, explain, faithfulness_report, load_model, occlusion_map, read_image, render_attribution,
    render_overlay, ClassSelector, Graph, Image, ModelSpec, OcclusionParams, Scalar, Tensor,
    WeightStore,
};
use serde_json::{json, Value};

use crate::output::{stem, Writer};
use crate::{CliError, Command, CommonArgs, ModelArgs, Precision, SweepArgs};

const OVERLAY_ALPHA: f64 = 0.5;

pub fn run(command: Command) -> Result<(), CliError> {
    let dtype = match &command {
        Command::Explain { common, .. } | Command::Occlude { common, .. } | Command::Evaluate { common, .. } => {
            common.dtype
        }
        Command::Info { .. } => return info(command),
    };
    match dtype {
        Precision::F32 => dispatch::<f32>(command),
        Precision::F64 => dispatch::<f64>(command),
    }
}

fn dispatch<T: Scalar>(command: Command) -> Result<(), CliError> {
    let threads = threads_from_env()?;
    match command {
        Command::Explain { model, image, methods, target, common } => {
            let ctx = Context::<T>::load(&model)?;
            let (img, x) = ctx.image(&image)?;
            let class = ctx.class(&target.class)?;
            let mut out = Writer::new(&common.out)?;
            let name = stem(&image);
            let mut chosen = None;
            for &method in &methods {
                let ex = explain(&mut ctx.graph(), &x, &class, &target.layer, method)?;
                if chosen.is_none() {
                    println!(
                        "class {} ({}) score {:.6}",
                        ex.class_index,
                        ctx.label(ex.class_index),
                        ex.score
                    );
                    chosen = Some(ex.class_index);
                }
                let base = format!("{name}.{method}.{}", ex.class_index);
                let meta = json!({
                    "method": method.name(),
                    "class_index": ex.class_index,
                    "class_label": ctx.label(ex.class_index),
                    "score": ex.score,
                    "layer": ex.layer,
                });
                if let Some(attr) = &ex.attribution {
                    out.image(&format!("{base}.ppm"), &render_attribution(attr))?;
                    out.raw(&base, &attr.values().to_f64_vec(), attr.values().shape(), meta)?;
                } else {
                    let heat = ex.heatmap.as_ref().expect("heatmap methods produce a heatmap");
                    let up = ex.upsampled.as_ref().expect("heatmap methods produce an upsampled map");
                    out.image(&format!("{base}.ppm"), &render_overlay(&img, up.grid(), OVERLAY_ALPHA)?)?;
                    out.raw(&base, heat.grid().data(), &heat.grid().shape(), meta)?;
                }
                println!("wrote {base}.ppm");
            }
            let manifest = json!({
                "command": "explain",
                "image": image.display().to_string(),
                "class": target.class,
                "class_index": chosen,
                "layer": target.layer.to_string(),
                "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            });
            out.finish(ctx.manifest(manifest, &common, threads))
        }
        Command::Occlude { model, image, class, sweep, common } => {
            let ctx = Context::<T>::load(&model)?;
            let (img, x) = ctx.image(&image)?;
            let class_index = match ctx.class(&class)? {
                ClassSelector::Index(i) => i,
                ClassSelector::Auto => argmax(&ctx.graph().forward(&x)?.to_f64_vec()),
            };
            let params = ctx.sweep(&sweep, threads);
            let occ = occlusion_map(&ctx.graph, &x, class_index, &params)?;
            let mut out = Writer::new(&common.out)?;
            let base = format!("{}.occlusion.{class_index}", stem(&image));
            let [h, w] = [img.height(), img.width()];
            let overlay = occ.grid.normalized().upsample(h, w)?;
            out.image(&format!("{base}.ppm"), &render_overlay(&img, &overlay, OVERLAY_ALPHA)?)?;
            out.raw(
                &base,
                occ.grid.data(),
                &occ.grid.shape(),
                json!({
                    "class_index": class_index,
                    "class_label": ctx.label(class_index),
                    "base_score": occ.base_score,
                    "patch": occ.patch,
                    "stride": occ.stride,
                    "fill": occ.fill,
                }),
            )?;
            println!(
                "class {class_index} ({}) base score {:.6}, grid {}x{}",
                ctx.label(class_index),
                occ.base_score,
                occ.grid.rows(),
                occ.grid.cols()
            );
            let manifest = json!({
                "command": "occlude",
                "image": image.display().to_string(),
                "class": class,
                "class_index": class_index,
                "patch": params.patch,
                "stride": params.stride,
                "fill": params.fill,
            });
            out.finish(ctx.manifest(manifest, &common, threads))
        }
        Command::Evaluate { model, images, methods, target, sweep, common } => {
            let ctx = Context::<T>::load(&model)?;
            let class = ctx.class(&target.class)?;
            let params = ctx.sweep(&sweep, threads);
            let mut entries = Vec::new();
            let mut sums = vec![0.0; methods.len()];
            for path in &images {
                let (_, x) = ctx.image(path)?;
                let (occ, reports) = faithfulness_report(&ctx.graph, &x, &class, &target.layer, &methods, &params)?;
                for (sum, r) in sums.iter_mut().zip(&reports) {
                    *sum += r.spearman_rho;
                    println!("{} {} rho {:.6}", stem(path), r.method, r.spearman_rho);
                }
                entries.push(json!({
                    "image": path.display().to_string(),
                    "class_index": occ.class_index,
                    "class_label": ctx.label(occ.class_index),
                    "base_score": occ.base_score,
                    "reports": reports,
                }));
            }
            let n = images.len() as f64;
            let means: serde_json::Map<String, Value> = methods
                .iter()
                .zip(&sums)
                .map(|(m, s)| (m.name().to_string(), json!(s / n)))
                .collect();
            if images.len() > 1 {
                for (m, s) in methods.iter().zip(&sums) {
                    println!("mean {m} rho {:.6}", s / n);
                }
            }
            let mut out = Writer::new(&common.out)?;
            out.json("evaluation.json", &json!({ "images": entries, "mean_rho": means }))?;
            let manifest = json!({
                "command": "evaluate",
                "images": images.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                "class": target.class,
                "layer": target.layer.to_string(),
                "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
                "patch": params.patch,
                "stride": params.stride,
                "fill": params.fill,
            });
            out.finish(ctx.manifest(manifest, &common, threads))
        }
        Command::Info { .. } => unreachable!("handled before dtype dispatch"),
    }
}

fn info(command: Command) -> Result<(), CliError> {
    let Command::Info { spec, weights, out } = command else {
        unreachable!("called for info only")
    };
    let model = match &weights {
        Some(w) => load_model(&spec, w)?.0,
        None => saliency::model_io::load_spec(&spec)?,
    };
    let [c, h, w] = model.input_shape;
    println!(
        "model {}: input {c}x{h}x{w}, {} classes, cam-compatible: {}",
        model.name,
        model.num_classes(),
        if model.is_cam_compatible() { "yes" } else { "no" }
    );
    println!("{:<12} {:<10} {:<14} {:>10}", "layer", "type", "output", "params");
    for row in model.layer_table()? {
        let shape: Vec<String> = row.output_shape.iter().map(usize::to_string).collect();
        println!("{:<12} {:<10} {:<14} {:>10}", row.name, row.kind, shape.join("x"), row.parameters);
    }
    if let Some(dir) = out {
        let manifest = json!({
            "engine": "saliency",
            "version": env!("CARGO_PKG_VERSION"),
            "command": "info",
            "spec": spec.display().to_string(),
            "weights": weights.map(|w| w.display().to_string()),
        });
        Writer::new(&dir)?.finish(manifest)?;
    }
    Ok(())
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("SALIENCY_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "SALIENCY_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

struct Context<T> {
    spec: ModelSpec,
    graph: Graph<T>,
    paths: [String; 2],
}

impl<T: Scalar> Context<T> {
    fn load(args: &ModelArgs) -> Result<Self, CliError> {
        let (spec, store): (ModelSpec, WeightStore) = load_model(&args.spec, &args.weights)?;
        let graph = build_graph(&spec, &store)?;
        Ok(Context {
            spec,
            graph,
            paths: [args.spec.display().to_string(), args.weights.display().to_string()],
        })
    }

    /// A fresh graph over the shared weights.
    fn graph(&self) -> Graph<T> {
        self.graph.fork()
    }

    /// Reads an image, matches it to the model's channels and size, and
    /// returns it with its preprocessed tensor.
    fn image(&self, path: &Path) -> Result<(Image, Tensor<T>), CliError> {
        let [c, h, w] = self.spec.input_shape;
        let mut img = read_image(path)?;
        if c == 3 && img.channels() == 1 {
            img = img.to_rgb();
        }
        if (img.width(), img.height()) != (w, h) {
            img = resize_bilinear(&img, w, h)?;
        }
        let x = img.to_tensor(&self.spec.preprocess())?;
        Ok((img, x))
    }

    fn class(&self, arg: &str) -> Result<ClassSelector, CliError> {
        if arg == "auto" {
            return Ok(ClassSelector::Auto);
        }
        if let Ok(i) = arg.parse::<usize>() {
            return Ok(ClassSelector::Index(i));
        }
        self.spec
            .class_labels
            .as_ref()
            .and_then(|labels| labels.iter().position(|l| l == arg))
            .map(ClassSelector::Index)
            .ok_or_else(|| CliError::Usage(format!("unknown class `{arg}` (use auto, an index or a label)")))
    }

    fn label(&self, index: usize) -> String {
        self.spec
            .class_labels
            .as_ref()
            .and_then(|l| l.get(index).cloned())
            .unwrap_or_else(|| index.to_string())
    }

    fn sweep(&self, args: &SweepArgs, threads: Option<usize>) -> OcclusionParams {
        let [_, h, w] = self.spec.input_shape;
        let mut params = OcclusionParams::default_for(h, w);
        if let Some(p) = args.patch {
            params.patch = p;
            params.stride = (p / 2).max(1);
        }
        if let Some(s) = args.stride {
            params.stride = s;
        }
        params.fill = args.fill.resolve(&self.spec.preprocess());
        params.threads = threads;
        params
    }

    fn manifest(&self, mut config: Value, common: &CommonArgs, threads: Option<usize>) -> Value {
        let mut run = json!({
            "engine": "saliency",
            "version": env!("CARGO_PKG_VERSION"),
            "spec": self.paths[0],
            "weights": self.paths[1],
            "dtype": common.dtype.name(),
            "threads": threads,
        });
        if let (Value::Object(dst), Value::Object(src)) = (&mut run, config.take()) {
            dst.extend(src);
        }
        run
    }
}
