//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use asbunet::checkpoint::{self, Container, VERSION_F32, VERSION_INT8};
use asbunet::ops::bilinear_resize;
use asbunet::quant::{calibrate, mean_abs_deviation, QuantizedNetwork};
use asbunet::rf::{encoder_layers, linearity_report, receptive_field, RfKind, RfTrace};
use asbunet::segeval::{evaluate_dataset, BinaryMask, IgnoreBandParams};
use asbunet::train::{
    generate_dataset, split_dataset, train_with_observer, SyntheticSample, TrainConfig,
};
use asbunet::{Network, NetworkSpec, Tensor};

use crate::{png, Command, SpecArgs};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Build {
            spec,
            no_batchnorm,
            seed,
            out,
            spec_out,
        } => build(
            &spec,
            no_batchnorm,
            seed,
            out.as_deref(),
            spec_out.as_deref(),
        ),
        Command::RfReport { spec, svg } => rf_report(&spec, svg.as_deref()),
        Command::Train {
            spec,
            config,
            out,
            dataset_seed,
            samples,
            log,
        } => train(
            &spec,
            config.as_deref(),
            &out,
            dataset_seed,
            samples,
            log.as_deref(),
        ),
        Command::Eval {
            labels,
            preds,
            osf_beta,
            min_radius,
        } => eval(
            &labels,
            &preds,
            IgnoreBandParams::new(osf_beta, min_radius)?,
        ),
        Command::Quantize {
            ckpt,
            out,
            calib_count,
            calib_seed,
        } => quantize(&ckpt, &out, calib_count, calib_seed),
        Command::Infer {
            ckpt,
            image,
            out,
            heatmap,
            threshold,
            resize,
        } => infer(&ckpt, &image, &out, heatmap.as_deref(), threshold, resize),
        Command::GenData {
            out,
            count,
            size,
            seed,
        } => gen_data(&out, count, size, seed),
    }
}

fn resolve_spec(args: &SpecArgs) -> Result<NetworkSpec> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read spec {}", path.display()))?;
            NetworkSpec::from_text(&text)
                .with_context(|| format!("invalid spec {}", path.display()))?
        }
        None => NetworkSpec::default_for(args.scaling),
    };
    if let Some(s) = args.size {
        let channels = spec.input_shape.0;
        spec = spec.with_input(channels, s, s);
    }
    spec.validate()?;
    Ok(spec)
}

fn build(
    args: &SpecArgs,
    no_batchnorm: bool,
    seed: u64,
    out: Option<&Path>,
    spec_out: Option<&Path>,
) -> Result<()> {
    let mut spec = resolve_spec(args)?;
    if no_batchnorm {
        spec.batchnorm = false;
    }
    let net = Network::build(&spec, seed)?;
    let (c, h, w) = spec.input_shape;
    let x = Tensor::zeros((1, c, h, w))?;
    let (bottleneck, _) = net.encoder_forward(&x)?;
    let mask = net.forward(&x)?;
    println!("{}", spec.to_text().trim_end());
    println!("scaling={}", spec.scaling);
    println!("input={c}x{h}x{w}");
    let b = bottleneck.shape();
    println!("bottleneck={}x{}x{}", b.channels, b.height, b.width);
    let m = mask.shape();
    println!("mask={}x{}x{}", m.channels, m.height, m.width);
    println!("parameters={}", spec.param_count());
    if let Some(path) = spec_out {
        fs::write(path, spec.to_text())
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(path) = out {
        checkpoint::save_checkpoint(&net, path)
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn rf_report(args: &SpecArgs, svg: Option<&Path>) -> Result<()> {
    let spec = resolve_spec(args)?;
    let trace = receptive_field(&encoder_layers(&spec))?;
    let report = linearity_report(&trace)?;
    println!(
        "{:<22} {:<7} {:>6} {:>7} {:>6}",
        "layer", "kind", "k_eff", "stride", "rf"
    );
    for s in &trace.steps {
        println!(
            "{:<22} {:<7} {:>6} {:>7} {:>6}",
            s.name,
            s.kind.to_string(),
            s.effective_kernel,
            s.effective_stride,
            s.rf
        );
    }
    println!();
    println!(
        "{:<8} {:>6} {:>10} {:>10}",
        "stage", "rf", "increment", "ratio"
    );
    for (i, stage) in report.stages.iter().enumerate() {
        let ratio = if i == 0 {
            "-".to_string()
        } else {
            format!("{:.3}", report.ratios[i - 1])
        };
        println!(
            "{:<8} {:>6} {:>10.3} {:>10}",
            stage, report.stage_rf[i], report.increments[i], ratio
        );
    }
    println!();
    println!("final_rf={}", trace.final_rf());
    println!("max_ratio={:.4}", report.max_ratio);
    println!("near_linear={}", report.near_linear);
    if let Some(path) = svg {
        fs::write(path, rf_svg(&trace))
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

/// Cumulative RF per layer as a polyline; pools are marked in grey.
fn rf_svg(trace: &RfTrace) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let n = trace.steps.len().max(2) as f64;
    let max_rf = trace.final_rf().max(1) as f64;
    let px = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
    let py = |rf: usize| h - pad - (h - 2.0 * pad) * rf as f64 / max_rf;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y}" stroke="black"/>"#,
        y = h - pad,
        x2 = w - pad
    );
    for (i, st) in trace.steps.iter().enumerate() {
        if st.kind == RfKind::Pool {
            let _ = writeln!(
                s,
                r##"<line x1="{x:.1}" y1="{pad}" x2="{x:.1}" y2="{y}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
                x = px(i),
                y = h - pad
            );
        }
    }
    let points: Vec<String> = trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, st)| format!("{:.1},{:.1}", px(i), py(st.rf)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="{t}" font-family="sans-serif" font-size="12">receptive field (max {max_rf}) by layer</text>"#,
        t = pad - 12.0
    );
    s.push_str("</svg>\n");
    s
}

fn train(
    args: &SpecArgs,
    config: Option<&Path>,
    out: &Path,
    dataset_seed: u64,
    samples: usize,
    log: Option<&Path>,
) -> Result<()> {
    let spec = resolve_spec(args)?;
    let cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            TrainConfig::from_text(&text)
                .with_context(|| format!("invalid config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    let (_, h, w) = spec.input_shape;
    ensure!(h == w, "synthetic data is square; spec input is {h}x{w}");
    let data = generate_dataset(samples, h, dataset_seed)?;
    let (train_set, test_set) = split_dataset(data, cfg.split, dataset_seed)?;
    eprintln!(
        "training on {} images, holding out {}",
        train_set.len(),
        test_set.len()
    );

    let mut net = Network::build(&spec, cfg.seed)?;
    let mut writer = match log {
        Some(path) => {
            let f = fs::File::create(path)
                .with_context(|| format!("cannot create {}", path.display()))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "step,lr,loss")?;
            Some(w)
        }
        None => None,
    };
    let mut io_err = None;
    let report = train_with_observer(&mut net, &train_set, &cfg, &mut |s| {
        if let Some(w) = writer.as_mut() {
            if let Err(e) = writeln!(w, "{},{:e},{}", s.step, s.lr, s.loss) {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("cannot write training log");
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    checkpoint::save_checkpoint(&net, out)
        .with_context(|| format!("cannot write {}", out.display()))?;

    for (i, l) in report.epoch_losses.iter().enumerate() {
        eprintln!("epoch {:>3} mean loss {l:.5}", i + 1);
    }
    let score = held_out_score(&net, &test_set)?;
    println!("steps={}", report.steps.len());
    println!(
        "final_epoch_loss={:.6}",
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("test_images={}", test_set.len());
    println!("test_score={score:.4}");
    Ok(())
}

fn held_out_score(net: &Network, test: &[SyntheticSample]) -> Result<f64> {
    let mut labels = Vec::with_capacity(test.len());
    let mut preds = Vec::with_capacity(test.len());
    for s in test {
        preds.push(BinaryMask::threshold(&net.forward(&s.image)?, 0, 0, 0.5));
        labels.push(s.label.clone());
    }
    Ok(evaluate_dataset(&labels, &preds, &IgnoreBandParams::default())?.mean_score)
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && name.to_ascii_lowercase().ends_with(".png") {
            names.insert(name);
        }
    }
    Ok(names)
}

fn eval(labels: &Path, preds: &Path, params: IgnoreBandParams) -> Result<()> {
    let l = png_names(labels)?;
    let p = png_names(preds)?;
    if l != p {
        let only_l: Vec<&String> = l.difference(&p).collect();
        let only_p: Vec<&String> = p.difference(&l).collect();
        bail!(
            "label and prediction files do not pair up: missing predictions {only_l:?}, predictions without labels {only_p:?}"
        );
    }
    ensure!(!l.is_empty(), "no PNG masks in {}", labels.display());
    let mut label_masks = Vec::with_capacity(l.len());
    let mut pred_masks = Vec::with_capacity(l.len());
    for name in &l {
        let a = png::read_mask(&labels.join(name))?;
        let b = png::read_mask(&preds.join(name))?;
        ensure!(
            a.dims() == b.dims(),
            "{name}: label is {:?} but prediction is {:?}",
            a.dims(),
            b.dims()
        );
        label_masks.push(a);
        pred_masks.push(b);
    }
    let report = evaluate_dataset(&label_masks, &pred_masks, &params)?;
    println!(
        "{:<28} {:>8} {:>6} {:>8}",
        "image", "jaccard", "misdet", "score"
    );
    for (name, s) in l.iter().zip(&report.per_image) {
        println!(
            "{:<28} {:>8.4} {:>6} {:>8.4}",
            name, s.jaccard, s.misdetections, s.score
        );
    }
    println!("images={}", report.count());
    println!("mean_jaccard={:.6}", report.mean_jaccard);
    println!("misdetections={}", report.total_misdetections);
    println!("mean_score={:.6}", report.mean_score);
    Ok(())
}

fn quantize(ckpt: &Path, out: &Path, calib_count: usize, calib_seed: u64) -> Result<()> {
    ensure!(calib_count > 0, "--calib-count must be at least 1");
    let float_bytes = fs::metadata(ckpt)
        .with_context(|| format!("cannot read {}", ckpt.display()))?
        .len();
    let net = checkpoint::load_checkpoint(ckpt)
        .with_context(|| format!("cannot load {}", ckpt.display()))?;
    let (_, h, w) = net.spec().input_shape;
    ensure!(
        h == w,
        "synthetic calibration data is square; spec input is {h}x{w}"
    );
    let images: Vec<Tensor> = generate_dataset(calib_count, h, calib_seed)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let cal = calibrate(&net, &images)?;
    let q = QuantizedNetwork::from_network(&net, &cal)?;
    q.save(out)
        .with_context(|| format!("cannot write {}", out.display()))?;
    let int8_bytes = fs::metadata(out)?.len();
    let dev = mean_abs_deviation(&net, &q, &images)?;
    println!("float_bytes={float_bytes}");
    println!("int8_bytes={int8_bytes}");
    println!("size_ratio={:.4}", int8_bytes as f64 / float_bytes as f64);
    println!("calibration_images={calib_count}");
    println!("mean_abs_deviation={dev:.6}");
    Ok(())
}

enum Model {
    Float(Box<Network>),
    Int8(QuantizedNetwork),
}

impl Model {
    fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        let c =
            Container::decode(&bytes).with_context(|| format!("cannot load {}", path.display()))?;
        Ok(match c.version {
            VERSION_F32 => {
                let spec = NetworkSpec::from_text(&c.spec_text)?;
                let mut net = Network::zeroed(&spec)?;
                checkpoint::load_into(&mut net, &c)?;
                Model::Float(Box::new(net))
            }
            VERSION_INT8 => Model::Int8(QuantizedNetwork::from_container(&c)?),
            v => bail!("unsupported checkpoint version {v}"),
        })
    }

    fn spec(&self) -> &NetworkSpec {
        match self {
            Model::Float(n) => n.spec(),
            Model::Int8(q) => q.spec(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Model::Float(n) => n.forward(x)?,
            Model::Int8(q) => q.forward(x)?,
        })
    }
}

fn infer(
    ckpt: &Path,
    image: &Path,
    out: &Path,
    heatmap: Option<&Path>,
    threshold: f64,
    resize: bool,
) -> Result<()> {
    ensure!(threshold.is_finite(), "threshold must be finite");
    let model = Model::load(ckpt)?;
    let x = png::read_rgb(image)?;
    let s = x.shape();
    let f = model.spec().downsampling();
    let fits = s.height % f == 0 && s.width % f == 0;
    let prob = if fits {
        model.forward(&x)?
    } else if resize {
        let round = |v: usize| (((v as f64 / f as f64).round() as usize).max(1)) * f;
        let (rh, rw) = (round(s.height), round(s.width));
        let p = model.forward(&bilinear_resize(&x, rh, rw)?)?;
        bilinear_resize(&p, s.height, s.width)?
    } else {
        bail!(
            "image is {}x{}, not a multiple of the network's downsampling factor {f}; pass --resize to rescale",
            s.height,
            s.width
        );
    };
    let mask = BinaryMask::threshold(&prob, 0, 0, threshold);
    png::write_mask(out, &mask)?;
    if let Some(path) = heatmap {
        png::write_heatmap(path, &prob)?;
    }
    let frac = mask.count() as f64 / (s.height * s.width) as f64;
    println!("size={}x{}", s.height, s.width);
    println!("foreground_fraction={frac:.6}");
    Ok(())
}

fn gen_data(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    let data = generate_dataset(count, size, seed)?;
    let images: PathBuf = out.join("images");
    let labels: PathBuf = out.join("labels");
    fs::create_dir_all(&images).with_context(|| format!("cannot create {}", images.display()))?;
    fs::create_dir_all(&labels).with_context(|| format!("cannot create {}", labels.display()))?;
    let width = count.saturating_sub(1).to_string().len().max(4);
    for (i, s) in data.iter().enumerate() {
        let name = format!("{i:0width$}.png");
        png::write_rgb(&images.join(&name), &s.image)?;
        png::write_mask(&labels.join(&name), &s.label)?;
    }
    println!("images={count}");
    println!("size={size}");
    println!("dir={}", out.display());
    Ok(())
}
