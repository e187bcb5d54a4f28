use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use leafdet_core::boxgeom::Detection;
use leafdet_core::data::{
    annotation_path, blur_image, build_manifest, load_and_resize, load_image, read_annotations, save_ppm,
    write_manifest, write_synthetic_corpus, write_voc_xml, ClassMap, Corpus, Sample, Split, ANNOTATION_DIR,
    IMAGE_DIR, MANIFEST,
};
use leafdet_core::eval::{
    evaluate, optimize_thresholds, read_counts, read_detections, read_thresholds, threshold_grid, write_confusion,
    write_detections, write_metrics, write_pr_curves, write_thresholds, ConfusionMatrix, Counts, EvaluationReport,
    ImageDetections, MetricRow, ThresholdTable,
};
use leafdet_core::model::{detect, detect_batch, ModelWeights};
use leafdet_core::tensor::Tensor;
use leafdet_core::training::{alternating_train, write_loss_log, TrainStatus};
use log::info;

use crate::{Cli, CliError, Command, RunConfig};

type CmdResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    usage(format!("{}: {e}", path.display()))
}

/// Runs one parsed command line; human-readable results go to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides())?;
    let cache = cli.cache_detections.as_deref();
    match &cli.command {
        Command::Prepare => prepare(&cfg, cli.force, out),
        Command::Train => train(&cfg, out),
        Command::Optimize => optimize(&cfg, cache, out),
        Command::Evaluate => evaluate_cmd(&cfg, cache, out),
        Command::Detect { image, thresholds, csv, annotate } => {
            detect_cmd(&cfg, image, thresholds.as_deref(), csv.as_deref(), annotate.as_deref(), out)
        }
        Command::Report { counts } => report(&cfg, counts, out),
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn prepare(cfg: &RunConfig, force: bool, out: &mut dyn Write) -> CmdResult {
    let root = &cfg.dataset;
    let p = &cfg.prepare;
    if let Some(src) = &p.source {
        for dir in [IMAGE_DIR, ANNOTATION_DIR] {
            if !src.join(dir).is_dir() {
                return Err(usage(format!("source corpus {} has no {dir}/ directory", src.display())));
            }
        }
    }
    if root.exists() {
        if !force {
            return Err(usage(format!("{} already exists; pass --force to replace it", root.display())));
        }
        // only the corpus parts are removed, never the directory itself
        for dir in [IMAGE_DIR, ANNOTATION_DIR] {
            let d = root.join(dir);
            if d.exists() {
                fs::remove_dir_all(&d).map_err(|e| io_err(&d, e))?;
            }
        }
        let m = root.join(MANIFEST);
        if m.exists() {
            fs::remove_file(&m).map_err(|e| io_err(&m, e))?;
        }
    }
    create_dir(root)?;
    let rows = match &p.source {
        None => write_synthetic_corpus(root, p.synthetic_images, &p.class_names(), p.image_size, &p.ratios, p.seed)?,
        Some(src) => {
            let records = read_annotations(src)?;
            if records.is_empty() {
                return Err(usage(format!("no XML annotations under {}", src.join(ANNOTATION_DIR).display())));
            }
            for dir in [IMAGE_DIR, ANNOTATION_DIR] {
                create_dir(&root.join(dir))?;
            }
            for r in &records {
                r.validate()?;
                let from = src.join(IMAGE_DIR).join(&r.filename);
                let to = root.join(IMAGE_DIR).join(&r.filename);
                fs::copy(&from, &to).map_err(|e| io_err(&from, e))?;
                let xml = annotation_path(root, &r.filename);
                fs::write(&xml, write_voc_xml(r)).map_err(|e| io_err(&xml, e))?;
            }
            let rows = build_manifest(&records, &p.ratios, p.seed)?;
            write_manifest(&root.join(MANIFEST), &rows)?;
            rows
        }
    };
    let count = |s: Split| rows.iter().filter(|r| r.split == s).count();
    writeln!(
        out,
        "prepared {} images in {}: {} train, {} val, {} test",
        rows.len(),
        root.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    )
    .ok();
    Ok(())
}

fn require_manifest(cfg: &RunConfig) -> CmdResult {
    let m = cfg.dataset.join(MANIFEST);
    if !m.is_file() {
        return Err(usage(format!("missing manifest {}; run `leafdet prepare` first", m.display())));
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    require_manifest(cfg)?;
    let corpus = Corpus::load(&cfg.dataset, cfg.train.image_size, None)?;
    let samples = corpus.split(Split::Train);
    if samples.is_empty() {
        return Err(usage("the training split is empty"));
    }
    create_dir(&cfg.output)?;
    info!("training on {} images, {} classes", samples.len(), corpus.classes.len());
    let outcome = alternating_train(&samples, &corpus.classes, &cfg.train, |_| ())?;
    let weights_path = cfg.weights_path();
    if let Some(dir) = weights_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    outcome.weights.save(&weights_path)?;
    write_loss_log(&cfg.output.join("train_log.csv"), &outcome.log)?;
    writeln!(out, "weights {} checksum {}", weights_path.display(), outcome.weights.checksum()).ok();
    match outcome.status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { step, epoch, reason } => {
            Err(CliError::Diverged(format!("step {step}, epoch {epoch}: {reason}; last finite weights saved")))
        }
    }
}

struct Model {
    weights: ModelWeights,
    classes: ClassMap,
}

fn load_model(cfg: &RunConfig) -> Result<Model, CliError> {
    let path = cfg.weights_path();
    if !path.is_file() {
        return Err(usage(format!("missing weights {}; run `leafdet train` first", path.display())));
    }
    let weights = ModelWeights::load(&path)?;
    let classes = ClassMap::new(weights.class_names.clone())?;
    Ok(Model { weights, classes })
}

fn load_split(cfg: &RunConfig, model: &Model, split: Split) -> Result<Vec<Sample>, CliError> {
    require_manifest(cfg)?;
    let corpus = Corpus::load(&cfg.dataset, model.weights.config.backbone.input_size, Some(&model.classes))?;
    Ok(corpus.samples.into_iter().filter(|s| s.split == split).collect())
}

fn blurred(image: &Tensor, sigma: f32) -> Result<Tensor, CliError> {
    let shape = image.shape().to_vec();
    let flat = image.clone().reshape(&shape[1..])?;
    Ok(blur_image(&flat, sigma)?.reshape(&shape)?)
}

/// Runs the detector over `samples`, optionally on blurred copies.
fn run_detector(
    cfg: &RunConfig,
    model: &Model,
    samples: &[Sample],
    blur: Option<f32>,
) -> Result<Vec<ImageDetections>, CliError> {
    let images: Vec<Tensor> = match blur {
        Some(s) => samples.iter().map(|x| blurred(&x.image, s)).collect::<Result<_, _>>()?,
        None => samples.iter().map(|x| x.image.clone()).collect(),
    };
    let dets = detect_batch(&model.weights, &images, &cfg.inference)?;
    Ok(samples
        .iter()
        .zip(dets)
        .map(|(s, d)| ImageDetections { filename: s.filename.clone(), detections: d, ground_truth: s.objects.clone() })
        .collect())
}

/// Reuses `cache` when it exists, otherwise detects and writes it.
fn cached_detections(
    cfg: &RunConfig,
    model: &Model,
    samples: &[Sample],
    cache: Option<&Path>,
) -> Result<Vec<ImageDetections>, CliError> {
    if let Some(path) = cache.filter(|p| p.is_file()) {
        info!("reading cached detections from {}", path.display());
        let mut by_file = read_detections(path, &model.classes)?;
        let known: std::collections::BTreeSet<&str> = samples.iter().map(|s| s.filename.as_str()).collect();
        if let Some(stray) = by_file.keys().find(|f| !known.contains(f.as_str())) {
            return Err(usage(format!("{}: `{stray}` is not in this split", path.display())));
        }
        return Ok(samples
            .iter()
            .map(|s| ImageDetections {
                filename: s.filename.clone(),
                detections: by_file.remove(&s.filename).unwrap_or_default(),
                ground_truth: s.objects.clone(),
            })
            .collect());
    }
    let dets = run_detector(cfg, model, samples, None)?;
    if let Some(path) = cache {
        write_detections(path, &dets, &model.classes)?;
    }
    Ok(dets)
}

fn optimize(cfg: &RunConfig, cache: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let model = load_model(cfg)?;
    let val = load_split(cfg, &model, Split::Val)?;
    if val.is_empty() {
        return Err(usage("the validation split is empty"));
    }
    create_dir(&cfg.output)?;
    let dets = cached_detections(cfg, &model, &val, cache)?;
    let table = optimize_thresholds(&dets, &model.classes, &threshold_grid())?;
    let path = cfg.output.join("thresholds.csv");
    write_thresholds(&path, &table)?;
    for row in &table.rows {
        match row.best {
            Some(b) => writeln!(out, "{}: threshold {b:.1}", row.class),
            None => writeln!(out, "{}: no validation image", row.class),
        }
        .ok();
    }
    writeln!(out, "wrote {}", path.display()).ok();
    Ok(())
}

/// The threshold table to apply, if any: the configured path, or
/// `<output>/thresholds.csv` when it exists.
fn threshold_table(cfg: &RunConfig, explicit: Option<&Path>, classes: &ClassMap) -> Result<Option<ThresholdTable>, CliError> {
    let path = explicit.map(Path::to_path_buf).or_else(|| cfg.evaluation.thresholds.clone());
    match path {
        Some(p) if !p.is_file() => Err(usage(format!("missing threshold table {}", p.display()))),
        Some(p) => Ok(Some(read_thresholds(&p, classes)?)),
        None => {
            let p = cfg.output.join("thresholds.csv");
            if p.is_file() {
                info!("using thresholds from {}", p.display());
                Ok(Some(read_thresholds(&p, classes)?))
            } else {
                Ok(None)
            }
        }
    }
}

fn score_thresholds(cfg: &RunConfig, table: Option<&ThresholdTable>, n: usize) -> Vec<f64> {
    let default = cfg.evaluation.score_threshold;
    table.map_or_else(|| vec![default; n], |t| t.per_class(default))
}

fn write_report(cfg: &RunConfig, model: &Model, report: &EvaluationReport, suffix: &str) -> CmdResult {
    let file = |stem: &str| cfg.output.join(format!("{stem}{suffix}.csv"));
    write_metrics(&file("metrics"), report)?;
    write_confusion(&file("confusion"), report, &model.classes)?;
    write_pr_curves(&file("pr_curves"), report)?;
    Ok(())
}

fn print_rows(out: &mut dyn Write, rows: &[MetricRow], overall: &MetricRow) {
    writeln!(out, "{:<24} {:>6} {:>6} {:>6} {:>8} {:>9} {:>8}", "class", "TP", "FP", "FN", "F2", "precision", "recall").ok();
    for r in rows.iter().chain(std::iter::once(overall)) {
        writeln!(
            out,
            "{:<24} {:>6} {:>6} {:>6} {:>8.4} {:>9.4} {:>8.4}",
            r.class, r.tp, r.fp, r.fn_, r.f2, r.precision, r.recall
        )
        .ok();
    }
}

fn evaluate_cmd(cfg: &RunConfig, cache: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let model = load_model(cfg)?;
    let table = threshold_table(cfg, None, &model.classes)?;
    let test = load_split(cfg, &model, Split::Test)?;
    if test.is_empty() {
        return Err(usage("the test split is empty"));
    }
    create_dir(&cfg.output)?;
    let thresholds = score_thresholds(cfg, table.as_ref(), model.classes.len());
    let iou = cfg.evaluation.iou_threshold;

    let dets = cached_detections(cfg, &model, &test, cache)?;
    write_detections(&cfg.output.join("detections.csv"), &dets, &model.classes)?;
    let report = evaluate(&dets, &model.classes, iou, &thresholds)?;
    write_report(cfg, &model, &report, "")?;
    print_rows(out, &report.rows, &report.overall);
    match report.map {
        Some(m) => writeln!(out, "mAP {m:.4}"),
        None => writeln!(out, "mAP undefined"),
    }
    .ok();

    if let Some(sigma) = cfg.evaluation.blur_sigma {
        let dets = run_detector(cfg, &model, &test, Some(sigma))?;
        write_detections(&cfg.output.join("detections_blur.csv"), &dets, &model.classes)?;
        let blur = evaluate(&dets, &model.classes, iou, &thresholds)?;
        write_report(cfg, &model, &blur, "_blur")?;
        writeln!(out, "blurred copies (sigma {sigma}):").ok();
        print_rows(out, &blur.rows, &blur.overall);
    }
    Ok(())
}

const BOX_COLORS: [[f32; 3]; 6] =
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.4, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];

/// Draws 2-pixel box outlines into a `[3, H, W]` image.
fn burn_boxes(image: &mut Tensor, dets: &[Detection]) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let data = image.data_mut();
    for d in dets {
        let color = BOX_COLORS[d.class_id % BOX_COLORS.len()];
        let clampx = |v: f32| (v.round().max(0.0) as usize).min(w - 1);
        let clampy = |v: f32| (v.round().max(0.0) as usize).min(h - 1);
        let (x1, x2, y1, y2) = (clampx(d.bbox.x1), clampx(d.bbox.x2), clampy(d.bbox.y1), clampy(d.bbox.y2));
        for y in y1..=y2 {
            for x in x1..=x2 {
                let edge = x <= x1 + 1 || x + 1 >= x2 || y <= y1 + 1 || y + 1 >= y2;
                if edge {
                    for (c, v) in color.iter().enumerate() {
                        data[c * h * w + y * w + x] = *v;
                    }
                }
            }
        }
    }
}

fn detect_cmd(
    cfg: &RunConfig,
    image: &Path,
    thresholds: Option<&Path>,
    csv: Option<&Path>,
    annotate: Option<&Path>,
    out: &mut dyn Write,
) -> CmdResult {
    let model = load_model(cfg)?;
    let table = threshold_table(cfg, thresholds, &model.classes)?;
    let size = model.weights.config.backbone.input_size;
    let (resized, sx, sy) =
        load_and_resize(image, size).map_err(|e| usage(format!("cannot read image {}: {e}", image.display())))?;
    let dets = detect(&model.weights, &resized.reshape(&[1, 3, size, size])?, &cfg.inference)?;
    let cut = score_thresholds(cfg, table.as_ref(), model.classes.len());
    let kept: Vec<Detection> = dets
        .into_iter()
        .filter(|d| d.score as f64 >= cut[d.class_id])
        .map(|d| Ok(Detection::new(d.bbox.scaled(1.0 / sx, 1.0 / sy)?, d.class_id, d.score)?))
        .collect::<Result<_, CliError>>()?;

    let name = image.file_name().map_or_else(|| image.display().to_string(), |n| n.to_string_lossy().into_owned());
    for d in &kept {
        let b = d.bbox;
        writeln!(out, "{} {:.4} {:.1} {:.1} {:.1} {:.1}", model.classes.names()[d.class_id], d.score, b.x1, b.y1, b.x2, b.y2)
            .ok();
    }
    let csv_path: PathBuf = match csv {
        Some(p) => p.to_path_buf(),
        None => {
            create_dir(&cfg.output)?;
            let stem = image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            cfg.output.join(format!("{stem}_detections.csv"))
        }
    };
    let record = ImageDetections { filename: name, detections: kept.clone(), ground_truth: vec![] };
    write_detections(&csv_path, &[record], &model.classes)?;
    if let Some(ppm) = annotate {
        let mut original = load_image(image)?;
        burn_boxes(&mut original, &kept);
        save_ppm(ppm, &original)?;
    }
    Ok(())
}

/// Metric rows for `(class, counts)` pairs plus the summed Overall row. A
/// row named `Overall` in the input is ignored and recomputed.
pub fn report_rows(counts: &[(String, Counts)]) -> (Vec<MetricRow>, MetricRow) {
    let rows: Vec<MetricRow> = counts
        .iter()
        .filter(|(c, _)| !c.eq_ignore_ascii_case("overall"))
        .map(|(c, k)| MetricRow::from_counts(c.clone(), *k))
        .collect();
    let mut total = Counts::default();
    for r in &rows {
        total += r.counts();
    }
    (rows, MetricRow::from_counts("Overall", total))
}

fn report(cfg: &RunConfig, counts: &Path, out: &mut dyn Write) -> CmdResult {
    if !counts.is_file() {
        return Err(usage(format!("missing counts file {}", counts.display())));
    }
    let (rows, overall) = report_rows(&read_counts(counts)?);
    if rows.is_empty() {
        return Err(usage(format!("{} has no class rows", counts.display())));
    }
    create_dir(&cfg.output)?;
    let n = rows.len();
    let report = EvaluationReport {
        rows,
        overall,
        ap: vec![None; n],
        map: None,
        confusion: ConfusionMatrix::new(n),
        pr_curves: vec![vec![]; n],
    };
    let path = cfg.output.join("report.csv");
    write_metrics(&path, &report)?;
    print_rows(out, &report.rows, &report.overall);
    writeln!(out, "wrote {}", path.display()).ok();
    Ok(())
}
