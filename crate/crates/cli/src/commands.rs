use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use holiseg_core::config::RunConfig;
use holiseg_core::contamination::{render_surface, MetricField};
use holiseg_core::gradcheck::{
    check_all_ops, check_full_net, check_op, CheckResult, NET_TOLERANCE, OP_TOLERANCE,
};
use holiseg_core::io::{read_label_map, read_tensor, render_labels, write_label_map, write_tensor};
use holiseg_core::micronet::{save_checkpoint, train};
use holiseg_core::{
    filter_then_upsample, hard_filter_argmax, run_grid, soft_filter, ConfusionMatrix, FilterOrder,
    HolisticConfidence, LabelSet, ScoreMapSet, Variant,
};

use crate::ConfigArgs;

/// Regular files in `dir` with extension `ext`, sorted by path.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            files.push(path);
        }
    }
    files.sort();
    ensure!(!files.is_empty(), "no .{ext} files in {}", dir.display());
    Ok(files)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_config(args: &ConfigArgs, overrides: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| path.display().to_string())?;
    }
    let flags = [
        ("classes", args.classes.map(|v| v.to_string())),
        ("ignore", args.ignore.map(|v| v.to_string())),
    ];
    for (key, value) in flags.iter().chain(overrides) {
        if let Some(v) = value {
            cfg.set(key, v).with_context(|| format!("--{}", key.replace('_', "-")))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn eval(pred_dir: &Path, truth_dir: &Path, args: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let cfg = run_config(args, &[])?;
    let mut cm = ConfusionMatrix::new(cfg.micronet.num_classes)?;
    for truth_path in files_with_ext(truth_dir, "pgm")? {
        let name = truth_path.file_name().expect("file");
        let pred_path = pred_dir.join(name);
        let truth = read_label_map(&truth_path).with_context(|| truth_path.display().to_string())?;
        let pred = read_label_map(&pred_path).with_context(|| pred_path.display().to_string())?;
        cm.accumulate(&pred, &truth, Some(cfg.micronet.ignore_label))
            .with_context(|| name.to_string_lossy().into_owned())?;
    }
    write_output(out, &cm.compute()?.to_csv())
}

fn read_label_list(path: &Path) -> Result<LabelSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .with_context(|| format!("{}: bad class id {t:?}", path.display()))
        })
        .collect()
}

pub fn filter_hard(scores: &Path, labels_file: &Path, out: &Path) -> Result<()> {
    let scores = read_tensor(scores).with_context(|| scores.display().to_string())?;
    let allowed = read_label_list(labels_file)?;
    let labels = hard_filter_argmax(&scores, &allowed)?;
    write_label_map(out, &labels).with_context(|| format!("writing {}", out.display()))
}

pub fn filter_soft(
    scores: &Path,
    conf: &Path,
    eps: f64,
    out: &Path,
    upsample: Option<&[usize]>,
    filter_after_upsample: bool,
) -> Result<()> {
    let seg = read_tensor(scores).with_context(|| scores.display().to_string())?;
    let conf = HolisticConfidence::new(read_tensor(conf).with_context(|| conf.display().to_string())?)?;
    let result = match upsample {
        Some(&[h, w]) => {
            let order = if filter_after_upsample {
                FilterOrder::UpsampleThenFilter
            } else {
                FilterOrder::FilterThenUpsample
            };
            filter_then_upsample(&seg, &conf, h, w, eps, order)?
        }
        Some(_) => bail!("--upsample takes two values"),
        None => soft_filter(&seg, &conf, eps)?,
    };
    write_tensor(out, &result).with_context(|| format!("writing {}", out.display()))
}

pub struct GridArgs<'a> {
    pub scores_dir: &'a Path,
    pub truth_dir: &'a Path,
    pub np_list: Option<&'a str>,
    pub nr_list: Option<&'a str>,
    pub seed: Option<u64>,
    pub csv: &'a Path,
    pub heatmap: Option<&'a Path>,
    pub metric: &'a str,
    pub config: &'a ConfigArgs,
}

pub fn contaminate_grid(args: GridArgs) -> Result<()> {
    let metric: MetricField = args.metric.parse()?;
    let cfg = run_config(
        args.config,
        &[
            ("np_list", args.np_list.map(str::to_string)),
            ("nr_list", args.nr_list.map(str::to_string)),
            ("seed", args.seed.map(|s| s.to_string())),
        ],
    )?;
    let mut data = Vec::new();
    for path in files_with_ext(args.scores_dir, "hstn")? {
        let stem = path.file_stem().expect("file");
        let truth_path = args.truth_dir.join(stem).with_extension("pgm");
        let scores = read_tensor(&path).with_context(|| path.display().to_string())?;
        let truth = read_label_map(&truth_path).with_context(|| truth_path.display().to_string())?;
        let set = ScoreMapSet::new(scores, truth).with_context(|| stem.to_string_lossy().into_owned())?;
        if args.config.classes.is_some() {
            ensure!(
                set.num_classes() == cfg.micronet.num_classes,
                "{}: {} score channels but --classes is {}",
                path.display(),
                set.num_classes(),
                cfg.micronet.num_classes
            );
        }
        data.push(set);
    }
    let out = run_grid(&data, &cfg.np_list, &cfg.nr_list, cfg.seed, Some(cfg.micronet.ignore_label))?;
    write_output(Some(args.csv), &out.to_csv())?;
    if let Some(path) = args.heatmap {
        let map = render_surface(&out.records, metric, metric.of_report(&out.baseline))?;
        fs::write(path, map.to_ppm()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn report_checks(results: &[(String, CheckResult)], tol: f64) -> Result<()> {
    println!("check,max_error");
    for (prefix, r) in results {
        println!("{prefix}{},{:.3e}", r.name, r.max_error);
    }
    let failed: Vec<_> = results.iter().filter(|(_, r)| r.max_error.is_nan() || r.max_error >= tol).collect();
    if let Some((prefix, worst)) = failed
        .iter()
        .max_by(|a, b| a.1.max_error.total_cmp(&b.1.max_error))
    {
        bail!(
            "{} of {} checks exceed tolerance {tol:e}; worst {prefix}{} at {:.3e}",
            failed.len(),
            results.len(),
            worst.name,
            worst.max_error
        );
    }
    Ok(())
}

pub fn gradcheck(op: Option<&str>, full_net: bool, seed: u64, tol: Option<f64>) -> Result<()> {
    if let Some(t) = tol {
        ensure!(t > 0.0 && t.is_finite(), "--tol must be positive, got {t}");
    }
    if full_net {
        let r = check_full_net(seed)?;
        let results: Vec<(String, CheckResult)> = r
            .total
            .iter()
            .map(|c| ("total/".to_string(), c.clone()))
            .chain(r.filter_path.iter().map(|c| ("filter_path/".to_string(), c.clone())))
            .collect();
        report_checks(&results, tol.unwrap_or(NET_TOLERANCE))?;
        ensure!(
            r.filter_path_grad > 0.0,
            "holistic branch receives no gradient through the filter"
        );
        return Ok(());
    }
    let results = match op {
        Some(name) => check_op(name, seed)?,
        None => check_all_ops(seed)?,
    };
    let results: Vec<_> = results.into_iter().map(|r| (String::new(), r)).collect();
    report_checks(&results, tol.unwrap_or(OP_TOLERANCE))
}

pub fn train_toy(
    variant: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    out_checkpoint: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let variant: Variant = variant.parse()?;
    let args = ConfigArgs {
        config: config.map(Path::to_path_buf),
        ..ConfigArgs::default()
    };
    let cfg = run_config(&args, &[("seed", seed.map(|s| s.to_string()))])?;
    let (train_set, val_set) = cfg.shapes_split()?;
    let out = train(&train_set, &val_set, &cfg.micronet, cfg.seed, variant)?;
    if let Some(dir) = out_checkpoint {
        save_checkpoint(dir, &out.params.weights, &cfg.micronet)
            .with_context(|| format!("writing checkpoint {}", dir.display()))?;
    }
    write_output(log, &out.log_csv())
}

pub fn render(labels: &Path, out: &Path, classes: Option<usize>, ignore: u32, palette_seed: u64) -> Result<()> {
    let map = read_label_map(labels).with_context(|| labels.display().to_string())?;
    let classes = match classes {
        Some(c) => c,
        None => map
            .data()
            .iter()
            .filter(|&&l| l != ignore)
            .max()
            .map_or(1, |&m| m as usize + 1),
    };
    let image = render_labels(&map, classes, Some(ignore), palette_seed)?;
    fs::write(out, image.to_ppm()).with_context(|| format!("writing {}", out.display()))
}
