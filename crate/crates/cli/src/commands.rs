use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use inpaint_core::imaging::{
    colormap_image, export_colormap, image_to_rgb8, load_image, load_mask, save_image, save_mask, save_rgb,
    side_by_side,
};
use inpaint_core::maskgen::{generate_bucketed_masks, BucketedMaskSpec};
use inpaint_core::metrics::{
    evaluate_dataset, load_test_images, BucketedTestMasks, FeatureExtractor, InpaintModel, RandomProjectionExtractor,
};
use inpaint_core::training::{train_loop_with, Dataset, LoopOptions, RunLayout, StepMetrics};
use inpaint_core::{compose_input, composite_output, mask_ratio, Mode, TrainConfig, TrainState, RATIO_BUCKETS};
use serde::{Deserialize, Serialize};

use crate::args::{EvaluateArgs, ExtractorKind, GenmasksArgs, InferArgs, Stub, TrainArgs, VisualizeArgs};
use crate::config;

/// Global flags shared by every subcommand.
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Globals {
    fn require_out(&self, command: &str) -> Result<&Path> {
        self.out.as_deref().with_context(|| format!("`{command}` needs --out"))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_dir(), "{what} directory {} does not exist", path.display());
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_file(), "{what} {} does not exist", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Per-bucket outcome written to `summary.toml` by `genmasks`.
#[derive(Debug, Serialize, Deserialize)]
pub struct BucketSummary {
    pub requested: usize,
    pub generated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_ratio: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskSummary {
    pub size: usize,
    pub seed: u64,
    pub attempts: usize,
    pub buckets: BTreeMap<String, BucketSummary>,
}

pub fn genmasks(g: &Globals, args: &GenmasksArgs) -> Result<()> {
    let out = g.require_out("genmasks")?;
    let quotas: [usize; 6] = match &args.quotas {
        Some(q) => q
            .as_slice()
            .try_into()
            .map_err(|_| anyhow::anyhow!("--quotas needs exactly 6 values, got {}", q.len()))?,
        None => [args.count; 6],
    };
    let mut spec = BucketedMaskSpec::uniform(args.size, g.seed.unwrap_or(0), 0);
    spec.quota_per_bucket = quotas;
    spec.border_constrained = args.border;
    spec.augment = !args.no_augment;
    spec.max_attempts = args.max_attempts.unwrap_or(50 * quotas.iter().sum::<usize>().max(1));
    // Validates size and stroke parameters before anything is written.
    let masks = generate_bucketed_masks(&spec)?;

    let mut buckets = BTreeMap::new();
    for ((bucket, group), requested) in RATIO_BUCKETS.iter().zip(&masks.buckets).zip(quotas) {
        let label = bucket.label();
        for (i, mask) in group.iter().enumerate() {
            save_mask(mask, out.join(&label).join(format!("{i:05}.png")))?;
        }
        let ratios: Vec<f64> = group.iter().map(mask_ratio).collect();
        let n = ratios.len();
        buckets.insert(
            label,
            BucketSummary {
                requested,
                generated: n,
                min_ratio: ratios.iter().copied().reduce(f64::min),
                mean_ratio: (n > 0).then(|| ratios.iter().sum::<f64>() / n as f64),
                max_ratio: ratios.iter().copied().reduce(f64::max),
            },
        );
    }
    let summary = MaskSummary {
        size: spec.size,
        seed: spec.seed,
        attempts: masks.attempts,
        buckets,
    };
    write_text(&out.join("summary.toml"), &toml::to_string(&summary)?)?;

    let unmet = masks.unmet(&spec);
    if !unmet.is_empty() {
        let detail: Vec<String> = unmet
            .iter()
            .map(|&(i, got, want)| format!("{}: {got}/{want}", RATIO_BUCKETS[i].label()))
            .collect();
        bail!(
            "bucket quotas unmet after {} attempts ({})",
            masks.attempts,
            detail.join(", ")
        );
    }
    eprintln!(
        "wrote {} masks to {} ({} attempts)",
        quotas.iter().sum::<usize>(),
        out.display(),
        masks.attempts
    );
    Ok(())
}

/// Fixed paths of a training run, relative to its root.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestLayout {
    pub manifest: String,
    pub checkpoints: String,
    pub metrics_log: String,
    pub samples: String,
}

/// Written once, before the first training step.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub code_version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub start_time: u64,
    pub images: PathBuf,
    pub masks: PathBuf,
    pub layout: ManifestLayout,
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

/// Resolves the effective config. On resume the checkpoint's config is the
/// base and only `epochs` and `checkpoint_interval` may change.
fn resolve_train_config(g: &Globals, args: &TrainArgs, resumed: Option<&TrainConfig>) -> Result<TrainConfig> {
    let mut table = match resumed {
        Some(cfg) => config::config_table(cfg)?,
        None => toml::Table::new(),
    };
    if let Some(path) = &g.config {
        config::merge(&mut table, config::read_table(path)?);
    }
    config::apply_train_flags(&mut table, args, g.seed)?;
    let cfg = config::to_config(&table)?;
    if let Some(old) = resumed {
        let comparable = TrainConfig {
            epochs: old.epochs,
            checkpoint_interval: old.checkpoint_interval,
            ..cfg
        };
        ensure!(
            comparable == *old,
            "resumed run must keep the checkpoint's config (only epochs and checkpoint_interval may change)"
        );
    }
    Ok(cfg)
}

pub fn train(g: &Globals, args: &TrainArgs) -> Result<()> {
    let out = g.require_out("train")?;
    let layout = RunLayout::new(out);
    let resumed = if args.resume {
        let path = layout.last_checkpoint();
        require_file(&path, "checkpoint")?;
        Some(TrainState::load(&path).with_context(|| format!("loading {}", path.display()))?)
    } else {
        ensure!(
            !layout.manifest().exists(),
            "{} already holds a run; pass --resume or choose another --out",
            out.display()
        );
        None
    };
    let cfg = resolve_train_config(g, args, resumed.as_ref().map(|(c, _)| c))?;
    require_dir(&args.images, "image")?;
    require_dir(&args.masks, "mask")?;
    let data = Dataset::load(&args.images, &args.masks, cfg.image_size)?;

    let mut state = match resumed {
        Some((_, state)) => state,
        None => {
            let state = TrainState::new(&cfg)?;
            layout.create()?;
            let manifest = RunManifest {
                config: cfg,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: cfg.seed,
                start_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
                images: args.images.clone(),
                masks: args.masks.clone(),
                layout: ManifestLayout {
                    manifest: relative(out, &layout.manifest()),
                    checkpoints: relative(out, &layout.checkpoints_dir()),
                    metrics_log: relative(out, &layout.metrics_log()),
                    samples: relative(out, &layout.samples_dir()),
                },
            };
            write_text(&layout.manifest(), &serde_json::to_string_pretty(&manifest)?)?;
            state
        }
    };

    let total = data.steps_per_epoch(cfg.batch_size) * cfg.epochs as u64;
    eprintln!(
        "training {} mode: {} images, {} masks, steps {}..{total}",
        cfg.mode.as_str(),
        data.images.len(),
        data.masks.len(),
        state.step
    );
    let every = args.log_every;
    let report = |r: &StepMetrics| {
        if every > 0 && (r.step.is_multiple_of(every) || r.step + 1 == total) {
            let mut line = format!("step {:>7}  loss_g {:.6}", r.step, r.loss_g);
            if let Some(d) = r.loss_d {
                line.push_str(&format!("  loss_d {d:.6}"));
            }
            if let (Some(i), Some(o)) = (r.mean_v_in, r.mean_v_out) {
                line.push_str(&format!("  v_in {i:.3}  v_out {o:.3}"));
            }
            eprintln!("{line}");
        }
    };
    let options = LoopOptions {
        layout: Some(layout.clone()),
        stop_at: None,
    };
    train_loop_with(&cfg, &data, &mut state, &options, report)?;
    eprintln!(
        "done at step {}; checkpoint {}",
        state.step,
        layout.last_checkpoint().display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    require_file(path, "checkpoint")?;
    TrainState::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn infer(args: &InferArgs) -> Result<()> {
    require_file(&args.image, "image")?;
    require_file(&args.mask, "mask")?;
    let (cfg, state) = load_checkpoint(&args.checkpoint)?;
    let size = args.size.unwrap_or(cfg.image_size);
    let gt = load_image(&args.image, size)?.to_rgb();
    let mask = load_mask(&args.mask, size)?;
    let out = state.generator.forward(&compose_input(&gt, &mask)?, &mask)?;
    save_image(&out, &args.output)?;
    if let Some(path) = &args.composite {
        save_image(&composite_output(&out, &gt, &mask)?, path)?;
    }
    Ok(())
}

pub fn evaluate(g: &Globals, args: &EvaluateArgs) -> Result<()> {
    let extractor: Option<Box<dyn FeatureExtractor>> = match (args.fid, args.extractor) {
        (true, Some(ExtractorKind::Bundled)) => Some(Box::new(RandomProjectionExtractor::new())),
        (true, None) => bail!("--fid needs a feature extractor; pass --extractor bundled"),
        (false, Some(_)) => bail!("--extractor is only used together with --fid"),
        (false, None) => None,
    };
    let report_path = match (&args.report, &g.out) {
        (Some(p), _) => p.clone(),
        (None, Some(out)) => out.join("report.toml"),
        (None, None) => bail!("`evaluate` needs --report or --out"),
    };
    require_dir(&args.images, "image")?;
    require_dir(&args.masks, "mask")?;
    let (model, default_size) = match (&args.checkpoint, args.stub) {
        (Some(path), _) => {
            let (cfg, state) = load_checkpoint(path)?;
            (InpaintModel::Generator(Box::new(state.generator)), cfg.image_size)
        }
        (None, Some(Stub::Perfect)) => (InpaintModel::PerfectStub, 256),
        (None, Some(Stub::Identity)) => (InpaintModel::IdentityStub, 256),
        (None, None) => bail!("`evaluate` needs --checkpoint or --stub"),
    };
    let size = args.size.unwrap_or(default_size);
    let images = load_test_images(&args.images, size)?;
    let masks = BucketedTestMasks::load(&args.masks, size)?;
    let report = evaluate_dataset(&model, &images, &masks, args.composite, extractor.as_deref())?;
    let text = report.to_toml_string()?;
    write_text(&report_path, &text)?;
    print!("{text}");
    Ok(())
}

pub fn visualize(g: &Globals, args: &VisualizeArgs) -> Result<()> {
    let out = g.require_out("visualize")?;
    require_file(&args.image, "image")?;
    require_file(&args.mask, "mask")?;
    let (cfg, state) = load_checkpoint(&args.checkpoint)?;
    ensure!(
        cfg.mode == Mode::Det,
        "checkpoint was trained in {} mode and has no pixel-wise detector; visualize needs a det-mode checkpoint",
        cfg.mode.as_str()
    );
    let det = state.critic.as_ref().context("det-mode checkpoint without detector")?;
    let size = args.size.unwrap_or(cfg.image_size);
    let gt = load_image(&args.image, size)?.to_rgb();
    let mask = load_mask(&args.mask, size)?;
    let i_in = compose_input(&gt, &mask)?;
    let i_out = state.generator.forward(&i_in, &mask)?;
    let v_res = det.forward(&i_out)?;
    let v_gt = det.forward(&gt)?;
    export_colormap(&v_res, out.join("m_res.png"))?;
    export_colormap(&v_gt, out.join("m_gt.png"))?;
    save_image(&i_out, out.join("output.png"))?;
    save_rgb(
        &side_by_side(&[colormap_image(&v_res), colormap_image(&v_gt)]),
        out.join("colormaps.png"),
    )?;
    save_rgb(
        &side_by_side(&[
            image_to_rgb8(&i_in),
            image_to_rgb8(&i_out),
            colormap_image(&v_res),
            colormap_image(&v_gt),
        ]),
        out.join("panel.png"),
    )?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    let (res_in, res_out) = v_res.region_means(&mask);
    let (gt_in, gt_out) = v_gt.region_means(&mask);
    println!("M(Res) mean V inside {} outside {}", fmt(res_in), fmt(res_out));
    println!("M(GT)  mean V inside {} outside {}", fmt(gt_in), fmt(gt_out));
    Ok(())
}
