//! Command-line pipeline: `synth-data`, `pretrain`, `transfer`, `analyze`,
//! `eval` and `report`, each reading one experiment config.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{emit_report, feature_correlation, top_activations, LossCurve};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{generate_colored_shapes, load_image_folder, save_image_folder, Dataset, Splits};
use crate::error::{Error, Result};
use crate::pretrain::{train_colorization, write_metrics_csv};
use crate::transfer::{
    adapt, batch_input, early_stopping_trainer, evaluate_classification, evaluate_segmentation, write_results_csv,
    DownstreamModel, HeadKind, Init, ResultRow,
};

#[derive(Parser, Debug)]
#[command(name = "colorproxy", version, about = "Colorization pretraining and transfer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset to PNG folders.
    SynthData(Common),
    /// Train the colorization trunk.
    Pretrain(Common),
    /// Adapt a checkpoint and fine-tune it downstream.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint; random initialisation when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Correlation and top-activation analysis of a fine-tuned trunk.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned model; defaults to the colorization transfer output.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate a saved downstream model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Collect results into a summary.
    Report(Common),
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("data")
}

fn mask_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("masks")
}

fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    match &cfg.data {
        DataSource::Synthetic { .. } => {
            let root = data_dir(cfg);
            if !root.is_dir() {
                return Err(Error::Dataset(format!("{} does not exist; run synth-data first", root.display())));
            }
            let masks = mask_dir(cfg);
            load_image_folder(&root, masks.is_dir().then_some(masks.as_path()))
        }
        DataSource::Folder { root, masks } => load_image_folder(root, masks.as_deref()),
    }
}

fn split<'a>(splits: &'a Splits, name: &str) -> Result<&'a Dataset> {
    splits.get(name).ok_or_else(|| Error::Dataset(format!("split `{name}` not found")))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn synth_data(cfg: &ExperimentConfig) -> Result<()> {
    let DataSource::Synthetic { spec } = &cfg.data else {
        return Err(Error::Config { path: "data.source".into(), detail: "synth-data needs a synthetic source".into() });
    };
    let splits = generate_colored_shapes(spec, cfg.seed)?;
    let masks = mask_dir(cfg);
    save_image_folder(&splits, &data_dir(cfg), spec.masks.then_some(masks.as_path()))?;
    for (name, ds) in &splits {
        println!("{name}: {} images", ds.len());
    }
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let data = split(&splits, "unlabeled")?;
    let out = train_colorization(&cfg.pretrain, data, cfg.seed)?;
    let dir = cfg.out.join("pretrain");
    let ckdir = dir.join("checkpoints");
    mkdir(&ckdir)?;
    for ck in &out.checkpoints {
        save_checkpoint(ck, &ckdir.join(format!("{}_step{:06}.ckpt", ck.meta.tag, ck.meta.step)))?;
    }
    let last = out.checkpoints.last().ok_or_else(|| Error::Checkpoint("no checkpoint produced".into()))?;
    save_checkpoint(last, &dir.join("final.ckpt"))?;
    let mut csv = Vec::new();
    write_metrics_csv(&out.metrics, &mut csv).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join("metrics.csv"), csv)?;
    let final_loss = out.metrics.last().map_or(f64::NAN, |m| m.loss);
    println!("pretrained {} steps, final loss {final_loss:.4}", out.metrics.len());
    Ok(())
}

/// Trunk of a pretraining checkpoint, checked against the config.
fn pretrained_trunk(cfg: &ExperimentConfig, path: &Path) -> Result<crate::model::Network<f32>> {
    let ck = load_checkpoint(path)?;
    if ck.meta.config_hash != cfg.pretrain_hash() || ck.meta.network != cfg.pretrain.network {
        return Err(Error::Checkpoint(format!(
            "{} was not produced by this config's pretraining section",
            path.display()
        )));
    }
    ck.network()
}

fn downstream_meta(cfg: &ExperimentConfig, model: &DownstreamModel<f32>, seed: u64) -> CheckpointMeta {
    CheckpointMeta {
        tag: format!("downstream:{}", serde_json::to_string(&model.kind).expect("head kind serialises")),
        config_hash: crate::config::hash_json(&cfg.transfer),
        step: 0,
        epoch: 0.0,
        learning_rate: cfg.transfer.finetune.base_lr,
        seed,
        loss_scale: 1.0,
        network: model.net.spec.clone(),
        head: Some(model.head.spec.clone()),
    }
}

fn load_downstream(path: &Path) -> Result<DownstreamModel<f32>> {
    let ck: Checkpoint = load_checkpoint(path)?;
    let kind = ck
        .meta
        .tag
        .strip_prefix("downstream:")
        .and_then(|k| serde_json::from_str::<HeadKind>(k).ok())
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a downstream model", path.display())))?;
    DownstreamModel::from_checkpoint(&ck, kind)
}

fn metric_rows(
    cfg: &ExperimentConfig,
    model: &DownstreamModel<f32>,
    eval: &Dataset,
    init: &str,
    drops: &[f64],
) -> Result<Vec<ResultRow>> {
    let task = model.kind.task();
    let row = |metric: String, value: f64| ResultRow {
        run_id: format!("{init}-{task}-s{}", cfg.seed),
        init: init.to_string(),
        task: task.to_string(),
        metric,
        value,
        seed: cfg.seed,
        drop_epochs: drops.to_vec(),
    };
    match model.kind {
        HeadKind::Classification => cfg
            .transfer
            .top_k
            .iter()
            .filter(|&&k| k <= model.num_classes)
            .map(|&k| Ok(row(format!("top{k}"), evaluate_classification(model, eval, k)?)))
            .collect(),
        HeadKind::Segmentation { .. } => Ok(vec![row("miou".into(), evaluate_segmentation(model, eval)?)]),
    }
}

fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut csv = Vec::new();
    write_results_csv(rows, &mut csv).map_err(|e| Error::io(path, e))?;
    write_file(path, csv)
}

fn transfer(cfg: &ExperimentConfig, init: Option<&Path>) -> Result<()> {
    let splits = load_splits(cfg)?;
    let mut train = split(&splits, &cfg.transfer.train_split)?.clone();
    let mut eval = split(&splits, &cfg.transfer.eval_split)?.clone();
    for t in &cfg.transfer.label_transforms {
        train = t.apply(&train)?;
        if t.changes_label_space() {
            eval = t.apply(&eval)?;
        }
    }
    let mut inits = Vec::new();
    if let Some(p) = init {
        inits.push(Init::Pretrained(pretrained_trunk(cfg, p)?));
    }
    if init.is_none() || cfg.transfer.compare_random {
        inits.push(Init::Random(cfg.pretrain.network.clone()));
    }
    let ft = &cfg.transfer.finetune;
    let dir = cfg.out.join("transfer");
    mkdir(&dir)?;
    let mut rows = Vec::new();
    for init in &inits {
        let name = init.name();
        let adapted = adapt(init, &ft.plan, &train, train.num_classes(), cfg.seed)?;
        let outcome = early_stopping_trainer(ft, &adapted, &train, cfg.seed)?;
        save_checkpoint(&adapted.to_checkpoint(downstream_meta(cfg, &adapted, cfg.seed)), &dir.join(format!("{name}_adapted.ckpt")))?;
        let mut meta = downstream_meta(cfg, &outcome.model, cfg.seed);
        meta.epoch = outcome.stop_epoch;
        save_checkpoint(&outcome.model.to_checkpoint(meta), &dir.join(format!("{name}.ckpt")))?;
        let mut hist = String::from("epoch,validation\n");
        for (e, v) in &outcome.history {
            hist.push_str(&format!("{e:.4},{v:.6}\n"));
        }
        write_file(&dir.join(format!("{name}_validation.csv")), hist)?;
        let r = metric_rows(cfg, &outcome.model, &eval, name, &outcome.drop_epochs)?;
        for row in &r {
            println!("{name} {} {} = {:.4} (drops at {:?})", row.task, row.metric, row.value, row.drop_epochs);
        }
        rows.extend(r);
    }
    write_results(&dir.join("results.csv"), &rows)
}

fn read_loss_curve(path: &Path) -> Result<LossCurve> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Dataset(format!("{}: {e}", path.display())));
        if f.len() >= 4 {
            points.push((parse(f[1])?, parse(f[3])?));
        }
    }
    Ok(LossCurve { name: "colorization".into(), points })
}

fn analyze(cfg: &ExperimentConfig, model: Option<&Path>) -> Result<()> {
    let dir = cfg.out.join("transfer");
    let tuned = load_downstream(&model.map_or_else(|| dir.join("colorization.ckpt"), Path::to_path_buf))?;
    let before = load_downstream(&dir.join("colorization_adapted.ckpt"))?;
    let splits = load_splits(cfg)?;
    let probe = split(&splits, &cfg.analysis.probe_split)?;
    let images: Vec<_> = probe.samples.iter().map(|s| s.image.clone()).collect();
    let x = batch_input::<f32>(&images, tuned.input_channels())?;
    let report = feature_correlation(&before.net, &tuned.net, &x)?;
    let curves = [read_loss_curve(&cfg.out.join("pretrain").join("metrics.csv"))?];
    let out = cfg.out.join("analysis");
    emit_report(&report, &curves, &out)?;
    let layer = match &cfg.analysis.top_layer {
        Some(l) => l.clone(),
        None => tuned.net.spec.layers.last().map(|l| l.name.clone()).unwrap_or_default(),
    };
    let top = top_activations(&tuned.net, &layer, &x, cfg.analysis.top_m)?;
    write_file(&out.join("top_activations.json"), serde_json::to_string_pretty(&top).expect("serialises") + "\n")?;
    for l in &report.layers {
        println!("{:16} median corr {}", l.layer, l.median.map_or("undefined".into(), |m| format!("{m:.3}")));
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, model: Option<&Path>) -> Result<()> {
    let path = model.map_or_else(|| cfg.out.join("transfer").join("colorization.ckpt"), Path::to_path_buf);
    let m = load_downstream(&path)?;
    let splits = load_splits(cfg)?;
    let mut data = split(&splits, &cfg.transfer.eval_split)?.clone();
    for t in cfg.transfer.label_transforms.iter().filter(|t| t.changes_label_space()) {
        data = t.apply(&data)?;
    }
    let init = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let rows = metric_rows(cfg, &m, &data, &init, &[])?;
    for r in &rows {
        println!("{} {} = {:.4}", r.task, r.metric, r.value);
    }
    let dir = cfg.out.join("eval");
    mkdir(&dir)?;
    write_results(&dir.join("results.csv"), &rows)
}

fn report(cfg: &ExperimentConfig) -> Result<()> {
    let results = cfg.out.join("transfer").join("results.csv");
    let text = fs::read_to_string(&results).map_err(|e| Error::io(&results, e))?;
    let header = cfg.out.join("analysis").join("report.json");
    let analysis = fs::read_to_string(&header).map_err(|e| Error::io(&header, e))?;
    let analysis: serde_json::Value =
        serde_json::from_str(&analysis).map_err(|e| Error::Dataset(format!("{}: {e}", header.display())))?;
    let mut md = String::from("# Results\n\n| init | task | metric | value | drop epochs |\n|---|---|---|---|---|\n");
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 7 {
            md.push_str(&format!("| {} | {} | {} | {} | {} |\n", f[1], f[2], f[3], f[4], f[6]));
        }
    }
    md.push_str("\n## Correlation before and after fine-tuning\n\n| layer | median |\n|---|---|\n");
    if let Some(layers) = analysis["layers"].as_array() {
        for l in layers {
            let med = l[1].as_f64().map_or("undefined".to_string(), |m| format!("{m:.3}"));
            md.push_str(&format!("| {} | {med} |\n", l[0].as_str().unwrap_or("?")));
        }
    }
    let dir = cfg.out.join("report");
    mkdir(&dir)?;
    write_file(&dir.join("summary.md"), &md)?;
    print!("{md}");
    Ok(())
}

/// Run one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(c) => synth_data(&resolve(&c)?),
        Command::Pretrain(c) => pretrain(&resolve(&c)?),
        Command::Transfer { common, init } => transfer(&resolve(&common)?, init.as_deref()),
        Command::Analyze { common, model } => analyze(&resolve(&common)?, model.as_deref()),
        Command::Eval { common, model } => eval(&resolve(&common)?, model.as_deref()),
        Command::Report(c) => report(&resolve(&c)?),
    }
}
