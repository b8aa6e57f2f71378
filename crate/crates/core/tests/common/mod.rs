//! Helpers shared by the binary-driving test targets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use colorproxy::config::{DataSource, ExperimentConfig};
use colorproxy::data::ColoredShapesSpec;
use colorproxy::model::NetworkSpec;
use colorproxy::pretrain::TrainingSchedule;
use colorproxy::tensor::PaddingMode;

/// Files every pipeline run must leave behind.
pub const EXPECTED_OUTPUTS: [&str; 7] = [
    "pretrain/metrics.csv",
    "transfer/results.csv",
    "analysis/correlation.csv",
    "analysis/correlation.svg",
    "analysis/loss_curve.svg",
    "analysis/top_activations.json",
    "report/summary.md",
];

pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed: 11, out: out.to_path_buf(), ..Default::default() };
    let counts = [("unlabeled", 32), ("train", 72), ("test", 24), ("probe", 64)];
    cfg.data = DataSource::Synthetic {
        spec: ColoredShapesSpec { counts: counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect(), ..Default::default() },
    };
    cfg.pretrain.network = NetworkSpec::mini_alex(1, 32, PaddingMode::BiasOfPrevious);
    cfg.pretrain.head_hidden = vec![16];
    cfg.pretrain.batch_size = 8;
    cfg.pretrain.pixels_per_image = 8;
    cfg.pretrain.schedule = TrainingSchedule { epochs: 1.0, base_lr: 0.05, drops: vec![0.5, 0.75], drop_factor: 0.1 };
    let ft = &mut cfg.transfer.finetune;
    ft.eval_every = 1.0;
    ft.patience = 1;
    ft.max_epochs = 3.0;
    cfg.analysis.top_m = 3;
    cfg
}

pub fn colorproxy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colorproxy")).args(args).env("RUST_LOG", "off").output().unwrap()
}

pub fn ok(args: &[&str]) -> String {
    let out = colorproxy(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

pub fn pipeline(dir: &Path) -> PathBuf {
    let out = dir.join("run");
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&tiny_config(&out)).unwrap()).unwrap();
    let c = cfg_path.to_str().unwrap();
    ok(&["synth-data", "--config", c]);
    ok(&["pretrain", "--config", c]);
    let init = out.join("pretrain/final.ckpt");
    ok(&["transfer", "--config", c, "--init", init.to_str().unwrap()]);
    ok(&["analyze", "--config", c]);
    ok(&["eval", "--config", c]);
    let summary = ok(&["report", "--config", c]);
    assert!(summary.contains("colorization"), "{summary}");
    out
}

pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}
