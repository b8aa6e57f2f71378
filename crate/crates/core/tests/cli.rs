//! The `colorproxy` binary end to end on a tiny config.

mod common;

use std::fs;
use std::path::Path;

use common::{colorproxy, pipeline, tiny_config, tree, EXPECTED_OUTPUTS};

#[test]
fn pipeline_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = tree(&pipeline(a.path()));
    let tb = tree(&pipeline(b.path()));
    for f in EXPECTED_OUTPUTS {
        assert!(ta.contains_key(Path::new(f)), "missing {f}");
    }
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs between runs", k.display());
    }
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = pipeline(dir.path());
    let mut cfg = tiny_config(&out);
    cfg.pretrain.schedule.base_lr = 0.2;
    let other = dir.path().join("other.json");
    fs::write(&other, serde_json::to_string(&cfg).unwrap()).unwrap();
    let init = out.join("pretrain/final.ckpt");
    let r = colorproxy(&["transfer", "--config", other.to_str().unwrap(), "--init", init.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("not produced by this config"));
}

#[test]
fn bad_invocations_fail_with_messages() {
    let r = colorproxy(&["frobnicate"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"transfer": {"finetune": {"patinece": 2}}}"#).unwrap();
    let r = colorproxy(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("transfer.finetune") && err.contains("patinece"), "{err}");

    let r = colorproxy(&["pretrain", "--out", dir.path().join("nothing").to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("synth-data"));
}
