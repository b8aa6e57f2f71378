//! Fine-tune a colorization-pretrained trunk and a random one on a small
//! labelled set, with the early-stopping schedule search.

use colorproxy::data::{generate_colored_shapes, ColoredShapesSpec};
use colorproxy::pretrain::{train_colorization, PretrainConfig};
use colorproxy::transfer::{evaluate_classification, finetune, FinetuneConfig, Init};

fn main() -> colorproxy::Result<()> {
    let spec = ColoredShapesSpec {
        counts: [("unlabeled", 1500), ("train", 100), ("test", 400)].into_iter().map(|(k, v)| (k.into(), v)).collect(),
        ..Default::default()
    };
    let splits = generate_colored_shapes(&spec, 2)?;
    let cfg = PretrainConfig::default();
    let network = cfg.network.clone();
    let pretrained = train_colorization(&cfg, &splits["unlabeled"], 2)?.checkpoints.pop().unwrap().network()?;

    let ft = FinetuneConfig { eval_every: 2.0, ..Default::default() };
    for init in [Init::Random(network), Init::Pretrained(pretrained)] {
        let out = finetune(&ft, &init, &splits["train"], 2)?;
        let top1 = evaluate_classification(&out.model, &splits["test"], 1)?;
        let top3 = evaluate_classification(&out.model, &splits["test"], 3)?;
        println!(
            "{:>12}: drops at {:?}, stop at {:.1} epochs, top-1 {:.1}%, top-3 {:.1}%",
            init.name(),
            out.drop_epochs,
            out.stop_epoch,
            100.0 * top1,
            100.0 * top3
        );
    }
    Ok(())
}
