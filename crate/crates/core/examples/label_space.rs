//! Label-space manipulations of a training split: coarser hierarchies,
//! random buckets, label noise and per-class subsampling.

use colorproxy::data::{default_hierarchy, generate_colored_shapes, ColoredShapesSpec, Dataset};
use colorproxy::labelspace::{hierarchical_merge, label_noise, random_buckets, LabelTransform};

fn histogram(ds: &Dataset) -> Vec<usize> {
    let mut h = vec![0; ds.num_classes()];
    ds.samples.iter().filter_map(|s| s.label).for_each(|l| h[l] += 1);
    h
}

fn main() -> colorproxy::Result<()> {
    let spec = ColoredShapesSpec { counts: [("train".to_string(), 120)].into(), ..Default::default() };
    let train = &generate_colored_shapes(&spec, 4)?["train"];
    println!("original     {:?}", histogram(train));

    for k in [4, 2] {
        let map = hierarchical_merge(&default_hierarchy(), 12, k)?;
        let merged = map.relabel(train)?;
        println!("{k} super-classes {:?}  mapping {:?}", histogram(&merged), map.mapping);
    }
    let buckets = random_buckets(12, 3, 9)?;
    println!("random 3 buckets mapping {:?}", buckets.mapping);

    let labels: Vec<usize> = train.samples.iter().map(|s| s.label.unwrap()).collect();
    let (noisy, redrawn) = label_noise(&labels, 12, 0.25, 5)?;
    let changed = labels.iter().zip(&noisy).filter(|(a, b)| a != b).count();
    println!("25% noise: {} labels redrawn, {changed} actually changed", redrawn.len());

    let sub = LabelTransform::Subsample { per_class: 3, seed: 1 }.apply(train)?;
    println!("3 per class  {:?}", histogram(&sub));
    Ok(())
}
