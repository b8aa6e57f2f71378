//! Label-space transforms: hierarchy cuts, random buckets, label noise and
//! per-class subsampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Class tree literal: a leaf is a class index, a group is a list of subtrees.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Hierarchy {
    Leaf(usize),
    Group(Vec<Hierarchy>),
}

impl Hierarchy {
    fn leaves(&self, out: &mut Vec<usize>) {
        match self {
            Hierarchy::Leaf(l) => out.push(*l),
            Hierarchy::Group(children) => children.iter().for_each(|c| c.leaves(out)),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Hierarchy::Leaf(_) => 0,
            Hierarchy::Group(children) => 1 + children.iter().map(Hierarchy::depth).max().unwrap_or(0),
        }
    }

    /// Leaf sets of the nodes at `depth` (shallower leaves stand alone).
    fn cut(&self, depth: usize, out: &mut Vec<Vec<usize>>) {
        match self {
            Hierarchy::Group(children) if depth > 0 => children.iter().for_each(|c| c.cut(depth - 1, out)),
            node => {
                let mut leaves = Vec::new();
                node.leaves(&mut leaves);
                if !leaves.is_empty() {
                    out.push(leaves);
                }
            }
        }
    }
}

/// `mapping[old] = new` over `0..mapping.len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub mapping: Vec<usize>,
    pub num_groups: usize,
}

impl LabelMap {
    pub fn apply(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| {
                self.mapping
                    .get(l)
                    .copied()
                    .ok_or_else(|| Error::invalid("label_map", format!("label {l} not covered")))
            })
            .collect()
    }

    /// Relabel a dataset; new class names list their member classes.
    pub fn relabel(&self, ds: &Dataset) -> Result<Dataset> {
        let mut out = ds.clone();
        for s in &mut out.samples {
            if let Some(l) = s.label {
                s.label = Some(self.apply(&[l])?[0]);
            }
        }
        out.class_names = (0..self.num_groups)
            .map(|g| {
                let members: Vec<&str> = (0..self.mapping.len())
                    .filter(|&c| self.mapping[c] == g)
                    .map(|c| ds.class_names.get(c).map(String::as_str).unwrap_or("?"))
                    .collect();
                members.join("+")
            })
            .collect();
        Ok(out)
    }
}

/// Map each of `num_classes` labels to its ancestor at the tree cut that
/// yields exactly `level_size` groups. Groups are numbered by smallest member.
pub fn hierarchical_merge(hierarchy: &Hierarchy, num_classes: usize, level_size: usize) -> Result<LabelMap> {
    const OP: &str = "hierarchical_merge";
    let mut leaves = Vec::new();
    hierarchy.leaves(&mut leaves);
    let mut sorted = leaves.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != leaves.len() {
        return Err(Error::invalid(OP, "a class appears twice in the hierarchy"));
    }
    if let Some(missing) = (0..num_classes).find(|c| sorted.binary_search(c).is_err()) {
        return Err(Error::invalid(OP, format!("class {missing} is not covered by the hierarchy")));
    }
    if sorted.last().is_some_and(|&m| m >= num_classes) {
        return Err(Error::invalid(OP, "hierarchy names a class outside the label set"));
    }
    let mut groups: Option<Vec<Vec<usize>>> = None;
    for depth in 0..=hierarchy.depth() {
        let mut g = Vec::new();
        hierarchy.cut(depth, &mut g);
        if g.len() == level_size {
            groups = Some(g);
            break;
        }
    }
    let mut groups =
        groups.ok_or_else(|| Error::invalid(OP, format!("no cut of the hierarchy has {level_size} groups")))?;
    groups.iter_mut().for_each(|g| g.sort_unstable());
    groups.sort();
    let mut mapping = vec![0; num_classes];
    for (gi, g) in groups.iter().enumerate() {
        for &leaf in g {
            mapping[leaf] = gi;
        }
    }
    Ok(LabelMap { mapping, num_groups: level_size })
}

/// Uniformly random partition of the classes into `n_buckets` non-empty buckets.
pub fn random_buckets(num_classes: usize, n_buckets: usize, seed: u64) -> Result<LabelMap> {
    if n_buckets == 0 || n_buckets > num_classes {
        return Err(Error::invalid(
            "random_buckets",
            format!("{n_buckets} buckets for {num_classes} classes"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng);
    let mut mapping = vec![0; num_classes];
    for (i, &class) in order.iter().enumerate() {
        mapping[class] = if i < n_buckets { i } else { rng.random_range(0..n_buckets) };
    }
    Ok(LabelMap { mapping, num_groups: n_buckets })
}

/// Redraw the labels of exactly `floor(fraction * N)` samples, chosen without
/// replacement, uniformly over all classes (the original label included).
/// Returns the new labels and the sorted indices that were redrawn.
pub fn label_noise(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("label_noise", format!("fraction {fraction} outside [0, 1]")));
    }
    if num_classes == 0 {
        return Err(Error::invalid("label_noise", "no classes"));
    }
    let count = (fraction * labels.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, labels.len(), count).into_vec();
    chosen.sort_unstable();
    let mut out = labels.to_vec();
    for &i in &chosen {
        out[i] = rng.random_range(0..num_classes);
    }
    Ok((out, chosen))
}

/// Exactly `k` samples per class, uniform without replacement, in original order.
pub fn subsample_per_class(labels: &[usize], num_classes: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(k * num_classes);
    for c in 0..num_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < k {
            return Err(Error::invalid(
                "subsample_per_class",
                format!("class {c} has {} samples, need {k}", members.len()),
            ));
        }
        keep.extend(rand::seq::index::sample(&mut rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    Ok(keep)
}

/// A configured transform of a labelled training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelTransform {
    Hierarchical { hierarchy: Hierarchy, level_size: usize },
    RandomBuckets { n_buckets: usize, seed: u64 },
    Noise { fraction: f64, seed: u64 },
    Subsample { per_class: usize, seed: u64 },
}

fn dense_labels(ds: &Dataset) -> Result<Vec<usize>> {
    ds.samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Dataset("label transform on an unlabelled sample".into())))
        .collect()
}

impl LabelTransform {
    /// Transformed copy of `ds`. Label-space changes affect every split they
    /// are applied to; noise and subsampling are meant for training splits.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let labels = dense_labels(ds)?;
        let k = ds.num_classes();
        match self {
            LabelTransform::Hierarchical { hierarchy, level_size } => {
                hierarchical_merge(hierarchy, k, *level_size)?.relabel(ds)
            }
            LabelTransform::RandomBuckets { n_buckets, seed } => random_buckets(k, *n_buckets, *seed)?.relabel(ds),
            LabelTransform::Noise { fraction, seed } => {
                let (new, _) = label_noise(&labels, k, *fraction, *seed)?;
                let mut out = ds.clone();
                out.samples.iter_mut().zip(new).for_each(|(s, l)| s.label = Some(l));
                Ok(out)
            }
            LabelTransform::Subsample { per_class, seed } => {
                Ok(ds.select(&subsample_per_class(&labels, k, *per_class, *seed)?))
            }
        }
    }

    /// Label-space transforms must also be applied to evaluation splits.
    pub fn changes_label_space(&self) -> bool {
        matches!(self, LabelTransform::Hierarchical { .. } | LabelTransform::RandomBuckets { .. })
    }
}
