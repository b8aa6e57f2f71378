//! Generate the colored-shapes corpus and write it as an image folder.
//!
//! `cargo run --release --example synthetic_dataset -- /tmp/shapes`

use std::path::PathBuf;

use colorproxy::data::{generate_colored_shapes, save_image_folder, ColoredShapesSpec};

fn main() -> colorproxy::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("colorproxy-shapes"));
    let spec = ColoredShapesSpec {
        counts: [("unlabeled", 200), ("train", 48), ("test", 48)].into_iter().map(|(k, v)| (k.into(), v)).collect(),
        ..Default::default()
    };
    let splits = generate_colored_shapes(&spec, 7)?;
    for (name, ds) in &splits {
        println!("{name:>9}: {} images, {} classes", ds.len(), ds.num_classes());
    }
    let names = spec.class_names();
    println!("classes: {}", names.join(", "));
    save_image_folder(&splits, &out.join("images"), Some(&out.join("masks")))?;
    println!("wrote {}", out.display());
    Ok(())
}
