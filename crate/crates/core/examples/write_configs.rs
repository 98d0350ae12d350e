//! Regenerates `configs/` from the scenario catalog.
//!
//! cargo run -p implicit-herd --example write_configs

use std::path::Path;

use implicit_herd::io::ConfigDocument;
use implicit_herd::scenarios::catalog;

fn main() -> implicit_herd::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    std::fs::create_dir_all(&dir)?;
    for (name, sc) in catalog() {
        ConfigDocument::new(sc).save(&dir.join(format!("{name}.json")))?;
        println!("{name}");
    }
    Ok(())
}
