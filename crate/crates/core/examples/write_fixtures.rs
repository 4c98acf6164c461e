//! Regenerates the committed offline fixture under `fixtures/`.

use std::path::PathBuf;

use concept_canvas::fixtures::write_offline_fixture;

fn main() -> concept_canvas::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let fx = write_offline_fixture(&root)?;
    println!("corpus {}\nimages {}\nstyle  {}", fx.corpus.display(), fx.images.display(), fx.style.display());
    Ok(())
}
