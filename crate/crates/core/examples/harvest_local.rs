//! Harvests images for a term set from a directory-backed provider.
//!
//! Each query maps to `<root>/<slug>/`, so an offline tree stands in for a
//! search API.

use concept_canvas::acquisition::{Harvester, HarvestOptions, LocalDirProvider};
use concept_canvas::dtm::{DiscriminativeTermSet, WeightedTerm};
use concept_canvas::fixtures::write_offline_fixture;

fn main() -> concept_canvas::Result<()> {
    let tmp = std::env::temp_dir().join("concept-canvas-harvest");
    let fixture = write_offline_fixture(&tmp)?;
    let provider = LocalDirProvider::new(&fixture.images);

    let term = |t: &str, w: f64| WeightedTerm {
        term: t.into(),
        weight: w,
    };
    let terms = DiscriminativeTermSet {
        positives: vec![term("robot", 1.2), term("neural", 0.9)],
        negatives: vec![term("recipe", -1.1)],
    };
    let harvester = Harvester::new(
        &provider,
        HarvestOptions {
            per_term: 3,
            ..HarvestOptions::default()
        },
    );
    let harvest = harvester.harvest_term_images(&terms)?;
    for r in &harvest.records {
        println!("{:?}  {}  {}", r.class_label, &r.id[..12], r.pixels.width());
    }
    println!("{:#?}", harvest.report);
    Ok(())
}
