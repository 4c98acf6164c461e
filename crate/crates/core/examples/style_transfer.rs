//! Tiles exemplars into a style mosaic and paints a content image with it.
//!
//! ```text
//! cargo run -p concept-canvas --example style_transfer -- out.png [side]
//! ```

use concept_canvas::control::Control;
use concept_canvas::dam::{Pooling, VggBackbone};
use concept_canvas::fixtures::concept_images;
use concept_canvas::imaging::save_png;
use concept_canvas::style::{build_style_reference, stylize, StyleConfig};

fn main() -> concept_canvas::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "styled.png".into());
    let side: u32 = args.next().and_then(|s| s.parse().ok()).unwrap_or(128);

    let exemplars = concept_images(5, 96, 3);
    let reference = build_style_reference(&exemplars, 96)?;
    println!("mosaic {}x{} cells from {} exemplars", reference.rows, reference.cols, exemplars.len());

    // Untrained narrow trunk; load VGG16 weights for faithful textures.
    let backbone = VggBackbone::random(8, Pooling::Avg, 0)?;
    let config = StyleConfig {
        output_side: side,
        steps: 40,
        ..StyleConfig::default()
    };
    let content = concept_images(1, 96, 9).remove(0);
    let result = stylize(&content, &reference, &config, &backbone, &Control::new())?;
    let best = &result.losses[result.best_step];
    println!("best step {}: content {:.4e}, style {:.4e}", result.best_step, best.content, best.style);
    save_png(out.as_ref(), &result.record.pixels)?;
    Ok(())
}
