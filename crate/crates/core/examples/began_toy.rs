//! A short BEGAN run on synthetic scenes, then a grid of samples.
//!
//! ```text
//! cargo run -p concept-canvas --example began_toy -- out_dir
//! ```

use std::path::PathBuf;

use concept_canvas::began::{train_began, BeganConfig, LatentVector};
use concept_canvas::config::Config;
use concept_canvas::control::Control;
use concept_canvas::fixtures::concept_images;
use concept_canvas::imaging::save_png;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> concept_canvas::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "began-toy".into()));
    let config = BeganConfig {
        iterations: 200,
        ..Config::toy().began
    };
    let data = concept_images(64, config.image_side as u32, 1);
    let (model, report) = train_began(&data, &config, Some(&out.join("checkpoints")), &Control::new())?;

    for s in report.history.iter().step_by(25) {
        println!(
            "iter {:>4}  L_real {:.4}  L_fake {:.4}  k {:.5}  M {:.4}",
            s.iter, s.l_real, s.l_fake, s.k_t, s.m_global
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..8 {
        let img = model.generate(&LatentVector::sample(&mut rng));
        save_png(&out.join(format!("sample-{i}.png")), &img)?;
    }
    println!("samples in {}", out.display());
    Ok(())
}
