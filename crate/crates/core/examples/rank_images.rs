//! Trains the discriminative image classifier on planted classes and ranks
//! a fresh batch by theme score.
//!
//! The trunk is randomly initialized and narrowed (`width_divisor = 8`) so
//! this runs in well under a minute on a laptop. Point
//! `backbone_weights` at a VGG16 safetensors file for real use.

use concept_canvas::dam::{train_dam, DamConfig};
use concept_canvas::fixtures::planted_dam_records;

fn main() -> concept_canvas::Result<()> {
    let config = DamConfig {
        width_divisor: 8,
        image_side: 96,
        epochs: 5,
        learning_rate: 1e-3,
        allow_random_init: true,
        ..DamConfig::default()
    };
    let model = train_dam(&planted_dam_records(24, 24, 96, 1), &config)?;
    println!(
        "train accuracy {:.3}, holdout accuracy {:?}",
        model.report.train_accuracy, model.report.holdout_accuracy
    );

    let fresh = planted_dam_records(5, 5, 96, 2);
    for r in model.rank_images(&fresh, fresh.len())? {
        println!("#{:<2} {:.4}  {:?}", r.rank, r.score, r.record.class_label);
    }
    Ok(())
}
