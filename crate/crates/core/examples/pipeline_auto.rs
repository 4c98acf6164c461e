//! Runs the whole generative pipeline offline with every gate taking its
//! default choice, then prints where the final image landed.

use concept_canvas::config::Config;
use concept_canvas::control::Control;
use concept_canvas::fixtures::write_offline_fixture;
use concept_canvas::pipeline::{Mode, NewRun, Pipeline};

fn main() -> concept_canvas::Result<()> {
    let tmp = std::env::temp_dir().join("concept-canvas-auto");
    let _ = std::fs::remove_dir_all(&tmp);
    let fixture = write_offline_fixture(&tmp.join("fixture"))?;

    let mut config = Config::toy();
    config.provider.root = Some(fixture.images.clone());
    let pipeline = Pipeline::new(tmp.join("runs"));
    let run = pipeline.create_run(NewRun {
        run_id: Some("demo".into()),
        theme: "ai".into(),
        corpus: fixture.corpus,
        mode: Mode::Generative,
        config,
    })?;

    let done = pipeline.run_until_blocked(&run.run_id, true, &Control::new())?;
    for d in &done.gate_decisions {
        println!("{:<20} {:?}", d.gate.as_str(), d.selected);
    }
    println!("{} -> {}", done.stage.as_str(), pipeline.run_dir("demo")?.join("final/final.png").display());
    Ok(())
}
