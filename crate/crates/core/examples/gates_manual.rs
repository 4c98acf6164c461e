//! Drives a direct-mode run by hand: advance one stage at a time and make
//! an explicit choice at every gate.

use concept_canvas::config::Config;
use concept_canvas::control::Control;
use concept_canvas::fixtures::write_offline_fixture;
use concept_canvas::pipeline::{Advance, Mode, NewRun, Pipeline, Selection, Stage, TermEdit};

fn main() -> concept_canvas::Result<()> {
    let tmp = std::env::temp_dir().join("concept-canvas-manual");
    let _ = std::fs::remove_dir_all(&tmp);
    let fixture = write_offline_fixture(&tmp.join("fixture"))?;
    let mut config = Config::toy();
    config.provider.root = Some(fixture.images.clone());

    let pipeline = Pipeline::new(tmp.join("runs"));
    pipeline.create_run(NewRun {
        run_id: Some("manual".into()),
        theme: "ai".into(),
        corpus: fixture.corpus,
        mode: Mode::Direct,
        config,
    })?;

    let control = Control::new();
    while pipeline.load("manual")?.stage != Stage::Done {
        match pipeline.advance("manual", &control)? {
            Advance::Completed { from, to } => println!("{from} -> {to}"),
            Advance::Blocked(gate) => {
                let desc = pipeline.current_gate("manual")?;
                println!("{gate}: {} candidates, pick {}..={}", desc.candidates.len(), desc.min_select, desc.max_select);
                let selection = if gate == Stage::TermReview {
                    Selection {
                        terms: Some(TermEdit {
                            positives: vec!["robot".into(), "neural".into()],
                            negatives: vec!["recipe".into()],
                        }),
                        ..Selection::default()
                    }
                } else {
                    // the lowest-ranked candidate, to show the choice is ours
                    Selection::ids([desc.candidates.last().unwrap().id.clone()])
                };
                pipeline.resolve_gate("manual", gate, selection, "example")?;
            }
        }
    }
    for e in pipeline.events("manual", 0)?.iter().rev().take(3) {
        println!("#{} {} {:?}", e.seq, e.stage, e.kind);
    }
    Ok(())
}
