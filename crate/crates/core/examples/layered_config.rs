//! Shows how defaults, a TOML file, `CONCEPT_CANVAS__*` variables and dotted
//! overrides stack, then prints the effective configuration.

use concept_canvas::config::Config;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let file = std::env::temp_dir().join("concept-canvas-example.toml");
    std::fs::write(&file, "[began]\ngamma = 0.7\n\n[style]\nsteps = 200\n")?;

    let overrides = vec![("began.gamma".to_string(), "0.4".to_string())];
    let config = Config::load(false, Some(&file), &overrides)?;
    println!("gamma from the override: {}", config.began.gamma);
    println!("style steps from the file: {}", config.style.steps);

    let bad = config.with_override("began.gammma", "0.5");
    println!("misspelled key: {}", bad.unwrap_err());
    println!("\n{}", config.to_toml()?);
    Ok(())
}
