//! Building, serializing and resolving a job file.

use vidattn::cli::JobConfig;

fn main() -> vidattn::Result<()> {
    let mut config = JobConfig::new("a boat on the lake", "a kayak on the lake", &["boat->kayak"]);
    config.io.input = Some("frames".into());
    config.io.output = Some("edited".into());
    let text = config.to_toml_string()?;
    println!("{text}");
    assert_eq!(JobConfig::from_toml_str(&text)?, config);

    let resolved = config.resolve()?;
    println!("denoiser {}", resolved.denoiser.name());
    println!("steps {}, window {}, edits {}", resolved.job.schedule.num_steps(), resolved.plan.window_size, resolved.job.spec.num_edits());

    let mut broken = config.clone();
    broken.prompts.edit_words.clear();
    broken.prompts.edit = broken.prompts.source.clone();
    let err = broken.resolve().err().expect("spatial blending needs an edited word");
    println!("rejected: {err} (exit code {})", err.class().exit_code());
    Ok(())
}
