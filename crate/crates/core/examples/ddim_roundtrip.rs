//! Deterministic DDIM inversion followed by sampling.
//!
//! With a constant noise predictor the round trip is exact; the seeded toy
//! denoiser shows how much the standard inversion approximation drifts.

use vidattn::attention::ToyConfig;
use vidattn::scheduler::{invert, sample};
use vidattn::{build_schedule, ConstantDenoiser, DenoiserBackend, LatentVideo, Tokenizer, ToyDenoiser, WordTokenizer};

fn main() -> vidattn::Result<()> {
    let prompt = WordTokenizer::default().tokenize("a boat on the lake")?;
    let data = ndarray::Array4::from_shape_fn((4, 3, 8, 8), |(k, c, y, x)| ((k + 2 * c + 3 * y + 5 * x) as f64 * 0.37).sin());
    let z0 = LatentVideo::new(data, 0)?;

    let backends: Vec<(&str, Box<dyn DenoiserBackend>)> = vec![
        ("constant", Box::new(ConstantDenoiser::new(0.25))),
        ("toy", Box::new(ToyDenoiser::new(ToyConfig::default())?)),
        ("toy, low gain", Box::new(ToyDenoiser::new(ToyConfig { input_gain: 0.02, output_gain: 0.1, ..Default::default() })?)),
    ];
    for steps in [1, 5, 30] {
        let sched = build_schedule(steps, 8.5e-4, 1.2e-2)?;
        for (name, den) in &backends {
            let inverted = invert(&z0, &prompt, den.as_ref(), &sched)?;
            let back = sample(inverted.noised(), &prompt, den.as_ref(), &sched, None)?;
            println!(
                "T={steps:<2} {name:<14} |z_T| = {:8.4}  max-abs error = {:.3e}  maps archived = {}",
                inverted.noised().norm(),
                back.clean().max_abs_diff(&z0),
                inverted.store.len()
            );
        }
    }
    Ok(())
}
