//! The two label sources: a scripted teacher with symmetric flips, and a
//! mock VLM that replays a recorded answer file.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trend_lab::annotate::{
    generate_vlm_fixture, reference_pair_stream, render_fixture, scripted_label, Annotation, Annotator,
    MockVlmAnnotator, NoisyScriptedAnnotator,
};
use trend_lab::envs::EnvKind;

fn error_rate(ann: &mut dyn Annotator, pairs: &[(trend_lab::envs::Segment, trend_lab::envs::Segment)]) -> trend_lab::Result<(f64, usize)> {
    let (mut wrong, mut strict, mut skipped) = (0, 0, 0);
    for (a, b) in pairs {
        let clean = scripted_label(a, b, 1e-9);
        match ann.annotate(a, b)? {
            Annotation::Skip => skipped += 1,
            Annotation::Label(l) if clean.is_strict() => {
                strict += 1;
                wrong += (l != clean) as usize;
            }
            Annotation::Label(_) => {}
        }
    }
    Ok((wrong as f64 / strict as f64, skipped))
}

fn main() -> trend_lab::Result<()> {
    let pairs = reference_pair_stream(EnvKind::PointReach, 2000, 50, 3)?;

    for eps in [0.2, 0.3, 0.4] {
        let mut ann = NoisyScriptedAnnotator::new(eps, 1e-9, ChaCha8Rng::seed_from_u64(1))?;
        let (rate, _) = error_rate(&mut ann, &pairs)?;
        println!("scripted eps {eps}: measured flip rate {rate:.3}");
    }

    let records = generate_vlm_fixture(&pairs, 0.364, 0.1, 1e-9, 5)?;
    println!("fixture head:\n{}", render_fixture(&records[..3]));
    let mut vlm = MockVlmAnnotator::from_records("generated", records);
    let (rate, skipped) = error_rate(&mut vlm, &pairs)?;
    println!("mock VLM: error rate {rate:.3} on answered pairs, {skipped} no-preference answers");
    Ok(())
}
