//! Bidirectional jump-ODE encoding of an observed cascade.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vnoip::autodiff::Tape;
use vnoip::gradsuite::toy_sample;
use vnoip::nn::ModelParams;
use vnoip::sequence::{bidirectional_context, with_time_encoding, SequenceEncoder};

fn main() -> vnoip::Result<()> {
    let s = toy_sample()?;
    let d = s.global.cols();
    println!("{} observed events at normalized times {:?}", s.len(), s.times);

    let mut params = ModelParams::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let hidden = 6;
    let enc = SequenceEncoder::new(&mut params, 2 * d, hidden, 0.05, 10_000, &mut rng)?;
    println!("encoder parameters: {}", params.size());

    let mut tape = Tape::new();
    let v = params.bind(&mut tape);
    let sg = tape.constant(s.global.clone());
    let sc = tape.constant(with_time_encoding(&s.local, &s.times)?);
    let ctx = bidirectional_context(&mut tape, sg, sc)?;
    let (hf, hb) = enc.jump_ode_pass(&mut tape, &v, ctx, &s.times)?;
    let gamma = enc.fusion_weights(&mut tape, &v, &hf, &hb)?;
    let fused = enc.fuse(&mut tape, &v, &hf, &hb)?;

    for i in 0..s.len() {
        println!("event {i}:");
        println!("  forward  {:+.3?}", tape.value(hf[i]).data());
        println!("  backward {:+.3?}", tape.value(hb[i]).data());
        println!("  weights  {:.3?}", tape.value(gamma).row(i));
        println!("  fused    {:+.3?}", tape.value(fused).row(i));
    }
    Ok(())
}
