//! Central-difference check of a small attention program built on the tape.

use std::rc::Rc;

use mor::tensor::check::{gradcheck, max_rel_error};
use mor::tensor::{AttnLayout, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mor::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pos: Vec<(usize, usize)> = (0..4).map(|p| (0, p)).collect();
    let layout = Rc::new(AttnLayout::causal(&pos, &pos)?);
    let inputs = [
        Tensor::randn(&[4, 8], 1.0, &mut rng),
        Tensor::randn(&[4, 4], 1.0, &mut rng),
        Tensor::randn(&[4, 4], 1.0, &mut rng),
    ];
    let reports = gradcheck(&inputs, 1e-5, |t, v| {
        let y = t.attention(v[0], v[1], v[2], layout.clone(), 4, 2)?;
        let s = t.silu(y)?;
        t.sum(s)
    })?;
    for (name, r) in ["q", "k", "v"].iter().zip(&reports) {
        println!("d/d{name}: relative error {:.3e}", r.rel_error);
    }
    println!("worst {:.3e}", max_rel_error(&reports));
    Ok(())
}
