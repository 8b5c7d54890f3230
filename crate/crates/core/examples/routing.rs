//! Expert-choice selection with hierarchical filtering and token-choice
//! assignment on random scores, with the router diagnostics.

use mor::routing::{capacity_schedule, expert_choice_select, lossfree_bias_update, token_choice_assign};
use mor::train::metrics::{maxvio, selection_entropy};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mor::Result<()> {
    let (t, n) = (12, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut live = vec![true; t];
    for (r, cap) in capacity_schedule(n)?.into_iter().enumerate() {
        let scores: Vec<f64> = (0..t).map(|_| rng.random()).collect();
        let sel = expert_choice_select(&scores, &live, cap);
        let row: String = sel.selected.iter().map(|&s| if s { '#' } else { '.' }).collect();
        println!("depth {} capacity {cap}: {row}", r + 1);
        live = sel.selected;
    }

    let scores: Vec<f64> = (0..t * 40 * n).map(|_| rng.random()).collect();
    let mut bias = vec![0.0; n];
    for round in 0..5 {
        let assign = token_choice_assign(&scores, n, Some(&bias));
        let mut counts = vec![0; n];
        for d in &assign {
            counts[d - 1] += 1;
        }
        let loads: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let total: f64 = loads.iter().sum();
        let share: Vec<f64> = loads.iter().map(|l| l / total).collect();
        println!(
            "round {round}: loads {counts:?} MaxVio {:.3} entropy {:.3}",
            maxvio(&loads)?,
            selection_entropy(&share)?
        );
        lossfree_bias_update(&counts, &mut bias, 0.01);
    }
    Ok(())
}
