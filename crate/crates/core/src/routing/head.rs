use rand::Rng;

use super::HeadArch;
use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Router network mapping hidden rows to raw logits.
#[derive(Clone, Debug)]
pub struct RouterHead {
    layers: Vec<(ParamId, ParamId)>,
}

impl RouterHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        out: usize,
        arch: HeadArch,
        rng: &mut impl Rng,
    ) -> Self {
        let widths = match arch {
            HeadArch::Linear => vec![d_model, out],
            HeadArch::Mlp => vec![d_model, d_model, out],
            HeadArch::WideMlp => vec![d_model, 4 * d_model, out],
        };
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wid = store.add(format!("{name}.{i}.weight"), Tensor::trunc_normal(&[w[0], w[1]], 0.02, rng));
                let bid = store.add(format!("{name}.{i}.bias"), Tensor::zeros(&[1, w[1]]));
                (wid, bid)
            })
            .collect();
        Self { layers }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Logits for each row of `x`, shape `n × out`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h)?;
            }
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let lin = tape.matmul(h, wv)?;
            let bias = tape.matmul(ones, bv)?;
            h = tape.add(lin, bias)?;
        }
        Ok(h)
    }
}
