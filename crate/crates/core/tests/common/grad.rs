use std::rc::Rc;

use mor::tensor::check::{gradcheck, max_rel_error};
use mor::tensor::{AttnLayout, Tape, Tensor, Var};
use mor::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub program: Program,
}

impl OpCase {
    pub fn rel_error(&self) -> f64 {
        let reports = gradcheck(&self.inputs, H, &self.program).unwrap();
        max_rel_error(&reports)
    }
}

pub fn rnd(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Reduces a matrix output to a scalar with fixed, non-uniform weights so
/// that every output element contributes a distinct gradient.
pub fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |i| ((i as f64) * 0.37).sin() + 0.1));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn case<F>(name: &'static str, inputs: Vec<Tensor>, f: F) -> OpCase
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    OpCase {
        name,
        inputs,
        program: Box::new(f),
    }
}

macro_rules! probed {
    ($name:literal, $inputs:expr, |$t:ident, $v:ident| $e:expr) => {
        case($name, $inputs, move |$t: &mut Tape, $v: &[Var]| {
            let y = $e?;
            probe($t, y)
        })
    };
}

/// Every differentiable tape op, each wrapped in a scalar program.
pub fn op_cases() -> Vec<OpCase> {
    let pair = || vec![rnd(&[2, 3], 5), rnd(&[2, 3], 6)];
    let x = || vec![rnd(&[3, 4], 9)];
    // two sequences; the second query block skips a key, as a routed depth would
    let queries = [(0, 0), (0, 2), (1, 1), (1, 3)];
    let keys = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 3)];
    let layout = Rc::new(AttnLayout::causal(&queries, &keys).unwrap());
    vec![
        probed!("matmul", vec![rnd(&[3, 4], 1), rnd(&[4, 5], 2)], |t, v| t.matmul(v[0], v[1])),
        probed!("matmul_nt", vec![rnd(&[3, 4], 3), rnd(&[5, 4], 4)], |t, v| t.matmul_nt(v[0], v[1])),
        probed!("add", pair(), |t, v| t.add(v[0], v[1])),
        probed!("sub", pair(), |t, v| t.sub(v[0], v[1])),
        probed!("mul", pair(), |t, v| t.mul(v[0], v[1])),
        probed!("scale", vec![rnd(&[2, 3], 5)], |t, v| t.scale(v[0], -1.7)),
        probed!("scale_rows", vec![rnd(&[4, 3], 7), rnd(&[4, 1], 8)], |t, v| t.scale_rows(v[0], v[1])),
        probed!("sigmoid", x(), |t, v| t.sigmoid(v[0])),
        probed!("tanh", x(), |t, v| t.tanh(v[0])),
        probed!("silu", x(), |t, v| t.silu(v[0])),
        probed!("gelu", x(), |t, v| t.gelu(v[0])),
        probed!("softmax", x(), |t, v| t.softmax(v[0])),
        probed!("log_sum_exp", x(), |t, v| t.log_sum_exp_rows(v[0])),
        probed!(
            "rms_norm",
            vec![rnd(&[3, 6], 10), Tensor::from_fn(&[6], |i| 1.0 + 0.1 * i as f64)],
            |t, v| t.rms_norm(v[0], v[1], 1e-5)
        ),
        probed!("embedding", vec![rnd(&[5, 3], 11)], |t, v| t.embedding(v[0], &[4, 0, 4, 2])),
        probed!("gather_rows", vec![rnd(&[5, 3], 12)], |t, v| t.gather_rows(v[0], &[1, 1, 3])),
        probed!("index_add_rows", vec![rnd(&[5, 3], 13), rnd(&[3, 3], 14)], |t, v| {
            t.index_add_rows(v[0], v[1], &[4, 0, 4])
        }),
        probed!("concat_rows", vec![rnd(&[2, 3], 15), rnd(&[1, 3], 16)], |t, v| {
            t.concat_rows(&[v[0], v[1], v[0]])
        }),
        probed!("slice_rows", vec![rnd(&[5, 3], 17)], |t, v| t.slice_rows(v[0], 1, 4)),
        probed!("slice_cols", vec![rnd(&[4, 6], 18)], |t, v| t.slice_cols(v[0], 2, 5)),
        probed!("rope", vec![rnd(&[3, 8], 19)], |t, v| t.rope(v[0], &[0, 5, 11], 4, 10000.0)),
        probed!(
            "attention",
            vec![rnd(&[4, 8], 20), rnd(&[5, 4], 21), rnd(&[5, 4], 22)],
            |t, v| t.attention(v[0], v[1], v[2], layout.clone(), 4, 2)
        ),
        case("cross_entropy", vec![rnd(&[4, 7], 23)], |t, v| t.cross_entropy(v[0], &[0, 6, 3, 3])),
        case(
            "bce",
            vec![Tensor::from_fn(&[5, 1], |i| 0.1 + 0.18 * i as f64)],
            |t, v| t.bce(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0], 1e-12),
        ),
        case("mean", vec![rnd(&[3, 3], 24)], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        }),
        // norm -> projection -> gated activation -> residual, reused twice
        case(
            "composite",
            vec![rnd(&[4, 6], 25), rnd(&[6, 6], 26), Tensor::full(&[6], 1.0)],
            |t, v| {
                let mut h = v[0];
                for _ in 0..2 {
                    let n = t.rms_norm(h, v[2], 1e-5)?;
                    let p = t.matmul(n, v[1])?;
                    let a = t.silu(p)?;
                    h = t.add(h, a)?;
                }
                probe(t, h)
            },
        ),
    ]
}
