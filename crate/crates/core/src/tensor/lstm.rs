use rand::Rng;

use super::{Tape, Tensor2, Var};
use crate::error::{Error, Result};

const LSTM_INIT_BOUND: f64 = 0.08;
const FORGET_BIAS: f64 = 1.0;

/// One LSTM direction. Gate rows are stacked `[input; forget; cell; output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4h x d`
    pub w_x: Tensor2,
    /// `4h x h`
    pub w_h: Tensor2,
    /// `4h x 1`
    pub b: Tensor2,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_x: Tensor2::zeros(4 * hidden, input),
            w_h: Tensor2::zeros(4 * hidden, hidden),
            b: Tensor2::zeros(4 * hidden, 1),
        }
    }

    /// Uniform(-0.08, 0.08) weights, forget-gate bias 1.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut b = Tensor2::zeros(4 * hidden, 1);
        for j in hidden..2 * hidden {
            b.set(j, 0, FORGET_BIAS);
        }
        LstmParams {
            w_x: Tensor2::uniform(4 * hidden, input, LSTM_INIT_BOUND, rng),
            w_h: Tensor2::uniform(4 * hidden, hidden, LSTM_INIT_BOUND, rng),
            b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    pub fn register(&self, tape: &mut Tape) -> LstmVars {
        LstmVars {
            w_x: tape.leaf(self.w_x.clone()),
            w_h: tape.leaf(self.w_h.clone()),
            b: tape.leaf(self.b.clone()),
            hidden: self.hidden(),
        }
    }

    pub fn tensors(&self) -> [&Tensor2; 3] {
        [&self.w_x, &self.w_h, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2; 3] {
        [&mut self.w_x, &mut self.w_h, &mut self.b]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
    hidden: usize,
}

impl LstmVars {
    pub fn vars(&self) -> [Var; 3] {
        [self.w_x, self.w_h, self.b]
    }

    /// Hidden states for every step of `inputs` (`d x T`), in time order,
    /// running backwards through time when `reverse` is set.
    fn run(&self, tape: &mut Tape, inputs: Var, reverse: bool) -> Result<Vec<Var>> {
        let steps = tape.shape(inputs).1;
        let projected = tape.matmul(self.w_x, inputs)?;
        let projected = tape.add_bias(projected, self.b)?;
        let mut hs: Vec<Option<Var>> = vec![None; steps];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let mut pre = tape.column(projected, t)?;
            if let Some((h_prev, _)) = state {
                let rec = tape.matmul(self.w_h, h_prev)?;
                pre = tape.add(pre, rec)?;
            }
            let hc = tape.lstm_cell(pre, state.map(|(_, c)| c))?;
            let h = tape.slice_rows(hc, 0, self.hidden)?;
            let c = tape.slice_rows(hc, self.hidden, self.hidden)?;
            hs[t] = Some(h);
            state = Some((h, c));
        }
        Ok(hs.into_iter().map(|h| h.expect("every step visited")).collect())
    }
}

/// A bidirectional LSTM whose output height `l` splits evenly between the
/// two directions.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    fn check(input: usize, out: usize) -> Result<()> {
        if out == 0 || !out.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "BiLSTM output size must be even and positive, got {out}"
            )));
        }
        if input == 0 {
            return Err(Error::invalid("BiLSTM input size must be positive"));
        }
        Ok(())
    }

    pub fn zeros(input: usize, out: usize) -> Result<Self> {
        Self::check(input, out)?;
        Ok(BiLstmParams {
            fwd: LstmParams::zeros(input, out / 2),
            bwd: LstmParams::zeros(input, out / 2),
        })
    }

    pub fn init(input: usize, out: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::check(input, out)?;
        Ok(BiLstmParams {
            fwd: LstmParams::init(input, out / 2, rng),
            bwd: LstmParams::init(input, out / 2, rng),
        })
    }

    pub fn input(&self) -> usize {
        self.fwd.input()
    }

    pub fn output(&self) -> usize {
        2 * self.fwd.hidden()
    }

    pub fn register(&self, tape: &mut Tape) -> BiLstmVars {
        BiLstmVars {
            fwd: self.fwd.register(tape),
            bwd: self.bwd.register(tape),
            input: self.input(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        self.fwd.tensors().into_iter().chain(self.bwd.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let BiLstmParams { fwd, bwd } = self;
        fwd.tensors_mut().into_iter().chain(bwd.tensors_mut()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
    input: usize,
}

impl BiLstmVars {
    pub fn vars(&self) -> Vec<Var> {
        self.fwd.vars().into_iter().chain(self.bwd.vars()).collect()
    }

    /// `inputs` is `d x T`; the result is `l x T` with the forward states on
    /// top and the backward states below.
    pub fn forward(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let (d, steps) = tape.shape(inputs);
        if steps == 0 {
            return Err(Error::Empty("BiLSTM over an empty sequence".into()));
        }
        if d != self.input {
            return Err(Error::Shape {
                op: "bilstm input",
                lhs: (d, steps),
                rhs: (self.input, steps),
            });
        }
        let fwd = self.fwd.run(tape, inputs, false)?;
        let bwd = self.bwd.run(tape, inputs, true)?;
        let fwd = tape.concat_cols(&fwd)?;
        let bwd = tape.concat_cols(&bwd)?;
        tape.concat_rows(&[fwd, bwd])
    }
}

/// Runs a BiLSTM over `inputs` (`d x T`) without keeping the tape.
pub fn bilstm_forward(params: &BiLstmParams, inputs: &Tensor2) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.leaf(inputs.clone());
    let out = vars.forward(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_params_give_zero_states() {
        let p = BiLstmParams::zeros(3, 4).unwrap();
        let x = Tensor2::uniform(3, 5, 2.0, &mut rng(1));
        let h = bilstm_forward(&p, &x).unwrap();
        assert_eq!(h.shape(), (4, 5));
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_both_directions_see_same_input() {
        let mut r = rng(2);
        let dir = LstmParams::init(3, 2, &mut r);
        let p = BiLstmParams {
            fwd: dir.clone(),
            bwd: dir,
        };
        let x = Tensor2::uniform(3, 1, 1.0, &mut r);
        let h = bilstm_forward(&p, &x).unwrap();
        assert_eq!(h.get(0, 0), h.get(2, 0));
        assert_eq!(h.get(1, 0), h.get(3, 0));
    }

    #[test]
    fn reversal_swaps_directions() {
        let mut r = rng(3);
        let p = BiLstmParams::init(3, 6, &mut r).unwrap();
        let swapped = BiLstmParams {
            fwd: p.bwd.clone(),
            bwd: p.fwd.clone(),
        };
        let x = Tensor2::uniform(3, 3, 1.0, &mut r);
        let mut rev = Tensor2::zeros(3, 3);
        for c in 0..3 {
            for row in 0..3 {
                rev.set(row, c, x.get(row, 2 - c));
            }
        }
        let h = bilstm_forward(&p, &x).unwrap();
        let h_rev = bilstm_forward(&swapped, &rev).unwrap();
        for t in 0..3 {
            for j in 0..3 {
                assert!((h_rev.get(j, t) - h.get(3 + j, 2 - t)).abs() < 1e-15);
                assert!((h_rev.get(3 + j, t) - h.get(j, 2 - t)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(BiLstmParams::zeros(3, 5).is_err());
        let p = BiLstmParams::zeros(3, 4).unwrap();
        assert!(bilstm_forward(&p, &Tensor2::zeros(3, 0)).is_err());
        assert!(bilstm_forward(&p, &Tensor2::zeros(2, 4)).is_err());
    }

    #[test]
    fn hidden_states_bounded() {
        let mut r = rng(4);
        let mut p = BiLstmParams::init(2, 4, &mut r).unwrap();
        for t in p.tensors_mut() {
            *t = Tensor2::uniform(t.rows(), t.cols(), 5.0, &mut r);
        }
        let x = Tensor2::uniform(2, 7, 10.0, &mut r);
        let h = bilstm_forward(&p, &x).unwrap();
        assert!(h.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(5);
        let p = BiLstmParams::init(3, 4, &mut r).unwrap();
        let x = Tensor2::uniform(3, 4, 1.0, &mut r);
        let w = Tensor2::uniform(4, 4, 1.0, &mut r);
        let mut params: Vec<Tensor2> = p.tensors().into_iter().cloned().collect();
        params.push(x);
        let report = grad_check(&params, 1e-5, |ps| {
            let lp = BiLstmParams {
                fwd: LstmParams {
                    w_x: ps[0].clone(),
                    w_h: ps[1].clone(),
                    b: ps[2].clone(),
                },
                bwd: LstmParams {
                    w_x: ps[3].clone(),
                    w_h: ps[4].clone(),
                    b: ps[5].clone(),
                },
            };
            let mut tape = Tape::new();
            let vars = lp.register(&mut tape);
            let xv = tape.leaf(ps[6].clone());
            let h = vars.forward(&mut tape, xv)?;
            let wv = tape.leaf(w.clone());
            let m = tape.mul(h, wv)?;
            let loss = tape.sum(m);
            let g = tape.backward(loss)?;
            let mut grads: Vec<Tensor2> = vars.vars().iter().map(|&v| g.wrt(&tape, v)).collect();
            grads.push(g.wrt(&tape, xv));
            Ok((tape.value(loss).get(0, 0), grads))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
