use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamSet, Tensor, Var};

/// Fully connected layer `x W + b`; the weights live in a [`ParamSet`] and
/// the layer only remembers where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    w: usize,
    b: usize,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        params.insert_glorot(&format!("{name}.w"), input, output, rng);
        params.insert(format!("{name}.b"), Tensor::zeros(&[1, output]));
        Self {
            w: params.len() - 2,
            b: params.len() - 1,
            input,
            output,
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        x.matmul(p[self.w])?.add_row(p[self.b])
    }

    pub fn num_params(&self) -> usize {
        (self.input + 1) * self.output
    }
}

/// LSTM cell with fused gate weights in the order input, forget, cell,
/// output. The forget-gate bias starts at one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    wx: usize,
    wh: usize,
    b: usize,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        params.insert_glorot(&format!("{name}.wx"), input, 4 * hidden, rng);
        params.insert_glorot(&format!("{name}.wh"), hidden, 4 * hidden, rng);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        params.insert(format!("{name}.b"), Tensor::matrix(1, 4 * hidden, b));
        Self {
            wx: params.len() - 3,
            wh: params.len() - 2,
            b: params.len() - 1,
            input,
            hidden,
        }
    }

    /// One step for a batch: `x` is `[B, input]`, `h` and `c` are `[B, hidden]`.
    pub fn step<'t>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), AutodiffError> {
        let n = self.hidden;
        let gates = x.matmul(p[self.wx])?.add(h.matmul(p[self.wh])?)?.add_row(p[self.b])?;
        let i = gates.slice_cols(0, n)?.sigmoid();
        let f = gates.slice_cols(n, 2 * n)?.sigmoid();
        let g = gates.slice_cols(2 * n, 3 * n)?.tanh();
        let o = gates.slice_cols(3 * n, 4 * n)?.sigmoid();
        let c_next = f.mul(c)?.add(i.mul(g)?)?;
        let h_next = o.mul(c_next.tanh())?;
        Ok((h_next, c_next))
    }

    pub fn num_params(&self) -> usize {
        (self.input + self.hidden + 1) * 4 * self.hidden
    }
}

/// Hidden ELU layer followed by a linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Dense,
    pub out: Dense,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Dense::new(params, &format!("{name}.1"), input, hidden, rng),
            out: Dense::new(params, &format!("{name}.2"), hidden, output, rng),
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let h = self.hidden.forward(p, x)?.elu();
        self.out.forward(p, h)
    }

    pub fn num_params(&self) -> usize {
        self.hidden.num_params() + self.out.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::stream;

    #[test]
    fn lstm_shapes_and_forget_bias() {
        let mut ps = ParamSet::new();
        let mut rng = stream(0, &[]);
        let lstm = Lstm::new(&mut ps, "lstm", 3, 5, &mut rng);
        assert_eq!(ps.num_scalars(), lstm.num_params());
        assert_eq!(ps.get("lstm.b").unwrap().data()[5..10], [1.0; 5]);
        let tape = Tape::new();
        let p = ps.bind(&tape);
        let x = tape.constant(Tensor::ones(&[2, 3]));
        let h0 = tape.constant(Tensor::zeros(&[2, 5]));
        let (h, c) = lstm.step(&p, x, h0, h0).unwrap();
        assert_eq!(h.shape(), vec![2, 5]);
        assert_eq!(c.shape(), vec![2, 5]);
        assert!(h.value().data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn dense_param_count() {
        let mut ps = ParamSet::new();
        let mut rng = stream(0, &[]);
        let mlp = Mlp::new(&mut ps, "m", 4, 6, 2, &mut rng);
        assert_eq!(ps.num_scalars(), mlp.num_params());
        assert_eq!(ps.len(), 4);
    }
}
