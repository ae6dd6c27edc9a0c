use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn apply_tape(self, tape: &mut Tape<'_>, v: Var) -> Var {
        match self {
            Activation::Linear => v,
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

/// `y = W x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_uniform(&format!("{name}.w"), output, input, input, rng);
        let b = store.add_uniform(&format!("{name}.b"), output, 1, input, rng);
        Self { w, b, input, output }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        check_len("dense input", x.len(), self.input)?;
        let mut y = store.get(self.w).matvec(x);
        y.iter_mut().zip(&store.get(self.b).data).for_each(|(y, b)| *y += b);
        Ok(y)
    }

    pub fn forward_tape(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        tape.linear(self.w, x, Some(self.b))
    }
}

/// Stack of dense layers with one activation per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activations: Vec<Activation>,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer is linear.
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], hidden: Activation, rng: &mut ChaCha8Rng) -> Self {
        let layers: Vec<Dense> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        let mut activations = vec![hidden; layers.len()];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Linear;
        }
        Self { layers, activations }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(store, x, &self.layers, &self.activations)
    }

    pub fn forward_tape(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut v = x;
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let z = layer.forward_tape(tape, v)?;
            v = act.apply_tape(tape, z);
        }
        Ok(v)
    }
}

/// Plain forward pass through `layers`, applying `activations[i]` after
/// layer `i`.
pub fn mlp_forward(store: &ParamStore, x: &[f64], layers: &[Dense], activations: &[Activation]) -> Result<Vec<f64>> {
    check_len("activation list", activations.len(), layers.len())?;
    let mut v = x.to_vec();
    for (layer, act) in layers.iter().zip(activations) {
        v = layer.forward(store, &v)?;
        v.iter_mut().for_each(|x| *x = act.apply(*x));
    }
    Ok(v)
}

/// GRU cell:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + b_n + r ⊙ (U_n h))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = |suffix: &str, cols: usize| store.add_uniform(&format!("{name}.{suffix}"), hidden, cols, hidden, rng);
        Self {
            w_z: p("w_z", input),
            u_z: p("u_z", hidden),
            b_z: p("b_z", 1),
            w_r: p("w_r", input),
            u_r: p("u_r", hidden),
            b_r: p("b_r", 1),
            w_n: p("w_n", input),
            u_n: p("u_n", hidden),
            b_n: p("b_n", 1),
            input,
            hidden,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        check_len("gru input", x.len(), self.input)?;
        check_len("gru state", h.len(), self.hidden)?;
        let gate = |w: ParamId, u: ParamId, b: ParamId| -> Vec<f64> {
            let wx = store.get(w).matvec(x);
            let uh = store.get(u).matvec(h);
            let b = &store.get(b).data;
            (0..self.hidden).map(|i| sigmoid(wx[i] + uh[i] + b[i])).collect()
        };
        let z = gate(self.w_z, self.u_z, self.b_z);
        let r = gate(self.w_r, self.u_r, self.b_r);
        let wn = store.get(self.w_n).matvec(x);
        let un = store.get(self.u_n).matvec(h);
        let bn = &store.get(self.b_n).data;
        Ok((0..self.hidden)
            .map(|i| {
                let n = (wn[i] + bn[i] + r[i] * un[i]).tanh();
                (1.0 - z[i]) * n + z[i] * h[i]
            })
            .collect())
    }

    pub fn forward_tape(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape<'_>, w, u, b| -> Result<Var> {
            let a = tape.linear(w, x, Some(b))?;
            let c = tape.linear(u, h, None)?;
            let s = tape.add(a, c)?;
            Ok(tape.sigmoid(s))
        };
        let z = gate(tape, self.w_z, self.u_z, self.b_z)?;
        let r = gate(tape, self.w_r, self.u_r, self.b_r)?;
        let wn = tape.linear(self.w_n, x, Some(self.b_n))?;
        let un = tape.linear(self.u_n, h, None)?;
        let run = tape.mul(r, un)?;
        let pre = tape.add(wn, run)?;
        let n = tape.tanh(pre);
        let one_minus_z = tape.one_minus(z);
        let a = tape.mul(one_minus_z, n)?;
        let b = tape.mul(z, h)?;
        tape.add(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{seeded_rng, Tensor};

    /// Independent GRU written against raw row-major slices.
    fn reference_gru(store: &ParamStore, name: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let t = |s: &str| store.get(store.id(&format!("{name}.{s}")).unwrap()).clone();
        let n_h = h.len();
        let affine = |w: &Tensor, v: &[f64], i: usize| -> f64 {
            let mut acc = 0.0;
            for j in 0..v.len() {
                acc += w.data[i * v.len() + j] * v[j];
            }
            acc
        };
        let logistic = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut out = vec![0.0; n_h];
        for i in 0..n_h {
            let z = logistic(affine(&t("w_z"), x, i) + affine(&t("u_z"), h, i) + t("b_z").data[i]);
            let r = logistic(affine(&t("w_r"), x, i) + affine(&t("u_r"), h, i) + t("b_r").data[i]);
            let n = (affine(&t("w_n"), x, i) + t("b_n").data[i] + r * affine(&t("u_n"), h, i)).tanh();
            out[i] = z * h[i] + (1.0 - z) * n;
        }
        out
    }

    #[test]
    fn zero_gru_stays_at_zero() {
        let mut store = ParamStore::new(0);
        let cell = GruCell::new(&mut store, "g", 10, 32, &mut seeded_rng(0));
        for t in store.tensors_mut() {
            t.data.fill(0.0);
        }
        let h = cell.forward(&store, &[0.0; 10], &[0.0; 32]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_matches_reference_and_tape() {
        use rand::Rng;
        for seed in 0..5 {
            let mut rng = seeded_rng(seed);
            let mut store = ParamStore::new(seed);
            let cell = GruCell::new(&mut store, "g", 10, 32, &mut rng);
            let x: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
            let h: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = cell.forward(&store, &x, &h).unwrap();
            let want = reference_gru(&store, "g", &x, &h);
            let mut tape = Tape::new(&store);
            let (xv, hv) = (tape.input(x.clone()), tape.input(h.clone()));
            let out = cell.forward_tape(&mut tape, xv, hv).unwrap();
            for i in 0..32 {
                assert!((got[i] - want[i]).abs() < 1e-10);
                assert!((tape.value(out)[i] - want[i]).abs() < 1e-10);
                assert!(got[i].abs() < 1.0);
            }
        }
    }

    #[test]
    fn gru_shape_mismatch() {
        let mut store = ParamStore::new(0);
        let cell = GruCell::new(&mut store, "g", 4, 3, &mut seeded_rng(0));
        assert!(matches!(cell.forward(&store, &[0.0; 5], &[0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(cell.forward(&store, &[0.0; 4], &[0.0; 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_mlp_passes_through() {
        let mut store = ParamStore::new(0);
        let w = store.add("w", Tensor { rows: 3, cols: 3, data: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] });
        let b = store.add("b", Tensor::zeros(3, 1));
        let layer = Dense { w, b, input: 3, output: 3 };
        let x = [0.3, -2.0, 5.0];
        assert_eq!(mlp_forward(&store, &x, &[layer], &[Activation::Linear]).unwrap(), x.to_vec());
        assert_eq!(mlp_forward(&store, &x, &[layer], &[Activation::Relu]).unwrap(), vec![0.3, 0.0, 5.0]);
        assert!(mlp_forward(&store, &x[..2], &[layer], &[Activation::Linear]).is_err());
    }

    #[test]
    fn mlp_matches_reference() {
        use rand::Rng;
        let mut rng = seeded_rng(11);
        let mut store = ParamStore::new(11);
        let mlp = Mlp::new(&mut store, "m", &[5, 7, 6, 2], Activation::Relu, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        // reference: explicit loops
        let mut v = x.clone();
        for (li, layer) in mlp.layers.iter().enumerate() {
            let w = store.get(layer.w);
            let b = store.get(layer.b);
            let mut next = vec![0.0; layer.output];
            for i in 0..layer.output {
                let mut s = b.data[i];
                for j in 0..layer.input {
                    s += w.data[i * layer.input + j] * v[j];
                }
                next[i] = if li + 1 < mlp.layers.len() { s.max(0.0) } else { s };
            }
            v = next;
        }
        let got = mlp.forward(&store, &x).unwrap();
        let mut tape = Tape::new(&store);
        let xv = tape.input(x);
        let taped = mlp.forward_tape(&mut tape, xv).unwrap();
        for i in 0..2 {
            assert!((got[i] - v[i]).abs() < 1e-10);
            assert!((tape.value(taped)[i] - v[i]).abs() < 1e-10);
        }
    }
}
