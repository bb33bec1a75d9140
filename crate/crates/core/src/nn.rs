//! Named parameters plus the affine and MLP layers built on them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a new parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Puts every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replaces the values with those from `other`, which must have the same
    /// names and shapes in the same order.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter sets differ"));
        }
        for (name, (mine, theirs)) in self
            .names
            .iter()
            .zip(self.values.iter_mut().zip(&other.values))
        {
            if mine.shape() != theirs.shape() {
                return Err(Error::invalid(format!(
                    "{name}: shape {:?} vs {:?}",
                    mine.shape(),
                    theirs.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects gradients in store order; parameters the loss does not touch
    /// get zeros.
    pub fn gradients(&self, grads: &mut Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

/// `x ↦ x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform(&[inputs, outputs], bound),
        )?;
        let bias = store.add(format!("{name}.bias"), init.uniform(&[1, outputs], bound))?;
        Ok(Linear {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    /// Same shapes as [`Linear::new`] but all-zero weights and bias.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[inputs, outputs]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, outputs]))?;
        Ok(Linear {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, params.var(self.weight))?;
        tape.add_row(xw, params.var(self.bias))
    }
}

/// Stack of [`Linear`] layers with ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Apply ReLU after the final layer too.
    pub activate_output: bool,
}

impl Mlp {
    /// `sizes = [in, h1, …, out]`.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        sizes: &[usize],
        activate_output: bool,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid(
                "an MLP needs at least input and output sizes",
            ));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp {
            layers,
            activate_output,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        self.forward_with(tape, params, x, |_, _, h| Ok(h))
    }

    /// Like [`Mlp::forward`], calling `hidden` on each hidden activation (after
    /// its ReLU) so callers can splice in e.g. dropout masks.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        mut hidden: impl FnMut(&mut Tape, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, params, h)?;
            if i < last {
                h = tape.relu(h)?;
                h = hidden(tape, i, h)?;
            } else if self.activate_output {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.add("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn mlp_rows_are_independent() {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let mlp = Mlp::new(&mut store, &mut init, "m", &[3, 5, 2], false).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.5, -0.3, 1.0, -2.0, 0.7]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let both = mlp.forward(&mut tape, &p, xv).unwrap();
        let single = tape.constant(Tensor::matrix(1, 3, x.row(1).to_vec()));
        let one = mlp.forward(&mut tape, &p, single).unwrap();
        assert_eq!(tape.value(both).row(1), tape.value(one).row(0));
    }

    #[test]
    fn init_is_seeded() {
        let a = Init::new(9).uniform(&[4, 4], 0.5);
        let b = Init::new(9).uniform(&[4, 4], 0.5);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|x| x.abs() <= 0.5));
    }
}
