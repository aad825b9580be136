//! Parameterized building blocks: embedding, fully-connected, LSTM and GRU
//! cells, additive attention and the log-softmax classifier head.
//!
//! Layers are lightweight descriptors (a parameter-name prefix plus sizes).
//! Their weights live in a [`ParamSet`]; a forward pass binds that set onto
//! a [`Tape`] and the layer methods look up the bound handles by name.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// A same-shaped set filled with zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Sets every parameter to zero.
    pub fn fill_zero(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Records every parameter as a borrowed leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf_ref(t, requires_grad)))
                .collect(),
        }
    }

    /// Adds gradients gathered by [`Bound::gradients`] into the tensors.
    pub fn accumulate_grads(&mut self, grads: Vec<(String, Vec<T>)>) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(&name)?.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Copies out the gradient of every parameter a backward pass reached.
    pub fn gradients<T: Scalar>(&self, tape: &Tape<'_, T>) -> Vec<(String, Vec<T>)> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }
}

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = T::from_f64(rng.gen_range(-bound..bound));
    }
    t
}

fn check_width<T: Scalar>(tape: &Tape<'_, T>, op: &'static str, x: Var, width: usize) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(Error::shape(op, s, &[s.first().copied().unwrap_or(0), width]));
    }
    Ok(s[0])
}

/// Word embedding table `[vocab_size × dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab_size: usize, dim: usize) -> Self {
        Embedding {
            name: name.into(),
            vocab_size,
            dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        params.insert(
            self.weight_name(),
            xavier_uniform(rng, &[self.vocab_size, self.dim], self.vocab_size, self.dim),
        );
    }

    /// Rows for `ids`; ids outside the table are rejected.
    pub fn lookup<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &Bound, ids: &[usize]) -> Result<Var> {
        tape.gather(p.get(&self.weight_name())?, ids)
    }
}

/// Fully-connected layer `x·W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        params.insert(
            self.weight_name(),
            xavier_uniform(rng, &[self.in_dim, self.out_dim], self.in_dim, self.out_dim),
        );
        params.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        check_width(tape, "linear", x, self.in_dim)?;
        let y = tape.matmul(x, p.get(&self.weight_name())?)?;
        tape.add_row(y, p.get(&self.bias_name())?)
    }
}

/// Hidden and cell state of an LSTM, `[B×H]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<H> {
    pub h: H,
    pub c: H,
}

/// LSTM cell with gates `i, f, o, g` computed from `[x; h]`.
///
/// The four gate matrices are stored side by side as one
/// `[(I+H) × 4H]` weight in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub name: String,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmCell {
    pub fn new(name: impl Into<String>, input_size: usize, hidden_size: usize) -> Self {
        LstmCell {
            name: name.into(),
            input_size,
            hidden_size,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let (i, h) = (self.input_size, self.hidden_size);
        // Each gate block is its own (I+H)×H matrix for fan purposes.
        params.insert(self.weight_name(), xavier_uniform(rng, &[i + h, 4 * h], i + h, h));
        params.insert(self.bias_name(), Tensor::zeros(&[4 * h]));
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        x: Var,
        state: &LstmState<Var>,
    ) -> Result<LstmState<Var>> {
        let hs = self.hidden_size;
        let batch = check_width(tape, "lstm_cell input", x, self.input_size)?;
        for s in [state.h, state.c] {
            if tape.shape(s) != [batch, hs] {
                return Err(Error::shape("lstm_cell state", tape.shape(s), &[batch, hs]));
            }
        }
        let xh = tape.concat(&[x, state.h], 1)?;
        let pre = tape.matmul(xh, p.get(&self.weight_name())?)?;
        let pre = tape.add_row(pre, p.get(&self.bias_name())?)?;
        let ifo = tape.slice(pre, 1, 0, 3 * hs)?;
        let ifo = tape.sigmoid(ifo);
        let input_gate = tape.slice(ifo, 1, 0, hs)?;
        let forget_gate = tape.slice(ifo, 1, hs, hs)?;
        let output_gate = tape.slice(ifo, 1, 2 * hs, hs)?;
        let candidate = tape.slice(pre, 1, 3 * hs, hs)?;
        let candidate = tape.tanh(candidate);

        let kept = tape.mul(forget_gate, state.c)?;
        let written = tape.mul(input_gate, candidate)?;
        let c = tape.add(kept, written)?;
        let squashed = tape.tanh(c);
        let h = tape.mul(output_gate, squashed)?;
        Ok(LstmState { h, c })
    }
}

/// GRU cell: update gate `z`, reset gate `r`, candidate `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub name: String,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new(name: impl Into<String>, input_size: usize, hidden_size: usize) -> Self {
        GruCell {
            name: name.into(),
            input_size,
            hidden_size,
        }
    }

    fn gates_weight(&self) -> String {
        format!("{}.gates.weight", self.name)
    }

    fn gates_bias(&self) -> String {
        format!("{}.gates.bias", self.name)
    }

    fn candidate_weight(&self) -> String {
        format!("{}.candidate.weight", self.name)
    }

    fn candidate_bias(&self) -> String {
        format!("{}.candidate.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let (i, h) = (self.input_size, self.hidden_size);
        params.insert(self.gates_weight(), xavier_uniform(rng, &[i + h, 2 * h], i + h, h));
        params.insert(self.gates_bias(), Tensor::zeros(&[2 * h]));
        params.insert(self.candidate_weight(), xavier_uniform(rng, &[i + h, h], i + h, h));
        params.insert(self.candidate_bias(), Tensor::zeros(&[h]));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let hs = self.hidden_size;
        let batch = check_width(tape, "gru_cell input", x, self.input_size)?;
        if tape.shape(h) != [batch, hs] {
            return Err(Error::shape("gru_cell state", tape.shape(h), &[batch, hs]));
        }
        let xh = tape.concat(&[x, h], 1)?;
        let zr = tape.matmul(xh, p.get(&self.gates_weight())?)?;
        let zr = tape.add_row(zr, p.get(&self.gates_bias())?)?;
        let zr = tape.sigmoid(zr);
        let z = tape.slice(zr, 1, 0, hs)?;
        let r = tape.slice(zr, 1, hs, hs)?;

        let reset_h = tape.mul(r, h)?;
        let xrh = tape.concat(&[x, reset_h], 1)?;
        let n = tape.matmul(xrh, p.get(&self.candidate_weight())?)?;
        let n = tape.add_row(n, p.get(&self.candidate_bias())?)?;
        let n = tape.tanh(n);

        // (1 - z)·n + z·h == n + z·(h - n)
        let delta = tape.sub(h, n)?;
        let gated = tape.mul(z, delta)?;
        tape.add(n, gated)
    }
}

/// Additive attention over a set of region vectors.
///
/// `score_r = wᵀ·tanh(W_v·region_r + W_h·h)`, weights are the softmax of the
/// scores over regions and the context is the weighted sum of regions.
/// `W_v·region` does not depend on the decoder state, so callers project
/// the regions once per image with [`Attention::project`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub name: String,
    pub region_dim: usize,
    pub hidden_size: usize,
    pub attn_size: usize,
}

impl Attention {
    pub fn new(name: impl Into<String>, region_dim: usize, hidden_size: usize, attn_size: usize) -> Self {
        Attention {
            name: name.into(),
            region_dim,
            hidden_size,
            attn_size,
        }
    }

    fn region_proj(&self) -> String {
        format!("{}.region_proj", self.name)
    }

    fn hidden_proj(&self) -> String {
        format!("{}.hidden_proj", self.name)
    }

    fn score(&self) -> String {
        format!("{}.score", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let (d, h, a) = (self.region_dim, self.hidden_size, self.attn_size);
        params.insert(self.region_proj(), xavier_uniform(rng, &[d, a], d, a));
        params.insert(self.hidden_proj(), xavier_uniform(rng, &[h, a], h, a));
        params.insert(self.score(), xavier_uniform(rng, &[a, 1], a, 1));
    }

    /// `[B×R×D_a]` regions to `[B×R×A]` projected regions.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &Bound, regions: Var) -> Result<Var> {
        let s = tape.shape(regions).to_vec();
        if s.len() != 3 || s[2] != self.region_dim {
            return Err(Error::shape("attention regions", &s, &[self.region_dim]));
        }
        let flat = tape.reshape(regions, vec![s[0] * s[1], s[2]])?;
        let projected = tape.matmul(flat, p.get(&self.region_proj())?)?;
        tape.reshape(projected, vec![s[0], s[1], self.attn_size])
    }

    /// Returns `(weights [B×R], context [B×D_a])`.
    pub fn attend<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        regions: Var,
        projected: Var,
        h: Var,
    ) -> Result<(Var, Var)> {
        let s = tape.shape(regions).to_vec();
        if s.len() != 3 || s[2] != self.region_dim {
            return Err(Error::shape("attention regions", &s, &[self.region_dim]));
        }
        let (batch, count) = (s[0], s[1]);
        if count == 0 {
            return Err(Error::Empty("attention regions"));
        }
        if tape.shape(projected) != [batch, count, self.attn_size] {
            return Err(Error::shape(
                "attention projected",
                tape.shape(projected),
                &[batch, count, self.attn_size],
            ));
        }
        check_width(tape, "attention hidden", h, self.hidden_size)?;

        let query = tape.matmul(h, p.get(&self.hidden_proj())?)?;
        let query = tape.repeat_rows(query, count)?;
        let keys = tape.reshape(projected, vec![batch * count, self.attn_size])?;
        let hidden = tape.add(keys, query)?;
        let hidden = tape.tanh(hidden);
        let scores = tape.matmul(hidden, p.get(&self.score())?)?;
        let scores = tape.reshape(scores, vec![batch, count])?;
        let weights = tape.softmax_rows(scores);

        let w3 = tape.reshape(weights, vec![batch, 1, count])?;
        let context = tape.batch_matmul(w3, regions)?;
        let context = tape.reshape(context, vec![batch, self.region_dim])?;
        Ok((weights, context))
    }
}

/// Linear projection to vocabulary logits followed by log-softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn new(name: impl Into<String>, in_dim: usize, vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs at least 2 classes, got {vocab_size}"
            )));
        }
        Ok(Classifier {
            linear: Linear::new(name, in_dim, vocab_size),
        })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        self.linear.init(params, rng);
    }

    /// Log-probabilities `[B×V]`.
    pub fn classify<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &Bound, features: Var) -> Result<Var> {
        let logits = self.linear.forward(tape, p, features)?;
        Ok(tape.log_softmax_rows(logits))
    }
}

/// Mean negative log-likelihood over the rows that carry a target.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<'_, T>,
    logprobs: Var,
    targets: &[Option<usize>],
) -> Result<Var> {
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::Empty("cross-entropy targets"));
    }
    let total = tape.nll(logprobs, targets)?;
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Finite-difference check of `f` with respect to every tensor in `params`.
///
/// Returns one relative error per parameter, in name order.
pub fn check_param_gradients<F>(params: &ParamSet<f64>, step: f64, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Tape<'_, f64>, &Bound) -> Result<Var>,
{
    use crate::numerics::{central_difference, relative_error};

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let root = f(&mut tape, &bound)?;
    tape.backward(root)?;

    let mut out = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let zeros = vec![0.0; tensor.len()];
        let analytic = tape.grad(bound.get(name)?).unwrap_or(&zeros).to_vec();
        let numeric = central_difference(
            |x| {
                let mut probe = params.clone();
                probe
                    .get_mut(name)
                    .expect("name taken from the set")
                    .data_mut()
                    .copy_from_slice(x);
                let mut tape = Tape::new();
                let bound = probe.bind(&mut tape, false);
                let root = f(&mut tape, &bound).expect("forward succeeded once already");
                tape.value(root)[0]
            },
            tensor.data(),
            step,
        );
        out.push((name.clone(), relative_error(&analytic, &numeric)));
    }
    Ok(out)
}
