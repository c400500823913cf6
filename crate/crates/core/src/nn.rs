//! Recurrent and feed-forward building blocks.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Group, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        vocab_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add_uniform(format!("{name}.table"), group, &[vocab_size, dim], rng);
        Embedding {
            table,
            vocab_size,
            dim,
        }
    }

    pub fn lookup(&self, tape: &mut Tape<'_>, index: usize) -> Result<Var> {
        if index >= self.vocab_size {
            return Err(Error::invalid(format!(
                "token index {index} outside embedding of {} rows",
                self.vocab_size
            )));
        }
        let table = tape.param(self.table);
        tape.lookup(table, index)
    }
}

/// Gate weights are laid out `[input; forget; output; candidate]` over the
/// concatenated `[x; h]` input.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            group,
            &[4 * hidden_dim, input_dim + hidden_dim],
            rng,
        );
        let mut b = Tensor::zeros(&[4 * hidden_dim]);
        b.data_mut()[hidden_dim..2 * hidden_dim].fill(1.0);
        let bias = store.add(format!("{name}.bias"), group, b);
        LstmCell {
            input_dim,
            hidden_dim,
            weight,
            bias,
        }
    }

    pub fn step(&self, tape: &mut Tape<'_>, h: Var, c: Var, x: Var) -> Result<(Var, Var)> {
        let hd = self.hidden_dim;
        let xh = tape.concat(&[x, h])?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let pre = tape.matvec(w, xh)?;
        let pre = tape.add(pre, b)?;
        let i = tape.slice(pre, 0, hd)?;
        let f = tape.slice(pre, hd, hd)?;
        let o = tape.slice(pre, 2 * hd, hd)?;
        let g = tape.slice(pre, 3 * hd, hd)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let o = tape.sigmoid(o);
        let g = tape.tanh(g);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// Elman cell: `h' = tanh(W [x; h] + b)`.
#[derive(Clone, Debug)]
pub struct RnnCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl RnnCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            group,
            &[hidden_dim, input_dim + hidden_dim],
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), group, &[hidden_dim]);
        RnnCell {
            input_dim,
            hidden_dim,
            weight,
            bias,
        }
    }

    pub fn step(&self, tape: &mut Tape<'_>, h: Var, x: Var) -> Result<Var> {
        let xh = tape.concat(&[x, h])?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let pre = tape.matvec(w, xh)?;
        let pre = tape.add(pre, b)?;
        Ok(tape.tanh(pre))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    Vanilla,
}

#[derive(Clone, Debug)]
pub enum Cell {
    Lstm(LstmCell),
    Vanilla(RnnCell),
}

impl Cell {
    pub fn hidden_dim(&self) -> usize {
        match self {
            Cell::Lstm(c) => c.hidden_dim,
            Cell::Vanilla(c) => c.hidden_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Cell::Lstm(c) => c.input_dim,
            Cell::Vanilla(c) => c.input_dim,
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        match self {
            Cell::Lstm(c) => [c.weight, c.bias],
            Cell::Vanilla(c) => [c.weight, c.bias],
        }
    }
}

/// Per-layer recurrent state. `memory` is only present for LSTM layers.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub hidden: Var,
    pub memory: Option<Var>,
}

/// Multi-layer recurrent stack.
///
/// With skip connections every layer above the first reads
/// `[previous layer output; original input]`.
#[derive(Clone, Debug)]
pub struct StackedRnn {
    pub layers: Vec<Cell>,
    pub skip_connections: bool,
    pub dropout: f64,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[allow(clippy::too_many_arguments)]
impl StackedRnn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        kind: CellKind,
        depth: usize,
        input_dim: usize,
        hidden_dim: usize,
        skip_connections: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("recurrent stack needs at least one layer"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!(
                "dropout rate {dropout} outside [0, 1)"
            )));
        }
        let layers = (0..depth)
            .map(|l| {
                let in_dim = match (l, skip_connections) {
                    (0, _) => input_dim,
                    (_, true) => hidden_dim + input_dim,
                    (_, false) => hidden_dim,
                };
                let layer_name = format!("{name}.l{l}");
                match kind {
                    CellKind::Lstm => Cell::Lstm(LstmCell::new(
                        store,
                        &layer_name,
                        group,
                        in_dim,
                        hidden_dim,
                        rng,
                    )),
                    CellKind::Vanilla => Cell::Vanilla(RnnCell::new(
                        store,
                        &layer_name,
                        group,
                        in_dim,
                        hidden_dim,
                        rng,
                    )),
                }
            })
            .collect();
        Ok(StackedRnn {
            layers,
            skip_connections,
            dropout,
            input_dim,
            hidden_dim,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Cell::params).collect()
    }

    pub fn zero_state(&self, tape: &mut Tape<'_>) -> Vec<LayerState> {
        self.layers
            .iter()
            .map(|cell| {
                let hidden = tape.constant(Tensor::zeros(&[cell.hidden_dim()]));
                let memory = matches!(cell, Cell::Lstm(_))
                    .then(|| tape.constant(Tensor::zeros(&[cell.hidden_dim()])));
                LayerState { hidden, memory }
            })
            .collect()
    }

    /// One time step through every layer. `rng` enables dropout (training mode).
    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        state: &[LayerState],
        x: Var,
        mut rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<(Var, Vec<LayerState>)> {
        if state.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "state has {} layers, stack has {}",
                state.len(),
                self.layers.len()
            )));
        }
        if tape.shape(x) != [self.input_dim] {
            return Err(Error::Shape {
                op: "rnn_step",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        let mut next = Vec::with_capacity(self.layers.len());
        let mut below = x;
        for (l, (cell, st)) in self.layers.iter().zip(state).enumerate() {
            let mut input = if l > 0 && self.skip_connections {
                tape.concat(&[below, x])?
            } else {
                below
            };
            if let Some(r) = rng.as_deref_mut() {
                input = tape.dropout(input, self.dropout, r)?;
            }
            let layer_state = match cell {
                Cell::Lstm(c) => {
                    let memory = st
                        .memory
                        .ok_or_else(|| Error::invalid("LSTM layer state lacks memory cell"))?;
                    let (h, m) = c.step(tape, st.hidden, memory, input)?;
                    LayerState {
                        hidden: h,
                        memory: Some(m),
                    }
                }
                Cell::Vanilla(c) => LayerState {
                    hidden: c.step(tape, st.hidden, input)?,
                    memory: None,
                },
            };
            below = layer_state.hidden;
            next.push(layer_state);
        }
        let mut out = below;
        if let Some(r) = rng {
            out = tape.dropout(out, self.dropout, r)?;
        }
        Ok((out, next))
    }

    /// Runs over a whole sequence, returning the top-layer output per step.
    pub fn run(
        &self,
        tape: &mut Tape<'_>,
        initial: Vec<LayerState>,
        inputs: &[Var],
        mut rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<Vec<Var>> {
        let mut state = initial;
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let (out, next) = self.step(tape, &state, x, rng.as_deref_mut())?;
            outputs.push(out);
            state = next;
        }
        Ok(outputs)
    }
}

/// Forward and backward stacks whose outputs are concatenated per position.
#[derive(Clone, Debug)]
pub struct BiEncoder {
    pub forward: StackedRnn,
    pub backward: StackedRnn,
}

impl BiEncoder {
    pub fn output_dim(&self) -> usize {
        self.forward.hidden_dim + self.backward.hidden_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.forward.params();
        p.extend(self.backward.params());
        p
    }

    pub fn encode(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        let init = self.forward.zero_state(tape);
        let fwd = self.forward.run(tape, init, inputs, None)?;
        let reversed: Vec<Var> = inputs.iter().rev().copied().collect();
        let init = self.backward.zero_state(tape);
        let mut bwd = self.backward.run(tape, init, &reversed, None)?;
        bwd.reverse();
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, b)| tape.concat(&[f, b]))
            .collect()
    }
}

/// Feed-forward network with tanh hidden layers and a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("MLP needs input and output dimensions"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = store.add_uniform(format!("{name}.w{i}"), group, &[w[1], w[0]], rng);
                let bias = store.add_zeros(format!("{name}.b{i}"), group, &[w[1]]);
                (weight, bias)
            })
            .collect();
        Ok(Mlp {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(w);
            let bv = tape.param(b);
            let z = tape.matvec(wv, h)?;
            let z = tape.add(z, bv)?;
            h = if i == last { z } else { tape.tanh(z) };
        }
        Ok(h)
    }
}

/// Affine map `W x + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), group, &[out_dim, in_dim], rng);
        let bias = with_bias.then(|| store.add_zeros(format!("{name}.bias"), group, &[out_dim]));
        Linear { weight, bias }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matvec(w, x)?;
        match self.bias {
            Some(b) => {
                let bv = tape.param(b);
                tape.add(y, bv)
            }
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn lstm_with_zero_weights_outputs_zero() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", Group::Compression, 3, 4, &mut rng(0));
        store.get_mut(cell.weight).data_mut().fill(0.0);
        let mut t = Tape::new(&store);
        let h = t.constant(Tensor::zeros(&[4]));
        let c = t.constant(Tensor::zeros(&[4]));
        let x = t.constant(Tensor::vector(vec![0.7, -2.0, 5.0]));
        let (h2, _) = cell.step(&mut t, h, c, x).unwrap();
        assert!(t.value(h2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", Group::Compression, 2, 3, &mut rng(0));
        let b = store.get(cell.bias).data();
        assert_eq!(&b[3..6], &[1.0, 1.0, 1.0]);
        assert!(b[..3].iter().chain(&b[6..]).all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_step_shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", Group::Compression, 3, 4, &mut rng(0));
        let mut t = Tape::new(&store);
        let h = t.constant(Tensor::zeros(&[4]));
        let c = t.constant(Tensor::zeros(&[4]));
        let x = t.constant(Tensor::zeros(&[5]));
        assert!(cell.step(&mut t, h, c, x).is_err());
    }

    #[test]
    fn lstm_step_is_deterministic() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", Group::Compression, 3, 4, &mut rng(5));
        let run = || {
            let mut t = Tape::new(&store);
            let h = t.constant(Tensor::zeros(&[4]));
            let c = t.constant(Tensor::zeros(&[4]));
            let x = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let (h2, c2) = cell.step(&mut t, h, c, x).unwrap();
            (t.value(h2).to_vec(), t.value(c2).to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut r = rng(21);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", Group::Compression, 3, 4, &mut r);
        store
            .get_mut(cell.weight)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 6.0);
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[3], 1.0, &mut r)).collect();
        let report = finite_diff_check(
            |t| {
                let mut h = t.constant(Tensor::zeros(&[4]));
                let mut c = t.constant(Tensor::zeros(&[4]));
                for x in &xs {
                    let xv = t.constant(x.clone());
                    (h, c) = cell.step(t, h, c, xv)?;
                }
                Ok(t.sum(h))
            },
            &mut store,
            &[cell.weight, cell.bias],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn skip_connection_shape_law() {
        for depth in 1..4 {
            for hidden in [3, 5] {
                let mut store = ParamStore::new();
                let stack = StackedRnn::new(
                    &mut store,
                    "s",
                    Group::Compression,
                    CellKind::Lstm,
                    depth,
                    2,
                    hidden,
                    true,
                    0.0,
                    &mut rng(1),
                )
                .unwrap();
                for (l, cell) in stack.layers.iter().enumerate() {
                    let expected = if l == 0 { 2 } else { hidden + 2 };
                    assert_eq!(cell.input_dim(), expected);
                }
                let mut t = Tape::new(&store);
                let init = stack.zero_state(&mut t);
                let x = t.constant(Tensor::vector(vec![0.5, -0.5]));
                let out = stack.run(&mut t, init, &[x, x], None).unwrap();
                assert_eq!(t.shape(out[1]), &[hidden]);
            }
        }
    }

    #[test]
    fn bidirectional_output_doubles_hidden_and_preserves_length() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let mk = |store: &mut ParamStore, name: &str, r: &mut ChaCha8Rng| {
            StackedRnn::new(
                store,
                name,
                Group::Compression,
                CellKind::Lstm,
                3,
                8,
                256,
                true,
                0.0,
                r,
            )
            .unwrap()
        };
        let enc = BiEncoder {
            forward: mk(&mut store, "f", &mut r),
            backward: mk(&mut store, "b", &mut r),
        };
        let mut t = Tape::frozen(&store);
        let xs: Vec<Var> = (0..5)
            .map(|i| t.constant(Tensor::vector(vec![i as f64 * 0.1; 8])))
            .collect();
        let h = enc.encode(&mut t, &xs).unwrap();
        assert_eq!(h.len(), 5);
        assert!(h.iter().all(|&v| t.shape(v) == [512]));
        assert!(enc.encode(&mut t, &[]).is_err());
    }

    #[test]
    fn palindrome_with_tied_weights_mirrors() {
        let mut store = ParamStore::new();
        let mut r = rng(4);
        let fwd = StackedRnn::new(
            &mut store,
            "f",
            Group::Compression,
            CellKind::Lstm,
            2,
            3,
            4,
            true,
            0.0,
            &mut r,
        )
        .unwrap();
        let enc = BiEncoder {
            forward: fwd.clone(),
            backward: fwd,
        };
        let vals = [[0.1, 0.2, 0.3], [-0.4, 0.5, 0.0], [0.9, -0.1, 0.2]];
        let seq = [0usize, 1, 2, 1, 0];
        let mut t = Tape::frozen(&store);
        let xs: Vec<Var> = seq
            .iter()
            .map(|&i| t.constant(Tensor::vector(vals[i].to_vec())))
            .collect();
        let h = enc.encode(&mut t, &xs).unwrap();
        let n = h.len();
        for i in 0..n {
            let a = &t.value(h[i])[..4];
            let b = &t.value(h[n - 1 - i])[4..];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bidirectional_stack_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng(9);
        let mk = |store: &mut ParamStore, name: &str, r: &mut ChaCha8Rng| {
            StackedRnn::new(
                store,
                name,
                Group::Compression,
                CellKind::Lstm,
                2,
                3,
                3,
                true,
                0.0,
                r,
            )
            .unwrap()
        };
        let enc = BiEncoder {
            forward: mk(&mut store, "f", &mut r),
            backward: mk(&mut store, "b", &mut r),
        };
        for id in store.ids().collect::<Vec<_>>() {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 5.0);
        }
        let xs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[3], 1.0, &mut r)).collect();
        let ids = enc.params();
        let report = finite_diff_check(
            |t| {
                let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let h = enc.encode(t, &vars)?;
                let stacked = t.stack(&h)?;
                let sq = t.tanh(stacked);
                Ok(t.sum(sq))
            },
            &mut store,
            &ids,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let store = ParamStore::new();
        let stack_in = vec![0.3, -1.2, 2.0, 0.7];
        let mut r = rng(13);
        let trials = 20_000;
        let mut total = [0.0; 4];
        for _ in 0..trials {
            let mut t = Tape::new(&store);
            let x = t.constant(Tensor::vector(stack_in.clone()));
            let y = t.dropout(x, 0.5, &mut r).unwrap();
            for (a, v) in total.iter_mut().zip(t.value(y)) {
                *a += v;
            }
        }
        for (a, x) in total.iter().zip(&stack_in) {
            let mean = a / trials as f64;
            assert!(((mean - x) / x).abs() < 0.02, "{mean} vs {x}");
        }
    }

    #[test]
    fn eval_mode_stack_is_deterministic_despite_dropout_rate() {
        let mut store = ParamStore::new();
        let stack = StackedRnn::new(
            &mut store,
            "lm",
            Group::Prior,
            CellKind::Vanilla,
            3,
            2,
            4,
            false,
            0.5,
            &mut rng(3),
        )
        .unwrap();
        let run = || {
            let mut t = Tape::frozen(&store);
            let init = stack.zero_state(&mut t);
            let x = t.constant(Tensor::vector(vec![1.0, -1.0]));
            let out = stack.run(&mut t, init, &[x, x, x], None).unwrap();
            t.value(out[2]).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mlp_zero_weights_output_zero() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", Group::Baseline, &[3, 4, 1], &mut rng(0)).unwrap();
        for id in mlp.params() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = mlp.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y), &[0.0]);
    }

    #[test]
    fn mlp_hand_computed_output() {
        // hidden = tanh([1, -1]·x + [0, 0.5]) with x = [0.5, 0.25]
        // out    = 2 * hidden0 - 1 * hidden1 + 0.1
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", Group::Baseline, &[2, 2, 1], &mut rng(0)).unwrap();
        let (w0, b0) = mlp.layers[0];
        let (w1, b1) = mlp.layers[1];
        store
            .get_mut(w0)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, -1.0]);
        store.get_mut(b0).data_mut().copy_from_slice(&[0.0, 0.5]);
        store.get_mut(w1).data_mut().copy_from_slice(&[2.0, -1.0]);
        store.get_mut(b1).data_mut().copy_from_slice(&[0.1]);
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::vector(vec![0.5, 0.25]));
        let y = mlp.forward(&mut t, x).unwrap();
        let expected = 2.0 * 0.5f64.tanh() - 0.25f64.tanh() + 0.1;
        assert!((t.scalar(y) - expected).abs() < 1e-15);
    }

    #[test]
    fn mlp_shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", Group::Baseline, &[3, 2, 1], &mut rng(0)).unwrap();
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::zeros(&[4]));
        assert!(mlp.forward(&mut t, x).is_err());
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = rng(17);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", Group::Baseline, &[4, 5, 1], &mut r).unwrap();
        for id in mlp.params() {
            let t = Tensor::uniform(store.get(id).shape(), 0.7, &mut r);
            *store.get_mut(id) = t;
        }
        let x = Tensor::uniform(&[4], 1.0, &mut r);
        let ids = mlp.params();
        let report = finite_diff_check(
            |t| {
                let xv = t.constant(x.clone());
                let y = mlp.forward(t, xv)?;
                Ok(t.square(y))
            },
            &mut store,
            &ids,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn embedding_out_of_range_is_error() {
        let mut store = ParamStore::new();
        let e = Embedding::new(&mut store, "e", Group::Compression, 4, 2, &mut rng(0));
        let mut t = Tape::new(&store);
        assert!(e.lookup(&mut t, 3).is_ok());
        assert!(e.lookup(&mut t, 4).is_err());
    }
}
