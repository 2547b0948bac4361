//! Convolutional LSTM integrating the features of successive event chunks.

use ehdr_tensor::{Bindings, Scalar, Tape, Tensor, Var};

use super::layers::{Builder, Conv};
use crate::error::{EhdrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// Gates `i, f, o, g` come from one convolution over `[input, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstm {
    gates: Conv,
    channels: usize,
}

impl ConvLstm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        Self {
            gates: b.conv(name, 0, 2 * channels, 4 * channels, 1),
            channels,
        }
    }

    pub fn gates_conv(&self) -> Conv {
        self.gates
    }

    /// Zero hidden and cell state matching `like`.
    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, like: Var) -> ConvLstmState {
        let shape = tape.shape(like).to_vec();
        ConvLstmState {
            hidden: tape.constant(Tensor::zeros(&shape)),
            cell: tape.constant(Tensor::zeros(&shape)),
        }
    }

    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var, s: ConvLstmState) -> Result<ConvLstmState> {
        let c = self.channels;
        let joint = tape.concat(&[x, s.hidden])?;
        let gates = self.gates.apply(tape, p, joint)?;
        let gate = |tape: &mut Tape<T>, k: usize| tape.slice_channels(gates, k * c, c);
        let (i, f, o, g) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
        let (i, f, o, g) = (tape.sigmoid(i)?, tape.sigmoid(f)?, tape.sigmoid(o)?, tape.tanh(g)?);
        let keep = tape.mul(f, s.cell)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell)?;
        let hidden = tape.mul(o, squashed)?;
        Ok(ConvLstmState { hidden, cell })
    }

    /// Runs the recurrence over `inputs` from a zero state and returns the final hidden state.
    pub fn integrate<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| EhdrError::input("ConvLSTM needs at least one input"))?;
        let mut state = self.zero_state(tape, first);
        for &x in inputs {
            state = self.step(tape, p, x, state)?;
        }
        Ok(state.hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ehdr_tensor::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lstm(c: usize) -> (ParamStore<f64>, ConvLstm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = ConvLstm::new(&mut Builder { store: &mut store, rng: &mut rng }, "lstm", c);
        (store, l)
    }

    #[test]
    fn zero_parameters_keep_hidden_at_zero() {
        let (mut store, l) = lstm(3);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).value.shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs: Vec<Var> = (0..3)
            .map(|k| tape.constant(Tensor::full(&[2, 3, 4, 4], k as f64 + 0.5)))
            .collect();
        let h = l.integrate(&mut tape, &p, &xs).unwrap();
        assert_eq!(tape.shape(h), [2, 3, 4, 4]);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_state_is_bounded() {
        let (store, l) = lstm(2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs: Vec<Var> = (0..5)
            .map(|k| tape.constant(Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64 - 20.0) * (k as f64 + 1.0))))
            .collect();
        let h = l.integrate(&mut tape, &p, &xs).unwrap();
        assert!(tape.value(h).data().iter().all(|v| v.abs() < 1.0));
        assert!(l.integrate(&mut tape, &p, &[]).is_err());
    }
}
