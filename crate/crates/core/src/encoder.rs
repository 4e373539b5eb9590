//! Sentence encoder: input embeddings plus a stacked bidirectional LSTM.
//!
//! Gate weights are stored input-major so each step is two matmuls and an
//! add: `pre = x W_x + h W_h + b` with the four gates stacked `[i f o g]`
//! along the columns.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{NodeId, Tape, Tensor};

/// Parameter names and dimensions for one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmDims {
    pub input: usize,
    pub hidden: usize,
}

/// Tape handles for one LSTM cell's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellNodes {
    /// input -> gates, `input x 4n`
    pub w_x: NodeId,
    /// hidden -> gates, `n x 4n`
    pub w_h: NodeId,
    /// gate bias, `1 x 4n`
    pub bias: NodeId,
    pub hidden: usize,
}

/// Fresh cell parameters: uniform init, forget-gate bias set to 1.
pub fn init_cell_params(dims: LstmDims, range: f64, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
    let w_x = Tensor::uniform(dims.input, 4 * dims.hidden, range, rng);
    let w_h = Tensor::uniform(dims.hidden, 4 * dims.hidden, range, rng);
    let mut bias = Tensor::uniform(1, 4 * dims.hidden, range, rng);
    for c in dims.hidden..2 * dims.hidden {
        bias.set(0, c, 1.0);
    }
    (w_x, w_h, bias)
}

/// One LSTM step. `x` is `1 x input`, `h_prev`/`c_prev` are `1 x n`.
pub fn lstm_step(
    tape: &mut Tape,
    cell: &LstmCellNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> (NodeId, NodeId) {
    let n = cell.hidden;
    let xw = tape.matmul(x, cell.w_x);
    let hw = tape.matmul(h_prev, cell.w_h);
    let pre = tape.add(xw, hw);
    let pre = tape.add(pre, cell.bias);

    let i_pre = tape.slice_cols(pre, 0, n);
    let f_pre = tape.slice_cols(pre, n, n);
    let o_pre = tape.slice_cols(pre, 2 * n, n);
    let g_pre = tape.slice_cols(pre, 3 * n, n);

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let o = tape.sigmoid(o_pre);
    let g = tape.tanh(g_pre);

    let fc = tape.mul(f, c_prev);
    let ig = tape.mul(i, g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    (h, c)
}

/// Run one direction over the rows of `inputs` (`N x input`), starting
/// from zero states. Returns the per-position hidden rows in sentence
/// order, plus the final hidden state of the run.
pub fn run_direction(
    tape: &mut Tape,
    cell: &LstmCellNodes,
    inputs: NodeId,
    reverse: bool,
) -> (Vec<NodeId>, NodeId) {
    let n_tokens = tape.value(inputs).rows();
    let mut h = tape.input(Tensor::zeros(1, cell.hidden));
    let mut c = tape.input(Tensor::zeros(1, cell.hidden));
    let mut rows: Vec<NodeId> = vec![h; n_tokens];
    let order: Vec<usize> = if reverse {
        (0..n_tokens).rev().collect()
    } else {
        (0..n_tokens).collect()
    };
    for t in order {
        let x = tape.slice_rows(inputs, t, 1);
        let (nh, nc) = lstm_step(tape, cell, x, h, c);
        h = nh;
        c = nc;
        rows[t] = h;
    }
    (rows, h)
}

/// Configuration of the stacked bidirectional encoder.
#[derive(Clone, Copy, Debug)]
pub struct BlstmConfig {
    pub layers: usize,
    pub input: usize,
    pub hidden: usize,
    pub dropout: f64,
}

/// Tape handles for the whole stack: `cells[layer] = (forward, backward)`.
pub struct BlstmNodes {
    pub cells: Vec<(LstmCellNodes, LstmCellNodes)>,
}

/// Whether a forward pass applies dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Map token ids to embedding rows and run the stack. Dropout hits the
/// non-recurrent connections only: the embedding output and each layer's
/// output except the last.
pub fn encode_tokens<R: Rng>(
    tape: &mut Tape,
    w_in: NodeId,
    stack: &BlstmNodes,
    cfg: &BlstmConfig,
    token_ids: &[usize],
    mode: Mode,
    rng: &mut R,
) -> NodeId {
    assert!(!token_ids.is_empty(), "cannot encode an empty sentence");
    let mut x = tape.gather_rows(w_in, token_ids);
    if mode == Mode::Train && cfg.dropout > 0.0 {
        x = tape.dropout(x, cfg.dropout, rng);
    }
    for (layer, (fwd, bwd)) in stack.cells.iter().enumerate() {
        let (f_rows, _) = run_direction(tape, fwd, x, false);
        let (b_rows, _) = run_direction(tape, bwd, x, true);
        let joined: Vec<NodeId> = f_rows
            .iter()
            .zip(&b_rows)
            .map(|(&f, &b)| tape.concat_cols(&[f, b]))
            .collect();
        x = tape.concat_rows(&joined);
        if layer + 1 < stack.cells.len() && mode == Mode::Train && cfg.dropout > 0.0 {
            x = tape.dropout(x, cfg.dropout, rng);
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;

    fn zero_cell(tape: &mut Tape, input: usize, hidden: usize) -> LstmCellNodes {
        LstmCellNodes {
            w_x: tape.input(Tensor::zeros(input, 4 * hidden)),
            w_h: tape.input(Tensor::zeros(hidden, 4 * hidden)),
            bias: tape.input(Tensor::zeros(1, 4 * hidden)),
            hidden,
        }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let mut tape = Tape::new();
        let cell = zero_cell(&mut tape, 3, 4);
        let x = tape.input(Tensor::row_vector(&[1.0, -2.0, 0.5]));
        let h0 = tape.input(Tensor::zeros(1, 4));
        let c0 = tape.input(Tensor::zeros(1, 4));
        let (h, c) = lstm_step(&mut tape, &cell, x, h0, c0);
        assert_eq!(tape.value(h).data(), &[0.0; 4]);
        assert_eq!(tape.value(c).data(), &[0.0; 4]);
    }

    #[test]
    fn step_output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let (w_x, w_h, bias) = init_cell_params(LstmDims { input: 3, hidden: 5 }, 0.2, &mut rng);
        let cell = LstmCellNodes {
            w_x: tape.input(w_x),
            w_h: tape.input(w_h),
            bias: tape.input(bias),
            hidden: 5,
        };
        let x = tape.input(Tensor::row_vector(&[0.1, 0.2, 0.3]));
        let h0 = tape.input(Tensor::zeros(1, 5));
        let c0 = tape.input(Tensor::zeros(1, 5));
        let (h, c) = lstm_step(&mut tape, &cell, x, h0, c0);
        assert_eq!(tape.value(h).shape(), (1, 5));
        assert_eq!(tape.value(c).shape(), (1, 5));
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w_x, w_h, bias) = init_cell_params(LstmDims { input: 3, hidden: 4 }, 0.3, &mut rng);
        let x = Tensor::uniform(1, 3, 0.5, &mut rng);
        let err = grad_check(
            |tape, ids| {
                let cell = LstmCellNodes {
                    w_x: ids[0],
                    w_h: ids[1],
                    bias: ids[2],
                    hidden: 4,
                };
                let h0 = tape.input(Tensor::zeros(1, 4));
                let c0 = tape.input(Tensor::zeros(1, 4));
                let (h1, c1) = lstm_step(tape, &cell, ids[3], h0, c0);
                let (h2, _) = lstm_step(tape, &cell, ids[3], h1, c1);
                tape.sum_all(h2)
            },
            &[w_x, w_h, bias, x],
            1e-5,
        );
        assert!(err <= 1e-6, "lstm grad error {err}");
    }

    fn build_stack(
        tape: &mut Tape,
        cfg: &BlstmConfig,
        rng: &mut ChaCha8Rng,
    ) -> (NodeId, BlstmNodes, Vec<Tensor>) {
        let vocab = 7;
        let w_in_val = Tensor::uniform(vocab, cfg.input, 0.2, rng);
        let w_in = tape.param(w_in_val.clone());
        let mut cells = Vec::new();
        let mut tensors = vec![w_in_val];
        for layer in 0..cfg.layers {
            let input = if layer == 0 { cfg.input } else { 2 * cfg.hidden };
            let mut pair = Vec::new();
            for _ in 0..2 {
                let (w_x, w_h, bias) =
                    init_cell_params(LstmDims { input, hidden: cfg.hidden }, 0.2, rng);
                tensors.extend([w_x.clone(), w_h.clone(), bias.clone()]);
                pair.push(LstmCellNodes {
                    w_x: tape.param(w_x),
                    w_h: tape.param(w_h),
                    bias: tape.param(bias),
                    hidden: cfg.hidden,
                });
            }
            cells.push((pair[0], pair[1]));
        }
        (w_in, BlstmNodes { cells }, tensors)
    }

    #[test]
    fn encode_shape_is_n_by_2n() {
        let cfg = BlstmConfig { layers: 2, input: 4, hidden: 3, dropout: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 2, 5] {
            let mut tape = Tape::new();
            let (w_in, stack, _) = build_stack(&mut tape, &cfg, &mut rng);
            let ids: Vec<usize> = (0..n).map(|i| i % 7).collect();
            let h = encode_tokens(&mut tape, w_in, &stack, &cfg, &ids, Mode::Eval, &mut rng);
            assert_eq!(tape.value(h).shape(), (n, 6));
        }
    }

    #[test]
    fn tied_cells_swap_halves_under_reversal() {
        // with forward and backward cells sharing weights, reversing the
        // sentence mirrors positions and swaps the direction halves
        let cfg = BlstmConfig { layers: 1, input: 4, hidden: 3, dropout: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let w_in = tape.input(Tensor::uniform(7, 4, 0.3, &mut rng));
        let (w_x, w_h, bias) = init_cell_params(LstmDims { input: 4, hidden: 3 }, 0.3, &mut rng);
        let cell = LstmCellNodes {
            w_x: tape.input(w_x),
            w_h: tape.input(w_h),
            bias: tape.input(bias),
            hidden: 3,
        };
        let stack = BlstmNodes { cells: vec![(cell, cell)] };

        let ids = [1usize, 4, 2, 6];
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let h = encode_tokens(&mut tape, w_in, &stack, &cfg, &ids, Mode::Eval, &mut rng);
        let h_rev = encode_tokens(&mut tape, w_in, &stack, &cfg, &rev, Mode::Eval, &mut rng);
        let (ht, hr) = (tape.value(h).clone(), tape.value(h_rev).clone());
        let n = ids.len();
        for i in 0..n {
            let mirrored = n - 1 - i;
            for c in 0..3 {
                assert!((ht.get(i, c) - hr.get(mirrored, c + 3)).abs() < 1e-12);
                assert!((ht.get(i, c + 3) - hr.get(mirrored, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_changes_training_output_only() {
        let cfg = BlstmConfig { layers: 2, input: 4, hidden: 3, dropout: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let (w_in, stack, _) = build_stack(&mut tape, &cfg, &mut rng);
        let ids = [1usize, 2, 3];
        let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
        let train = encode_tokens(&mut tape, w_in, &stack, &cfg, &ids, Mode::Train, &mut drop_rng);
        let eval1 = encode_tokens(&mut tape, w_in, &stack, &cfg, &ids, Mode::Eval, &mut drop_rng);
        let eval2 = encode_tokens(&mut tape, w_in, &stack, &cfg, &ids, Mode::Eval, &mut drop_rng);
        assert_ne!(tape.value(train).data(), tape.value(eval1).data());
        assert_eq!(tape.value(eval1).data(), tape.value(eval2).data());
    }

    #[test]
    fn full_encoder_gradient_check() {
        let cfg = BlstmConfig { layers: 2, input: 4, hidden: 5, dropout: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // materialize parameter tensors once, then rebuild the graph per eval
        let mut init_tape = Tape::new();
        let (_, _, tensors) = build_stack(&mut init_tape, &cfg, &mut rng);
        let ids = [1usize, 3, 5, 2];
        let err = grad_check(
            |tape, nids| {
                let w_in = nids[0];
                let mut cells = Vec::new();
                for layer in 0..2 {
                    let base = 1 + layer * 6;
                    let mk = |k: usize| LstmCellNodes {
                        w_x: nids[base + k * 3],
                        w_h: nids[base + k * 3 + 1],
                        bias: nids[base + k * 3 + 2],
                        hidden: 5,
                    };
                    cells.push((mk(0), mk(1)));
                }
                let stack = BlstmNodes { cells };
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let h = encode_tokens(tape, w_in, &stack, &cfg, &ids, Mode::Eval, &mut rng);
                let sq = tape.mul(h, h);
                tape.sum_all(sq)
            },
            &tensors,
            1e-5,
        );
        assert!(err <= 1e-4, "encoder grad error {err}");
    }
}
