use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Compare analytic gradients against central finite differences.
///
/// `f` must rebuild the same deterministic computation on any tape it is
/// given (no dropout). Returns the worst relative error
/// `|a - n| / max(1, |a|, |n|)` over every coordinate of every parameter.
pub fn grad_check<F>(mut f: F, params: &[Tensor], h: f64) -> f64
where
    F: FnMut(&mut Tape, &[NodeId]) -> NodeId,
{
    assert!(h > 0.0, "step must be positive");

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &ids);
    let grads = tape
        .backward(loss)
        .expect("grad_check loss must be scalar");
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.get(id)).collect();

    let eval = |theta: &[Tensor], f: &mut F| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = theta.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &ids);
        tape.value(loss).item()
    };

    let mut worst = 0.0_f64;
    let mut theta: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        for k in 0..params[pi].len() {
            let orig = theta[pi].data()[k];
            theta[pi].data_mut()[k] = orig + h;
            let plus = eval(&theta, &mut f);
            theta[pi].data_mut()[k] = orig - h;
            let minus = eval(&theta, &mut f);
            theta[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let params = vec![Tensor::row_vector(&[0.3, -1.2, 2.0])];
        let err = grad_check(
            |tape, ids| {
                let w = tape.input(Tensor::from_vec(3, 1, vec![1.0, -2.0, 0.5]));
                let y = tape.matmul(ids[0], w);
                tape.sum_all(y)
            },
            &params,
            1e-5,
        );
        assert!(err <= 1e-10, "linear grad_check error {err}");
    }

    #[test]
    fn disconnected_parameter_has_matching_zeros() {
        let params = vec![
            Tensor::row_vector(&[0.5, 0.5]),
            Tensor::row_vector(&[9.0, 9.0]),
        ];
        let err = grad_check(|tape, ids| tape.sum_all(ids[0]), &params, 1e-5);
        assert!(err <= 1e-10, "disconnected grad_check error {err}");
    }

    #[test]
    fn two_layer_network_matches() {
        use rand_chacha::rand_core::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            Tensor::uniform(4, 3, 0.5, &mut rng),
            Tensor::uniform(3, 2, 0.5, &mut rng),
            Tensor::uniform(1, 4, 0.5, &mut rng),
        ];
        let err = grad_check(
            |tape, ids| {
                let h = tape.matmul(ids[2], ids[0]);
                let h = tape.tanh(h);
                let o = tape.matmul(h, ids[1]);
                let o = tape.sigmoid(o);
                tape.sum_all(o)
            },
            &params,
            1e-5,
        );
        assert!(err <= 1e-6, "network grad_check error {err}");
    }
}
