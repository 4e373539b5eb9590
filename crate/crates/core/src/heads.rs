//! Output layers: emission scoring through the label matrix, softmax and
//! CRF negative log-likelihoods, scalar and bilinear transitions, Viterbi
//! decoding, and the exhaustive enumeration oracle used to verify them.
//!
//! Transition matrices are `(|T|+1) x |T|`: row `|T|` holds the start
//! transitions and there is no end transition.

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

/// Emission scores `Z` (`N x |T|`).
///
/// * OneHot path: `Z = H W_o^T`, optionally restricted to the columns in
///   `col_select` (out-of-selection tags receive no score and exactly
///   zero gradient).
/// * Knowledge path: `Z = (H C^T) B_d` with `B_d` the `K x |T|` label
///   matrix node.
pub fn emission_scores(
    tape: &mut Tape,
    h: NodeId,
    proj: NodeId,
    label_matrix: Option<NodeId>,
    col_select: Option<&[usize]>,
) -> NodeId {
    let proj_t = tape.transpose(proj);
    let scores = tape.matmul(h, proj_t);
    let z = match label_matrix {
        Some(b) => tape.matmul(scores, b),
        None => scores,
    };
    match col_select {
        Some(indices) => tape.gather_cols(z, indices),
        None => z,
    }
}

/// Position-factorized negative log-likelihood:
/// `-sum_i log softmax(z_i)[t_i]`.
pub fn softmax_nll(tape: &mut Tape, z: NodeId, gold: &[usize]) -> NodeId {
    assert_eq!(
        tape.value(z).rows(),
        gold.len(),
        "softmax_nll: {} rows vs {} gold tags",
        tape.value(z).rows(),
        gold.len()
    );
    let log_probs = tape.log_softmax_rows(z);
    let positions: Vec<(usize, usize)> = gold.iter().copied().enumerate().collect();
    let picked = tape.select_sum(log_probs, &positions);
    tape.scale(picked, -1.0)
}

/// CRF log partition by the forward recursion in log space.
pub fn crf_log_partition(tape: &mut Tape, z: NodeId, a: NodeId) -> NodeId {
    let n_tags = tape.value(z).cols();
    let n_tokens = tape.value(z).rows();
    assert_eq!(
        tape.value(a).shape(),
        (n_tags + 1, n_tags),
        "transition matrix must be (|T|+1) x |T|, got {:?}",
        tape.value(a).shape()
    );
    let start = tape.slice_rows(a, n_tags, 1);
    let z0 = tape.slice_rows(z, 0, 1);
    let mut alpha = tape.add(z0, start);
    if n_tokens > 1 {
        let body = tape.slice_rows(a, 0, n_tags);
        for i in 1..n_tokens {
            let alpha_col = tape.transpose(alpha);
            let scores = tape.add_col_broadcast(body, alpha_col); // [t', t]
            let by_dest = tape.transpose(scores);
            let combined = tape.logsumexp_rows(by_dest); // |T| x 1
            let combined_row = tape.transpose(combined);
            let zi = tape.slice_rows(z, i, 1);
            alpha = tape.add(combined_row, zi);
        }
    }
    let lse = tape.logsumexp_rows(alpha);
    // already 1 x 1
    lse
}

/// Path score `psi`: transition (with the start row at position 1) plus
/// emission for every step.
pub fn crf_path_score(tape: &mut Tape, z: NodeId, a: NodeId, gold: &[usize]) -> NodeId {
    let n_tags = tape.value(z).cols();
    let emit_pos: Vec<(usize, usize)> = gold.iter().copied().enumerate().collect();
    let mut trans_pos: Vec<(usize, usize)> = vec![(n_tags, gold[0])];
    for i in 1..gold.len() {
        trans_pos.push((gold[i - 1], gold[i]));
    }
    let emit = tape.select_sum(z, &emit_pos);
    let trans = tape.select_sum(a, &trans_pos);
    tape.add(emit, trans)
}

/// Sentence-level CRF negative log-likelihood:
/// `log Z(w) - psi(w, t)`.
pub fn crf_nll(tape: &mut Tape, z: NodeId, a: NodeId, gold: &[usize]) -> NodeId {
    assert_eq!(
        tape.value(z).rows(),
        gold.len(),
        "crf_nll: {} rows vs {} gold tags",
        tape.value(z).rows(),
        gold.len()
    );
    let log_z = crf_log_partition(tape, z, a);
    let psi = crf_path_score(tape, z, a, gold);
    tape.sub(log_z, psi)
}

/// Value-level convenience wrapper for [`crf_log_partition`].
pub fn crf_log_partition_value(z: &Tensor, a: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let zn = tape.input(z.clone());
    let an = tape.input(a.clone());
    let lp = crf_log_partition(&mut tape, zn, an);
    tape.value(lp).item()
}

/// Max-score tag path. Ties resolve to the lowest tag index (the decoded
/// path is lexicographically smallest read from the last position
/// backwards). The returned score is `psi` recomputed along the path.
pub fn viterbi(z: &Tensor, a: &Tensor) -> (Vec<usize>, f64) {
    let n_tokens = z.rows();
    let n_tags = z.cols();
    assert_eq!(
        a.shape(),
        (n_tags + 1, n_tags),
        "transition matrix must be (|T|+1) x |T|, got {:?}",
        a.shape()
    );
    let mut delta = vec![0.0f64; n_tags];
    for t in 0..n_tags {
        delta[t] = z.get(0, t) + a.get(n_tags, t);
    }
    let mut backptr = vec![vec![0usize; n_tags]; n_tokens];
    for i in 1..n_tokens {
        let mut next = vec![f64::NEG_INFINITY; n_tags];
        for t in 0..n_tags {
            let mut best = f64::NEG_INFINITY;
            let mut best_prev = 0;
            for (prev, &d) in delta.iter().enumerate() {
                let s = d + a.get(prev, t);
                if s > best {
                    best = s;
                    best_prev = prev;
                }
            }
            next[t] = best + z.get(i, t);
            backptr[i][t] = best_prev;
        }
        delta = next;
    }
    let mut last = 0;
    let mut best = f64::NEG_INFINITY;
    for (t, &d) in delta.iter().enumerate() {
        if d > best {
            best = d;
            last = t;
        }
    }
    let mut path = vec![0usize; n_tokens];
    path[n_tokens - 1] = last;
    for i in (1..n_tokens).rev() {
        path[i - 1] = backptr[i][path[i]];
    }
    let score = path_score(z, a, &path);
    (path, score)
}

/// Per-position argmax (softmax-head decoding); ties to the lowest index.
pub fn argmax_decode(z: &Tensor) -> Vec<usize> {
    (0..z.rows())
        .map(|i| {
            let row = z.row(i);
            let mut best = 0;
            for (t, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = t;
                }
            }
            best
        })
        .collect()
}

fn path_score(z: &Tensor, a: &Tensor, path: &[usize]) -> f64 {
    let n_tags = z.cols();
    let mut score = 0.0;
    let mut prev = n_tags; // start row
    for (i, &t) in path.iter().enumerate() {
        score += a.get(prev, t) + z.get(i, t);
        prev = t;
    }
    score
}

/// Bilinear transitions from label embeddings:
/// `A[j, k] = emb(t_j)^T W_a emb(t_k)`, with a learned start embedding
/// providing the extra start row. `b` is `K x |T|`, `w_a` is `K x K`,
/// `start` is `1 x K`.
pub fn bilinear_transitions(tape: &mut Tape, b: NodeId, w_a: NodeId, start: NodeId) -> NodeId {
    let k = tape.value(b).rows();
    assert_eq!(
        tape.value(w_a).shape(),
        (k, k),
        "w_a must be {k} x {k}, got {:?}",
        tape.value(w_a).shape()
    );
    let bt = tape.transpose(b);
    let wb = tape.matmul(w_a, b); // K x |T|
    let body = tape.matmul(bt, wb); // |T| x |T|
    let sw = tape.matmul(start, w_a); // 1 x K
    let start_row = tape.matmul(sw, b); // 1 x |T|
    tape.concat_rows(&[body, start_row])
}

/// Exhaustive enumeration over all `|T|^N` tag sequences: exact log
/// partition and the argmax path under the same tie-break as [`viterbi`]
/// (among max-score paths, lexicographically smallest read from the end).
pub fn brute_force_oracle(z: &Tensor, a: &Tensor) -> Result<(f64, Vec<usize>)> {
    let n_tokens = z.rows();
    let n_tags = z.cols();
    assert_eq!(a.shape(), (n_tags + 1, n_tags), "transition shape mismatch");
    let total = (n_tags as f64).powi(n_tokens as i32);
    if total > 1e6 {
        return Err(Error::Invalid(format!(
            "brute force instance too large: {n_tags}^{n_tokens} paths"
        )));
    }

    let reversed_lex_smaller = |a: &[usize], b: &[usize]| -> bool {
        for (x, y) in a.iter().rev().zip(b.iter().rev()) {
            if x != y {
                return x < y;
            }
        }
        false
    };

    let mut path = vec![0usize; n_tokens];
    let mut scores: Vec<f64> = Vec::with_capacity(total as usize);
    let mut best_path = path.clone();
    let mut best_score = f64::NEG_INFINITY;
    loop {
        let s = path_score(z, a, &path);
        scores.push(s);
        if s > best_score || (s == best_score && reversed_lex_smaller(&path, &best_path)) {
            best_score = s;
            best_path = path.clone();
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == n_tokens {
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_partition =
                    m + scores.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                return Ok((log_partition, best_path));
            }
            path[pos] += 1;
            if path[pos] < n_tags {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n_tokens: usize, n_tags: usize) -> (Tensor, Tensor) {
        (
            Tensor::uniform(n_tokens, n_tags, 2.0, rng),
            Tensor::uniform(n_tags + 1, n_tags, 2.0, rng),
        )
    }

    #[test]
    fn emission_identity_label_matrix_reduces_to_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h_val = Tensor::uniform(4, 6, 1.0, &mut rng);
        let c_val = Tensor::uniform(5, 6, 1.0, &mut rng);
        let mut tape = Tape::new();
        let h = tape.input(h_val);
        let c = tape.input(c_val.clone());
        let w_o = tape.input(c_val);
        let identity = tape.input(Tensor::identity(5));
        let z_knowledge = emission_scores(&mut tape, h, c, Some(identity), None);
        let z_onehot = emission_scores(&mut tape, h, w_o, None, None);
        let (zk, zo) = (tape.value(z_knowledge), tape.value(z_onehot));
        assert_eq!(zk.data(), zo.data(), "identity B must reproduce the one-hot path");
    }

    #[test]
    fn emission_rank_bounded_by_embedding_len() {
        // with K < min(|T|, 2n), emissions live in a K-dimensional subspace
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = 3;
        let c_val = Tensor::uniform(k, 8, 1.0, &mut rng);
        let b_val = Tensor::uniform(k, 6, 1.0, &mut rng);
        let h_val = Tensor::uniform(20, 8, 1.0, &mut rng);
        let mut tape = Tape::new();
        let h = tape.input(h_val);
        let c = tape.input(c_val);
        let b = tape.input(b_val);
        let z = emission_scores(&mut tape, h, c, Some(b), None);
        assert_eq!(numeric_rank(tape.value(z)), k);
    }

    fn numeric_rank(m: &Tensor) -> usize {
        // Gaussian elimination with partial pivoting
        let mut a: Vec<Vec<f64>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
        let (rows, cols) = (m.rows(), m.cols());
        let mut rank = 0;
        for col in 0..cols {
            if rank >= rows {
                break;
            }
            let pivot = (rank..rows).max_by(|&i, &j| {
                a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
            });
            let Some(p) = pivot else { break };
            if a[p][col].abs() < 1e-9 {
                continue;
            }
            a.swap(rank, p);
            let pivot_val = a[rank][col];
            for i in 0..rows {
                if i != rank {
                    let f = a[i][col] / pivot_val;
                    for j in col..cols {
                        a[i][j] -= f * a[rank][j];
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn softmax_nll_uniform() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros(2, 4));
        let loss = softmax_nll(&mut tape, z, &[0, 3]);
        assert_abs_diff_eq!(tape.value(loss).item(), 2.0 * 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn softmax_nll_large_margin_vanishes() {
        let mut tape = Tape::new();
        let mut z_val = Tensor::zeros(1, 3);
        z_val.set(0, 1, 20.0);
        let z = tape.input(z_val);
        let loss = softmax_nll(&mut tape, z, &[1]);
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn softmax_nll_matches_brute_force_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z_val = Tensor::uniform(3, 3, 2.0, &mut rng);
        let gold = [2usize, 0, 1];
        // direct evaluation of -log prod_i softmax(z_i)[t_i]
        let mut expect = 0.0;
        for (i, &g) in gold.iter().enumerate() {
            let row = z_val.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expect -= row[g] - lse;
        }
        let mut tape = Tape::new();
        let z = tape.input(z_val);
        let loss = softmax_nll(&mut tape, z, &gold);
        assert_abs_diff_eq!(tape.value(loss).item(), expect, epsilon = 1e-10);
    }

    #[test]
    fn log_partition_single_token_two_tags() {
        let z = Tensor::zeros(1, 2);
        let a = Tensor::zeros(3, 2);
        assert_abs_diff_eq!(crf_log_partition_value(&z, &a), 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn log_partition_two_tokens_all_zero() {
        let z = Tensor::zeros(2, 2);
        let a = Tensor::zeros(3, 2);
        assert_abs_diff_eq!(crf_log_partition_value(&z, &a), 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn log_partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (z, a) = random_instance(&mut rng, 4, 5);
        let (oracle, _) = brute_force_oracle(&z, &a).unwrap();
        assert_abs_diff_eq!(crf_log_partition_value(&z, &a), oracle, epsilon = 1e-8);
    }

    #[test]
    fn crf_nll_degenerate_single_tag() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::uniform(4, 1, 2.0, &mut rng);
        let a = Tensor::uniform(2, 1, 2.0, &mut rng);
        let mut tape = Tape::new();
        let zn = tape.input(z);
        let an = tape.input(a);
        let loss = crf_nll(&mut tape, zn, an, &[0, 0, 0, 0]);
        assert_abs_diff_eq!(tape.value(loss).item(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn crf_nll_all_zero_scores() {
        let z = Tensor::zeros(3, 4);
        let a = Tensor::zeros(5, 4);
        let mut tape = Tape::new();
        let zn = tape.input(z);
        let an = tape.input(a);
        let loss = crf_nll(&mut tape, zn, an, &[1, 2, 0]);
        assert_abs_diff_eq!(tape.value(loss).item(), 3.0 * 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn crf_nll_matches_brute_force_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (z, a) = random_instance(&mut rng, 3, 4);
        let gold = [2usize, 1, 3];
        let (log_partition, _) = brute_force_oracle(&z, &a).unwrap();
        let mut tape = Tape::new();
        let zn = tape.input(z.clone());
        let an = tape.input(a.clone());
        let loss = crf_nll(&mut tape, zn, an, &gold);
        let psi = {
            let mut s = a.get(4, gold[0]) + z.get(0, gold[0]);
            for i in 1..3 {
                s += a.get(gold[i - 1], gold[i]) + z.get(i, gold[i]);
            }
            s
        };
        assert_abs_diff_eq!(tape.value(loss).item(), log_partition - psi, epsilon = 1e-8);
    }

    #[test]
    fn viterbi_single_tag() {
        let z = Tensor::zeros(3, 1);
        let a = Tensor::zeros(2, 1);
        let (path, _) = viterbi(&z, &a);
        assert_eq!(path, vec![0, 0, 0]);
    }

    #[test]
    fn viterbi_diag_dominant_follows_argmax() {
        let mut z = Tensor::zeros(3, 3);
        z.set(0, 2, 5.0);
        z.set(1, 0, 5.0);
        z.set(2, 1, 5.0);
        let a = Tensor::zeros(4, 3);
        let (path, score) = viterbi(&z, &a);
        assert_eq!(path, vec![2, 0, 1]);
        assert_abs_diff_eq!(score, 15.0, epsilon = 1e-12);
    }

    #[test]
    fn viterbi_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let (z, a) = random_instance(&mut rng, 5, 4);
            let (_, oracle_path) = brute_force_oracle(&z, &a).unwrap();
            let (path, score) = viterbi(&z, &a);
            assert_eq!(path, oracle_path);
            assert_abs_diff_eq!(score, path_score(&z, &a, &oracle_path), epsilon = 1e-9);
        }
    }

    #[test]
    fn viterbi_row_shift_leaves_path_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (z, a) = random_instance(&mut rng, 4, 4);
        let (base_path, _) = viterbi(&z, &a);
        let base_lp = crf_log_partition_value(&z, &a);
        let mut shifted = z.clone();
        let c = 3.25;
        for t in 0..shifted.cols() {
            let v = shifted.get(2, t);
            shifted.set(2, t, v + c);
        }
        let (path, _) = viterbi(&shifted, &a);
        assert_eq!(path, base_path);
        assert_abs_diff_eq!(crf_log_partition_value(&shifted, &a), base_lp + c, epsilon = 1e-9);
    }

    #[test]
    fn bilinear_zero_weight_gives_zero_transitions() {
        let mut tape = Tape::new();
        let b = tape.input(Tensor::identity(3));
        let w_a = tape.input(Tensor::zeros(3, 3));
        let start = tape.input(Tensor::zeros(1, 3));
        let a = bilinear_transitions(&mut tape, b, w_a, start);
        assert_eq!(tape.value(a).shape(), (4, 3));
        assert!(tape.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_identity_orthonormal_is_gram() {
        let mut tape = Tape::new();
        let b = tape.input(Tensor::identity(3));
        let w_a = tape.input(Tensor::identity(3));
        let start = tape.input(Tensor::zeros(1, 3));
        let a = bilinear_transitions(&mut tape, b, w_a, start);
        let body = tape.value(a);
        for j in 0..3 {
            for k in 0..3 {
                let want = if j == k { 1.0 } else { 0.0 };
                assert_eq!(body.get(j, k), want);
            }
        }
    }

    #[test]
    fn oracle_single_token_reduces_to_logsumexp() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (z, a) = random_instance(&mut rng, 1, 5);
        let (lp, _) = brute_force_oracle(&z, &a).unwrap();
        let scores: Vec<f64> = (0..5).map(|t| z.get(0, t) + a.get(5, t)).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want = m + scores.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(lp, want, epsilon = 1e-12);
    }

    #[test]
    fn oracle_rejects_huge_instances() {
        let z = Tensor::zeros(30, 6);
        let a = Tensor::zeros(7, 6);
        assert!(brute_force_oracle(&z, &a).is_err());
    }

    #[test]
    fn log_partition_upper_bounds_any_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (z, a) = random_instance(&mut rng, 4, 4);
        let lp = crf_log_partition_value(&z, &a);
        let (_, best) = viterbi(&z, &a);
        assert!(lp >= best - 1e-12);
    }

    #[test]
    fn crf_gradients_match_finite_differences() {
        use crate::numerics::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::uniform(3, 4, 1.0, &mut rng);
        let a = Tensor::uniform(5, 4, 1.0, &mut rng);
        let err = grad_check(
            |tape, ids| crf_nll(tape, ids[0], ids[1], &[1, 3, 0]),
            &[z, a],
            1e-5,
        );
        assert!(err <= 1e-6, "crf grad error {err}");
    }
}
