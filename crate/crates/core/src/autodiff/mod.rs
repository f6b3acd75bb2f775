//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for every training step; leaves created with
//! [`Tape::param`] collect gradients, everything else is derived from them
//! or is constant. Only scalar-with-tensor broadcasting is supported.

mod tape;
mod tensor;

pub use tape::{softmax_in_place, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// `a·b / (max(‖a‖, eps) · max(‖b‖, eps))` for two equal-length vectors.
pub fn cosine_similarity(tape: &mut Tape, a: Var, b: Var, eps: f64) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.shape().len() != 1 || av.shape() != bv.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        });
    }
    warn_if_degenerate(av.data(), eps);
    warn_if_degenerate(bv.data(), eps);
    let na = tape.normalize_rows(a, eps)?;
    let nb = tape.normalize_rows(b, eps)?;
    let prod = tape.mul(na, nb)?;
    tape.sum(prod)
}

fn warn_if_degenerate(v: &[f64], eps: f64) {
    if v.iter().map(|x| x * x).sum::<f64>().sqrt() <= eps {
        log::warn!("cosine similarity of a (near-)zero vector; result clamped to 0");
    }
}

/// Pairwise cosine similarities between the rows of `a[p×d]` and `b[q×d]`.
pub fn cosine_matrix(tape: &mut Tape, a: Var, b: Var, eps: f64) -> Result<Var> {
    let na = tape.normalize_rows(a, eps)?;
    let nb = tape.normalize_rows(b, eps)?;
    let nbt = tape.transpose(nb)?;
    tape.matmul(na, nbt)
}

/// Temperature softmax of a vector.
pub fn softmax(tape: &mut Tape, v: Var, temperature: f64) -> Result<Var> {
    tape.softmax_rows(v, temperature)
}

/// `KL(p ‖ q)` between two probability vectors.
///
/// Both inputs must sum to one within `1e-9` with non-negative entries.
pub fn kl_divergence(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    for v in [p, q] {
        let t = tape.value(v);
        if t.shape().len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "kl_divergence expects vectors, got shape {:?}",
                t.shape()
            )));
        }
        let total: f64 = t.data().iter().sum();
        if (total - 1.0).abs() > 1e-9 || t.data().iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kl_divergence input is not a probability vector (sum {total})"
            )));
        }
    }
    tape.kl_rows(p, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
        tape.param(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
        assert!(matches!(tape.matmul(b, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[-1.0, 0.0, 2.0]);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let one = vec_var(&mut tape, &[1.0]);
        let l = tape.log(one).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        assert!(matches!(tape.log(r), Err(Error::LogDomain { .. })));

        let y = vec_var(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.add(x, y), Err(Error::ShapeMismatch { .. })));
        let s = tape.scalar_constant(10.0).unwrap();
        let shifted = tape.add(x, s).unwrap();
        assert_eq!(tape.value(shifted).data(), &[9.0, 10.0, 12.0]);
        let flipped = tape.sub(s, x).unwrap();
        assert_eq!(tape.value(flipped).data(), &[11.0, 10.0, 8.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[-1.0, 0.0, 2.0]);
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cosine_examples() {
        let cases = [
            ([1.0, 0.0], [1.0, 0.0], 1.0),
            ([1.0, 0.0], [0.0, 1.0], 0.0),
            ([1.0, 1.0], [1.0, 0.0], 0.7071067811865475),
        ];
        for (a, b, want) in cases {
            let mut tape = Tape::new();
            let (a, b) = (vec_var(&mut tape, &a), vec_var(&mut tape, &b));
            let c = cosine_similarity(&mut tape, a, b, COSINE_EPS).unwrap();
            assert!((tape.value(c).item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[0.0, 0.0]);
        let b = vec_var(&mut tape, &[1.0, 2.0]);
        let c = cosine_similarity(&mut tape, a, b, COSINE_EPS).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let v = vec_var(&mut tape, &[0.7, 0.7, 0.7]);
        let s = softmax(&mut tape, v, 3.0).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let v = vec_var(&mut tape, &[0.0, 3f64.ln()]);
        let s = softmax(&mut tape, v, 1.0).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        let v = vec_var(&mut tape, &[1.0, 2.0]);
        let s = softmax(&mut tape, v, 1e6).unwrap();
        assert!(tape.value(s).data().iter().all(|p| (p - 0.5).abs() < 1e-6));

        assert!(softmax(&mut tape, v, 0.0).is_err());
        assert!(softmax(&mut tape, v, -1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::new();
        let p = vec_var(&mut tape, &[0.5, 0.5]);
        let k = kl_divergence(&mut tape, p, p).unwrap();
        assert_eq!(tape.value(k).item(), 0.0);

        let p = vec_var(&mut tape, &[1.0, 0.0]);
        let q = vec_var(&mut tape, &[0.5, 0.5]);
        let k = kl_divergence(&mut tape, p, q).unwrap();
        assert!((tape.value(k).item() - std::f64::consts::LN_2).abs() < 1e-15);

        // q = 0 where p > 0 must not be clamped.
        let k = kl_divergence(&mut tape, q, p);
        assert!(matches!(k, Err(Error::InfiniteDivergence { index: 1, .. })));

        let bad = vec_var(&mut tape, &[0.7, 0.7]);
        assert!(kl_divergence(&mut tape, bad, q).is_err());
    }

    #[test]
    fn backward_of_sum_and_accumulation() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0, 3.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0]);
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let d = tape.detach(x);
        let m = tape.mul(x, c).unwrap();
        let m = tape.mul(m, d).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(d).is_none());
        // d/dx (x * c * stop(x)) = c * x
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 8.0]);
    }
}
