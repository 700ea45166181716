//! A toy feed-forward expert and the weighted MoE combine, enough to push a
//! token through a routing decision end to end.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::routing::{RoutingDecision, TokenEmbedding};

/// Two-layer MLP `d -> d_ff -> d` with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    w_in: Array2<f64>,
    b_in: Array1<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
}

impl ExpertParams {
    /// `w_in` is `d x d_ff`, `w_out` is `d_ff x d`.
    pub fn new(w_in: Array2<f64>, b_in: Array1<f64>, w_out: Array2<f64>, b_out: Array1<f64>) -> Result<Self> {
        let (d, d_ff) = w_in.dim();
        if d == 0 || d_ff == 0 {
            return Err(Error::config("expert dimensions must be positive"));
        }
        if b_in.len() != d_ff || w_out.dim() != (d_ff, d) || b_out.len() != d {
            return Err(Error::config(format!(
                "expert shapes disagree: w_in {:?}, b_in {}, w_out {:?}, b_out {}",
                w_in.dim(),
                b_in.len(),
                w_out.dim(),
                b_out.len()
            )));
        }
        let finite = w_in
            .iter()
            .chain(b_in.iter())
            .chain(w_out.iter())
            .chain(b_out.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("expert parameters contain a non-finite value"));
        }
        Ok(ExpertParams {
            w_in,
            b_in,
            w_out,
            b_out,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.nrows()
    }

    pub fn ffn_dim(&self) -> usize {
        self.w_in.ncols()
    }
}

pub fn expert_forward(x: &TokenEmbedding, e: &ExpertParams) -> Result<TokenEmbedding> {
    if x.dim() != e.hidden_dim() {
        return Err(Error::config(format!(
            "embedding has dimension {} but expert expects {}",
            x.dim(),
            e.hidden_dim()
        )));
    }
    let hidden = (x.as_array().dot(&e.w_in) + &e.b_in).mapv(|v| v.max(0.0));
    TokenEmbedding::new(hidden.dot(&e.w_out) + &e.b_out)
}

/// `sum_i weight_i * E_i(x)` over the selected experts.
pub fn moe_forward(x: &TokenEmbedding, decision: &RoutingDecision, experts: &[ExpertParams]) -> Result<TokenEmbedding> {
    let mut out = Array1::<f64>::zeros(x.dim());
    for &(id, weight) in decision.selected() {
        let expert = experts.get(id).ok_or_else(|| {
            Error::internal(format!("decision selects expert {id} but only {} exist", experts.len()))
        })?;
        out.scaled_add(weight, expert_forward(x, expert)?.as_array());
    }
    TokenEmbedding::new(out)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::routing::{route_topk, RouterLogits};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_expert(rng: &mut ChaCha8Rng, d: usize, d_ff: usize) -> ExpertParams {
        let mut m = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let w_in = m(d, d_ff);
        let w_out = m(d_ff, d);
        let b_in = Array1::from_shape_fn(d_ff, |_| rng.random_range(-0.5..0.5));
        let b_out = Array1::from_shape_fn(d, |_| rng.random_range(-0.5..0.5));
        ExpertParams::new(w_in, b_in, w_out, b_out).unwrap()
    }

    /// Plain loops, no ndarray products.
    fn naive_forward(x: &[f64], e: &ExpertParams) -> Vec<f64> {
        let (d, d_ff) = e.w_in.dim();
        let mut h = vec![0.0; d_ff];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = e.b_in[j];
            for i in 0..d {
                acc += x[i] * e.w_in[[i, j]];
            }
            *hj = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut y = vec![0.0; d];
        for (o, yo) in y.iter_mut().enumerate() {
            let mut acc = e.b_out[o];
            for j in 0..d_ff {
                acc += h[j] * e.w_out[[j, o]];
            }
            *yo = acc;
        }
        y
    }

    #[test]
    fn zero_in_zero_out() {
        let e = ExpertParams::new(
            array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            Array1::zeros(3),
            array![[1.0, -1.0], [0.5, 2.0], [3.0, 0.0]],
            Array1::zeros(2),
        )
        .unwrap();
        let y = expert_forward(&TokenEmbedding::new(vec![0.0, 0.0]).unwrap(), &e).unwrap();
        assert_eq!(y.as_array().to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_computed_small_expert() {
        // h = relu(x W1 + b1) = relu((1,2)(I) + (0.5, 0.5)) = (1.5, 2.5)
        // y = h W2 + b2 = (1.5*1 + 2.5*2, 1.5*3 + 2.5*4) + (0, 1) = (6.5, 15.5)
        let e = ExpertParams::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![0.5, 0.5],
            array![[1.0, 3.0], [2.0, 4.0]],
            array![0.0, 1.0],
        )
        .unwrap();
        let y = expert_forward(&TokenEmbedding::new(vec![1.0, 2.0]).unwrap(), &e).unwrap();
        assert_eq!(y.as_array().to_vec(), vec![6.5, 15.5]);
    }

    #[test]
    fn relu_clips_negative_hidden_units() {
        let e = ExpertParams::new(array![[-1.0]], array![0.0], array![[1.0]], array![0.0]).unwrap();
        let y = expert_forward(&TokenEmbedding::new(vec![3.0]).unwrap(), &e).unwrap();
        assert_eq!(y.as_array()[0], 0.0);
    }

    #[test]
    fn random_expert_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let e = random_expert(&mut rng, 6, 10);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = expert_forward(&TokenEmbedding::new(x.clone()).unwrap(), &e).unwrap();
            for (a, b) in got.as_array().iter().zip(naive_forward(&x, &e)) {
                assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(ExpertParams::new(array![[1.0, 2.0]], array![0.0], array![[1.0], [1.0]], array![0.0]).is_err());
        let e = ExpertParams::new(array![[1.0]], array![0.0], array![[1.0]], array![0.0]).unwrap();
        assert!(matches!(
            expert_forward(&TokenEmbedding::new(vec![1.0, 2.0]).unwrap(), &e),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_expert_weight_one_is_that_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let experts: Vec<_> = (0..3).map(|_| random_expert(&mut rng, 4, 5)).collect();
        let x = TokenEmbedding::new(vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let d = route_topk(&RouterLogits::new(vec![0.0, 2.0, 1.0]).unwrap(), 1).unwrap();
        assert_eq!(
            moe_forward(&x, &d, &experts).unwrap(),
            expert_forward(&x, &experts[1]).unwrap()
        );
    }

    #[test]
    fn identical_experts_half_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random_expert(&mut rng, 4, 5);
        let experts = vec![e.clone(), e.clone()];
        let x = TokenEmbedding::new(vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let d = route_topk(&RouterLogits::new(vec![1.0, 1.0]).unwrap(), 2).unwrap();
        let got = moe_forward(&x, &d, &experts).unwrap();
        let want = expert_forward(&x, &e).unwrap();
        for (a, b) in got.as_array().iter().zip(want.as_array()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn random_moe_matches_weighted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let experts: Vec<_> = (0..8).map(|_| random_expert(&mut rng, 6, 7)).collect();
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let l: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let d = route_topk(&RouterLogits::new(l).unwrap(), 3).unwrap();
            let got = moe_forward(&TokenEmbedding::new(x.clone()).unwrap(), &d, &experts).unwrap();
            let mut want = vec![0.0; 6];
            for &(id, w) in d.selected() {
                for (acc, y) in want.iter_mut().zip(naive_forward(&x, &experts[id])) {
                    *acc += w * y;
                }
            }
            for (a, b) in got.as_array().iter().zip(want) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn unknown_expert_is_internal_error() {
        let e = ExpertParams::new(array![[1.0]], array![0.0], array![[1.0]], array![0.0]).unwrap();
        let d = route_topk(&RouterLogits::new(vec![0.0, 1.0]).unwrap(), 1).unwrap();
        assert!(matches!(
            moe_forward(&TokenEmbedding::new(vec![1.0]).unwrap(), &d, &[e]),
            Err(Error::Internal(_))
        ));
    }
}
