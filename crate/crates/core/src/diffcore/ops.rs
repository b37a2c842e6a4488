//! Composite kernels built from graph primitives.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// `y = x·W + b`
pub fn affine(g: &mut Graph<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

/// Query/key/value/output projection handles for one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjections {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Full causal self-attention: projections, per-head masked softmax, output projection.
pub fn causal_self_attention(
    g: &mut Graph<'_>,
    x: Var,
    heads: usize,
    proj: &AttentionProjections,
    segments: &[usize],
) -> Result<Var> {
    let d = g.shape(x).1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let q = affine(g, x, proj.wq, proj.bq)?;
    let k = affine(g, x, proj.wk, proj.bk)?;
    let v = affine(g, x, proj.wv, proj.bv)?;
    let ctx = g.causal_attention(q, k, v, heads, segments)?;
    affine(g, ctx, proj.wo, proj.bo)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::diffcore::{GradMode, ParamStore, Tensor2};

    fn store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn conv1d_hand_example() {
        let s = store();
        let mut g = Graph::new(&s, GradMode::None);
        let x = g.input(Tensor2::from_rows(&[&[1.0], &[2.0], &[3.0], &[4.0]]));
        let w = g.input(Tensor2::from_rows(&[&[1.0], &[1.0]]));
        let b = g.zeros(1, 1);
        let y = g.conv1d(x, w, b, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv1d_stride_four_on_hundred_frames() {
        let s = store();
        let mut g = Graph::new(&s, GradMode::None);
        let x = g.input(Tensor2::zeros(100, 3));
        let w = g.input(Tensor2::zeros(12, 5));
        let b = g.zeros(1, 5);
        let y = g.conv1d(x, w, b, 4, 4).unwrap();
        assert_eq!(g.shape(y), (25, 5));
    }

    #[test]
    fn conv1d_identity_kernel() {
        let s = store();
        let mut g = Graph::new(&s, GradMode::None);
        let xt = Tensor2::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let x = g.input(xt.clone());
        let w = g.input(Tensor2::identity(3));
        let b = g.zeros(1, 3);
        let y = g.conv1d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn conv1d_too_short_is_length_error() {
        let s = store();
        let mut g = Graph::new(&s, GradMode::None);
        let x = g.input(Tensor2::zeros(3, 1));
        let w = g.input(Tensor2::zeros(4, 1));
        let b = g.zeros(1, 1);
        assert!(matches!(g.conv1d(x, w, b, 4, 4), Err(Error::Length(_))));
    }

    #[test]
    fn affine_examples() {
        let s = store();
        let mut g = Graph::new(&s, GradMode::None);
        let x = g.input(Tensor2::from_rows(&[&[1.0, 2.0]]));
        let w = g.input(Tensor2::identity(2));
        let b = g.input(Tensor2::from_rows(&[&[3.0, 4.0]]));
        let y = affine(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0]);

        let z = g.zeros(1, 2);
        let y = affine(&mut g, x, w, z).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let empty = g.input(Tensor2::zeros(0, 2));
        let y = affine(&mut g, empty, w, b).unwrap();
        assert_eq!(g.shape(y), (0, 2));

        let wide = g.input(Tensor2::zeros(3, 2));
        assert!(matches!(affine(&mut g, x, wide, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let s = store();
        let mut g = Graph::new(&s, GradMode::None);
        let one = g.input(Tensor2::filled(1, 2, 1.0));
        let zero = g.zeros(1, 2);
        let x = g.input(Tensor2::from_rows(&[&[5.0, 5.0]]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.input(Tensor2::from_rows(&[&[1.0, -1.0]]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        assert!((g.value(y).get(0, 0) - 1.0).abs() < 1e-9);
        assert!((g.value(y).get(0, 1) + 1.0).abs() < 1e-9);

        let c = g.input(Tensor2::filled(1, 2, 2.5));
        let y = g.layer_norm(x, zero, c, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[2.5, 2.5]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let s = store();
        let mut g = Graph::new(&s, GradMode::None);
        let l = g.input(Tensor2::zeros(2, 47));
        let loss = g.softmax_cross_entropy(l, &[3, 9], &[true, true]).unwrap();
        assert!((g.scalar(loss) - 47f64.ln()).abs() < 1e-12);
        assert!((g.scalar(loss) - 3.8501).abs() < 1e-4);

        let mut t = Tensor2::zeros(1, 5);
        t.set(0, 2, 1e9);
        let l = g.input(t);
        let loss = g.softmax_cross_entropy(l, &[2], &[true]).unwrap();
        assert!(g.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_mask_ignores_rows() {
        let s = store();
        let mut g = Graph::new(&s, GradMode::None);
        let a = g.input(Tensor2::from_rows(&[&[0.1, 0.2, 0.3], &[5.0, -3.0, 1.0]]));
        let b = g.input(Tensor2::from_rows(&[&[0.1, 0.2, 0.3], &[-7.0, 0.0, 9.0]]));
        let la = g.softmax_cross_entropy(a, &[1, 0], &[true, false]).unwrap();
        let lb = g.softmax_cross_entropy(b, &[1, 2], &[true, false]).unwrap();
        assert_eq!(g.scalar(la), g.scalar(lb));
        assert!(matches!(g.softmax_cross_entropy(a, &[0, 0], &[false, false]), Err(Error::Argument(_))));
    }

    #[test]
    fn attention_single_step_is_value_projection() {
        let mut s = store();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<_> = ["wq", "wk", "wv", "wo"]
            .iter()
            .map(|n| s.insert(*n, Tensor2::randn(4, 4, 0.5, &mut rng), true))
            .collect();
        let bids: Vec<_> = ["bq", "bk", "bv", "bo"]
            .iter()
            .map(|n| s.insert(*n, Tensor2::randn(1, 4, 0.5, &mut rng), true))
            .collect();
        let xt = Tensor2::randn(1, 4, 1.0, &mut rng);
        let mut g = Graph::new(&s, GradMode::None);
        let x = g.input(xt.clone());
        let p = AttentionProjections {
            wq: g.param(ids[0]),
            wk: g.param(ids[1]),
            wv: g.param(ids[2]),
            wo: g.param(ids[3]),
            bq: g.param(bids[0]),
            bk: g.param(bids[1]),
            bv: g.param(bids[2]),
            bo: g.param(bids[3]),
        };
        let y = causal_self_attention(&mut g, x, 2, &p, &[1]).unwrap();
        // softmax over one key is exactly 1, so output = (x·Wv + bv)·Wo + bo
        let mut v = xt.matmul(s.value(ids[2])).unwrap();
        for (o, b) in v.data_mut().iter_mut().zip(s.value(bids[2]).data()) {
            *o += b;
        }
        let mut expect = v.matmul(s.value(ids[3])).unwrap();
        for (o, b) in expect.data_mut().iter_mut().zip(s.value(bids[3]).data()) {
            *o += b;
        }
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);

        let x3 = g.input(Tensor2::zeros(1, 3));
        let bad = AttentionProjections { wq: x3, ..p };
        assert!(causal_self_attention(&mut g, x, 3, &bad, &[1]).is_err());
    }
}
