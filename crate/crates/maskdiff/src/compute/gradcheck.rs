//! Central-difference verification of the tape's gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{err_fmt, Result};

/// A deterministic scalar-valued function of a parameter set.
///
/// With `want_grad = true` it must also return analytic gradients (computed
/// via `Tape::backward`), densified to the parameter order.
pub trait LossFn<T: Scalar> {
    fn eval(&self, params: &ParamSet<T>, want_grad: bool)
        -> Result<(T, Option<Vec<Tensor<T>>>)>;
}

impl<T: Scalar, F> LossFn<T> for F
where
    F: Fn(&ParamSet<T>, bool) -> Result<(T, Option<Vec<Tensor<T>>>)>,
{
    fn eval(
        &self,
        params: &ParamSet<T>,
        want_grad: bool,
    ) -> Result<(T, Option<Vec<Tensor<T>>>)> {
        self(params, want_grad)
    }
}

/// Compare analytic gradients against central differences
/// (f(p+h) − f(p−h)) / 2h for every parameter element; returns the maximum
/// relative error with denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<T: Scalar>(f: &dyn LossFn<T>, params: &ParamSet<T>, h: f64) -> Result<f64> {
    grad_check_sampled(f, params, h, None)
}

/// [`grad_check`] over a seeded random subsample of at most `limit` elements
/// per call; `None` sweeps everything. The subsample always includes at least
/// one element of every parameter tensor so no weight group goes unchecked.
pub fn grad_check_sampled<T: Scalar>(
    f: &dyn LossFn<T>,
    params: &ParamSet<T>,
    h: f64,
    limit: Option<(usize, u64)>,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(err_fmt!(Contract, "grad_check step h must be > 0, got {h}"));
    }
    let (_, grads) = f.eval(params, true)?;
    let grads = grads.ok_or_else(|| err_fmt!(Contract, "loss fn returned no gradients"))?;

    let mut coords: Vec<(usize, usize)> = Vec::new();
    match limit {
        None => {
            for (pi, e) in params.entries().iter().enumerate() {
                for k in 0..e.tensor.len() {
                    coords.push((pi, k));
                }
            }
        }
        Some((max_elems, seed)) => {
            let mut all: Vec<(usize, usize)> = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (pi, e) in params.entries().iter().enumerate() {
                // one pinned element per tensor, the rest pooled
                coords.push((pi, 0));
                for k in 1..e.tensor.len() {
                    all.push((pi, k));
                }
            }
            let extra = max_elems.saturating_sub(coords.len()).min(all.len());
            let (picked, _) = all.partial_shuffle(&mut rng, extra);
            coords.extend_from_slice(picked);
        }
    }

    let hh = T::from_f64(h);
    let mut max_rel: f64 = 0.0;
    let mut work = params.clone();
    for (pi, k) in coords {
        let orig = work.get(pi).data()[k];
        work.get_mut(pi).data_mut()[k] = orig + hh;
        let (fp, _) = f.eval(&work, false)?;
        work.get_mut(pi).data_mut()[k] = orig - hh;
        let (fm, _) = f.eval(&work, false)?;
        work.get_mut(pi).data_mut()[k] = orig;

        let numeric = (fp.to_f64() - fm.to_f64()) / (2.0 * h);
        let analytic = grads[pi].data()[k].to_f64();
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::tape::Tape;
    use rand::Rng;

    #[test]
    fn quadratic_form_checks_out() {
        // f(w) = sum((w @ x) ⊙ (w @ x)) on random small inputs
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::<f64>::new();
        params.insert("w", Tensor::randn(vec![4, 3], &mut rng));
        let x = Tensor::<f64>::randn(vec![3, 2], &mut rng);

        let f = move |p: &ParamSet<f64>, want_grad: bool| {
            let mut tape = Tape::<f64>::new();
            let wn = tape.param(0, p.get(0));
            let xn = tape.leaf(x.clone());
            let y = tape.matmul(wn, xn)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum(sq)?;
            let l = tape.value(loss).data()[0];
            let g = if want_grad {
                let map = tape.backward(loss)?;
                Some(p.dense_grads(&map))
            } else {
                None
            };
            Ok((l, g))
        };
        let err = grad_check(&f, &params, 1e-4).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut params = ParamSet::<f64>::new();
        params.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let f = |p: &ParamSet<f64>, want_grad: bool| {
            let mut tape = Tape::<f64>::new();
            let _w = tape.param(0, p.get(0));
            let c = tape.leaf(Tensor::scalar(5.0));
            let loss = tape.sum(c)?;
            let l = tape.value(loss).data()[0];
            let g = if want_grad {
                let map = tape.backward(loss)?;
                Some(p.dense_grads(&map))
            } else {
                None
            };
            Ok((l, g))
        };
        let err = grad_check(&f, &params, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn every_op_passes_grad_check_in_isolation() {
        // random inputs of dimension <= 16, double precision, h = 1e-4,
        // max relative error < 1e-6 per supported op
        type Build = fn(&mut Tape<f64>, &[crate::compute::NodeId]) -> Result<crate::compute::NodeId>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, n| t.matmul(n[0], n[1])),
            ("transpose", vec![vec![3, 4]], |t, n| t.transpose(n[0])),
            ("reshape", vec![vec![3, 4]], |t, n| t.reshape(n[0], vec![2, 6])),
            ("add", vec![vec![4, 4], vec![4, 4]], |t, n| t.add(n[0], n[1])),
            ("add_bias", vec![vec![3, 4], vec![4]], |t, n| t.add_bias(n[0], n[1])),
            ("mul", vec![vec![4, 4], vec![4, 4]], |t, n| t.mul(n[0], n[1])),
            ("scale", vec![vec![4, 4]], |t, n| t.scale(n[0], 0.7)),
            ("gelu", vec![vec![4, 4]], |t, n| t.gelu(n[0])),
            ("softmax", vec![vec![3, 4]], |t, n| t.softmax(n[0])),
            ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |t, n| {
                t.layer_norm(n[0], n[1], n[2])
            }),
            ("gather_rows", vec![vec![4, 3]], |t, n| t.gather_rows(n[0], &[2, 0, 2, 3])),
            ("concat_rows", vec![vec![2, 3], vec![2, 3]], |t, n| t.concat_rows(n)),
            ("concat_cols", vec![vec![2, 3], vec![2, 2]], |t, n| t.concat_cols(n)),
            ("slice_rows", vec![vec![4, 3]], |t, n| t.slice_rows(n[0], 1, 2)),
            ("slice_cols", vec![vec![4, 3]], |t, n| t.slice_cols(n[0], 1, 2)),
            ("sum", vec![vec![4, 4]], |t, n| t.sum(n[0])),
            ("mean", vec![vec![4, 4]], |t, n| t.mean(n[0])),
            ("squared_error", vec![vec![3, 4], vec![3, 4]], |t, n| {
                t.squared_error(n[0], n[1])
            }),
            ("attention", vec![vec![5, 12]], |t, n| {
                t.attention(n[0], 2, &[(0, 3), (3, 2)])
            }),
        ];

        for (name, shapes, build) in cases {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut params = ParamSet::<f64>::new();
            for (i, s) in shapes.iter().enumerate() {
                params.insert(&format!("p{i}"), Tensor::randn(s.clone(), &mut rng));
            }
            let f = move |p: &ParamSet<f64>, want_grad: bool| {
                let mut tape = Tape::<f64>::new();
                let nodes: Vec<_> =
                    (0..p.len()).map(|i| tape.param(i, p.get(i))).collect();
                let out = build(&mut tape, &nodes)?;
                // reduce to scalar; give sum/mean outputs a nonlinearity so
                // their own gradient path is still exercised
                let sq = tape.mul(out, out)?;
                let loss = tape.mean(sq)?;
                let l = tape.value(loss).data()[0];
                let g = if want_grad {
                    let map = tape.backward(loss)?;
                    Some(p.dense_grads(&map))
                } else {
                    None
                };
                Ok((l, g))
            };
            let err = grad_check(&f, &params, 1e-4).unwrap();
            assert!(err < 1e-6, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn deep_op_chain_passes_grad_check() {
        // composed ops accumulate finite-difference truncation error; the
        // tolerance here is the acceptance-level 1e-4
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut params = ParamSet::<f64>::new();
        params.insert("a", Tensor::randn(vec![4, 4], &mut rng));
        params.insert("b", Tensor::randn(vec![4, 4], &mut rng));
        params.insert("gamma", Tensor::randn(vec![4], &mut rng).map(|v| v * 0.1 + 1.0));
        params.insert("beta", Tensor::randn(vec![4], &mut rng));
        params.insert("bias", Tensor::randn(vec![4], &mut rng));
        let target = Tensor::<f64>::randn(vec![2, 8], &mut rng);
        let tau: Vec<usize> = (0..4).map(|_| rng.gen_range(0..4)).collect();

        let f = move |p: &ParamSet<f64>, want_grad: bool| {
            let mut tape = Tape::<f64>::new();
            let a = tape.param(0, p.get(0));
            let b = tape.param(1, p.get(1));
            let gamma = tape.param(2, p.get(2));
            let beta = tape.param(3, p.get(3));
            let bias = tape.param(4, p.get(4));

            let mm = tape.matmul(a, b)?;
            let tr = tape.transpose(mm)?;
            let ln = tape.layer_norm(tr, gamma, beta)?;
            let ab = tape.add_bias(ln, bias)?;
            let ge = tape.gelu(ab)?;
            let sm = tape.softmax(ge)?;
            let ad = tape.add(sm, a)?;
            let ml = tape.mul(ad, b)?;
            let sc = tape.scale(ml, 0.7)?;
            let ga = tape.gather_rows(sc, &tau)?;
            let top = tape.slice_rows(ga, 0, 2)?;
            let bot = tape.slice_rows(ga, 2, 2)?;
            let cc = tape.concat_cols(&[top, bot])?;
            let left = tape.slice_cols(cc, 0, 4)?;
            let right = tape.slice_cols(cc, 4, 4)?;
            let cr = tape.concat_rows(&[left, right])?;
            let rs = tape.reshape(cr, vec![2, 8])?;
            let tgt = tape.leaf(target.clone());
            let se = tape.squared_error(rs, tgt)?;
            let loss = tape.mean(se)?;

            let l = tape.value(loss).data()[0];
            let g = if want_grad {
                let map = tape.backward(loss)?;
                Some(p.dense_grads(&map))
            } else {
                None
            };
            Ok((l, g))
        };

        let err = grad_check(&f, &params, 1e-4).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
