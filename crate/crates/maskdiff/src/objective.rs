//! Denoising score matching losses: the plain DSM objective over all tokens
//! and its masked variant restricted to the visible subset.
//!
//! Both run through the same code path — the masked loss with rate 0 is
//! bit-identical to the unmasked one under a shared rng stream, because an
//! identity gather copies token values exactly.

use crate::compute::{ParamSet, Scalar, Tape, Tensor};
use crate::error::{err_fmt, Error, Result};
use crate::masking::Mask;
use crate::model::{self, BatchInput, UViTConfig};
use crate::schedule::NoiseSchedule;

/// One training batch: clean images, per-sample steps and noise draws, and
/// optionally one mask per sample.
pub struct LossBatch<T: Scalar> {
    pub images: Vec<Tensor<T>>,
    pub ts: Vec<usize>,
    pub eps: Vec<Tensor<T>>,
    pub masks: Option<Vec<Mask>>,
}

impl<T: Scalar> LossBatch<T> {
    pub fn new(
        images: Vec<Tensor<T>>,
        ts: Vec<usize>,
        eps: Vec<Tensor<T>>,
        masks: Option<Vec<Mask>>,
    ) -> Result<Self> {
        let b = images.len();
        if b == 0 {
            return Err(err_fmt!(Contract, "empty batch"));
        }
        if ts.len() != b || eps.len() != b {
            return Err(err_fmt!(Contract, "batch arrays disagree"));
        }
        for (x, e) in images.iter().zip(eps.iter()) {
            if x.shape() != e.shape() {
                return Err(err_fmt!(Shape, "eps shape {:?} vs image {:?}", e.shape(), x.shape()));
            }
        }
        if let Some(m) = &masks {
            if m.len() != b {
                return Err(err_fmt!(Contract, "need one mask per sample"));
            }
        }
        Ok(LossBatch { images, ts, eps, masks })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Eq.-style DSM: mean over batch and all tokens of ‖ε − ε_θ(x_t, t)‖².
pub fn dsm_loss<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &UViTConfig,
    batch: &LossBatch<T>,
    sched: &NoiseSchedule,
) -> Result<T> {
    if batch.masks.is_some() {
        return Err(err_fmt!(Contract, "dsm_loss takes an unmasked batch"));
    }
    Ok(loss_and_grads(params, cfg, batch, sched, false)?.0)
}

/// Masked DSM: the same regression restricted to visible tokens
/// (mean per visible element).
pub fn mdsm_loss<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &UViTConfig,
    batch: &LossBatch<T>,
    sched: &NoiseSchedule,
) -> Result<T> {
    if batch.masks.is_none() {
        return Err(err_fmt!(Contract, "mdsm_loss needs masks"));
    }
    Ok(loss_and_grads(params, cfg, batch, sched, false)?.0)
}

/// Forward (and optionally backward) pass for a batch. Gradients come back
/// dense, aligned with the parameter order, averaged the same way the loss is.
pub fn loss_and_grads<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &UViTConfig,
    batch: &LossBatch<T>,
    sched: &NoiseSchedule,
    want_grad: bool,
) -> Result<(T, Option<Vec<Tensor<T>>>)> {
    let b = batch.len();
    let full_tau: Vec<usize> = (0..cfg.n_tokens()).collect();

    let mut visible_tokens = Vec::with_capacity(b);
    let mut taus: Vec<&[usize]> = Vec::with_capacity(b);
    let mut target_rows: Vec<Tensor<T>> = Vec::with_capacity(b);
    for i in 0..b {
        let xt = sched.forward_sample(&batch.images[i], &batch.eps[i], batch.ts[i])?;
        let xt_tokens = model::patchify(&xt, cfg.patch)?;
        let eps_tokens = model::patchify(&batch.eps[i], cfg.patch)?;
        if xt_tokens.shape()[0] != cfg.n_tokens() {
            return Err(err_fmt!(
                Contract,
                "image tokenizes to {} tokens, model expects {}",
                xt_tokens.shape()[0],
                cfg.n_tokens()
            ));
        }
        match &batch.masks {
            Some(masks) => {
                let mask = &masks[i];
                if mask.visible_count() == 0 {
                    return Err(Error::FullMask);
                }
                visible_tokens.push(xt_tokens.gather_rows(mask.tau())?);
                target_rows.push(eps_tokens.gather_rows(mask.tau())?);
                taus.push(mask.tau());
            }
            None => {
                visible_tokens.push(xt_tokens);
                target_rows.push(eps_tokens);
                taus.push(&full_tau);
            }
        }
    }

    let mut tape = Tape::new();
    let input = BatchInput { visible_tokens, taus, ts: batch.ts.clone() };
    let preds = model::predict_noise_batch(&mut tape, params, cfg, &input)?;

    let td = cfg.token_dim();
    let total_rows: usize = target_rows.iter().map(|t| t.shape()[0]).sum();
    let mut target_data = Vec::with_capacity(total_rows * td);
    for t in &target_rows {
        target_data.extend_from_slice(t.data());
    }
    let targets = tape.leaf(Tensor::new(vec![total_rows, td], target_data)?);
    let se = tape.squared_error(preds, targets)?;
    let loss_node = tape.mean(se)?;
    let loss = tape.value(loss_node).data()[0];

    let grads = if want_grad {
        let map = tape.backward(loss_node)?;
        Some(params.dense_grads(&map))
    } else {
        None
    };
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_patch_mask, MaskSpec, MaskStrategy};
    use crate::model::{init_params, ModelPreset};
    use crate::schedule::{make_linear_schedule, SigmaKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> UViTConfig {
        UViTConfig::preset(ModelPreset::Tiny).for_image(1, 4, 4)
    }

    fn draw_batch(
        cfg: &UViTConfig,
        b: usize,
        t_max: usize,
        mask_rate: Option<f64>,
        r: &mut ChaCha8Rng,
    ) -> LossBatch<f64> {
        let shape = vec![cfg.channels, cfg.image_h, cfg.image_w];
        let images = (0..b).map(|_| Tensor::randn(shape.clone(), r)).collect();
        let ts = (0..b).map(|_| r.gen_range(1..=t_max)).collect();
        let eps = (0..b).map(|_| Tensor::randn(shape.clone(), r)).collect();
        let masks = mask_rate.map(|m| {
            (0..b)
                .map(|_| sample_patch_mask(cfg.grid(), m, r).unwrap())
                .collect()
        });
        LossBatch::new(images, ts, eps, masks).unwrap()
    }

    #[test]
    fn zero_head_model_predicts_zero_noise() {
        // freshly initialized head is all-zero, so eps_theta == 0 and
        // loss == mean(eps^2) exactly (direct formula oracle)
        let cfg = tiny_cfg();
        let params = init_params::<f64, _>(&cfg, &mut rng(1)).unwrap();
        let sched = make_linear_schedule(100, 1e-4, 0.02, SigmaKind::Beta).unwrap();
        let batch = draw_batch(&cfg, 4, 100, None, &mut rng(2));
        let loss = dsm_loss(&params, &cfg, &batch, &sched).unwrap();

        let mut sum = 0.0;
        let mut n = 0;
        for e in &batch.eps {
            sum += e.data().iter().map(|v| v * v).sum::<f64>();
            n += e.len();
        }
        assert!((loss - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_with_zero_head_gives_zero_loss() {
        let cfg = tiny_cfg();
        let params = init_params::<f64, _>(&cfg, &mut rng(3)).unwrap();
        let sched = make_linear_schedule(50, 1e-4, 0.02, SigmaKind::Beta).unwrap();
        let shape = vec![1, 4, 4];
        let mut r = rng(4);
        let batch = LossBatch::new(
            vec![Tensor::randn(shape.clone(), &mut r)],
            vec![25],
            vec![Tensor::zeros(shape)],
            None,
        )
        .unwrap();
        let loss = dsm_loss(&params, &cfg, &batch, &sched).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_head_loss_is_near_one_over_many_elements() {
        // E[eps^2] = 1; >= 10^4 elements, 3 standard errors
        let cfg = tiny_cfg();
        let params = init_params::<f64, _>(&cfg, &mut rng(5)).unwrap();
        let sched = make_linear_schedule(100, 1e-4, 0.02, SigmaKind::Beta).unwrap();
        let batch = draw_batch(&cfg, 700, 100, None, &mut rng(6)); // 700*16 = 11200 elems
        let n = (700 * 16) as f64;
        let loss = dsm_loss(&params, &cfg, &batch, &sched).unwrap();
        // Var(eps^2) = 2 for standard normal
        let se = (2.0 / n).sqrt();
        assert!((loss - 1.0).abs() < 3.0 * se, "loss {loss}, 3se {}", 3.0 * se);
    }

    #[test]
    fn loss_matches_independent_recomputation() {
        let cfg = tiny_cfg();
        let mut params = init_params::<f64, _>(&cfg, &mut rng(7)).unwrap();
        let hw = params.index_of("head.w").unwrap();
        *params.get_mut(hw) =
            Tensor::trunc_normal(vec![cfg.dim, cfg.token_dim()], 0.05, &mut rng(8));
        let sched = make_linear_schedule(100, 1e-4, 0.02, SigmaKind::Beta).unwrap();
        let batch = draw_batch(&cfg, 3, 100, Some(0.5), &mut rng(9));
        let loss = mdsm_loss(&params, &cfg, &batch, &sched).unwrap();

        // independent double-precision re-computation from the same (x0, eps, t)
        let mut sum = 0.0;
        let mut count = 0usize;
        let masks = batch.masks.as_ref().unwrap();
        for i in 0..batch.len() {
            let abar = sched.alpha_bar(batch.ts[i]);
            let xt_data: Vec<f64> = batch.images[i]
                .data()
                .iter()
                .zip(batch.eps[i].data().iter())
                .map(|(&x, &e)| abar.sqrt() * x + (1.0 - abar).sqrt() * e)
                .collect();
            let xt = Tensor::new(batch.images[i].shape().to_vec(), xt_data).unwrap();
            let tokens = model::patchify(&xt, cfg.patch).unwrap();
            let vis = tokens.gather_rows(masks[i].tau()).unwrap();
            let pred =
                model::predict_noise(&params, &cfg, &vis, masks[i].tau(), batch.ts[i]).unwrap();
            let eps_tokens = model::patchify(&batch.eps[i], cfg.patch).unwrap();
            let eps_vis = eps_tokens.gather_rows(masks[i].tau()).unwrap();
            for (p, e) in pred.data().iter().zip(eps_vis.data().iter()) {
                sum += (p - e) * (p - e);
                count += 1;
            }
        }
        let want = sum / count as f64;
        assert!((loss - want).abs() < 1e-12, "loss {loss} vs oracle {want}");
    }

    #[test]
    fn mdsm_rate_zero_equals_dsm_bit_exactly() {
        let cfg = tiny_cfg();
        let mut params = init_params::<f64, _>(&cfg, &mut rng(10)).unwrap();
        let hw = params.index_of("head.w").unwrap();
        *params.get_mut(hw) =
            Tensor::trunc_normal(vec![cfg.dim, cfg.token_dim()], 0.05, &mut rng(11));
        let sched = make_linear_schedule(100, 1e-4, 0.02, SigmaKind::Beta).unwrap();
        for seed in 0..5 {
            let unmasked = draw_batch(&cfg, 3, 100, None, &mut rng(100 + seed));
            let mut masked = draw_batch(&cfg, 3, 100, None, &mut rng(100 + seed));
            let spec = MaskSpec { strategy: MaskStrategy::Patch, rate: 0.0 };
            let mut mrng = rng(999);
            masked.masks = Some(
                (0..masked.len()).map(|_| spec.sample(cfg.grid(), &mut mrng).unwrap()).collect(),
            );
            let a = dsm_loss(&params, &cfg, &unmasked, &sched).unwrap();
            let b = mdsm_loss(&params, &cfg, &masked, &sched).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "seed {seed}");
        }
    }

    #[test]
    fn masked_token_values_do_not_affect_loss() {
        let cfg = tiny_cfg();
        let mut params = init_params::<f64, _>(&cfg, &mut rng(12)).unwrap();
        let hw = params.index_of("head.w").unwrap();
        *params.get_mut(hw) =
            Tensor::trunc_normal(vec![cfg.dim, cfg.token_dim()], 0.05, &mut rng(13));
        let sched = make_linear_schedule(100, 1e-4, 0.02, SigmaKind::Beta).unwrap();
        let mut batch = draw_batch(&cfg, 2, 100, Some(0.5), &mut rng(14));
        let a = mdsm_loss(&params, &cfg, &batch, &sched).unwrap();

        // rewrite x0 inside masked patches only (grid 2x2, patch 2)
        let masks = batch.masks.as_ref().unwrap().clone();
        for (img, mask) in batch.images.iter_mut().zip(masks.iter()) {
            let w = cfg.image_w;
            for (slot, &vis) in mask.bits().iter().enumerate() {
                if vis {
                    continue;
                }
                let (tr, tc) = (slot / 2, slot % 2);
                for py in 0..cfg.patch {
                    for px in 0..cfg.patch {
                        let y = tr * cfg.patch + py;
                        let x = tc * cfg.patch + px;
                        img.data_mut()[y * w + x] = 999.0;
                    }
                }
            }
        }
        let b = mdsm_loss(&params, &cfg, &batch, &sched).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn single_visible_token_loss_by_hand() {
        let cfg = tiny_cfg();
        let mut params = init_params::<f64, _>(&cfg, &mut rng(15)).unwrap();
        let hw = params.index_of("head.w").unwrap();
        *params.get_mut(hw) =
            Tensor::trunc_normal(vec![cfg.dim, cfg.token_dim()], 0.05, &mut rng(16));
        let sched = make_linear_schedule(100, 1e-4, 0.02, SigmaKind::Beta).unwrap();
        let mut batch = draw_batch(&cfg, 1, 100, None, &mut rng(17));
        batch.masks = Some(vec![sample_patch_mask(cfg.grid(), 0.75, &mut rng(18)).unwrap()]);
        let mask = batch.masks.as_ref().unwrap()[0].clone();
        assert_eq!(mask.visible_count(), 1);
        let loss = mdsm_loss(&params, &cfg, &batch, &sched).unwrap();

        let xt = sched.forward_sample(&batch.images[0], &batch.eps[0], batch.ts[0]).unwrap();
        let tok = model::patchify(&xt, cfg.patch).unwrap().gather_rows(mask.tau()).unwrap();
        let pred = model::predict_noise(&params, &cfg, &tok, mask.tau(), batch.ts[0]).unwrap();
        let eps_tok =
            model::patchify(&batch.eps[0], cfg.patch).unwrap().gather_rows(mask.tau()).unwrap();
        let want: f64 = pred
            .data()
            .iter()
            .zip(eps_tok.data())
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>()
            / pred.len() as f64;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn losses_are_non_negative() {
        let cfg = tiny_cfg();
        let params = init_params::<f64, _>(&cfg, &mut rng(19)).unwrap();
        let sched = make_linear_schedule(100, 1e-4, 0.02, SigmaKind::Beta).unwrap();
        for seed in 0..5 {
            let batch = draw_batch(&cfg, 2, 100, Some(0.5), &mut rng(300 + seed));
            assert!(mdsm_loss(&params, &cfg, &batch, &sched).unwrap() >= 0.0);
        }
    }

    #[test]
    fn gradients_pass_sampled_check_on_tiny_model() {
        // quick unit-level version of the acceptance sweep: depth 2, sampled
        // subset of elements, double precision
        let cfg = tiny_cfg().with_depth(2);
        let params = init_params::<f64, _>(&cfg, &mut rng(20)).unwrap();
        let sched = make_linear_schedule(50, 1e-4, 0.02, SigmaKind::Beta).unwrap();
        let batch = std::rc::Rc::new(draw_batch(&cfg, 1, 50, Some(0.5), &mut rng(21)));
        let cfg2 = cfg.clone();
        let b2 = batch.clone();
        let f = move |p: &ParamSet<f64>, want_grad: bool| {
            loss_and_grads(p, &cfg2, &b2, &sched, want_grad)
        };
        let err =
            crate::compute::grad_check_sampled(&f, &params, 1e-4, Some((600, 7))).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn wrong_batch_usage_rejected() {
        let cfg = tiny_cfg();
        let params = init_params::<f64, _>(&cfg, &mut rng(22)).unwrap();
        let sched = make_linear_schedule(50, 1e-4, 0.02, SigmaKind::Beta).unwrap();
        let masked = draw_batch(&cfg, 1, 50, Some(0.5), &mut rng(23));
        assert!(dsm_loss(&params, &cfg, &masked, &sched).is_err());
        let unmasked = draw_batch(&cfg, 1, 50, None, &mut rng(24));
        assert!(mdsm_loss(&params, &cfg, &unmasked, &sched).is_err());
    }
}
