use maskdiff::compute::{kernels, ParamSet, Tape, Tensor};
use maskdiff::data;
use maskdiff::masking::Mask;
use maskdiff::model::{self, BatchInput, ModelPreset, UViTConfig};
use maskdiff::objective::{loss_and_grads, LossBatch};
use maskdiff::schedule::{NoiseSchedule, ScheduleKind, SigmaKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = UViTConfig::preset(ModelPreset::Tiny).for_image(1, 16, 16);
    let params: ParamSet<f32> = model::init_params(&cfg, &mut rng).unwrap();
    let sched = NoiseSchedule::new(ScheduleKind::Cosine, 1000, SigmaKind::Beta).unwrap();
    let b = 32;
    let items = data::textures(b, 16, 4, &mut rng).unwrap();
    let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=1000)).collect();
    let eps: Vec<Tensor<f32>> = (0..b).map(|_| Tensor::randn(vec![1,16,16], &mut rng)).collect();
    let batch = LossBatch::new(items, ts, eps, None).unwrap();

    // forward only
    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n {
        let _ = loss_and_grads(&params, &cfg, &batch, &sched, false).unwrap();
    }
    println!("forward only: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let _ = loss_and_grads(&params, &cfg, &batch, &sched, true).unwrap();
    }
    println!("forward+backward: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);

    // raw forward through predict_noise_batch only (no loss assembly)
    let full_tau: Vec<usize> = (0..64).collect();
    let tokens: Vec<Tensor<f32>> = (0..b).map(|_| Tensor::randn(vec![64, 4], &mut rng)).collect();
    let taus: Vec<&[usize]> = (0..b).map(|_| full_tau.as_slice()).collect();
    let t0 = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let input = BatchInput { visible_tokens: tokens.clone(), taus: taus.clone(), ts: vec![5; b] };
        let _ = model::predict_noise_batch(&mut tape, &params, &cfg, &input).unwrap();
    }
    println!("model forward only: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);

    // tanh throughput
    let xs = vec![0.37f32; 2080*128];
    let t0 = Instant::now();
    let mut acc = 0f32;
    for _ in 0..10 {
        for &x in &xs { acc += kernels::gelu(x); }
    }
    println!("gelu fwd over 2080x128 ({} elems): {:.1} ms/pass (acc {acc})", xs.len(), t0.elapsed().as_secs_f64()*100.0);
    let t0 = Instant::now();
    let mut acc = 0f32;
    for _ in 0..10 {
        for &x in &xs { acc += kernels::gelu_grad(x); }
    }
    println!("gelu grad: {:.1} ms/pass (acc {acc})", t0.elapsed().as_secs_f64()*100.0);
    let _ = Mask::identity(maskdiff::masking::TokenGrid::new(2,2).unwrap());
}
