use maskdiff::compute::Tensor;
use maskdiff::data::{self, Dataset};
use maskdiff::masking::{MaskSpec, MaskStrategy};
use maskdiff::model::{ModelPreset, Positional};
use maskdiff::schedule::{ScheduleKind, SigmaKind};
use maskdiff::trainer::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    // A7 shape: swiss roll, patch 1, batch 256
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ds = Dataset::from_items(data::swiss_roll(4096, 0.01, &mut rng)).unwrap();
    let plan = TrainPlan {
        preset: ModelPreset::Tiny,
        patch_override: Some(1),
        positional: Positional::Learned,
        timesteps: 1000,
        sigma_kind: SigmaKind::Beta,
        seed: 1,
        carry_optimizer: false,
        stages: vec![TrainStage {
            name: "ft".into(), mask_spec: None, steps: 30, batch_size: 256,
            lr: 2e-4, warmup_steps: 0, grad_clip: None,
            schedule_kind: ScheduleKind::Cosine, ema_decay: 0.999, hflip_prob: 0.0,
        }],
    };
    let cfg = plan.resolve_model(&ds).unwrap();
    let mut st = TrainState::init(&plan, &cfg).unwrap();
    let t0 = Instant::now();
    run_plan(&plan, &cfg, &ds, &mut st, &mut |_, _| Ok(()), &mut |_| Ok(())).unwrap();
    println!("A7 finetune (B=256, 3 rows): {:.1} ms/step", t0.elapsed().as_secs_f64() * 1000.0 / 30.0);

    // A7 masked: 1 of 2 tokens visible
    let mut plan2 = plan.clone();
    plan2.stages[0].mask_spec = Some(MaskSpec { strategy: MaskStrategy::Patch, rate: 0.5 });
    let mut st = TrainState::init(&plan2, &cfg).unwrap();
    let t0 = Instant::now();
    run_plan(&plan2, &cfg, &ds, &mut st, &mut |_, _| Ok(()), &mut |_| Ok(())).unwrap();
    println!("A7 masked (B=256, 2 rows): {:.1} ms/step", t0.elapsed().as_secs_f64() * 1000.0 / 30.0);

    // A8 shape: 16x16 textures, patch 2 -> 64 tokens
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ds = Dataset::from_items(data::textures(1024, 16, 4, &mut rng).unwrap()).unwrap();
    for (bs, mask, label) in [
        (32usize, None, "A8 finetune B=32, 65 rows"),
        (32, Some(MaskSpec { strategy: MaskStrategy::Block(2), rate: 0.5 }), "A8 masked B=32, 33 rows"),
        (16, None, "A8 finetune B=16"),
        (32, Some(MaskSpec { strategy: MaskStrategy::Block(2), rate: 0.9 }), "A9 masked 0.9 B=32"),
    ] {
        let plan = TrainPlan {
            preset: ModelPreset::Tiny,
            patch_override: None,
            positional: Positional::Learned,
            timesteps: 1000,
            sigma_kind: SigmaKind::Beta,
            seed: 1,
            carry_optimizer: false,
            stages: vec![TrainStage {
                name: "s".into(), mask_spec: mask, steps: 10, batch_size: bs,
                lr: 2e-4, warmup_steps: 0, grad_clip: None,
                schedule_kind: ScheduleKind::Cosine, ema_decay: 0.999, hflip_prob: 0.0,
            }],
        };
        let cfg = plan.resolve_model(&ds).unwrap();
        let mut st = TrainState::init(&plan, &cfg).unwrap();
        let t0 = Instant::now();
        run_plan(&plan, &cfg, &ds, &mut st, &mut |_, _| Ok(()), &mut |_| Ok(())).unwrap();
        println!("{label}: {:.1} ms/step", t0.elapsed().as_secs_f64() * 1000.0 / 10.0);
    }

    // sampling throughput: ddim(50) on 64-token grid
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ds2 = Dataset::from_items(data::textures(8, 16, 4, &mut rng).unwrap()).unwrap();
    let plan = TrainPlan {
        preset: ModelPreset::Tiny, patch_override: None, positional: Positional::Learned,
        timesteps: 1000, sigma_kind: SigmaKind::Beta, seed: 1, carry_optimizer: false,
        stages: vec![TrainStage { name: "s".into(), mask_spec: None, steps: 1, batch_size: 1,
            lr: 2e-4, warmup_steps: 0, grad_clip: None, schedule_kind: ScheduleKind::Cosine,
            ema_decay: 0.999, hflip_prob: 0.0 }],
    };
    let cfg = plan.resolve_model(&ds2).unwrap();
    let st = TrainState::init(&plan, &cfg).unwrap();
    let sched = plan.schedule_for(&plan.stages[0]).unwrap();
    let req = maskdiff::sampler::SampleRequest {
        n: 20, sampler: maskdiff::sampler::SamplerKind::Ddim { steps: 50 },
        mask: None, seed: 0, use_ema: true, threads: 1,
    };
    let t0 = Instant::now();
    let _ = maskdiff::sampler::sample_images(&st.ema, &cfg, &sched, &req).unwrap();
    println!("ddim(50) 64-token sample: {:.1} ms each", t0.elapsed().as_secs_f64() * 1000.0 / 20.0);

    let _ = Tensor::<f32>::zeros(vec![1]);
}
