// scratch calibration harness (not part of the deliverable)
use robustaug_core::attack::*;
use robustaug_core::augment::AugmentSpec;
use robustaug_core::data::*;
use robustaug_core::diagnostics;
use robustaug_core::model::ArchSpec;
use robustaug_core::trainer::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.25);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.18);
    let n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(448);
    let epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(60);
    let tau: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.98);
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1);
    let aug: String = args.get(7).cloned().unwrap_or("padcrop".into());
    let train_eps: f64 = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(8.0/255.0);
    let lr: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let beta: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(2.0);

    let eps = 8.0 / 255.0;
    let ds = synthetic_dataset(
        SyntheticKind::GaussianBlobs { separation: sep, noise },
        n,
        2,
        777,
    )
    .unwrap();
    let val_size = 192;
    let split = make_split(&ds, val_size, 0, 3).unwrap();
    let arch = ArchSpec::small_cnn((3, 16, 16), 2);
    let augment = match aug.as_str() {
        "padcrop" => vec![AugmentSpec::PadCrop { pad: 2, flip: true }],
        "cutmix" => vec![
            AugmentSpec::PadCrop { pad: 2, flip: true },
            AugmentSpec::CutMix,
        ],
        "none" => vec![],
        _ => panic!("aug {aug}"),
    };
    let config = TrainConfig {
        epochs,
        batch_size: 64,
        base_lr: lr,
        lr_drop_num: 2,
        lr_drop_den: 3,
        lr_drop_factor: 10.0,
        weight_decay: 5e-4,
        momentum: 0.9,
        trades_beta: beta,
        ema_decay: tau,
        augment,
        attack: AttackConfig {
            ball: PerturbationBall::linf(train_eps),
            steps: 10,
            step_size: None,
            restarts: 1,
            init: AttackInit::UniformRandom,
            objective: AttackObjective::KlToLabel,
            optimizer: AttackOptimizer::Adam,
        },
        eval_attack: AttackConfig {
            ball: PerturbationBall::linf(eps),
            steps: 40,
            step_size: None,
            restarts: 1,
            init: AttackInit::UniformRandom,
            objective: AttackObjective::Ce,
            optimizer: AttackOptimizer::Adam,
        },
        eval_every: 20,
        checkpoint_steps: vec![],
        inner_objective: InnerObjective::KlLabel,
        seed,
        timing: false,
    };

    let t0 = Instant::now();
    let out = train(&config, &arch, &ds, &split).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    // train-set robust accuracy of final and snapshot params via log?
    // measure final train robust directly
    let train_batch = robustaug_core::augment::ImageBatch::from_dataset(&ds, &split.train[..128.min(split.train.len())].to_vec()).unwrap();
    let (train_rob, _) = robust_accuracy(&out.params, &arch, &train_batch, &config.eval_attack, 123).unwrap();
    let train_clean = clean_accuracy(&out.params, &arch, &train_batch).unwrap();
    println!("# sep={sep} noise={noise} n={n} epochs={epochs} tau={tau} seed={seed} aug={aug} lr={lr} beta={beta} time={secs:.1}s train_rob={train_rob:.4} train_clean={train_clean:.4}");
    println!("step,clean,robust,clean_ema,robust_ema,loss");
    for r in &out.log.records {
        println!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.step, r.clean_val, r.robust_val, r.clean_val_ema, r.robust_val_ema, r.train_loss
        );
    }
    let best = out.log.records.iter().map(|r| r.robust_val).fold(f64::MIN, f64::max);
    let last = out.log.records.last().unwrap();
    println!(
        "# best_robust={best:.4} final_robust={:.4} gap_pp={:.2} final_ema={:.4} best_ema={:.4}",
        last.robust_val,
        (best - last.robust_val) * 100.0,
        last.robust_val_ema,
        out.log.records.iter().map(|r| r.robust_val_ema).fold(f64::MIN, f64::max)
    );
    let _ = diagnostics::analysis_attack(PerturbationBall::linf(eps), 1);
}
