// Temporary tuning harness; not part of the deliverable surface.
use ngflow::network::{Activation, Architecture, NetworkParams};
use ngflow::optimizers::{
    run_adam, run_ngf, AdamConfig, LambdaTable, NgfConfig, StopCriteria, StopMode,
};
use ngflow::problems::{
    exact_ritz_energy, mor_dataset_standard, mor_problem, ritz_problem, sl_problem, test_errors,
    ErrorMetric,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).cloned().unwrap_or_else(|| "sl".into());
    let k: u32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(5);
    let depth: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);
    let max_epochs: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(300);

    let scale: f64 = std::env::var("TUNE_INIT_SCALE")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    let rescale = |mut net: NetworkParams<f64>| {
        let flat: Vec<f64> = net.flatten().iter().map(|v| v * scale).collect();
        net = NetworkParams::from_flat(net.arch.clone(), &flat, net.active_mask.clone()).unwrap();
        net
    };

    let t0 = Instant::now();
    match mode.as_str() {
        "sl" => {
            let (energy, test) = sl_problem(k, 201, 301, 42);
            let arch = Architecture::new(1, vec![15; depth], Activation::Tanh).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = rescale(NetworkParams::<f64>::random_init(arch, &mut rng));
            let cfg = NgfConfig { max_epochs, ..NgfConfig::default() };
            let criteria = StopCriteria { tol_abs: Some(1e-5), ..StopCriteria::default() };
            let (trained, record) =
                run_ngf(&energy, &net, &[energy.full_batch()], &cfg, &criteria, StopMode::AbsTol)
                    .unwrap();
            let l2 = test_errors(&trained, &test, ErrorMetric::L2).unwrap();
            println!(
                "sl k={k} L={depth} seed={seed}: epochs={} final={:.3e} l2={:.3e} flag={:?} t={:.1?}",
                record.epochs(), record.final_loss().unwrap(), l2, record.flag, t0.elapsed()
            );
        }
        "sl_adam" => {
            let (energy, test) = sl_problem(k, 201, 301, 42);
            let arch = Architecture::new(1, vec![15; depth], Activation::Tanh).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = rescale(NetworkParams::<f64>::random_init(arch, &mut rng));
            let cfg = AdamConfig { max_iters: max_epochs, ..AdamConfig::default() };
            let criteria = StopCriteria { tol_abs: Some(1e-5), ..StopCriteria::default() };
            let (trained, record) =
                run_adam(&energy, &net, &[energy.full_batch()], &cfg, &criteria, StopMode::AbsTol)
                    .unwrap();
            let l2 = test_errors(&trained, &test, ErrorMetric::L2).unwrap();
            println!(
                "sl_adam k={k} L={depth} seed={seed}: epochs={} final={:.3e} l2={:.3e} flag={:?} t={:.1?}",
                record.epochs(), record.final_loss().unwrap(), l2, record.flag, t0.elapsed()
            );
        }
        "ritz" => {
            let (energy, test) = ritz_problem(k, 401, 301);
            let arch = Architecture::new(1, vec![15; depth], Activation::Tanh).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = rescale(NetworkParams::<f64>::random_init(arch, &mut rng));
            let cfg = NgfConfig { max_epochs, ..NgfConfig::default() };
            let criteria = StopCriteria::default();
            let (trained, record) =
                run_ngf(&energy, &net, &[energy.full_batch()], &cfg, &criteria, StopMode::AbsTol)
                    .unwrap();
            let l2 = test_errors(&trained, &test, ErrorMetric::L2).unwrap();
            let h1 = test_errors(&trained, &test, ErrorMetric::H1).unwrap();
            println!(
                "ritz k={k} L={depth} seed={seed}: epochs={} final={:.6} exact={:.6} l2={:.3e} h1={:.3e} t={:.1?}",
                record.epochs(), record.final_loss().unwrap(), exact_ritz_energy(k),
                l2, h1, t0.elapsed()
            );
        }
        "mor" => {
            let ds = mor_dataset_standard(7).unwrap();
            let (energy, batches, test) = mor_problem(&ds, true);
            let arch = Architecture::new(3, vec![15; depth], Activation::Tanh).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = rescale(NetworkParams::<f64>::random_init(arch, &mut rng));
            let cfg = NgfConfig {
                max_epochs,
                lambda_table: LambdaTable::mor(),
                ..NgfConfig::default()
            };
            let criteria = StopCriteria { tol_abs: Some(5e-5), ..StopCriteria::default() };
            let (trained, record) =
                run_ngf(&energy, &net, &batches, &cfg, &criteria, StopMode::AbsTol).unwrap();
            let l2 = test_errors(&trained, &test, ErrorMetric::L2).unwrap();
            println!(
                "mor L={depth} seed={seed}: epochs={} final={:.3e} l2={:.3e} flag={:?} t={:.1?}",
                record.epochs(), record.final_loss().unwrap(), l2, record.flag, t0.elapsed()
            );
        }
        "exp_sl" => {
            use ngflow::expansion::*;
            let (energy, test) = sl_problem(k, 201, 301, 42);
            let arch = Architecture::new(1, vec![15; depth], Activation::Tanh).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = rescale(NetworkParams::<f64>::random_init(arch, &mut rng));
            let methods: Vec<InitMethod> = match std::env::var("TUNE_METHOD").as_deref() {
                Ok("random") => vec![InitMethod::Random],
                Ok("aligned") => vec![InitMethod::GradientAligned],
                _ => vec![InitMethod::Random, InitMethod::GradientAligned],
            };
            for method in methods {
                let ascale: f64 = std::env::var("TUNE_ALIGN_SCALE")
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(0.5);
                let init_cap: Option<usize> = std::env::var("TUNE_INIT_EPOCHS")
                    .ok()
                    .and_then(|s| s.parse().ok());
                let alpha0: f64 = std::env::var("TUNE_ALPHA0")
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(1e-3);
                let exp_cfg = ExpansionConfig {
                    init_method: method,
                    term_abs: None,
                    term_rel: None,
                    max_total_iters: Some(3000),
                    random_scale: if method == InitMethod::GradientAligned { ascale } else { 0.5 },
                    initial_max_epochs: init_cap,
                    alpha0,
                    ..ExpansionConfig::default()
                };
                let criteria = ExpansiveCriteria {
                    ngf: StopCriteria {
                        tol_abs: Some(1e-5),
                        sat_abs: 1e-7,
                        sat_rel: 5e-3,
                        lookback: 5,
                    },
                    adam: StopCriteria {
                        tol_abs: Some(1e-5),
                        sat_abs: 1e-8,
                        sat_rel: 5e-4,
                        lookback: 5,
                    },
                    mode: StopMode::Both,
                };
                let t = Instant::now();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let adam_cfg = AdamConfig {
                    tau0: 5e-4,
                    decay_rate: 1e-4,
                    max_iters: 400,
                    ..AdamConfig::default()
                };
                let phase_epochs: usize = std::env::var("TUNE_PHASE_EPOCHS")
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(1000);
                let ngf_cfg = NgfConfig { max_epochs: phase_epochs, ..NgfConfig::default() };
                let run = run_expansive_training(
                    &energy,
                    &net,
                    &[energy.full_batch()],
                    &ngf_cfg,
                    &adam_cfg,
                    &exp_cfg,
                    &criteria,
                    &mut rng,
                )
                .unwrap();
                let l2 = test_errors(&run.params, &test, ErrorMetric::L2).unwrap();
                let fellback: Vec<bool> = run
                    .summary
                    .phases
                    .iter()
                    .filter_map(|p| p.expansion.as_ref().map(|e| e.fell_back))
                    .collect();
                println!(
                    "exp_sl k={k} L0={depth} seed={seed} {method:?}: iters={} exp={} final={:.3e} l2={:.3e} out={:?} fellback={fellback:?} t={:.1?}",
                    run.summary.total_iterations,
                    run.summary.expansions,
                    run.summary.final_loss,
                    l2,
                    run.summary.outcome,
                    t.elapsed()
                );
                if std::env::var("TUNE_DETAIL").is_ok() {
                    for p in &run.summary.phases {
                        let ev = p
                            .expansion
                            .as_ref()
                            .map(|e| format!(" alpha={:?} fellback={}", e.candidate_alpha, e.fell_back))
                            .unwrap_or_default();
                        println!(
                            "    {:<12} iters={:<5} entry={:.3e} exit={:.3e} flag={:?}{ev}",
                            p.name, p.iterations, p.entry_loss, p.exit_loss, p.flag
                        );
                    }
                }
            }
        }
        "exp_ritz" => {
            use ngflow::expansion::*;
            let (energy, test) = ritz_problem(k, 401, 301);
            let arch = Architecture::new(1, vec![15; depth], Activation::Tanh).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = rescale(NetworkParams::<f64>::random_init(arch, &mut rng));
            let methods: Vec<InitMethod> = match std::env::var("TUNE_METHOD").as_deref() {
                Ok("random") => vec![InitMethod::Random],
                Ok("aligned") => vec![InitMethod::GradientAligned],
                _ => vec![InitMethod::Random, InitMethod::GradientAligned],
            };
            for method in methods {
                let exp_cfg = ExpansionConfig {
                    init_method: method,
                    term_abs: Some(5e-3),
                    term_rel: Some(1e-6),
                    max_total_iters: Some(3000),
                    ..ExpansionConfig::default()
                };
                let criteria = ExpansiveCriteria {
                    ngf: StopCriteria {
                        tol_abs: None,
                        sat_abs: 1e-8,
                        sat_rel: 5e-5,
                        lookback: 5,
                    },
                    adam: StopCriteria {
                        tol_abs: None,
                        sat_abs: 1e-9,
                        sat_rel: 5e-6,
                        lookback: 5,
                    },
                    mode: StopMode::Saturation,
                };
                let t = Instant::now();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let adam_cfg = AdamConfig {
                    tau0: 5e-4,
                    decay_rate: 1e-4,
                    max_iters: 400,
                    ..AdamConfig::default()
                };
                let run = run_expansive_training(
                    &energy,
                    &net,
                    &[energy.full_batch()],
                    &NgfConfig::default(),
                    &adam_cfg,
                    &exp_cfg,
                    &criteria,
                    &mut rng,
                )
                .unwrap();
                let h1 = test_errors(&run.params, &test, ErrorMetric::H1).unwrap();
                println!(
                    "exp_ritz k={k} L0={depth} seed={seed} {method:?}: iters={} exp={} final={:.5} h1={:.3e} out={:?} t={:.1?}",
                    run.summary.total_iterations,
                    run.summary.expansions,
                    run.summary.final_loss,
                    h1,
                    run.summary.outcome,
                    t.elapsed()
                );
            }
        }
        "exp_mor" => {
            use ngflow::expansion::*;
            let ds = mor_dataset_standard(7).unwrap();
            let (energy, batches, test) = mor_problem(&ds, true);
            let arch = Architecture::new(3, vec![15; depth], Activation::Tanh).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = rescale(NetworkParams::<f64>::random_init(arch, &mut rng));
            let methods: Vec<InitMethod> = match std::env::var("TUNE_METHOD").as_deref() {
                Ok("random") => vec![InitMethod::Random],
                Ok("aligned") => vec![InitMethod::GradientAligned],
                _ => vec![InitMethod::Random, InitMethod::GradientAligned],
            };
            for method in methods {
                let exp_cfg = ExpansionConfig {
                    init_method: method,
                    term_abs: None,
                    term_rel: None,
                    max_total_iters: Some(3000),
                    ..ExpansionConfig::default()
                };
                let criteria = ExpansiveCriteria {
                    ngf: StopCriteria {
                        tol_abs: Some(1e-5),
                        sat_abs: 1e-7,
                        sat_rel: 5e-3,
                        lookback: 5,
                    },
                    adam: StopCriteria {
                        tol_abs: Some(1e-5),
                        sat_abs: 1e-8,
                        sat_rel: 5e-4,
                        lookback: 5,
                    },
                    mode: StopMode::Both,
                };
                let table = match std::env::var("TUNE_MOR_TABLE").as_deref() {
                    Ok("std") => LambdaTable::standard(),
                    _ => LambdaTable::mor(),
                };
                let ngf_cfg = NgfConfig {
                    lambda_table: table,
                    ..NgfConfig::default()
                };
                let adam_cfg = AdamConfig {
                    tau0: 5e-4,
                    decay_rate: 1e-4,
                    max_iters: 400,
                    ..AdamConfig::default()
                };
                let train_batches: Vec<Vec<usize>> = if std::env::var("TUNE_MOR_FULLBATCH").is_ok()
                {
                    vec![energy.full_batch()]
                } else {
                    batches.clone()
                };
                let t = Instant::now();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let run = run_expansive_training(
                    &energy, &net, &train_batches, &ngf_cfg, &adam_cfg, &exp_cfg, &criteria, &mut rng,
                )
                .unwrap();
                let l2 = test_errors(&run.params, &test, ErrorMetric::L2).unwrap();
                println!(
                    "exp_mor L0={depth} seed={seed} {method:?}: iters={} exp={} final={:.3e} l2={:.3e} out={:?} t={:.1?}",
                    run.summary.total_iterations,
                    run.summary.expansions,
                    run.summary.final_loss,
                    l2,
                    run.summary.outcome,
                    t.elapsed()
                );
                if std::env::var("TUNE_DETAIL").is_ok() {
                    for p in &run.summary.phases {
                        println!(
                            "    {:<12} iters={:<5} entry={:.3e} exit={:.3e} flag={:?}",
                            p.name, p.iterations, p.entry_loss, p.exit_loss, p.flag
                        );
                    }
                }
            }
        }
        "bench" => {
            use ngflow::linalg::solve_spd_regularized;
            let ds = mor_dataset_standard(7).unwrap();
            let (energy, batches, _) = mor_problem(&ds, true);
            let arch = Architecture::new(3, vec![15; 4], Activation::Tanh).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let net = NetworkParams::<f64>::random_init(arch, &mut rng);
            let batch = &batches[0];
            let t = Instant::now();
            let data = energy.batch_data(&net, batch).unwrap();
            println!("batch_data: {:?}", t.elapsed());
            let t = Instant::now();
            let g = energy.flow_from_data(&data, None);
            println!("gramian ({}x{}): {:?}", g.dim(), g.dim(), t.elapsed());
            let grad = energy.grad_from_data(&data);
            let t = Instant::now();
            let delta = solve_spd_regularized(&g, 1e-5, &grad).unwrap();
            println!("solve: {:?} (|d|={:.2e})", t.elapsed(), delta.iter().map(|v| v*v).sum::<f64>().sqrt());
            let t = Instant::now();
            let _ = energy.value(&net, batch).unwrap();
            println!("value: {:?}", t.elapsed());
        }
        other => panic!("unknown mode {other}"),
    }
}

#[allow(dead_code)]
fn bench_step() {}
