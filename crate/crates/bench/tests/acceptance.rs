//! End-to-end acceptance checks. Prints one verdict line per criterion and
//! exits non-zero if any check fails.

use std::process::ExitCode;
use std::time::Instant;

use tes_bench::run::{run_with_assets, InferAssets};
use tes_bench::{calibrate, run_experiment, write_bundle, DatasetSpec, ExperimentConfig, Scenario, SchedulerSpec};
use tes_core::data::{partition, synth_dataset, PartitionMode};
use tes_core::fl::{fedavg, local_update, mc_round_delay, Scheduler};
use tes_core::infer::oracle::{brute_force_plan_value, Expectimax};
use tes_core::infer::{build_mdp, offline_dp_plan, Arrival, Augment, LevelTable, MdpConfig, DEFAULT_TAU};
use tes_core::nn::{batch_matrix, init_model, train_epoch, Model, SgdConfig};
use tes_core::rng::{derive_stream, StreamId};

type Check = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

const FL_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const INFER_SEEDS: [u64; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

fn fl_base() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        scenario: Scenario::Fl,
        seeds: FL_SEEDS.to_vec(),
        dataset: DatasetSpec::Synth {
            n_train: 10_000,
            n_validation: 1_000,
            n_test: 2_000,
        },
        ..ExperimentConfig::default()
    };
    c.fl.eval_every = 0;
    c
}

fn calibration() -> Check {
    let config = fl_base();
    let cal = calibrate(&config, 1.71, 10_000, 1)?;
    let fleet = config.fl.device.fleet(20);
    let bits = config.fl.model_size_bits;
    let (d20, _) = mc_round_delay(&fleet, 20, cal.total_bandwidth_hz, bits, 10_000, 99)?;
    let (d1, _) = mc_round_delay(&fleet, 1, cal.total_bandwidth_hz, bits, 10_000, 99)?;
    let rounds = (50.0 / d1).floor();
    let again = calibrate(&config, 1.71, 10_000, 1)?;
    let stable = (again.total_bandwidth_hz / cal.total_bandwidth_hz - 1.0).abs() < 0.005;
    let pass = (d20 / 1.71 - 1.0).abs() <= 0.01 && (104.0..=140.0).contains(&rounds) && stable;
    Ok((
        pass,
        format!(
            "B = {:.4e} Hz, held-out E[D|20] = {d20:.4} s, E[D|1] = {d1:.4} s, {rounds} rounds at K=1, refit drift {:.2e}",
            cal.total_bandwidth_hz,
            again.total_bandwidth_hz / cal.total_bandwidth_hz - 1.0
        ),
    ))
}

fn monotone_delay() -> Check {
    let config = fl_base();
    let fleet = config.fl.device.fleet(20);
    let hz = config.fl.total_bandwidth_hz;
    let points: Vec<(f64, f64)> = (1..=20)
        .map(|k| mc_round_delay(&fleet, k, hz, config.fl.model_size_bits, 10_000, 7))
        .collect::<Result<_, _>>()?;
    let mut weakest = f64::INFINITY;
    for w in points.windows(2) {
        let gap = (w[1].0 - w[0].0) / (w[0].1.hypot(w[1].1));
        weakest = weakest.min(gap);
    }
    Ok((
        weakest > 3.0,
        format!(
            "E[D|1] = {:.3} s .. E[D|20] = {:.3} s, smallest step {weakest:.1} sigma",
            points[0].0, points[19].0
        ),
    ))
}

fn fc_against_fixed() -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, mode) in [
        ("iid", PartitionMode::Iid),
        ("shards(2)", PartitionMode::Shards(2)),
        ("shards(1)", PartitionMode::Shards(1)),
    ] {
        let mut config = fl_base();
        config.fl.partition = mode;
        let mut fixed = Vec::new();
        for k in [1, 2, 5, 10, 20] {
            config.fl.scheduler = Scheduler::Fixed(k);
            let acc = run_experiment(&config, 1)?.summary.mean("final_accuracy").unwrap_or(f64::NAN);
            fixed.push((k, acc));
        }
        config.fl.scheduler = Scheduler::Fc;
        let fc_bundle = run_experiment(&config, 1)?;
        let fc = fc_bundle.summary.mean("final_accuracy").unwrap_or(f64::NAN);
        let best = fixed.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        let ok = fc >= best - 0.01;
        pass &= ok;
        let row: Vec<String> = fixed.iter().map(|(k, a)| format!("K{k} {a:.4}")).collect();
        parts.push(format!(
            "{name}: FC {fc:.4} (mean K {:.1}) vs {} [{}]",
            fc_bundle.summary.mean("mean_k").unwrap_or(f64::NAN),
            row.join(", "),
            if ok { "ok" } else { "short" }
        ));
        if mode == PartitionMode::Shards(2) {
            let ends = fixed[0].1 < fc && fixed[4].1 < fc;
            pass &= ends;
            parts.push(format!("shards(2) interior: K1 < FC {}, K20 < FC {}", fixed[0].1 < fc, fixed[4].1 < fc));
        }
    }
    Ok((pass, parts.join("; ")))
}

fn fedavg_identity() -> Check {
    let ds = synth_dataset(600, 4)?;
    let mut worst = 0.0f64;
    for mode in [PartitionMode::Iid, PartitionMode::Shards(2)] {
        let part = partition(&ds, 6, mode, 4)?;
        let global = init_model(4);
        let mut locals = Vec::new();
        for (d, idx) in part.assignment.iter().enumerate() {
            let sgd = SgdConfig { lr: 0.1, batch: idx.len() };
            let mut rng = derive_stream(4, StreamId::new("acceptance", d as u64, "shuffle"));
            locals.push(local_update(&global, &ds, idx, 1, sgd, &mut rng)?);
        }
        let weights: Vec<usize> = part.assignment.iter().map(Vec::len).collect();
        let avg = fedavg(&locals.iter().collect::<Vec<_>>(), &weights)?;
        let all = part.assignment.concat();
        let mut pooled = global.clone();
        let sgd = SgdConfig { lr: 0.1, batch: all.len() };
        train_epoch(&mut pooled, &ds, &all, sgd, &mut derive_stream(4, StreamId::new("acceptance", 99, "shuffle")))?;
        let diff = avg.flat().iter().zip(pooled.flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    Ok((worst < 1e-10, format!("max parameter gap {worst:.2e} over iid and shards(2)")))
}

fn gradient_check() -> Check {
    const H: f64 = 1e-5;
    let ds = synth_dataset(400, 17)?;
    let mut rng = derive_stream(17, StreamId::new("acceptance", 0, "gradcheck"));
    let mut worst = 0.0f64;
    for batch in 0..20u64 {
        let model = init_model(batch + 1);
        let idx: Vec<usize> = (0..8).map(|_| rng.below(ds.len() as u64) as usize).collect();
        let x = batch_matrix(&ds, &idx);
        let labels: Vec<u8> = idx.iter().map(|&i| ds.label(i)).collect();
        let loss = |flat: &[f64]| -> f64 { Model::from_flat(flat).expect("same shape").loss_and_grad(x.view(), &labels).0 };
        let analytic = model.loss_and_grad(x.view(), &labels).1.flat();
        let base = model.flat();
        for _ in 0..200 {
            let p = rng.below(base.len() as u64) as usize;
            let (mut plus, mut minus) = (base.clone(), base.clone());
            plus[p] += H;
            minus[p] -= H;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
            let scale = analytic[p].abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic[p] - numeric).abs() / scale);
        }
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e} over 20 batches")))
}

fn infer_base() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        scenario: Scenario::Infer,
        seeds: INFER_SEEDS.to_vec(),
        ..ExperimentConfig::default()
    };
    c.infer.lambda = 0.5;
    c.infer.deadline = 12;
    c
}

fn completion(config: &ExperimentConfig, assets: &InferAssets) -> Result<f64, Box<dyn std::error::Error>> {
    Ok(run_with_assets(config, 1, Some(assets))?.summary.mean("completion_ratio").unwrap_or(f64::NAN))
}

fn inference_ladder(assets: &InferAssets) -> Check {
    let mut config = infer_base();
    let l0_slots = assets.table.slots(0);
    let service_rate = 1.0 / f64::from(l0_slots);
    let pressured = config.infer.lambda > service_rate;

    config.infer.scheduler = SchedulerSpec::NoCompression;
    let none = completion(&config, assets)?;
    config.infer.scheduler = SchedulerSpec::Mdp;
    config.infer.augment = Augment::Off;
    let plain = completion(&config, assets)?;
    config.infer.augment = Augment::Uncertainty { tau: DEFAULT_TAU };
    let unc = completion(&config, assets)?;
    config.infer.augment = Augment::Oracle;
    let oracle = completion(&config, assets)?;

    let pass = pressured && none < 0.75 && oracle >= none + 0.20 && plain <= unc && unc <= oracle;
    Ok((
        pass,
        format!(
            "L0 takes {l0_slots} slots (capacity {service_rate:.2}/slot < lambda {}): no-compression {none:.4}, MDP {plain:.4}, MDP+uncertainty {unc:.4}, MDP+oracle {oracle:.4}",
            config.infer.lambda
        ),
    ))
}

fn lossy_channel(assets: &InferAssets) -> Check {
    let mut config = infer_base();
    config.infer.scheduler = SchedulerSpec::Mdp;
    config.infer.augment = Augment::Oracle;
    let clean = completion(&config, assets)?;
    config.infer.channel.packet_loss_p = 0.05;
    let resend = completion(&config, assets)?;
    config.infer.retransmit = false;
    let raw = completion(&config, assets)?;
    let pass = (clean - resend).abs() <= 0.02 && raw <= resend - 0.05;
    Ok((
        pass,
        format!("loss 0: {clean:.4}, loss 0.05 with retransmission {resend:.4}, without {raw:.4}"),
    ))
}

fn optimality_oracles() -> Check {
    let universe = [0u64, 1, 2, 3, 4];
    let mut traces = Vec::new();
    for mask in 1u32..32 {
        let slots: Vec<u64> = universe.iter().copied().filter(|s| mask >> s & 1 == 1).collect();
        if slots.len() <= 3 {
            traces.push(slots);
        }
    }
    let ladders: Vec<Vec<u32>> = (1..=4)
        .flat_map(|a| {
            let mut v = vec![vec![a]];
            for b in 1..a {
                v.push(vec![a, b]);
                for c in 1..b {
                    v.push(vec![a, b, c]);
                }
            }
            v
        })
        .collect();
    let accuracy_sets = [[0.95, 0.8, 0.6], [0.9, 0.85, 0.84], [0.99, 0.5, 0.1]];
    let (mut checked, mut dp_gap) = (0usize, 0.0f64);
    for slots in &traces {
        let trace: Vec<Arrival> = slots.iter().enumerate().map(|(id, &slot)| Arrival { id, slot, sample: 0 }).collect();
        for deadline in 1..=4u32 {
            for ladder in &ladders {
                for acc in &accuracy_sets {
                    let pairs: Vec<(u32, f64)> = ladder.iter().zip(acc).map(|(&s, &a)| (s, a)).collect();
                    let table = LevelTable::from_pairs(&pairs)?;
                    let plan = offline_dp_plan(&trace, &table, deadline, usize::MAX)?;
                    dp_gap = dp_gap.max((plan.value - brute_force_plan_value(&trace, &table, deadline)).abs());
                    checked += 1;
                }
            }
        }
    }

    let table = LevelTable::from_pairs(&[(2, 0.95), (1, 0.7)])?;
    let config = MdpConfig {
        lambda: 0.5,
        deadline: 3,
        q_max: 2,
        ..MdpConfig::default()
    };
    let policy = build_mdp(&config, &table)?;
    let mut oracle = Expectimax::new(&table, 0.5, 3, 2, config.gamma);
    let mut mdp_gap = 0.0f64;
    for state in policy.states() {
        let v = policy.value(state).unwrap_or(f64::INFINITY);
        mdp_gap = mdp_gap.max((v - oracle.value(state.remaining(), 1500)).abs());
    }
    let pass = dp_gap < 1e-9 && mdp_gap < 1e-3;
    Ok((
        pass,
        format!(
            "offline DP vs exhaustive search on {checked} instances: max gap {dp_gap:.1e}; MDP vs expectimax on {} states: max gap {mdp_gap:.1e}",
            policy.n_states()
        ),
    ))
}

fn determinism(assets: &InferAssets) -> Check {
    let mut fl = fl_base();
    fl.seeds = vec![3, 4];
    fl.dataset = DatasetSpec::Synth {
        n_train: 2_000,
        n_validation: 200,
        n_test: 400,
    };
    fl.fl.delay_budget_s = 10.0;
    let mut central = fl.clone();
    central.scenario = Scenario::Centralized;
    central.centralized.delay_budget_s = 5.0;
    let mut infer = infer_base();
    infer.seeds = vec![3, 4];
    infer.infer.channel.packet_loss_p = 0.05;
    infer.infer.augment = Augment::Oracle;

    let mut identical = true;
    let mut files = 0;
    for config in [&fl, &central, &infer] {
        let a = run_with_assets(config, 1, Some(assets))?;
        let b = run_with_assets(config, 2, Some(assets))?;
        let (da, db) = (tempfile::tempdir()?, tempfile::tempdir()?);
        write_bundle(&a, da.path())?;
        write_bundle(&b, db.path())?;
        for entry in std::fs::read_dir(da.path())? {
            let name = entry?.file_name();
            identical &= std::fs::read(da.path().join(&name))? == std::fs::read(db.path().join(&name))?;
            files += 1;
        }
    }
    Ok((identical, format!("{files} bundle files byte-identical across reruns with 1 and 2 workers")))
}

fn centralized_filtering() -> Check {
    let mut config = fl_base();
    config.scenario = Scenario::Centralized;
    let smart = run_experiment(&config, 1)?.summary.values("final_accuracy");
    config.centralized = config.centralized.baseline();
    let plain = run_experiment(&config, 1)?.summary.values("final_accuracy");
    let margins: Vec<f64> = smart.iter().zip(&plain).map(|(a, b)| a - b).collect();
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    let shown: Vec<String> = margins.iter().map(|m| format!("{m:+.4}")).collect();
    Ok((
        margins.len() >= 3 && mean > 0.0,
        format!("paired margins over {} seeds [{}], mean {mean:+.4}", margins.len(), shown.join(", ")),
    ))
}

fn main() -> ExitCode {
    let assets = match InferAssets::prepare(&infer_base()) {
        Ok(a) => a,
        Err(e) => {
            println!("[FAIL] setup: inference classifier: {e}");
            return ExitCode::FAILURE;
        }
    };
    let checks: Vec<Criterion<'_>> = vec![
        ("bandwidth calibration", Box::new(calibration)),
        ("round delay grows with K", Box::new(monotone_delay)),
        ("FC against fixed K", Box::new(fc_against_fixed)),
        ("FedAvg equals pooled full-batch step", Box::new(fedavg_identity)),
        ("gradient check", Box::new(gradient_check)),
        ("inference under queueing pressure", Box::new(|| inference_ladder(&assets))),
        ("lossy channel and retransmission", Box::new(|| lossy_channel(&assets))),
        ("planner optimality oracles", Box::new(optimality_oracles)),
        ("determinism", Box::new(|| determinism(&assets))),
        ("centralized filtering and compression", Box::new(centralized_filtering)),
    ];
    let mut failed = 0;
    for (n, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!(
            "[{}] criterion {} ({name}): {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            n + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria pass", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
