use std::path::Path;

use mflb_core::{ArrivalProcess, FixedRule, QueueDist, SystemConfig};
use mflb_harness::records::{read_rows, write_rows, ScalingRecord, SummaryRow, MFC_LIMIT_ROW};
use mflb_harness::{evaluate_policy_finite, evaluate_policy_mfc, scaling_study, EvalResult, ExperimentConfig};
use mflb_core::kv::KvMap;

fn saturated(m: usize) -> SystemConfig {
    let mut s = SystemConfig::standard(2.0);
    s.num_queues = m;
    s.num_clients = 4 * m;
    // Service is negligible: every arrival hits a full buffer.
    s.service_rate = 1e-300;
    s.arrival = ArrivalProcess::constant(0.8).unwrap();
    s.nu0 = QueueDist::point_mass(5, 5);
    s
}

#[test]
fn confidence_interval_basics() {
    let r = EvalResult::from_samples(vec![2.0]);
    assert_eq!((r.mean, r.half_width), (2.0, 0.0));
    let r = EvalResult::from_samples(vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(r.mean, 2.5);
    let s = (5.0f64 / 3.0).sqrt();
    assert!((r.half_width - 1.96 * s / 2.0).abs() < 1e-15);
    assert_eq!((r.min, r.max), (1.0, 4.0));
}

#[test]
fn saturated_system_drops_every_arrival() {
    // Total drops per replication are Poisson with mean M λ Δt T_e.
    let (m, horizon) = (10, 5);
    let system = saturated(m);
    let rule = FixedRule::mf_rnd(5, 2);
    let expected = m as f64 * 0.8 * 2.0 * horizon as f64;
    let small = evaluate_policy_finite(&rule, &system, horizon, 100, 1, 1).unwrap();
    let large = evaluate_policy_finite(&rule, &system, horizon, 400, 1, 1).unwrap();
    let t = small.total_drops.as_ref().unwrap();
    assert!((t.mean - expected).abs() <= 3.0 * (expected / 100.0).sqrt(), "mean {}", t.mean);
    let ratio = large.total_drops.as_ref().unwrap().half_width / t.half_width;
    assert!((ratio - 0.5).abs() < 0.15, "CI ratio {ratio}");

    let mfc = evaluate_policy_mfc(&rule, &system, horizon, 3, 1, 1).unwrap();
    assert!((mfc.drops_per_queue.mean - 0.8 * 2.0 * horizon as f64).abs() < 1e-9);
    assert!(mfc.total_drops.is_none());
}

#[test]
fn threads_do_not_change_results() {
    let system = SystemConfig::standard(3.0);
    let rule = FixedRule::mf_jsq(5, 2);
    let serial = evaluate_policy_finite(&rule, &system, 10, 8, 5, 1).unwrap();
    let parallel = evaluate_policy_finite(&rule, &system, 10, 8, 5, 3).unwrap();
    assert_eq!(serial.replications, parallel.replications);
    assert_eq!(serial.drops_per_queue, parallel.drops_per_queue);
}

#[test]
fn scaling_study_rows_and_limit() {
    let system = SystemConfig::standard(2.0);
    let rule = FixedRule::mf_rnd(5, 2);
    let rows = scaling_study(&rule, &system, &[(10, 100), (30, 900)], 20, 10, 3, 1).unwrap();
    assert_eq!(rows.len(), 3);
    let limit = rows.last().unwrap();
    assert_eq!(limit.num_queues, None);
    assert_eq!(limit.gap, 0.0);
    let direct = evaluate_policy_mfc(&rule, &system, 20, 10, 3, 1).unwrap();
    assert_eq!(limit.eval.drops_per_queue, direct.drops_per_queue);
    for r in &rows[..2] {
        assert_eq!(r.gap, (r.eval.drops_per_queue.mean - direct.drops_per_queue.mean).abs());
    }
    // Finite and mean-field replications share their level paths.
    assert_eq!(rows[0].eval.replications[4].levels, direct.replications[4].levels);

    let records: Vec<ScalingRecord> = rows.iter().map(|r| ScalingRecord::new("mf_rnd", 2.0, r)).collect();
    assert_eq!(records[2].row, MFC_LIMIT_ROW);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    write_rows(&path, &records).unwrap();
    assert_eq!(read_rows::<ScalingRecord>(&path).unwrap(), records);
}

#[test]
fn summary_csv_round_trips() {
    let system = SystemConfig::standard(1.5);
    let eval = evaluate_policy_finite(&FixedRule::mf_jsq(5, 2), &system, 7, 4, 9, 1).unwrap();
    let mfc = evaluate_policy_mfc(&FixedRule::mf_jsq(5, 2), &system, 7, 4, 9, 1).unwrap();
    let rows = vec![
        SummaryRow::new("mf_jsq", 1.5, Some((100, 10_000)), &eval),
        SummaryRow::new("mf_jsq", 1.5, None, &mfc),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summary.csv");
    write_rows(&path, &rows).unwrap();
    assert_eq!(read_rows::<SummaryRow>(&path).unwrap(), rows);
}

#[test]
fn experiment_config_parsing() {
    let kv = KvMap::parse(
        "delta_t = 4\nexperiment.policies = mf_rnd, learned:ckpt/best.ckpt\nexperiment.total_time = 100\nsweep.queues = 20, 50\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::from_kv(&kv).unwrap();
    assert_eq!(cfg.delta_ts, vec![4.0]);
    assert_eq!(cfg.horizon_for(4.0), 25);
    assert_eq!(cfg.horizon_for(3.0), 33);
    assert_eq!(cfg.sizes(), vec![(20, 400), (50, 2500)]);
    assert_eq!(cfg.policies[1].to_string(), "learned:ckpt/best.ckpt");

    for bad in ["typo_key = 1", "experiment.replications = 0", "experiment.policies = best", "sweep.clients = 5, 6"] {
        assert!(ExperimentConfig::from_kv(&KvMap::parse(bad).unwrap()).is_err(), "{bad}");
    }
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.system.validate().unwrap();
        cfg.ppo.validate().unwrap();
        if path.ends_with("standard.conf") {
            assert_eq!(cfg.system, SystemConfig::standard(5.0));
        }
        seen += 1;
    }
    assert!(seen >= 6);
}
