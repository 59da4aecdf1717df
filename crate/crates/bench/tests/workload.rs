use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use tfc_bench::{
    gen_workload, initial_data, run_once, write_csv, BenchConfig, BenchReport, WorkloadConfig, WorkloadError,
};
use tfc_core::model::owner_of;
use tfc_core::protocol::messages::ExecOp;

fn items_of(ops: &[ExecOp]) -> Vec<u64> {
    ops.iter()
        .filter_map(|o| match o {
            ExecOp::Read(i) => Some(*i),
            _ => None,
        })
        .collect()
}

#[test]
fn same_seed_same_transactions() {
    let cfg = WorkloadConfig { seed: 42, ..Default::default() };
    let a = gen_workload(&cfg, 0..1000, 50).unwrap();
    let b = gen_workload(&cfg, 0..1000, 50).unwrap();
    assert_eq!(a, b);
    let c = gen_workload(&WorkloadConfig { seed: 43, ..cfg }, 0..1000, 50).unwrap();
    assert_ne!(a, c);
}

#[test]
fn read_ratio_controls_writes() {
    let rw = gen_workload(&WorkloadConfig { read_ratio: 0.0, ..Default::default() }, 0..100, 20).unwrap();
    assert!(rw.iter().all(|t| t.len() == 10));
    let ro = gen_workload(&WorkloadConfig { read_ratio: 1.0, ..Default::default() }, 0..100, 20).unwrap();
    assert!(ro.iter().flatten().all(|o| matches!(o, ExecOp::Read(_))));
}

#[test]
fn bad_configs_are_refused() {
    let cfg = WorkloadConfig { ops_per_txn: 6, ..Default::default() };
    assert_eq!(gen_workload(&cfg, 0..5, 1).unwrap_err(), WorkloadError::TooManyOps { ops: 6, items: 5 });
    let cfg = WorkloadConfig { read_ratio: 1.5, ..Default::default() };
    assert!(matches!(gen_workload(&cfg, 0..5, 1), Err(WorkloadError::BadReadRatio(_))));
}

#[test]
fn items_are_uniform() {
    const N: u64 = 50;
    let txns = gen_workload(&WorkloadConfig { seed: 9, ..Default::default() }, 0..N, 4000).unwrap();
    let mut counts = BTreeMap::new();
    for t in &txns {
        for i in items_of(t) {
            *counts.entry(i).or_insert(0u64) += 1;
        }
    }
    let total: u64 = counts.values().sum();
    let expected = total as f64 / N as f64;
    let chi2: f64 = (0..N).map(|i| (counts.get(&i).copied().unwrap_or(0) as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((N - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi2 {chi2:.1}, p {p:.5}");
}

proptest! {
    #[test]
    fn transactions_touch_distinct_items(seed in any::<u64>(), ops in 1usize..10) {
        let txns = gen_workload(&WorkloadConfig { ops_per_txn: ops, read_ratio: 0.3, seed }, 0..40, 10).unwrap();
        for t in txns {
            let items = items_of(&t);
            prop_assert_eq!(items.len(), ops);
            prop_assert_eq!(items.iter().collect::<BTreeSet<_>>().len(), ops);
        }
    }

    #[test]
    fn shards_get_equal_item_counts(n in 1u32..10, per in 1usize..40) {
        let data = initial_data(n, per);
        let mut counts = vec![0usize; n as usize];
        for id in data.keys() {
            counts[owner_of(*id, n) as usize] += 1;
        }
        prop_assert!(counts.iter().all(|c| *c == per));
    }
}

fn small() -> BenchConfig {
    BenchConfig { servers: 3, items_per_shard: 200, txns_per_block: 10, requests: 120, runs: 1, ..Default::default() }
}

#[test]
fn every_request_is_accounted_for() {
    let rep = run_once(&small(), 3).unwrap();
    assert_eq!(rep.committed + rep.aborted + rep.failed, rep.requests);
    assert_eq!(rep.requests, 120);
    assert!(rep.throughput_tps > 0.0 && rep.latency_mean_ms > 0.0);
    assert!(rep.latency_p50_ms <= rep.latency_p99_ms);
}

#[test]
fn averages_sum_counts_and_mean_rates() {
    let a =
        BenchReport { runs: 1, requests: 10, committed: 9, aborted: 1, throughput_tps: 100.0, ..Default::default() };
    let b = BenchReport { runs: 1, requests: 10, committed: 10, throughput_tps: 300.0, ..Default::default() };
    let m = BenchReport::average(&[a, b]);
    assert_eq!((m.runs, m.requests, m.committed, m.aborted), (2, 20, 19, 1));
    assert_eq!(m.throughput_tps, 200.0);
}

#[test]
fn csv_has_a_header_and_a_row_per_report() {
    let rows = vec![(small(), BenchReport { runs: 1, requests: 5, ..Default::default() }); 2];
    let mut buf = Vec::new();
    write_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("servers,items_per_shard,"));
    assert!(lines[0].contains("throughput_tps"));
    assert!(lines[1].starts_with("3,200,5,10,tfcommit,"));
}
