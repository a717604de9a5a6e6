mod common;

use std::time::Duration;

use common::*;
use datagate_cli::loadgen::{percentile, run, Latency, LoadConfig, CSV_HEADER};
use proptest::prelude::*;

#[tokio::test(flavor = "multi_thread")]
async fn serial_run_counts_every_request() {
    let s = Server::start(false).await;
    let report = run(&LoadConfig::new(s.echo_url(), 1, Duration::ZERO, 10)).await.unwrap();
    assert_eq!(report.requests, 10);
    assert_eq!(report.completed, 10);
    assert_eq!(report.errors, 0);
    assert_eq!(s.audit_count().await, 10);
}

#[tokio::test(flavor = "multi_thread")]
async fn request_count_matches_the_audit_trail() {
    let s = Server::start(true).await;
    let mut out = Vec::new();
    datagate_cli::keytool::offline(
        &datagate_core::store::SqliteStore::open(s.store_path()).unwrap(),
        datagate_cli::args::KeyAction::Issue { subject: "load".into(), roles: None, ttl: None },
        &mut out,
    )
    .unwrap();
    let text = String::from_utf8(out).unwrap();
    let key = text.lines().next().unwrap().trim_start_matches("key:").trim().to_string();

    // Half the workers send no credential, so some requests fail with 401.
    let good = LoadConfig::new(s.echo_url(), 8, Duration::from_millis(200), 203).header("api_key", &key);
    let bad = LoadConfig::new(s.echo_url(), 3, Duration::ZERO, 17);
    let (g, b) = tokio::join!(run(&good), run(&bad));
    let (g, b) = (g.unwrap(), b.unwrap());
    assert_eq!(g.completed, 203);
    assert_eq!(b.errors, 17);
    assert_eq!(b.status_errors.get(&401), Some(&17));
    assert_eq!(g.requests + b.requests, s.audit_count().await);

    let mut csv = Vec::new();
    g.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let (mut done, mut err) = (0, 0);
    for line in lines {
        let cols: Vec<u64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 5);
        assert!(cols[3] <= cols[4]);
        done += cols[1];
        err += cols[2];
    }
    assert_eq!((done, err), (203, 0));
    let l = g.latency.unwrap();
    assert!(l.min_us <= l.p50_us && l.p50_us <= l.p95_us && l.p95_us <= l.p99_us && l.p99_us <= l.max_us);
}

#[tokio::test(flavor = "multi_thread")]
async fn ramp_spreads_worker_starts_evenly() {
    let s = Server::start(false).await;
    let report = run(&LoadConfig::new(s.echo_url(), 10, Duration::from_secs(10), 10)).await.unwrap();
    assert_eq!(report.completed, 10);
    let starts = &report.worker_starts;
    for (i, w) in starts.windows(2).enumerate() {
        let gap = w[1].as_secs_f64() - w[0].as_secs_f64();
        assert!((gap - 1.0).abs() <= 0.2, "gap {i}: {gap}");
    }
}

#[tokio::test]
async fn unreachable_target_fails_before_sending() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = run(&LoadConfig::new(format!("http://127.0.0.1:{port}/x"), 2, Duration::ZERO, 4))
        .await
        .unwrap_err();
    assert!(err.to_string().contains("unreachable"), "{err}");

    let out = bin()
        .args(["loadgen", "--target", &format!("http://127.0.0.1:{port}/x"), "--users", "1", "--requests", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unreachable"));
}

#[tokio::test(flavor = "multi_thread")]
async fn binary_writes_summary_and_csv() {
    let s = Server::start(false).await;
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    let url = s.echo_url();
    let csv_arg = csv.to_str().unwrap().to_string();
    let out = tokio::task::spawn_blocking(move || {
        bin()
            .args(["loadgen", "--target", &url, "--users", "4", "--rampup", "0", "--requests", "40", "--report", &csv_arg])
            .output()
            .unwrap()
    })
    .await
    .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("completed   40"), "{stdout}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with(CSV_HEADER));
    assert_eq!(s.audit_count().await, 40);
}

#[test]
fn quotas_sum_to_the_request_total() {
    for (users, requests) in [(1, 10), (3, 10), (100, 10_000), (7, 3)] {
        let c = LoadConfig::new("http://x", users, Duration::from_secs(10), requests);
        let total: u64 = (0..users).map(|i| c.quota(i)).sum();
        assert_eq!(total, requests);
        let max = (0..users).map(|i| c.quota(i)).max().unwrap();
        let min = (0..users).map(|i| c.quota(i)).min().unwrap();
        assert!(max - min <= 1);
    }
}

proptest! {
    #[test]
    fn percentiles_are_order_consistent(mut v in prop::collection::vec(0u64..1_000_000, 1..300)) {
        let l = Latency::of(&mut v).unwrap();
        prop_assert!(l.min_us <= l.p50_us && l.p50_us <= l.p95_us && l.p95_us <= l.p99_us && l.p99_us <= l.max_us);
    }

    #[test]
    fn percentile_is_the_smallest_value_covering_p(mut v in prop::collection::vec(0u64..1000, 1..200), p in 1.0f64..100.0) {
        v.sort_unstable();
        let x = percentile(&v, p);
        let n = v.len() as f64;
        let at_or_below = v.iter().filter(|&&y| y <= x).count() as f64;
        let below = v.iter().filter(|&&y| y < x).count() as f64;
        prop_assert!(at_or_below >= p / 100.0 * n);
        prop_assert!(below < p / 100.0 * n);
    }
}
