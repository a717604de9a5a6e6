//! Closed-loop load generator.
//!
//! Each worker sends its share of the requests one after another, so the
//! number of requests in flight never exceeds the number of workers. Worker
//! start times are spread evenly over the ramp-up period. Workers keep their
//! own sample vectors and the report is built by merging them at the end.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use reqwest::header::{HeaderMap, HeaderName, HeaderValue};
use reqwest::{Client, Url};

use crate::args::LoadgenArgs;

#[derive(Debug, Clone)]
pub struct LoadConfig {
    pub target: String,
    pub users: usize,
    pub rampup: Duration,
    pub requests: u64,
    pub headers: Vec<(String, String)>,
    pub timeout: Duration,
}

impl LoadConfig {
    pub fn new(target: impl Into<String>, users: usize, rampup: Duration, requests: u64) -> Self {
        LoadConfig {
            target: target.into(),
            users,
            rampup,
            requests,
            headers: Vec::new(),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_string(), value.to_string()));
        self
    }

    /// Requests assigned to worker `i`; the remainder goes to the first workers.
    pub fn quota(&self, i: usize) -> u64 {
        let n = self.users as u64;
        self.requests / n + u64::from((i as u64) < self.requests % n)
    }

    /// Delay before worker `i` starts.
    pub fn start_offset(&self, i: usize) -> Duration {
        self.rampup.mul_f64(i as f64 / self.users as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Success,
    Status(u16),
    Transport,
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    /// Completion time relative to the run start.
    done_at: Duration,
    latency_us: u64,
    outcome: Outcome,
}

struct WorkerLog {
    started: Duration,
    samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latency {
    pub min_us: u64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

impl Latency {
    /// `None` for an empty sample.
    pub fn of(samples: &mut [u64]) -> Option<Latency> {
        samples.sort_unstable();
        Some(Latency {
            min_us: *samples.first()?,
            p50_us: percentile(samples, 50.0),
            p95_us: percentile(samples, 95.0),
            p99_us: percentile(samples, 99.0),
            max_us: *samples.last()?,
        })
    }
}

/// Nearest-rank percentile of an ascending slice; 0 when empty.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecondBucket {
    pub second: u64,
    pub completed: u64,
    pub errors: u64,
    pub p50_us: u64,
    pub p95_us: u64,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub target: String,
    pub users: usize,
    /// Requests attempted.
    pub requests: u64,
    /// Requests answered with a 2xx status.
    pub completed: u64,
    /// Transport failures plus non-2xx answers.
    pub errors: u64,
    pub transport_errors: u64,
    pub status_errors: BTreeMap<u16, u64>,
    pub elapsed: Duration,
    /// Completed requests per second of wall time.
    pub throughput: f64,
    /// Over every request that received an HTTP response.
    pub latency: Option<Latency>,
    /// Actual start time of each worker relative to the run start.
    pub worker_starts: Vec<Duration>,
    pub series: Vec<SecondBucket>,
}

pub const CSV_HEADER: &str = "second,completed,errors,p50_us,p95_us";

impl LoadReport {
    fn build(config: &LoadConfig, logs: Vec<WorkerLog>, elapsed: Duration) -> Self {
        let worker_starts = logs.iter().map(|l| l.started).collect();
        let samples: Vec<Sample> = logs.into_iter().flat_map(|l| l.samples).collect();
        let mut status_errors = BTreeMap::new();
        let mut transport_errors = 0;
        let mut completed = 0;
        let mut answered = Vec::with_capacity(samples.len());
        let mut by_second: BTreeMap<u64, (u64, u64, Vec<u64>)> = BTreeMap::new();
        for s in &samples {
            let bucket = by_second.entry(s.done_at.as_secs()).or_default();
            match s.outcome {
                Outcome::Success => {
                    completed += 1;
                    bucket.0 += 1;
                }
                Outcome::Status(code) => {
                    *status_errors.entry(code).or_insert(0) += 1;
                    bucket.1 += 1;
                }
                Outcome::Transport => {
                    transport_errors += 1;
                    bucket.1 += 1;
                }
            }
            if s.outcome != Outcome::Transport {
                answered.push(s.latency_us);
                bucket.2.push(s.latency_us);
            }
        }
        let last = by_second.keys().next_back().copied().unwrap_or(0);
        let series = (0..=last)
            .map(|second| {
                let (completed, errors, mut lat) = by_second.remove(&second).unwrap_or_default();
                lat.sort_unstable();
                SecondBucket {
                    second,
                    completed,
                    errors,
                    p50_us: percentile(&lat, 50.0),
                    p95_us: percentile(&lat, 95.0),
                }
            })
            .collect();
        let requests = samples.len() as u64;
        LoadReport {
            target: config.target.clone(),
            users: config.users,
            requests,
            completed,
            errors: requests - completed,
            transport_errors,
            status_errors,
            elapsed,
            throughput: completed as f64 / elapsed.as_secs_f64().max(1e-9),
            latency: Latency::of(&mut answered),
            worker_starts,
            series,
        }
    }

    pub fn summary(&self) -> String {
        let ms = |us: u64| us as f64 / 1000.0;
        let mut s = format!(
            "target      {}\nusers       {}\nrequests    {}\ncompleted   {}\nerrors      {} (transport {}, http {:?})\nelapsed     {:.2} s\nthroughput  {:.1} req/s\n",
            self.target,
            self.users,
            self.requests,
            self.completed,
            self.errors,
            self.transport_errors,
            self.status_errors,
            self.elapsed.as_secs_f64(),
            self.throughput,
        );
        if let Some(l) = self.latency {
            s.push_str(&format!(
                "latency ms  min {:.3}  p50 {:.3}  p95 {:.3}  p99 {:.3}  max {:.3}\n",
                ms(l.min_us),
                ms(l.p50_us),
                ms(l.p95_us),
                ms(l.p99_us),
                ms(l.max_us)
            ));
        }
        s
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for b in &self.series {
            writeln!(
                out,
                "{},{},{},{},{}",
                b.second, b.completed, b.errors, b.p50_us, b.p95_us
            )?;
        }
        Ok(())
    }
}

async fn check_reachable(url: &Url) -> anyhow::Result<()> {
    let host = url.host_str().context("target URL has no host")?;
    let port = url
        .port_or_known_default()
        .context("target URL has no port")?;
    let connect = tokio::net::TcpStream::connect((host, port));
    match tokio::time::timeout(Duration::from_secs(5), connect).await {
        Ok(Ok(_)) => Ok(()),
        Ok(Err(e)) => bail!("target {url} is unreachable: {e}"),
        Err(_) => bail!("target {url} is unreachable: connect timed out"),
    }
}

/// Runs the load and returns the merged report. Fails before sending any
/// request when the target does not accept connections.
pub async fn run(config: &LoadConfig) -> anyhow::Result<LoadReport> {
    if config.users == 0 {
        bail!("--users must be at least 1");
    }
    if config.requests == 0 {
        bail!("--requests must be at least 1");
    }
    let url = Url::parse(&config.target).with_context(|| format!("bad target URL '{}'", config.target))?;
    check_reachable(&url).await?;

    let mut headers = HeaderMap::new();
    for (k, v) in &config.headers {
        headers.insert(
            HeaderName::from_bytes(k.trim().as_bytes()).with_context(|| format!("bad header name '{k}'"))?,
            HeaderValue::from_str(v.trim()).with_context(|| format!("bad value for header '{k}'"))?,
        );
    }
    let client = Client::builder()
        .default_headers(headers)
        .pool_max_idle_per_host(config.users)
        .timeout(config.timeout)
        .build()?;

    let start = Instant::now();
    let workers: Vec<_> = (0..config.users)
        .map(|i| {
            let client = client.clone();
            let url = url.clone();
            let quota = config.quota(i);
            let offset = config.start_offset(i);
            tokio::spawn(async move {
                tokio::time::sleep_until((start + offset).into()).await;
                let started = start.elapsed();
                let mut samples = Vec::with_capacity(quota as usize);
                for _ in 0..quota {
                    let t0 = Instant::now();
                    let outcome = match client.get(url.clone()).send().await {
                        Ok(resp) => {
                            let status = resp.status();
                            match resp.bytes().await {
                                Ok(_) if status.is_success() => Outcome::Success,
                                Ok(_) => Outcome::Status(status.as_u16()),
                                Err(_) => Outcome::Transport,
                            }
                        }
                        Err(_) => Outcome::Transport,
                    };
                    samples.push(Sample {
                        done_at: start.elapsed(),
                        latency_us: t0.elapsed().as_micros() as u64,
                        outcome,
                    });
                }
                WorkerLog { started, samples }
            })
        })
        .collect();
    let mut logs = Vec::with_capacity(workers.len());
    for w in workers {
        logs.push(w.await.context("load worker panicked")?);
    }
    Ok(LoadReport::build(config, logs, start.elapsed()))
}

pub fn parse_header(h: &str) -> anyhow::Result<(String, String)> {
    let (k, v) = h
        .split_once(':')
        .with_context(|| format!("header '{h}' is not of the form 'name: value'"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub async fn run_cli(args: LoadgenArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if !args.rampup.is_finite() || args.rampup < 0.0 {
        bail!("--rampup must be a non-negative number of seconds");
    }
    if !args.timeout.is_finite() || args.timeout <= 0.0 {
        bail!("--timeout must be positive");
    }
    let mut config = LoadConfig::new(
        args.target,
        args.users,
        Duration::from_secs_f64(args.rampup),
        args.requests,
    );
    config.timeout = Duration::from_secs_f64(args.timeout);
    for h in &args.headers {
        config.headers.push(parse_header(h)?);
    }
    let report = run(&config).await?;
    write!(out, "{}", report.summary())?;
    if let Some(path) = &args.report {
        let mut f = std::fs::File::create(path)
            .with_context(|| format!("cannot create report {}", path.display()))?;
        report.write_csv(&mut f)?;
        writeln!(out, "time series written to {}", path.display())?;
    }
    Ok(())
}
