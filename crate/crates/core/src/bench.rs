//! Prefill + decode throughput protocol with an injectable clock.

use std::cell::RefCell;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{count_params, DecodeSession, LmConfig, LmInput, LmWeights};

pub const BENCH_SCHEMA_VERSION: u32 = 1;

/// Time since an arbitrary fixed origin.
pub trait Clock {
    fn now(&self) -> Duration;
}

pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Advances by the next scripted step on every read, cycling.
pub struct FakeClock {
    steps: Vec<Duration>,
    state: RefCell<(usize, Duration)>,
}

impl FakeClock {
    pub fn new(steps: Vec<Duration>) -> Self {
        assert!(!steps.is_empty(), "fake clock needs at least one step");
        FakeClock {
            steps,
            state: RefCell::new((0, Duration::ZERO)),
        }
    }

    /// Each iteration reads the clock three times: before prefill, after
    /// prefill, after decode. This makes those phases take exactly
    /// `prefill` and `decode`.
    pub fn phases(prefill: Duration, decode: Duration) -> Self {
        Self::new(vec![Duration::ZERO, prefill, decode])
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        let mut s = self.state.borrow_mut();
        let step = self.steps[s.0 % self.steps.len()];
        s.0 += 1;
        s.1 += step;
        s.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            input_tokens: 128,
            output_tokens: 128,
            batch: 8,
            warmup: 2,
            iters: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub vocab: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config: ConfigSummary,
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
    pub prefill_times_s: Vec<f64>,
    pub decode_times_s: Vec<f64>,
    pub prefill_s: f64,
    pub decode_s: f64,
    /// `batch * output_tokens / decode_s`; absent when nothing is decoded.
    pub decode_tokens_per_sec: Option<f64>,
    pub prefill_tokens_per_sec: f64,
    pub requests_per_sec: f64,
    pub environment: String,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let tps = self
            .decode_tokens_per_sec
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"));
        format!(
            "model     hidden={} layers={} heads={}/{} vocab={} params={}\n\
             protocol  in={} out={} batch={} warmup={} iters={}\n\
             prefill   {:.4} s median ({:.1} tokens/s)\n\
             decode    {:.4} s median ({tps} tokens/s)\n\
             requests  {:.3} /s\n\
             env       {}\n",
            self.config.hidden,
            self.config.layers,
            self.config.heads,
            self.config.kv_heads,
            self.config.vocab,
            self.config.params,
            self.input_tokens,
            self.output_tokens,
            self.batch,
            self.warmup,
            self.iters,
            self.prefill_s,
            self.prefill_tokens_per_sec,
            self.decode_s,
            self.requests_per_sec,
            self.environment
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn environment_note() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{}, {threads} hardware threads", std::env::consts::OS, std::env::consts::ARCH)
}

/// Seeded prompt ids, one row per request.
pub fn bench_prompts(cfg: &LmConfig, opts: &BenchOptions) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.batch)
        .map(|_| (0..opts.input_tokens).map(|_| rng.random_range(0..cfg.vocab as u32)).collect())
        .collect()
}

/// Greedy decode of `output_tokens` for every request in the batch, never
/// stopping early. Returns the generated ids.
fn run_once(cfg: &LmConfig, w: &LmWeights, prompts: &[Vec<u32>], out: usize, clock: &dyn Clock) -> Result<(f64, f64, Vec<Vec<u32>>)> {
    let inputs: Vec<LmInput<'_>> = prompts.iter().map(|p| LmInput::Ids(p)).collect();
    let t0 = clock.now();
    let mut session = DecodeSession::prefill(cfg, w, &inputs)?;
    let t1 = clock.now();
    let mut generated = vec![Vec::with_capacity(out); prompts.len()];
    for i in 0..out {
        let next = session.greedy_next();
        for (g, t) in generated.iter_mut().zip(&next) {
            g.push(*t);
        }
        if i + 1 < out {
            session.step(&next)?;
        }
    }
    let t2 = clock.now();
    Ok(((t1 - t0).as_secs_f64(), (t2 - t1).as_secs_f64(), generated))
}

pub fn speed_bench(cfg: &LmConfig, w: &LmWeights, opts: &BenchOptions, clock: &dyn Clock) -> Result<BenchReport> {
    cfg.validate()?;
    if opts.batch == 0 || opts.iters == 0 || opts.input_tokens == 0 {
        return Err(Error::config("batch, iters and input_tokens must be at least 1"));
    }
    if opts.input_tokens + opts.output_tokens > cfg.max_context {
        return Err(Error::config(format!(
            "input {} + output {} exceeds max context {}",
            opts.input_tokens, opts.output_tokens, cfg.max_context
        )));
    }
    let prompts = bench_prompts(cfg, opts);
    for _ in 0..opts.warmup {
        run_once(cfg, w, &prompts, opts.output_tokens, clock)?;
    }
    let mut prefill = Vec::with_capacity(opts.iters);
    let mut decode = Vec::with_capacity(opts.iters);
    for _ in 0..opts.iters {
        let (p, d, _) = run_once(cfg, w, &prompts, opts.output_tokens, clock)?;
        prefill.push(p);
        decode.push(d);
    }
    let prefill_s = median(&prefill);
    let decode_s = median(&decode);
    let b = opts.batch as f64;
    let p = count_params(cfg);
    Ok(BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        config: ConfigSummary {
            hidden: cfg.hidden,
            layers: cfg.layers,
            heads: cfg.heads,
            kv_heads: cfg.kv_heads,
            vocab: cfg.vocab,
            params: p.total,
        },
        input_tokens: opts.input_tokens,
        output_tokens: opts.output_tokens,
        batch: opts.batch,
        warmup: opts.warmup,
        iters: opts.iters,
        prefill_times_s: prefill,
        decode_times_s: decode,
        prefill_s,
        decode_s,
        decode_tokens_per_sec: (opts.output_tokens > 0).then(|| b * opts.output_tokens as f64 / decode_s),
        prefill_tokens_per_sec: b * opts.input_tokens as f64 / prefill_s,
        requests_per_sec: b / (prefill_s + decode_s),
        environment: environment_note(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (LmConfig, LmWeights) {
        let cfg = LmConfig {
            hidden: 16,
            layers: 1,
            heads: 2,
            kv_heads: 1,
            ffn: 32,
            ..LmConfig::toy(40)
        };
        let w = LmWeights::init(&cfg, 0);
        (cfg, w)
    }

    #[test]
    fn fake_clock_report_arithmetic() {
        let (cfg, w) = small();
        let opts = BenchOptions {
            input_tokens: 4,
            output_tokens: 128,
            batch: 8,
            warmup: 1,
            iters: 3,
            seed: 0,
        };
        let clock = FakeClock::phases(Duration::from_millis(500), Duration::from_secs(2));
        let r = speed_bench(&cfg, &w, &opts, &clock).unwrap();
        assert_eq!(r.decode_s, 2.0);
        assert_eq!(r.decode_tokens_per_sec, Some(512.0));
        assert_eq!(r.prefill_s, 0.5);
        assert_eq!(r.requests_per_sec, 8.0 / 2.5);
        assert_eq!(r.prefill_tokens_per_sec, 64.0);
    }

    #[test]
    fn zero_output_reports_not_applicable() {
        let (cfg, w) = small();
        let opts = BenchOptions {
            input_tokens: 4,
            output_tokens: 0,
            batch: 2,
            warmup: 0,
            iters: 1,
            seed: 0,
        };
        let r = speed_bench(&cfg, &w, &opts, &MonotonicClock::new()).unwrap();
        assert!(r.decode_tokens_per_sec.is_none());
        assert!(r.prefill_s > 0.0);
        assert!(r.render().contains("n/a"));
    }

    #[test]
    fn overflow_is_a_config_error() {
        let (mut cfg, w) = small();
        cfg.max_context = 16;
        let opts = BenchOptions {
            input_tokens: 10,
            output_tokens: 10,
            ..Default::default()
        };
        assert!(matches!(speed_bench(&cfg, &w, &opts, &MonotonicClock::new()), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn median_handles_even_counts() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
