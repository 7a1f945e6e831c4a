//! Wall-clock scaling evidence for the bench subcommand.
//!
//! Three components: the raw selective scan over a token sequence, one
//! mixer block over a cubic volume, and the full network forward. Each row
//! reports the best-of-several wall time plus the ratio against the
//! previous row; for workloads linear in token count, doubling the tokens
//! should double the time.

use std::time::Instant;

use mhmamba::blocks::{block_forward, Activation, BlockConfig, BlockParams};
use mhmamba::error::{Error, Result};
use mhmamba::network::{Network, NetworkConfig};
use mhmamba::params::ParamStore;
use mhmamba::ssm::{scan_blocked, SequenceView, SsmParams};
use mhmamba::autodiff::Tape;
use mhmamba::volume::Volume5;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub struct BenchRow {
    pub size: usize,
    pub tokens: usize,
    pub wall_ms: f64,
    /// Wall time over the previous row's; absent on the first row.
    pub ratio: Option<f64>,
}

pub fn default_sizes(component: &str) -> Vec<usize> {
    match component {
        "scan" => vec![4096, 8192, 16384],
        "block" => vec![8, 16, 32],
        _ => vec![16, 32],
    }
}

/// Best-of-several timing: repeats until at least two iterations and 0.2 s
/// have been spent, keeping the minimum. The minimum filters first-run
/// allocation noise without needing a separate warmup of the slow cases.
fn time_min_ms(mut f: impl FnMut()) -> f64 {
    let mut best = f64::INFINITY;
    let mut spent = 0.0;
    let mut iters = 0usize;
    while iters < 2 || (spent < 0.2 && iters < 1000) {
        let t0 = Instant::now();
        f();
        let dt = t0.elapsed().as_secs_f64();
        best = best.min(dt);
        spent += dt;
        iters += 1;
    }
    best * 1e3
}

fn attach_ratios(mut rows: Vec<BenchRow>) -> Vec<BenchRow> {
    for i in 1..rows.len() {
        rows[i].ratio = Some(rows[i].wall_ms / rows[i - 1].wall_ms);
    }
    rows
}

/// `size` is the token count N for `scan` and the cubic spatial extent for
/// `block` and `network` (tokens = size^3).
pub fn run_bench(component: &str, sizes: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() {
        return Err(Error::config("bench: need at least one size"));
    }
    match component {
        "scan" => bench_scan(sizes, seed),
        "block" => bench_block(sizes, seed),
        "network" => bench_network(sizes, seed),
        other => Err(Error::config(format!(
            "unknown bench component '{other}'; known: scan, block, network"
        ))),
    }
}

fn bench_scan(sizes: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d) = (8usize, 16usize);
    // a_log as in training init: decay spectrum ln(1..d), keeps abar in
    // (0, 1) so long benches stay numerically quiet.
    let params = SsmParams::<f32> {
        channels: c,
        d_state: d,
        a_log: (0..c * d).map(|i| ((i % d + 1) as f32).ln()).collect(),
        w_delta: (0..c * c).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        b_delta: (0..c).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        w_b: (0..d * c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        w_c: (0..d * c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        d_skip: vec![1.0; c],
    };
    let mut rows = Vec::new();
    for &n in sizes {
        if n == 0 {
            return Err(Error::config("bench scan: size 0"));
        }
        let mut x = SequenceView::zeros(1, n, c);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let wall_ms = time_min_ms(|| {
            let y = scan_blocked(&params, &x, 64).unwrap();
            std::hint::black_box(&y);
        });
        rows.push(BenchRow { size: n, tokens: n, wall_ms, ratio: None });
    }
    Ok(attach_ratios(rows))
}

fn bench_block(sizes: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BlockConfig { channels: 48, heads: 4, d_state: 16, activation: Activation::Relu };
    let mut store = ParamStore::<f32>::new();
    let p = BlockParams::register(&mut store, &mut rng, "blk", &cfg)?;
    let mut rows = Vec::new();
    for &s in sizes {
        if s == 0 {
            return Err(Error::config("bench block: size 0"));
        }
        let x = Volume5::<f32>::from_fn([1, cfg.channels, s, s, s], |_| rng.gen_range(-1.0..1.0));
        let wall_ms = time_min_ms(|| {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let y = block_forward(&mut t, &store, &p, &cfg, xi).unwrap();
            std::hint::black_box(t.value(y));
        });
        rows.push(BenchRow { size: s, tokens: s * s * s, wall_ms, ratio: None });
    }
    Ok(attach_ratios(rows))
}

fn bench_network(sizes: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &s in sizes {
        let cfg = NetworkConfig { patch: [s; 3], ..NetworkConfig::default() };
        cfg.validate()?;
        let mut store = ParamStore::<f32>::new();
        let net = Network::register(&mut store, &mut rng, &cfg)?;
        let x = Volume5::<f32>::from_fn([1, 4, s, s, s], |_| rng.gen_range(-1.0..1.0));
        let wall_ms = time_min_ms(|| {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let y = net.forward(&mut t, &store, xi).unwrap();
            std::hint::black_box(t.value(y));
        });
        rows.push(BenchRow { size: s, tokens: s * s * s, wall_ms, ratio: None });
    }
    Ok(attach_ratios(rows))
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("size,tokens,wall_ms,ratio\n");
    for r in rows {
        let ratio = r.ratio.map(|v| format!("{v:.3}")).unwrap_or_default();
        out.push_str(&format!("{},{},{:.3},{}\n", r.size, r.tokens, r.wall_ms, ratio));
    }
    out
}
