//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kvtier::analyze::analyze;
use kvtier::attention::{self, gathered_attention, SparsityConfig, Variant};
use kvtier::config::Policy;
use kvtier::engine::{self, model::argmax, Session, ToyModel};
use kvtier::math::{self, Matrix, SeededRng};
use kvtier::memsim::{CostParams, KvLedger, KvPrecision};
use kvtier::par::Exec;
use kvtier::quant;
use kvtier::scheduler::{
    all_host_plan, exhaustive_plan, fetch_actions, planning_selection, rebalance_actions,
    solve_plan, static_split_plan, SchedulePlan,
};
use kvtier::sweep::{self, Axis};
use kvtier::{Error, RunConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if let false = $cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixture(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::minimal();
    cfg.workload.seed = seed;
    cfg.workload.prompt_len = 8;
    cfg.workload.gen_len = 32;
    cfg
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    (0..x.len())
        .map(|i| (x[i] - mean) / sd * gamma[i] + beta[i])
        .collect()
}

fn affine(x: &[f64], w: &Matrix, bias: Option<&[f64]>) -> Vec<f64> {
    (0..w.cols())
        .map(|c| {
            (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum::<f64>() + bias.map_or(0.0, |b| b[c])
        })
        .collect()
}

/// Recomputes every position from scratch; logits of the last one.
fn no_cache_logits(m: &ToyModel, tokens: &[usize]) -> Vec<f64> {
    let (heads, d) = (m.shape.heads, m.shape.head_dim);
    let gelu = |x: f64| {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    };
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..m.shape.hidden())
                .map(|c| m.token_embedding.get(t, c) + m.position_embedding.get(p, c))
                .collect()
        })
        .collect();
    for l in &m.layers {
        let a: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| layer_norm(x, &l.ln_attn.gamma, &l.ln_attn.beta))
            .collect();
        let q: Vec<Vec<f64>> = a
            .iter()
            .map(|r| affine(r, &l.wq, Some(&l.q_bias)))
            .collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &l.wk, None)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &l.wv, None)).collect();
        xs = (0..xs.len())
            .map(|t| {
                let mut concat = vec![0.0; heads * d];
                for h in 0..heads {
                    let cols = h * d..(h + 1) * d;
                    let s: Vec<f64> = (0..=t)
                        .map(|u| {
                            cols.clone().map(|c| q[t][c] * k[u][c]).sum::<f64>() / (d as f64).sqrt()
                        })
                        .collect();
                    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in cols {
                        concat[c] = (0..=t).map(|u| e[u] / z * v[u][c]).sum();
                    }
                }
                let y: Vec<f64> = affine(&concat, &l.wo, None)
                    .iter()
                    .zip(&xs[t])
                    .map(|(o, x)| o + x)
                    .collect();
                let f = layer_norm(&y, &l.ln_ffn.gamma, &l.ln_ffn.beta);
                let hid: Vec<f64> = affine(&f, &l.w1, Some(&l.b1))
                    .into_iter()
                    .map(gelu)
                    .collect();
                let out = affine(&hid, &l.w2, Some(&l.b2));
                y.iter().zip(&out).map(|(a, b)| a + b).collect()
            })
            .collect();
    }
    let last = xs.last().unwrap();
    affine(
        &layer_norm(last, &m.ln_final.gamma, &m.ln_final.beta),
        &m.unembedding,
        None,
    )
}

fn session<'m>(model: &'m ToyModel, cfg: &RunConfig) -> Session<'m> {
    Session::start(
        model,
        &cfg.prompt_tokens(),
        cfg.sparsity,
        SchedulePlan::all_device(cfg.workload.gen_len),
        cfg.cost_params(),
    )
    .unwrap()
    .without_correlation()
}

fn kv_cache_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let cfg = fixture(seed);
        let model = engine::build_model(&cfg).unwrap();
        let mut s = session(&model, &cfg);
        let mut tokens = cfg.prompt_tokens();
        let pre = no_cache_logits(&model, &tokens);
        worst = worst.max(max_abs_diff(&pre, s.prefill_logits()));
        let mut next = argmax(&pre);
        for j in 0..cfg.workload.gen_len {
            tokens.push(next);
            let oracle = no_cache_logits(&model, &tokens);
            let out = s.decode_step().unwrap();
            worst = worst.max(max_abs_diff(&oracle, &out.logits));
            next = argmax(&oracle);
            ensure!(
                out.token == next,
                "seed {seed} step {j}: token {} vs oracle {next}",
                out.token
            );
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst <= 1e-9, "max logit gap {worst:e}");
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!(
        "20 seeds x 32 steps, max logit gap {worst:.1e}, {secs:.2} s"
    ))
}

fn swa_degeneracy() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let dense = fixture(seed);
        let mut swa = dense.clone();
        swa.sparsity = SparsityConfig::swa(1.0);
        let model = engine::build_model(&dense).unwrap();
        let (mut a, mut b) = (session(&model, &dense), session(&model, &swa));
        for j in 0..32 {
            let (x, y) = (a.decode_step().unwrap(), b.decode_step().unwrap());
            worst = worst.max(max_abs_diff(&x.logits, &y.logits));
            ensure!(x.token == y.token, "seed {seed} step {j}: tokens differ");
        }
    }
    ensure!(worst <= 1e-9, "max logit gap {worst:e}");
    Ok(format!("20 seeds, max logit gap {worst:.1e}"))
}

fn masked_dense_equivalence() -> Outcome {
    let mut rng = SeededRng::new(3);
    let mut worst: f64 = 0.0;
    let cases = 500;
    for _ in 0..cases {
        let (heads, n, d) = (1 + rng.below(3), 1 + rng.below(40), 1 + rng.below(8));
        let q = rng.uniform_matrix(heads, d, -3.0, 3.0);
        let keys: Vec<Matrix> = (0..heads)
            .map(|_| rng.uniform_matrix(n, d, -3.0, 3.0))
            .collect();
        let values: Vec<Matrix> = (0..heads)
            .map(|_| rng.uniform_matrix(n, d, -3.0, 3.0))
            .collect();
        let mut keep: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        keep[rng.below(n)] = true;
        let idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        let got = gathered_attention(&q, &keys, &values, &idx).unwrap();
        for h in 0..heads {
            let mut logits = Matrix::zeros(1, n);
            for (r, &kept) in keep.iter().enumerate() {
                let x = if kept {
                    math::dot(q.row(h), keys[h].row(r)) / (d as f64).sqrt()
                } else {
                    f64::NEG_INFINITY
                };
                logits.set(0, r, x);
            }
            let w = math::softmax_rows(&logits).unwrap();
            let out = math::matmul(&w, &values[h]).unwrap();
            worst = worst.max(max_abs_diff(got.attn.row(h), out.row(0)));
            worst = worst.max(max_abs_diff(got.aw_rows.row(h), w.row(0)));
        }
    }
    ensure!(worst <= 1e-9, "max gap {worst:e}");
    Ok(format!("{cases} random selections, max gap {worst:.1e}"))
}

fn correlation_ordering() -> Outcome {
    let ratios = [0.4, 0.8];
    let seeds = 10;
    let mut sums = [[0.0; 3]; 2];
    let mut dense_rho: f64 = 1.0;
    for seed in 0..seeds {
        let mut cfg = fixture(seed);
        cfg.model.skew = 3.0;
        let report = analyze(&cfg, &ratios, Exec::default()).unwrap();
        dense_rho = dense_rho.min(report.dense.score_correlation.unwrap());
        for (ri, &r) in ratios.iter().enumerate() {
            for (vi, v) in [Variant::Swa, Variant::Local, Variant::Strided]
                .into_iter()
                .enumerate()
            {
                sums[ri][vi] += report.find(v, r).unwrap().score_correlation.unwrap_or(0.0);
            }
        }
    }
    let mut parts = Vec::new();
    for (ri, &r) in ratios.iter().enumerate() {
        let [swa, local, strided] = sums[ri].map(|s| s / seeds as f64);
        ensure!(
            swa > local && swa > strided,
            "r={r}: swa {swa:.3} local {local:.3} strided {strided:.3}"
        );
        ensure!(swa >= 0.8, "r={r}: swa {swa:.3} below 0.8");
        parts.push(format!(
            "r={r}: swa {swa:.3} local {local:.3} strided {strided:.3}"
        ));
    }
    ensure!(
        (dense_rho - 1.0).abs() <= 1e-12,
        "dense vs dense rho {dense_rho}"
    );
    Ok(format!("{seeds} seeds; {}", parts.join("; ")))
}

fn sparsity_metric() -> Outcome {
    for w in 1..=64 {
        let mut m = Matrix::zeros(3, w);
        for r in 0..3 {
            m.set(r, (r * 7) % w, 1.0);
        }
        let s = attention::attention_sparsity(&m, 0.01).unwrap();
        ensure!(s == (w - 1) as f64 / w as f64, "width {w}: {s}");
    }
    let mut rng = SeededRng::new(9);
    for _ in 0..200 {
        let m = rng.uniform_matrix(4, 16, 0.0, 1.0);
        let c = rng.uniform(1e-3, 1e3);
        let a = attention::attention_sparsity(&m, 0.01).unwrap();
        let b = attention::attention_sparsity(&m.scale(c), 0.01).unwrap();
        ensure!(a == b, "scaling by {c} changed sparsity {a} -> {b}");
    }
    Ok("one-hot widths 1..64 exact, 200 scalings invariant".into())
}

fn quantization_bound() -> Outcome {
    let mut rng = SeededRng::new(11);
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let bits = if i % 2 == 0 { 8 } else { 4 };
        let ch = [1, 4, 8, 16][rng.below(4)];
        let len = ch * (1 + rng.below(4));
        let x = rng.uniform_vec(len, -50.0, 50.0);
        let q = quant::quantize(&x, bits, ch).unwrap();
        let back = quant::dequantize(&q);
        for (k, (a, b)) in x.iter().zip(&back).enumerate() {
            let excess = (a - b).abs() - q.scales[k / ch] / 2.0;
            worst = worst.max(excess);
            ensure!(
                excess <= 1e-9,
                "vector {i} element {k}: error exceeds half a step by {excess:e}"
            );
        }
        let again = quant::quantize(&back, bits, ch).unwrap();
        ensure!(
            again.codes == q.codes && again.zero_points == q.zero_points,
            "vector {i}: re-quantization changed stored bytes"
        );
        ensure!(
            max_abs_diff(&quant::dequantize(&again), &back) <= 1e-9,
            "vector {i}: re-quantization changed values"
        );
    }
    Ok(format!("10000 vectors, 4 and 8 bit, worst excess over half step {worst:.1e}, re-quantized codes identical"))
}

fn random_params(rng: &mut SeededRng) -> CostParams {
    let pick = |rng: &mut SeededRng, xs: &[usize]| xs[rng.below(xs.len())];
    let prompt_len = 2 + rng.below(10);
    let gen_len = 4 + rng.below(13);
    let base = CostParams {
        hidden: pick(rng, &[4, 8, 16, 32]),
        layers: pick(rng, &[1, 2, 3, 4]),
        batch: pick(rng, &[1, 2, 4]),
        prompt_len,
        gen_len,
        ratio: [0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0][rng.below(7)],
        bandwidth: 10f64.powf(rng.uniform(3.0, 8.0)),
        precision: [KvPrecision::Fp16, KvPrecision::Int8][rng.below(2)],
        device_capacity: None,
        mac_rate: 10f64.powf(rng.uniform(6.0, 9.0)),
        recompute_overhead: rng.uniform(1.0, 3.0),
    };
    let fit = (prompt_len + 1 + rng.below(gen_len)) as u64;
    CostParams {
        device_capacity: Some(fit * base.token_kv_bytes()),
        ..base
    }
}

fn plan_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(2024);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 50 {
        let p = random_params(&mut rng);
        let Ok(exact) = exhaustive_plan(&p, Exec::default()) else {
            continue;
        };
        let greedy = solve_plan(&p).unwrap();
        let gap = greedy.predicted_total_seconds / exact.predicted_total_seconds - 1.0;
        worst = worst.max(gap);
        ensure!(gap <= 0.01, "gap {:.2}% on {p:?}", gap * 100.0);
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.2} s");
    Ok(format!(
        "{checked} draws with n <= 16, worst gap {:.3}%, {secs:.2} s",
        worst * 100.0
    ))
}

/// Capacity-constrained engine fixture: SWA at r = 0.5 with room for
/// `tokens` tokens' KV on the device.
fn constrained(seed: u64, tokens: u64, bandwidth: f64) -> RunConfig {
    let mut cfg = fixture(seed);
    cfg.workload.prompt_len = 16;
    cfg.sparsity = SparsityConfig::swa(0.5);
    cfg.schedule.bandwidth = bandwidth;
    cfg.schedule.device_capacity = Some(tokens * cfg.cost_params().token_kv_bytes());
    cfg
}

fn total_with(cfg: &RunConfig, policy: Policy) -> f64 {
    let mut c = cfg.clone();
    c.schedule.policy = policy;
    engine::run_inference(&c).unwrap().total_s
}

fn plan_dominance() -> Outcome {
    let mut rng = SeededRng::new(77);
    let mut predicted = 0;
    while predicted < 50 {
        let p = random_params(&mut rng);
        let Ok(plan) = solve_plan(&p) else { continue };
        if let Ok(st) = static_split_plan(&p) {
            ensure!(
                plan.predicted_total_seconds <= st.predicted_total_seconds,
                "static wins on {p:?}"
            );
        }
        let host = all_host_plan(&p).unwrap();
        ensure!(
            plan.predicted_total_seconds <= host.predicted_total_seconds,
            "all-host wins on {p:?}"
        );
        predicted += 1;
    }
    let mut simulated = 0;
    for seed in 0..4 {
        for tokens in [24, 32, 40] {
            for bw in [1e6, 1e7, 1e8] {
                let cfg = constrained(seed, tokens, bw);
                let dynamic = total_with(&cfg, Policy::Dynamic);
                let fixed = total_with(&cfg, Policy::Static);
                let host = total_with(&cfg, Policy::AllHost);
                ensure!(
                    dynamic <= fixed && dynamic <= host,
                    "seed {seed} capacity {tokens} B={bw:e}: dynamic {dynamic:e} static {fixed:e} all-host {host:e}"
                );
                simulated += 1;
            }
        }
    }
    Ok(format!(
        "{predicted} predicted draws, {simulated} simulated fixtures"
    ))
}

fn recompute_benefit() -> Outcome {
    let mut cfg = constrained(0, 24, 1.0);
    cfg.workload.gen_len = 48;
    let breakeven = cfg.cost_params().recompute_breakeven_bandwidth();
    cfg.schedule.bandwidth = breakeven / 10.0;
    let p = cfg.cost_params();
    ensure!(
        p.recompute_time(1) < p.transfer_time(0, 1),
        "fixture does not favour recompute"
    );
    let with = {
        let mut c = cfg.clone();
        c.schedule.policy = Policy::Dynamic;
        engine::run_inference(&c).unwrap()
    };
    ensure!(
        with.plan.p2 < cfg.workload.gen_len,
        "solver never entered Phase III: {:?}",
        with.plan
    );
    let without = total_with(&cfg, Policy::NoRecompute);
    let speedup = without / with.total_s;
    ensure!(speedup >= 1.1, "speedup {speedup:.3}");
    Ok(format!(
        "B = break-even/10 = {:.3e} B/s, p2 = {} of {}, speedup {speedup:.3}x",
        cfg.schedule.bandwidth, with.plan.p2, cfg.workload.gen_len
    ))
}

fn replay_peak(plan: &SchedulePlan, p: &CostParams) -> Result<u64, Error> {
    let mut ledger = KvLedger::new(p);
    for layer in 0..p.layers {
        for t in 0..p.prompt_len {
            ledger.store(layer, t)?;
        }
    }
    for j in 0..p.gen_len {
        for layer in 0..p.layers {
            let a = rebalance_actions(plan, p, j, &ledger, layer)?;
            ledger.delete(layer, &a.delete)?;
            ledger.offload(layer, &a.offload)?;
        }
        let tokens = p.prompt_len + j + 1;
        let sel = planning_selection(tokens, p.ratio);
        for layer in 0..p.layers {
            ledger.store(layer, tokens - 1)?;
            let (reload, recompute) = fetch_actions(&sel, ledger.tiers(layer));
            ledger.stage(layer, &reload)?;
            ledger.stage_recomputed(layer, &recompute)?;
            ledger.release_staged(layer);
        }
        ledger.finish_step(j);
    }
    Ok(ledger.peak_device_bytes())
}

fn capacity_safety() -> Outcome {
    let mut rng = SeededRng::new(5);
    let mut replays = 0;
    for _ in 0..200 {
        let p = random_params(&mut rng);
        let mut plans = Vec::new();
        plans.extend(solve_plan(&p));
        plans.extend(static_split_plan(&p));
        plans.extend(all_host_plan(&p));
        for plan in plans {
            let peak = replay_peak(&plan, &p).map_err(|e| format!("{plan:?} on {p:?}: {e}"))?;
            ensure!(
                peak <= p.capacity_bytes(),
                "{plan:?} peaks at {peak} on {p:?}"
            );
            replays += 1;
        }
    }
    let mut runs = 0;
    for seed in 0..3 {
        for tokens in [20, 28, 36] {
            let cfg = constrained(seed, tokens, 1e7);
            for policy in [
                Policy::Dynamic,
                Policy::Static,
                Policy::AllHost,
                Policy::NoRecompute,
            ] {
                let mut c = cfg.clone();
                c.schedule.policy = policy;
                let m = engine::run_inference(&c).map_err(|e| format!("{policy:?}: {e}"))?;
                ensure!(
                    m.peak_device_bytes <= cfg.schedule.device_capacity.unwrap(),
                    "{policy:?} over capacity"
                );
                runs += 1;
            }
        }
    }

    // more requests than the device holds: the batch axis of the sweep
    let mut base = constrained(0, 1, 1e7);
    base.schedule.device_capacity = Some(4 * 48 * base.cost_params().token_kv_bytes());
    let rows = sweep::sweep(
        &base,
        Axis::Batch,
        &[1.0, 2.0, 4.0, 8.0],
        &[Policy::AllDevice, Policy::Dynamic],
        Exec::default(),
    );
    let oom: Vec<f64> = rows
        .iter()
        .filter(|r| {
            r.policy == Policy::AllDevice && r.error_class.as_deref() == Some("OutOfDeviceMemory")
        })
        .map(|r| r.value)
        .collect();
    ensure!(!oom.is_empty(), "all-device never ran out of memory");
    for &b in &oom {
        let dynamic = rows
            .iter()
            .find(|r| r.policy == Policy::Dynamic && r.value == b)
            .unwrap();
        ensure!(
            dynamic.ok(),
            "dynamic failed at batch {b}: {:?}",
            dynamic.error
        );
    }
    Ok(format!(
        "{replays} plan replays and {runs} engine runs within capacity; all-device OOM at batch {oom:?} where dynamic completes"
    ))
}

fn run_cli(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_kvtier"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        status.status.success(),
        "kvtier {args:?} failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = constrained(42, 24, 1e7);
    cfg.model.skew = 3.0;
    let cfg_path = tmp.path().join("config.json");
    std::fs::write(&cfg_path, cfg.to_json().unwrap()).map_err(|e| e.to_string())?;
    let cfg_arg = cfg_path.to_str().unwrap();
    let commands: [(&[&str], &[&str]); 3] = [
        (&["run"], &["metrics.json", "steps.csv", "ledger.csv"]),
        (
            &[
                "sweep",
                "--axis",
                "bandwidth",
                "--policies",
                "dynamic,static,all_device",
            ],
            &["sweep.csv"],
        ),
        (
            &["analyze"],
            &["analysis.json", "sparsity.csv", "correlation.csv"],
        ),
    ];
    let mut compared = 0;
    for (args, files) in commands {
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        for dir in [&a, &b] {
            let mut full = vec!["--config", cfg_arg];
            full.extend_from_slice(args);
            run_cli(&full, dir)?;
        }
        for f in files {
            let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
            let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
            ensure!(!x.is_empty() && x == y, "{f} differs between runs");
            compared += 1;
        }
    }
    Ok(format!(
        "{compared} report files byte-identical across double runs"
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("KV-cache equivalence", kv_cache_equivalence),
        ("SWA degeneracy at r = 1", swa_degeneracy),
        ("SWA equals masked dense", masked_dense_equivalence),
        ("correlation ordering", correlation_ordering),
        ("sparsity metric", sparsity_metric),
        ("quantization bound", quantization_bound),
        ("plan optimality", plan_optimality),
        ("plan dominance", plan_dominance),
        ("recomputation benefit", recompute_benefit),
        ("capacity safety", capacity_safety),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = fmt_duration(start.elapsed());
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{took}]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}
