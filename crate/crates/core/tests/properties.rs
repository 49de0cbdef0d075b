use kvtier::attention::{self, gathered_attention, swa_select, Variant};
use kvtier::math::{self, Matrix};
use kvtier::memsim::{CostParams, KvLedger, KvPrecision, Tier};
use kvtier::quant;
use kvtier::scheduler::{self, Phase, SchedulePlan};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

/// Softmax attention of one query row with unselected logits set to −∞.
fn masked_dense(q: &[f64], k: &Matrix, v: &Matrix, keep: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = (0..k.rows())
        .map(|r| {
            if keep[r] {
                math::dot(q, k.row(r)) * scale
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let w: Vec<f64> = e.iter().map(|x| x / z).collect();
    let out = (0..v.cols())
        .map(|c| (0..v.rows()).map(|r| w[r] * v.get(r, c)).sum())
        .collect();
    (out, w)
}

fn selection_case() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
    (1usize..4, 1usize..24).prop_flat_map(|(heads, n)| {
        (
            Just(heads),
            Just(n),
            prop::collection::vec(any::<bool>(), n)
                .prop_filter("nonempty", |m| m.iter().any(|&b| b)),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gathered_equals_masked_dense(
        (heads, n, keep) in selection_case(),
        seed in any::<u64>(),
    ) {
        let mut rng = math::SeededRng::new(seed);
        let d = 4;
        let q = rng.uniform_matrix(heads, d, -2.0, 2.0);
        let keys: Vec<Matrix> = (0..heads).map(|_| rng.uniform_matrix(n, d, -2.0, 2.0)).collect();
        let values: Vec<Matrix> = (0..heads).map(|_| rng.uniform_matrix(n, d, -2.0, 2.0)).collect();
        let idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        let got = gathered_attention(&q, &keys, &values, &idx).unwrap();
        for h in 0..heads {
            let (out, w) = masked_dense(q.row(h), &keys[h], &values[h], &keep);
            for (a, b) in got.attn.row(h).iter().zip(&out) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            for (a, b) in got.aw_rows.row(h).iter().zip(&w) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn full_selection_equals_dense(q in matrix(1, 4), k in matrix(6, 4), v in matrix(6, 4)) {
        let (dense, _) = attention::dense_attention(&q, &k, &v, false).unwrap();
        let got = gathered_attention(&q, &[k], &[v], &(0..6).collect::<Vec<_>>()).unwrap();
        for (a, b) in got.attn.data().iter().zip(dense.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn quantization_error_is_half_a_step(
        x in prop::collection::vec(-100.0f64..100.0, 1..8usize).prop_map(|v| {
            let mut x = v.clone();
            x.extend(v.iter().map(|a| a * 0.5));
            x
        }),
        bits in prop::sample::select(vec![4u32, 8]),
    ) {
        let ch = x.len() / 2;
        let q = quant::quantize(&x, bits, ch).unwrap();
        let back = quant::dequantize(&q);
        for (i, (a, b)) in x.iter().zip(&back).enumerate() {
            let lambda = q.scales[i / ch];
            prop_assert!((a - b).abs() <= lambda / 2.0 + 1e-9);
        }
    }

    #[test]
    fn requantization_is_idempotent(
        x in prop::collection::vec(-10.0f64..10.0, 16),
        bits in prop::sample::select(vec![4u32, 8]),
    ) {
        let once = quant::quantize(&x, bits, 8).unwrap();
        let twice = quant::quantize(&quant::dequantize(&once), bits, 8).unwrap();
        prop_assert_eq!(&once.codes, &twice.codes);
        let (a, b) = (quant::dequantize(&once), quant::dequantize(&twice));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn quantization_preserves_order(x in prop::collection::vec(-10.0f64..10.0, 8)) {
        let back = quant::fake_quantize(&x, 8, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if x[i] <= x[j] {
                    prop_assert!(back[i] <= back[j]);
                }
            }
        }
    }

    #[test]
    fn sparsity_is_scale_invariant(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..5),
        c in 0.01f64..100.0,
    ) {
        let m = Matrix::from_rows(&rows).unwrap();
        let s = attention::attention_sparsity(&m, 0.01).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, attention::attention_sparsity(&m.scale(c), 0.01).unwrap());
    }

    #[test]
    fn one_hot_rows_are_maximally_sparse(w in 1usize..64, hot in any::<prop::sample::Index>()) {
        let mut m = Matrix::zeros(1, w);
        m.set(0, hot.index(w), 1.0);
        let s = attention::attention_sparsity(&m, 0.01).unwrap();
        prop_assert_eq!(s, (w - 1) as f64 / w as f64);
    }

    #[test]
    fn swa_selection_shape(
        sum in prop::collection::vec(0.0f64..1.0, 1..64),
        ratio in 0.05f64..1.0,
    ) {
        let n = sum.len();
        let sel = swa_select(&sum, n, ratio).unwrap();
        let idx = sel.indices();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        prop_assert!(sel.local_indices.iter().all(|&i| i >= n - sel.k));
        let (local, global) = attention::swa_split(n, ratio);
        prop_assert_eq!(idx.len(), (local + global).min(n));
    }

    #[test]
    fn spearman_is_bounded_and_self_one(
        a in prop::collection::vec(-5.0f64..5.0, 2..40),
    ) {
        prop_assume!(a.iter().any(|&x| x != a[0]));
        prop_assert!((math::spearman(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        let b: Vec<f64> = a.iter().map(|x| -x * x * x).collect();
        let r = math::spearman(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
    }

    #[test]
    fn phases_never_go_back(p1 in 0usize..20, extra in 0usize..20, n_extra in 0usize..10) {
        let p2 = p1 + extra;
        let n = p2 + n_extra;
        prop_assume!(p1 < p2 || p2 == n);
        let plan = SchedulePlan::dynamic(0.5, 0.5, p1, p2);
        let rank = |p: Phase| match p { Phase::I => 0, Phase::II => 1, Phase::III => 2 };
        let ranks: Vec<u8> = (0..n).map(|j| rank(plan.phase(j))).collect();
        prop_assert!(ranks.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn reloads_stay_inside_the_selection(
        tiers in prop::collection::vec(0u8..3, 1..40),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..10),
    ) {
        let tiers: Vec<Tier> = tiers
            .into_iter()
            .map(|t| match t { 0 => Tier::Device, 1 => Tier::Host, _ => Tier::Deleted })
            .collect();
        let mut sel: Vec<usize> = picks.iter().map(|i| i.index(tiers.len())).collect();
        sel.sort_unstable();
        sel.dedup();
        let (reload, recompute) = scheduler::fetch_actions(&sel, &tiers);
        for &t in &reload {
            prop_assert!(sel.contains(&t) && tiers[t] == Tier::Host);
        }
        for &t in &recompute {
            prop_assert!(sel.contains(&t) && tiers[t] == Tier::Deleted);
        }
    }

    #[test]
    fn ledger_audit_balances(ops in prop::collection::vec((0u8..4, 0usize..12), 1..60)) {
        let params = CostParams {
            hidden: 8,
            layers: 1,
            batch: 1,
            prompt_len: 1,
            gen_len: 1,
            ratio: 1.0,
            bandwidth: 1e6,
            precision: KvPrecision::Fp16,
            device_capacity: None,
            mac_rate: 1e9,
            recompute_overhead: 1.0,
        };
        let mut ledger = KvLedger::new(&params);
        for t in 0..12 {
            ledger.store(0, t).unwrap();
        }
        for (op, t) in ops {
            let _ = match op {
                0 => ledger.offload(0, &[t]),
                1 => ledger.reload(0, &[t]),
                2 => ledger.delete(0, &[t]),
                _ => ledger.stage(0, &[t]),
            };
            ledger.release_staged(0);
            let (dev, host) = ledger.audit();
            prop_assert_eq!(dev, ledger.device_bytes());
            prop_assert_eq!(host, ledger.host_bytes());
        }
    }
}

#[test]
fn variant_names_round_trip() {
    for v in [
        Variant::Dense,
        Variant::Swa,
        Variant::Local,
        Variant::Strided,
    ] {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
}
