//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are always shown;
//! exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use moe_upcycle::model::{
    forward, forward_logits, loss_on_tape, schema, DenseCheckpoint, ForwardOptions, ModelConfig,
    Positional, TensorRole,
};
use moe_upcycle::moe::{
    dense_ffn, dispatch, expert_capacity, gate_mixtral, gate_st, router_logits, Capacity,
    CapacityFactor, DropPolicy, GateConfig, MoeSpec, RouterParams, RouterType,
};
use moe_upcycle::plan::{
    build_groups, count_params, forward_flops, pipeline_bubble, validate_plan, Dispatcher,
    FlopConvention, GroupKind, ParallelPlan, PUBLISHED_COUNTS,
};
use moe_upcycle::train::{
    ablate_from, pretrain_dense, AblationAxis, AblationConfig, BlendSampler, BlendSpec, Schedule,
};
use moe_upcycle::upcycle::{gather_moe, shard_dense, upcycle_full, upcycle_shard};
use moe_upcycle::{grad_check, keep_top_k, GradCheckOptions, Rng, Tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Fails unless `$cond` holds; a NaN comparison counts as failure.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

fn random_tokens(rng: &mut Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.below(vocab)).collect()
}

fn random_tensor(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal(0.0, std))
}

fn c1_initialization_equivalence() -> Outcome {
    let cfg = ModelConfig::toy();
    let layers: Vec<usize> = (0..cfg.layers).collect();
    let (mut worst_mixtral, mut worst_st_scale, mut least_st_gap) = (0.0f64, 0.0f64, f64::INFINITY);
    for seed in 0..20u64 {
        let dense = DenseCheckpoint::init(cfg.clone(), 1000 + seed).map_err(|e| e.to_string())?;
        let mut rng = Rng::new(seed, 99);
        let len = 8 + rng.below(25);
        let tokens = random_tokens(&mut rng, cfg.vocab, len);
        let reference = forward_logits(dense.view(), &tokens).map_err(|e| e.to_string())?;

        let gate = GateConfig::new(8, 2);
        let moe = upcycle_full(&dense, gate.clone(), &layers, seed).map_err(|e| e.to_string())?;
        let logits = forward_logits(moe.view(), &tokens).map_err(|e| e.to_string())?;
        let err = rel_err(logits.data(), reference.data());
        ensure!(err <= 1e-9, "seed {seed}: mixtral logits rel err {err:e}");
        worst_mixtral = worst_mixtral.max(err);

        let st = upcycle_full(&dense, gate.with_router(RouterType::St), &layers, seed)
            .map_err(|e| e.to_string())?;
        let out = forward(
            st.view(),
            &tokens,
            ForwardOptions {
                batch: 1,
                record: true,
            },
            None,
        )
        .map_err(|e| e.to_string())?;
        let gap = rel_err(out.logits.data(), reference.data());
        ensure!(
            gap > 1e-6,
            "seed {seed}: st logits match dense (rel err {gap:e})"
        );
        least_st_gap = least_st_gap.min(gap);
        for trace in &out.traces {
            let ffn = dense.view().ffn(trace.layer).map_err(|e| e.to_string())?;
            let full = dense_ffn(&trace.input, &ffn).map_err(|e| e.to_string())?;
            for t in 0..trace.output.rows() {
                let s = trace.gates.row_sum(t);
                ensure!(s < 1.0, "seed {seed}: st gate sum {s} not below 1");
                let expect: Vec<f64> = full.row(t).iter().map(|v| v * s).collect();
                let err = rel_err(trace.output.row(t), &expect);
                ensure!(
                    err <= 1e-9,
                    "seed {seed} layer {} token {t}: st output rel err {err:e}",
                    trace.layer
                );
                worst_st_scale = worst_st_scale.max(err);
            }
        }
    }
    Ok(format!(
        "20 seeds; mixtral max rel err {worst_mixtral:.1e}; st gate-sum scaling max rel err \
         {worst_st_scale:.1e}; st logits differ by >= {least_st_gap:.1e}"
    ))
}

fn c2_online_upcycling() -> Outcome {
    let cfg = ModelConfig::toy();
    let dense = DenseCheckpoint::init(cfg.clone(), 7).map_err(|e| e.to_string())?;
    let gate = GateConfig::new(8, 2);
    let layers: Vec<usize> = (0..cfg.layers).collect();
    let full = upcycle_full(&dense, gate.clone(), &layers, 11).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for tp in [1, 2] {
        for ep in [1, 2, 4] {
            let shards = shard_dense(&dense, tp, ep).map_err(|e| e.to_string())?;
            let up = shards
                .iter()
                .map(|s| upcycle_shard(s, gate.clone(), &layers, 11))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let gathered = gather_moe(&up).map_err(|e| e.to_string())?;
            ensure!(
                gathered.moe == full.moe,
                "tp {tp} ep {ep}: MoE spec differs"
            );
            let names_a: Vec<&String> = gathered.tensors.keys().collect();
            let names_b: Vec<&String> = full.tensors.keys().collect();
            ensure!(names_a == names_b, "tp {tp} ep {ep}: tensor names differ");
            for (name, t) in &full.tensors {
                ensure!(
                    gathered.tensors[name].bitwise_eq(t),
                    "tp {tp} ep {ep}: `{name}` differs"
                );
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} (tp, ep) layouts bitwise equal over {} tensors each",
        full.tensors.len()
    ))
}

fn c3_gating() -> Outcome {
    let mut rng = Rng::new(3, 0);
    let mut rows = 0;
    for _ in 0..200 {
        let n = 2 + rng.below(7);
        let k = 1 + rng.below(n);
        let t = 1 + rng.below(8);
        let h = random_tensor(&mut rng, vec![t, n], 2.0);
        let mix = gate_mixtral(&h, k).map_err(|e| e.to_string())?;
        let st = gate_st(&h, k).map_err(|e| e.to_string())?;
        for r in 0..t {
            let s = mix.row_sum(r);
            ensure!(
                (s - 1.0).abs() <= 1e-12,
                "mixtral row sum {s} (n {n}, k {k})"
            );
            let s = st.row_sum(r);
            if k == n {
                ensure!((s - 1.0).abs() <= 1e-12, "st row sum {s} with k = n = {n}");
            } else {
                ensure!(s < 1.0, "st row sum {s} with k {k} < n {n}");
            }
            rows += 1;
        }
    }

    // Integer-valued vectors force ties; the oracle is a stable sort.
    for _ in 0..500 {
        let n = 1 + rng.below(12);
        let k = 1 + rng.below(n);
        let v: Vec<f64> = (0..n).map(|_| rng.below(4) as f64).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        let expect: Vec<bool> = (0..n).map(|i| !order[..k].contains(&i)).collect();
        let m = keep_top_k(&v, k).map_err(|e| e.to_string())?;
        ensure!(
            m.kept() == k,
            "keep_top_k kept {} of {v:?}, wanted {k}",
            m.kept()
        );
        ensure!(
            m.mask() == expect.as_slice(),
            "keep_top_k tie-break on {v:?} (k {k})"
        );
    }

    // W_g = W_noise = 0 leaves only z * softplus(0) = z * ln 2.
    let (hidden, n, tokens) = (4, 8, 12_500);
    let router = RouterParams::new(
        Tensor::zeros(vec![hidden, n]),
        Tensor::zeros(vec![hidden, n]),
    )
    .map_err(|e| e.to_string())?;
    let x = random_tensor(&mut rng, vec![tokens, hidden], 1.0);
    let mut noise = Rng::new(5, 1);
    let h = router_logits(&x, &router, true, Some(&mut noise)).map_err(|e| e.to_string())?;
    let draws = h.len() as f64;
    let mean_abs = h.data().iter().map(|v| v.abs()).sum::<f64>() / draws;
    let expect = (2.0 / std::f64::consts::PI).sqrt() * std::f64::consts::LN_2;
    let dev = (mean_abs / expect - 1.0).abs();
    ensure!(
        dev <= 0.02,
        "noise mean |H| {mean_abs} vs {expect} ({:.2}% off)",
        dev * 100.0
    );
    let quiet = router_logits(&x, &router, false, Some(&mut noise)).map_err(|e| e.to_string())?;
    ensure!(
        quiet.data().iter().all(|&v| v == 0.0),
        "noise-off logits not plain projection"
    );
    Ok(format!(
        "{rows} gate rows, 500 top-k tie cases, noise mean |H| {:.2}% from sqrt(2/pi) ln 2 over {draws:.0} draws",
        dev * 100.0
    ))
}

fn c4_capacity() -> Outcome {
    let exact = expert_capacity(64, 8, CapacityFactor::Finite(2.0)).map_err(|e| e.to_string())?;
    ensure!(
        exact == Capacity::Limited(16),
        "expert_capacity(64, 8, 2) = {exact:?}"
    );
    let cfs = [0.5, 1.0, 1.25, 2.0, 4.0];
    let mut rng = Rng::new(4, 0);
    let mut total_dropped = 0;
    for batch in 0..1000 {
        let n = [2, 4, 8][rng.below(3)];
        let k = 1 + rng.below(2);
        let t = 1 + rng.below(64);
        let policy = if batch % 2 == 0 {
            DropPolicy::Position
        } else {
            DropPolicy::Score
        };
        let h = random_tensor(&mut rng, vec![t, n], 1.5);
        let gates = gate_mixtral(&h, k).map_err(|e| e.to_string())?;
        let mut previous = usize::MAX;
        for cf in cfs {
            let cap =
                expert_capacity(t, n, CapacityFactor::Finite(cf)).map_err(|e| e.to_string())?;
            let bound = (t as f64 / n as f64 * cf).ceil() as usize;
            let d = dispatch(&gates, cap, policy);
            for (e, a) in d.assignments.iter().enumerate() {
                ensure!(
                    a.len() <= bound,
                    "batch {batch}: expert {e} took {} > {bound}",
                    a.len()
                );
            }
            ensure!(
                d.dropped.len() <= previous,
                "batch {batch}: drops rose to {} at cf {cf}",
                d.dropped.len()
            );
            previous = d.dropped.len();
            total_dropped += previous;
        }
        let cap = expert_capacity(t, n, CapacityFactor::Dropless).map_err(|e| e.to_string())?;
        let d = dispatch(&gates, cap, policy);
        ensure!(
            d.dropped.is_empty(),
            "batch {batch}: dropless dropped {}",
            d.dropped.len()
        );
    }
    Ok(format!(
        "1000 batches x {} capacity factors ({total_dropped} drops total, none over budget); expert_capacity(64, 8, 2) = 16",
        cfs.len()
    ))
}

fn c5_gradients() -> Outcome {
    let cfg = ModelConfig {
        vocab: 11,
        hidden: 8,
        layers: 2,
        heads: 2,
        kv_heads: 1,
        ffn_hidden: 6,
        seq_len: 5,
        positional: Positional::Rotary,
    };
    let mut dense = DenseCheckpoint::init(cfg.clone(), 21).map_err(|e| e.to_string())?;
    // Larger weights than the init scale keep every path well away from zero.
    let mut rng = Rng::new(21, 1000);
    for t in dense.tensors.values_mut() {
        for v in t.data_mut() {
            *v += rng.normal(0.0, 0.3);
        }
    }
    let gate = GateConfig::new(4, 2).with_noise(true);
    let mut moe = upcycle_full(&dense, gate, &[0], 5).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(22, 0);
    for (name, t) in moe.tensors.iter_mut() {
        if name.contains("router") || name.contains("experts") {
            *t = random_tensor(&mut rng, t.shape().to_vec(), 0.5);
        }
    }
    let tokens = random_tokens(&mut rng, cfg.vocab, 10);
    let targets = random_tokens(&mut rng, cfg.vocab, 10);
    let params: Vec<(String, Tensor)> = moe
        .tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let view = moe.view();
    let report = grad_check(
        |tape, vars| {
            // A fresh stream per evaluation freezes the router noise.
            let mut noise = Rng::new(9, 0);
            loss_on_tape(tape, view, vars, &tokens, &targets, 2, Some(&mut noise))
        },
        &params,
        GradCheckOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let has = |needle: &str| report.params.iter().any(|p| p.name.contains(needle));
    ensure!(
        has("router.w_g")
            && has("router.w_noise")
            && has("experts.0.w1")
            && has("layers.1.ffn.w2")
            && has("attn.wq"),
        "parameter coverage incomplete"
    );
    let worst = report.worst().expect("parameters");
    ensure!(
        report.passed(),
        "worst rel err {:.2e} in `{}` (analytic {}, numeric {})",
        worst.max_rel_err,
        worst.name,
        worst.analytic,
        worst.numeric
    );
    let n: usize = params.iter().map(|(_, t)| t.len()).sum();
    Ok(format!(
        "{n} parameters in {} tensors; worst rel err {:.2e} (`{}`)",
        params.len(),
        report.max_rel_err,
        worst.name
    ))
}

fn random_config(rng: &mut Rng) -> (ModelConfig, MoeSpec) {
    let head_dim = [2, 4, 8][rng.below(3)];
    let kv_heads = 1 + rng.below(3);
    let heads = kv_heads * (1 + rng.below(3));
    let cfg = ModelConfig {
        vocab: 5 + rng.below(40),
        hidden: heads * head_dim,
        layers: 1 + rng.below(4),
        heads,
        kv_heads,
        ffn_hidden: 1 + rng.below(24),
        seq_len: 8,
        positional: Positional::None,
    };
    let n = 2 + rng.below(7);
    let k = 1 + rng.below(n);
    let layers: Vec<usize> = (0..cfg.layers).filter(|_| rng.below(2) == 0).collect();
    (cfg, MoeSpec::new(GateConfig::new(n, k), layers))
}

fn c6_counting() -> Outcome {
    let mut rng = Rng::new(6, 0);
    for i in 0..10 {
        let (cfg, spec) = random_config(&mut rng);
        let entries = schema(&cfg, Some(&spec));
        let size = |s: &[usize]| s.iter().product::<usize>() as u64;
        let total: u64 = entries.iter().map(|e| size(&e.shape)).sum();
        let active: u64 = entries
            .iter()
            .filter(|e| !matches!(e.role, TensorRole::Expert(x) if x >= spec.gate.top_k))
            .map(|e| size(&e.shape))
            .sum();
        let c = count_params(&cfg, Some(&spec));
        ensure!(
            c.total == total,
            "config {i}: total {} vs enumerated {total}",
            c.total
        );
        ensure!(
            c.active == active,
            "config {i}: active {} vs enumerated {active}",
            c.active
        );
        let dense = DenseCheckpoint::init(cfg.clone(), i).map_err(|e| e.to_string())?;
        let moe =
            upcycle_full(&dense, spec.gate.clone(), &spec.layers, i).map_err(|e| e.to_string())?;
        ensure!(
            moe.view().param_count() as u64 == total,
            "config {i}: materialised {} vs {total}",
            moe.view().param_count()
        );
        ensure!(
            count_params(&cfg, None).total == dense.view().param_count() as u64,
            "config {i}: dense count"
        );
    }

    let toy = ModelConfig::toy();
    let dense = DenseCheckpoint::init(toy.clone(), 1).map_err(|e| e.to_string())?;
    let layers: Vec<usize> = (0..toy.layers).collect();
    let moe = upcycle_full(&dense, GateConfig::new(8, 2), &layers, 1).map_err(|e| e.to_string())?;
    let tokens = random_tokens(&mut rng, toy.vocab, toy.seq_len);
    let mut worst = 0.0f64;
    for (view, spec) in [(dense.view(), None), (moe.view(), Some(&moe.moe))] {
        let macs = forward(view, &tokens, ForwardOptions::default(), None)
            .map_err(|e| e.to_string())?
            .macs;
        let model = forward_flops(&toy, spec, tokens.len(), FlopConvention::TwoP, true)
            .map_err(|e| e.to_string())?;
        let dev = (model.flops / (2.0 * macs as f64) - 1.0).abs();
        ensure!(dev <= 0.05, "toy flops {} vs 2 * {macs} MACs", model.flops);
        worst = worst.max(dev);
    }

    let llama = ModelConfig::llama3_8b();
    let dense_total = count_params(&llama, None).total as f64;
    ensure!(
        (dense_total / 8.0e9 - 1.0).abs() <= 0.01,
        "llama dense total {dense_total:e}"
    );
    let spec = MoeSpec::all_layers(GateConfig::new(8, 2), llama.layers);
    let conv = FlopConvention::SixP;
    let fd = forward_flops(&llama, None, 8192, conv, true).map_err(|e| e.to_string())?;
    let fm = forward_flops(&llama, Some(&spec), 8192, conv, true).map_err(|e| e.to_string())?;
    let ratio = fm.flops / fd.flops;
    ensure!((ratio - 1.6).abs() <= 0.15, "FLOPs ratio {ratio}");
    let mc = count_params(&llama, Some(&spec));
    Ok(format!(
        "10 configs exact; toy FLOPs vs MAC counter within {:.2}%; llama dense {:.3e}, FLOPs ratio {ratio:.3}; \
         MoE total/active {:.1}B/{:.1}B (reported {:.1}B/{:.1}B, not asserted)",
        worst * 100.0,
        dense_total,
        mc.total as f64 / 1e9,
        mc.active as f64 / 1e9,
        PUBLISHED_COUNTS[1].1 / 1e9,
        PUBLISHED_COUNTS[1].2 / 1e9,
    ))
}

fn random_plan(rng: &mut Rng) -> ParallelPlan {
    let pick = |rng: &mut Rng| 1usize << rng.below(3);
    let (tp, cp, dp, pp) = (pick(rng), pick(rng), pick(rng), pick(rng));
    let side = tp * cp * dp;
    let divisors: Vec<usize> = (1..=side).filter(|d| side % d == 0).collect();
    let etp = divisors[rng.below(divisors.len())];
    let rest: Vec<usize> = (1..=side / etp)
        .filter(|d| (side / etp).is_multiple_of(*d))
        .collect();
    let ep = rest[rng.below(rest.len())];
    ParallelPlan {
        world: side * pp,
        node_size: 8,
        tp,
        cp,
        dp,
        pp,
        etp,
        ep,
        edp: side / (etp * ep),
        vp: 1,
        microbatches: 1,
        dispatcher: Dispatcher::Alltoall,
    }
}

fn c7_folding() -> Outcome {
    let plan = ParallelPlan::folding_example();
    validate_plan(
        &plan,
        &ModelConfig::llama3_8b(),
        Some(&GateConfig::new(8, 2)),
    )
    .map_err(|e| e.to_string())?;
    let g = build_groups(&plan);
    let node: Vec<usize> = (0..plan.node_size).collect();
    ensure!(
        g.groups[&GroupKind::Ep] == vec![node.clone()],
        "EP groups {:?}",
        g.groups[&GroupKind::Ep]
    );
    for kind in [GroupKind::Tp, GroupKind::Cp] {
        for grp in &g.groups[&kind] {
            ensure!(
                grp.iter().all(|r| node.contains(r)),
                "{kind:?} group {grp:?} leaves the node"
            );
        }
    }

    let mut rng = Rng::new(7, 0);
    for i in 0..200 {
        let p = random_plan(&mut rng);
        let model = ModelConfig {
            heads: 8,
            kv_heads: 8,
            hidden: 64,
            ffn_hidden: 32,
            ..ModelConfig::toy()
        };
        validate_plan(&p, &model, Some(&GateConfig::new(p.ep * 2, 1)))
            .map_err(|e| format!("plan {i} rejected: {e}"))?;
        let g = build_groups(&p);
        ensure!(g == build_groups(&p), "plan {i}: nondeterministic groups");
        let dims = [
            (GroupKind::Tp, p.tp),
            (GroupKind::Cp, p.cp),
            (GroupKind::Dp, p.dp),
            (GroupKind::Pp, p.pp),
            (GroupKind::Etp, p.etp),
            (GroupKind::Ep, p.ep),
            (GroupKind::Edp, p.edp),
        ];
        for (kind, size) in dims {
            let groups = &g.groups[&kind];
            let mut seen = vec![0usize; p.world];
            for grp in groups {
                ensure!(
                    grp.len() == size,
                    "plan {i}: {kind:?} group of {} != {size}",
                    grp.len()
                );
                for &r in grp {
                    seen[r] += 1;
                }
            }
            ensure!(
                seen.iter().all(|&c| c == 1),
                "plan {i}: {kind:?} groups do not partition"
            );
        }
    }

    let b1 = pipeline_bubble(4, 1, 4).map_err(|e| e.to_string())?;
    let b2 = pipeline_bubble(4, 8, 4).map_err(|e| e.to_string())?;
    ensure!(b1 == 3.0 / 7.0, "bubble(4,1,4) = {b1}");
    ensure!(b2 == 3.0 / 35.0, "bubble(4,8,4) = {b2}");
    Ok("folding example validates with EP = node 0 and TP, CP nested; 200 random plans partition; bubbles 3/7 and 3/35".into())
}

fn c8_schedule() -> Outcome {
    let s = Schedule::published(1000);
    let at = |step| s.lr_at(step).map_err(|e| e.to_string());
    ensure!(at(100)? == 3e-5, "lr_at(100) = {}", at(100)?);
    ensure!(at(1000)? == 3e-7, "lr_at(total) = {}", at(1000)?);
    let mid = at(550)?;
    let closed = 3e-7 + 0.5 * (3e-5 - 3e-7);
    ensure!((mid - closed).abs() <= 1e-12, "midpoint {mid} vs {closed}");
    let left = at(99)?;
    let right = at(101)?;
    ensure!(
        (at(100)? - left - 3e-5 / 100.0).abs() <= 1e-18,
        "warmup slope broken at boundary"
    );
    ensure!(
        (at(100)? - right).abs() <= 1e-9,
        "jump after boundary: {right}"
    );
    ensure!(s.lr_at(1001).is_err(), "step past total accepted");
    Ok(format!(
        "lr(100) = 3e-5, lr(1000) = 3e-7 exactly; midpoint off by {:.1e}",
        (mid - closed).abs()
    ))
}

fn c9_blend() -> Outcome {
    let spec = BlendSpec::seven_three(2024);
    let draws: Vec<usize> = BlendSampler::new(&spec)
        .map_err(|e| e.to_string())?
        .take(100_000)
        .collect();
    let f = draws.iter().filter(|&&s| s == 0).count() as f64 / draws.len() as f64;
    ensure!((f - 0.7).abs() <= 0.01, "source-0 frequency {f}");
    let again: Vec<usize> = BlendSampler::new(&spec)
        .map_err(|e| e.to_string())?
        .take(100_000)
        .collect();
    ensure!(draws == again, "same seed gave different streams");
    Ok(format!(
        "source-0 frequency {f:.4} over 1e5 draws; repeat stream identical"
    ))
}

fn c10_ablation() -> Outcome {
    let axis = AblationAxis::RouterType(vec![RouterType::Mixtral, RouterType::St]);
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let cfg = AblationConfig::desk(seed);
        let dense = pretrain_dense(&cfg).map_err(|e| e.to_string())?;
        let runs = ablate_from(&axis, &cfg, &dense).map_err(|e| e.to_string())?;
        let (mix, st) = (&runs[0].metrics, &runs[1].metrics);
        ensure!(
            mix.steps.len() == 2000 && st.steps.len() == 2000,
            "seed {seed}: short run"
        );
        let (l_mix, l_st) = (mix.steps[0].loss, st.steps[0].loss);
        ensure!(
            l_mix < l_st,
            "seed {seed}: step-0 loss mixtral {l_mix} !< st {l_st}"
        );
        gaps.push(l_st - l_mix);
        for run in &runs {
            let w = run.metrics.window_means(100);
            ensure!(w.len() == 20, "seed {seed}: {} windows", w.len());
            if let Some(i) = w.windows(2).position(|p| p[1] >= p[0]) {
                return Err(format!(
                    "seed {seed} {}: 100-step mean rose at window {} ({} -> {})",
                    run.label,
                    i + 1,
                    w[i],
                    w[i + 1]
                ));
            }
        }
    }
    let least = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "5 seeds; st step-0 loss above mixtral by >= {least:.4}; all 20 100-step mean losses strictly decrease in every run"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("initialization equivalence", c1_initialization_equivalence),
        ("online upcycling", c2_online_upcycling),
        ("gating math", c3_gating),
        ("capacity semantics", c4_capacity),
        ("differentiability", c5_gradients),
        ("counting oracles", c6_counting),
        ("folding planner", c7_folding),
        ("schedule", c8_schedule),
        ("blend", c9_blend),
        ("ablation shape", c10_ablation),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2}. {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
