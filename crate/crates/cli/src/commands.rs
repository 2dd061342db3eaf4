//! Command bodies. Every input path is checked and every output path claimed
//! before any heavy work starts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use moe_upcycle::model::{
    load_bundle, load_checkpoint, save_checkpoint, BundleKind, DenseCheckpoint, Dtype,
    MoECheckpoint, ModelMut, ModelRef,
};
use moe_upcycle::moe::{GateConfig, MoeSpec};
use moe_upcycle::plan::{
    build_groups, cost_report, count_params, forward_flops, CostOptions, GroupKind, ParallelPlan,
};
use moe_upcycle::train::{
    ablate_from, data_source, eval_perplexity, pretrain_dense, write_ablation_csvs, AblationAxis,
    Batch, SyntheticData,
};
use moe_upcycle::upcycle::{
    gather_moe, load_shard, save_shard, shard_dense, upcycle_full, upcycle_shard,
    verify_equivalence,
};
use moe_upcycle::ModelConfig;
use serde_json::json;

use crate::config::{preset, RunConfig};
use crate::{AblateArgs, CliError, EvalArgs, FlopsArgs, Globals, PlanArgs, TrainArgs, UpcycleArgs};

/// Data stream reserved for evaluation batches.
const EVAL_STREAM: u32 = 3;

fn require_input(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::io(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

/// Fails with exit 3 if `path` exists and `force` is off.
fn claim_output(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::io(format!(
            "output {} exists (pass --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn out_dir(g: &Globals) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn all_layers(model: &ModelConfig, layers: Option<Vec<usize>>) -> Vec<usize> {
    layers.unwrap_or_else(|| (0..model.layers).collect())
}

/// A checkpoint of either kind.
enum Loaded {
    Dense(DenseCheckpoint),
    Moe(MoECheckpoint),
}

impl Loaded {
    fn read(dir: &Path) -> Result<Self, CliError> {
        require_input(dir, "checkpoint")?;
        let (manifest, tensors) = load_bundle(dir)?;
        match (manifest.kind, manifest.moe) {
            (BundleKind::Dense, None) => {
                Ok(Self::Dense(DenseCheckpoint::new(manifest.config, tensors)?))
            }
            (BundleKind::Moe, Some(spec)) => Ok(Self::Moe(MoECheckpoint::new(
                manifest.config,
                spec,
                tensors,
            )?)),
            (kind, _) => Err(CliError::io(format!(
                "{} holds a {kind:?} bundle; gather shards before training or evaluating",
                dir.display()
            ))),
        }
    }

    fn view(&self) -> ModelRef<'_> {
        match self {
            Self::Dense(d) => d.view(),
            Self::Moe(m) => m.view(),
        }
    }

    fn view_mut(&mut self) -> ModelMut<'_> {
        match self {
            Self::Dense(d) => d.view_mut(),
            Self::Moe(m) => m.view_mut(),
        }
    }
}

fn round_to(dtype: Dtype, moe: &mut MoECheckpoint) {
    if dtype == Dtype::F32 {
        for t in moe.tensors.values_mut() {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}

pub fn upcycle(g: &Globals, a: UpcycleArgs) -> Result<(), CliError> {
    let sec = &g.config.upcycle;
    let dense_path = a.dense.or_else(|| sec.dense.clone()).ok_or_else(|| {
        CliError::config("no dense checkpoint given (--dense or [upcycle].dense)")
    })?;
    let mut gate = g.config.gate();
    if let Some(n) = a.experts {
        gate.experts = n;
    }
    if let Some(k) = a.top_k {
        gate.top_k = k;
    }
    if let Some(r) = a.router {
        gate.router_type = r;
    }
    if let Some(cf) = a.cf {
        gate.cf = cf;
    }
    gate.validate()?;
    if gate.experts < 2 {
        return Err(CliError::config(format!(
            "upcycling needs at least 2 experts, got {}",
            gate.experts
        )));
    }
    let tp = a.tp.unwrap_or(sec.tp);
    let ep = a.ep.unwrap_or(sec.ep);
    let verify = a.verify || sec.verify;
    require_input(&dense_path, "dense checkpoint")?;

    let out = out_dir(g);
    let targets: Vec<PathBuf> = if tp * ep == 1 {
        vec![out.join("moe")]
    } else {
        (0..tp * ep)
            .map(|r| out.join(format!("shard_{r}")))
            .collect()
    };
    for t in &targets {
        claim_output(t, g.force)?;
    }

    let dense = load_checkpoint(&dense_path)?;
    let layers = all_layers(&dense.config, a.layers.or_else(|| sec.layers.clone()));
    let seed = g.config.seed;
    if tp * ep == 1 {
        let moe = upcycle_full(&dense, gate.clone(), &layers, seed)?;
        save_checkpoint(&targets[0], moe.view(), sec.dtype)?;
    } else {
        for shard in shard_dense(&dense, tp, ep)? {
            let up = upcycle_shard(&shard, gate.clone(), &layers, seed)?;
            save_shard(&targets[up.spec.rank], &up, sec.dtype)?;
        }
    }
    println!(
        "upcycled {} layers to {} experts (top-{}, {} router) into {} location(s) under {}",
        layers.len(),
        gate.experts,
        gate.top_k,
        gate.router_type,
        targets.len(),
        out.display()
    );

    if verify {
        let written = if tp * ep == 1 {
            moe_upcycle::model::load_moe_checkpoint(&targets[0])?
        } else {
            let shards = targets
                .iter()
                .map(|t| load_shard(t))
                .collect::<Result<Vec<_>, _>>()?;
            gather_moe(&shards)?
        };
        let mut expected = upcycle_full(&dense, gate, &layers, seed)?;
        round_to(sec.dtype, &mut expected);
        let report = verify_equivalence(&written, &expected).map_err(|e| CliError {
            code: 4,
            message: format!("verification failed: {e}"),
        })?;
        if !report.is_equal() {
            return Err(CliError {
                code: 4,
                message: format!(
                    "verification failed: {} tensor(s) differ, first {:?}",
                    report.differing.len(),
                    report.first
                ),
            });
        }
        println!(
            "verify: {} tensors bitwise equal to whole-model upcycling",
            report.tensors_compared
        );
    }
    Ok(())
}

fn read_plan(path: &Path) -> Result<ParallelPlan, CliError> {
    require_input(path, "plan file")?;
    let text =
        fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn plan(g: &Globals, a: PlanArgs) -> Result<(), CliError> {
    let plan = match &a.plan {
        Some(p) => read_plan(p)?,
        None => g
            .config
            .plan
            .clone()
            .ok_or_else(|| CliError::config("no plan given (--plan or [plan])"))?,
    };
    let kinds = a
        .check_folding
        .unwrap_or_default()
        .iter()
        .map(|k| k.parse::<GroupKind>())
        .collect::<Result<Vec<_>, _>>()?;
    let report_path = g.out.as_ref().map(|d| d.join("plan_report.csv"));
    if let Some(p) = &report_path {
        claim_output(p, g.force)?;
    }

    let model = g
        .config
        .model
        .clone()
        .unwrap_or_else(ModelConfig::llama3_8b);
    let gate = g.config.gate();
    let spec = MoeSpec::all_layers(gate, model.layers);
    let cost = &g.config.cost;
    let mut opts = CostOptions::for_model(&model);
    opts.tokens_per_rank = cost.tokens_per_rank.unwrap_or(opts.tokens_per_rank);
    opts.flop_tokens = cost.flop_tokens.unwrap_or(opts.flop_tokens);
    opts.convention = cost.convention;
    opts.include_attention = cost.include_attention;
    opts.bytes_per_param = cost.bytes_per_param;
    opts.optimizer_multiplier = cost.optimizer_multiplier;
    let report = cost_report(&plan, &model, Some(&spec), opts)?;
    let groups = build_groups(&plan);

    let mut table = String::new();
    let _ = writeln!(
        table,
        "world {} (node size {}): attention tp{} cp{} dp{} pp{} | moe etp{} ep{} edp{} pp{}",
        plan.world,
        plan.node_size,
        plan.tp,
        plan.cp,
        plan.dp,
        plan.pp,
        plan.etp,
        plan.ep,
        plan.edp,
        plan.pp
    );
    let _ = writeln!(
        table,
        "{:<5} {:>6} {:>7} {:>10}  first group",
        "kind", "size", "groups", "intra-node"
    );
    for (kind, gs) in &groups.groups {
        let _ = writeln!(
            table,
            "{:<5} {:>6} {:>7} {:>10}  {:?}",
            kind.name(),
            gs[0].len(),
            gs.len(),
            if report.intra_node[kind] { "yes" } else { "no" },
            gs[0]
        );
    }
    let mut records = String::from("metric,value\n");
    for (k, v) in report.records() {
        let v = if v.contains(',') {
            format!("\"{v}\"")
        } else {
            v
        };
        let _ = writeln!(records, "{k},{v}");
    }
    print!("{table}\n{records}");
    if let Some(p) = &report_path {
        write_file(p, &records)?;
    }

    let spanning: Vec<&str> = kinds
        .iter()
        .filter(|k| !report.intra_node[k])
        .map(|k| k.name())
        .collect();
    if !spanning.is_empty() {
        return Err(CliError {
            code: 5,
            message: format!(
                "folding check failed: {} group(s) span more than one node of {} ranks",
                spanning.join(", "),
                plan.node_size
            ),
        });
    }
    Ok(())
}

pub fn train(g: &Globals, a: TrainArgs) -> Result<(), CliError> {
    let cfg = &g.config;
    let init = a.init.or_else(|| cfg.run.init.clone());
    if let Some(p) = &init {
        require_input(p, "initial checkpoint")?;
    }
    let mut tc = cfg.train();
    if let Some(steps) = a.steps {
        if tc.schedule.total_steps == tc.steps {
            tc.schedule.total_steps = steps;
        }
        tc.steps = steps;
        tc.schedule.warmup_steps = tc.schedule.warmup_steps.min(steps.saturating_sub(1));
    }
    tc.validate()?;
    let out = out_dir(g);
    let metrics_path = out.join("metrics.csv");
    let ckpt_path = out.join("checkpoint");
    claim_output(&metrics_path, g.force)?;
    claim_output(&ckpt_path, g.force)?;

    let mut model = match &init {
        Some(p) => Loaded::read(p)?,
        None => Loaded::Dense(DenseCheckpoint::init(cfg.model(), cfg.seed)?),
    };
    if a.moe || cfg.run.moe {
        if let Loaded::Dense(d) = &model {
            let layers = all_layers(&d.config, None);
            model = Loaded::Moe(upcycle_full(d, cfg.gate(), &layers, cfg.seed)?);
        }
    }
    let vocab = model.view().config.vocab;
    let mut data = data_source(&cfg.data(), vocab, 0, tc.batch, tc.seq_len)?;
    let run_id = match &model {
        Loaded::Dense(_) => "dense",
        Loaded::Moe(_) => "moe",
    };
    let metrics = moe_upcycle::train::train(model.view_mut(), data.as_mut(), &tc, run_id)?;

    let mut csv = Vec::new();
    metrics
        .write_csv(&mut csv, true)
        .map_err(|e| CliError::io(e.to_string()))?;
    write_file(&metrics_path, &String::from_utf8(csv).expect("ascii csv"))?;
    if ckpt_path.exists() {
        fs::remove_dir_all(&ckpt_path)
            .map_err(|e| CliError::io(format!("{}: {e}", ckpt_path.display())))?;
    }
    save_checkpoint(&ckpt_path, model.view(), cfg.run.dtype)?;
    let losses = metrics.losses();
    println!(
        "trained {} steps ({run_id}): loss {:.4} -> {:.4}; wrote {} and {}",
        losses.len(),
        losses[0],
        losses[losses.len() - 1],
        metrics_path.display(),
        ckpt_path.display()
    );
    Ok(())
}

fn eval_batches(
    cfg: &RunConfig,
    vocab: usize,
    seq_cap: usize,
    count: usize,
) -> Result<Vec<Batch>, CliError> {
    let tc = cfg.train();
    let mut data = SyntheticData::with_stream(&cfg.data(), vocab, EVAL_STREAM)?;
    let seq = tc.seq_len.min(seq_cap);
    Ok((0..count).map(|_| data.next_batch(tc.batch, seq)).collect())
}

pub fn eval(g: &Globals, a: EvalArgs) -> Result<(), CliError> {
    let cfg = &g.config;
    let path = a
        .checkpoint
        .or_else(|| cfg.run.init.clone())
        .ok_or_else(|| CliError::config("no checkpoint given (--checkpoint or [run].init)"))?;
    require_input(&path, "checkpoint")?;
    let report_path = g.out.as_ref().map(|d| d.join("eval.json"));
    if let Some(p) = &report_path {
        claim_output(p, g.force)?;
    }
    let count = a.batches.unwrap_or(cfg.run.eval_batches);
    if count == 0 {
        return Err(CliError::config("eval needs at least one batch"));
    }
    let model = Loaded::read(&path)?;
    let view = model.view();
    let batches = eval_batches(cfg, view.config.vocab, view.config.seq_len, count)?;
    let ppl = eval_perplexity(view, &batches)?;
    let tokens: usize = batches.iter().map(|b| b.targets.len()).sum();
    println!(
        "perplexity {ppl:.6} over {tokens} tokens ({})",
        path.display()
    );
    if let Some(p) = &report_path {
        let body = json!({ "checkpoint": path, "perplexity": ppl, "tokens": tokens });
        write_file(p, &serde_json::to_string_pretty(&body).expect("json"))?;
    }
    Ok(())
}

pub fn ablate(g: &Globals, a: AblateArgs) -> Result<(), CliError> {
    let cfg = &g.config;
    let name = a.axis.unwrap_or_else(|| cfg.ablate.axis.clone());
    let values = a.values.unwrap_or_else(|| {
        cfg.ablate
            .values
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    });
    let axis = AblationAxis::parse(&name, &values)?;
    let mut ab = cfg.ablation();
    if let Some(steps) = a.steps {
        ab.train.steps = steps;
        ab.train.schedule.total_steps = steps;
        ab.train.schedule.warmup_steps =
            ab.train.schedule.warmup_steps.min(steps.saturating_sub(1));
    }
    ab.validate()?;
    let out = out_dir(g);
    for label in axis.labels() {
        claim_output(
            &out.join(format!("ablate_{}_{label}.csv", axis.name())),
            g.force,
        )?;
    }
    let dense = pretrain_dense(&ab)?;
    let runs = ablate_from(&axis, &ab, &dense)?;
    let paths = write_ablation_csvs(&out, &axis, &runs, g.force)?;
    for (r, p) in runs.iter().zip(&paths) {
        let s = &r.metrics.steps;
        println!(
            "{}={}: step-0 loss {:.6}, final loss {:.6}, step-0 drop rate {:.4} -> {}",
            axis.name(),
            r.label,
            s[0].loss,
            s[s.len() - 1].loss,
            s[0].drop_rate(),
            p.display()
        );
    }
    Ok(())
}

pub fn flops(g: &Globals, a: FlopsArgs) -> Result<(), CliError> {
    let cfg = &g.config;
    let sec = &cfg.flops;
    let model = match a.preset.as_deref().or(sec.preset.as_deref()) {
        Some(name) => preset(name)?,
        None => cfg.model.clone().unwrap_or_else(ModelConfig::llama3_8b),
    };
    model.validate()?;
    let mut gate: GateConfig = cfg.gate();
    if let Some(n) = a.experts {
        gate.experts = n;
    }
    if let Some(k) = a.top_k {
        gate.top_k = k;
    }
    gate.validate()?;
    let tokens = a
        .tokens
        .or(sec.tokens)
        .unwrap_or(if model == ModelConfig::llama3_8b() {
            8192
        } else {
            model.seq_len
        });
    let conv = a.convention.unwrap_or(sec.convention);
    let attention = sec.attention && !a.no_attention;
    let report_path = g.out.as_ref().map(|d| d.join("flops.json"));
    if let Some(p) = &report_path {
        claim_output(p, g.force)?;
    }
    let spec = MoeSpec::new(gate, all_layers(&model, sec.layers.clone()));
    spec.validate(model.layers)?;
    let dense_p = count_params(&model, None);
    let moe_p = count_params(&model, Some(&spec));
    let dense_f = forward_flops(&model, None, tokens, conv, attention)?;
    let moe_f = forward_flops(&model, Some(&spec), tokens, conv, attention)?;
    let ratio = moe_f.flops / dense_f.flops;
    println!(
        "{:<6} {:>16} {:>16} {:>12}",
        "model", "total params", "active params", "FLOPs"
    );
    println!(
        "{:<6} {:>16} {:>16} {:>12.4e}",
        "dense", dense_p.total, dense_p.active, dense_f.flops
    );
    println!(
        "{:<6} {:>16} {:>16} {:>12.4e}",
        "moe", moe_p.total, moe_p.active, moe_f.flops
    );
    println!("ratio {ratio:.4} ({conv}, {tokens} tokens, attention {attention})");
    if let Some(p) = &report_path {
        let body = json!({
            "tokens": tokens,
            "convention": conv,
            "include_attention": attention,
            "dense": { "total_params": dense_p.total, "active_params": dense_p.active, "flops": dense_f.flops, "formula": dense_f.formula },
            "moe": { "total_params": moe_p.total, "active_params": moe_p.active, "flops": moe_f.flops, "formula": moe_f.formula },
            "ratio": ratio,
        });
        write_file(p, &serde_json::to_string_pretty(&body).expect("json"))?;
    }
    Ok(())
}
