// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use svtrace::analysis::{summarize_firings, Heatmap, Manifest, SparsityHistogram};
use svtrace::intervene::{multi_edge, summarize, to_csv, Basis, Direction, InterventionSpec, PromptCase, Site};
use svtrace::ioi::{generate_dataset, write_jsonl, IoiAssets, IoiPrompt, ReferenceHeads, Role};
use svtrace::model::{HeadId, LogitRows};
use svtrace::tokenizer::TokenId;
use svtrace::trace::{
    accumulate, scaled_threshold, score_against_reference, trace_capture, EdgeKey, PromptTrace, Side, SliceMode,
    TraceConfig, TraceGraph,
};

use crate::config::{usage, BasisArg, Cli, Command, DirectionArg, InterveneArgs, ModeArg, Model, RunArgs, SiteArg};

pub fn run(cli: Cli) -> Result<()> {
    let args = cli.run;
    args.validate()?;
    if let Some(n) = args.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Trace => cmd_trace(&args),
        Command::Sparsity { input } => cmd_sparsity(&args, &input),
        Command::Intervene(iv) => cmd_intervene(&args, &iv),
        Command::Heatmap { downstream, role } => cmd_heatmap(&args, downstream, role),
    }
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn write_json(dir: &Path, name: &str, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write(dir, name, s)
}

fn out_dir(args: &RunArgs) -> Result<&Path> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    Ok(&args.out)
}

fn manifest(args: &RunArgs, model: &Model, command: &str, n_prompts: usize, parameters: serde_json::Value) -> Manifest {
    Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        weights_digest: model.digest.clone(),
        config: model.weights.config,
        seed: args.seed,
        n_prompts,
        parameters,
    }
}

fn fold(args: &RunArgs, model: &Model, ids: &mut [TokenId]) {
    if args.fold_ids {
        let v = model.weights.config.vocab as TokenId;
        ids.iter_mut().for_each(|id| *id %= v);
    }
}

fn dataset(args: &RunArgs, model: &Model) -> Result<Vec<IoiPrompt>> {
    let vocab = args.tokenizer()?;
    let mut prompts = generate_dataset(&vocab, &IoiAssets::bundled()?, args.seed, args.n_prompts)?;
    for p in &mut prompts {
        fold(args, model, &mut p.ids);
        let mut pair = [p.io_id, p.s_id];
        fold(args, model, &mut pair);
        [p.io_id, p.s_id] = pair;
    }
    Ok(prompts)
}

fn trace_config(args: &RunArgs) -> TraceConfig {
    TraceConfig {
        firing_threshold: args.firing_threshold,
        significance: args.significance,
        mode: args.mode.into(),
    }
}

fn cmd_trace(args: &RunArgs) -> Result<()> {
    let model = args.model()?;
    args.check_heads(&model.weights, &args.start_heads)?;
    let prompts = dataset(args, &model)?;
    let t0 = Instant::now();
    let cfg = trace_config(args);
    let traces: Vec<PromptTrace> = prompts
        .par_iter()
        .map(|p| -> Result<PromptTrace> {
            let cap = model.weights.forward_with(&p.ids, &[], LogitRows::Last)?;
            Ok(trace_capture(
                &cap,
                &model.omegas,
                cfg,
                p.index,
                Some(p.roles),
                &args.start_heads,
                p.roles.end,
            )?)
        })
        .collect::<Result<_>>()?;
    let secs = t0.elapsed().as_secs_f64();

    let n = prompts.len();
    let edge_min = scaled_threshold(args.edge_min, n);
    let skeleton_min = scaled_threshold(args.skeleton_min, n);
    let graph = accumulate(&traces, edge_min);
    let skeleton = graph.filtered(skeleton_min);
    let (precision, recall) = score_against_reference(&skeleton, &ReferenceHeads::bundled().all());

    let dir = out_dir(args)?;
    write_jsonl(&prompts, dir.join("prompts.jsonl"))?;
    let mut jl = String::new();
    for t in &traces {
        jl.push_str(&serde_json::to_string(t)?);
        jl.push('\n');
    }
    write(dir, "traces.jsonl", jl)?;
    write_json(dir, "graph.json", &graph.to_json())?;
    write(dir, "graph.dot", graph.to_dot())?;
    write_json(dir, "skeleton.json", &skeleton.to_json())?;
    write(dir, "skeleton.dot", skeleton.to_dot())?;
    let summary = serde_json::json!({
        "n_prompts": n,
        "edge_min": edge_min,
        "skeleton_min": skeleton_min,
        "graph_edges": graph.edges.len(),
        "skeleton_edges": skeleton.edges.len(),
        "skeleton_heads": skeleton.heads().iter().map(|h| h.to_string()).collect::<Vec<_>>(),
        "precision": precision,
        "recall": recall,
    });
    write_json(dir, "summary.json", &summary)?;
    write_json(
        dir,
        "manifest.json",
        &manifest(
            args,
            &model,
            "trace",
            n,
            serde_json::json!({ "trace": cfg_json(args), "edge_min": args.edge_min, "skeleton_min": args.skeleton_min }),
        ),
    )?;
    println!(
        "traced {n} prompts in {secs:.1}s: {} edges (min {edge_min}), skeleton {} heads (min {skeleton_min}), precision {precision:.3}, recall {recall:.3}",
        graph.edges.len(),
        skeleton.heads().len()
    );
    Ok(())
}

fn cfg_json(args: &RunArgs) -> serde_json::Value {
    serde_json::json!({
        "start_heads": args.start_heads.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
        "firing_threshold": args.firing_threshold,
        "significance": args.significance,
        "mode": match args.mode { ModeArg::Signal => "signal", ModeArg::AllSlices => "all_slices" },
    })
}

fn cmd_sparsity(args: &RunArgs, input: &str) -> Result<()> {
    let model = args.model()?;
    let samples: Vec<Vec<TokenId>> = if input == "ioi" {
        dataset(args, &model)?.into_iter().map(|p| p.ids).collect()
    } else {
        let text = match fs::read_to_string(input) {
            Ok(t) => t,
            Err(e) => return usage(format!("cannot read text input {input}: {e}")),
        };
        let vocab = args.tokenizer()?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut ids = vocab.encode(l);
                ids.truncate(model.weights.config.ctx);
                fold(args, &model, &mut ids);
                ids
            })
            .collect()
    };
    let sizes: Vec<Vec<usize>> = samples
        .par_iter()
        .map(|ids| -> Result<Vec<usize>> {
            let cap = model.weights.forward_with(ids, &[], LogitRows::Last)?;
            Ok(summarize_firings(&cap, &model.omegas, args.firing_threshold, false)?
                .iter()
                .map(|f| f.signal.len())
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut hist = SparsityHistogram::default();
    sizes.iter().flatten().for_each(|&s| hist.add(s));

    let dir = out_dir(args)?;
    write(dir, "sparsity.csv", hist.to_csv())?;
    write_json(dir, "sparsity.json", &hist.summary())?;
    write_json(
        dir,
        "manifest.json",
        &manifest(
            args,
            &model,
            "sparsity",
            samples.len(),
            serde_json::json!({ "input": input, "firing_threshold": args.firing_threshold }),
        ),
    )?;
    println!(
        "{} samples, {} firings, median |S| {}, {:.1}% with |S| <= 10",
        samples.len(),
        hist.total(),
        hist.median().map_or("n/a".to_string(), |m| m.to_string()),
        100.0 * hist.fraction_at_most(10)
    );
    Ok(())
}

/// Parsed `--edge` selector.
#[derive(Debug, Clone, PartialEq)]
enum Selector {
    Exact(EdgeKey),
    /// Heaviest edge into a head writing to a role.
    Top(HeadId, Role),
}

fn parse_side(s: &str) -> Option<Side> {
    match s {
        "dest" => Some(Side::Dest),
        "src" => Some(Side::Src),
        _ => None,
    }
}

fn parse_selector(s: &str) -> Result<Selector> {
    let bad = || {
        usage(format!(
            "bad edge selector `{s}`; expected U.H-D.H:side:dest_role:src_role or top:D.H:role"
        ))
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["top", head, role] => {
            let (Ok(h), Ok(r)) = (crate::config::parse_head(head), crate::config::parse_role(role)) else {
                return bad();
            };
            Ok(Selector::Top(h, r))
        }
        [heads, side, dr, sr] => {
            let Some((u, d)) = heads.split_once('-') else {
                return bad();
            };
            let (Ok(upstream), Ok(downstream)) = (crate::config::parse_head(u), crate::config::parse_head(d)) else {
                return bad();
            };
            let (Some(side), Some(dest_role), Some(src_role)) = (parse_side(side), Role::parse(dr), Role::parse(sr))
            else {
                return bad();
            };
            Ok(Selector::Exact(EdgeKey {
                upstream,
                downstream,
                dest_role,
                src_role,
                side,
            }))
        }
        _ => bad(),
    }
}

fn selector_text(k: &EdgeKey) -> String {
    format!(
        "{}.{}-{}.{}:{}:{}:{}",
        k.upstream.layer,
        k.upstream.head,
        k.downstream.layer,
        k.downstream.head,
        k.side.as_str(),
        k.dest_role,
        k.src_role
    )
}

/// Number of differing fields, used to suggest alternatives.
fn distance(a: &EdgeKey, b: &EdgeKey) -> usize {
    usize::from(a.upstream != b.upstream)
        + usize::from(a.downstream != b.downstream)
        + usize::from(a.side != b.side)
        + usize::from(a.dest_role != b.dest_role)
        + usize::from(a.src_role != b.src_role)
}

fn resolve(graph: &TraceGraph, sel: &Selector) -> Result<EdgeKey> {
    let found = match sel {
        Selector::Exact(k) => graph.edges.iter().find(|e| e.key == *k).map(|e| e.key),
        Selector::Top(h, r) => graph
            .edges
            .iter()
            .filter(|e| e.key.downstream == *h && e.key.written_role() == *r)
            .max_by(|a, b| a.weight.total_cmp(&b.weight).then(b.key.cmp(&a.key)))
            .map(|e| e.key),
    };
    if let Some(k) = found {
        return Ok(k);
    }
    let mut near: Vec<(usize, f64, EdgeKey)> = graph
        .edges
        .iter()
        .map(|e| {
            let d = match sel {
                Selector::Exact(k) => distance(k, &e.key),
                Selector::Top(h, r) => usize::from(e.key.downstream != *h) + usize::from(e.key.written_role() != *r),
            };
            (d, e.weight, e.key)
        })
        .collect();
    near.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let list: Vec<String> = near
        .iter()
        .take(5)
        .map(|(_, w, k)| format!("  {} (weight {w:.2})", selector_text(k)))
        .collect();
    usage(format!(
        "no traced edge matches the selector; nearest edges:\n{}",
        if list.is_empty() {
            "  (graph is empty)".to_string()
        } else {
            list.join("\n")
        }
    ))
}

fn read_traces(path: &Path) -> Result<Vec<PromptTrace>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn read_prompts(path: &Path) -> Result<Vec<IoiPrompt>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn cmd_intervene(args: &RunArgs, iv: &InterveneArgs) -> Result<()> {
    let trace_dir = iv.trace_dir.as_deref().unwrap_or(&args.out);
    let (tp, pp) = (trace_dir.join("traces.jsonl"), trace_dir.join("prompts.jsonl"));
    if !tp.exists() || !pp.exists() {
        return usage(format!(
            "no trace output in {}; run `svtrace trace` first",
            trace_dir.display()
        ));
    }
    let selectors: Vec<Selector> = iv.edge.iter().map(|s| parse_selector(s)).collect::<Result<_>>()?;
    let model = args.model()?;
    let traces = read_traces(&tp)?;
    let prompts = read_prompts(&pp)?;
    if traces.len() != prompts.len() {
        anyhow::bail!(
            "{} traces but {} prompts in {}",
            traces.len(),
            prompts.len(),
            trace_dir.display()
        );
    }
    let graph = accumulate(&traces, scaled_threshold(args.edge_min, traces.len()));
    let keys: Vec<EdgeKey> = selectors.iter().map(|s| resolve(&graph, s)).collect::<Result<_>>()?;

    let site = match iv.site {
        SiteArg::Global => Site::Global,
        SiteArg::Local => Site::Local,
        SiteArg::LocalLayerwide => Site::LocalLayerwide,
    };
    let direction = match iv.direction {
        DirectionArg::Ablate => Direction::Ablate,
        DirectionArg::Boost => Direction::Boost,
    };
    let basis = match iv.basis {
        BasisArg::Signal => Basis::Signal,
        BasisArg::Random => Basis::Random { seed: iv.random_seed },
    };
    let specs: Vec<InterventionSpec> = keys
        .iter()
        .map(|&edge| InterventionSpec {
            edge,
            site,
            direction,
            basis,
        })
        .collect();
    let cases: Vec<PromptCase<'_>> = prompts
        .iter()
        .zip(&traces)
        .map(|(p, t)| PromptCase::from_prompt(p, &t.records))
        .collect();
    let reports = multi_edge(&model.weights, &model.omegas, &specs, &cases)?;
    let summary = summarize(&reports);

    let dir = out_dir(args)?;
    write(dir, "interventions.csv", to_csv(&reports))?;
    let edges: Vec<String> = keys.iter().map(selector_text).collect();
    write_json(
        dir,
        "interventions.json",
        &serde_json::json!({
            "edges": edges,
            "site": site.as_str(),
            "direction": direction.as_str(),
            "basis": basis.label(),
            "summary": summary,
        }),
    )?;
    write_json(
        dir,
        "manifest.json",
        &manifest(
            args,
            &model,
            "intervene",
            prompts.len(),
            serde_json::json!({ "edges": edges, "site": site.as_str(), "direction": direction.as_str(), "basis": basis.label() }),
        ),
    )?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "{} on {} edge(s) [{} basis, {}]:",
        direction.as_str(),
        keys.len(),
        basis.label(),
        site.as_str()
    )?;
    for k in &keys {
        writeln!(out, "  {k}")?;
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    writeln!(
        out,
        "{} prompts: median delta_F {}, median delta score {}, median cosine {}, median norm ratio {}",
        summary.n,
        fmt(summary.median_delta_f),
        fmt(summary.median_delta_attn_score),
        fmt(summary.median_cosine_sim),
        fmt(summary.median_norm_ratio)
    )?;
    Ok(())
}

fn cmd_heatmap(args: &RunArgs, downstream: HeadId, role: Role) -> Result<()> {
    let model = args.model()?;
    args.check_heads(&model.weights, &[downstream])?;
    let prompts = dataset(args, &model)?;
    let cfg = model.weights.config;
    let mut maps = [
        Heatmap::new(&cfg, downstream, role, SliceMode::Signal),
        Heatmap::new(&cfg, downstream, role, SliceMode::AllSlices),
    ];
    // forwards run in parallel chunks; accumulation stays in prompt order
    for chunk in prompts.chunks(32) {
        let caps: Vec<_> = chunk
            .par_iter()
            .map(|p| model.weights.forward_with(&p.ids, &[], LogitRows::Last))
            .collect::<svtrace::Result<_>>()?;
        for (p, cap) in chunk.iter().zip(&caps) {
            for m in &mut maps {
                m.add(cap, &model.omegas, &p.roles, args.firing_threshold)?;
            }
        }
    }
    let dir = out_dir(args)?;
    let stem = format!("heatmap_{}_{}_{}", downstream.layer, downstream.head, role);
    let mut summary = serde_json::Map::new();
    for (m, label) in maps.iter().zip(["signal", "all_slices"]) {
        write(dir, &format!("{stem}_{label}.csv"), m.to_csv())?;
        summary.insert(
            label.to_string(),
            serde_json::json!({
                "firings": m.events,
                "entropy": m.entropy(),
                "top": m.ranked().iter().take(10).map(|(h, v)| serde_json::json!({"head": h.to_string(), "value": v})).collect::<Vec<_>>(),
            }),
        );
    }
    write_json(dir, &format!("{stem}.json"), &summary)?;
    write_json(
        dir,
        "manifest.json",
        &manifest(
            args,
            &model,
            "heatmap",
            prompts.len(),
            serde_json::json!({ "downstream": downstream.to_string(), "role": role.as_str(), "firing_threshold": args.firing_threshold }),
        ),
    )?;
    let top: Vec<String> = maps[0]
        .ranked()
        .iter()
        .take(3)
        .map(|(h, v)| format!("{h} {v:.3}"))
        .collect();
    println!(
        "{downstream} at {role}: {} firings; entropy signal {:.4}, all slices {:.4}; top signal cells: {}",
        maps[0].events,
        maps[0].entropy(),
        maps[1].entropy(),
        top.join(", ")
    );
    Ok(())
}
