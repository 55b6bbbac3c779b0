"""Pipeline stages and their on-disk artifacts.

Every stage reads its predecessors' artifacts from the output directory and
writes versioned, self-describing artifacts (schema version + producing
stage + config hash), so out-of-order invocation with a different
configuration is detected instead of silently mixing runs. Running stages
one at a time produces byte-identical output to ``run-all`` because each
stage derives its randomness from the single pipeline seed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import baseline, compress, knowledge, recovery
from .checkpoint import checkpoint_extra, load_checkpoint, save_checkpoint
from .config import PipelineConfig, write_config
from .data import generate_corpus, load_corpora, save_corpora
from .errors import NumericError, StageError
from .evaluate import mean_cross_entropy, per_source_perplexity
from .graph import build_trace_graph, dump_graph, mark_composed_spans
from .groups import GroupSet, dump_groups, discover_node_groups, partition_variables
from .lhspg import LhspgConfig, run_lhspg
from .model import ModelConfig, build_model, next_token_loss
from .optim import make_optimizer
from .recovery import RecoveryConfig
from .tensor import Tape
from .util import stage_rng

STAGES = ("gen-data", "pretrain", "analyze", "prune", "compress", "recover", "eval", "report")

ARTIFACTS = {
    "gen-data": ("corpus.json",),
    "pretrain": ("model_full.lshr", "pretrain_log.jsonl"),
    "analyze": ("groups.json", "knowledge_profile.json", "knowledge_profile.csv"),
    "prune": ("model_pruned.lshr", "lhspg_log.jsonl", "groups_final.json", "prune_summary.json"),
    "compress": ("model_compact.lshr", "compression_plan.json"),
    "recover": ("model_recovered.lshr", "recovery_log.jsonl", "recovery_summary.json"),
    "eval": ("eval.json",),
    "report": ("report.md",),
}


def _stamp(cfg: PipelineConfig, stage: str) -> dict:
    return {"schema_version": 1, "stage": stage, "config_hash": cfg.config_hash(), "seed": cfg.seed}


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _require(out: Path, name: str, stage: str, cfg: PipelineConfig) -> Path:
    path = out / name
    if not path.exists():
        raise StageError(f"stage {stage}: missing prerequisite artifact {name}")
    stamp = None
    if name.endswith(".json"):
        with open(path, encoding="utf-8") as f:
            stamp = json.load(f)
    elif name.endswith(".lshr"):
        stamp = checkpoint_extra(path)
    if stamp is not None and "config_hash" in stamp and stamp["config_hash"] != cfg.config_hash():
        raise StageError(
            f"stage {stage}: artifact {name} was produced under a different configuration"
        )
    return path


def _model_config(cfg: PipelineConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        vocab_size=m.vocab_size,
        dim=m.dim,
        n_layers=m.n_layers,
        n_heads=m.n_heads,
        mlp_dim=m.mlp_dim,
        lora_rank=m.lora_rank,
        lora_gamma=m.lora_gamma,
        block_size=m.block_size,
        seed=cfg.seed,
    )


def _analysis_structures(model):
    graph = build_trace_graph(model)
    spans = mark_composed_spans(graph)
    node_groups = discover_node_groups(graph, spans)
    group_set = partition_variables(node_groups, model)
    return graph, spans, node_groups, group_set


def _apply_statuses(group_set: GroupSet, groups_artifact: Path) -> None:
    with open(groups_artifact, encoding="utf-8") as f:
        payload = json.load(f)
    statuses = {g["id"]: g["status"] for g in payload["group_set"]["groups"]}
    if set(statuses) != set(group_set.by_id):
        raise StageError("groups artifact does not match the model's structure groups")
    for gid, status in statuses.items():
        group_set.set_status(gid, status)


# ---- stages ---------------------------------------------------------------------


def stage_gen_data(cfg: PipelineConfig, out: Path) -> None:
    rng = stage_rng(cfg.seed, "gen-data")
    corpora = {
        "pretraining": generate_corpus(
            "pretraining",
            tuple(cfg.data.pretraining_sources),
            cfg.data.train_sequences_per_source,
            cfg.data.val_sequences_per_source,
            cfg.data.seq_len,
            cfg.model.vocab_size,
            rng,
        ),
        "instruct": generate_corpus(
            "instruct",
            tuple(cfg.data.instruct_sources),
            cfg.data.train_sequences_per_source,
            cfg.data.val_sequences_per_source,
            cfg.data.seq_len,
            cfg.model.vocab_size,
            rng,
        ),
    }
    save_corpora(corpora, cfg.data.seq_len, out / "corpus.json", _stamp(cfg, "gen-data"))


def stage_pretrain(cfg: PipelineConfig, out: Path) -> None:
    corpora, _ = load_corpora(_require(out, "corpus.json", "pretrain", cfg))
    corpus = corpora["pretraining"]
    model = build_model(_model_config(cfg))
    model.set_trainable("all")
    params = [t for t in model.parameters().values()]
    opt = make_optimizer(cfg.pretrain.optimizer, params, cfg.pretrain.learning_rate)
    rng = stage_rng(cfg.seed, "pretrain")
    with open(out / "pretrain_log.jsonl", "w", encoding="utf-8") as log:
        for step in range(cfg.pretrain.steps):
            batch = corpus.sample_batch(rng, cfg.pretrain.batch_size)
            opt.zero_grad()
            with Tape() as tape:
                loss = next_token_loss(model, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"pretrain: divergent loss at step {step}")
            tape.backward(loss)
            opt.step()
            log.write(json.dumps({"step": step, "loss": value}, sort_keys=True) + "\n")
    model.set_trainable("none")
    save_checkpoint(model, out / "model_full.lshr", extra=_stamp(cfg, "pretrain"))


def stage_analyze(cfg: PipelineConfig, out: Path) -> None:
    model = load_checkpoint(_require(out, "model_full.lshr", "analyze", cfg))
    corpora, _ = load_corpora(_require(out, "corpus.json", "analyze", cfg))
    eval_seqs = corpora["pretraining"].val_pool()[: cfg.analysis.eval_sequences]
    _, _, node_groups, group_set = _analysis_structures(model)
    profile = knowledge.analyze(
        model,
        group_set,
        node_groups,
        tuple(cfg.analysis.ratios),
        eval_seqs,
        cfg.analysis.unprunable_fraction,
        saliency=cfg.analysis.saliency,
    )
    knowledge.save_profile(
        profile, out / "knowledge_profile.json", out / "knowledge_profile.csv", _stamp(cfg, "analyze")
    )
    dump_groups(node_groups, group_set, out / "groups.json")


def derive_target_zero_groups(cfg: PipelineConfig, group_set: GroupSet) -> int:
    return int(round(cfg.lhspg.pruning_ratio * len(group_set.prunable_ids())))


def stage_prune(cfg: PipelineConfig, out: Path) -> None:
    model = load_checkpoint(_require(out, "model_full.lshr", "prune", cfg))
    corpora, _ = load_corpora(_require(out, "corpus.json", "prune", cfg))
    groups_artifact = _require(out, "groups.json", "prune", cfg)
    corpus = corpora["pretraining"]
    heldout = corpus.val_pool()
    _, _, node_groups, group_set = _analysis_structures(model)
    _apply_statuses(group_set, groups_artifact)

    prunable_before = group_set.prunable_ids()
    n_prunable = len(prunable_before)
    target = derive_target_zero_groups(cfg, group_set)
    lh = cfg.lhspg
    lhspg_config = LhspgConfig(
        learning_rate=lh.learning_rate,
        warmup_steps=lh.warmup_steps,
        periods=lh.periods,
        steps_per_period=lh.steps_per_period,
        target_zero_groups=target,
        halfspace_eps=lh.halfspace_eps,
        saliency=lh.saliency,
        optimizer=lh.optimizer,
        lr_schedule=lh.lr_schedule,
        batch_size=lh.batch_size,
        seed=cfg.seed,
    )
    warm_state: dict = {}
    result = run_lhspg(
        model,
        group_set,
        lhspg_config,
        corpus.sample_batch,
        log_path=out / "lhspg_log.jsonl",
        after_warmup=lambda m: warm_state.update(model=m.clone()),
    )
    oneshot, oneshot_ids = baseline.one_shot_prune(
        warm_state["model"], group_set, target, candidates=prunable_before, saliency=lh.saliency
    )
    summary = {
        **_stamp(cfg, "prune"),
        "target_zero_groups": target,
        "zero_groups": result.zero_groups,
        "pruning_ratio": lh.pruning_ratio,
        "prunable_groups": n_prunable,
        "redundant_groups": sorted(result.state.redundant),
        "lhspg_heldout_loss": mean_cross_entropy(model, heldout),
        "oneshot_heldout_loss": mean_cross_entropy(oneshot, heldout),
        "oneshot_groups": sorted(oneshot_ids),
    }
    _write_json(out / "prune_summary.json", summary)
    dump_groups(node_groups, group_set, out / "groups_final.json")
    save_checkpoint(model, out / "model_pruned.lshr", extra=_stamp(cfg, "prune"))


def stage_compress(cfg: PipelineConfig, out: Path) -> None:
    model = load_checkpoint(_require(out, "model_pruned.lshr", "compress", cfg))
    groups_artifact = _require(out, "groups_final.json", "compress", cfg)
    graph, _, node_groups, group_set = _analysis_structures(model)
    _apply_statuses(group_set, groups_artifact)
    plan = compress.plan_compression(group_set, node_groups, graph, model)
    compact = compress.apply_compression(model, plan)
    # structural erasure must preserve the zeroed model's function exactly
    rng = stage_rng(cfg.seed, "compress-check")
    probe = rng.integers(0, cfg.model.vocab_size, size=(4, cfg.data.seq_len))
    diff = float(np.max(np.abs(model.forward(probe).data - compact.forward(probe).data)))
    if diff >= 1e-9:
        raise NumericError(f"compression equivalence violated: max |diff| = {diff:g}")
    compress.save_plan(plan, out / "compression_plan.json", _stamp(cfg, "compress"))
    save_checkpoint(
        compact,
        out / "model_compact.lshr",
        extra={**_stamp(cfg, "compress"), "provenance": plan.to_json()["kept"]},
    )


def stage_recover(cfg: PipelineConfig, out: Path) -> None:
    compact = load_checkpoint(_require(out, "model_compact.lshr", "recover", cfg))
    full = load_checkpoint(_require(out, "model_full.lshr", "recover", cfg))
    corpora, _ = load_corpora(_require(out, "corpus.json", "recover", cfg))
    # the full model never changes; compute its reference scores once
    full_scores = {
        phase: per_source_perplexity(full, corpora[phase], split="val") for phase in corpora
    }
    r = cfg.recovery
    rec_config = RecoveryConfig(
        subset_size=r.subset_size,
        source_floor=r.source_floor,
        round_steps=r.round_steps,
        learning_rate=r.learning_rate,
        optimizer=r.optimizer,
        tol=r.tol,
        patience=r.patience,
        max_rounds=r.max_rounds,
        batch_size=r.batch_size,
        seed=cfg.seed,
    )
    summary = recovery.run_recovery(
        compact, corpora, full_scores, rec_config, log_path=out / "recovery_log.jsonl"
    )
    _write_json(
        out / "recovery_summary.json",
        {
            **_stamp(cfg, "recover"),
            "pre_ppl": summary.pre_ppl,
            "post_ppl": summary.post_ppl,
            "pre_mean_ppl": summary.pre_mean_ppl,
            "post_mean_ppl": summary.post_mean_ppl,
        },
    )
    save_checkpoint(compact, out / "model_recovered.lshr", extra=_stamp(cfg, "recover"))


def stage_eval(cfg: PipelineConfig, out: Path, models: list[str] | None = None) -> None:
    corpora, _ = load_corpora(_require(out, "corpus.json", "eval", cfg))
    if models:
        paths = [Path(m) for m in models]
        for p in paths:
            if not p.exists():
                raise StageError(f"stage eval: model checkpoint not found: {p}")
    else:
        names = ("model_full.lshr", "model_pruned.lshr", "model_compact.lshr", "model_recovered.lshr")
        paths = [out / n for n in names if (out / n).exists()]
        if not paths:
            raise StageError("stage eval: no model checkpoints found; run pretrain first")
    results = {}
    for path in paths:
        model = load_checkpoint(path)
        per_corpus = {}
        for phase, corpus in sorted(corpora.items()):
            scores = per_source_perplexity(model, corpus, split="val")
            per_corpus[phase] = {
                "per_source": scores,
                "mean_ppl": float(np.mean(list(scores.values()))),
                "val_loss": mean_cross_entropy(model, corpus.val_pool()),
            }
        results[path.name] = {"parameters": model.parameter_count(), "corpora": per_corpus}
    _write_json(out / "eval.json", {**_stamp(cfg, "eval"), "models": results})


def stage_report(cfg: PipelineConfig, out: Path) -> None:
    eval_payload = json.loads(_require(out, "eval.json", "report", cfg).read_text())
    prune_summary = json.loads(_require(out, "prune_summary.json", "report", cfg).read_text())
    profile = json.loads(_require(out, "knowledge_profile.json", "report", cfg).read_text())
    lines = ["# Pruning pipeline report", ""]
    lines += [
        f"- configuration hash: `{cfg.config_hash()}`",
        f"- seed: {cfg.seed}",
        f"- pruning ratio: {prune_summary['pruning_ratio']} "
        f"({prune_summary['target_zero_groups']} of {prune_summary['prunable_groups']} prunable groups)",
        f"- zero groups after pruning: {prune_summary['zero_groups']} "
        f"(target {prune_summary['target_zero_groups']})",
        "",
        "## Progressive pruning vs one-shot baseline (held-out loss)",
        "",
        "| Ratio | Method | Held-out loss |",
        "|---|---|---|",
        f"| {prune_summary['pruning_ratio']} | progressive half-space (this run) | "
        f"{prune_summary['lhspg_heldout_loss']:.6f} |",
        f"| {prune_summary['pruning_ratio']} | one-shot magnitude | "
        f"{prune_summary['oneshot_heldout_loss']:.6f} |",
        "",
        f"Held-out loss delta (one-shot minus progressive): "
        f"{prune_summary['oneshot_heldout_loss'] - prune_summary['lhspg_heldout_loss']:.6f}",
        "",
        "## Per-stage perplexities (validation)",
        "",
        "| Model | Parameters | Corpus | Mean ppl |",
        "|---|---|---|---|",
    ]
    for name, entry in sorted(eval_payload["models"].items()):
        for phase, stats in sorted(entry["corpora"].items()):
            lines.append(f"| {name} | {entry['parameters']} | {phase} | {stats['mean_ppl']:.4f} |")
    lines += [
        "",
        "## Knowledge distribution",
        "",
        "Per node group perplexity deviation (full table: `knowledge_profile.csv`):",
        "",
        "| Node group | Deviation | Unprunable |",
        "|---|---|---|",
    ]
    for e in sorted(profile["entries"], key=lambda e: e["rank"]):
        lines.append(f"| {e['node_group']} | {e['deviation']:.6f} | {e['unprunable']} |")
    if (out / "recovery_summary.json").exists():
        rec = json.loads((out / "recovery_summary.json").read_text())
        lines += [
            "",
            "## Recovery",
            "",
            f"- pre-recovery mean validation ppl: {rec['pre_mean_ppl']:.4f}",
            f"- post-recovery mean validation ppl: {rec['post_mean_ppl']:.4f}",
            f"- improvement: {rec['pre_mean_ppl'] - rec['post_mean_ppl']:.4f}",
        ]
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_stage(stage: str, cfg: PipelineConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.json")
    dispatch = {
        "gen-data": stage_gen_data,
        "pretrain": stage_pretrain,
        "analyze": stage_analyze,
        "prune": stage_prune,
        "compress": stage_compress,
        "recover": stage_recover,
        "eval": stage_eval,
        "report": stage_report,
    }
    if stage not in dispatch:
        raise StageError(f"unknown stage {stage!r}; stages: {', '.join(STAGES)}")
    dispatch[stage](cfg, out)


def run_all(cfg: PipelineConfig, out: Path) -> None:
    for stage in STAGES:
        run_stage(stage, cfg, out)


def dump_graph_artifact(model_path: Path, out_path: Path) -> None:
    model = load_checkpoint(model_path)
    graph = build_trace_graph(model)
    spans = mark_composed_spans(graph)
    dump_graph(graph, spans, out_path)


def dump_groups_artifact(model_path: Path, out_path: Path) -> None:
    model = load_checkpoint(model_path)
    _, _, node_groups, group_set = _analysis_structures(model)
    dump_groups(node_groups, group_set, out_path)
