"""Command-line entry points.

Every command writes under ``--out DIR`` and finishes by writing
``manifest.json`` (paths, sizes and sha256 of all artifacts).  Configuration
comes from an optional ``--config FILE`` of ``key = value`` lines; any
``--key value`` pair on the command line overrides it.  Keys may name a
:class:`~mela.sac.TrainConfig` field or a :class:`~mela.env.TaskParams`
field; anything else is rejected.

Exit codes: 0 success, 2 usage/config/contract error, 3 numeric divergence,
4 checkpoint load failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import analysis
from . import env as E
from . import io
from .errors import CheckpointError, ConfigError, ContractError, NumericError
from .sac import ARCHS, TrainConfig
from .training import agent_from_actor, evaluate, run_stage1, run_stage2, validate_actor

EVAL_CUTOFF_HZ = 3.0  # conservative deployment filter
SWEEP_SIZES = (2, 4, 8, 12)


# -- configuration -----------------------------------------------------------

def split_overrides(extra: list[str]) -> dict[str, str]:
    """``['--lr', '1e-3', '--episodes=5']`` -> {'lr': '1e-3', 'episodes': '5'}."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"option {tok} needs a value")
            val = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out


def resolve_config(config_file: str | None, overrides: dict[str, str],
                   task_defaults: dict | None = None) -> tuple[TrainConfig, E.TaskParams]:
    values = {}
    if config_file:
        try:
            values.update(io.parse_kv(Path(config_file).read_text(encoding="utf-8")))
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from None
    values.update(overrides)
    # snapshots carry informational run.* keys; they are not tunables
    values = {k: v for k, v in values.items() if not k.startswith("run.")}
    train_keys = set(TrainConfig.field_names())
    task_keys = {f.name for f in dataclasses.fields(E.TaskParams)}
    unknown = sorted(set(values) - train_keys - task_keys)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = io.build_dataclass(TrainConfig, {k: v for k, v in values.items() if k in train_keys})
    task_values = dict(task_defaults or {})
    task_values.update({k: v for k, v in values.items() if k in task_keys})
    try:
        tp = io.build_dataclass(E.TaskParams, task_values)
        tp.substeps  # validates the rate ratio
    except ContractError as e:
        raise ConfigError(str(e)) from None
    return cfg, tp


def snapshot(cfg: TrainConfig, tp: E.TaskParams, run: dict) -> dict:
    return {**{f"run.{k}": v for k, v in run.items()}, **dataclasses.asdict(cfg),
            **dataclasses.asdict(tp)}


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"output directory {out} is not writable: {e}") from None
    return out


def _load_actor(path, arch: str | None = None):
    ckpt = io.load_checkpoint(path)
    arch = arch or ckpt.arch
    validate_actor(arch, ckpt.actor)
    return ckpt, arch


# -- commands ----------------------------------------------------------------

def cmd_train(args, overrides) -> int:
    cfg, tp = resolve_config(args.config, overrides)
    out = _out_dir(args.out)
    run = {"command": "train", "stage": args.stage, "seed": args.seed}
    if args.stage == 1:
        if args.task not in E.STAGE1_MASK:
            raise ConfigError("stage 1 needs --task recovery or --task rhythmic")
        run.update(task=args.task, arch="single")
    else:
        if not (args.expert_a and args.expert_b):
            raise ConfigError("stage 2 needs --expert-a and --expert-b stage-1 checkpoints")
        run.update(task="multimodal", arch=args.arch, expert_a=str(args.expert_a),
                   expert_b=str(args.expert_b))
    snap = snapshot(cfg, tp, run)
    io.atomic_write_text(out / "config.txt", io.config_text(snap))
    metrics_path = out / "metrics.jsonl"
    rows = []

    def log(row):
        rows.append(row)
        io.write_jsonl(metrics_path, rows)

    try:
        if args.stage == 1:
            res = run_stage1(args.task, cfg, args.seed, tp, callback=log)
        else:
            a = io.load_checkpoint(args.expert_a)
            b = io.load_checkpoint(args.expert_b)
            res = run_stage2(a.actor, b.actor, cfg, args.seed, args.arch, tp, callback=log)
    finally:
        io.write_jsonl(metrics_path, rows)
        write_manifest_quietly(out)
    io.write_jsonl(out / "evals.jsonl", res.evals)
    meta = {"stage": args.stage, "task": run["task"], "seed": args.seed}
    io.save_checkpoint(out / "checkpoint.npz", res.checkpoint(cfg, meta, best=True))
    io.save_checkpoint(out / "last.npz", res.checkpoint(cfg, meta, best=False))
    io.write_manifest(out)
    print(f"trained {run['arch']} on {run['task']}: {len(rows)} episodes, best eval "
          f"{res.best_eval if res.best_eval is None else round(res.best_eval, 3)}")
    return 0


def write_manifest_quietly(out: Path):
    try:
        io.write_manifest(out)
    except OSError:
        pass


def trajectory_header(task: str, n_alpha: int) -> list[str]:
    terms = [t.name for t in E.task_reward_spec(task).terms]
    return (["t", "q1", "q2", "qd1", "qd2", "tau1", "tau2", "a1", "a2", "reward"]
            + [f"r_{n}" for n in terms] + [f"alpha_{i}" for i in range(n_alpha)] + ["mode"])


def cmd_eval(args, overrides) -> int:
    cfg, tp = resolve_config(args.config, overrides,
                             task_defaults={"filter_cutoff_hz": EVAL_CUTOFF_HZ})
    out = _out_dir(args.out)
    ckpt, arch = _load_actor(args.checkpoint, args.arch)
    task = args.task or ckpt.meta.get("task") or "multimodal"
    if task not in E.TASKS:
        raise ConfigError(f"unknown task {task!r}")
    mask = E.STAGE1_MASK.get(ckpt.meta.get("task")) if arch == "single" else None
    agent = agent_from_actor(arch, ckpt.actor, cfg, np.random.default_rng(0), mask=mask)
    ev = evaluate(agent, task, args.episodes, args.seed, tp, record=True)
    per = []
    alpha_rows = []
    for i, e in enumerate(ev["per_episode"]):
        per.append({"episode": i, "return": e.ret, "steps": e.steps, "success": e.success,
                    "success_step": e.success_step, "mode_transitions": e.mode_transitions,
                    "smoothing": e.smoothing, "reason": e.reason})
        n_alpha = len(e.alpha[0]) if e.alpha else 0
        header = trajectory_header(task, n_alpha)
        io.write_csv(out / f"trajectory_{i:03d}.csv", header,
                     [[row.get(h, "") for h in header] for row in e.rows])
        for k, (al, m, row) in enumerate(zip(e.alpha, e.modes, e.rows)):
            alpha_rows.append({"episode": i, "step": k, "mode": m, "alpha": al,
                               "action": [row["a1"], row["a2"]]})
    summary = {"checkpoint": str(args.checkpoint), "arch": arch, "task": task,
               "episodes": ev["episodes"], "seed": args.seed,
               "filter_cutoff_hz": tp.filter_cutoff_hz, "mean_return": ev["mean_return"],
               "success_rate": ev["success_rate"], "smoothing": ev["smoothing"],
               "per_episode": per}
    io.atomic_write_text(out / "summary.json", io.dumps(summary) + "\n")
    if arch != "single":
        io.write_jsonl(out / "alpha_log.jsonl", alpha_rows)
    io.write_manifest(out)
    print(f"evaluated {ev['episodes']} episodes: mean return {ev['mean_return']}, "
          f"success rate {ev['success_rate']}")
    return 0


def _read_alpha_log(path):
    try:
        rows = io.read_jsonl(path)
    except OSError as e:
        raise ConfigError(f"cannot read log {path}: {e}") from None
    return rows


def cmd_activation_matrix(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"unknown options: {', '.join(overrides)}")
    out = _out_dir(args.out)
    rows = _read_alpha_log(args.log)
    if any("mode" not in r for r in rows):
        raise ContractError("activation matrix needs a mode label on every logged step")
    labels, mat, counts = analysis.activation_matrix([r["mode"] for r in rows],
                                                     [r["alpha"] for r in rows])
    n = mat.shape[1]
    io.write_csv(out / "activation_matrix.csv", ["mode", "steps"] + [f"expert_{i}" for i in range(n)],
                 [[lab, c, *row] for lab, c, row in zip(labels, counts, mat)])
    io.write_csv(out / "top2.csv", ["mode", "first", "alpha_first", "second", "alpha_second"],
                 analysis.top2_table(labels, mat))
    dom = analysis.dominance(labels, mat)
    io.atomic_write_text(out / "dominance.json", io.dumps(dom) + "\n")
    io.write_manifest(out)
    for lab, row in zip(labels, mat):
        print(f"{lab:>14}: " + " ".join(f"{v:.3f}" for v in row))
    return 0


def cmd_export_embedding(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"unknown options: {', '.join(overrides)}")
    out = _out_dir(args.out)
    rows = _read_alpha_log(args.log)
    header, data = analysis.embedding_rows([r["action"] for r in rows],
                                           [r["alpha"] for r in rows], [r["mode"] for r in rows])
    io.write_csv(out / "embedding.csv", header, data)
    io.write_manifest(out)
    print(f"exported {len(data)} samples")
    return 0


def cmd_expert_sweep(args, overrides) -> int:
    cfg, tp = resolve_config(args.config, overrides)
    sizes = [int(s) for s in args.sizes.split(",")]
    bad = [n for n in sizes if n < 2]
    if bad:
        raise ConfigError(f"expert counts must be >= 2 (fusion needs at least two experts): {bad}")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = _out_dir(args.out)
    a = io.load_checkpoint(args.expert_a)
    b = io.load_checkpoint(args.expert_b)
    groups = {}
    for n in sizes:
        c = dataclasses.replace(cfg, n_experts=n)
        for seed in seeds:
            rows = []
            run_stage2(a.actor, b.actor, c, seed, args.arch, tp, callback=rows.append)
            io.write_jsonl(out / f"metrics_n{n}_seed{seed}.jsonl", rows)
            groups.setdefault(n, []).append(analysis.auc([r["return"] for r in rows]))
    table = analysis.summarize(groups)
    io.write_csv(out / "sweep.csv", ["n_experts", "auc_mean", "auc_std", "seeds"], table)
    io.write_manifest(out)
    for n, m, s, k in table:
        print(f"N={n}: AUC {m:.3f} +- {s:.3f} ({k} seeds)")
    return 0


def cmd_compare(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"unknown options: {', '.join(overrides)}")
    out = _out_dir(args.out)
    groups = {}
    for spec in args.run:
        if "=" not in spec:
            raise ConfigError(f"--run expects LABEL=METRICS.jsonl, got {spec!r}")
        label, path = spec.split("=", 1)
        try:
            rows = io.read_jsonl(path)
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e}") from None
        groups.setdefault(label, []).append(analysis.auc([r["return"] for r in rows]))
    table = analysis.summarize(groups)
    io.write_csv(out / "compare.csv", ["arch", "auc_mean", "auc_std", "seeds"], table)
    io.write_manifest(out)
    for label, m, s, k in table:
        print(f"{label}: AUC {m:.3f} +- {s:.3f} ({k} runs)")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mela", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="stage-1 expert or stage-2 fusion training")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--task", default=None)
    t.add_argument("--arch", choices=("mela", "moe"), default="mela")
    t.add_argument("--expert-a")
    t.add_argument("--expert-b")

    e = sub.add_parser("eval", help="evaluate a checkpoint; writes summary and trajectories")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--task", default=None)
    e.add_argument("--arch", choices=ARCHS, default=None)

    a = sub.add_parser("activation-matrix", help="per-mode mean gating weights from an alpha log")
    a.add_argument("--log", required=True)

    x = sub.add_parser("export-embedding", help="labeled action/alpha vectors for external t-SNE")
    x.add_argument("--log", required=True)

    s = sub.add_parser("expert-sweep", help="stage-2 learning curves over expert counts")
    s.add_argument("--expert-a", required=True)
    s.add_argument("--expert-b", required=True)
    s.add_argument("--sizes", default=",".join(map(str, SWEEP_SIZES)))
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--arch", choices=("mela", "moe"), default="mela")

    c = sub.add_parser("compare", help="AUC table over learning curves, grouped by label")
    c.add_argument("--run", action="append", required=True, metavar="LABEL=METRICS.jsonl")

    for sp in (t, e, a, x, s, c):
        sp.add_argument("--out", required=True)
    for sp in (t, e, s):
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=0)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "activation-matrix": cmd_activation_matrix,
            "export-embedding": cmd_export_embedding, "expert-sweep": cmd_expert_sweep,
            "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = split_overrides(extra)
        if getattr(args, "episodes", 0) < 0:
            raise ConfigError("--episodes must be >= 0")
        return COMMANDS[args.command](args, overrides)
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
