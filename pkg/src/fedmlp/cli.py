"""Command-line runner: ``run``, ``sweep``, ``check-grad`` and ``dump-embeddings``.

Every config key is also a flag (``--lr 0.05``, ``--loss.semantic false``); flags override the
``--config`` file. Relative output directories are placed under ``$FEDMLP_OUTPUT_ROOT`` when it
is set. Exit codes: 0 ok, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import FIELD_TO_KEY, ConfigError, ExperimentConfig, dump_config, parse_config
from .federation import simulate
from .metrics import ACCURACY_FIELDS, embeddings_to_csv, records_to_csv, records_to_jsonl
from .model import check_gradients
from .prototypes import snapshot_json

OUTPUT_ROOT_ENV = "FEDMLP_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
INCOMPLETE = ".incomplete"

log = logging.getLogger("fedmlp")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    group = p.add_argument_group("config keys")
    for name, key in FIELD_TO_KEY.items():
        default = getattr(ExperimentConfig, name)
        group.add_argument(f"--{key}", dest=f"cfg__{name}", default=argparse.SUPPRESS, metavar="V",
                           help=f"default: {default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmlp", description="Federated prototype learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write its metrics")
    _add_config_flags(run)

    sweep = sub.add_parser("sweep", help="run one experiment per seed and summarise mean/std")
    sweep.add_argument("--seeds", required=True, help="comma-separated seeds, e.g. 1,2,3")
    _add_config_flags(sweep)

    grad = sub.add_parser("check-grad", help="finite-difference check of the analytic gradients")
    grad.add_argument("--instances", type=int, default=20)
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--tolerance", type=float, default=1e-4)

    emb = sub.add_parser("dump-embeddings", help="train, then write global-model features of the test set")
    emb.add_argument("--out", help="CSV path (default: <output_dir>/embeddings.csv)")
    _add_config_flags(emb)
    return parser


def _overrides(ns: argparse.Namespace) -> Dict[str, str]:
    return {FIELD_TO_KEY[k[5:]]: v for k, v in vars(ns).items() if k.startswith("cfg__")}


def resolve_output_dir(output_dir: str) -> Path:
    path = Path(output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def write_run(cfg: ExperimentConfig, out_dir: Path, progress=None):
    """Run ``cfg`` and write its artefacts into ``out_dir``; the marker file stays on failure."""
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / INCOMPLETE
    marker.write_text("run did not finish\n")
    (out_dir / "config.txt").write_text(dump_config(cfg))
    sim, mlog = simulate(cfg, progress)
    (out_dir / "metrics.csv").write_text(records_to_csv(mlog.records))
    (out_dir / "metrics.jsonl").write_text(records_to_jsonl(mlog.records))
    summary = {"final": mlog.final, "forgetting": {str(k): v for k, v in sorted(mlog.forgetting.items())},
               "meta": mlog.meta}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out_dir / "prototypes.json").write_text(
        snapshot_json(sim.server.global_protos.protos, round=cfg.total_rounds - 1) + "\n")
    marker.unlink()
    return sim, mlog


def _mean_std(values: Sequence[Optional[float]]):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    return mean, math.sqrt(var)


def sweep_summary(results: Dict[int, object]) -> dict:
    """Mean and population std over seeds of every final metric and of the mean forgetting delta."""
    logs = [results[s] for s in sorted(results)]
    out = {"seeds": sorted(results), "metrics": {}}
    for name in ACCURACY_FIELDS:
        mean, std = _mean_std([lg.final.get(name) for lg in logs])
        out["metrics"][name] = {"mean": mean, "std": std}
    forget = [math.fsum(lg.forgetting.values()) / len(lg.forgetting) if lg.forgetting else None for lg in logs]
    mean, std = _mean_std(forget)
    out["metrics"]["forgetting_delta"] = {"mean": mean, "std": std}
    return out


def _progress(verbose: bool):
    if not verbose:
        return None

    def report(rec):
        log.info("round %d stage %d A_glo=%s A_sel=%s", rec.round, rec.stage, rec.A_glo, rec.A_sel)
    return report


def _cmd_run(ns) -> int:
    cfg = parse_config(ns.config, _overrides(ns))
    out_dir = resolve_output_dir(cfg.output_dir)
    _, mlog = write_run(cfg, out_dir, _progress(ns.verbose))
    print(f"wrote {out_dir}  A_glo={mlog.final.get('A_glo')}")
    return EXIT_OK


def _parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError([f"seeds: expected comma-separated integers, got {text!r}"])
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError(["seeds: need at least one seed and no duplicates"])
    return seeds


def _cmd_sweep(ns) -> int:
    seeds = _parse_seeds(ns.seeds)
    base = parse_config(ns.config, _overrides(ns))
    root = resolve_output_dir(base.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    marker = root / INCOMPLETE
    marker.write_text("sweep did not finish\n")
    results = {}
    for seed in seeds:
        cfg = base.with_overrides(seed=seed, output_dir=str(Path(base.output_dir) / f"seed_{seed}"))
        results[seed] = write_run(cfg, root / f"seed_{seed}", _progress(ns.verbose))[1]
        print(f"seed {seed}: A_glo={results[seed].final.get('A_glo')}")
    summary = sweep_summary(results)
    (root / "sweep_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    marker.unlink()
    for name, ms in summary["metrics"].items():
        if ms["mean"] is not None:
            print(f"{name:18s} {ms['mean']:.4f} +- {ms['std']:.4f}")
    return EXIT_OK


def _cmd_check_grad(ns) -> int:
    worst = max(err for _, _, err in check_gradients(num_instances=ns.instances, seed=ns.seed))
    ok = worst < ns.tolerance
    print(f"max relative error {worst:.3e} over {ns.instances} instances x 8 loss combinations: "
          f"{'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def _cmd_dump_embeddings(ns) -> int:
    cfg = parse_config(ns.config, _overrides(ns))
    sim, _ = simulate(cfg, _progress(ns.verbose))
    path = Path(ns.out) if ns.out else resolve_output_dir(cfg.output_dir) / "embeddings.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(embeddings_to_csv(sim.server.global_model(cfg.aggregation_scope), sim.balanced))
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "check-grad": _cmd_check_grad,
            "dump-embeddings": _cmd_dump_embeddings}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[ns.command](ns)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # reported, never swallowed silently
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
