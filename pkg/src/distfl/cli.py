"""Command-line entry point: ``distfl run|gradcheck|synth|sim``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradcheck, kernels, nn
from .clustering import build_sim
from .config import load_config
from .extraction import ExtractionConfig, KnowledgeSet, synthesize
from .orchestrator import FLState, build_data, run_experiment
from .report import metrics_csv, reports_to_json

log = logging.getLogger("distfl")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shards, _, _ = build_data(cfg)
    start = None
    if args.resume:
        start = FLState.from_dict(json.loads(Path(args.resume).read_text()))
    final = {}

    def on_round(state, art, report):
        r = report.round
        if art.sim is not None:
            (out / f"sim_round_{r}.csv").write_text(art.sim.to_csv())
        (out / f"clusters_round_{r}.json").write_text(art.assignment.to_json())
        if args.save_states:
            (out / f"state_round_{r}.json").write_text(json.dumps(state.to_dict()))
        final["state"] = state
        log.info(
            "round %d: clusters=%d acc=%.4f recovery=%.3f%s",
            r, len(report.clusters), report.headline_accuracy, report.cluster_recovery,
            "" if report.asr is None else f" asr={report.asr:.4f}",
        )

    reports = run_experiment(cfg, on_round=on_round, start=start)
    (out / "report.json").write_text(reports_to_json(reports))
    (out / "timings.json").write_text(json.dumps([r.timings for r in reports], indent=1))
    (out / "metrics.csv").write_text(metrics_csv(reports, shards))
    state = final.get("state")
    if state is not None:
        (out / "state.json").write_text(json.dumps(state.to_dict()))
        for k, model in enumerate(state.cluster_models):
            nn.save_model(model, out / f"model_cluster_{k}.json")
    print(f"wrote {len(reports)} round reports to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed, args.models)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(
            f"{status} seed={r.seed} params={r.param_error:.2e} input={r.input_error:.2e} "
            f"bn_match={r.bn_match_error:.2e}"
        )
    print(f"{'all checks passed' if ok else 'gradient check FAILED'} (tolerance {gradcheck.TOLERANCE:g}, backend {kernels.BACKEND})")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    model = nn.load_model(args.model)
    cfg = ExtractionConfig(z=args.z, extract_ratio=args.ratio, synth_steps=args.steps, synth_lr=args.lr, seed=args.seed)
    k = synthesize(model, cfg)
    k.save(args.out)
    print(f"initial loss {k.initial_loss:.6g} -> final loss {k.final_loss:.6g}; wrote {args.out}")
    return 0


def cmd_sim(args) -> int:
    models = [nn.load_model(p) for p in args.models]
    k = KnowledgeSet.load(args.knowledge)
    sim = build_sim(models, k, symmetrize=not args.raw)
    sys.stdout.write(sim.to_csv(raw=args.raw))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distfl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a full experiment from a TOML config")
    run.add_argument("config")
    run.add_argument("--out", default="out")
    run.add_argument("--resume", help="continue from a saved state.json")
    run.add_argument("--save-states", action="store_true", help="also write state_round_<r>.json")
    run.set_defaults(func=cmd_run)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--models", type=int, default=10)
    gc.set_defaults(func=cmd_gradcheck)

    sy = sub.add_parser("synth", help="extract distribution knowledge from one model")
    sy.add_argument("model")
    sy.add_argument("--z", type=int, default=200)
    sy.add_argument("--ratio", type=float, default=50.0)
    sy.add_argument("--steps", type=int, default=500)
    sy.add_argument("--lr", type=float, default=ExtractionConfig.synth_lr)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", default="knowledge.json")
    sy.set_defaults(func=cmd_synth)

    sm = sub.add_parser("sim", help="similarity matrix of models on a knowledge set (CSV to stdout)")
    sm.add_argument("models", nargs="+")
    sm.add_argument("--knowledge", required=True)
    sm.add_argument("--raw", action="store_true", help="one-directional KL instead of the symmetrised matrix")
    sm.set_defaults(func=cmd_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
