"""Command-line entry point.

Exit codes: 0 success, 1 acceptance failure, 2 invalid config, 3 divergence
or aborted session.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import acceptance, config
from ._rng import stream
from .errors import DivergenceError, SessionAborted
from .experiments import (
    ChunkSettings, planar_embodiment, reach_session, reach_train_config, tracking_session, train_reach_pair, uac_pairs,
)
from .experts import MoFStack, active_groups, active_param_count, mof_train_step, save_stack, total_param_count
from .flow_policy import TrainConfig, save_field
from .mpg import save_params
from .runtime import SessionConfig, latency_percentiles, session_summary
from .sim import continuity_metrics
from .toys import GatedReach, bimodal_report, default_reach_mpg, mpg_ablation, train_bimodal, train_reach

log = logging.getLogger("chunkflow")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


# ---------------------------------------------------------------- artifacts

class Artifacts:
    """Output directory whose files all carry the config hash and seed."""

    def __init__(self, root: Path, cfg: config.ExperimentConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.stamp = {"config_hash": cfg.hash, "seed": cfg.seed}

    def path(self, name: str) -> Path:
        return self.root / name

    def json(self, name: str, obj: dict) -> Path:
        p = self.path(name)
        p.write_text(json.dumps({**self.stamp, **obj}, indent=2, sort_keys=True) + "\n")
        return p

    def csv(self, name: str, rows: list[dict], columns: list[str] | None = None) -> Path:
        p = self.path(name)
        columns = columns or (list(rows[0]) if rows else [])
        with open(p, "w", newline="") as f:
            f.write(f"# config_hash={self.stamp['config_hash']}\n# seed={self.stamp['seed']}\n")
            w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow({k: _cell(r.get(k)) for k in columns})
        return p


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def read_csv(path) -> list[dict]:
    """Read an artifact CSV, skipping the ``#`` header lines."""
    with open(path, newline="") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


# -------------------------------------------------------------- subcommands

def _session_config(cfg: config.ExperimentConfig, emb, duration: int | None = None, seed: int | None = None,
                    uac: bool | None = None) -> SessionConfig:
    rt, u = cfg.section("runtime"), cfg.section("uac")
    return SessionConfig(
        duration=cfg.raw["duration"] if duration is None else duration,
        latency=cfg.latency(emb),
        seed=cfg.seed if seed is None else seed,
        uac=u.get("enabled", True) if uac is None else uac,
        d=u.get("d"),
        safety=u.get("safety", 1),
        capacity=rt.get("capacity"),
        fallback=rt.get("fallback", "hold_last"),
        starvation_limit=rt.get("starvation_limit", 200),
        clock=rt.get("clock", "sim"),
    )


def _train_config(cfg: config.ExperimentConfig) -> TrainConfig:
    t = cfg.section("train")
    return TrainConfig(lr=t["lr"], steps=t["steps"], batch=t["batch"], seed=cfg.seed, hidden=tuple(t["hidden"]))


def _reach_config(cfg: config.ExperimentConfig) -> TrainConfig:
    m, t = cfg.section("mpg"), cfg.section("train")
    return reach_train_config({"lr": t["lr"], "steps": m["train_steps"], "batch": m["train_batch"],
                               "hidden": t["hidden"]}, cfg.seed)


def _mpg_kw(cfg: config.ExperimentConfig) -> dict:
    m = cfg.section("mpg")
    return {"lam": m["lam"], "tau": m["tau"], "n_slices": m["n_slices"], "d_emb": m["d_emb"]}


def cmd_train_toy(cfg, art: Artifacts, args) -> int:
    stamp = art.stamp
    if args.toy == "bimodal":
        net = train_bimodal(_train_config(cfg))
        t = cfg.section("train")
        rep = bimodal_report(net, n=t["n_eval"], K=t["K_eval"], seed=cfg.seed)
        save_field(art.path("bimodal_field.bin"), net, cfg.seed, {"config_hash": stamp["config_hash"]})
        art.csv("bimodal_loss.csv", [{"step": i, "loss": v} for i, v in enumerate(net.loss_curve)])
        art.json("bimodal_metrics.json", {"within_0.3": rep["within"], "mode_freq": rep["mode_freq"]})
        print(f"within 0.3 of a mode: {rep['within']:.3f}  mode frequency: {rep['mode_freq']:.3f}")
    elif args.toy == "reach":
        task = GatedReach(seed=cfg.seed)
        tc = _reach_config(cfg)
        params = default_reach_mpg(task, cfg.seed, **_mpg_kw(cfg)) if cfg.raw["mpg"]["enabled"] else None
        net, params = train_reach(task, tc, params)
        extra = {"config_hash": stamp["config_hash"], "mpg": params is not None}
        save_field(art.path("reach_field.bin"), net, cfg.seed, extra)
        if params is not None:
            save_params(art.path("reach_mpg.bin"), params, cfg.seed, {"config_hash": stamp["config_hash"]})
        art.csv("reach_loss.csv", [{"step": i, "loss": v} for i, v in enumerate(net.loss_curve)])
        print(f"final loss {net.loss_curve[-1]:.4f} (mpg={'on' if params is not None else 'off'})")
    else:  # mof
        m, t = cfg.section("mof"), cfg.section("train")
        ids = cfg.embodiment_ids
        stack = MoFStack(8, 4, len(ids), hidden=m["hidden"], foundation_depth=m["foundation_depth"],
                         n_experts=m["n_experts"], top_k=m["top_k"], seed=cfg.seed)
        rng = stream(cfg.seed, "train-mof")
        maps = {e: rng.standard_normal((4, 8)) / np.sqrt(8) for e in ids}
        rows = []
        for step in range(min(t["steps"], 5000)):
            e = ids[step % len(ids)]
            x = rng.standard_normal(8)
            onehot = np.eye(len(ids))[ids.index(e)]
            rows.append({"step": step, "embodiment": e, "loss": mof_train_step(stack, x, onehot, maps[e] @ x, t["lr"])})
        save_stack(art.path("mof_stack.bin"), stack, cfg.seed)
        art.csv("mof_loss.csv", rows)
        counts = {e: active_param_count(stack, None, active_groups(cfg.fleet[e], cfg.layout)) for e in ids}
        art.json("mof_params.json", {"active": counts, "total": total_param_count(stack)})
        print(f"active {counts} of {total_param_count(stack)} parameters")
    return EXIT_OK


def _gated_reach_session(cfg, sc: SessionConfig):
    task = GatedReach(seed=cfg.seed)
    tc = _reach_config(cfg)
    params = default_reach_mpg(task, cfg.seed, **_mpg_kw(cfg))
    net, params = train_reach(task, tc, params)
    m = cfg.section("mpg")
    n_ref = m["n_ref"] if m["enabled"] else 0
    ch = ChunkSettings.from_json(cfg.section("chunk"))
    emb = planar_embodiment(cfg.layout)
    session, goal = reach_session(cfg.layout, task, net, params, sc, K=ch.K, n_ref=n_ref,
                                  suffix_noise=cfg.section("policy").get("suffix_noise", 0.0), emb=emb)
    final = np.asarray(session.steps[-1].action)[list(emb.active_slots)] if session.steps else goal
    return [(emb.id, session, {"goal_error": float(np.linalg.norm(final - goal)), "n_ref": n_ref})]


def cmd_session(cfg, art: Artifacts, args) -> int:
    kind = cfg.section("policy").get("kind", "tracking")
    runs = []
    if kind == "gated_reach":
        emb = planar_embodiment(cfg.layout)
        runs = _gated_reach_session(cfg, _session_config(cfg, emb))
    else:
        task = cfg.section("task")
        ch = ChunkSettings.from_json(cfg.section("chunk"))
        for emb_id in args.embodiment or cfg.embodiment_ids:
            emb = cfg.fleet[emb_id]
            run = tracking_session(cfg.layout, emb, _session_config(cfg, emb), task=task["name"], chunk=ch,
                                   period=task["period"], amplitude=task["amplitude"])
            runs.append((emb_id, run.log, {}))
    rows = []
    for emb_id, session, extra in runs:
        header = {**art.stamp, "embodiment": emb_id, **session.meta}
        session.write_jsonl(art.path(f"session_{emb_id}.jsonl"), art.path(f"cycles_{emb_id}.jsonl"), header=header)
        summary = session_summary(session)
        if session.steps:
            summary.update(continuity_metrics(session))
        rows.append({**summary, **extra, "d": session.meta.get("d")})
        print(f"{emb_id}: steps={summary['steps']} underflow_rate={summary['underflow_rate']:.4f} "
              f"violations={summary['violations']}")
    art.csv("session_metrics.csv", rows)
    return EXIT_OK


def cmd_bench(cfg, art: Artifacts, args) -> int:
    rows = []
    print(f"{'embodiment':<20} {'p50_ms':>8} {'p95_ms':>8} {'p99_ms':>8} {'underflow':>10}")
    task = cfg.section("task")
    ch = ChunkSettings.from_json(cfg.section("chunk"))
    for emb_id in args.embodiment or cfg.embodiment_ids:
        emb = cfg.fleet[emb_id]
        sc = _session_config(cfg, emb)
        run = tracking_session(cfg.layout, emb, sc, task=task["name"], chunk=ch, period=task["period"],
                               amplitude=task["amplitude"])
        lat = latency_percentiles([c.latency for c in run.log.cycles])
        infer = latency_percentiles([c.infer_time for c in run.log.cycles])
        rate = float(run.log.underflows().mean()) if run.log.steps else 0.0
        rows.append({"embodiment": emb_id, "clock": sc.clock, **{f"latency_{k}": v for k, v in lat.items()},
                     **{f"infer_{k}": v for k, v in infer.items()}, "underflow_rate": rate})
        print(f"{emb_id:<20} {1e3 * lat['p50']:8.2f} {1e3 * lat['p95']:8.2f} {1e3 * lat['p99']:8.2f} {rate:10.4f}")
    art.csv("bench.csv", rows)
    return EXIT_OK


def cmd_verify(cfg, art: Artifacts, args) -> int:
    ids = [int(x) for x in args.criteria.split(",")] if args.criteria else None
    results = acceptance.run(ids, seed=args.verify_seed, echo=print)
    passed = all(r.passed for r in results)
    art.json("acceptance_report.json", {"passed": passed, "criteria": [r.to_json() for r in results]})
    print(f"{sum(r.passed for r in results)}/{len(results)} criteria passed")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_ablate_uac(cfg, art: Artifacts, args) -> int:
    ab = cfg.section("ablation")
    emb = cfg.fleet[ab["embodiment"]]
    task = cfg.section("task")
    rt = cfg.section("runtime")
    rows = uac_pairs(cfg.layout, emb, cfg.latency(emb), n_pairs=ab["pairs"], duration=ab["duration"], seed=cfg.seed,
                     task=task["name"], chunk=ChunkSettings.from_json(cfg.section("chunk")),
                     fallback=rt["fallback"], starvation_limit=rt["starvation_limit"], capacity=rt["capacity"])
    for r in rows:
        r["uac_not_worse"] = r["max_step_jump_uac"] <= r["max_step_jump_no_uac"]
    art.csv("ablate_uac.csv", rows)
    rate = float(np.mean([r["uac_not_worse"] for r in rows]))
    art.json("ablate_uac_summary.json", {"pairs": len(rows), "uac_not_worse_rate": rate})
    print(f"max_step_jump(UAC) <= max_step_jump(no UAC) in {rate:.0%} of {len(rows)} pairs")
    return EXIT_OK


def cmd_ablate_mpg(cfg, art: Artifacts, args) -> int:
    ab, m = cfg.section("ablation"), cfg.section("mpg")
    task = GatedReach(seed=cfg.seed)
    gated, plain = train_reach_pair(task, _reach_config(cfg), _mpg_kw(cfg))
    rows = mpg_ablation(task, gated, plain, n_pairs=ab["pairs"], sigma=m["suffix_noise"],
                        K=cfg.raw["chunk"]["K"], n_ref=m["n_ref"], seed=cfg.seed)
    for r in rows:
        r["mpg_not_worse"] = r["err_mpg"] <= r["err_no_mpg"]
    art.csv("ablate_mpg.csv", rows)
    rate = float(np.mean([r["mpg_not_worse"] for r in rows]))
    art.json("ablate_mpg_summary.json", {"pairs": len(rows), "mpg_not_worse_rate": rate})
    print(f"error(MPG, N_ref={m['n_ref']}) <= error(no MPG) in {rate:.0%} of {len(rows)} pairs")
    return EXIT_OK


COMMANDS = {
    "train-toy": cmd_train_toy,
    "session": cmd_session,
    "bench": cmd_bench,
    "verify": cmd_verify,
    "ablate-mpg": cmd_ablate_mpg,
    "ablate-uac": cmd_ablate_uac,
}


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment JSON (default: packaged config)")
    common.add_argument("--seed", type=int, help="root seed (u64), overrides the config")
    common.add_argument("--out", type=Path, help="output directory (default: config output.dir)")
    common.add_argument("--clock", choices=("sim", "wall"), help="runtime clock")
    common.add_argument("--no-mpg", action="store_true", help="disable gated refinement")
    common.add_argument("--no-uac", action="store_true", help="disable prefix commitment")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="chunkflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train-toy", parents=[common], help="fit a toy velocity field")
    t.add_argument("--toy", choices=("bimodal", "reach", "mof"), default="bimodal")
    for name in ("session", "bench"):
        s = sub.add_parser(name, parents=[common], help=f"{name} over the configured fleet")
        s.add_argument("--embodiment", action="append", help="restrict to this embodiment id (repeatable)")
    v = sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    v.add_argument("--criteria", help="comma-separated criterion ids (default: all)")
    v.add_argument("--verify-seed", type=int, default=0, help="seed for the acceptance checks")
    sub.add_parser("ablate-mpg", parents=[common], help="paired runs with and without MPG")
    sub.add_parser("ablate-uac", parents=[common], help="paired runs with and without UAC")
    return p


def overrides(args) -> dict:
    out: dict = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.clock:
        out["runtime"] = {"clock": args.clock}
    if args.no_mpg:
        out["mpg"] = {"enabled": False}
    if args.no_uac:
        out["uac"] = {"enabled": False}
    if args.out is not None:
        out["output"] = {"dir": str(args.out)}
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config.load(args.config, overrides(args))
    except config.ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    art = Artifacts(Path(cfg.raw["output"]["dir"]), cfg)
    try:
        return COMMANDS[args.command](cfg, art, args)
    except DivergenceError as exc:
        print(f"diverged: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_ABORT
    except SessionAborted as exc:
        print(f"session aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
