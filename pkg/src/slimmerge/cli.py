"""Command-line front end: synth, decompose, find-ranks, refine, compose, account, bench."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .accounting import (bits_cost, budget_ratio, comparison_table, load_geometry, ranks_from_allocation,
                         write_table)
from .bench import run_bench
from .compose import compose, ideal_route
from .config import RunConfig, budget_factor
from .decompose import decompose, load_decomposition, save_decomposition, svd_all
from .errors import ConfigError, MergeError
from .ranks import RankAllocation, optimize_ranks, scale_budget, write_trace
from .refine import init_all, load_factors, refine, save_factors
from .store import (generate_synthetic, load_checkpoint, load_set, random_base, save_checkpoint, save_set,
                    task_vectors)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _provenance(args, cfg: RunConfig, inputs: dict) -> dict:
    return {
        "command": args.command,
        "config_hash": cfg.hash(),
        "inputs": {name: _file_hash(p) for name, p in inputs.items() if p is not None},
        "version": __version__,
    }


def _load_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError("<file>", f"not valid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("<file>", "top level must be a mapping")
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "budget", None) is not None:
        data["budget"] = args.budget
    return RunConfig.from_dict(data)


def _write_json(obj, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _out_dir(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _report(**kw) -> None:
    print(json.dumps({"ok": True, **kw}, sort_keys=True))


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    cfg = _load_config(args)
    tvs = generate_synthetic(cfg.synthetic)
    prov = _provenance(args, cfg, {"config": args.config})
    _out_dir(args.out)
    save_set(tvs, args.out, prov)
    if args.base:
        _out_dir(args.base)
        base = random_base(tvs.dims, seed=cfg.seed + 7919, kinds=tvs.kinds, model_id=f"base-seed{cfg.seed}")
        save_checkpoint(base, args.base, provenance=prov)
    _report(out=args.out, base=args.base, T=tvs.T, layers=tvs.layer_names)


def cmd_decompose(args) -> None:
    cfg = _load_config(args)
    if args.set:
        tvs = load_set(args.set)
        inputs = {"set": args.set}
    else:
        if not (args.from_base and args.fine_tuned):
            raise ConfigError("set", "give --set or both --from-base and --fine-tuned")
        base = load_checkpoint(args.from_base)
        tuned = {f"task{t}": load_checkpoint(p) for t, p in enumerate(args.fine_tuned)}
        tvs = task_vectors(base, tuned)
        inputs = {"base": args.from_base, **{f"fine_tuned{t}": p for t, p in enumerate(args.fine_tuned)}}
    dec = decompose(tvs)
    svds = svd_all(dec)
    _out_dir(args.out)
    save_decomposition(dec, args.out, svds, _provenance(args, cfg, {**inputs, "config": args.config}))
    _report(out=args.out, T=dec.T, layers=dec.layer_names)


def cmd_find_ranks(args) -> None:
    cfg = _load_config(args)
    rs = cfg.rank_search
    if args.target is not None:
        from dataclasses import replace

        rs = replace(rs, R_target=args.target)
        rs.validate()
    dec, svds, _ = load_decomposition(args.decomposition)
    result = optimize_ranks(dec, svds, rs)
    factor = budget_factor(cfg.budget)
    alloc = scale_budget(result.allocation, factor) if factor != 1.0 else result.allocation
    prov = _provenance(args, cfg, {"decomposition": args.decomposition, "config": args.config})
    _out_dir(args.out)
    _write_json({"allocation": alloc.to_json(), "R_target": rs.R_target, "budget_factor": factor,
                 "iterations": result.iterations, "provenance": prov}, args.out)
    if args.trace:
        write_trace(result.trace, args.trace)
    _report(out=args.out, achieved_ratio=alloc.achieved_ratio, iterations=result.iterations)


def _read_allocation(path) -> tuple[RankAllocation, dict]:
    with open(path) as fh:
        obj = json.load(fh)
    body = obj.get("allocation", obj)
    if "ranks" not in body or "dims" not in body:
        raise ConfigError("allocation", "file needs 'ranks' and 'dims'")
    return RankAllocation.from_json(body), obj


def cmd_refine(args) -> None:
    cfg = _load_config(args)
    dec, svds, _ = load_decomposition(args.decomposition)
    alloc, _ = _read_allocation(args.allocation)
    factors = init_all(dec, alloc, svds, random_init=args.random_init, seed=cfg.refine.seed)
    result = refine(factors, dec.targets(), dec.task_ids, cfg.refine)
    prov = _provenance(args, cfg, {"decomposition": args.decomposition, "allocation": args.allocation,
                                   "config": args.config})
    meta = {"initial_loss": result.initial_loss, "final_loss": result.final_loss, "iterations": result.iterations}
    _out_dir(args.out)
    save_factors(result.factors, dec.task_ids, args.out, meta, prov)
    if args.trace:
        write_trace(result.trace, args.trace)
    _report(out=args.out, **meta)


def cmd_compose(args) -> None:
    cfg = _load_config(args)
    base = load_checkpoint(args.base)
    factors, task_ids, _ = load_factors(args.factors)
    if args.task is not None:
        weights = ideal_route(args.task, len(task_ids))
    else:
        try:
            weights = [float(x) for x in args.weights.split(",")]
        except ValueError:
            raise ConfigError("weights", "must be comma-separated numbers") from None
    prov = _provenance(args, cfg, {"base": args.base, "factors": args.factors, "config": args.config})
    merged = compose(base, factors, task_ids, weights, prov)
    _out_dir(args.out)
    save_checkpoint(merged.as_checkpoint(f"merged-{args.task if args.task is not None else 'explicit'}"),
                    args.out, kind="merged", provenance=merged.provenance)
    _report(out=args.out, weights=merged.provenance["weights"])


def cmd_account(args) -> None:
    cfg = _load_config(args)
    geo = load_geometry(args.geometry)
    alloc, _ = _read_allocation(args.allocation)
    T = len([c for c in alloc.components() if c != "shared"])
    if geo["T"] is not None and geo["T"] != T:
        raise ConfigError("T", f"geometry says T={geo['T']} but the allocation has {T} experts")
    names = {g.name for g in geo["geoms"]}
    if set(alloc.layers()) != names:
        raise ConfigError("allocation", f"layers {sorted(alloc.layers())} do not match geometry modules {sorted(names)}")
    backbone = args.backbone_params or geo["backbone_params"]
    ratio = budget_ratio(alloc, geo["geoms"], T, backbone, use=args.use)
    params = {"R": geo["router_params"], "ranks": ranks_from_allocation(alloc)}
    if geo.get("emr_alpha") is not None:
        params["alpha"] = geo["emr_alpha"]
    if geo.get("tsv_rank") is not None:
        params["r_tsv"] = geo["tsv_rank"]
    rows = comparison_table(geo["geoms"], T, params)
    _out_dir(args.out)
    write_table(rows, args.out)
    slim = bits_cost("slim", geo["geoms"], T, params)
    summary = {"budget_ratio": ratio, "backbone_params": backbone, "T": T, "use": args.use,
               "slim_bits": slim.to_dict(),
               "provenance": _provenance(args, cfg, {"allocation": args.allocation, "geometry": args.geometry,
                                                     "config": args.config})}
    _write_json(summary, str(args.out) + ".summary.json")
    _report(out=args.out, budget_ratio=ratio)


def cmd_bench(args) -> None:
    cfg = _load_config(args)
    summary = run_bench(cfg.bench, cfg.rank_search)
    summary["provenance"] = _provenance(args, cfg, {"config": args.config})
    _out_dir(args.out)
    _write_json(summary, args.out)
    _report(out=args.out, spearman=summary["similarity"]["spearman"], **summary["allocator_summary"])


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slimmerge", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--budget", help="s, m, l or a positive rank-scaling factor")
        return sp

    sp = common(sub.add_parser("synth", help="write a synthetic task-vector set"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--base", help="also write a random base checkpoint here")
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("decompose", help="shared/expert split plus SVD cache"))
    sp.add_argument("--set")
    sp.add_argument("--from-base")
    sp.add_argument("--fine-tuned", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decompose)

    sp = common(sub.add_parser("find-ranks", help="optimize per-matrix ranks"))
    sp.add_argument("--decomposition", required=True)
    sp.add_argument("--target", type=float, help="override rank_search.R_target")
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace")
    sp.set_defaults(func=cmd_find_ranks)

    sp = common(sub.add_parser("refine", help="refine low-rank factors against the task vectors"))
    sp.add_argument("--decomposition", required=True)
    sp.add_argument("--allocation", required=True)
    sp.add_argument("--random-init", action="store_true")
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace")
    sp.set_defaults(func=cmd_refine)

    sp = common(sub.add_parser("compose", help="materialize merged parameters"))
    sp.add_argument("--base", required=True)
    sp.add_argument("--factors", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--task", type=int)
    g.add_argument("--weights")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compose)

    sp = common(sub.add_parser("account", help="bit accounting and budget ratio"))
    sp.add_argument("--allocation", required=True)
    sp.add_argument("--geometry", required=True)
    sp.add_argument("--backbone-params", type=float)
    sp.add_argument("--use", choices=("rounded", "continuous"), default="rounded")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_account)

    sp = common(sub.add_parser("bench", help="allocator comparison and similarity study"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(json.dumps({"ok": False, "error": "ConfigError", "field": exc.field,
                          "constraint": exc.constraint, "message": str(exc)}), file=sys.stderr)
        return 2
    except (MergeError, OSError, KeyError, ValueError) as exc:
        print(json.dumps({"ok": False, "error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
