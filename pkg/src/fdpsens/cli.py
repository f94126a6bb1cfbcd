"""Command-line entry point: ``fdpsens {analyze,gsv,subsets,compare,simulate}``.

Every command accepts ``--config FILE`` (YAML or JSON mapping of option names
to values); explicit flags override the file. Outputs start with a
provenance record (config hash, seed, package version).

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 an internal
dominance or monotonicity check failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .closed import ClosedTestSession, SearchError, provenance, subset_search
from .design import DesignError, build_scores, load_design_csv
from .minimax import MinimaxConvergenceError
from .sensitivity import CapacityError

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_INVARIANT = 0, 2, 3, 4

DEFAULTS = {
    "alpha": 0.05,
    "gamma": None,
    "gamma_grid": None,
    "subset": None,
    "subset_size": None,
    "r_tolerance": None,
    "statistic": "auto",
    "seed": None,
    "out": None,
    "paper_scale": False,
    "gamma_hi": 10.0,
    "tol": 1e-3,
    "prefilter": None,
    "cap": 5000,
    "replicates": None,
    "workers": 1,
    "svg": False,
    "bias_strength": 2.0,
}

log = logging.getLogger("fdpsens")


class UsageError(ValueError):
    pass


# -- argument plumbing ----------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).replace(",", " ").split()]


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="YAML or JSON file with option values; flags override it")
    p.add_argument("--alpha", type=float, help="family-wise level (default 0.05)")
    p.add_argument("--seed", type=int,
                   help="simulation base seed; always recorded in the provenance header")
    p.add_argument("--out", help="output file (default: stdout)")
    if data:
        p.add_argument("input", nargs="?", help="design CSV: stratum_id,unit_id,treated,<outcomes>")
        p.add_argument("--statistic", help="auto (default), huber, mh, raw, or a comma list per outcome")
        p.add_argument("--gamma-hi", type=float, help="upper end of the gamma search (default 10)")
        p.add_argument("--tol", type=float, help="bisection tolerance on gamma (default 1e-3)")


def _add_subset(p: argparse.ArgumentParser) -> None:
    p.add_argument("--subset", action="append",
                   help="outcome names or 0-based indices, comma separated; repeatable "
                        "(default: all outcomes)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fdpsens", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fdpsens {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="v* and FDP sensitivity sets for chosen subsets")
    _add_common(p)
    _add_subset(p)
    p.add_argument("--gamma", type=float, help="single gamma (default 1)")
    p.add_argument("--gamma-grid", help="several gammas, e.g. '1,1.25,1.5'")
    p.add_argument("--r-tolerance", type=int, action="append",
                   help="also report the generalised sensitivity value for this r; repeatable")

    p = sub.add_parser("gsv", help="generalised sensitivity value of a subset")
    _add_common(p)
    _add_subset(p)
    p.add_argument("--r-tolerance", type=int, action="append",
                   help="tolerated true nulls r (default floor(|R|/2)); repeatable")

    p = sub.add_parser("subsets", help="rank all subsets of a given size")
    _add_common(p)
    p.add_argument("--subset-size", type=int, help="size of the candidate subsets")
    p.add_argument("--r-tolerance", type=int, help="tolerated true nulls r")
    p.add_argument("--prefilter", type=float,
                   help="keep only outcomes with Gamma=1 p-value at most this level")
    p.add_argument("--cap", type=int, help="maximum number of subsets (default 5000)")

    p = sub.add_parser("compare", help="exact versus naive v* over a gamma grid")
    _add_common(p)
    _add_subset(p)
    p.add_argument("--gamma-grid", help="gammas (default '1,1.25,1.5,1.75,2')")

    p = sub.add_parser("simulate", help="run a registered simulation study")
    from .simlab import STUDIES
    p.add_argument("study", choices=STUDIES)
    _add_common(p, data=False)
    p.add_argument("--replicates", type=int, help="Monte Carlo replicates")
    p.add_argument("--paper-scale", action="store_true", default=None,
                   help="use the published replicate counts (slow)")
    p.add_argument("--gamma-grid", help="override the study's gamma grid")
    p.add_argument("--workers", type=int, help="worker processes (default 1)")
    p.add_argument("--svg", action="store_true", default=None, help="also write an SVG plot")
    p.add_argument("--bias-strength", type=float,
                   help="confounding odds for the selector study (default 2.0)")
    return ap


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    text = Path(path).read_text()
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: configuration must be a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (in increasing priority)."""
    cfg = dict(DEFAULTS)
    file_cfg = _load_config(getattr(args, "config", None))
    unknown = set(file_cfg) - set(DEFAULTS) - {"input", "study"}
    if unknown:
        raise UsageError(f"unknown configuration keys: {sorted(unknown)}")
    cfg.update(file_cfg)
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "verbose"):
            cfg[k] = v
    if not 0 < float(cfg["alpha"]) < 1:
        raise UsageError("--alpha must lie in (0, 1)")
    for g in _gammas(cfg, default=[1.0]):
        if g < 1:
            raise UsageError("gamma values must be >= 1")
    return cfg


def _gammas(cfg: dict, default: Sequence[float]) -> list[float]:
    if cfg.get("gamma_grid") is not None:
        g = cfg["gamma_grid"]
        return _floats(g) if isinstance(g, str) else [float(x) for x in g]
    if cfg.get("gamma") is not None:
        return [float(cfg["gamma"])]
    return list(default)


def _parse_subsets(spec, names: Sequence[str]) -> list[tuple[int, ...]]:
    K = len(names)
    if spec is None:
        return [tuple(range(K))]
    if isinstance(spec, str) or (spec and not isinstance(spec[0], (list, tuple, str))):
        spec = [spec]
    out = []
    for item in spec:
        toks = item.replace(" ", "").split(",") if isinstance(item, str) else list(item)
        idx = []
        for t in toks:
            if isinstance(t, str) and t in names:
                idx.append(names.index(t))
                continue
            try:
                k = int(t)
            except (TypeError, ValueError):
                raise UsageError(f"unknown outcome {t!r}") from None
            if not 0 <= k < K:
                raise UsageError(f"outcome index {k} outside 0..{K - 1}")
            idx.append(k)
        if not idx or len(set(idx)) != len(idx):
            raise UsageError(f"subset {item!r} is empty or repeats an outcome")
        out.append(tuple(sorted(idx)))
    return out


def _load(cfg: dict):
    if not cfg.get("input"):
        raise UsageError("an input CSV is required")
    design, outcomes = load_design_csv(cfg["input"])
    stat = cfg["statistic"]
    if isinstance(stat, str) and "," in stat:
        stat = stat.split(",")
    scores = build_scores(design, outcomes, stat)
    return design, outcomes, scores


def _emit(cfg: dict, text: str) -> None:
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text)
    else:
        sys.stdout.write(text)


def _prov(cfg: dict) -> dict:
    return provenance({k: v for k, v in cfg.items() if k != "out"}, cfg.get("seed"))


def _csv(cfg: dict, header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    for k, v in _prov(cfg).items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- commands ---------------------------------------------------------------------

def cmd_analyze(cfg: dict) -> int:
    design, outcomes, scores = _load(cfg)
    session = ClosedTestSession(design, scores, cfg["alpha"])
    subsets = _parse_subsets(cfg["subset"], outcomes.names)
    rs = cfg.get("r_tolerance")
    rs = [rs] if isinstance(rs, int) else rs
    reports, bad = [], []
    for R in subsets:
        prev = None
        for g in _gammas(cfg, [1.0]):
            rep = session.report(R, g, gsv_r=rs or [], gamma_hi=cfg["gamma_hi"], tol=cfg["tol"])
            rep.labels = tuple(outcomes.names[k] for k in R)
            bad += rep.invariant_violations()
            if prev is not None and rep.v_star < prev.v_star and g >= prev.gamma:
                bad.append(f"v_star decreased from gamma {prev.gamma} to {g} on {R}")
            prev = rep
            reports.append(rep.to_dict())
    doc = {"provenance": _prov(cfg), "reports": reports, "violations": bad}
    _emit(cfg, json.dumps(doc, indent=2) + "\n")
    return _report_violations(bad)


def cmd_gsv(cfg: dict) -> int:
    design, outcomes, scores = _load(cfg)
    session = ClosedTestSession(design, scores, cfg["alpha"])
    rows, bad = [], []
    for R in _parse_subsets(cfg["subset"], outcomes.names):
        rs = cfg.get("r_tolerance") or [len(R) // 2]
        rs = [rs] if isinstance(rs, int) else rs
        prev = None
        for r in sorted(rs):
            if not 0 <= r < len(R):
                raise UsageError(f"r must lie in 0..{len(R) - 1} for subset {R}")
            ex = session.gsv(R, r, cfg["gamma_hi"], cfg["tol"])
            nv = session.gsv(R, r, cfg["gamma_hi"], cfg["tol"], method="naive")
            if ex.gamma < nv.gamma - 2 * cfg["tol"]:
                bad.append(f"exact gsv {ex.gamma:.4f} below naive {nv.gamma:.4f} on {R}, r={r}")
            if prev is not None and ex.gamma < prev - 2 * cfg["tol"]:
                bad.append(f"gsv decreased in r on {R}")
            prev = ex.gamma
            names = ";".join(outcomes.names[k] for k in R)
            rows.append([names, r, f"{ex.gamma:.3f}", f"{nv.gamma:.3f}", ex.saturated])
    _emit(cfg, _csv(cfg, ["subset", "r", "gsv", "naive_gsv", "saturated"], rows))
    return _report_violations(bad)


def cmd_subsets(cfg: dict) -> int:
    design, outcomes, scores = _load(cfg)
    if cfg.get("subset_size") is None or cfg.get("r_tolerance") is None:
        raise UsageError("subsets needs --subset-size and --r-tolerance")
    size, r = int(cfg["subset_size"]), int(cfg["r_tolerance"])
    if not 1 <= size <= outcomes.n_outcomes or not 0 <= r < size:
        raise UsageError("need 1 <= subset size <= K and 0 <= r < subset size")
    session = ClosedTestSession(design, scores, cfg["alpha"])
    prefilter = None
    if cfg.get("prefilter") is not None:
        p1 = session.pstar(1.0)
        prefilter = [k for k in range(outcomes.n_outcomes) if p1[k] <= cfg["prefilter"]]
        if len(prefilter) < size:
            raise UsageError(f"only {len(prefilter)} outcomes pass the prefilter")
    try:
        ranked = subset_search(design, scores, size, r, cfg["alpha"], prefilter, cfg["cap"],
                               cfg["gamma_hi"], cfg["tol"], session=session)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = [[i + 1, ";".join(outcomes.names[k] for k in R), f"{sv.gamma:.3f}"]
            for i, (R, sv) in enumerate(ranked)]
    _emit(cfg, _csv(cfg, ["rank", "subset", "gsv"], rows))
    return EXIT_OK


def cmd_compare(cfg: dict) -> int:
    design, outcomes, scores = _load(cfg)
    session = ClosedTestSession(design, scores, cfg["alpha"])
    grid = sorted(_gammas(cfg, [1.0, 1.25, 1.5, 1.75, 2.0]))
    rows, bad = [], []
    for R in _parse_subsets(cfg["subset"], outcomes.names):
        prev = -1
        for g in grid:
            v = session.v_star(R, g)[0]
            nv = session.naive_v(R, g)
            if v > nv:
                bad.append(f"dominance: v_star {v} > naive {nv} at gamma {g} on {R}")
            if v < prev:
                bad.append(f"v_star decreased at gamma {g} on {R}")
            prev = v
            rows.append([";".join(outcomes.names[k] for k in R), g, v, nv])
    _emit(cfg, _csv(cfg, ["subset", "gamma", "v_star", "naive_v"], rows))
    return _report_violations(bad)


def cmd_simulate(cfg: dict) -> int:
    from . import simlab
    study = cfg["study"]
    over = {"replicates": cfg.get("replicates"), "seed": cfg.get("seed"), "alpha": cfg["alpha"]}
    if cfg.get("gamma_grid") is not None:
        over["gamma_grid"] = tuple(_gammas(cfg, []))
    spec = simlab.default_spec(study, bool(cfg.get("paper_scale")), **over)
    confound = simlab.ConfoundedAssignmentSpec(float(cfg["bias_strength"]))
    result = simlab.run_study(study, spec, int(cfg["workers"]), confound)
    out = cfg.get("out")
    if out:
        for p in result.write(out, svg=bool(cfg.get("svg"))):
            log.info("wrote %s", p)
    else:
        sys.stdout.write(result.to_csv())
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "gsv": cmd_gsv, "subsets": cmd_subsets,
            "compare": cmd_compare, "simulate": cmd_simulate}


def _report_violations(bad: list[str]) -> int:
    for msg in bad:
        print(f"fdpsens: invariant violated: {msg}", file=sys.stderr)
    return EXIT_INVARIANT if bad else EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, DesignError, OSError, yaml.YAMLError, json.JSONDecodeError) as exc:
        print(f"fdpsens: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SearchError, MinimaxConvergenceError, CapacityError) as exc:
        print(f"fdpsens: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"fdpsens: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
