"""Batch driver: ``speclab <pipeline> --config <file.toml> [--out DIR] [--seed N] [--refine K]``.

Exit status is 0 when every certificate holds, 2 when one fails and 1 on
input errors.  ``report.json`` is a deterministic function of the config and
seed; run metadata (timestamps, argv) goes to ``run.json``.
"""
from __future__ import annotations

import argparse
import datetime
import json
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np
import tomli

from . import __version__
from .bounds import (BoundReport, _jsonable, clr_report, dr_report, gny_certificate,
                     split_count_check)
from .grid import DomainSpec, Field, build_operator
from .potentials import (RandomLattice, SmoothBump, bargmann_sum, molchanov_sparse,
                         potential_from_dict, random_lattice_realization, sample)
from .spectra import count_radial_channels, eigs_below, neg_sum

PIPELINES = ("gny", "clr", "dr", "decompose", "gauge", "entropy", "molchanov", "random-sums",
             "splitting")

_NUM = {"type": "number"}
_INT = {"type": "integer", "minimum": 0}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}
_NUMS = {"type": "array", "items": _NUM, "minItems": 1}

# pipeline-specific parameters; anything else is rejected
PARAMS = {
    "gny": {"chain": _BOOL, "max_squares": _INT},
    "clr": {"C": _NUM},
    "dr": {"p": _NUM, "C": _NUM},
    "decompose": {"max_layers": _INT, "replay": _STR},
    "gauge": {},
    "entropy": {"bandwidth": _NUM, "phi": {"type": "array", "items": _NUM, "minItems": 2,
                                           "maxItems": 3}, "C": _NUM},
    "molchanov": {"p": _NUM, "radii": _NUMS, "nodes_per_unit": _INT},
    "random-sums": {"n_seeds": _INT, "p": _NUM},
    "splitting": {"n_pairs": _INT, "eps": _NUMS, "n_bumps": _INT},
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment"],
    "properties": {
        "experiment": _STR,
        "pipeline": {"enum": list(PIPELINES)},
        "seed": _INT,
        "output": _STR,
        "domain": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "bounds", "n"],
            "properties": {
                "kind": {"enum": ["interval", "rectangle", "radial"]},
                "bounds": _NUMS,
                "n": {"oneOf": [{"type": "integer", "minimum": 3},
                                {"type": "array", "items": {"type": "integer", "minimum": 3}}]},
                "bc": {"oneOf": [_STR, {"type": "array", "items": _STR}]},
                "d": {"type": "integer", "minimum": 1},
            },
        },
        "potential": {
            "type": "array",
            "items": {"type": "object", "required": ["kind"],
                      "properties": {"kind": _STR, "scale": _NUM}},
        },
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"tol": _NUM, "residual": _NUM, "slack": _NUM},
        },
        "params": {"type": "object"},
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration (exit status 1)."""


# -- config handling ---------------------------------------------------------------------------

def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<top>"
        raise ConfigError(f"config key {where}: {exc.message}") from None
    pipe = cfg.get("pipeline")
    if pipe is not None:
        params = cfg.get("params", {})
        schema = {"type": "object", "additionalProperties": False, "properties": PARAMS[pipe]}
        try:
            jsonschema.validate(params, schema)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "params"
            raise ConfigError(f"config key params/{where}: {exc.message}") from None


def build_domain(d: dict, refine: int = 0) -> DomainSpec:
    n = d["n"]
    grow = lambda m: (m - 1) * 2**refine + 1
    n = grow(n) if isinstance(n, int) else tuple(grow(m) for m in n)
    kind = d["kind"]
    bounds = tuple(d["bounds"])
    bc = d.get("bc", "dirichlet")
    bc = tuple(bc) if isinstance(bc, list) else bc
    try:
        if kind == "radial":
            return DomainSpec(kind, bounds, n, bc, d.get("d", 3))
        return DomainSpec(kind, bounds, n, bc)
    except ValueError as exc:
        raise ConfigError(f"config key domain: {exc}") from None


def build_potential(items: list, dom: DomainSpec, seed: int | None = None) -> Field:
    total = Field.zeros(dom)
    for k, item in enumerate(items):
        item = dict(item)
        scale = float(item.pop("scale", 1.0))
        try:
            spec = potential_from_dict(item)
            if isinstance(spec, RandomLattice) and seed is not None:
                f = random_lattice_realization(spec, seed, dom)
            else:
                f = sample(spec, dom)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key potential/{k}: {exc}") from None
        total = total + f * scale
    return total


# -- pipelines ---------------------------------------------------------------------------------
# Each returns (report dict, holds, {name: scalar} for refinement sweeps, failing check name).

def _need(dom, kind, pipe):
    if dom.kind != kind:
        raise ConfigError(f"config key domain/kind: pipeline {pipe} needs a {kind} domain")


def _first_failure(reports: list) -> str | None:
    for r in reports:
        if not r.holds:
            return r.bound_id
    return None


def run_gny(cfg, dom, V, out, seed):
    _need(dom, "rectangle", "gny")
    params = cfg.get("params", {})
    rep = gny_certificate(V)
    reports = [rep]
    body = {"gny": rep.to_dict(), "N": rep.extra["N"]}
    if params.get("chain", False):
        from .decompose import planar_chain_certificate
        tol = cfg.get("tolerances", {}).get("tol")
        cert = planar_chain_certificate(V, tol, params.get("max_squares", 50))
        body["chain"] = cert.to_dict()
        reports += cert.reports
    return body, all(r.holds for r in reports), {"integral": rep.lhs}, _first_failure(reports)


def run_clr(cfg, dom, V, out, seed):
    rep = clr_report(V, dom.dim, C=cfg.get("params", {}).get("C"))
    return {"clr": rep.to_dict()}, rep.holds, {"ratio": rep.extra["ratio"]}, \
        _first_failure([rep])


def run_dr(cfg, dom, V, out, seed):
    params = cfg.get("params", {})
    rep = dr_report(V, params.get("p", 0.5), C=params.get("C"))
    return {"dr": rep.to_dict()}, rep.holds, {"lhs": rep.lhs}, _first_failure([rep])


def run_decompose(cfg, dom, V, out, seed):
    from .decompose import (Covering, build_partition, eigen_sum_check, greedy_cover,
                            verify_covering)

    _need(dom, "radial", "decompose")
    params = cfg.get("params", {})
    op_p, op_m = build_operator(dom, V, +1), build_operator(dom, V, -1)
    if "replay" in params:
        try:
            data = json.loads(Path(params["replay"]).read_text())
            cov = Covering.from_dict(data["covering"] if "covering" in data else data)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"config key params/replay: {exc}") from None
        if cov.domain != dom:
            raise ConfigError("config key params/replay: covering grid differs from domain")
    else:
        tol = cfg.get("tolerances", {}).get("tol")
        cov = greedy_cover(op_p, op_m, tol, params.get("max_layers", 200), verify=False)
    checks = verify_covering(cov, op_p, op_m, raise_on_fail=False)
    esum = eigen_sum_check(cov, op_p, op_m)
    pou = build_partition(cov)
    body = {"covering": cov.to_dict(), "checks": _jsonable(checks), "eigen_sum": esum,
            "partition": {"gradient_sum": pou.gradient_sum, "sqrt_eps_sum": pou.sqrt_eps_sum,
                          "ratio": pou.ratio}}
    if out is not None:
        (out / "covering.json").write_text(cov.to_json())
    ok = bool(checks["holds"]) and bool(esum["holds"])
    fail = None if ok else ("covering_postconditions" if not checks["holds"] else "eigen_sum")
    return body, ok, {"sqrt_eps_sum": cov.sqrt_eps_sum()}, fail


def run_gauge(cfg, dom, V, out, seed):
    from .gauge import gauge_pipeline

    _need(dom, "radial", "gauge")
    tol = cfg.get("tolerances", {})
    cov, pou, dec = gauge_pipeline(V, tol.get("tol"))
    limit = tol.get("residual", 100.0 * dom.h)
    if out is not None:
        dec.dump(out / "gauge")
    body = {"decomposition": _jsonable(dec.manifest()), "residual_limit": limit,
            "covering": cov.to_dict()}
    ok = dec.reconstruction_residual <= limit
    return body, ok, {"residual": dec.reconstruction_residual,
                      "weighted_norm": dec.weighted_norm}, None if ok else "reconstruction_residual"


def run_entropy(cfg, dom, V, out, seed):
    from .measure import (TestFunction, entropy, entropy_budget, shell_vector,
                          smooth_density, spectral_measure)

    _need(dom, "radial", "entropy")
    params = cfg.get("params", {})
    b = params.get("bandwidth", 0.05)
    try:
        phi = TestFunction(*params.get("phi", [0.5, 3.0]))
    except ValueError as exc:
        raise ConfigError(f"config key params/phi: {exc}") from None
    f = shell_vector(dom)
    budget = entropy_budget(V, params.get("C", 1.0))
    body = {"bandwidth": b, "test_function": phi.ident}
    values = {}
    for name, W in (("free", Field.zeros(dom)), ("perturbed", V)):
        mu = spectral_measure(build_operator(dom, W, +1), f, shell_mode=True)
        dens = smooth_density(mu, b, window=(phi.a, phi.b))
        rep = entropy(dens, phi, budget)
        body[name] = {"mass": mu.total_mass, **rep.to_dict()}
        values[name] = rep.value
        if out is not None:
            mu.to_csv(out / f"measure_{name}.csv")
            dens.to_csv(out / f"density_{name}.csv")
    ok = body["perturbed"]["holds"]
    return body, ok, {"entropy": values["perturbed"]}, None if ok else "entropy_budget"


def run_molchanov(cfg, dom, V, out, seed):
    from .grid import integrate

    params = cfg.get("params", {})
    p = params.get("p", 0.5)
    d = dom.dim if dom.kind == "radial" else 3
    ppu = params.get("nodes_per_unit", 20)
    rows, reports = [], []
    for R in params.get("radii", [50.0, 100.0, 200.0]):
        spec = molchanov_sparse(1.0 if p > 1.25 else p, R)
        box = DomainSpec.ball(R, int(R * ppu) + 1, d)
        W = sample(spec, box)
        N = count_radial_channels(W)
        integral = integrate(W.with_values(W.values**p))
        rep = BoundReport.make("molchanov_no_bound_state", N, 0, 0.0, "", R=R,
                               integral=integral, shells=len(spec.centers),
                               bargmann=bargmann_sum(spec))
        reports.append(rep)
        rows.append(rep.to_dict())
    growth = rows[-1]["extra"]["integral"] / rows[0]["extra"]["integral"] if rows and \
        rows[0]["extra"]["integral"] > 0 else math.inf
    ok = all(r.holds for r in reports)
    return {"radii": rows, "growth": growth, "p": p}, ok, {"growth": growth}, \
        _first_failure(reports)


def run_random_sums(cfg, dom, V, out, seed):
    params = cfg.get("params", {})
    items = cfg.get("potential", [])
    if not any(i.get("kind") == "random_lattice" for i in items):
        raise ConfigError("config key potential: random-sums needs a random_lattice entry")
    p = params.get("p", 0.5)
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63, size=params.get("n_seeds", 10)).tolist()
    rows = []
    for s in seeds:
        W = build_potential(items, dom, int(s))
        row = {"seed": int(s)}
        for name, sign in (("plus", 1), ("minus", -1)):
            res = eigs_below(build_operator(dom, W, sign), 0.0)
            row[f"N_{name}"] = len(res)
            row[f"sum_{name}"] = neg_sum(res, p)
        rows.append(row)
    sums = np.array([r["sum_plus"] + r["sum_minus"] for r in rows])
    body = {"p": p, "realizations": rows, "mean_sum": float(sums.mean()),
            "std_sum": float(sums.std())}
    ok = bool(np.all(np.isfinite(sums)))
    return body, ok, {"mean_sum": body["mean_sum"]}, None if ok else "finite_sums"


def random_pair(dom: DomainSpec, rng: np.random.Generator, n_bumps: int = 3) -> tuple:
    """Two random sums of signed smooth bumps on ``dom``."""
    lo = np.array(dom.bounds[0::2])
    hi = np.array(dom.bounds[1::2])
    out = []
    for _ in range(2):
        W = Field.zeros(dom)
        for _ in range(n_bumps):
            c = tuple(rng.uniform(lo, hi).tolist())
            width = float(rng.uniform(0.5, 0.25 * float(np.min(hi - lo))))
            height = float(rng.uniform(0.2, 4.0))
            sign = -1.0 if rng.random() < 0.7 else 1.0
            W = W + sample(SmoothBump(height, width, c), dom) * sign
        out.append(W)
    return tuple(out)


def run_splitting(cfg, dom, V, out, seed):
    params = cfg.get("params", {})
    rng = np.random.default_rng(seed)
    eps_list = params.get("eps", [0.3, 0.5, 0.7])
    if any(not 0 < e < 1 for e in eps_list):
        raise ConfigError("config key params/eps: values must lie in (0, 1)")
    rows, reports = [], []
    for k in range(params.get("n_pairs", 100)):
        W1, W2 = random_pair(dom, rng, params.get("n_bumps", 3))
        for e in eps_list:
            rep = split_count_check(W1, W2, e)
            reports.append(rep)
            rows.append({"pair": k, **rep.to_dict()})
    ok = all(r.holds for r in reports)
    return {"instances": rows, "n_instances": len(rows)}, ok, \
        {"violations": float(sum(not r.holds for r in reports))}, _first_failure(reports)


RUNNERS = {"gny": run_gny, "clr": run_clr, "dr": run_dr, "decompose": run_decompose,
           "gauge": run_gauge, "entropy": run_entropy, "molchanov": run_molchanov,
           "random-sums": run_random_sums, "splitting": run_splitting}


# -- driver --------------------------------------------------------------------------------------

def _slopes(values: list) -> list:
    """Observed orders ``log2(|q_k - q_{k+1}| / |q_{k+1} - q_{k+2}|)``."""
    out = []
    for a, b, c in zip(values, values[1:], values[2:]):
        d1, d2 = abs(a - b), abs(b - c)
        out.append(math.log2(d1 / d2) if d1 > 0 and d2 > 0 else None)
    return out


def run(pipeline: str, cfg: dict, out: Path | None, seed: int, refine: int = 0) -> tuple:
    """Run one experiment; returns ``(exit status, report dict)``."""
    if pipeline not in RUNNERS:
        raise ConfigError(f"unknown pipeline {pipeline!r}")
    if cfg.get("pipeline", pipeline) != pipeline:
        raise ConfigError(f"config key pipeline: {cfg['pipeline']!r} does not match {pipeline!r}")
    validate_config({**cfg, "pipeline": pipeline})
    if "domain" not in cfg:
        raise ConfigError("config key domain: required")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    runner = RUNNERS[pipeline]
    dom = build_domain(cfg["domain"])
    V = build_potential(cfg.get("potential", []), dom)
    body, ok, scalars, failed = runner(cfg, dom, V, out, seed)
    report = {"experiment": cfg["experiment"], "pipeline": pipeline, "seed": seed,
              "version": __version__, "holds": bool(ok), "failed": failed, "result": body}
    if refine:
        sweep = {k: [v] for k, v in scalars.items()}
        hs = [dom.h]
        for k in range(1, refine + 1):
            dk = build_domain(cfg["domain"], k)
            _, ok_k, sc, _ = runner(cfg, dk, build_potential(cfg.get("potential", []), dk),
                                    None, seed)
            hs.append(dk.h)
            for name, v in sc.items():
                sweep[name].append(v)
        report["refinement"] = {"h": hs, "values": sweep,
                                "slopes": {k: _slopes(v) for k, v in sweep.items()}}
        if out is not None:
            with open(out / "refinement.csv", "w") as fh:
                names = sorted(sweep)
                fh.write(",".join(["h"] + names) + "\n")
                for i, h in enumerate(hs):
                    fh.write(",".join([f"{h:.17g}"] + [f"{sweep[n][i]:.17g}" for n in names]) + "\n")
    report = _jsonable(report)
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2,
                                                    allow_nan=True) + "\n")
    return (0 if ok else 2), report


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors; status 2 is reserved for failed certificates
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def main(argv=None) -> int:
    ap = _Parser(prog="speclab", description=__doc__.splitlines()[0])
    ap.add_argument("pipeline", choices=PIPELINES)
    ap.add_argument("--config", required=True, help="TOML experiment file")
    ap.add_argument("--out", help="output directory (default: the config's 'output' key)")
    ap.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    ap.add_argument("--refine", type=int, default=0, help="rerun at k grid refinements")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if args.refine < 0:
            raise ConfigError("--refine must be nonnegative")
        out = args.out or cfg.get("output")
        out = Path(out) if out else None
        started = datetime.datetime.now(datetime.timezone.utc).isoformat()
        status, report = run(args.pipeline, cfg, out, seed, args.refine)
    except ConfigError as exc:
        print(f"speclab: {exc}", file=sys.stderr)
        return 1
    if out is not None:
        meta = {"started": started,
                "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                "argv": sys.argv if argv is None else list(argv), "config": str(args.config)}
        (out / "run.json").write_text(json.dumps(meta, indent=2) + "\n")
    if status == 2:
        print(f"speclab: certificate failed: {report['failed']}", file=sys.stderr)
    else:
        print(f"speclab: {args.pipeline} holds")
    return status


if __name__ == "__main__":
    sys.exit(main())
