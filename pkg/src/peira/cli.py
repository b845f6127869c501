"""Command-line experiment runner.

Subcommands (each takes ``--config <json> --out <dir>`` plus optional
``--jobs <n>`` and ``--seed <override>``):

* ``oracle``    — exact canonical decomposition of a table; writes
  ``cca.json`` and ``spectrum.csv``.
* ``flow``      — integrate one flow; writes ``trajectory.csv`` and
  ``summary.json`` comparing final mode norms against the filter predictions.
* ``stability`` — enumerate critical points, classify each in closed form,
  cross-check against finite-difference Jacobians; writes ``stability.csv``
  and ``verdicts.json``.
* ``train``     — run the stochastic trainer; writes ``metrics.csv`` and
  ``final.json``.
* ``report``    — merge training logs into an objective-vs-quality table
  with rank correlations; writes ``report.csv`` and ``summary.json``.

Configs are strict JSON: unknown keys are rejected, ranges validated before
any computation.  Exit codes: 0 success, 2 config/validation error,
3 numerical error (divergence, non-finite state, closed-form/numerical
disagreement).  ``flow`` and ``train`` accept an optional ``"seeds"`` list;
with ``--jobs`` those fan out across threads into per-seed subdirectories.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from .cca_oracle import (
    CoordinatePoint,
    cca_to_json,
    coordinates_of,
    exact_cca,
    operator_spectrum,
    principal_angles,
)
from .distributions import JointTable, make_product, make_two_state, perturb_distinct
from .equilibria import (
    classify_stability,
    enumerate_specs,
    filter_f,
    filter_g,
    build_coordinates,
    jacobian_fd_eigenvalues,
    report_to_json,
    top_mode_count,
)
from .flows import (
    FlowConfig,
    FlowDivergenceError,
    coordinate_field,
    integrate_coordinate_flow,
    integrate_function_flow,
)
from .matstack import NumericalError
from .objectives import random_encoder_pair
from .trainer import TrainerConfig, TrainingDivergedError, train

__all__ = ["main", "ConfigError"]

_FD_AGREEMENT_TOL = 1e-3
_QUALITY_NOTE = ("quality = -max principal angle to the oracle top-mode subspace "
                 "(desk-scale stand-in for downstream evaluation accuracy)")


class ConfigError(Exception):
    """Malformed or invalid configuration document."""


def _fail(kind: str, value, ctx: str):
    raise ConfigError(f"{ctx}: expected {kind}, got {value!r}")


def _as_int(value, ctx: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        _fail("integer", value, ctx)
    return value


def _as_float(value, ctx: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail("number", value, ctx)
    return float(value)


def _as_str(value, ctx: str) -> str:
    if not isinstance(value, str):
        _fail("string", value, ctx)
    return value


def _as_bool(value, ctx: str) -> bool:
    if not isinstance(value, bool):
        _fail("boolean", value, ctx)
    return value


def _as_list(value, ctx: str) -> list:
    if not isinstance(value, list):
        _fail("array", value, ctx)
    return value


def _check_keys(obj: dict, required: set, optional: set, ctx: str) -> None:
    if not isinstance(obj, dict):
        _fail("object", obj, ctx)
    keys = set(obj.keys())
    unknown = keys - required - optional
    if unknown:
        raise ConfigError(f"{ctx}: unknown keys {sorted(unknown)}")
    missing = required - keys
    if missing:
        raise ConfigError(f"{ctx}: missing keys {sorted(missing)}")


def _parse_table(obj) -> JointTable:
    _check_keys(obj, {"kind"}, {"rho", "rhos", "eps", "seed", "p"}, "table")
    kind = _as_str(obj["kind"], "table.kind")
    try:
        if kind == "two_state":
            _check_keys(obj, {"kind", "rho"}, set(), "table")
            return make_two_state(_as_float(obj["rho"], "table.rho"))
        if kind == "product":
            _check_keys(obj, {"kind", "rhos"}, {"eps", "seed"}, "table")
            rhos = [_as_float(r, "table.rhos[]") for r in _as_list(obj["rhos"], "table.rhos")]
            if not rhos:
                raise ConfigError("table.rhos: need at least one factor")
            table = make_product([make_two_state(r) for r in rhos])
            eps = _as_float(obj.get("eps", 0.0), "table.eps")
            if eps > 0.0:
                table = perturb_distinct(table, eps, _as_int(obj.get("seed", 0), "table.seed"))
            return table
        if kind == "explicit":
            _check_keys(obj, {"kind", "p"}, set(), "table")
            return JointTable(p=np.asarray(obj["p"], dtype=np.float64))
    except (ValueError, ArithmeticError) as exc:
        raise ConfigError(f"table: {exc}") from exc
    raise ConfigError(f"table.kind: unknown kind {kind!r}")


def _load_config(path: str) -> dict:
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return doc


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_oracle(doc: dict, out: Path, jobs: int, seed_override) -> int:
    _check_keys(doc, {"table"}, set(), "config")
    table = _parse_table(doc["table"])
    cca = exact_cca(table)
    _write_json(out / "cca.json", cca_to_json(cca))
    _write_csv(out / "spectrum.csv", ["index", "c"],
               [[i + 1, repr(float(ci))] for i, ci in enumerate(cca.c)])
    return 0


def _flow_once(table: JointTable, doc: dict, out: Path, seed: int) -> int:
    kind = doc["kind"]
    lam = doc["lambda"]
    k = doc["k"]
    try:
        cfg = FlowConfig(kind=kind, lam=lam, step=doc["step"], t_end=doc["t_end"],
                         log_every=doc.get("log_every", 50),
                         stop_grad_norm=doc.get("stop_grad_norm", 1e-10))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cca = exact_cca(table)
    spectrum = operator_spectrum(cca)
    W0 = random_encoder_pair(table, k, doc.get("init_scale", 0.3), seed)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if doc.get("space", "coordinate") == "coordinate":
            traj = integrate_coordinate_flow(coordinates_of(W0, spectrum), spectrum, cfg)
        else:
            traj = integrate_function_flow(W0, table, cfg)
    except FlowDivergenceError as exc:
        exc.trajectory.to_csv(out / "trajectory.csv")
        _write_json(out / "summary.json",
                    {"diverged": True, "last_time": exc.last_time})
        print(f"flow diverged: {exc}", file=sys.stderr)
        return 3
    traj.to_csv(out / "trajectory.csv")
    if kind == "peira":
        predicted = sorted({filter_g(c, lam) for c in cca.c[:min(k, cca.R)]} | {0.0})
    else:
        predicted = sorted({filter_f(c, lam, 1) for c in cca.c[:min(k, cca.R)]} | {0.0})
    final_svals = traj.svals[-1]
    deviation = float(max(
        min(abs(sv - p) for p in predicted) for sv in final_svals
    )) if final_svals.size else 0.0
    _write_json(out / "summary.json", {
        "diverged": False,
        "converged": bool(traj.converged),
        "final_svals": [float(v) for v in final_svals],
        "predicted": [float(v) for v in predicted],
        "max_abs_deviation": deviation,
        "final_field_norm": float(traj.field_norm[-1]),
        "final_norm": float(np.sqrt(np.sum(final_svals ** 2))),
        "seed": int(seed),
    })
    return 0


def cmd_flow(doc: dict, out: Path, jobs: int, seed_override) -> int:
    _check_keys(doc, {"table", "kind", "k", "lambda", "step", "t_end"},
                {"log_every", "stop_grad_norm", "init_scale", "space", "seed", "seeds"},
                "config")
    table = _parse_table(doc["table"])
    parsed = {
        "kind": _as_str(doc["kind"], "kind"),
        "k": _as_int(doc["k"], "k"),
        "lambda": _as_float(doc["lambda"], "lambda"),
        "step": _as_float(doc["step"], "step"),
        "t_end": _as_float(doc["t_end"], "t_end"),
        "log_every": _as_int(doc.get("log_every", 50), "log_every"),
        "stop_grad_norm": _as_float(doc.get("stop_grad_norm", 1e-10), "stop_grad_norm"),
        "init_scale": _as_float(doc.get("init_scale", 0.3), "init_scale"),
        "space": _as_str(doc.get("space", "coordinate"), "space"),
    }
    if parsed["space"] not in ("coordinate", "function"):
        raise ConfigError(f"space must be coordinate or function, got {parsed['space']!r}")
    if parsed["k"] < 1:
        raise ConfigError("k must be >= 1")
    if parsed["init_scale"] <= 0.0:
        raise ConfigError("init_scale must be positive")
    seeds = _resolve_seeds(doc, seed_override)
    if len(seeds) == 1:
        return _flow_once(table, parsed, out, seeds[0])
    return _fan_out(lambda s, sub: _flow_once(table, parsed, sub, s), seeds, out, jobs)


def _resolve_seeds(doc: dict, seed_override) -> list[int]:
    if seed_override is not None:
        return [int(seed_override)]
    if "seeds" in doc:
        seeds = [_as_int(s, "seeds[]") for s in _as_list(doc["seeds"], "seeds")]
        if not seeds:
            raise ConfigError("seeds: need at least one entry")
        return seeds
    if "seed" in doc:
        return [_as_int(doc["seed"], "seed")]
    raise ConfigError("missing keys ['seed'] (or 'seeds')")


def _fan_out(fn, seeds: list[int], out: Path, jobs: int) -> int:
    workers = max(1, int(jobs))
    codes = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, s, out / f"seed_{s}") for s in seeds]
        for fut in futures:
            codes.append(fut.result())
    return max(codes)


def cmd_stability(doc: dict, out: Path, jobs: int, seed_override) -> int:
    _check_keys(doc, {"table", "k", "entries"}, {"fd_check"}, "config")
    table = _parse_table(doc["table"])
    k = _as_int(doc["k"], "k")
    if k < 1:
        raise ConfigError("k must be >= 1")
    fd_check = _as_bool(doc.get("fd_check", True), "fd_check")
    entries = []
    for i, entry in enumerate(_as_list(doc["entries"], "entries")):
        _check_keys(entry, {"kappa", "lambda"}, set(), f"entries[{i}]")
        kappa = _as_int(entry["kappa"], f"entries[{i}].kappa")
        lam = _as_float(entry["lambda"], f"entries[{i}].lambda")
        if kappa not in (0, 1):
            raise ConfigError(f"entries[{i}].kappa must be 0 or 1")
        if not 0.0 < lam < 1.0:
            raise ConfigError(f"entries[{i}].lambda must lie in (0, 1)")
        entries.append((kappa, lam))
    if not entries:
        raise ConfigError("entries: need at least one (kappa, lambda) pair")

    cca = exact_cca(table)
    spectrum = operator_spectrum(cca)
    rows = []
    verdicts = []
    worst_disagreement = 0.0
    spec_id = 0
    for kappa, lam in entries:
        for spec in enumerate_specs(spectrum.s, k, kappa, lam):
            report = classify_stability(spec, cca)
            closed_sorted = np.sort(report.jacobian.mu.ravel())
            if fd_check:
                point = build_coordinates(spec, spectrum.s)
                fd_sorted = jacobian_fd_eigenvalues(
                    lambda arr, _k=kappa, _l=lam: coordinate_field(
                        CoordinatePoint(w=arr, S=spectrum.s), _k, _l),
                    point,
                )
                disagreement = float(np.abs(closed_sorted - fd_sorted).max())
                min_fd = float(fd_sorted.min())
            else:
                disagreement = 0.0
                min_fd = float("nan")
            worst_disagreement = max(worst_disagreement, disagreement)
            agree = disagreement <= _FD_AGREEMENT_TOL
            rows.append([spec_id, kappa, report.verdict,
                         repr(report.min_mu), repr(min_fd), str(bool(agree)).lower()])
            doc_v = report_to_json(report)
            doc_v["spec_id"] = spec_id
            doc_v["fd_disagreement"] = disagreement
            verdicts.append(doc_v)
            spec_id += 1
    _write_csv(out / "stability.csv",
               ["spec_id", "kappa", "verdict_closed_form", "min_mu_closed_form",
                "min_mu_finite_difference", "agreement"], rows)
    _write_json(out / "verdicts.json", verdicts)
    if fd_check and worst_disagreement > _FD_AGREEMENT_TOL:
        print(f"closed-form vs finite-difference disagreement {worst_disagreement:g} "
              f"exceeds {_FD_AGREEMENT_TOL:g}", file=sys.stderr)
        return 3
    return 0


_TRAIN_KEYS = {"table", "k", "lambda", "batch_size", "eta_init", "eta_min", "steps",
               "lr", "momentum", "schedule", "encoder", "mlp_widths", "shared_encoder",
               "clip", "seed", "log_every"}


def _train_once(table: JointTable, cfg: TrainerConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(table, cfg)
    except TrainingDivergedError as exc:
        _write_json(out / "final.json", {"diverged": True, "step": exc.step,
                                         "snapshot": exc.snapshot})
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    result.log.to_csv(out / "metrics.csv")
    last = result.log.rows[-1]
    cca = exact_cca(table)
    r = max(1, top_mode_count(cca.c, cfg.lam, cfg.k))
    ang_u, ang_v = principal_angles(result.final_pair, cca, r)
    _write_json(out / "final.json", {
        "diverged": False,
        "objective": last.objective_population,
        "objective_buffered": last.objective,
        "erank": last.erank,
        "min_alignment": last.min_alignment,
        "principal_angle_max": last.principal_angle_max,
        "principal_angles_u": [float(a) for a in ang_u],
        "principal_angles_v": [float(a) for a in ang_v],
        "seed": cfg.seed,
    })
    return 0


def cmd_train(doc: dict, out: Path, jobs: int, seed_override) -> int:
    _check_keys(doc, _TRAIN_KEYS - {"seed"}, {"seed", "seeds"}, "config")
    table = _parse_table(doc["table"])
    clip = doc["clip"]
    if clip is not None:
        clip = _as_float(clip, "clip")
    base = dict(
        k=_as_int(doc["k"], "k"),
        lam=_as_float(doc["lambda"], "lambda"),
        batch_size=_as_int(doc["batch_size"], "batch_size"),
        eta_init=_as_float(doc["eta_init"], "eta_init"),
        eta_min=_as_float(doc["eta_min"], "eta_min"),
        total_steps=_as_int(doc["steps"], "steps"),
        learning_rate=_as_float(doc["lr"], "lr"),
        momentum=_as_float(doc["momentum"], "momentum"),
        schedule=_as_str(doc["schedule"], "schedule"),
        encoder=_as_str(doc["encoder"], "encoder"),
        mlp_widths=tuple(_as_int(w, "mlp_widths[]")
                         for w in _as_list(doc["mlp_widths"], "mlp_widths")),
        shared_encoder=_as_bool(doc["shared_encoder"], "shared_encoder"),
        clip=clip,
        log_every=_as_int(doc["log_every"], "log_every"),
    )
    seeds = _resolve_seeds(doc, seed_override)
    try:
        cfgs = [TrainerConfig(seed=s, **base) for s in seeds]
        if base["shared_encoder"] and table.nx != table.ny:
            raise ValueError("shared encoder requires matching view domains")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if len(cfgs) == 1:
        return _train_once(table, cfgs[0], out)
    by_seed = dict(zip(seeds, cfgs))
    return _fan_out(lambda s, sub: _train_once(table, by_seed[s], sub),
                    seeds, out, jobs)


def _read_metrics(path: str) -> dict:
    needed = ("step", "objective_population", "principal_angle_max")
    try:
        with open(path, "r", newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read metrics file {path}: {exc}") from exc
    if not rows:
        raise ConfigError(f"metrics file {path} has no data rows")
    for col in needed:
        if col not in rows[0]:
            raise ConfigError(f"metrics file {path} missing column {col!r}")
    return {
        "step": [int(float(r["step"])) for r in rows],
        "objective": [float(r["objective_population"]) for r in rows],
        "angle": [float(r["principal_angle_max"]) for r in rows],
    }


def cmd_report(doc: dict, out: Path, jobs: int, seed_override) -> int:
    _check_keys(doc, {"inputs"}, set(), "config")
    inputs = _as_list(doc["inputs"], "inputs")
    if not inputs:
        raise ConfigError("inputs: need at least one metrics file")
    parsed = []
    for i, item in enumerate(inputs):
        _check_keys(item, {"path", "lambda"}, set(), f"inputs[{i}]")
        parsed.append((_as_float(item["lambda"], f"inputs[{i}].lambda"),
                       _as_str(item["path"], f"inputs[{i}].path")))
    groups = {}
    for lam, path in parsed:
        data = _read_metrics(path)
        groups.setdefault(lam, {"step": [], "neg_objective": [], "quality": []})
        groups[lam]["step"].extend(data["step"])
        groups[lam]["neg_objective"].extend([-v for v in data["objective"]])
        groups[lam]["quality"].extend([-v for v in data["angle"]])
    with open(out / "report.csv", "w", newline="\n") as fh:
        fh.write(f"# {_QUALITY_NOTE}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda", "step", "neg_objective", "quality"])
        for lam in sorted(groups):
            g = groups[lam]
            for s, no, q in zip(g["step"], g["neg_objective"], g["quality"]):
                writer.writerow([repr(float(lam)), s, repr(float(no)), repr(float(q))])
    summary = {"note": _QUALITY_NOTE, "groups": []}
    all_no, all_q = [], []
    for lam in sorted(groups):
        g = groups[lam]
        rho = stats.spearmanr(g["neg_objective"], g["quality"]).statistic
        summary["groups"].append({"lambda": lam, "rank_correlation": float(rho)})
        all_no.extend(g["neg_objective"])
        all_q.extend(g["quality"])
    summary["overall_rank_correlation"] = float(
        stats.spearmanr(all_no, all_q).statistic)
    _write_json(out / "summary.json", summary)
    return 0


_COMMANDS = {
    "oracle": cmd_oracle,
    "flow": cmd_flow,
    "stability": cmd_stability,
    "train": cmd_train,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="peira",
        description="Exact desk-scale laboratory for paired-encoder objectives.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="thread fan-out for seed lists")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    args = parser.parse_args(argv)
    try:
        doc = _load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](doc, out, args.jobs, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FlowDivergenceError, TrainingDivergedError,
            ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # contract: never a bare traceback
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
