"""Monte-Carlo harness: NMSE versus condition number and versus iteration.

Every trial draws a fresh ``(A, x, w)``; the trial seed is derived from
``(base_seed, kappa_index, trial)`` through :class:`numpy.random.SeedSequence`
so results do not depend on worker count or execution order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .engine import RunTrace, VampConfig, run
from .problem import BgParams, MatrixSpec, synthesize

ALGORITHMS = ("oracle-vamp", "em-vamp")
SWEEP_COLUMNS = ["kappa", "algo", "nmse_db_agg", "nmse_db_iqr", "diverged", "iters_mean"]
RESULT_SCHEMA = 1
DEFAULT_KAPPAS = (1.0, 10.0, 100.0, 1000.0, 10**3.5)


@dataclass(frozen=True)
class SweepSpec:
    """Experiment description; mirrors the JSON config accepted by the CLI."""

    M: int = 512
    N: int = 1024
    beta: float = 0.1
    mu: float = 0.0
    tau: float = 1.0
    snr_db: float = 40.0
    kappas: tuple[float, ...] = DEFAULT_KAPPAS
    algos: tuple[str, ...] = ALGORITHMS
    trials: int = 100
    base_seed: int = 0
    max_iters: int = 50
    aggregation: str = "median"
    vamp: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kappas", tuple(float(k) for k in self.kappas))
        object.__setattr__(self, "algos", tuple(self.algos))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.kappas:
            raise ValueError("condition-number grid is empty")
        bad = set(self.algos) - set(ALGORITHMS)
        if bad:
            raise ValueError(f"unknown algorithms {sorted(bad)}")
        if self.aggregation not in ("median", "mean"):
            raise ValueError("aggregation must be 'median' or 'mean'")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(**d)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["kappas"] = list(self.kappas)
        d["algos"] = list(self.algos)
        return d

    @property
    def params(self) -> BgParams:
        return BgParams(self.beta, self.mu, self.tau)

    def config_hash(self) -> str:
        d = self.as_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def vamp_config(self, algo: str, **overrides) -> VampConfig:
        kw = {"max_iters": self.max_iters, **self.vamp, **overrides}
        if algo == "oracle-vamp":
            kw.update(em_theta1=False, em_theta2=False)
        return VampConfig(**kw)


def trial_seed(base_seed: int, kappa_index: int, trial: int) -> int:
    return int(np.random.SeedSequence([base_seed, kappa_index, trial]).generate_state(1)[0])


def iters_to_within(nmse_curve, tol_db: float = 1.0) -> int:
    """First index after which the curve stays within ``tol_db`` of its last value.

    Index 0 is the initial point, so the result counts completed iterations.
    """
    c = np.asarray(nmse_curve, dtype=float)
    if c.size == 0:
        return 0
    outside = np.nonzero(~(np.abs(c - c[-1]) <= tol_db))[0]
    return 0 if outside.size == 0 else int(outside[-1]) + 1


def _curve(trace: RunTrace) -> np.ndarray:
    return np.concatenate([[trace.init_nmse_db], trace.nmse_db])


def _run_trial(args):
    spec, ki, t, overrides = args
    seed = trial_seed(spec.base_seed, ki, t)
    kappa = spec.kappas[ki]
    out = {"kappa_index": ki, "trial": t, "seed": seed}
    try:
        inst = synthesize(MatrixSpec(spec.M, spec.N, kappa, seed=seed), spec.params, spec.snr_db)
        for algo in spec.algos:
            tr = run(inst, spec.vamp_config(algo, **overrides))
            out[algo] = {
                "final_nmse_db": float(tr.final_nmse_db),
                "n_iter": tr.n_iter,
                "converged": tr.converged,
                "diverged": tr.diverged or not np.isfinite(tr.final_nmse_db),
                "curve": _curve(tr).tolist(),
            }
    except Exception as exc:  # recorded, the sweep continues
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def _map_trials(spec: SweepSpec, overrides: dict, kappa_indices=None):
    kis = range(len(spec.kappas)) if kappa_indices is None else kappa_indices
    jobs = [(spec, ki, t, overrides) for ki in kis for t in range(spec.trials)]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as ex:
            results = list(ex.map(_run_trial, jobs, chunksize=1))
    else:
        results = [_run_trial(j) for j in jobs]
    return sorted(results, key=lambda r: (r["kappa_index"], r["trial"]))


def _aggregate(vals_db: np.ndarray, how: str) -> float:
    if vals_db.size == 0:
        return float("nan")
    if how == "median":
        return float(np.median(vals_db))
    return float(10 * np.log10(np.mean(10 ** (vals_db / 10))))


@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    trials: list[dict] = field(default_factory=list)

    def row(self, kappa: float, algo: str) -> dict:
        for r in self.rows:
            if r["algo"] == algo and np.isclose(r["kappa"], kappa):
                return r
        raise KeyError((kappa, algo))

    def to_dict(self) -> dict:
        return {"schema": RESULT_SCHEMA, "rows": self.rows, "provenance": self.provenance,
                "trials": self.trials}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        if d.get("schema") != RESULT_SCHEMA:
            raise ValueError(f"unsupported result schema {d.get('schema')!r}")
        return cls(rows=d["rows"], provenance=d["provenance"], trials=d.get("trials", []))

    def __eq__(self, other):
        if not isinstance(other, SweepResult):
            return NotImplemented
        return json.dumps(self.to_dict(), sort_keys=True) == json.dumps(other.to_dict(),
                                                                       sort_keys=True)


def _provenance(spec: SweepSpec, results) -> dict:
    return {
        "config": spec.as_dict(),
        "config_hash": spec.config_hash(),
        "seeds": [r["seed"] for r in results],
        "code_version": __version__,
        "seed_policy": "SeedSequence([base_seed, kappa_index, trial]).generate_state(1)[0]",
    }


def sweep_condition(spec: SweepSpec) -> SweepResult:
    """Final NMSE per condition number and algorithm, aggregated over trials.

    ``nmse_db_agg`` is the dB median (or the linear mean expressed in dB when
    ``spec.aggregation == "mean"``); both aggregates are kept in each row.
    """
    results = _map_trials(spec, {})
    rows = []
    for ki, kappa in enumerate(spec.kappas):
        block = [r for r in results if r["kappa_index"] == ki]
        for algo in spec.algos:
            ok = [r[algo] for r in block if algo in r]
            errors = sum(1 for r in block if algo not in r)
            finite = np.array([o["final_nmse_db"] for o in ok if not o["diverged"]])
            diverged = errors + sum(o["diverged"] for o in ok)
            q25, q75 = np.percentile(finite, [25, 75]) if finite.size else (np.nan, np.nan)
            rows.append({
                "kappa": kappa,
                "algo": algo,
                "nmse_db_agg": _aggregate(finite, spec.aggregation),
                "nmse_db_iqr": float(q75 - q25),
                "diverged": int(diverged),
                "iters_mean": float(np.mean([o["n_iter"] for o in ok])) if ok else float("nan"),
                "nmse_db_median": _aggregate(finite, "median"),
                "nmse_db_linear_mean": _aggregate(finite, "mean"),
            })
    trials = [{k: v for k, v in r.items()} for r in results]
    for r in trials:
        for algo in spec.algos:
            if algo in r:
                r[algo] = {k: v for k, v in r[algo].items() if k != "curve"}
    return SweepResult(rows=rows, provenance=_provenance(spec, results), trials=trials)


@dataclass
class TraceResult:
    kappa: float
    curves: dict            # algo -> (trials, iters + 1) array, NaN-padded after divergence
    median: dict            # algo -> (iters + 1,) median dB curve
    iters_to_1db: dict      # algo -> per-trial iteration counts
    provenance: dict = field(default_factory=dict)

    def median_iters_to_1db(self, algo: str) -> float:
        return float(np.median(self.iters_to_1db[algo]))


def trace_iterations(spec: SweepSpec, kappa_index: int = 0, tol_db: float = 1.0) -> TraceResult:
    """NMSE-versus-iteration curves at one condition number over a fixed budget."""
    results = _map_trials(spec, {"stop_tol": 0.0}, [kappa_index])
    L = spec.max_iters + 1
    curves, med, hit = {}, {}, {}
    for algo in spec.algos:
        arr = np.full((len(results), L), np.nan)
        its = []
        for i, r in enumerate(results):
            if algo not in r:
                continue
            c = np.asarray(r[algo]["curve"], dtype=float)
            arr[i, : c.size] = c
            its.append(iters_to_within(c, tol_db) if not r[algo]["diverged"] else L)
        curves[algo] = arr
        with np.errstate(all="ignore"):
            med[algo] = np.nanmedian(arr, axis=0) if np.isfinite(arr).any() else arr[0]
        hit[algo] = np.array(its, dtype=int)
    return TraceResult(kappa=spec.kappas[kappa_index], curves=curves, median=med,
                       iters_to_1db=hit, provenance=_provenance(spec, results))


def _open(path, mode="w"):
    try:
        return open(path, mode, newline="")
    except OSError as exc:
        raise OSError(f"cannot open {path}: {exc.strerror}") from exc


def report(result: SweepResult, out_dir, stem: str = "sweep") -> dict:
    """Write ``<stem>.csv`` (plot-ready rows) and ``<stem>.json`` (full provenance)."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    with _open(csv_path) as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for row in result.rows:
            w.writerow([repr(float(row[c])) if isinstance(row[c], float) else row[c]
                        for c in SWEEP_COLUMNS])
    with _open(json_path) as fh:
        json.dump(result.to_dict(), fh, indent=1, sort_keys=True)
    return {"csv": csv_path, "json": json_path}


def read_result(path) -> SweepResult:
    with _open(path, "r") as fh:
        return SweepResult.from_dict(json.load(fh))


def report_trace(result: TraceResult, out_dir, stem: str = "trace") -> dict:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    with _open(csv_path) as fh:
        w = csv.writer(fh)
        w.writerow(["kappa", "algo", "iter", "nmse_db_median"])
        for algo, curve in result.median.items():
            for k, v in enumerate(curve):
                w.writerow([repr(float(result.kappa)), algo, k, repr(float(v))])
    payload = {
        "schema": RESULT_SCHEMA,
        "kappa": result.kappa,
        "median": {a: [float(v) for v in c] for a, c in result.median.items()},
        "iters_to_1db": {a: v.tolist() for a, v in result.iters_to_1db.items()},
        "median_iters_to_1db": {a: result.median_iters_to_1db(a) for a in result.median},
        "provenance": result.provenance,
    }
    with _open(json_path) as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return {"csv": csv_path, "json": json_path}
