"""Experiment orchestration: dispatch, parallel seeds, files and manifest."""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from .config import ConfigError, RunConfig
from .io import aggregate, emit_csv, emit_plot

__all__ = ["ExperimentResult", "LockError", "run_experiment", "resolve_out_dir", "OUT_ENV"]

OUT_ENV = "MSSA_LAB_OUT"
LOCK_NAME = ".lock"
MANIFEST = "manifest.json"


class LockError(RuntimeError):
    pass


@dataclass
class ExperimentResult:
    out_dir: Path
    manifest: dict
    status: str = "ok"
    failure: str | None = None
    files: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def resolve_out_dir(config: RunConfig) -> Path:
    if config.out_dir is not None:
        return Path(config.out_dir)
    root = Path(os.environ.get(OUT_ENV, "mssa-lab-out"))
    return root / f"{config.kind}-{config.config_hash()[:12]}"


# problem builders (also used inside worker processes) --------------------

_PROBLEM_CACHE: dict[str, object] = {}


def _cache_key(*parts) -> str:
    return json.dumps(parts, sort_keys=True, default=str)


def _hyperclean_from_idx(inst: dict):
    from ..bilevel.hyperclean import HypercleanSpec
    from .idx import load_idx

    images, labels = load_idx(inst["images"], inst["labels"])
    X = images.reshape(images.shape[0], -1)
    n_classes = int(inst.get("n_classes", 10))
    sizes = [int(inst.get(k, 10000)) for k in ("n_tr", "n_val", "n_test")]
    if sum(sizes) > X.shape[0]:
        raise ConfigError(f"requested {sum(sizes)} samples but the IDX files hold {X.shape[0]}")
    rng = np.random.default_rng(int(inst.get("data_seed", 0)))
    perm = rng.permutation(X.shape[0])
    a, b, c = sizes
    tr, va, te = perm[:a], perm[a : a + b], perm[a + b : a + b + c]
    y_tr = labels[tr].copy()
    n_flip = int(round(float(inst.get("flip_frac", 0.4)) * a))
    flipped = rng.choice(a, size=n_flip, replace=False)
    # a corrupted label is drawn uniformly from the other classes
    y_tr[flipped] = (y_tr[flipped] + rng.integers(1, n_classes, n_flip)) % n_classes
    clean = np.ones(a, dtype=bool)
    clean[flipped] = False
    return HypercleanSpec(
        X[tr], y_tr, X[va], labels[va], X[te], labels[te], clean,
        n_classes=n_classes, mu=float(inst.get("mu", 0.01)), model=inst.get("model", "linear"),
        hidden=int(inst.get("hidden", 16)),
    )


def build_soba_problem(inst: dict, paper_scale: bool = False):
    key = _cache_key("soba", inst, paper_scale)
    if key in _PROBLEM_CACHE:
        return _PROBLEM_CACHE[key]
    from ..bilevel import hyperclean_problem, make_hyperclean_data, quadratic_bilevel, random_quadratic_spec

    kind = inst.get("problem", "hyperclean")
    if kind == "quadratic":
        spec = random_quadratic_spec(
            int(inst.get("dim_x", 4)), int(inst.get("dim_y", 4)),
            np.random.default_rng(int(inst.get("data_seed", 7))), sigma=float(inst.get("sigma", 1.0)),
        )
        prob = quadratic_bilevel(spec)
    elif kind == "hyperclean":
        if paper_scale:
            if "images" not in inst or "labels" not in inst:
                raise ConfigError("paper-scale hyper-cleaning needs instance.images and instance.labels (IDX files)")
            spec = _hyperclean_from_idx(inst)
        else:
            spec = make_hyperclean_data(
                int(inst.get("n_tr", 500)), int(inst.get("n_val", 500)), int(inst.get("n_test", 500)),
                d=int(inst.get("d", 10)), flip_frac=float(inst.get("flip_frac", 0.4)),
                separation=float(inst.get("separation", 2.5)), seed=int(inst.get("data_seed", 0)),
                mu=float(inst.get("mu", 0.01)), model=inst.get("model", "linear"), hidden=int(inst.get("hidden", 16)),
            )
        prob = hyperclean_problem(spec)
    else:
        raise ConfigError(f"unknown soba problem {kind!r}; expected 'quadratic' or 'hyperclean'")
    _PROBLEM_CACHE[key] = prob
    return prob


def build_dist_problem(inst: dict, paper_scale: bool = False):
    key = _cache_key("dist", inst, paper_scale)
    if key in _PROBLEM_CACHE:
        return _PROBLEM_CACHE[key]
    from ..distlearn import SVMProblem, gen_svm_data

    d, N = (200, 10) if paper_scale else (int(inst.get("d", 20)), int(inst.get("N", 4)))
    data = gen_svm_data(d, N, int(inst.get("M", 200)), int(inst.get("data_seed", 0)), float(inst.get("noise", 0.2)))
    prob = SVMProblem(data, float(inst.get("lam", 0.5)))
    _PROBLEM_CACHE[key] = prob
    return prob


def _soba_config(schedule: dict, variant: str, K: int, seed: int):
    from ..bilevel import SOBAConfig

    a = float(schedule.get("alpha_scale", 100.0))
    b = float(schedule.get("beta_scale", 1.0))
    bs = int(schedule.get("batch_size", 100))
    if variant == "ST":
        return SOBAConfig.st(a, b, exponent=float(schedule.get("exponent", 0.5)), batch_size=bs, K=K, seed=seed)
    if variant == "TT":
        ex = tuple(schedule.get("tt_exponents", (0.6, 0.4)))
        return SOBAConfig.tt(a, b, exponents=ex, batch_size=bs, K=K, seed=seed)
    raise ConfigError(f"unknown SOBA variant {variant!r}")


def _dist_config(schedule: dict, K: int, seed: int, stride):
    from ..distlearn import DistConfig

    return DistConfig.inverse_k(
        float(schedule.get("alpha_scale", 4.0)), float(schedule.get("beta_scale", 4.0)),
        float(schedule.get("offset", 10.0)), K=K, seed=seed,
        batch_size=int(schedule.get("batch_size", 10)), record_stride=stride,
    )


# per-seed workers ------------------------------------------------------------

def _rate_seed(args):
    from ..verify.rates import rate_errors, rate_setup

    inst, schedule, horizons, seed = args
    st = rate_setup(inst.get("name", "strongly-monotone"), float(inst.get("sigma", 0.1)), schedule.get("scale"))
    try:
        errs = rate_errors(st["system"], st["noise"], st["schedule_for"], st["metric"], horizons, seed,
                           running_average=st["running_average"])
        return {"K": list(horizons), "error": errs}, None
    except FloatingPointError as err:
        return None, str(err)


def _soba_seed(args):
    from ..bilevel import soba_run

    inst, schedule, variant, K, stride, paper_scale, seed = args
    prob = build_soba_problem(inst, paper_scale)
    traj = soba_run(prob, _soba_config(schedule, variant, K, seed), record_stride=stride, metrics=[])
    extra = {}
    if hasattr(prob, "accuracies") and traj.final_state is not None:
        extra = prob.accuracies(traj.final_state.x, traj.final_state.ys[0])
    return dict(traj.columns), extra, traj.failure


def _dist_seed(args):
    from ..distlearn import CompressorSpec, run_distributed

    inst, schedule, p, K, stride, paper_scale, seed = args
    prob = build_dist_problem(inst, paper_scale)
    traj = run_distributed(prob, CompressorSpec(p=float(p)), _dist_config(schedule, K, seed, stride))
    return dict(traj.columns), traj.failure


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


# kind handlers -----------------------------------------------------------

class _Writer:
    def __init__(self, out: Path, plots: bool):
        self.out = out
        self.plots = plots
        self.files: list[str] = []
        self.plot_errors: list[str] = []

    def csv(self, rel, data):
        emit_csv(data, self.out / rel)
        self.files.append(rel)

    def json(self, rel, obj):
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
        self.files.append(rel)

    def plot(self, rel, data, kind, **kw):
        # plots are conveniences: a rendering problem never fails a run
        if not self.plots:
            return
        try:
            emit_plot(data, kind, self.out / rel, **kw)
            self.files.append(rel)
        except (ValueError, OSError) as err:
            self.plot_errors.append(f"{rel}: {err}")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    return str(o)


def _check_single_horizon(config: RunConfig) -> int:
    if len(config.horizons) != 1:
        raise ConfigError(f"{config.kind} runs take a single horizon K, got {list(config.horizons)}")
    return config.horizons[0]


def _validate(config: RunConfig) -> None:
    if not config.seeds:
        raise ConfigError("seed list is empty")
    if config.kind == "verify-rates":
        from ..verify.rates import RATE_SETUPS

        if config.instance.get("name", "strongly-monotone") not in RATE_SETUPS:
            raise ConfigError(f"verify-rates instance.name must be one of {RATE_SETUPS}")
        if len(config.horizons) < 2:
            raise ConfigError("verify-rates needs at least two horizons")
    elif config.kind == "soba":
        _check_single_horizon(config)
        for v in _variants(config):
            if v not in ("ST", "TT"):
                raise ConfigError(f"unknown SOBA variant {v!r}")
        if config.instance.get("problem", "hyperclean") not in ("quadratic", "hyperclean"):
            raise ConfigError("soba instance.problem must be 'quadratic' or 'hyperclean'")
        if config.paper_scale and config.instance.get("problem", "hyperclean") == "hyperclean":
            if "images" not in config.instance or "labels" not in config.instance:
                raise ConfigError("paper-scale hyper-cleaning needs instance.images and instance.labels (IDX files)")
    elif config.kind == "distlearn":
        _check_single_horizon(config)
        rates = _rates(config)
        if not rates or any(not (0 < p <= 1) for p in rates):
            raise ConfigError(f"compression rates must lie in (0, 1], got {rates}")
    elif config.kind == "check-assumptions":
        if config.instance.get("name", "strongly-monotone") not in ("strongly-monotone", "primitive", "random"):
            raise ConfigError("check-assumptions instance.name must be strongly-monotone, primitive or random")


def _variants(config):
    s = config.schedule
    v = s.get("variants", s.get("variant", "ST"))
    return [v] if isinstance(v, str) else list(v)


def _rates(config):
    r = config.schedule.get("rates", config.schedule.get("p", [1.0]))
    return [float(r)] if isinstance(r, (int, float)) else [float(p) for p in r]


def _run_rates(config, w: _Writer, workers):
    from ..verify.rates import estimate_rate_slope

    hs = list(config.horizons)
    results = _map(_rate_seed, [(config.instance, config.schedule, hs, s) for s in config.seeds], workers)
    failures = [f for _, f in results if f]
    runs = [r for r, f in results if not f]
    for seed, (cols, fail) in zip(config.seeds, results):
        if cols is not None:
            w.csv(f"seed-{seed}.csv", cols)
    summary = {}
    if runs:
        agg = aggregate(runs, key="K")
        w.csv("aggregate.csv", agg)
        fit = estimate_rate_slope(list(zip(agg["K"], agg["error_mean"])), float(config.schedule.get("discard_frac", 0.2)))
        w.json("ratefit.json", fit.to_dict())
        w.plot("rate.svg", {"K": agg["K"], "error_mean": agg["error_mean"]}, "loglog-rate", fit=fit,
               title=f"{config.instance.get('name', 'strongly-monotone')} rate")
        summary = {"slope": fit.slope, "intercept": fit.intercept, "n_runs": len(runs)}
    return summary, "; ".join(failures) or None


def _run_soba(config, w: _Writer, workers):
    K = _check_single_horizon(config)
    summary, failures, curves = {}, [], {}
    for variant in _variants(config):
        jobs = [(config.instance, config.schedule, variant, K, config.record_stride, config.paper_scale, s)
                for s in config.seeds]
        results = _map(_soba_seed, jobs, workers)
        runs = []
        accs = []
        for seed, (cols, acc, fail) in zip(config.seeds, results):
            if cols:
                w.csv(f"{variant}/seed-{seed}.csv", cols)
            if fail:
                failures.append(f"{variant} seed {seed}: {fail}")
            else:
                runs.append(cols)
                accs.append(acc)
        if not runs:
            continue
        agg = aggregate(runs)
        w.csv(f"{variant}/aggregate.csv", agg)
        curves.setdefault("k", agg["k"])
        curves[variant] = agg["upper_value_mean"]
        entry = {"final_upper_value_mean": agg["upper_value_mean"][-1], "n_runs": len(runs)}
        for key in sorted({k for a in accs for k in a}):
            entry[f"{key}_mean"] = math.fsum(a[key] for a in accs) / len(accs)
        summary[variant] = entry
    if len(curves) > 1 and all(len(v) == len(curves["k"]) for v in curves.values()):
        w.plot("upper_value.svg", curves, "loss-curve", title="upper-level objective")
    return summary, "; ".join(failures) or None


def _run_dist(config, w: _Writer, workers):
    K = _check_single_horizon(config)
    summary, failures = {}, []
    gcurves, mcurves = {}, {}
    prob = build_dist_problem(config.instance, config.paper_scale)
    from ..distlearn import dist_metrics

    init = dist_metrics(prob, np.zeros(prob.dim), [np.zeros(prob.dim)] * prob.n_nodes)
    for p in _rates(config):
        tag = f"p-{p:g}"
        jobs = [(config.instance, config.schedule, p, K, config.record_stride, config.paper_scale, s)
                for s in config.seeds]
        results = _map(_dist_seed, jobs, workers)
        runs = []
        for seed, (cols, fail) in zip(config.seeds, results):
            if cols:
                w.csv(f"{tag}/seed-{seed}.csv", cols)
            if fail:
                failures.append(f"{tag} seed {seed}: {fail}")
            else:
                runs.append(cols)
        if not runs:
            continue
        agg = aggregate(runs)
        w.csv(f"{tag}/aggregate.csv", agg)
        gcurves.setdefault("k", agg["k"])
        mcurves.setdefault("k", agg["k"])
        gcurves[tag] = agg["grad_norm_sq_mean"]
        mcurves[tag] = agg["momentum_bias_mean"]
        g, m = agg["grad_norm_sq_mean"][-1], agg["momentum_bias_mean"][-1]
        summary[tag] = {
            "final_grad_norm_sq_mean": g,
            "final_momentum_bias_mean": m,
            "grad_norm_sq_drop": init["grad_norm_sq"] / g if g > 0 else math.inf,
            "momentum_bias_drop": init["momentum_bias"] / m if m > 0 else math.inf,
            "comm_coords_per_round_node": agg["comm_coords_mean"][-1] / (agg["k"][-1] * prob.n_nodes),
        }
    summary["initial"] = init
    w.plot("grad_norm_sq.svg", gcurves, "loss-curve", title="gradient norm squared")
    w.plot("momentum_bias.svg", mcurves, "loss-curve", title="momentum bias")
    return summary, "; ".join(failures) or None


def _run_assumptions(config, w: _Writer, workers):
    from ..core import GaussianNoise
    from ..verify import (
        bundled_primitive,
        bundled_strongly_monotone,
        check_assumptions,
        make_linear_instance,
        random_linear_spec,
    )

    inst = config.instance
    name = inst.get("name", "strongly-monotone")
    seed = config.seeds[0]
    if name == "strongly-monotone":
        spec = bundled_strongly_monotone()
    elif name == "primitive":
        spec = bundled_primitive()
    else:
        dims = tuple(int(d) for d in inst.get("dims", (4, 4, 4)))
        spec = random_linear_spec(dims, np.random.default_rng(int(inst.get("data_seed", 0))),
                                  regime=inst.get("regime", "strongly_monotone"))
    system = make_linear_instance(spec, name)
    noise = GaussianNoise(float(inst.get("sigma", 0.1)), float(inst.get("omega", 0.0)), float(inst.get("bias", 0.0)))
    report = check_assumptions(
        system, noise, spec=spec, n_pairs=int(inst.get("n_pairs", 2000)), n_probes=int(inst.get("n_probes", 8)),
        n_samples=int(inst.get("n_samples", 10000)), seed=seed,
    )
    w.json("assumptions.json", report.to_dict())
    return {"passed": report.passed, "verdicts": report.verdicts}, None


_HANDLERS = {
    "verify-rates": _run_rates,
    "soba": _run_soba,
    "distlearn": _run_dist,
    "check-assumptions": _run_assumptions,
}


def _clear_previous(out: Path) -> None:
    """Remove outputs of an earlier run so the manifest stays complete;
    refuse to touch files that no manifest accounts for."""
    prev = out / MANIFEST
    owned = set()
    if prev.is_file():
        try:
            owned = set(json.loads(prev.read_text()).get("files", [])) | {MANIFEST}
        except (ValueError, OSError):
            owned = set()
    foreign = []
    for p in out.rglob("*"):
        if p.is_file() and p.name != LOCK_NAME:
            rel = p.relative_to(out).as_posix()
            if rel not in owned:
                foreign.append(rel)
    if foreign:
        raise ConfigError(f"output directory {out} holds files from no known run: {sorted(foreign)[:5]}")
    for rel in owned:
        (out / rel).unlink(missing_ok=True)


def run_experiment(config: RunConfig, *, workers: int = 1) -> ExperimentResult:
    """Validate, run and persist one experiment.

    Raises :class:`ConfigError` for invalid configurations (nothing is
    computed) and :class:`LockError` when another writer holds the output
    directory. Numerical failures yield ``status == "failed"`` with partial
    outputs and a failure record in the manifest.
    """
    _validate(config)
    out = resolve_out_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as err:
        raise LockError(f"{out} is locked by another run ({lock})") from err
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        _clear_previous(out)
        writer = _Writer(out, config.emit_plots)
        t0 = time.perf_counter()
        failure = None
        try:
            summary, failure = _HANDLERS[config.kind](config, writer, workers)
        except FloatingPointError as err:
            summary, failure = {}, str(err)
        wall = time.perf_counter() - t0
        files = sorted(writer.files) + [MANIFEST]
        manifest = {
            "kind": config.kind,
            "config_hash": config.config_hash(),
            "config": config.canonical(),
            "version": __version__,
            "wall_time_s": wall,
            "status": "failed" if failure else "ok",
            "failure": failure,
            "summary": summary,
            "plot_errors": writer.plot_errors,
            "files": files,
        }
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    finally:
        lock.unlink(missing_ok=True)
    return ExperimentResult(out, manifest, manifest["status"], failure, files)
