"""Assemble targets, kernels and teleport machinery from an :class:`ExperimentConfig` and run them."""

from __future__ import annotations

import importlib
import math
import subprocess
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Any, Callable

import numpy as np

from kickkac import __version__
from kickkac.config import TELEPORTING, ExperimentConfig
from kickkac.diagnostics import (EssReport, TraceSummary, grid_tv, half_plane, mode_weights,
                                 regular_edges)
from kickkac.kernels import KernelConfig, make_kernel, tune_step_size
from kickkac.sampler import (ArrayRecorder, ChainSummary, EvalCounter, KktState,
                             RejectionStats, base_chain_step, counted, gkkt_step, initial_anchor,
                             kkt_step, memoryless_kkt_step, mh_gkkt_step, rejection_sample_pi_c,
                             run_chain)
from kickkac.targets import (AlphaFunction, Box, CriticalRegion, TargetDensity, bimodal_target,
                             envelope_region, fifteen_mode_target, ginzburg_landau_target,
                             level_set_region, load_mode_centers, load_sv_observations,
                             stochastic_volatility_target, uniform_log_density, QUARTIC_CENTER)

SCHEMA_VERSION = 1

# plotting windows for the gridded histograms of the two planar experiments
HISTOGRAM_WINDOWS = {"bimodal": (-15.0, 15.0), "fifteen_mode": (-12.0, 12.0)}


def build_target(cfg: ExperimentConfig) -> TargetDensity:
    name = cfg.experiment
    if name == "bimodal":
        return bimodal_target()
    if name == "fifteen_mode":
        path = cfg["experiment.modes_file"]
        return fifteen_mode_target(None if path is None else load_mode_centers(path))
    if name == "stoch_vol":
        path = cfg["experiment.observations_file"]
        return stochastic_volatility_target(None if path is None else load_sv_observations(path))
    if name == "ginzburg_landau":
        return ginzburg_landau_target()
    module, _, attr = cfg["experiment.target"].partition(":")
    target = getattr(importlib.import_module(module), attr)()
    if not isinstance(target, TargetDensity):
        raise TypeError(f"{cfg['experiment.target']} did not return a TargetDensity")
    return target


def default_start(cfg: ExperimentConfig, target: TargetDensity) -> np.ndarray:
    start = cfg["run.start"]
    if start is not None:
        x = np.asarray(start, float)
        if x.size != target.dim:
            raise ValueError(f"run.start has {x.size} entries, target has dimension {target.dim}")
        return x
    if cfg.experiment == "fifteen_mode":
        # the Gaussian centre farthest from the light-tailed component
        means = _mode_centres(cfg)
        return means[int(np.argmax(np.sum((means - QUARTIC_CENTER) ** 2, axis=1)))].copy()
    return np.zeros(target.dim)


def _mode_centres(cfg: ExperimentConfig) -> np.ndarray:
    from kickkac.targets import default_fifteen_modes
    path = cfg["experiment.modes_file"]
    return default_fifteen_modes() if path is None else load_mode_centers(path)


def kernel_config(cfg: ExperimentConfig, section: str, kind: str | None = None) -> KernelConfig:
    return KernelConfig(kind or cfg[f"{section}.kind"], sigma=cfg[f"{section}.sigma"],
                        gamma=cfg[f"{section}.gamma"], delta_t=cfg[f"{section}.delta_t"],
                        n_hmc=cfg[f"{section}.n_hmc"])


def level_alpha(target: TargetDensity, threshold: float, width: float):
    """Teleport probability rising with ``-log pi`` around ``threshold``.

    ``width = 0`` gives the indicator of the level set; otherwise
    ``alpha = logistic((-log pi - threshold) / width)``. Returns the alpha
    function and the log-density of ``alpha * pi`` (one target evaluation).
    """
    logp = target.log_density_unnorm
    if width == 0.0:
        region = level_set_region(target, threshold)
        return AlphaFunction.from_region(region), target.restricted(region).log_density_unnorm

    def log_alpha(lp):
        return -float(np.logaddexp(0.0, (lp + threshold) / width))

    def raw(x):
        return math.exp(log_alpha(float(logp(x))))

    def log_tilted(x):
        lp = float(logp(x))
        return lp + log_alpha(lp)

    return AlphaFunction(raw, f"logistic((-log pi - {threshold:g}) / {width:g})"), log_tilted


@dataclass
class Prepared:
    cfg: ExperimentConfig
    target: TargetDensity
    counter: EvalCounter
    stepper: Callable[[KktState, np.random.Generator], KktState]
    initial: KktState
    region: Any = None
    rejection_stats: RejectionStats | None = None
    tuned: dict = field(default_factory=dict)


def prepare(cfg: ExperimentConfig, tune_rng: np.random.Generator) -> Prepared:
    """Build the stepper and initial state; step sizes with ``tune_accept`` set are tuned first."""
    raw = build_target(cfg)
    target, counter = counted(raw)
    start = default_start(cfg, raw)
    sampler = cfg.sampler
    base_kind = sampler if sampler in ("rwm", "mala", "hmc") else None
    base_cfg = kernel_config(cfg, "base", base_kind)
    tuned: dict = {}
    ta = cfg["base.tune_accept"]
    if ta is not None:
        base_cfg, rate = tune_step_size(raw, base_cfg, start, tune_rng, ta)
        tuned["base"] = _tuned_entry(base_cfg, rate)
    base = make_kernel(target, base_cfg)

    if sampler in ("rwm", "mala", "hmc"):
        return Prepared(cfg, target, counter, partial(base_chain_step, base),
                        KktState(start, start), tuned=tuned)
    if sampler == "mh_gkkt":
        return Prepared(cfg, target, counter, partial(mh_gkkt_step, base),
                        KktState(start, start), tuned=tuned)

    if sampler == "kkt_memoryless":
        lo, hi = cfg["teleport.box_lo"], cfg["teleport.box_hi"]
        box = Box.cube(lo, hi, raw.dim)
        region = envelope_region(target, uniform_log_density(box),
                                 math.log(cfg["teleport.envelope_c"]), box)
        stats = RejectionStats()

        def sample_pi_c(rng):
            return rejection_sample_pi_c(region, target, rng, stats=stats)[0]

        stepper = partial(memoryless_kkt_step, base, region, sample_pi_c)
        return Prepared(cfg, target, counter, stepper, KktState(start, start), region, stats,
                        tuned)

    threshold = cfg["teleport.threshold"]
    width = cfg["teleport.alpha_width"] if sampler == "gkkt" else 0.0
    alpha, log_tilted = level_alpha(target, threshold, width)
    q_target = TargetDensity(raw.dim, log_tilted, None, f"{raw.label}|teleport")
    q_cfg = kernel_config(cfg, "teleport")
    if q_cfg.kind != "rwm":
        # gradient-based teleport kernels see the target gradient inside the region
        q_target = replace(q_target, grad_log_density=target.grad_log_density)
    anchor_region = CriticalRegion(lambda x: alpha(x) > 0.0, "alpha > 0")
    anchor = initial_anchor(anchor_region, tune_rng, start)
    ta = cfg["teleport.tune_accept"]
    if ta is not None:
        raw_alpha, raw_tilted = level_alpha(raw, threshold, width)
        tune_target = TargetDensity(raw.dim, raw_tilted, raw.grad_log_density, "tune")
        q_cfg, rate = tune_step_size(tune_target, q_cfg, anchor, tune_rng, ta)
        tuned["teleport"] = _tuned_entry(q_cfg, rate)
    q_kernel = make_kernel(q_target, q_cfg)
    if sampler == "kkt":
        region = level_set_region(target, threshold)
        stepper = partial(kkt_step, base, q_kernel, region)
    else:
        region = alpha
        stepper = partial(gkkt_step, base, q_kernel, alpha)
    return Prepared(cfg, target, counter, stepper, KktState(anchor, anchor), region, None, tuned)


def _tuned_entry(kc: KernelConfig, rate: float) -> dict:
    attr = {"rwm": "sigma", "mala": "gamma", "hmc": "delta_t"}[kc.kind]
    return {"kind": kc.kind, attr: getattr(kc, attr), "final_round_accept": rate}


def streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for tuning and for the chain itself."""
    tune, chain = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(tune), np.random.default_rng(chain)


class TraceWriter:
    """CSV sink: ``step,teleported,accepted,x0,x1,...`` with shortest round-trip floats."""

    def __init__(self, path: Path, dim: int):
        self.fh = open(path, "w", newline="\n")
        self.fh.write("step,teleported,accepted," + ",".join(f"x{i}" for i in range(dim)) + "\n")

    def __call__(self, state: KktState) -> None:
        y = np.asarray(state.y, float).tolist()
        self.fh.write(f"{state.step_index},{int(state.teleported)},{int(state.accepted)},"
                      + ",".join(map(repr, y)) + "\n")

    def close(self) -> None:
        self.fh.close()


@dataclass
class RunResult:
    prepared: Prepared
    chain: ChainSummary
    samples: np.ndarray
    teleported: np.ndarray
    accepted: np.ndarray
    burn_in_summary: ChainSummary | None


def run_experiment(cfg: ExperimentConfig, trace_path: Path | None = None) -> RunResult:
    """Burn in, then record ``n_steps`` states (and stream them to ``trace_path``)."""
    tune_rng, rng = streams(cfg.seed)
    prep = prepare(cfg, tune_rng)
    state = prep.initial
    burn = None
    if cfg["run.burn_in"] > 0:
        burn = run_chain(prep.stepper, cfg["run.burn_in"], state, rng, counter=prep.counter)
        state = burn.final
    if prep.rejection_stats is not None:
        prep.rejection_stats.draws = prep.rejection_stats.rejections = 0
        prep.rejection_stats.accepts = 0
    n = cfg["run.n_steps"]
    rec = ArrayRecorder(n, prep.target.dim)
    writer = TraceWriter(trace_path, prep.target.dim) if trace_path is not None else None

    def sink(s):
        rec(s)
        if writer is not None:
            writer(s)

    try:
        chain = run_chain(prep.stepper, n, state, rng, sink, prep.counter)
    finally:
        if writer is not None:
            writer.close()
    return RunResult(prep, chain, rec.y, rec.teleported, rec.accepted, burn)


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"kickkac-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"kickkac-{__version__}"


def occupancy(cfg: ExperimentConfig, prep: Prepared, samples: np.ndarray) -> dict | None:
    """Mode weights: half-planes for the bimodal target, components for the 15-mode mixture."""
    if cfg.experiment == "bimodal":
        w = mode_weights(samples, [half_plane(0, True), half_plane(0, False)])
        return {"regions": ["x0 > 0", "x0 <= 0"], "weights": w.tolist()}
    if cfg.experiment == "fifteen_mode":
        target = build_target(cfg)
        labels = target.component_labels(samples)
        w = np.bincount(labels, minlength=target.n_components) / labels.size
        return {"regions": ["quartic"] + [f"gaussian_{i}" for i in range(1, 15)],
                "weights": w.tolist()}
    return None


def histogram_edges(cfg: ExperimentConfig) -> list[np.ndarray] | None:
    window = HISTOGRAM_WINDOWS.get(cfg.experiment)
    if window is None:
        return None
    bins = cfg["output.histogram_bins"]
    return regular_edges([window[0]] * 2, [window[1]] * 2, [bins] * 2)


def summarize(result: RunResult) -> dict:
    cfg = result.prepared.cfg
    ch = result.chain
    ts = TraceSummary.from_flags(result.teleported, result.accepted, ch.density_evals,
                                 ch.grad_evals, cfg.seed)
    out: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "build_id": build_id(),
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "trace_summary": ts.to_json(),
        "tuned": result.prepared.tuned,
        "wall_time_seconds": ch.wall_time,
    }
    if result.samples.shape[0] >= 100:
        rep = EssReport.from_trace(result.samples, ch.density_evals / ch.n_steps,
                                   ch.grad_evals / ch.n_steps)
        out["ess"] = rep.to_json()
    occ = occupancy(cfg, result.prepared, result.samples)
    if occ is not None:
        out["mode_weights"] = occ
    edges = histogram_edges(cfg)
    if edges is not None:
        out["grid_tv"] = grid_tv(result.samples, build_target(cfg).log_density_unnorm, edges)
    stats = result.prepared.rejection_stats
    if stats is not None:
        out["rejection"] = {"draws": stats.draws, "rejections": stats.rejections,
                            "accepts": stats.accepts,
                            "mean_rejections_per_accept": stats.mean_rejections_per_accept}
    return out
