"""Monte Carlo orchestration: chunked, order-deterministic, optionally multi-process.

Paths are split into fixed-size chunks whose composition does not depend on
the worker count.  Each chunk is integrated as one batch and its results are
merged in chunk order, so aggregates are bitwise identical for any number of
workers.
"""

from __future__ import annotations

import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import Collector
from .solver import BlowUpError, Problem, integrate


log = logging.getLogger(__name__)


class EnsembleError(RuntimeError):
    """Too many paths blew up."""


@dataclass(frozen=True)
class EnsembleConfig:
    n_paths: int
    seed: int = 0
    workers: int = 1
    chunk_size: int = 32
    max_blowup_fraction: float = 1e-3

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be at least 1")


@dataclass
class EnsembleResult:
    path_ids: np.ndarray
    per_path: dict
    series: dict
    blown: list = field(default_factory=list)
    elapsed: float = 0.0
    max_abs: float = 0.0

    @property
    def n_ok(self) -> int:
        return int(self.path_ids.size)


def _run_chunk(problem: Problem, u0, seed: int, ids, prototypes):
    """Integrate one chunk, dropping paths that blow up and retrying the rest."""
    ids = np.asarray(ids)
    blown = []
    stats: dict = {}
    while ids.size:
        observers = [p.fresh() for p in prototypes]
        streams = problem.streams(seed, ids)
        try:
            integrate(problem, np.tile(u0, (ids.size, 1)), streams, observers, ids, stats)
        except BlowUpError as err:
            blown.extend((int(i), err.step, err.cell) for i in err.path_ids)
            ids = np.setdiff1d(ids, err.path_ids)
            continue
        return ids, [ob.results() for ob in observers], blown, stats.get("max_abs", 0.0)
    return ids, None, blown, 0.0


def _merge(prototypes, chunks):
    per_path = {p.name: {} for p in prototypes}
    series = {p.name: {} for p in prototypes}
    for results in chunks:
        if results is None:
            continue
        for proto, (pp, ss) in zip(prototypes, results):
            for k, v in pp.items():
                per_path[proto.name].setdefault(k, []).append(v)
            for k, v in ss.items():
                cur = series[proto.name].get(k)
                series[proto.name][k] = v if cur is None else cur.merge(v)
    for name in per_path:
        per_path[name] = {k: np.concatenate(v, axis=0) for k, v in per_path[name].items()}
    return per_path, series


def _progress_line(done: int, total: int, start: float) -> str:
    el = time.monotonic() - start
    eta = el / done * (total - done) if done else math.nan
    return f"[stochfv] paths {done}/{total}  elapsed {el:.1f}s  eta {eta:.1f}s"


def run_ensemble(econfig: EnsembleConfig, problem: Problem, u0_cells, observers=(), progress=None) -> EnsembleResult:
    """Run ``n_paths`` paths and aggregate every observer's results.

    ``observers`` are prototypes: each chunk works on ``fresh()`` copies.
    ``progress`` is a writable stream (or True for stderr) receiving status lines.
    """
    for ob in observers:
        if not isinstance(ob, Collector):
            raise TypeError("ensemble observers must be Collector instances")
    if progress is True:
        progress = sys.stderr
    u0 = np.asarray(u0_cells, dtype=float)
    n, cs = econfig.n_paths, econfig.chunk_size
    chunks = [np.arange(i, min(i + cs, n)) for i in range(0, n, cs)]
    start = time.monotonic()
    results = [None] * len(chunks)
    if econfig.workers == 1 or len(chunks) == 1:
        for k, ids in enumerate(chunks):
            results[k] = _run_chunk(problem, u0, econfig.seed, ids, observers)
            if progress:
                print(_progress_line(int(chunks[k][-1]) + 1, n, start), file=progress, flush=True)
    else:
        with ProcessPoolExecutor(max_workers=econfig.workers) as pool:
            futs = [pool.submit(_run_chunk, problem, u0, econfig.seed, ids, observers) for ids in chunks]
            done = 0
            for k, fut in enumerate(futs):
                results[k] = fut.result()
                done += chunks[k].size
                if progress:
                    print(_progress_line(done, n, start), file=progress, flush=True)
    ids = np.concatenate([r[0] for r in results]) if results else np.empty(0, dtype=int)
    blown = [b for r in results for b in r[2]]
    per_path, series = _merge(observers, [r[1] for r in results])
    max_abs = max(r[3] for r in results)
    if max_abs > problem.flux.bound_M:
        log.warning("states reached |u| = %.4g, beyond the flux bound M = %g", max_abs, problem.flux.bound_M)
    out = EnsembleResult(ids, per_path, series, blown, time.monotonic() - start, max_abs)
    if len(blown) > econfig.max_blowup_fraction * n:
        raise EnsembleError(
            f"{len(blown)} of {n} paths blew up (limit {econfig.max_blowup_fraction:.2%}); first: path {blown[0][0]} "
            f"at step {blown[0][1]}, cell {blown[0][2]}"
        )
    return out


def lag1_correlation(values) -> tuple[float, float]:
    """Lag-1 autocorrelation across path indices and its approximate standard error."""
    v = np.asarray(values, dtype=float)
    c = v - v.mean()
    denom = c @ c
    if v.size < 3 or denom == 0:
        return 0.0, 0.0
    return float((c[:-1] @ c[1:]) / denom), 1.0 / math.sqrt(v.size)
