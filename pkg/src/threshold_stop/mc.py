"""Monte Carlo oracle for threshold stopping values.

Paths follow the explicit Euler scheme
``X_{k+1} = X_k + a(X_k) dt + sigma(X_k) sqrt(dt) Z_k`` and stop at the
first grid time with ``X_k >= p``, contributing ``g(X_k) exp(-rho k dt)``
(evaluated at the overshot state; no bridge correction, a known O(sqrt(dt))
bias controlled by the dt-halving check in the test suite).  Paths alive at
the truncation horizon contribute the discounted payoff there, floored at
zero.  Paths that jump below the (unreachable) left endpoint are put back
on a tiny interior margin.

Determinism: paths are partitioned into fixed-size chunks; chunk ``c``
draws all of its normals from a dedicated stream seeded by
``SeedSequence((seed, c))`` and consumed in a deterministic order, and the
chunk partials are reduced in chunk order.  Results are therefore
bit-identical for a given config regardless of how many workers run the
chunks.  Geometric and arithmetic Brownian motion use compiled kernels;
general coefficients run on a vectorized numpy engine.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .diffusion import DiffusionSpec, NumericalFailureError
from .expr import DomainError, PiecewiseFunction

CHUNK = 32768  # paths per chunk; fixed so results never depend on worker count


@dataclass(frozen=True)
class McConfig:
    """Simulation size, step, horizon, seed, and variance-reduction flags."""

    n_paths: int
    dt: float
    t_max: float
    seed: int
    antithetic: bool = False
    n_workers: int = 1

    def __post_init__(self):
        if self.n_paths <= 0:
            raise ValueError("n_paths must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.dt > self.t_max / 100.0:
            raise ValueError("dt must be at most t_max/100")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic runs need an even n_paths")
        if self.n_workers < 1:
            raise ValueError("n_workers must be at least 1")


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_stopped: int
    n_truncated: int


@njit(nogil=True, cache=True)
def _gbm_kernel(gen, x0, f0, f1, barrier, guard, n_steps, hit_k, x_out):
    n = hit_k.shape[0]
    x = np.empty(n)
    idx = np.empty(n, np.int64)
    for i in range(n):
        x[i] = x0
        idx[i] = i
    active = n
    for k in range(1, n_steps + 1):
        m = 0
        for t in range(active):
            z = gen.standard_normal()
            xi = x[t] * (f0 + f1 * z)
            if xi < guard:
                xi = guard
            j = idx[t]
            if xi >= barrier:
                hit_k[j] = k
                x_out[j] = xi
            else:
                x[m] = xi
                idx[m] = j
                m += 1
        active = m
        if active == 0:
            break
    for t in range(active):
        x_out[idx[t]] = x[t]


@njit(nogil=True, cache=True)
def _abm_kernel(gen, x0, c0, c1, barrier, n_steps, hit_k, x_out):
    n = hit_k.shape[0]
    x = np.empty(n)
    idx = np.empty(n, np.int64)
    for i in range(n):
        x[i] = x0
        idx[i] = i
    active = n
    for k in range(1, n_steps + 1):
        m = 0
        for t in range(active):
            z = gen.standard_normal()
            xi = x[t] + c0 + c1 * z
            j = idx[t]
            if xi >= barrier:
                hit_k[j] = k
                x_out[j] = xi
            else:
                x[m] = xi
                idx[m] = j
                m += 1
        active = m
        if active == 0:
            break
    for t in range(active):
        x_out[idx[t]] = x[t]


@njit(nogil=True, cache=True)
def _gbm_kernel_pairs(gen, x0, f0, f1, barrier, guard, n_steps,
                      hit_a, x_a, hit_b, x_b):
    """Antithetic pairs evolved jointly: member A uses +z, member B uses -z,
    with one draw per active pair per step so the mirroring is exact."""
    n = hit_a.shape[0]
    xa = np.empty(n)
    xb = np.empty(n)
    alive_a = np.empty(n, np.bool_)
    alive_b = np.empty(n, np.bool_)
    idx = np.empty(n, np.int64)
    for i in range(n):
        xa[i] = x0
        xb[i] = x0
        alive_a[i] = True
        alive_b[i] = True
        idx[i] = i
    active = n
    for k in range(1, n_steps + 1):
        m = 0
        for t in range(active):
            i = idx[t]
            z = gen.standard_normal()
            keep = False
            if alive_a[i]:
                v = xa[i] * (f0 + f1 * z)
                if v < guard:
                    v = guard
                if v >= barrier:
                    hit_a[i] = k
                    x_a[i] = v
                    alive_a[i] = False
                else:
                    xa[i] = v
                    keep = True
            if alive_b[i]:
                v = xb[i] * (f0 - f1 * z)
                if v < guard:
                    v = guard
                if v >= barrier:
                    hit_b[i] = k
                    x_b[i] = v
                    alive_b[i] = False
                else:
                    xb[i] = v
                    keep = True
            if keep:
                idx[m] = i
                m += 1
        active = m
        if active == 0:
            break
    for i in range(n):
        if alive_a[i]:
            x_a[i] = xa[i]
        if alive_b[i]:
            x_b[i] = xb[i]


@njit(nogil=True, cache=True)
def _gbm_kernel_sweep(gen, x0, f0, f1, barriers, guard, n_steps, hit_k, x_hit):
    """One trajectory per path serves every barrier: hit_k[i, j] records the
    first step at which path i reaches barriers[j] (sorted ascending), so
    all barrier estimates share their random numbers pathwise.  On exit
    x_hit[i, J-1] holds the truncation state for barriers never reached."""
    n = hit_k.shape[0]
    nb = barriers.shape[0]
    x = np.empty(n)
    idx = np.empty(n, np.int64)
    nxt = np.empty(n, np.int64)
    for i in range(n):
        x[i] = x0
        idx[i] = i
        nxt[i] = 0
    active = n
    for k in range(1, n_steps + 1):
        m = 0
        for t in range(active):
            z = gen.standard_normal()
            xi = x[t] * (f0 + f1 * z)
            if xi < guard:
                xi = guard
            i = idx[t]
            j = nxt[t]
            while j < nb and xi >= barriers[j]:
                hit_k[i, j] = k
                x_hit[i, j] = xi
                j += 1
            if j < nb:
                x[m] = xi
                idx[m] = i
                nxt[m] = j
                m += 1
        active = m
        if active == 0:
            break
    for t in range(active):
        x_hit[idx[t], nb - 1] = x[t]  # truncation state, shared by unhit barriers


@njit(nogil=True, cache=True)
def _abm_kernel_sweep(gen, x0, c0, c1, barriers, n_steps, hit_k, x_hit):
    n = hit_k.shape[0]
    nb = barriers.shape[0]
    x = np.empty(n)
    idx = np.empty(n, np.int64)
    nxt = np.empty(n, np.int64)
    for i in range(n):
        x[i] = x0
        idx[i] = i
        nxt[i] = 0
    active = n
    for k in range(1, n_steps + 1):
        m = 0
        for t in range(active):
            z = gen.standard_normal()
            xi = x[t] + c0 + c1 * z
            i = idx[t]
            j = nxt[t]
            while j < nb and xi >= barriers[j]:
                hit_k[i, j] = k
                x_hit[i, j] = xi
                j += 1
            if j < nb:
                x[m] = xi
                idx[m] = i
                nxt[m] = j
                m += 1
        active = m
        if active == 0:
            break
    for t in range(active):
        x_hit[idx[t], nb - 1] = x[t]


def _general_sweep(rng, d, x0, dt, barriers, guard, n_steps, hit_k, x_hit):
    n = hit_k.shape[0]
    nb = len(barriers)
    x = np.full(n, x0)
    idx = np.arange(n)
    nxt = np.zeros(n, np.int64)
    sqdt = math.sqrt(dt)
    for k in range(1, n_steps + 1):
        if len(x) == 0:
            break
        z = rng.standard_normal(len(x))
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + np.asarray(d.drift_at(x), dtype=float) * dt \
                + np.asarray(d.vol_at(x), dtype=float) * sqdt * z
        if guard > -math.inf:
            np.maximum(x, guard, out=x)
        bad = ~np.isfinite(x)
        if bad.any():
            raise NumericalFailureError(
                f"non-finite state on path slot {int(idx[bad][0])} at step {k}")
        while len(x):
            crossed = x >= barriers[nxt]
            if not crossed.any():
                break
            hit_k[idx[crossed], nxt[crossed]] = k
            x_hit[idx[crossed], nxt[crossed]] = x[crossed]
            nxt[crossed] += 1
            done = nxt >= nb
            if done.any():
                keep = ~done
                x, idx, nxt = x[keep], idx[keep], nxt[keep]
    if len(x):
        x_hit[idx, nb - 1] = x


@njit(nogil=True, cache=True)
def _abm_kernel_pairs(gen, x0, c0, c1, barrier, n_steps, hit_a, x_a, hit_b, x_b):
    n = hit_a.shape[0]
    xa = np.empty(n)
    xb = np.empty(n)
    alive_a = np.empty(n, np.bool_)
    alive_b = np.empty(n, np.bool_)
    idx = np.empty(n, np.int64)
    for i in range(n):
        xa[i] = x0
        xb[i] = x0
        alive_a[i] = True
        alive_b[i] = True
        idx[i] = i
    active = n
    for k in range(1, n_steps + 1):
        m = 0
        for t in range(active):
            i = idx[t]
            z = gen.standard_normal()
            keep = False
            if alive_a[i]:
                v = xa[i] + c0 + c1 * z
                if v >= barrier:
                    hit_a[i] = k
                    x_a[i] = v
                    alive_a[i] = False
                else:
                    xa[i] = v
                    keep = True
            if alive_b[i]:
                v = xb[i] + c0 - c1 * z
                if v >= barrier:
                    hit_b[i] = k
                    x_b[i] = v
                    alive_b[i] = False
                else:
                    xb[i] = v
                    keep = True
            if keep:
                idx[m] = i
                m += 1
        active = m
        if active == 0:
            break
    for i in range(n):
        if alive_a[i]:
            x_a[i] = xa[i]
        if alive_b[i]:
            x_b[i] = xb[i]


def _general_chunk(rng, d, x0, dt, barrier, guard, n_steps, sign, hit_k, x_out):
    """Vectorized numpy engine for arbitrary drift/volatility formulas."""
    n = hit_k.shape[0]
    x = np.full(n, x0)
    idx = np.arange(n)
    sqdt = math.sqrt(dt)
    for k in range(1, n_steps + 1):
        if len(x) == 0:
            break
        z = rng.standard_normal(len(x))
        if sign < 0:
            np.negative(z, out=z)
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + np.asarray(d.drift_at(x), dtype=float) * dt \
                + np.asarray(d.vol_at(x), dtype=float) * sqdt * z
        if guard > -math.inf:
            np.maximum(x, guard, out=x)
        bad = ~np.isfinite(x)
        if bad.any():
            j = int(idx[bad][0])
            raise NumericalFailureError(
                f"non-finite state on path slot {j} at step {k}")
        hits = x >= barrier
        if hits.any():
            hit_k[idx[hits]] = k
            x_out[idx[hits]] = x[hits]
            keep = ~hits
            x = x[keep]
            idx = idx[keep]
    x_out[idx] = x


def _chunk_sizes(n_paths):
    sizes = []
    left = n_paths
    while left > 0:
        take = min(CHUNK, left)
        sizes.append(take)
        left -= take
    return sizes


def _chunk_generator(seed, chunk_id):
    return np.random.Generator(np.random.SFC64(np.random.SeedSequence((seed, chunk_id))))


def _contributions(g, rho, dt, disc_trunc, upper, hit_k, x_out):
    hit = hit_k > 0
    vals = np.asarray(x_out, dtype=float)
    if math.isfinite(upper):
        vals = np.minimum(vals, upper)  # overshoot past a finite right end
    c = np.empty(len(hit_k))
    if hit.any():
        payoff = np.asarray(g.value(vals[hit]), dtype=float)
        c[hit] = payoff * np.exp((-rho * dt) * hit_k[hit])
    if (~hit).any():
        payoff = np.asarray(g.value(vals[~hit]), dtype=float)
        c[~hit] = disc_trunc * np.maximum(0.0, payoff)
    if not np.all(np.isfinite(c)):
        j = int(np.argmax(~np.isfinite(c)))
        raise NumericalFailureError(
            f"non-finite contribution at path slot {j}: state {x_out[j]}, "
            f"stop step {hit_k[j]}")
    return c, int(hit.sum())


def simulate_threshold_value(d: DiffusionSpec, g: PiecewiseFunction, rho: float,
                             x0: float, p: float, cfg: McConfig) -> McEstimate:
    """Estimate the discounted payoff of stopping at threshold p from x0.

    Returns the sample mean with its standard error and the stopped versus
    truncated path counts.  Bit-identical results for identical configs,
    independent of cfg.n_workers.
    """
    if not d.lower < x0 < d.upper:
        raise DomainError(f"x0={x0} outside ]{d.lower}, {d.upper}[")
    if not d.lower < p < d.upper:
        raise DomainError(f"p={p} outside ]{d.lower}, {d.upper}[")
    if x0 >= p:
        return McEstimate(mean=float(g.value(x0)), std_error=0.0,
                          n_stopped=cfg.n_paths, n_truncated=0)
    if math.exp(-rho * cfg.t_max) > 1e-4:
        warnings.warn("exp(-rho*t_max) exceeds 1e-4; truncation bias may be "
                      "material", RuntimeWarning, stacklevel=2)

    n_steps = int(round(cfg.t_max / cfg.dt))
    t_trunc = n_steps * cfg.dt
    disc_trunc = math.exp(-rho * t_trunc)
    guard = d.lower + 1e-12 * max(1.0, abs(x0)) if math.isfinite(d.lower) \
        else -math.inf
    dt = cfg.dt

    def run_chunk(chunk_id, n_in_chunk):
        gen = _chunk_generator(cfg.seed, chunk_id)
        if cfg.antithetic:
            pairs = n_in_chunk // 2
            hit_a = np.full(pairs, -1, np.int64)
            hit_b = np.full(pairs, -1, np.int64)
            x_a = np.empty(pairs)
            x_b = np.empty(pairs)
            if d.kind == "gbm":
                alpha, sigma = d.params
                _gbm_kernel_pairs(gen, x0, 1.0 + alpha * dt, sigma * math.sqrt(dt),
                                  p, guard, n_steps, hit_a, x_a, hit_b, x_b)
            elif d.kind == "abm":
                mu, sigma = d.params
                _abm_kernel_pairs(gen, x0, mu * dt, sigma * math.sqrt(dt),
                                  p, n_steps, hit_a, x_a, hit_b, x_b)
            else:
                _general_chunk(gen, d, x0, dt, p, guard, n_steps, 1.0, hit_a, x_a)
                gen_b = _chunk_generator(cfg.seed, chunk_id)
                _general_chunk(gen_b, d, x0, dt, p, guard, n_steps, -1.0, hit_b, x_b)
            ca, sa = _contributions(g, rho, dt, disc_trunc, d.upper, hit_a, x_a)
            cb, sb = _contributions(g, rho, dt, disc_trunc, d.upper, hit_b, x_b)
            pair_means = 0.5 * (ca + cb)
            return (float(np.sum(pair_means)), float(np.sum(pair_means**2)),
                    pairs, sa + sb)
        hit_k = np.full(n_in_chunk, -1, np.int64)
        x_out = np.empty(n_in_chunk)
        if d.kind == "gbm":
            alpha, sigma = d.params
            _gbm_kernel(gen, x0, 1.0 + alpha * dt, sigma * math.sqrt(dt),
                        p, guard, n_steps, hit_k, x_out)
        elif d.kind == "abm":
            mu, sigma = d.params
            _abm_kernel(gen, x0, mu * dt, sigma * math.sqrt(dt),
                        p, n_steps, hit_k, x_out)
        else:
            _general_chunk(gen, d, x0, dt, p, guard, n_steps, 1.0, hit_k, x_out)
        c, stopped = _contributions(g, rho, dt, disc_trunc, d.upper, hit_k, x_out)
        return float(np.sum(c)), float(np.sum(c**2)), n_in_chunk, stopped

    sizes = _chunk_sizes(cfg.n_paths)
    if cfg.n_workers == 1:
        partials = [run_chunk(cid, n) for cid, n in enumerate(sizes)]
    else:
        with ThreadPoolExecutor(max_workers=cfg.n_workers) as pool:
            futures = [pool.submit(run_chunk, cid, n) for cid, n in enumerate(sizes)]
            partials = [f.result() for f in futures]  # chunk order preserved

    total = 0.0
    total_sq = 0.0
    units = 0
    stopped = 0
    for s, sq, n_units, n_stop in partials:
        total += s
        total_sq += sq
        units += n_units
        stopped += n_stop
    mean = total / units
    if units > 1:
        var = max(0.0, (total_sq - total * total / units) / (units - 1))
        se = math.sqrt(var / units)
    else:
        se = 0.0
    return McEstimate(mean=mean, std_error=se, n_stopped=stopped,
                      n_truncated=cfg.n_paths - stopped)


def sweep_thresholds(d: DiffusionSpec, g: PiecewiseFunction, rho: float,
                     x0: float, p_list, cfg: McConfig):
    """Estimates across a sorted list of thresholds under common random
    numbers: each path is evolved once and its first crossing of every
    threshold is recorded, so all estimates share their trajectories
    pathwise and the comparison noise between nearby thresholds is far
    below the single-point noise.

    A single-element list degenerates to simulate_threshold_value (bit
    identical).  Antithetic sweeps run point by point with a shared seed
    base instead.
    """
    p_list = [float(p) for p in p_list]
    if any(b < a for a, b in zip(p_list, p_list[1:])):
        raise ValueError("p_list must be sorted ascending")
    if len(p_list) == 1 or cfg.antithetic:
        return [(p, simulate_threshold_value(d, g, rho, x0, p, cfg)) for p in p_list]

    for p in p_list:
        if not d.lower < p < d.upper:
            raise DomainError(f"p={p} outside ]{d.lower}, {d.upper}[")
    if not d.lower < x0 < d.upper:
        raise DomainError(f"x0={x0} outside ]{d.lower}, {d.upper}[")
    if math.exp(-rho * cfg.t_max) > 1e-4:
        warnings.warn("exp(-rho*t_max) exceeds 1e-4; truncation bias may be "
                      "material", RuntimeWarning, stacklevel=2)

    immediate = [p for p in p_list if x0 >= p]
    evolved = np.asarray([p for p in p_list if x0 < p], dtype=float)
    out = [(p, McEstimate(mean=float(g.value(x0)), std_error=0.0,
                          n_stopped=cfg.n_paths, n_truncated=0))
           for p in immediate]
    if len(evolved) == 0:
        return out

    n_steps = int(round(cfg.t_max / cfg.dt))
    t_trunc = n_steps * cfg.dt
    disc_trunc = math.exp(-rho * t_trunc)
    guard = d.lower + 1e-12 * max(1.0, abs(x0)) if math.isfinite(d.lower) \
        else -math.inf
    dt = cfg.dt
    nb = len(evolved)

    def run_chunk(chunk_id, n_in_chunk):
        gen = _chunk_generator(cfg.seed, chunk_id)
        hit_k = np.full((n_in_chunk, nb), -1, np.int64)
        x_hit = np.empty((n_in_chunk, nb))
        if d.kind == "gbm":
            alpha, sigma = d.params
            _gbm_kernel_sweep(gen, x0, 1.0 + alpha * dt, sigma * math.sqrt(dt),
                              evolved, guard, n_steps, hit_k, x_hit)
        elif d.kind == "abm":
            mu, sigma = d.params
            _abm_kernel_sweep(gen, x0, mu * dt, sigma * math.sqrt(dt),
                              evolved, n_steps, hit_k, x_hit)
        else:
            _general_sweep(gen, d, x0, dt, evolved, guard, n_steps, hit_k, x_hit)
        sums = np.empty(nb)
        sumsqs = np.empty(nb)
        stops = np.empty(nb, np.int64)
        trunc_state = x_hit[:, nb - 1]
        for j in range(nb):
            hk = hit_k[:, j].copy()
            xs = np.where(hk > 0, x_hit[:, j], trunc_state)
            c, stopped = _contributions(g, rho, dt, disc_trunc, d.upper, hk, xs)
            sums[j] = float(np.sum(c))
            sumsqs[j] = float(np.sum(c**2))
            stops[j] = stopped
        return sums, sumsqs, stops

    sizes = _chunk_sizes(cfg.n_paths)
    if cfg.n_workers == 1:
        partials = [run_chunk(cid, n) for cid, n in enumerate(sizes)]
    else:
        with ThreadPoolExecutor(max_workers=cfg.n_workers) as pool:
            futures = [pool.submit(run_chunk, cid, n) for cid, n in enumerate(sizes)]
            partials = [f.result() for f in futures]

    n = cfg.n_paths
    for j, p in enumerate(evolved):
        total = 0.0
        total_sq = 0.0
        stopped = 0
        for sums, sumsqs, stops in partials:
            total += sums[j]
            total_sq += sumsqs[j]
            stopped += int(stops[j])
        mean = total / n
        var = max(0.0, (total_sq - total * total / n) / (n - 1)) if n > 1 else 0.0
        out.append((float(p), McEstimate(mean=mean,
                                         std_error=math.sqrt(var / n),
                                         n_stopped=stopped,
                                         n_truncated=n - stopped)))
    return out
