"""Probability-flow ODE integration over any ScoreField.

Integrates dz/dt = v(z, t) from t_start down to t_end, where v is the field's
prediction converted to the velocity parameterization. Three integrators:
an adaptive Dormand-Prince 5(4) embedded pair, fixed-step Heun, and fixed-step
Euler. Endpoints clamp to [t_min, 1 - t_min] because the parameterization
conversions are singular at t in {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DivergenceError, InvalidArgumentError, NumericFailureError
from .numerics import RngStream
from .schedule import VELOCITY, convert_value

ADAPTIVE_RK45 = "adaptive-rk45"
FIXED_HEUN = "fixed-heun"
FIXED_EULER = "fixed-euler"
SOLVER_KINDS = (ADAPTIVE_RK45, FIXED_HEUN, FIXED_EULER)

# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])

_SAFETY = 0.9
_GROW = 5.0
_SHRINK = 0.2


@dataclass(frozen=True)
class SolverConfig:
    kind: str = ADAPTIVE_RK45
    atol: float = 1e-6
    rtol: float = 1e-3
    max_steps: int = 100_000
    t_min: float = 1e-3
    t_start: float | None = None  # default 1 - t_min
    t_end: float | None = None    # default t_min
    fixed_steps: int = 100        # step count for the fixed-step kinds

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise InvalidArgumentError(f"unknown solver kind {self.kind!r}")
        if self.atol <= 0 or self.rtol <= 0:
            raise InvalidArgumentError("tolerances must be positive")
        if self.t_min <= 0:
            raise InvalidArgumentError("t_min must be positive")
        start, end = self.resolve_span()
        if not (start > end >= self.t_min):
            raise InvalidArgumentError(
                f"need t_start ({start}) > t_end ({end}) >= t_min ({self.t_min})"
            )

    def resolve_span(self) -> tuple[float, float]:
        start = 1.0 - self.t_min if self.t_start is None else self.t_start
        end = self.t_min if self.t_end is None else self.t_end
        return float(start), float(end)


@dataclass
class Trajectory:
    """Accepted integration states in strictly decreasing t order."""

    times: list = dc_field(default_factory=list)
    states: list = dc_field(default_factory=list)
    accepted: int = 0
    rejected: int = 0

    def append(self, t: float, z: np.ndarray) -> None:
        self.times.append(float(t))
        self.states.append(np.array(z, dtype=float))

    def __iter__(self):
        return iter(zip(self.times, self.states))

    def __len__(self):
        return len(self.times)

    def state_at(self, t: float) -> np.ndarray:
        """Linear interpolation between recorded states (t inside the span)."""
        ts = np.asarray(self.times)
        if t >= ts[0]:
            return self.states[0]
        if t <= ts[-1]:
            return self.states[-1]
        # times are strictly decreasing
        j = int(np.searchsorted(-ts, -t, side="left"))
        t_hi, t_lo = ts[j - 1], ts[j]
        w = (t - t_lo) / (t_hi - t_lo)
        return w * self.states[j - 1] + (1.0 - w) * self.states[j]


def velocity_fn(score_field, label=None):
    """Wrap a ScoreField into z, t -> velocity."""
    kind = score_field.prediction_kind

    def v(z, t):
        pred = score_field.evaluate(z, t, label)
        if kind == VELOCITY:
            return pred
        return convert_value(pred, kind, VELOCITY, z, t)

    return v


def _error_ratio(err: np.ndarray, z: np.ndarray, z_new: np.ndarray,
                 atol: float, rtol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_new))
    return float(np.max(np.abs(err) / scale))


def _initial_step(v, z0: np.ndarray, t0: float, span: float,
                  atol: float, rtol: float) -> float:
    # Hairer-style heuristic, adapted for decreasing t.
    sc = atol + rtol * np.abs(z0)
    f0 = v(z0, t0)
    d0 = float(np.max(np.abs(z0) / sc))
    d1 = float(np.max(np.abs(f0) / sc))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, 0.1 * span)
    z1 = z0 - h0 * f0
    f1 = v(z1, t0 - h0)
    d2 = float(np.max(np.abs(f1 - f0) / sc)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def integrate(score_field, z_init, cfg: SolverConfig = SolverConfig(),
              record: bool = False, label=None):
    """Integrate the probability-flow ODE down from t_start to t_end.

    Returns (z_final, Trajectory or None).
    """
    v = velocity_fn(score_field, label)
    z = np.array(z_init, dtype=float)
    t_start, t_end = cfg.resolve_span()
    traj = Trajectory() if record else None
    if record:
        traj.append(t_start, z)

    if cfg.kind == ADAPTIVE_RK45:
        z = _integrate_dopri5(v, z, t_start, t_end, cfg, traj)
    else:
        hs = (t_start - t_end) / cfg.fixed_steps
        t = t_start
        for k in range(cfg.fixed_steps):
            f0 = v(z, t)
            if cfg.kind == FIXED_EULER:
                z = z - hs * f0
            else:  # Heun
                z_pred = z - hs * f0
                f1 = v(z_pred, t - hs)
                z = z - hs * 0.5 * (f0 + f1)
            t = t_end if k == cfg.fixed_steps - 1 else t_start - (k + 1) * hs
            if not np.all(np.isfinite(z)):
                raise NumericFailureError("non-finite state during integration",
                                          iteration=k, state=z)
            if record:
                traj.append(t, z)
        if traj is not None:
            traj.accepted = cfg.fixed_steps
    return z, traj


def _integrate_dopri5(v, z, t_start, t_end, cfg, traj):
    t = t_start
    span = t_start - t_end
    h = _initial_step(v, z, t, span, cfg.atol, cfg.rtol)
    steps = 0
    accepted = rejected = 0
    while t > t_end:
        if steps >= cfg.max_steps:
            raise DivergenceError(f"max steps ({cfg.max_steps}) exceeded at t={t}",
                                  iteration=steps, state=z)
        steps += 1
        h = min(h, t - t_end)
        last = h == t - t_end
        ks = []
        for i in range(7):
            zi = z.copy()
            for j, a in enumerate(_DP_A[i]):
                zi = zi - h * a * ks[j]
            ks.append(v(zi, t - _DP_C[i] * h))
        ks = np.asarray(ks)
        z5 = z - h * (_DP_B5 @ ks)
        z4 = z - h * (_DP_B4 @ ks)
        if not np.all(np.isfinite(z5)):
            raise NumericFailureError("non-finite state during integration",
                                      iteration=steps, state=z5)
        ratio = _error_ratio(z5 - z4, z, z5, cfg.atol, cfg.rtol)
        if ratio <= 1.0:
            t = t_end if last else t - h
            z = z5
            accepted += 1
            if traj is not None:
                traj.append(t, z)
        else:
            rejected += 1
        factor = _SAFETY * (1.0 / ratio) ** 0.2 if ratio > 0 else _GROW
        h = h * min(_GROW, max(_SHRINK, factor))
    if traj is not None:
        traj.accepted = accepted
        traj.rejected = rejected
    return z


def sample(score_field, n: int, cfg: SolverConfig = SolverConfig(), seed: int = 0,
           record: bool = False, label=None, dim: int | None = None):
    """Draw n probability-flow samples: z_init ~ N(0, I), integrate t_start -> t_end.

    Per-sample RNG streams derive from (seed, sample index), so any prefix of
    samples is reproducible independently of n.
    """
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    d = dim if dim is not None else score_field.dim
    out = np.empty((n, d))
    trajectories = [] if record else None
    for i in range(n):
        rng = RngStream(seed, stream=i)
        z0 = rng.normal(d)
        try:
            z, traj = integrate(score_field, z0, cfg, record=record, label=label)
        except NumericFailureError as exc:
            raise NumericFailureError(f"sample {i} failed: {exc}",
                                      iteration=exc.iteration, state=exc.state) from exc
        out[i] = z
        if record:
            trajectories.append(traj)
    return out, trajectories


def denoise_from(score_field, z_t, t_from: float,
                 cfg: SolverConfig = SolverConfig(), label=None) -> np.ndarray:
    """Partial denoising: integrate from (z_t, t_from) down to t_min."""
    if t_from <= cfg.t_min:
        return np.array(z_t, dtype=float)
    sub = SolverConfig(kind=cfg.kind, atol=cfg.atol, rtol=cfg.rtol,
                       max_steps=cfg.max_steps, t_min=cfg.t_min,
                       t_start=min(t_from, 1.0 - cfg.t_min), t_end=cfg.t_min,
                       fixed_steps=cfg.fixed_steps)
    z, _ = integrate(score_field, z_t, sub, record=False, label=label)
    return z
