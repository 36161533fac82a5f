"""Measurements: region-conditional Monte Carlo estimators, score errors,
supervision loss, conditional/unconditional gap curves, memorization metrics,
2D sample-quality classification, and the loss-to-quality line fit."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .data import Dataset
from .errors import InvalidArgumentError, RankDeficiencyError
from .numerics import RngStream
from .schedule import SCORE, convert_value
from .sampling import SolverConfig, integrate

SUPERVISION = "supervision"
EXTRAPOLATION = "extrapolation"
REGIONS = (SUPERVISION, EXTRAPOLATION)


def velocity_weight(t):
    """Timestep weighting t^2 / (1 - t)^2: converts squared score error into
    squared velocity error under the linear schedule."""
    t = np.asarray(t, dtype=float)
    return (t * t) / ((1.0 - t) ** 2)


def uniform_weight(t):
    return np.ones_like(np.asarray(t, dtype=float))

WEIGHTINGS = {"uniform": uniform_weight, "velocity": velocity_weight}


@dataclass(frozen=True)
class RegionEstimate:
    region: str
    value: float
    curve: list  # (t, mean weighted value) per timestep
    n_samples: int
    n_timesteps: int
    weighting: str
    stderr: float = 0.0


@dataclass(frozen=True)
class QualityPoint:
    supervision_loss: float
    quality: float
    tag: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.supervision_loss) and np.isfinite(self.quality)):
            raise InvalidArgumentError("quality point must be finite")


def _region_inputs(region: str, ds: Dataset, field, n: int, ts: np.ndarray,
                   seed: int, solver: SolverConfig, labels_for_traj=None):
    """Per-timestep query batches for a region.

    supervision: z_t = alpha x + sigma eps for n fixed (x, eps) pairs, varied
    only in timestep. extrapolation: states read along n inference
    trajectories at the same timesteps (linear interpolation of the recorded
    states). Returns array of shape (T, n, d) plus per-sample labels or None.
    """
    rng = RngStream(seed, stream=1)
    d = ds.dim
    if region == SUPERVISION:
        idx = rng.integers(0, ds.size, n)
        x = ds.points[idx]
        eps = rng.normal((n, d))
        out = np.empty((len(ts), n, d))
        for j, t in enumerate(ts):
            out[j] = (1.0 - t) * x + t * eps
        labels = None if ds.labels is None else ds.labels[idx]
        return out, labels
    if region != EXTRAPOLATION:
        raise InvalidArgumentError(f"unknown region {region!r}")
    if field is None:
        raise InvalidArgumentError("extrapolation region needs a field for trajectories")
    out = np.empty((len(ts), n, d))
    labels = labels_for_traj
    for i in range(n):
        z0 = RngStream(seed, stream=1000 + i).normal(d)
        lab = None if labels is None else labels[i]
        _, traj = integrate(field, z0, solver, record=True, label=lab)
        for j, t in enumerate(ts):
            out[j, i] = traj.state_at(float(t))
    return out, labels


def estimate_region(quantity, region: str, ds: Dataset, field=None,
                    n: int = 1000, timesteps: int = 100,
                    weighting: str = "velocity", seed: int = 0,
                    t_min: float = 1e-3,
                    solver: SolverConfig | None = None,
                    labels_for_traj=None) -> RegionEstimate:
    """Monte Carlo estimate of a quantity over a region.

    quantity(zs, t) takes a batch (n, d) at a scalar timestep and returns n
    values. T timesteps are drawn uniformly on the clamped range; the estimate
    is the weighted mean over all n*T terms.
    """
    if n < 1 or timesteps < 1:
        raise InvalidArgumentError("n and timesteps must be >= 1")
    if weighting not in WEIGHTINGS:
        raise InvalidArgumentError(f"unknown weighting {weighting!r}")
    wfun = WEIGHTINGS[weighting]
    rng = RngStream(seed, stream=0)
    ts = rng.uniform(t_min, 1.0 - t_min, timesteps)
    solver = solver or SolverConfig()
    inputs, _ = _region_inputs(region, ds, field, n, ts, seed, solver,
                               labels_for_traj)
    curve = []
    total = 0.0
    sq_total = 0.0
    for j, t in enumerate(ts):
        vals = wfun(t) * np.asarray(quantity(inputs[j], float(t)), dtype=float)
        curve.append((float(t), float(np.mean(vals))))
        total += float(np.sum(vals))
        sq_total += float(np.sum(vals * vals))
    count = n * timesteps
    mean = total / count
    var = max(sq_total / count - mean * mean, 0.0)
    return RegionEstimate(region, mean, curve, n, timesteps, weighting,
                          stderr=float(np.sqrt(var / count)))


def _as_score_batch(field, zs: np.ndarray, t: float, label=None) -> np.ndarray:
    pred = field.evaluate_batch(zs, t, None if label is None else
                                np.full(zs.shape[0], label, dtype=np.int64))
    if field.prediction_kind == SCORE:
        return pred
    return convert_value(pred, field.prediction_kind, SCORE, zs, t)


def score_error_quantity(field, reference):
    """quantity(zs, t) = ||score(field) - score(reference)||^2 rowwise."""

    def q(zs, t):
        diff = _as_score_batch(field, zs, t) - _as_score_batch(reference, zs, t)
        return np.einsum("bj,bj->b", diff, diff)

    return q


def score_error(field, reference, region: str, ds: Dataset,
                traj_field=None, n: int = 1000, timesteps: int = 100,
                seed: int = 0, t_min: float = 1e-3,
                solver: SolverConfig | None = None) -> RegionEstimate:
    """Velocity-weighted squared score error of `field` against `reference`.

    Extrapolation-region trajectories come from traj_field (default: the field
    under test itself)."""
    return estimate_region(
        score_error_quantity(field, reference), region, ds,
        field=traj_field if traj_field is not None else field,
        n=n, timesteps=timesteps, weighting="velocity", seed=seed,
        t_min=t_min, solver=solver,
    )


def supervision_loss(field, reference, ds: Dataset, n: int = 1000,
                     timesteps: int = 100, seed: int = 0,
                     t_min: float = 1e-3) -> float:
    """The supervision-region, velocity-weighted score error scalar."""
    return score_error(field, reference, SUPERVISION, ds, n=n,
                       timesteps=timesteps, seed=seed, t_min=t_min).value


def cfg_gap_curve(cond_scores, uncond_scores, ds: Dataset, region: str,
                  t_grid, n: int = 200, seed: int = 0, traj_field=None,
                  solver: SolverConfig | None = None) -> list:
    """Per-timestep distribution summaries of the conditional/unconditional gap.

    cond_scores(zs, t, labels) and uncond_scores(zs, t) must return scores.
    Supervision inputs are forward draws (each sample keeps its own class);
    extrapolation inputs are states along inference trajectories of traj_field
    sampled with uniformly drawn class labels. Returns rows
    (t, median, p10, p90).
    """
    if ds.labels is None:
        raise InvalidArgumentError("cfg gap needs a labeled dataset")
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any((t_grid <= 0.0) | (t_grid >= 1.0)):
        raise InvalidArgumentError("t grid must lie inside (0, 1)")
    rng = RngStream(seed, stream=0)
    solver = solver or SolverConfig()
    if region == SUPERVISION:
        idx = rng.integers(0, ds.size, n)
        x = ds.points[idx]
        eps = rng.normal(x.shape)
        labels = ds.labels[idx]
        inputs = np.stack([(1.0 - t) * x + t * eps for t in t_grid])
    elif region == EXTRAPOLATION:
        if traj_field is None:
            raise InvalidArgumentError("extrapolation region needs traj_field")
        labels = rng.integers(0, ds.num_classes, n)
        inputs = np.empty((len(t_grid), n, ds.dim))
        for i in range(n):
            z0 = RngStream(seed, stream=1000 + i).normal(ds.dim)
            _, traj = integrate(traj_field, z0, solver, record=True,
                                label=int(labels[i]))
            for j, t in enumerate(t_grid):
                inputs[j, i] = traj.state_at(float(t))
    else:
        raise InvalidArgumentError(f"unknown region {region!r}")
    rows = []
    for j, t in enumerate(t_grid):
        gaps = np.linalg.norm(
            cond_scores(inputs[j], float(t), labels)
            - uncond_scores(inputs[j], float(t)), axis=1)
        rows.append((float(t), float(np.median(gaps)),
                     float(np.percentile(gaps, 10)),
                     float(np.percentile(gaps, 90))))
    return rows


def calibrated_l2(sample, subset_points, n: int) -> float:
    """Nearest squared distance over the mean of the n nearest squared
    distances; near 0 flags an unusually close (memorized) sample."""
    sample = np.asarray(sample, dtype=float)
    pts = np.atleast_2d(np.asarray(subset_points, dtype=float))
    if n < 1 or n > pts.shape[0]:
        raise InvalidArgumentError(f"n={n} outside [1, {pts.shape[0]}]")
    sq = np.sum((pts - sample[None, :]) ** 2, axis=1)
    nearest = np.sort(sq)[:n]
    denom = float(np.mean(nearest))
    if denom == 0.0:
        return 0.0
    return float(nearest[0] / denom)


def calibrated_l2_values(samples, subset_points, n: int) -> np.ndarray:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    return np.array([calibrated_l2(s, subset_points, n) for s in samples])


def memorization_ratio(samples, subset_points, n: int, threshold: float = 1 / 3) -> float:
    """Fraction of samples whose calibrated l2 falls below the threshold."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise InvalidArgumentError("empty samples")
    if not (0.0 < threshold < 1.0):
        raise InvalidArgumentError("threshold must lie in (0, 1)")
    vals = calibrated_l2_values(samples, subset_points, n)
    return float(np.mean(vals < threshold))


def regress_to_origin_ratio(pairs, dataset_points) -> float:
    """Fraction of (origin index, denoised output) pairs whose output's nearest
    dataset point is its origin."""
    pairs = list(pairs)
    if not pairs:
        raise InvalidArgumentError("empty pairs")
    pts = np.atleast_2d(np.asarray(dataset_points, dtype=float))
    hits = 0
    for origin_idx, out in pairs:
        sq = np.sum((pts - np.asarray(out, dtype=float)[None, :]) ** 2, axis=1)
        if int(np.argmin(sq)) == int(origin_idx):
            hits += 1
    return hits / len(pairs)


@dataclass(frozen=True)
class PatRule:
    """Geometric classification of 2D samples against the four-point toy.

    bad: on the short Euclidean bridge strictly between the two inner points
    (the width stops short of the points so memorized samples do not count).
    good: radius within radial_tol of the [inner, outer] radial band, not bad.
    """

    bridge_half_height: float = 0.1
    bridge_half_width: float = 0.15
    band_inner: float = 0.2
    band_outer: float = 1.0
    radial_tol: float = 0.15


def pat_quality(samples, rule: PatRule = PatRule()) -> tuple[float, float, float]:
    """(bad_fraction, good_fraction, other_fraction); fractions sum to 1."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != 2:
        raise InvalidArgumentError("pat quality requires 2D samples")
    x, y = samples[:, 0], samples[:, 1]
    r = np.hypot(x, y)
    bad = (np.abs(y) < rule.bridge_half_height) & (np.abs(x) < rule.bridge_half_width)
    in_band = (r >= rule.band_inner - rule.radial_tol) & (r <= rule.band_outer + rule.radial_tol)
    good = in_band & ~bad
    n = samples.shape[0]
    bad_f = float(np.mean(bad))
    good_f = float(np.mean(good))
    return bad_f, good_f, 1.0 - bad_f - good_f


def fit_quality_line(points) -> tuple[float, float, float]:
    """Ordinary least squares of quality on supervision loss.

    Returns (slope, intercept, rms residual)."""
    points = list(points)
    if len(points) < 2:
        raise InvalidArgumentError("need at least two quality points")
    xs = np.array([p.supervision_loss for p in points])
    ys = np.array([p.quality for p in points])
    if np.ptp(xs) == 0.0:
        raise RankDeficiencyError("degenerate abscissa: all losses identical")
    a = np.stack([xs, np.ones_like(xs)], axis=1)
    coef, *_ = np.linalg.lstsq(a, ys, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    resid = ys - (slope * xs + intercept)
    return slope, intercept, float(np.sqrt(np.mean(resid * resid)))
