"""Exact empirical score of a finite training set.

The smoothed training density at time t is a uniform Gaussian mixture with
means alpha_t * x_i and shared isotropic variance sigma_t^2. Its score is a
softmax-weighted pull toward the scaled training points; all weight
computations go through log-space max subtraction so arbitrarily separated
points stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import EmptyClassError, InvalidArgumentError, SingularTimeError
from .schedule import LinearSchedule

EXACT = "exact"


@dataclass(frozen=True)
class SoftmaxWeights:
    """Mixture responsibilities at a query point, with the point indices they
    refer to (a subset of the dataset under kNN truncation)."""

    weights: np.ndarray
    indices: np.ndarray


class EmpiricalScoreOracle:
    """Evaluates the exact score of the Gaussian-smoothed training set.

    truncation: "exact" (all N points) or an integer k for kNN truncation,
    restricting the mixture to the k points whose scaled positions are nearest
    the query. k = N reproduces the exact oracle bit-for-bit.
    class_filter restricts the mixture to points of one class, renormalized
    uniformly within the class.
    """

    def __init__(self, dataset: Dataset, schedule=LinearSchedule,
                 truncation=EXACT, class_filter: int | None = None):
        self.schedule = schedule
        self.class_filter = class_filter
        if class_filter is not None:
            idx = dataset.class_indices(class_filter)
            if idx.size == 0:
                raise EmptyClassError(f"class {class_filter} has no members")
            self._indices = idx
        else:
            self._indices = np.arange(dataset.size)
        self.dataset = dataset
        self._points = dataset.points[self._indices]
        n = self._points.shape[0]
        if truncation == EXACT:
            self.k = n
        else:
            k = int(truncation)
            if not (1 <= k <= n):
                raise InvalidArgumentError(f"knn truncation k={k} outside [1, {n}]")
            self.k = k
        self.truncation = truncation

    @property
    def dim(self) -> int:
        return self.dataset.dim

    def _scaled_sqdist(self, z: np.ndarray, t: float) -> np.ndarray:
        a = float(self.schedule.alpha(t))
        diff = z[None, :] - a * self._points
        return np.einsum("ij,ij->i", diff, diff)

    def _active(self, sq: np.ndarray) -> np.ndarray:
        if self.k >= sq.shape[0]:
            return np.arange(sq.shape[0])
        part = np.argpartition(sq, self.k - 1)[: self.k]
        return part[np.argsort(sq[part], kind="stable")]

    def softmax_weights(self, z, t: float) -> SoftmaxWeights:
        """Responsibilities proportional to exp(-|z - alpha_t x_i|^2 / (2 sigma_t^2))."""
        z = np.asarray(z, dtype=float)
        s = float(self.schedule.sigma(t))
        if s <= 0.0:
            raise SingularTimeError(f"softmax weights undefined at t={t} (sigma=0)")
        sq = self._scaled_sqdist(z, t)
        active = self._active(sq)
        logits = -sq[active] / (2.0 * s * s)
        e = np.exp(logits - np.max(logits))
        return SoftmaxWeights(e / e.sum(), self._indices[active])

    def score(self, z, t: float) -> np.ndarray:
        """(1/sigma^2) * (-z + alpha * sum_i w_i x_i)."""
        z = np.asarray(z, dtype=float)
        s = float(self.schedule.sigma(t))
        if s <= 0.0:
            raise SingularTimeError(f"empirical score undefined at t={t} (sigma=0)")
        a = float(self.schedule.alpha(t))
        w = self.softmax_weights(z, t)
        mean = w.weights @ self.dataset.points[w.indices]
        return (-z + a * mean) / (s * s)

    def score_batch(self, zs: np.ndarray, t) -> np.ndarray:
        """Vectorized score over a batch of queries; t scalar or per-row array."""
        zs = np.atleast_2d(np.asarray(zs, dtype=float))
        ts = np.broadcast_to(np.asarray(t, dtype=float), (zs.shape[0],))
        if np.any(ts <= 0.0):
            raise SingularTimeError("empirical score undefined at t=0")
        out = np.empty_like(zs)
        # Group rows by unique timestep so each group is one matrix product.
        for tv in np.unique(ts):
            rows = np.flatnonzero(ts == tv)
            a = float(self.schedule.alpha(tv))
            s = float(self.schedule.sigma(tv))
            zb = zs[rows]
            scaled = a * self._points
            sq = (
                np.einsum("ij,ij->i", zb, zb)[:, None]
                - 2.0 * zb @ scaled.T
                + np.einsum("ij,ij->i", scaled, scaled)[None, :]
            )
            if self.k < scaled.shape[0]:
                keep = np.argpartition(sq, self.k - 1, axis=1)[:, : self.k]
                logits = -np.take_along_axis(sq, keep, axis=1) / (2.0 * s * s)
                w = np.exp(logits - logits.max(axis=1, keepdims=True))
                w /= w.sum(axis=1, keepdims=True)
                means = np.einsum("bk,bkj->bj", w, scaled[keep])
            else:
                logits = -sq / (2.0 * s * s)
                w = np.exp(logits - logits.max(axis=1, keepdims=True))
                w /= w.sum(axis=1, keepdims=True)
                means = w @ scaled
            out[rows] = (-zb + means) / (s * s)
        return out

    def collapsed_score(self, z, t: float) -> tuple[np.ndarray, int]:
        """Single-nearest-component approximation: (-z + alpha * x_i) / sigma^2
        at the argmin of |z - alpha x_i|, ties broken by lowest index."""
        z = np.asarray(z, dtype=float)
        s = float(self.schedule.sigma(t))
        if s <= 0.0:
            raise SingularTimeError(f"collapsed score undefined at t={t} (sigma=0)")
        a = float(self.schedule.alpha(t))
        sq = self._scaled_sqdist(z, t)
        local = int(np.argmin(sq))  # np.argmin returns the first minimum
        i = int(self._indices[local])
        return (-z + a * self.dataset.points[i]) / (s * s), i


def naive_empirical_score(dataset: Dataset, z, t: float, schedule=LinearSchedule) -> np.ndarray:
    """Direct-summation reference: unstabilized mixture-score formula.

    Independent of the oracle's log-space path; used as a correctness check on
    small, benign instances only.
    """
    z = np.asarray(z, dtype=float)
    a = float(schedule.alpha(t))
    s = float(schedule.sigma(t))
    if s <= 0.0:
        raise SingularTimeError("t=0")
    w = np.array(
        [np.exp(-np.sum((z - a * x) ** 2) / (2 * s * s)) for x in dataset.points]
    )
    total = w.sum()
    if total == 0.0:
        raise FloatingPointError("naive formula underflowed")
    mean = (w / total) @ dataset.points
    return (-z + a * mean) / (s * s)


def cfg_scores(cond_oracle: EmpiricalScoreOracle, uncond_oracle: EmpiricalScoreOracle,
               z, t: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Conditional and unconditional empirical scores plus their gap norm."""
    if cond_oracle.dataset is not uncond_oracle.dataset and not np.array_equal(
        cond_oracle.dataset.points, uncond_oracle.dataset.points
    ):
        raise InvalidArgumentError("oracles must share a dataset")
    if cond_oracle.class_filter is None:
        raise InvalidArgumentError("conditional oracle needs a class_filter")
    if uncond_oracle.class_filter is not None:
        raise InvalidArgumentError("unconditional oracle must not have a class_filter")
    s_c = cond_oracle.score(z, t)
    s_u = uncond_oracle.score(z, t)
    return s_c, s_u, float(np.linalg.norm(s_c - s_u))
