"""Weighted atomic probability measures on the real line."""

from __future__ import annotations

from pathlib import Path

import numpy as np

MASS_TOL = 1e-12
HEADER = "location,weight"


class EmpiricalMeasure:
    """A finite list of atoms ``(location, weight)`` with total mass one.

    Locations are sorted and unique (duplicates merged on exact equality only,
    since ties change ranks).  Arrays are read-only after construction.
    """

    __slots__ = ("locations", "weights", "_cum")

    def __init__(self, locations, weights=None, *, _trusted: bool = False):
        locs = np.asarray(locations, dtype=np.float64).ravel()
        if weights is None:
            w = np.full(locs.size, 1.0 / max(locs.size, 1))
        else:
            w = np.asarray(weights, dtype=np.float64).ravel()
        if not _trusted:
            if locs.size == 0:
                raise ValueError("measure needs at least one atom")
            if locs.shape != w.shape:
                raise ValueError("locations and weights differ in length")
            if not np.all(np.isfinite(locs)):
                raise ValueError("atom locations must be finite")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and non-negative")
            keep = w > 0
            locs, w = locs[keep], w[keep]
            if locs.size == 0:
                raise ValueError("measure has no positive weight")
            if np.any(np.diff(locs) <= 0):
                locs, w = _merge(locs, w)
            if abs(w.sum() - 1.0) > MASS_TOL:
                raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        locs.setflags(write=False)
        w.setflags(write=False)
        self.locations = locs
        self.weights = w
        self._cum = None

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_samples(cls, samples) -> "EmpiricalMeasure":
        samples = np.asarray(samples, dtype=np.float64).ravel()
        return cls(samples, np.full(samples.size, 1.0 / samples.size))

    @classmethod
    def dirac(cls, x: float = 0.0) -> "EmpiricalMeasure":
        return cls([x], [1.0])

    @classmethod
    def uniform(cls, points) -> "EmpiricalMeasure":
        return cls.from_samples(points)

    # -- basic algebra -----------------------------------------------------

    def __len__(self) -> int:
        return self.locations.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmpiricalMeasure):
            return NotImplemented
        return (
            self.locations.shape == other.locations.shape
            and np.array_equal(self.locations, other.locations)
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None

    def __repr__(self) -> str:
        if len(self) <= 4:
            atoms = ", ".join(f"({x:g}, {w:g})" for x, w in zip(self.locations, self.weights))
            return f"EmpiricalMeasure([{atoms}])"
        return f"EmpiricalMeasure(<{len(self)} atoms on [{self.locations[0]:g}, {self.locations[-1]:g}]>)"

    @property
    def cumulative(self) -> np.ndarray:
        """F at each atom (atom included)."""
        if self._cum is None:
            cum = np.cumsum(self.weights)
            np.minimum(cum, 1.0, out=cum)
            cum[-1] = 1.0
            cum.setflags(write=False)
            self._cum = cum
        return self._cum

    def cdf(self, x):
        """mu(-inf, x], right-continuous."""
        x = np.asarray(x, dtype=np.float64)
        idx = np.searchsorted(self.locations, x, side="right")
        out = np.where(idx > 0, self.cumulative[np.maximum(idx - 1, 0)], 0.0)
        return out if out.ndim else float(out)

    def cdf_left(self, x):
        """mu(-inf, x)."""
        x = np.asarray(x, dtype=np.float64)
        idx = np.searchsorted(self.locations, x, side="left")
        out = np.where(idx > 0, self.cumulative[np.maximum(idx - 1, 0)], 0.0)
        return out if out.ndim else float(out)

    def regular_cdf(self, x):
        """Midpoint convention (F(x-) + F(x+)) / 2."""
        left = np.asarray(self.cdf_left(x))
        right = np.asarray(self.cdf(x))
        out = 0.5 * (left + right)
        return out if out.ndim else float(out)

    def quantile(self, p):
        """Left-continuous generalized inverse of the CDF."""
        p = np.asarray(p, dtype=np.float64)
        if np.any((p < 0) | (p > 1)):
            raise ValueError("quantile level outside [0, 1]")
        idx = np.searchsorted(self.cumulative, p, side="left")
        out = self.locations[np.minimum(idx, len(self) - 1)]
        return out if out.ndim else float(out)

    def shift(self, q: float) -> "EmpiricalMeasure":
        """The measure ``mu(. + q)``: atoms move by ``-q`` so F_new(x) = F(x + q)."""
        return EmpiricalMeasure(self.locations - q, self.weights.copy(), _trusted=True)

    def mixture(self, other: "EmpiricalMeasure", lam: float) -> "EmpiricalMeasure":
        """(1 - lam) * self + lam * other."""
        if not 0.0 <= lam <= 1.0:
            raise ValueError("mixture weight must lie in [0, 1]")
        if lam == 0.0:
            return self
        if lam == 1.0:
            return other
        locs = np.concatenate([self.locations, other.locations])
        w = np.concatenate([(1.0 - lam) * self.weights, lam * other.weights])
        order = np.argsort(locs, kind="stable")
        locs, w = _merge(locs[order], w[order])
        return EmpiricalMeasure(locs, w, _trusted=True)

    def mean(self) -> float:
        return float(np.dot(self.weights, self.locations))

    def second_moment(self) -> float:
        return float(np.dot(self.weights, self.locations * self.locations))

    def w1(self, other: "EmpiricalMeasure") -> float:
        return w1_distance(self, other)

    def resample(self, size: int, rng: np.random.Generator) -> "EmpiricalMeasure":
        """Bootstrap draw of ``size`` iid points from this measure."""
        idx = np.searchsorted(self.cumulative, rng.random(size), side="right")
        return EmpiricalMeasure.from_samples(self.locations[np.minimum(idx, len(self) - 1)])

    # -- persistence -------------------------------------------------------

    def to_text(self) -> str:
        rows = [HEADER]
        rows.extend(f"{x:.17g},{w:.17g}" for x, w in zip(self.locations, self.weights))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EmpiricalMeasure":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != HEADER:
            raise ValueError(f"measure file must start with header {HEADER!r}")
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=np.float64)
        if data.size == 0:
            raise ValueError("measure file has no atoms")
        return cls(data[:, 0], data[:, 1])

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "EmpiricalMeasure":
        return cls.from_text(Path(path).read_text())


def _merge(locs: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, inverse = np.unique(locs, return_inverse=True)
    return uniq, np.bincount(inverse, weights=w, minlength=uniq.size)


def w1_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W1 as the area between the two CDFs on the union of atoms."""
    z = np.union1d(mu.locations, nu.locations)
    if z.size < 2:
        return 0.0
    gaps = np.diff(z)
    f = mu.cdf(z[:-1])
    g = nu.cdf(z[:-1])
    return float(np.dot(np.abs(f - g), gaps))


# function aliases mirroring the operation names
def cdf_eval(mu: EmpiricalMeasure, x):
    return mu.cdf(x)


def shift_measure(mu: EmpiricalMeasure, q: float) -> EmpiricalMeasure:
    return mu.shift(q)


def mixture(mu: EmpiricalMeasure, nu: EmpiricalMeasure, lam: float) -> EmpiricalMeasure:
    return mu.mixture(nu, lam)


def second_moment(mu: EmpiricalMeasure) -> float:
    return mu.second_moment()
