"""Mixing matrices for simulated agent networks.

Every builder returns a :class:`MixingMatrix`, which is only ever constructed
from a weight matrix that passed :func:`validate_mixing`.  Builders never
repair a bad matrix; a custom file with row sums off by 1e-6 is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np

STOCHASTIC_TOL = 1e-12
# eigenvalues this close to 1 in magnitude count as 1 for the simplicity check
EIGEN_TOL = 1e-10

TOPOLOGY_KINDS = ("complete", "ring_adjusted", "ring", "five_peer", "torus", "custom")


class TopologyError(ValueError):
    """Raised when a mixing matrix cannot be built or fails validation."""


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    informational: bool = False

    def __str__(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        if self.informational:
            flag = "INFO"
        return f"{flag} {self.name}: {self.detail}"


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Symmetric doubly stochastic weight matrix with cached spectral data.

    Instances are read-only; the weight array has its write flag cleared.
    """

    w: np.ndarray
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues in descending order."""
        return np.linalg.eigvalsh(self.w)[::-1]

    @cached_property
    def rho(self) -> float:
        # for symmetric doubly stochastic W, ||W - 11^T/n||_2 = max(|lambda_2|, |lambda_n|)
        if self.n == 1:
            return 0.0
        avg = np.full((self.n, self.n), 1.0 / self.n)
        lam = np.linalg.eigvalsh(self.w - avg)
        return float(np.max(np.abs(lam)))

    @property
    def gap(self) -> float:
        return 1.0 - self.rho

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[-1])

    def shifted(self) -> "MixingMatrix":
        """Lazy mixing (I + W) / 2; its spectrum lies in (0, 1] whenever W has
        no eigenvalue -1."""
        w = 0.5 * (np.eye(self.n) + self.w)
        return MixingMatrix(w, kind=self.kind, params={**self.params, "pd_shift": True})

    def __repr__(self) -> str:
        return f"MixingMatrix(kind={self.kind!r}, n={self.n}, rho={self.rho:.6g})"


def validate_mixing(w) -> list[CheckResult]:
    """Run the mixing-matrix checks and report each one.

    Never raises for a square input; the caller decides what to do with a
    failed check.  The positive-definiteness line is informational.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        return [CheckResult("square", False, f"shape {w.shape}")]
    n = w.shape[0]
    ones = np.ones(n)
    results = [CheckResult("square", True, f"n={n}")]

    asym = float(np.max(np.abs(w - w.T))) if n else 0.0
    results.append(CheckResult("symmetric", asym == 0.0, f"max|w_ij - w_ji| = {asym:.3g}"))

    wmin = float(w.min())
    results.append(CheckResult("nonnegative", wmin >= 0.0, f"min entry = {wmin:.3g}"))

    row_err = float(np.max(np.abs(w @ ones - 1.0)))
    col_err = float(np.max(np.abs(ones @ w - 1.0)))
    results.append(CheckResult("row_stochastic", row_err <= STOCHASTIC_TOL, f"max|W1 - 1| = {row_err:.3g}"))
    results.append(CheckResult("column_stochastic", col_err <= STOCHASTIC_TOL, f"max|1^T W - 1^T| = {col_err:.3g}"))

    if not np.all(np.isfinite(w)):
        results.append(CheckResult("strongly_connected", False, "non-finite entries"))
        return results

    # symmetrize only for the spectral probe; asymmetry is already reported above
    lam = np.linalg.eigvalsh(0.5 * (w + w.T))
    n_unit = int(np.sum(np.abs(np.abs(lam) - 1.0) <= EIGEN_TOL))
    others = np.sort(np.abs(lam))[:-1] if n > 1 else np.array([])
    rho = float(others.max()) if others.size else 0.0
    connected = n_unit == 1 and (rho < 1.0 - EIGEN_TOL or n == 1)
    results.append(
        CheckResult("strongly_connected", connected, f"rho = {rho:.12g}, unit-modulus eigenvalues = {n_unit}")
    )

    lam_min = float(lam.min())
    if lam_min > 0:
        detail = f"strictly PD, lambda_min = {lam_min:.6g}"
    elif lam_min > -EIGEN_TOL:
        detail = f"not strictly PD (PSD), lambda_min = {lam_min:.3g}"
    else:
        detail = f"indefinite, lambda_min = {lam_min:.6g}"
    results.append(CheckResult("positive_definite", lam_min > 0, detail, informational=True))
    return results


def _checked(w: np.ndarray, kind: str, params: dict) -> MixingMatrix:
    for check in validate_mixing(w):
        if not check.passed and not check.informational:
            raise TopologyError(f"{kind}: check '{check.name}' failed ({check.detail})")
    return MixingMatrix(w, kind=kind, params=params)


def complete(n: int) -> np.ndarray:
    return np.full((n, n), 1.0 / n)


def ring_adjusted(n: int, a: float) -> np.ndarray:
    """Circulant ring: weight ``a`` on self, ``(1-a)/2`` on each neighbor."""
    if not 0.0 < a < 1.0:
        raise TopologyError(f"ring_adjusted needs 0 < a < 1, got a={a}")
    if n < 3:
        raise TopologyError(f"ring_adjusted needs n >= 3, got n={n}")
    w = np.zeros((n, n))
    idx = np.arange(n)
    w[idx, idx] = a
    w[idx, (idx + 1) % n] += (1.0 - a) / 2.0
    w[idx, (idx - 1) % n] += (1.0 - a) / 2.0
    return w


def five_peer(n: int) -> np.ndarray:
    """Weight 0.2 on self and the two nearest peers on each side."""
    if n < 5:
        raise TopologyError(f"five_peer needs n >= 5, got n={n}")
    w = np.zeros((n, n))
    idx = np.arange(n)
    for off in (-2, -1, 0, 1, 2):
        w[idx, (idx + off) % n] += 0.2
    return w


def torus(rows: int, cols: int) -> np.ndarray:
    """2-D wrap-around grid, weight 1/5 on self and each of the 4 neighbors.

    Duplicate neighbors on grids thinner than 3 accumulate weight, which keeps
    every row summing to one.
    """
    if rows < 1 or cols < 1:
        raise TopologyError(f"torus needs positive rows/cols, got {rows}x{cols}")
    n = rows * cols
    w = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            w[i, i] += 0.2
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                j = ((r + dr) % rows) * cols + (c + dc) % cols
                w[i, j] += 0.2
    return w


def load_matrix(path: Union[str, Path]) -> np.ndarray:
    """Read the plain-text format: first line n, then n rows of n decimals."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise TopologyError(f"{path}: empty file")
    try:
        n = int(lines[0].strip())
    except ValueError as exc:
        raise TopologyError(f"{path}: first line must be the agent count") from exc
    rows = [ln.split() for ln in lines[1:]]
    if len(rows) != n or any(len(row) != n for row in rows):
        raise TopologyError(f"{path}: dimension mismatch, expected {n} rows of {n} values")
    return np.array([[float(v) for v in row] for row in rows])


def save_matrix(path: Union[str, Path], w) -> None:
    w = np.asarray(w, dtype=float)
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in w)
    Path(path).write_text(f"{w.shape[0]}\n{body}\n")


def build_topology(kind: str, n: int | None = None, **params) -> MixingMatrix:
    """Build and validate a named topology.

    ``ring`` is shorthand for ``ring_adjusted`` with ``a = 1/3``.  ``torus``
    takes ``rows`` and ``cols`` (``n`` may be omitted or must equal their
    product).  ``custom`` takes ``path``.  ``ring_adjusted`` also accepts
    ``rho`` in place of ``a``; see :func:`ring_weight_for_rho`.
    """
    kind = kind.replace("-", "_")
    if kind == "custom":
        if "path" not in params:
            raise TopologyError("custom topology needs a 'path' parameter")
        w = load_matrix(params["path"])
        if n is not None and w.shape[0] != n:
            raise TopologyError(f"custom matrix has n={w.shape[0]}, config expects n={n}")
        return _checked(w, kind, dict(params))
    if kind == "torus":
        rows, cols = int(params.get("rows", 0)), int(params.get("cols", 0))
        if n is not None and rows * cols != n:
            raise TopologyError(f"torus {rows}x{cols} does not have n={n} agents")
        return _checked(torus(rows, cols), kind, {"rows": rows, "cols": cols})
    if n is None or n < 1:
        raise TopologyError(f"{kind} needs a positive agent count, got n={n}")
    if kind == "complete":
        return _checked(complete(n), kind, {})
    if kind == "ring":
        kind, params = "ring_adjusted", {"a": 1.0 / 3.0}
    if kind == "ring_adjusted":
        if "rho" in params and "a" not in params:
            a = ring_weight_for_rho(n, float(params["rho"]))
        else:
            a = float(params.get("a", 1.0 / 3.0))
        return _checked(ring_adjusted(n, a), "ring_adjusted", {"a": a})
    if kind == "five_peer":
        return _checked(five_peer(n), kind, {})
    raise TopologyError(f"unknown topology kind {kind!r}; expected one of {TOPOLOGY_KINDS}")


def spectral_gap(m: MixingMatrix) -> float:
    """``1 - max(|lambda_2|, |lambda_n|)`` from a symmetric eigendecomposition."""
    try:
        return m.gap
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigensolver failed for {m!r}") from exc


def ring_rho(n: int, a: float) -> float:
    """Closed-form rho of the adjusted ring via its circulant spectrum."""
    k = np.arange(1, n)
    return float(np.max(np.abs(a + (1.0 - a) * np.cos(2.0 * np.pi * k / n))))


def ring_weight_for_rho(n: int, rho: float) -> float:
    """Self-weight ``a`` of the adjusted ring whose rho equals ``rho``.

    rho(a) is V-shaped in ``a``: the slowest positive mode ``a + (1-a)cos(2pi/n)``
    rises with ``a`` while the most negative mode falls.  The root on the
    rising branch (larger self-weight) is preferred.  Targets below the
    minimum of the V cannot be realized and raise :class:`TopologyError`.
    """
    if n < 3:
        raise TopologyError("ring_adjusted needs n >= 3")
    if not 0.0 <= rho < 1.0:
        raise TopologyError(f"target rho must lie in [0, 1), got {rho}")
    k = np.arange(1, n)
    c1 = np.cos(2.0 * np.pi / n)
    cmin = abs(float(np.min(np.cos(2.0 * np.pi * k / n))))
    candidates = [(rho - c1) / (1.0 - c1), (cmin - rho) / (1.0 + cmin)]
    for a in candidates:
        if 0.0 < a < 1.0 and abs(ring_rho(n, a) - rho) <= 1e-12:
            return float(a)
    a_star = (cmin - c1) / (2.0 - c1 + cmin)
    raise TopologyError(
        f"rho={rho} is not attainable by ring_adjusted with n={n} (minimum {ring_rho(n, a_star):.4f})"
    )
