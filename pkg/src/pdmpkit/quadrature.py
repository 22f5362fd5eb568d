"""Gauss-Radau panel quadrature used along characteristics.

Right-endpoint Radau rules put the last node of every panel exactly on the
panel edge, so the final node of a characteristic sits on the outgoing
boundary and traces there are plain node readings.  The same nodes serve as
collocation points for the transport ODEs along characteristics; because the
last row of the collocation matrix equals the quadrature weights, discrete
balance identities telescope across panels without remainder.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import roots_jacobi


@lru_cache(maxsize=None)
def radau_right(k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stage nodes, weights and integration matrix of the k-stage rule on (0, 1].

    Returns ``(c, b, A)``: abscissae ``c`` with ``c[-1] == 1``, quadrature
    weights ``b`` (exact for polynomials up to degree ``2k - 2``), and
    ``A[i, j] = int_0^{c_i} L_j(t) dt`` for the Lagrange basis ``L_j`` on the
    nodes.  ``A[-1] == b``, which is what makes panel updates conservative.
    """
    if not 2 <= k <= 9:
        raise ValueError(f"stage order must be in [2, 9], got {k}")
    # Interior nodes are the mirror image of the left-Radau Jacobi(0,1) points.
    xj, _ = roots_jacobi(k - 1, 0.0, 1.0)
    nodes = np.sort(np.concatenate([-xj, [1.0]]))
    c = 0.5 * (nodes + 1.0)
    # Weights by moment matching; well conditioned for k <= 9.
    V = np.vander(c, k, increasing=True).T
    b = np.linalg.solve(V, 1.0 / np.arange(1, k + 1))
    A = np.empty((k, k))
    for j in range(k):
        others = np.delete(c, j)
        coeffs = npoly.polyfromroots(others) / np.prod(c[j] - others)
        prim = npoly.polyint(coeffs)
        A[:, j] = npoly.polyval(c, prim) - npoly.polyval(0.0, prim)
    return c, b, A


@lru_cache(maxsize=None)
def lagrange_eval_weights(k: int, at: float) -> np.ndarray:
    """Weights w with p(at) = sum w_j p(c_j) for polynomials on the stage nodes.

    ``at`` is in panel-local coordinates (0 = left edge, 1 = right edge);
    values outside [min(c), 1] extrapolate.
    """
    c, _, _ = radau_right(k)
    w = np.empty(k)
    for j in range(k):
        others = np.delete(c, j)
        w[j] = np.prod((at - others) / (c[j] - others))
    return w


@dataclass(frozen=True)
class PanelPlan:
    """Panel edges for a 1-D composite rule, built from (start, stop, step) runs.

    Each segment is subdivided into ``ceil((stop-start)/step)`` equal panels,
    so the requested step is an upper bound on the panel size.
    """

    segments: tuple[tuple[float, float, float], ...]

    def edges(self) -> np.ndarray:
        pieces = [np.array([self.segments[0][0]])]
        for start, stop, step in self.segments:
            if stop <= start or step <= 0:
                raise ValueError(f"bad plan segment ({start}, {stop}, {step})")
            n = max(1, int(np.ceil((stop - start) / step - 1e-12)))
            pieces.append(np.linspace(start, stop, n + 1)[1:])
        return np.concatenate(pieces)


def uniform_plan(length: float, step: float, first_panel: float | None = None,
                 tail: tuple[float, float] | None = None) -> PanelPlan:
    """Uniform panels of size <= step over (0, length], with optional grading.

    ``first_panel`` inserts one small panel at the origin (sharper one-sided
    extrapolation to the incoming boundary); ``tail = (start, step)`` coarsens
    panels beyond ``start``.
    """
    segs: list[tuple[float, float, float]] = []
    lo = 0.0
    if first_panel and first_panel < length:
        segs.append((0.0, first_panel, first_panel))
        lo = first_panel
    if tail is not None and tail[0] < length:
        t0, tstep = tail
        if t0 > lo:
            segs.append((lo, t0, step))
        segs.append((max(t0, lo), length, tstep))
    else:
        segs.append((lo, length, step))
    return PanelPlan(tuple(segs))
