"""Physics-performance and representation metrics: exact Earth Mover's
Distance, linear CKA similarity, and activation-pattern neural efficiency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._transport import emd_cost, emd_cost_rows, ssp_transport
from .dataio import Dataset, GridGeometry
from . import nn

_MASS_TOL = 1e-9
_MAX_CELLS = 256


@dataclass(frozen=True)
class TransportPlan:
    """Optimal flows (source cell, target cell, mass) and their total cost.
    Mass shared between p and q stays in place as zero-cost diagonal flow, so
    the marginals reproduce p and q exactly."""

    flows: tuple[tuple[int, int, float], ...]
    cost: float

    def marginals(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        p = np.zeros(c)
        q = np.zeros(c)
        for i, j, m in self.flows:
            p[i] += m
            q[j] += m
        return p, q


@dataclass(frozen=True)
class CkaResult:
    value: float
    n: int
    layers: tuple[int, int] | None = None


@dataclass(frozen=True)
class EfficiencyReport:
    per_layer: tuple[float, ...]
    aggregate: float


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"{name} must be 1-D")
    if np.any(p < 0):
        raise ValueError(f"{name} must be nonnegative")
    if abs(p.sum() - 1.0) > _MASS_TOL:
        raise ValueError(f"{name} must sum to 1 within {_MASS_TOL}, got {p.sum()!r}")
    return p


def emd_1d(p: np.ndarray, q: np.ndarray, positions: np.ndarray) -> float:
    """Exact 1-D Wasserstein-1 via the CDF identity
    sum_i |P(i) - Q(i)| * (pos[i+1] - pos[i]) for sorted positions."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != p.shape or q.shape != p.shape:
        raise ValueError("p, q and positions must share a length")
    if np.any(np.diff(pos) < 0):
        raise ValueError("positions must be sorted ascending")
    cdf_gap = np.cumsum(p - q)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(pos)))


def emd_exact(
    p: np.ndarray, q: np.ndarray, geometry: GridGeometry | np.ndarray
) -> tuple[float, TransportPlan]:
    """Exact 2-D Earth Mover's Distance with Euclidean ground metric between
    cell coordinates, solved by successive shortest paths on the bipartite
    excess/deficit graph. Returns the cost and the full transport plan."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    geom = geometry if isinstance(geometry, GridGeometry) else GridGeometry(np.asarray(geometry))
    c = geom.n_cells
    if p.shape[0] != c or q.shape[0] != c:
        raise ValueError(f"distributions must have {c} cells")
    if c > _MAX_CELLS:
        raise ValueError(f"cell count {c} exceeds the exact-solver limit {_MAX_CELLS}")
    dist = geom.distance_matrix()

    shared = np.minimum(p, q)
    diff = p - q
    src = np.where(diff > 0)[0]
    tgt = np.where(diff < 0)[0]
    flows: list[tuple[int, int, float]] = [
        (int(i), int(i), float(shared[i])) for i in np.where(shared > 0)[0]
    ]
    if src.size == 0 or tgt.size == 0:
        return 0.0, TransportPlan(flows=tuple(flows), cost=0.0)
    cost, flow = ssp_transport(
        diff[src].copy(), -diff[tgt].copy(), np.ascontiguousarray(dist[np.ix_(src, tgt)])
    )
    for a, i in enumerate(src):
        for b, j in enumerate(tgt):
            if flow[a, b] > 0:
                flows.append((int(i), int(j), float(flow[a, b])))
    return float(cost), TransportPlan(flows=tuple(flows), cost=float(cost))


def emd_batch(P: np.ndarray, Q: np.ndarray, geometry: GridGeometry) -> np.ndarray:
    """Per-row exact EMD between two sample matrices (cost only, parallel)."""
    P = np.ascontiguousarray(P, dtype=np.float64)
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError("sample matrices must have equal shapes")
    rows = np.arange(P.shape[0], dtype=np.int64)
    return emd_cost_rows(P, Q, geometry.distance_matrix(), rows)


def reconstruction_emd(
    inputs: np.ndarray, outputs: np.ndarray, geometry: GridGeometry
) -> np.ndarray:
    """Per-sample EMD between reference inputs and decoded reconstructions.

    Reconstructions are renormalized to unit mass before the transport solve;
    an all-zero reconstruction is scored against the uniform distribution."""
    inputs = np.asarray(inputs, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64)
    sums = outputs.sum(axis=1, keepdims=True)
    c = outputs.shape[1]
    normed = np.where(sums > 1e-12, outputs / np.where(sums > 0, sums, 1.0), 1.0 / c)
    return emd_batch(inputs, normed, geometry)


def linear_cka(X: np.ndarray, Y: np.ndarray, layers: tuple[int, int] | None = None) -> CkaResult:
    """Linear centered kernel alignment between two activation matrices:
    |Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F) after column centering."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("activations must be 2-D (samples x features)")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"sample counts differ: {X.shape[0]} vs {Y.shape[0]}")
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    xx = np.linalg.norm(Xc.T @ Xc)
    yy = np.linalg.norm(Yc.T @ Yc)
    if xx == 0 or yy == 0:
        raise ValueError("zero-variance activations")
    xy = np.linalg.norm(Yc.T @ Xc)
    return CkaResult(value=float(xy * xy / (xx * yy)), n=n, layers=layers)


def _binarize(act: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return act > 0
    if activation == "sigmoid":
        return act > 0.5
    return act > np.median(act, axis=0)


def pattern_entropy(patterns: np.ndarray) -> float:
    """Shannon entropy (bits) of the empirical distribution of binary rows."""
    _, counts = np.unique(patterns, axis=0, return_counts=True)
    freq = counts / counts.sum()
    return float(-(freq * np.log2(freq)).sum())


def neural_efficiency(
    spec: nn.ModelSpec,
    theta: np.ndarray,
    data: Dataset | np.ndarray,
    mode: str = "fake-quant",
) -> EfficiencyReport:
    """Per-layer utilization: entropy of observed binary activation patterns
    over the dataset divided by the neuron count, aggregated geometrically."""
    X = data.samples if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if X.shape[0] < 1:
        raise ValueError("dataset must be nonempty")
    acts = nn.forward(spec, theta, X, mode=mode)
    etas = []
    for k, layer in enumerate(spec.layers):
        pat = _binarize(acts[k + 1], layer.activation)
        etas.append(pattern_entropy(pat) / layer.out_dim)
    agg = float(np.exp(np.mean(np.log(np.maximum(etas, 1e-300))))) if etas else 0.0
    if min(etas) == 0.0:
        agg = 0.0
    return EfficiencyReport(per_layer=tuple(etas), aggregate=agg)
