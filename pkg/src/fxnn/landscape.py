"""Loss-landscape characterization: leading Hessian eigenpairs by deflated
power iteration, Hutchinson trace estimates, and 2-D loss-surface slices along
filter-normalized random directions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .fixedpoint import quantize

HvpFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EigenPair:
    value: float
    vector: np.ndarray
    residual: float  # |Hv - lambda v| / |lambda|
    converged: bool
    iterations: int


@dataclass(frozen=True)
class HessianSummary:
    top_eigenvalues: tuple[float, ...]
    eigenpairs: tuple[EigenPair, ...]
    trace_estimate: float | None = None
    trace_stderr: float | None = None
    n_probes: int = 0


@dataclass(frozen=True)
class SliceGrid:
    d1: np.ndarray
    d2: np.ndarray
    extent: float
    losses: np.ndarray  # (r, r): losses[i, j] = L(theta + a_i d1 + b_j d2)
    coords: np.ndarray  # the shared r-point axis for a and b


def model_hvp(
    spec: nn.ModelSpec,
    theta: np.ndarray,
    batch: tuple[np.ndarray, np.ndarray],
    deployed: bool = True,
) -> HvpFn:
    """Curvature operator of the training loss around a parameter point.

    With ``deployed=True`` the operator is the smooth-loss Hessian evaluated at
    the quantized parameters, which is what differentiating the straight-through
    training graph twice yields; the straight-through gradient field itself is
    piecewise constant in theta, so finite differences taken directly on it
    would vanish. ``deployed=False`` evaluates at theta unquantized.
    """
    if deployed:
        layout = nn.ParamLayout.of(spec)
        point = theta.copy()
        for k in range(len(spec.layers)):
            fmts = spec.formats[k]
            layout.weights(point, k)[:] = quantize(layout.weights(theta, k), fmts.weight)
            layout.biases(point, k)[:] = quantize(layout.biases(theta, k), fmts.bias)
    else:
        point = theta

    def hv(v: np.ndarray) -> np.ndarray:
        return nn.hvp(spec, point, batch, v, mode="float")

    return hv


def hessian_top_eigs(
    hvp_fn: HvpFn,
    dim: int,
    k: int = 1,
    tol: float = 1e-3,
    max_iters: int = 200,
    seed: int = 0,
) -> HessianSummary:
    """Deflated power iteration on the Hessian-vector operator. Eigenvalues are
    returned in descending |lambda| order with per-pair residuals; pairs that
    fail the relative-residual tolerance are flagged, not dropped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    rng = np.random.default_rng(seed)
    found: list[EigenPair] = []
    basis: list[np.ndarray] = []
    for _ in range(k):
        v = rng.standard_normal(dim)
        for b in basis:
            v -= (v @ b) * b
        v /= np.linalg.norm(v)
        lam = 0.0
        residual = np.inf
        converged = False
        it = 0
        for it in range(1, max_iters + 1):
            hv = hvp_fn(v)
            for pair, b in zip(found, basis):
                hv -= pair.value * (b @ v) * b  # deflate converged directions
            lam = float(v @ hv)
            r = hv - lam * v
            residual = float(np.linalg.norm(r) / max(abs(lam), 1e-300))
            if residual <= tol:
                converged = True
                break
            nrm = np.linalg.norm(hv)
            if nrm == 0.0:
                lam = 0.0
                residual = 0.0
                converged = True
                break
            v = hv / nrm
            for b in basis:
                v -= (v @ b) * b
            v /= np.linalg.norm(v)
        found.append(EigenPair(lam, v.copy(), residual, converged, it))
        basis.append(v.copy())
    found.sort(key=lambda p: -abs(p.value))
    return HessianSummary(
        top_eigenvalues=tuple(p.value for p in found),
        eigenpairs=tuple(found),
    )


def hessian_trace(
    hvp_fn: HvpFn,
    dim: int,
    n_probes: int = 100,
    seed: int = 0,
) -> tuple[float, float]:
    """Hutchinson estimator: mean of v^T H v over Rademacher probes, with the
    Monte Carlo standard error of that mean."""
    if n_probes < 2:
        raise ValueError("need at least 2 probes for a standard error")
    rng = np.random.default_rng(seed)
    samples = np.empty(n_probes)
    for i in range(n_probes):
        v = rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0
        samples[i] = v @ hvp_fn(v)
    est = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(n_probes))
    return est, stderr


def hessian_summary(
    spec: nn.ModelSpec,
    theta: np.ndarray,
    batch: tuple[np.ndarray, np.ndarray],
    k: int = 1,
    tol: float = 1e-3,
    max_iters: int = 200,
    n_probes: int = 100,
    seed: int = 0,
    deployed: bool = True,
) -> HessianSummary:
    """Eigenvalues plus trace of a model's loss curvature in one report."""
    hv = model_hvp(spec, theta, batch, deployed=deployed)
    dim = theta.shape[0]
    eig = hessian_top_eigs(hv, dim, k=k, tol=tol, max_iters=max_iters, seed=seed)
    tr, stderr = hessian_trace(hv, dim, n_probes=n_probes, seed=seed)
    return HessianSummary(
        top_eigenvalues=eig.top_eigenvalues,
        eigenpairs=eig.eigenpairs,
        trace_estimate=tr,
        trace_stderr=stderr,
        n_probes=n_probes,
    )


def _filter_normalized_direction(
    spec: nn.ModelSpec, theta: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Random direction rescaled per layer block so each block's norm matches
    the corresponding parameter block norm."""
    layout = nn.ParamLayout.of(spec)
    d = rng.standard_normal(theta.shape[0])
    for k in range(len(spec.layers)):
        sl = layout.layer_slice(k)
        ref = np.linalg.norm(theta[sl])
        if ref == 0.0:
            raise ValueError(f"layer {k} has zero parameter norm; cannot filter-normalize")
        d[sl] *= ref / np.linalg.norm(d[sl])
    return d


def loss_slice_2d(
    spec: nn.ModelSpec,
    theta: np.ndarray,
    batch: tuple[np.ndarray, np.ndarray],
    extent: float = 1.0,
    resolution: int = 21,
    seed: int = 0,
    mode: str = "fake-quant",
) -> SliceGrid:
    """Loss surface on a 2-D slice through theta spanned by two seeded,
    filter-normalized, orthogonalized directions."""
    if resolution % 2 != 1:
        raise ValueError("resolution must be odd so the center cell exists")
    if extent <= 0:
        raise ValueError("extent must be > 0")
    rng = np.random.default_rng(seed)
    d1 = _filter_normalized_direction(spec, theta, rng)
    d2 = _filter_normalized_direction(spec, theta, rng)
    d2 = d2 - (d1 @ d2) / (d1 @ d1) * d1
    coords = np.linspace(-extent, extent, resolution)
    losses = np.empty((resolution, resolution))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            point = theta + a * d1 + b * d2
            loss, _ = nn.loss_and_grad(spec, point, batch, mode=mode)
            losses[i, j] = loss
    return SliceGrid(d1=d1, d2=d2, extent=extent, losses=losses, coords=coords)
