"""Bit-flip fault campaigns on stored weight codes.

Trials never mutate the model: each evaluation works on a private copy of the
one affected accumulator column, then propagates only the rows whose codes
actually changed. This makes exhaustive scans cheap (most low-significance
flips perturb nothing after requantization) while staying code-for-code equal
to rebuilding the whole model with the flipped code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import landscape, nn
from .dataio import Dataset
from .fixedpoint import FixedPointFormat, code_bit_deltas, flip_code_bit
from .metrics import reconstruction_emd
from .modelio import QuantizedModel

SCAN_GUARD = 10**6
DEFAULT_TAU = 0.01
_EPS = 1e-12


@dataclass(frozen=True, order=True)
class BitAddress:
    """One stored bit: layer, flat parameter index within the layer block
    (row-major weights, then biases), bit position (0 = LSB)."""

    layer: int
    index: int
    bit: int


@dataclass(frozen=True)
class FaultTrial:
    addr: BitAddress
    baseline: float
    faulty: float
    degradation: float  # (faulty - baseline) / max(baseline, eps)


@dataclass(frozen=True)
class CampaignReport:
    trials: tuple[FaultTrial, ...]
    baseline: float
    metric: str
    tau: float
    sensitive_fraction: float
    bit_stats: dict[int, dict[str, float]]  # per bit position: count/mean/max/sensitive

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    def truth_set(self, tau: float | None = None) -> set[BitAddress]:
        t = self.tau if tau is None else tau
        return {tr.addr for tr in self.trials if tr.degradation > t}


@dataclass(frozen=True)
class SensitivityRanking:
    entries: tuple[tuple[BitAddress, float], ...]  # descending score
    k_eigenpairs: int

    @property
    def addresses(self) -> list[BitAddress]:
        return [a for a, _ in self.entries]


@dataclass(frozen=True)
class ProtectionPlan:
    """Register triplication choices. Protecting a bit costs two extra copies,
    so full protection of all B bits costs 2B extra bits (overhead fraction 2)."""

    protected: tuple[BitAddress, ...]
    total_bits: int
    residual_risk: float | None = None

    @property
    def overhead_bits(self) -> int:
        return 2 * len(self.protected)

    @property
    def overhead_fraction(self) -> float:
        return 2.0 * len(self.protected) / self.total_bits


def target_layers(model: QuantizedModel, layers: tuple[int, ...] | None = None) -> tuple[int, ...]:
    """Fault-exposed layers; defaults to the encoder (the deployed device)."""
    if layers is None:
        return tuple(range(model.spec.encoder_len))
    for l in layers:
        if not (0 <= l < len(model.spec.layers)):
            raise ValueError(f"layer {l} out of range")
    return tuple(layers)


def _param_count(model: QuantizedModel, layer: int) -> tuple[int, int]:
    l = model.spec.layers[layer]
    return l.out_dim * l.in_dim, l.out_dim


def _bit_width(model: QuantizedModel, layer: int, index: int) -> int:
    n_w, _ = _param_count(model, layer)
    fmts = model.spec.formats[layer]
    return (fmts.weight if index < n_w else fmts.bias).total_bits


def address_space(
    model: QuantizedModel, layers: tuple[int, ...] | None = None
) -> list[BitAddress]:
    """Every (layer, parameter, bit) address in enumeration order."""
    out = []
    for l in target_layers(model, layers):
        n_w, n_b = _param_count(model, l)
        w_bits = model.spec.formats[l].weight.total_bits
        b_bits = model.spec.formats[l].bias.total_bits
        for idx in range(n_w):
            for j in range(w_bits):
                out.append(BitAddress(l, idx, j))
        for idx in range(n_w, n_w + n_b):
            for j in range(b_bits):
                out.append(BitAddress(l, idx, j))
    return out


class FaultEvaluator:
    """Caches baseline activations/metrics for one (model, eval set, metric)
    and evaluates single-bit flips incrementally."""

    def __init__(self, model: QuantizedModel, data: Dataset, metric: str = "emd"):
        if metric not in ("emd", "mse"):
            raise ValueError(f"unknown metric {metric!r}")
        self.model = model
        self.metric = metric
        self.geometry = data.geometry
        self.x_ref = data.samples
        spec = model.spec
        from .fixedpoint import quantize_codes

        self.x_codes = quantize_codes(data.samples, spec.input_format)
        self.acts = model.forward_codes(self.x_codes)  # [input, a1, ..., aL]
        self.accs: list[np.ndarray] = []
        self.acc_frac: list[int] = []
        a = self.x_codes
        frac = spec.input_format.frac_bits
        for k in range(len(spec.layers)):
            fmts = spec.formats[k]
            s = fmts.weight.frac_bits + frac
            acc = a @ model.weight_codes[k].T
            acc = acc + (model.bias_codes[k] << (s - fmts.bias.frac_bits))
            self.accs.append(acc)
            self.acc_frac.append(s)
            a = self.acts[k + 1]
            frac = fmts.activation.frac_bits
        self.per_sample_baseline = self._metric_rows(self.acts[-1], np.arange(data.n))
        self.baseline = float(self.per_sample_baseline.mean())

    def _decode_out(self, out_codes: np.ndarray) -> np.ndarray:
        return out_codes * self.model.spec.formats[-1].activation.step

    def _metric_rows(self, out_codes: np.ndarray, rows: np.ndarray) -> np.ndarray:
        recon = self._decode_out(out_codes)
        if self.metric == "mse":
            d = recon - self.x_ref[rows]
            return np.mean(d * d, axis=1)
        return reconstruction_emd(self.x_ref[rows], recon, self.geometry)

    def _flip_delta(self, addr: BitAddress) -> tuple[int, int, int]:
        """(out neuron, in index or -1 for bias, code delta) for the flip."""
        model = self.model
        n_w, n_b = _param_count(model, addr.layer)
        fmts = model.spec.formats[addr.layer]
        if not (0 <= addr.index < n_w + n_b):
            raise ValueError(f"{addr} parameter index out of range")
        if addr.index < n_w:
            in_dim = model.spec.layers[addr.layer].in_dim
            o, i = divmod(addr.index, in_dim)
            code = int(model.weight_codes[addr.layer][o, i])
            flipped = flip_code_bit(code, addr.bit, fmts.weight)
            return o, i, flipped - code
        o = addr.index - n_w
        code = int(model.bias_codes[addr.layer][o])
        flipped = flip_code_bit(code, addr.bit, fmts.bias)
        return o, -1, flipped - code

    def faulty_metric(self, addr: BitAddress) -> float:
        """Mean metric with exactly one flipped stored code; the model itself
        is never touched."""
        model = self.model
        spec = model.spec
        k = addr.layer
        if not (0 <= k < len(spec.layers)):
            raise ValueError(f"{addr} layer out of range")
        o, i, dcode = self._flip_delta(addr)
        fmts = spec.formats[k]
        s = self.acc_frac[k]
        acc_col = self.accs[k][:, o].copy()
        if i >= 0:
            acc_col += dcode * self.acts[k][:, i]
        else:
            acc_col += dcode << (s - fmts.bias.frac_bits)
        new_col = nn.activation_codes(acc_col, s, spec.layers[k].activation, fmts.activation)
        changed = np.nonzero(new_col != self.acts[k + 1][:, o])[0]
        if changed.size == 0:
            return self.baseline
        a = self.acts[k + 1][changed].copy()
        a[:, o] = new_col[changed]
        for l in range(k + 1, len(spec.layers)):
            lf = spec.formats[l]
            s_l = self.acc_frac[l]
            acc = a @ model.weight_codes[l].T
            acc = acc + (model.bias_codes[l] << (s_l - lf.bias.frac_bits))
            a = nn.activation_codes(acc, s_l, spec.layers[l].activation, lf.activation)
        out_changed = np.nonzero(np.any(a != self.acts[-1][changed], axis=1))[0]
        if out_changed.size == 0:
            return self.baseline
        rows = changed[out_changed]
        new_vals = self._metric_rows(a[out_changed], rows)
        per_sample = self.per_sample_baseline.copy()
        per_sample[rows] = new_vals
        return float(per_sample.mean())

    def run_trial(self, addr: BitAddress) -> FaultTrial:
        m1 = self.faulty_metric(addr)
        delta = (m1 - self.baseline) / max(self.baseline, _EPS)
        return FaultTrial(addr=addr, baseline=self.baseline, faulty=m1, degradation=delta)


def flip_and_eval(
    model: QuantizedModel,
    addr: BitAddress,
    data: Dataset,
    metric: str = "emd",
    evaluator: FaultEvaluator | None = None,
) -> FaultTrial:
    """Evaluate one single-bit fault. Passing a prebuilt evaluator reuses the
    cached baseline across trials."""
    ev = evaluator if evaluator is not None else FaultEvaluator(model, data, metric)
    return ev.run_trial(addr)


def exhaustive_scan(
    model: QuantizedModel,
    data: Dataset,
    metric: str = "emd",
    tau: float = DEFAULT_TAU,
    layers: tuple[int, ...] | None = None,
) -> CampaignReport:
    """One trial per address in the fault address space."""
    addrs = address_space(model, layers)
    if len(addrs) > SCAN_GUARD:
        raise ValueError(
            f"address space has {len(addrs)} bits (> {SCAN_GUARD}); "
            "scan a subset of layers or sample addresses instead"
        )
    ev = FaultEvaluator(model, data, metric)
    trials = tuple(ev.run_trial(a) for a in addrs)
    return summarize_campaign(trials, ev.baseline, metric, tau)


def summarize_campaign(
    trials: tuple[FaultTrial, ...], baseline: float, metric: str, tau: float
) -> CampaignReport:
    deltas = np.array([t.degradation for t in trials])
    sensitive = deltas > tau
    bit_stats: dict[int, dict[str, float]] = {}
    by_bit: dict[int, list[int]] = {}
    for n, t in enumerate(trials):
        by_bit.setdefault(t.addr.bit, []).append(n)
    for b, idx in sorted(by_bit.items()):
        d = deltas[idx]
        bit_stats[b] = {
            "count": float(len(idx)),
            "mean_degradation": float(d.mean()),
            "max_degradation": float(d.max()),
            "sensitive": float(sensitive[idx].sum()),
        }
    return CampaignReport(
        trials=trials,
        baseline=baseline,
        metric=metric,
        tau=tau,
        sensitive_fraction=float(sensitive.mean()) if len(trials) else 0.0,
        bit_stats=bit_stats,
    )


def hessian_bit_rank(
    model: QuantizedModel,
    batch: tuple[np.ndarray, np.ndarray],
    k: int = 8,
    layers: tuple[int, ...] | None = None,
    seed: int = 0,
    max_iters: int = 200,
    tol: float = 1e-3,
) -> SensitivityRanking:
    """Rank every target bit by (top-k curvature of its parameter) x (squared
    value step of the flip at the stored code).

    The parameter score is the rank-k eigenreconstruction of the Hessian
    diagonal, sum_k max(lambda_k, 0) * v_k[i]^2; the bit factor is the squared
    value change a flip would cause given the currently stored code.
    """
    spec = model.spec
    theta = model.decode_params()
    hv = landscape.model_hvp(spec, theta, batch, deployed=True)
    summary = landscape.hessian_top_eigs(
        hv, theta.shape[0], k=k, tol=tol, max_iters=max_iters, seed=seed
    )
    diag = np.zeros(theta.shape[0])
    for pair in summary.eigenpairs:
        lam = max(pair.value, 0.0)
        diag += lam * pair.vector**2

    layout = nn.ParamLayout.of(spec)
    scored: list[tuple[BitAddress, float]] = []
    for l in target_layers(model, layers):
        fmts = spec.formats[l]
        n_w, n_b = _param_count(model, l)
        w_deltas = code_bit_deltas(model.weight_codes[l].reshape(-1), fmts.weight)
        b_deltas = code_bit_deltas(model.bias_codes[l], fmts.bias)
        s_w = diag[layout.w_offsets[l] : layout.w_offsets[l] + n_w]
        s_b = diag[layout.b_offsets[l] : layout.b_offsets[l] + n_b]
        for idx in range(n_w):
            for j in range(fmts.weight.total_bits):
                scored.append((BitAddress(l, idx, j), float(s_w[idx] * w_deltas[idx, j] ** 2)))
        for bi in range(n_b):
            for j in range(fmts.bias.total_bits):
                scored.append(
                    (BitAddress(l, n_w + bi, j), float(s_b[bi] * b_deltas[bi, j] ** 2))
                )
    order = sorted(range(len(scored)), key=lambda n: (-scored[n][1], n))
    return SensitivityRanking(entries=tuple(scored[n] for n in order), k_eigenpairs=k)


@dataclass(frozen=True)
class RankingQuality:
    recall_at_k: float | None
    auc: float | None
    k: int
    n_truth: int


def ranking_quality(
    ranking: SensitivityRanking, campaign: CampaignReport, k: int
) -> RankingQuality:
    """Recall@k of the ranking against the campaign's sensitive set, and the
    rank-based AUC of the score as a sensitivity classifier."""
    truth = campaign.truth_set()
    if not truth:
        return RankingQuality(recall_at_k=None, auc=None, k=k, n_truth=0)
    top = set(a for a, _ in ranking.entries[:k])
    recall = len(top & truth) / len(truth)

    scores = np.array([s for _, s in ranking.entries])
    labels = np.array([1.0 if a in truth else 0.0 for a, _ in ranking.entries])
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    pos = 1.0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        avg = (pos + pos + (j - i)) / 2.0
        ranks[order[i : j + 1]] = avg
        pos += j - i + 1
        i = j + 1
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    if n_neg == 0:
        return RankingQuality(recall_at_k=recall, auc=None, k=k, n_truth=int(n_pos))
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return RankingQuality(recall_at_k=recall, auc=float(auc), k=k, n_truth=int(n_pos))


def recall_curve(
    ranking: SensitivityRanking, campaign: CampaignReport, ks: list[int]
) -> list[tuple[int, float | None]]:
    return [(k, ranking_quality(ranking, campaign, k).recall_at_k) for k in ks]


def select_protection(
    ranking: SensitivityRanking,
    budget: float,
    campaign: CampaignReport | None = None,
) -> ProtectionPlan:
    """Protect the top floor(budget * B) ranked bits under the triplication
    cost model; budget 1.0 is full protection at overhead fraction 2.0."""
    if not (0.0 <= budget <= 1.0):
        raise ValueError("budget must be in [0, 1]")
    total = len(ranking.entries)
    n_protect = int(np.floor(budget * total))
    protected = tuple(a for a, _ in ranking.entries[:n_protect])
    residual = None
    if campaign is not None:
        prot = set(protected)
        residual = float(
            sum(t.degradation for t in campaign.trials if t.degradation > campaign.tau and t.addr not in prot)
        )
    return ProtectionPlan(protected=protected, total_bits=total, residual_risk=residual)
