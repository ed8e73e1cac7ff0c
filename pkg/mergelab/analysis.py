"""Derived quantities and landscape sweeps for merge experiments."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from mergelab import merge, nets
from mergelab.data import Dataset
from mergelab.nets import ParamVector
from mergelab.tensor_core import hessian_vector_product, precision

logger = logging.getLogger(__name__)

TRANSITION_KINDS = ("hill", "flat", "valley")
LINEAR_GRID = tuple(np.linspace(0.0, 1.0, 21).tolist())
TASK_GRID = tuple(round(0.1 * i, 10) for i in range(11))
EXTRAPOLATION_GRID = tuple(round(0.1 * i, 10) for i in range(16))
COLLAPSE_BINS = 8


# ----------------------------------------------------------------------
# Records
@dataclass(frozen=True)
class SweepPoint:
    alpha: float
    loss: float
    accuracy: float
    per_task: tuple[float, ...] = ()
    normalized_accuracy: float = math.nan


@dataclass
class MergeReport:
    """One merge event: a config, a checkpoint and the merged/endpoint metrics."""

    config_id: str
    s_tilde: float
    checkpoint_epoch: int
    eta: float = math.nan
    batch_size: int = 0
    momentum: float = math.nan
    weight_decay: float = math.nan
    augment: str = "off"
    seed: int = 0
    alpha: float = 0.5
    method: str = "linear"
    loss_merged: float = math.nan
    acc_merged: float = math.nan
    loss_a: float = math.nan
    acc_a: float = math.nan
    loss_b: float = math.nan
    acc_b: float = math.nan
    train_loss_merged: float = math.nan
    train_loss_a: float = math.nan
    train_loss_b: float = math.nan
    train_acc_merged: float = math.nan
    train_acc_a: float = math.nan
    train_acc_b: float = math.nan
    gain_mean: float = math.nan
    gain_a: float = math.nan
    gain_b: float = math.nan
    barrier: float = math.nan
    dip: float = math.nan
    transition: str = ""
    diverged: bool = False
    records: list[SweepPoint] = field(default_factory=list)


@dataclass
class SweepResult:
    reports: list[MergeReport]
    bins: int = COLLAPSE_BINS

    def cells(self) -> list["CellSummary"]:
        """Median gain per (config, seed) over its checkpoints, recomputed from the reports."""
        groups: dict[tuple[str, int], list[MergeReport]] = {}
        for report in self.reports:
            groups.setdefault((report.config_id, report.seed), []).append(report)
        out = []
        for (config_id, seed), reports in sorted(groups.items()):
            gains = [r.gain_mean for r in reports if not r.diverged and math.isfinite(r.gain_mean)]
            first = reports[0]
            out.append(
                CellSummary(
                    config_id=config_id,
                    seed=seed,
                    eta=first.eta,
                    batch_size=first.batch_size,
                    s_tilde=first.s_tilde,
                    median_gain=float(np.median(gains)) if gains else math.nan,
                    diverged=any(r.diverged for r in reports),
                )
            )
        return out


@dataclass(frozen=True)
class CellSummary:
    config_id: str
    seed: int
    eta: float
    batch_size: int
    s_tilde: float
    median_gain: float
    diverged: bool = False


# ----------------------------------------------------------------------
# Scalar metrics
def performance_gain(
    f_merged: float,
    f_singles: Sequence[float],
    baseline: str = "mean",
    *,
    higher_is_better: bool = True,
) -> float:
    """f_merged − baseline(f_singles).

    ``best`` picks the better single model (max for accuracies, min for
    losses); with losses a negative gain means the merge helped.
    """
    singles = [float(f) for f in f_singles]
    if not singles:
        raise ValueError("Need at least one single-model metric")
    if baseline == "mean":
        base = float(np.mean(singles))
    elif baseline == "first":
        base = singles[0]
    elif baseline == "max":
        base = max(singles)
    elif baseline == "best":
        base = max(singles) if higher_is_better else min(singles)
    else:
        raise ValueError(f"Unknown baseline {baseline!r}")
    return float(f_merged) - base


def normalized_accuracy(acc_merged: float | Sequence[float], acc_singles: Sequence[float]) -> float:
    """Mean over tasks of merged accuracy divided by single-model accuracy."""
    singles = np.asarray(acc_singles, dtype=np.float64)
    if singles.size == 0:
        raise ValueError("Need at least one task")
    if np.any(singles <= 0):
        raise ValueError("Single-model accuracies must be positive")
    merged = np.broadcast_to(np.asarray(acc_merged, dtype=np.float64), singles.shape)
    return float(np.mean(merged / singles))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError(f"Need two equal-length series of at least 2 points, got {x.size} and {y.size}")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt(dx @ dx))
    sy = float(np.sqrt(dy @ dy))
    if sx == 0 or sy == 0:
        raise ValueError("Pearson correlation is undefined for a constant series")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


# ----------------------------------------------------------------------
# Interpolation paths
def alpha_sweep(
    model_at: Callable[[float], ParamVector],
    grid: Sequence[float],
    dataset: Dataset,
    *,
    per_task: Sequence[Dataset] = (),
    singles: Sequence[float] = (),
) -> list[SweepPoint]:
    """Evaluate ``model_at(α)`` on a fixed set for every α of ``grid``.

    ``per_task`` sets add per-task accuracies; with ``singles`` (single-model
    accuracies per task) the normalized accuracy is filled in as well.
    """
    if len(grid) < 3:
        raise ValueError(f"An alpha sweep needs at least 3 points, got {len(grid)}")
    points = []
    for alpha in grid:
        model = model_at(float(alpha))
        loss, acc = nets.evaluate(model, dataset.inputs, dataset.labels)
        task_accs = tuple(nets.evaluate(model, t.inputs, t.labels)[1] for t in per_task)
        norm = normalized_accuracy(task_accs, singles) if task_accs and singles else math.nan
        points.append(SweepPoint(float(alpha), loss, acc, task_accs, norm))
    return points


def linear_path(
    theta_a: ParamVector,
    theta_b: ParamVector,
    dataset: Dataset,
    grid: Sequence[float] = LINEAR_GRID,
    *,
    policy: str = "interpolate",
    stats_data: Optional[Dataset] = None,
) -> list[SweepPoint]:
    theta_a.require_compatible(theta_b)

    def _at(alpha: float) -> ParamVector:
        return merge.linear_interpolate(theta_a, theta_b, alpha, policy=policy, dataset=stats_data)

    return alpha_sweep(_at, grid, dataset)


@dataclass(frozen=True)
class Transition:
    kind: str
    barrier: float
    dip: float
    threshold: float


def classify_transition(
    curve: Sequence[float] | Sequence[SweepPoint],
    tau_rel: float = 0.05,
    floor: float = 1e-3,
) -> Transition:
    """Hill, flat or valley shape of a loss curve over α ∈ [0, 1].

    Plain float sequences are taken as a uniform grid from α = 0 to α = 1;
    sweep points outside [0, 1] are ignored. Non-finite losses count as +inf.
    """
    if curve and isinstance(curve[0], SweepPoint):
        inside = sorted((p for p in curve if 0.0 <= p.alpha <= 1.0), key=lambda p: p.alpha)
        if not inside or inside[0].alpha != 0.0 or inside[-1].alpha != 1.0:
            raise ValueError("Curve must include alpha = 0 and alpha = 1")
        losses = np.array([p.loss for p in inside], dtype=np.float64)
    else:
        losses = np.array(curve, dtype=np.float64)
    if losses.size < 3:
        raise ValueError(f"Need at least 3 curve points, got {losses.size}")
    losses = np.where(np.isfinite(losses), losses, np.inf)
    l0, l1 = losses[0], losses[-1]
    barrier = float(losses.max() - max(l0, l1))
    dip = float(min(l0, l1) - losses.min())
    threshold = max(tau_rel * 0.5 * (l0 + l1), floor)
    if not np.isfinite(barrier):
        barrier = math.inf
    if barrier > threshold:
        kind = "hill"
    elif dip > threshold:
        kind = "valley"
    else:
        kind = "flat"
    return Transition(kind, barrier, dip, float(threshold))


def transition_sequence(kinds: Sequence[str]) -> tuple[list[str], int]:
    """Median-of-3 smoothed classes along checkpoints and the number of changes."""
    order = {"valley": 0, "flat": 1, "hill": 2}
    names = {v: k for k, v in order.items()}
    codes = [order[k] for k in kinds]
    smoothed = list(codes)
    for i in range(1, len(codes) - 1):
        smoothed[i] = int(np.median(codes[i - 1 : i + 2]))
    out = [names[c] for c in smoothed]
    changes = sum(1 for a, b in zip(out, out[1:]) if a != b)
    return out, changes


def transition_epoch(epochs: Sequence[int], kinds: Sequence[str]) -> Optional[int]:
    """First checkpoint epoch that is no longer a hill after a hill."""
    smoothed, _ = transition_sequence(kinds)
    seen_hill = False
    for epoch, kind in zip(epochs, smoothed):
        if kind == "hill":
            seen_hill = True
        elif seen_hill:
            return int(epoch)
    return None


def extrapolation_drop(curve: Sequence[SweepPoint]) -> float:
    """Largest accuracy decrease from α = 1 over the extrapolation grid."""
    at_one = [p for p in curve if p.alpha == 1.0]
    if not at_one:
        raise ValueError("Extrapolation curve must include alpha = 1")
    ref = at_one[0].accuracy
    return float(max(ref - p.accuracy for p in curve))


# ----------------------------------------------------------------------
# 2D loss slices
@dataclass
class LossPlane:
    xs: np.ndarray
    ys: np.ndarray
    losses: np.ndarray  # (len(ys), len(xs))
    accuracies: np.ndarray
    anchors: dict[str, tuple[float, float]]
    u: np.ndarray
    v: np.ndarray


class PlaneBasis:
    """Orthonormal basis of the plane through θ_base, θ_A and θ_B."""

    def __init__(self, base: ParamVector, theta_a: ParamVector, theta_b: ParamVector):
        base.require_compatible(theta_a)
        base.require_compatible(theta_b)
        self.base = base
        self.models = (base, theta_a, theta_b)
        origin = base.values.astype(np.float64)
        d_a = theta_a.values.astype(np.float64) - origin
        d_b = theta_b.values.astype(np.float64) - origin
        norm_a = float(np.linalg.norm(d_a))
        if norm_a == 0:
            raise ValueError("θ_A coincides with θ_base")
        self.u = d_a / norm_a
        w = d_b - float(d_b @ self.u) * self.u
        norm_w = float(np.linalg.norm(w))
        if norm_w < 1e-9 * float(np.linalg.norm(d_b)) or norm_w == 0:
            raise ValueError("Directions θ_A − θ_base and θ_B − θ_base are parallel")
        self.v = w / norm_w
        self.origin = origin
        self.anchors = {
            "base": (0.0, 0.0),
            "A": (norm_a, 0.0),
            "B": (float(d_b @ self.u), norm_w),
        }

    def barycentric(self, x: float, y: float) -> tuple[float, float, float]:
        xa, _ = self.anchors["A"]
        xb, yb = self.anchors["B"]
        w_b = y / yb
        w_a = (x - w_b * xb) / xa
        return 1.0 - w_a - w_b, w_a, w_b

    def model_at(self, x: float, y: float) -> ParamVector:
        values = self.origin + x * self.u + y * self.v
        weights = self.barycentric(x, y)
        aux = sum(w * m.aux.astype(np.float64) for w, m in zip(weights, self.models))
        if self.base.aux.size:
            mask = nets.variance_mask(self.base.arch)
            aux[mask] = np.maximum(aux[mask], merge.VAR_FLOOR)
        dtype = self.base.dtype
        return self.base.with_values(values.astype(dtype), np.asarray(aux, dtype=dtype))


def loss_plane(
    base: ParamVector,
    theta_a: ParamVector,
    theta_b: ParamVector,
    dataset: Dataset,
    *,
    extents: Optional[tuple[float, float, float, float]] = None,
    resolution: int = 21,
    margin: float = 0.25,
) -> LossPlane:
    """Loss and accuracy on a grid of the plane spanned by three models.

    Default extents cover the three anchors with a relative ``margin``.
    """
    if resolution < 2:
        raise ValueError("Resolution must be at least 2")
    basis = PlaneBasis(base, theta_a, theta_b)
    if extents is None:
        xs_a = [p[0] for p in basis.anchors.values()]
        ys_a = [p[1] for p in basis.anchors.values()]
        span_x = max(xs_a) - min(xs_a)
        span_y = max(ys_a) - min(ys_a)
        extents = (
            min(xs_a) - margin * span_x,
            max(xs_a) + margin * span_x,
            min(ys_a) - margin * span_y,
            max(ys_a) + margin * span_y,
        )
    xs = np.linspace(extents[0], extents[1], resolution)
    ys = np.linspace(extents[2], extents[3], resolution)
    losses = np.empty((ys.size, xs.size))
    accs = np.empty_like(losses)
    for j, y in enumerate(ys):
        for i, x in enumerate(xs):
            losses[j, i], accs[j, i] = nets.evaluate(basis.model_at(float(x), float(y)), dataset.inputs, dataset.labels)
    logger.info("Loss plane %dx%d evaluated on %d samples", ys.size, xs.size, len(dataset))
    return LossPlane(xs, ys, losses, accs, dict(basis.anchors), basis.u, basis.v)


# ----------------------------------------------------------------------
# Hessian eigenvalues
@dataclass
class EigenResult:
    values: list[float]
    converged: list[bool]
    vectors: list[np.ndarray] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)


def _power_iterate(
    op: Callable[[np.ndarray], np.ndarray], vec: np.ndarray, tol: float, max_iters: int
) -> tuple[float, np.ndarray, bool, int]:
    """Rayleigh quotient and vector of the dominant-magnitude eigenpair of ``op``."""
    eig = math.nan
    iters = 0
    for iters in range(1, max_iters + 1):
        hv = op(vec)
        new_eig = float(vec @ hv)
        norm = float(np.linalg.norm(hv))
        if norm == 0:
            return 0.0, vec, True, iters
        vec = hv / norm
        if math.isfinite(eig) and abs(new_eig - eig) < tol * max(abs(new_eig), 1e-30):
            return new_eig, vec, True, iters
        eig = new_eig
    return eig, vec, False, iters


def hessian_top_eigs(
    hvp: Callable[[np.ndarray], np.ndarray],
    dim: int,
    k: int = 8,
    tol: float = 1e-4,
    max_iters: int = 200,
    seed: int = 0,
) -> EigenResult:
    """Top-k algebraic eigenvalues, descending, by power iteration with Hotelling deflation.

    A first pass estimates the spectral radius ``c``; the iteration then runs
    on ``H + cI`` so the algebraic maximum dominates even when ``H`` is
    indefinite. Each eigenvalue carries a convergence flag.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    k = min(k, dim)
    rng = np.random.default_rng(seed)

    def apply(vec: np.ndarray) -> np.ndarray:
        return np.asarray(hvp(vec), dtype=np.float64)

    start = rng.standard_normal(dim)
    _, top, _, _ = _power_iterate(apply, start / np.linalg.norm(start), tol, max_iters)
    radius = float(np.linalg.norm(apply(top)))
    shift = radius if math.isfinite(radius) else 0.0
    found: list[tuple[float, np.ndarray]] = []
    pairs: list[tuple[float, bool, np.ndarray, int]] = []

    def deflated(vec: np.ndarray) -> np.ndarray:
        out = apply(vec) + shift * vec
        for lam, basis in found:
            out = out - lam * float(vec @ basis) * basis
        return out

    for _ in range(k):
        vec = rng.standard_normal(dim)
        eig, vec, converged, iters = _power_iterate(deflated, vec / np.linalg.norm(vec), tol, max_iters)
        found.append((eig, vec))
        pairs.append((eig - shift, converged, vec, iters))
        if not converged:
            logger.warning("Eigenvalue %d not converged after %d iterations", len(found), max_iters)
    pairs.sort(key=lambda p: -p[0] if math.isfinite(p[0]) else math.inf)
    return EigenResult(
        [p[0] for p in pairs], [p[1] for p in pairs], [p[2] for p in pairs], [p[3] for p in pairs]
    )


def network_hessian_eigs(
    params: ParamVector,
    dataset: Dataset,
    *,
    k: int = 8,
    sample_size: int = 1024,
    tol: float = 1e-4,
    max_iters: int = 200,
    seed: int = 0,
    mode: str = "central",
) -> EigenResult:
    """Leading eigenvalues of the eval-mode loss Hessian on a fixed evaluation subset."""
    subset = dataset.head(sample_size)
    theta = params.astype(np.float64)
    with precision(64):
        closure = nets.loss_closure(theta, subset.inputs, subset.labels, "eval")

        def _hvp(vec: np.ndarray) -> np.ndarray:
            return hessian_vector_product(closure, theta.values, vec, mode=mode)

        return hessian_top_eigs(_hvp, len(theta), k=k, tol=tol, max_iters=max_iters, seed=seed)


# ----------------------------------------------------------------------
# Noise-curve alignment
def _log_bins(values: np.ndarray, bins: int) -> np.ndarray:
    logs = np.log10(values)
    lo, hi = float(logs.min()), float(logs.max())
    if hi == lo:
        return np.zeros(values.size, dtype=np.int64)
    edges = np.linspace(lo, hi, bins + 1)
    return np.clip(np.searchsorted(edges, logs, side="right") - 1, 0, bins - 1)


def _binned_group_variance(coord: np.ndarray, groups: np.ndarray, gains: np.ndarray, bins: int) -> Optional[float]:
    assignment = _log_bins(coord, bins)
    variances = []
    for b in range(bins):
        in_bin = assignment == b
        means = [float(np.mean(gains[in_bin & (groups == g)])) for g in np.unique(groups[in_bin])]
        if len(means) >= 2:
            variances.append(float(np.var(means)))
    return float(np.mean(variances)) if variances else None


def collapse_score_from_cells(cells: Iterable[CellSummary], bins: int = COLLAPSE_BINS) -> float:
    """Binned across-batch-size variance of gains under S̃ relative to η.

    Scores below 1 mean S̃ aligns the per-batch-size gain curves better than
    the learning rate alone.
    """
    usable = [c for c in cells if not c.diverged and math.isfinite(c.median_gain)]
    if len({c.batch_size for c in usable}) < 2:
        raise ValueError("Collapse score needs at least 2 batch sizes")
    if len({c.eta for c in usable}) < 3:
        raise ValueError("Collapse score needs at least 3 learning rates")
    eta = np.array([c.eta for c in usable], dtype=np.float64)
    s_tilde = np.array([c.s_tilde for c in usable], dtype=np.float64)
    groups = np.array([c.batch_size for c in usable])
    gains = np.array([c.median_gain for c in usable], dtype=np.float64)
    var_s = _binned_group_variance(s_tilde, groups, gains, bins)
    var_eta = _binned_group_variance(eta, groups, gains, bins)
    if var_s is None or var_eta is None:
        raise ValueError("Every bin has fewer than 2 batch-size groups")
    if var_eta == 0:
        return math.inf if var_s > 0 else 1.0
    return var_s / var_eta


def collapse_score(sweep: SweepResult) -> float:
    return collapse_score_from_cells(sweep.cells(), sweep.bins)


@dataclass(frozen=True)
class PeakCheck:
    found: bool
    bin_centers: list[float]
    medians: list[float]
    errors: list[float]
    peak_bin: Optional[int] = None


def interior_peak(
    s_tilde: Sequence[float],
    gains: Sequence[float],
    seeds: Sequence[int],
    bins: int = COLLAPSE_BINS,
) -> PeakCheck:
    """Does an interior S̃ bin beat both end bins by one cross-seed standard error?

    Each bin's value is the median gain; its error is the standard error of
    the per-seed medians. The margin required is the combined error of the
    interior bin and the end bin it is compared to.
    """
    s = np.asarray(s_tilde, dtype=np.float64)
    g = np.asarray(gains, dtype=np.float64)
    sd = np.asarray(seeds)
    keep = np.isfinite(g) & np.isfinite(s) & (s > 0)
    s, g, sd = s[keep], g[keep], sd[keep]
    if s.size == 0:
        raise ValueError("No finite gains to bin")
    assignment = _log_bins(s, bins)
    centers, medians, errors = [], [], []
    for b in range(bins):
        in_bin = assignment == b
        if not np.any(in_bin):
            continue
        per_seed = [float(np.median(g[in_bin & (sd == seed)])) for seed in np.unique(sd[in_bin])]
        se = float(np.std(per_seed, ddof=1) / math.sqrt(len(per_seed))) if len(per_seed) > 1 else 0.0
        centers.append(float(10 ** np.mean(np.log10(s[in_bin]))))
        medians.append(float(np.median(g[in_bin])))
        errors.append(se)
    best: Optional[int] = None
    for i in range(1, len(medians) - 1):
        margin_lo = math.hypot(errors[i], errors[0])
        margin_hi = math.hypot(errors[i], errors[-1])
        above_lo = medians[i] - medians[0]
        above_hi = medians[i] - medians[-1]
        if above_lo > 0 and above_hi > 0 and above_lo >= margin_lo and above_hi >= margin_hi:
            if best is None or medians[i] > medians[best]:
                best = i
    return PeakCheck(best is not None, centers, medians, errors, best)
