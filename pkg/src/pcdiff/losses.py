"""Training losses and the CD / EMD evaluation metrics.

Conventions: Chamfer uses squared distances, mean-reduced per direction and
summed over both directions.  EMD is the mean Euclidean (unsquared) cost of
the optimal perfect matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as tn
from .tensor import ContractError, ShapeError, Tensor

__all__ = [
    "LossBreakdown",
    "CD_SCALE",
    "EMD_SCALE",
    "HUNGARIAN_MAX_N",
    "loss_geo",
    "loss_chamfer",
    "loss_rgb",
    "total_loss",
    "metric_cd",
    "metric_emd",
    "emd_hungarian",
    "emd_auction",
    "auction_assignment",
]

CD_SCALE = 1e3
EMD_SCALE = 1e2
HUNGARIAN_MAX_N = 256


@dataclass
class LossBreakdown:
    geo: Tensor
    cham: Tensor
    rgb: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("geo", "cham", "rgb", "total")}


def loss_geo(true_noise, predicted_noise) -> Tensor:
    """Mean squared error over points and coordinates."""
    true_noise = tn.as_tensor(true_noise)
    predicted_noise = tn.as_tensor(predicted_noise)
    if true_noise.shape != predicted_noise.shape:
        raise ShapeError(f"loss_geo: shapes {true_noise.shape} and {predicted_noise.shape} differ")
    return tn.square(true_noise - predicted_noise).mean()


def _positions(x):
    if hasattr(x, "positions"):
        x = x.positions
    return tn.as_tensor(x)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[..., :, None, :] - b[..., None, :, :]) ** 2).sum(-1)


def loss_chamfer(a, b) -> Tensor:
    """Symmetric Chamfer distance between ``(n, 3)`` clouds.

    Batched ``(B, n, 3)`` inputs return the mean over the batch.  Nearest
    neighbors are chosen on the forward values; gradients flow through the
    selected pairs.
    """
    a, b = _positions(a), _positions(b)
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ContractError("loss_chamfer: empty point cloud")
    if a.ndim == 2:
        a, b = a.reshape(1, *a.shape), b.reshape(1, *b.shape)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"loss_chamfer: incompatible shapes {a.shape} and {b.shape}")
    bsz, na, nb = a.shape[0], a.shape[1], b.shape[1]
    d2 = _pairwise_sq(a.data, b.data)
    ia = d2.argmin(axis=2) + (np.arange(bsz) * nb)[:, None]
    ib = d2.argmin(axis=1) + (np.arange(bsz) * na)[:, None]
    af, bf = a.reshape(bsz * na, 3), b.reshape(bsz * nb, 3)
    ab = tn.square(a - tn.gather_rows(bf, ia)).sum(axis=-1).mean(axis=1)
    ba = tn.square(b - tn.gather_rows(af, ib)).sum(axis=-1).mean(axis=1)
    return (ab + ba).mean()


def loss_rgb(rendered, reference) -> Tensor:
    """Squared image distance summed over channels, averaged over pixels."""
    rendered = tn.as_tensor(getattr(rendered, "rgb", rendered))
    reference = tn.as_tensor(getattr(reference, "rgb", reference))
    if rendered.shape != reference.shape:
        raise ShapeError(f"loss_rgb: image shapes {rendered.shape} and {reference.shape} differ")
    npix = rendered.size // rendered.shape[-1]
    return tn.square(rendered - reference).sum() * (1.0 / npix)


def total_loss(geo, cham, rgb, weights=(1.0, 1.0, 1.0), disable_rgb: bool = False) -> LossBreakdown:
    geo, cham, rgb = tn.as_tensor(geo), tn.as_tensor(cham), tn.as_tensor(rgb)
    wg, wc, wr = weights
    total = geo * wg + cham * wc
    if not disable_rgb:
        total = total + rgb * wr
    return LossBreakdown(geo, cham, rgb, total)


# -- metrics (plain numpy) --------------------------------------------------------
def _cloud_array(x) -> np.ndarray:
    if hasattr(x, "positions"):
        x = x.positions
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ContractError(f"expected an (n, 3) cloud, got {x.shape}")
    return x


def metric_cd(a, b) -> float:
    """Chamfer distance in normalized units; multiply by ``CD_SCALE`` for reports."""
    a, b = _cloud_array(a), _cloud_array(b)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("metric_cd: empty point cloud")
    d2 = _pairwise_sq(a, b)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def _cost(a, b) -> np.ndarray:
    a, b = _cloud_array(a), _cloud_array(b)
    if len(a) != len(b):
        raise ContractError(f"EMD needs equal point counts, got {len(a)} and {len(b)}")
    if len(a) == 0:
        raise ContractError("EMD of empty clouds")
    return np.sqrt(_pairwise_sq(a, b))


def emd_hungarian(a, b) -> float:
    cost = _cost(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def auction_assignment(cost: np.ndarray, eps_final: float | None = None,
                       scale: float = 5.0) -> np.ndarray:
    """Min-cost assignment by a Jacobi auction with epsilon scaling.

    Returns ``owner`` with ``owner[i]`` the column assigned to row ``i``.  The
    total cost is within ``n * eps_final`` of the optimum.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    value = -cost
    span = float(cost.max() - cost.min()) or 1.0
    if eps_final is None:
        eps_final = span * 1e-6 / n
    prices = np.zeros(n)
    eps = max(span / 4.0, eps_final)
    while True:
        assigned = np.full(n, -1)
        owner_of = np.full(n, -1)
        while True:
            free = np.flatnonzero(assigned < 0)
            if free.size == 0:
                break
            net = value[free] - prices[None, :]
            if n == 1:
                best = np.zeros(free.size, dtype=np.intp)
                bid_inc = np.full(free.size, eps)
            else:
                top2 = np.argpartition(-net, 1, axis=1)[:, :2]
                v1 = np.take_along_axis(net, top2, axis=1)
                swap = v1[:, 1] > v1[:, 0]
                best = np.where(swap, top2[:, 1], top2[:, 0])
                first = np.maximum(v1[:, 0], v1[:, 1])
                second = np.minimum(v1[:, 0], v1[:, 1])
                bid_inc = first - second + eps
            bids = prices[best] + bid_inc
            # highest bid wins each contested column
            order = np.lexsort((-bids, best))
            best_s, bids_s, free_s = best[order], bids[order], free[order]
            win = np.ones(best_s.size, dtype=bool)
            win[1:] = best_s[1:] != best_s[:-1]
            cols, bidders, price = best_s[win], free_s[win], bids_s[win]
            prev = owner_of[cols]
            assigned[prev[prev >= 0]] = -1
            owner_of[cols] = bidders
            assigned[bidders] = cols
            prices[cols] = price
        if eps <= eps_final:
            return assigned
        eps = max(eps / scale, eps_final)


def emd_auction(a, b, eps_final: float | None = None) -> float:
    cost = _cost(a, b)
    owner = auction_assignment(cost, eps_final)
    return float(cost[np.arange(len(owner)), owner].mean())


def metric_emd(a, b) -> float:
    """EMD in normalized units; multiply by ``EMD_SCALE`` for reports.

    Exact Hungarian matching up to ``HUNGARIAN_MAX_N`` points, auction above.
    """
    n = len(_cloud_array(a))
    if n <= HUNGARIAN_MAX_N:
        return emd_hungarian(a, b)
    return emd_auction(a, b)
