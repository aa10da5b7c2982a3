"""Differentiable volume rendering of colored point clouds.

Density at a shading point is the reciprocal distance to the centroid of its
K nearest cloud points; radiance is a softmax-over-negative-distance blend of
those neighbors' colors.  Shading points with no cloud point within
``mask_radius`` are skipped (zero density).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import ContractError, Tensor

__all__ = [
    "Camera",
    "RenderConfig",
    "SpatialIndex",
    "brute_force_knn",
    "generate_rays",
    "sample_depths",
    "shade",
    "density_at",
    "radiance_at",
    "render",
    "render_details",
    "scene_bounds",
    "knn_cell_size",
]

EPS_DENSITY = 1e-4


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov: float = np.deg2rad(40.0)
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not 0.0 < self.fov < np.pi:
            raise ContractError(f"fov must be in (0, pi), got {self.fov}")
        if self.width < 1 or self.height < 1:
            raise ContractError("image dimensions must be positive")
        self.basis()

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unit ``(forward, right, up)`` vectors of the camera frame."""
        f = np.asarray(self.look_at, float) - np.asarray(self.position, float)
        nf = np.linalg.norm(f)
        if nf == 0.0:
            raise ContractError("camera position coincides with look-at point")
        f = f / nf
        r = np.cross(f, np.asarray(self.up, float))
        nr = np.linalg.norm(r)
        if nr < 1e-9:
            raise ContractError("camera up vector is parallel to the view direction")
        r = r / nr
        return f, r, np.cross(r, f)

    def resized(self, width: int, height: int) -> "Camera":
        return Camera(self.position, self.look_at, self.up, self.fov, width, height)

    def to_dict(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "look_at": [float(v) for v in self.look_at],
            "up": [float(v) for v in self.up],
            "fov_deg": float(np.rad2deg(self.fov)),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            position=tuple(map(float, d["position"])),
            look_at=tuple(map(float, d["look_at"])),
            up=tuple(map(float, d.get("up", (0.0, 1.0, 0.0)))),
            fov=float(np.deg2rad(d["fov_deg"])),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class RenderConfig:
    near: float
    far: float
    n_samples: int = 32
    k: int = 8
    mask_radius: float = 0.1
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    eps_density: float = EPS_DENSITY
    jitter: bool = False

    def __post_init__(self):
        if not self.near < self.far:
            raise ContractError(f"render config needs near < far, got {self.near} >= {self.far}")
        if self.n_samples < 1 or self.k < 1 or self.mask_radius <= 0:
            raise ContractError("render config needs n_samples >= 1, k >= 1, mask_radius > 0")


def scene_bounds(cam: Camera, radius: float, margin: float = 0.2) -> tuple[float, float]:
    """Near/far depths enclosing a sphere of ``radius`` about the origin, padded by ``margin``."""
    dist = float(np.linalg.norm(np.asarray(cam.position, float)))
    r = (1.0 + margin) * radius
    return max(dist - r, 1e-3), dist + r


def generate_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions through every pixel center, row-major from the top-left."""
    f, r, u = cam.basis()
    half = np.tan(cam.fov / 2.0)
    aspect = cam.width / cam.height
    xs = ((np.arange(cam.width) + 0.5) / cam.width * 2.0 - 1.0) * half * aspect
    ys = (1.0 - (np.arange(cam.height) + 0.5) / cam.height * 2.0) * half
    d = f[None, None, :] + xs[None, :, None] * r + ys[:, None, None] * u
    d = d.reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(np.asarray(cam.position, float), d.shape).copy()
    return o, d


def sample_depths(n_rays: int, cfg: RenderConfig, rng: np.random.Generator | None = None):
    """Stratified depths ``(n_rays, M)`` and spacings; bin centers unless jittered."""
    m = cfg.n_samples
    step = (cfg.far - cfg.near) / m
    if cfg.jitter and rng is not None:
        u = rng.uniform(size=(n_rays, m))
    else:
        u = np.full((n_rays, m), 0.5)
    depths = cfg.near + (np.arange(m)[None, :] + u) * step
    delta = np.full_like(depths, step)
    delta[:, :-1] = np.diff(depths, axis=1)
    return depths, delta


# -- spatial index ---------------------------------------------------------------
_OFF = 1 << 20
_SPAN = 1 << 21


def _cube_offsets(r: int) -> np.ndarray:
    a = np.arange(-r, r + 1)
    return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1).reshape(-1, 3)


def brute_force_knn(points: np.ndarray, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference k-NN over all pairs; ties broken by point index."""
    d = np.sqrt(((queries[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d, order, axis=1)


class SpatialIndex:
    """Uniform-grid spatial hash over a fixed point set.

    Occupied cells are kept as a sorted table of integer cell keys, so a
    lookup is a binary search.  Exact k-NN grows a cube of cells around each
    query until the k-th candidate is provably closer than any point outside
    the cube.
    """

    def __init__(self, points: np.ndarray, cell_size: float):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0:
            raise ContractError("spatial index needs a non-empty point set")
        if cell_size <= 0:
            raise ContractError("cell size must be positive")
        self.points = points
        self.h = float(cell_size)
        self.origin = points.min(axis=0)
        cells = self.cell_of(points)
        self.hi_cell = cells.max(axis=0)
        keys = self._key(cells)
        self.order = np.argsort(keys, kind="stable")
        self.keys, self.starts, self.counts = np.unique(
            keys[self.order], return_index=True, return_counts=True
        )

    def __len__(self) -> int:
        return self.points.shape[0]

    def cell_of(self, q: np.ndarray) -> np.ndarray:
        c = np.floor((q - self.origin) / self.h).astype(np.int64)
        return np.clip(c, -_OFF + 1, _OFF - 1)

    @staticmethod
    def _key(cells: np.ndarray) -> np.ndarray:
        c = cells + _OFF
        return (c[..., 0] * _SPAN + c[..., 1]) * _SPAN + c[..., 2]

    def _candidates(self, qcells: np.ndarray, offsets: np.ndarray):
        """Flat ``(query_row, point_id)`` pairs for points in the offset cells."""
        keys = self._key(qcells[:, None, :] + offsets[None, :, :]).ravel()
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_c] == keys
        cnt = np.where(hit, self.counts[pos_c], 0)
        start = self.starts[pos_c]
        total = int(cnt.sum())
        qrow = np.repeat(np.repeat(np.arange(qcells.shape[0]), offsets.shape[0]), cnt)
        first = np.repeat(np.cumsum(cnt) - cnt, cnt)
        slot = np.repeat(start, cnt) + (np.arange(total) - first)
        return qrow, self.order[slot]

    def nearest_distance(self, queries: np.ndarray, radius: float) -> np.ndarray:
        """Distance to the nearest point if it lies within ``radius`` (<= cell size), else inf."""
        if radius > self.h:
            raise ContractError("radius query larger than the cell size")
        queries = np.asarray(queries, dtype=np.float64)
        out = np.full(queries.shape[0], np.inf)
        if queries.shape[0] == 0:
            return out
        qrow, pid = self._candidates(self.cell_of(queries), _cube_offsets(1))
        d = np.sqrt(((queries[qrow] - self.points[pid]) ** 2).sum(-1))
        np.minimum.at(out, qrow, d)
        out[out > radius] = np.inf
        return out

    def knn(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Exact k nearest neighbors ``(ids, distances)``, sorted by distance then id."""
        queries = np.asarray(queries, dtype=np.float64)
        n = self.points.shape[0]
        if not 1 <= k <= n:
            raise ContractError(f"k={k} must be in 1..{n}")
        nq = queries.shape[0]
        ids = np.zeros((nq, k), dtype=np.intp)
        dists = np.zeros((nq, k))
        pending = np.arange(nq)
        qcells_all = self.cell_of(queries)
        # start at the cube expected to hold about k points
        occupied = max(len(self.keys), 1)
        r = max(1, int(np.ceil(0.5 * ((k * occupied / n) ** (1.0 / 3.0) - 1))))
        while pending.size:
            if (2 * r + 1) ** 3 > 8 * max(occupied, 64):
                # the cube outgrew the occupied cells: scan all points for the stragglers
                for s in range(0, pending.size, 256):
                    chunk = pending[s:s + 256]
                    ids[chunk], dists[chunk] = brute_force_knn(self.points, queries[chunk], k)
                break
            qc = qcells_all[pending]
            qp = queries[pending]
            covers = np.all((qc - r <= 0) & (qc + r >= self.hi_cell), axis=1)
            qrow, pid = self._candidates(qc, _cube_offsets(r))
            d = np.sqrt(((qp[qrow] - self.points[pid]) ** 2).sum(-1))
            order = np.lexsort((pid, d, qrow))
            qrow, pid, d = qrow[order], pid[order], d[order]
            cnt = np.bincount(qrow, minlength=pending.size)
            first = np.cumsum(cnt) - cnt
            enough = cnt >= k
            # distance from the query to the nearest face of the searched cube
            lo = self.origin + (qc - r) * self.h
            hi = self.origin + (qc + r + 1) * self.h
            bound = np.minimum(qp - lo, hi - qp).min(axis=1)
            take = first[enough][:, None] + np.arange(k)[None, :]
            kth = np.full(pending.size, np.inf)
            kth[enough] = d[take[:, -1]]
            done = enough & (covers | (kth <= bound))
            rows = np.flatnonzero(done)
            sel = first[rows][:, None] + np.arange(k)[None, :]
            ids[pending[rows]] = pid[sel]
            dists[pending[rows]] = d[sel]
            pending = pending[~done]
            r += max(1, r // 2)
        return ids, dists


def knn_cell_size(points: np.ndarray, k: int) -> float:
    """Cell size near the typical k-th neighbor distance of a surface-like cloud."""
    rms = float(np.sqrt(((points - points.mean(axis=0)) ** 2).sum(axis=1).mean()))
    return max(1.5 * np.sqrt(k / points.shape[0]) * rms, 1e-6)


# -- shading ----------------------------------------------------------------------------
def shade(positions, colors, queries: np.ndarray, nbr: np.ndarray, eps_density: float = EPS_DENSITY):
    """Density ``(U,)`` and radiance ``(U, 3)`` at ``queries`` from neighbor ids ``nbr``."""
    pos = tn.as_tensor(positions)
    nb = tn.gather_rows(pos, nbr)
    centroid = nb.mean(axis=1)
    sigma = 1.0 / tn.clamp_min(tn.l2_norm_rows(queries - centroid), eps_density)
    radiance = None
    if colors is not None:
        w = tn.softmax_rows(-tn.l2_norm_rows(queries[:, None, :] - nb))
        nc = tn.gather_rows(tn.as_tensor(colors), nbr)
        radiance = (w.reshape(*w.shape, 1) * nc).sum(axis=1)
    return sigma, radiance


def _cloud_arrays(cloud):
    if hasattr(cloud, "positions"):
        return cloud.positions, cloud.colors
    return np.asarray(cloud, dtype=np.float64), None


def density_at(p, cloud, k: int, index: SpatialIndex | None = None,
               eps_density: float = EPS_DENSITY) -> float:
    pos, _ = _cloud_arrays(cloud)
    if pos.shape[0] == 0:
        raise ContractError("density query on an empty cloud")
    index = index or SpatialIndex(pos, knn_cell_size(pos, k))
    q = np.asarray(p, dtype=np.float64).reshape(1, 3)
    nbr, _ = index.knn(q, k)
    sigma, _ = shade(pos, None, q, nbr, eps_density)
    return float(sigma.data[0])


def radiance_at(p, cloud, k: int, index: SpatialIndex | None = None) -> np.ndarray:
    pos, col = _cloud_arrays(cloud)
    if pos.shape[0] == 0:
        raise ContractError("radiance query on an empty cloud")
    if col is None:
        raise ContractError("radiance query needs a colored cloud")
    index = index or SpatialIndex(pos, knn_cell_size(pos, k))
    q = np.asarray(p, dtype=np.float64).reshape(1, 3)
    nbr, _ = index.knn(q, k)
    _, rad = shade(pos, col, q, nbr)
    return rad.data[0]


@dataclass
class RenderDetails:
    image: Tensor
    weights: np.ndarray
    transmittance: np.ndarray
    sigma: np.ndarray
    mask: np.ndarray
    residual: np.ndarray = field(repr=False)


def render_details(positions, colors, cam: Camera, cfg: RenderConfig,
                   rng: np.random.Generator | None = None) -> RenderDetails:
    """Render and also return per-sample weights, transmittance and mask."""
    pos = tn.as_tensor(positions)
    col = tn.as_tensor(colors)
    if pos.shape[0] == 0:
        raise ContractError("cannot render an empty cloud")
    if cfg.k > pos.shape[0]:
        raise ContractError(f"k={cfg.k} exceeds the {pos.shape[0]} cloud points")
    origins, dirs = generate_rays(cam)
    n_rays, m = dirs.shape[0], cfg.n_samples
    depths, delta = sample_depths(n_rays, cfg, rng)
    pts = (origins[:, None, :] + depths[..., None] * dirs[:, None, :]).reshape(-1, 3)

    mask_index = SpatialIndex(pos.data, cfg.mask_radius)
    active = np.isfinite(mask_index.nearest_distance(pts, cfg.mask_radius))
    n_active = int(active.sum())
    slot = np.full(pts.shape[0], n_active)
    slot[active] = np.arange(n_active)
    if n_active:
        q = pts[active]
        index = SpatialIndex(pos.data, max(cfg.mask_radius, knn_cell_size(pos.data, cfg.k)))
        nbr, _ = index.knn(q, cfg.k)
        sigma_u, rad_u = shade(pos, col, q, nbr, cfg.eps_density)
        sigma = tn.gather_rows(tn.concat([sigma_u.reshape(-1, 1), Tensor(np.zeros((1, 1)))], axis=0), slot)
        rad = tn.gather_rows(tn.concat([rad_u, Tensor(np.zeros((1, 3)))], axis=0), slot)
        sigma = sigma.reshape(n_rays, m)
        rad = rad.reshape(n_rays, m, 3)
    else:
        sigma = Tensor(np.zeros((n_rays, m)))
        rad = Tensor(np.zeros((n_rays, m, 3)))

    sd = sigma * delta
    csum = tn.cumsum(sd, axis=1)
    # exclusive prefix sum by shifting, so transmittance is exactly non-increasing
    before = tn.concat([Tensor(np.zeros((n_rays, 1))), csum[:, : m - 1]], axis=1)
    tau = tn.exp(-before)
    weights = tau * (1.0 - tn.exp(-sd))
    residual = tn.exp(-csum[:, m - 1:m])
    rgb = (weights.reshape(n_rays, m, 1) * rad).sum(axis=1) + residual * np.asarray(cfg.background, float)
    return RenderDetails(
        image=rgb.reshape(cam.height, cam.width, 3),
        weights=weights.data,
        transmittance=tau.data,
        sigma=sigma.data,
        mask=active.reshape(n_rays, m),
        residual=residual.data[:, 0],
    )


def render(positions, colors, cam: Camera, cfg: RenderConfig,
           rng: np.random.Generator | None = None) -> Tensor:
    """Image tensor ``(H, W, 3)``, differentiable in point positions and colors."""
    return render_details(positions, colors, cam, cfg, rng).image
