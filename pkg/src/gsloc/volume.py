"""Fused 3D feature volume with a TSDF channel and surface extraction.

2D feature maps are lifted along measured depth into voxel cells and
fused by weighted averaging; the stored cell vector is the running mean
of the (unit-norm) observations and is renormalized on read, which keeps
fusion order-independent.  A projective TSDF fused from the depth maps
provides the surface manifold for descriptor distillation, extracted by
marching cubes and sampled area-uniformly over the triangles.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import NoSurface, OutOfVolume
from .geometry import unproject_pixels
from .mapper import KeyframeRecord

_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)],
                    dtype=np.int64)


@dataclass
class SurfaceSamples:
    points: np.ndarray     # (N, 3) world positions on the isosurface
    features: np.ndarray   # (N, D_f) unit-norm sampled volume features


class FeatureVolume:
    """Dense voxel grid of fused features, fusion weights, and TSDF.

    Cell (i, j, k) is centered at origin + (ijk + 0.5) * voxel_size.
    ``features[i, j, k]`` holds the running mean of all unit observations
    fused into the cell (norm <= 1); ``weights`` counts them.
    """

    def __init__(self, origin, voxel_size: float, dims, feature_dim: int,
                 trunc: float | None = None, dtype=np.float32):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.feature_dim = int(feature_dim)
        self.trunc = float(trunc) if trunc is not None else 4.0 * voxel_size
        self.dtype = dtype
        self.features = np.zeros((*self.dims, feature_dim), dtype=dtype)
        self.weights = np.zeros(self.dims, dtype=dtype)
        self.tsdf = np.full(self.dims, self.trunc, dtype=dtype)
        self.tsdf_weights = np.zeros(self.dims, dtype=dtype)
        self.last_skipped = 0

    @classmethod
    def from_bounds(cls, bounds_min, bounds_max, voxel_size: float,
                    feature_dim: int, trunc_factor: float = 4.0,
                    margin: float = 0.1) -> "FeatureVolume":
        lo = np.asarray(bounds_min, dtype=np.float64) - margin
        hi = np.asarray(bounds_max, dtype=np.float64) + margin
        dims = np.maximum(2, np.ceil((hi - lo) / voxel_size).astype(int))
        return cls(lo, voxel_size, dims, feature_dim,
                   trunc=trunc_factor * voxel_size)

    # ------------------------------------------------------------------
    def cell_center(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def world_to_cell(self, p: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(p) - self.origin) / self.voxel_size).astype(np.int64)

    def in_bounds(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        hi = self.origin + np.array(self.dims) * self.voxel_size
        return np.all((p >= self.origin) & (p < hi), axis=1)

    # ------------------------------------------------------------------
    def integrate_keyframe(self, kf: KeyframeRecord, max_depth: float = 20.0) -> int:
        """Fuse one keyframe's features and depth; returns updated cell count.

        Out-of-bounds observations are skipped (tracked on
        ``self.last_skipped``), not fatal.
        """
        valid = kf.valid_depth_mask(max_depth)
        H, W = kf.depth.shape
        flat = np.nonzero(valid.ravel())[0]
        self.last_skipped = 0
        updated = 0
        if flat.size:
            vv, uu = np.divmod(flat, W)
            uv = np.stack([uu, vv], axis=1).astype(np.float64)
            pts = unproject_pixels(uv, kf.depth.ravel()[flat], kf.pose, kf.intrinsics)
            inb = self.in_bounds(pts)
            self.last_skipped = int((~inb).sum())
            pts = pts[inb]
            feats = _sample_feature_map(kf.feature_map, uv[inb], W, H)

            cells = self.world_to_cell(pts)
            lin = np.ravel_multi_index(cells.T, self.dims)
            touched, inv = np.unique(lin, return_inverse=True)
            sums = np.zeros((touched.size, self.feature_dim), dtype=np.float64)
            np.add.at(sums, inv, feats.astype(np.float64))
            counts = np.bincount(inv, minlength=touched.size).astype(np.float64)
            flat_feats = self.features.reshape(-1, self.feature_dim)
            flat_w = self.weights.reshape(-1)
            w_old = flat_w[touched].astype(np.float64)
            mixed = (w_old[:, None] * flat_feats[touched].astype(np.float64) + sums) \
                / (w_old + counts)[:, None]
            flat_feats[touched] = mixed.astype(self.dtype)
            flat_w[touched] = (w_old + counts).astype(self.dtype)
            updated = int(touched.size)

        self._integrate_tsdf(kf, max_depth)
        return updated

    def _integrate_tsdf(self, kf: KeyframeRecord, max_depth: float) -> None:
        """Projective TSDF update over all voxel centers in the frustum."""
        idx = np.indices(self.dims).reshape(3, -1).T
        centers = self.cell_center(idx)
        cam = kf.pose.world_to_camera(centers)
        z = cam[:, 2]
        K = kf.intrinsics
        front = z > 1e-6
        u = np.round(K.fx * cam[:, 0] / np.where(front, z, 1.0) + K.cx).astype(int)
        v = np.round(K.fy * cam[:, 1] / np.where(front, z, 1.0) + K.cy).astype(int)
        inside = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        meas = np.zeros(z.shape)
        meas[inside] = kf.depth[v[inside], u[inside]]
        ok = inside & np.isfinite(meas) & (meas > 0) & (meas <= max_depth)
        sdf = meas - z
        band = ok & (sdf > -self.trunc)
        sdf_c = np.minimum(sdf[band], self.trunc)

        tw = self.tsdf_weights.reshape(-1)
        td = self.tsdf.reshape(-1)
        sel = np.nonzero(band)[0]
        w_old = tw[sel].astype(np.float64)
        first = w_old == 0
        old = np.where(first, 0.0, td[sel].astype(np.float64))
        td[sel] = ((w_old * old + sdf_c) / (w_old + 1.0)).astype(self.dtype)
        tw[sel] = (w_old + 1.0).astype(self.dtype)

    # ------------------------------------------------------------------
    def interpolate(self, points: np.ndarray, normalize_cells: bool = True):
        """Trilinear feature interpolation over the 8 surrounding cell centers.

        Zero-weight cells are excluded and the trilinear weights renormalized
        over the occupied corners.  Returns (values (N, D_f), ok (N,)) where
        rows with no occupied corner are flagged False and left zero.
        With normalize_cells the corner vectors are renormalized to unit
        length before mixing (set False for raw running-mean values).
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(self.in_bounds(points)):
            raise OutOfVolume("query point outside the feature volume")
        g = (points - self.origin) / self.voxel_size - 0.5
        i0 = np.floor(g).astype(np.int64)
        frac = g - i0

        vals = np.zeros((points.shape[0], self.feature_dim))
        wsum = np.zeros(points.shape[0])
        flat_feats = self.features.reshape(-1, self.feature_dim)
        flat_w = self.weights.reshape(-1)
        for corner in _CORNERS:
            ci = i0 + corner
            ok = np.all((ci >= 0) & (ci < np.array(self.dims)), axis=1)
            lin = np.ravel_multi_index(
                np.clip(ci, 0, np.array(self.dims) - 1).T, self.dims)
            occ = ok & (flat_w[lin] > 0)
            tw = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1) * occ
            cell_vec = flat_feats[lin].astype(np.float64)
            if normalize_cells:
                norms = np.linalg.norm(cell_vec, axis=1, keepdims=True)
                cell_vec = np.where(norms > 0, cell_vec / np.maximum(norms, 1e-30), 0.0)
            vals += tw[:, None] * cell_vec
            wsum += tw
        filled = wsum > 0
        vals[filled] /= wsum[filled, None]
        return vals, filled

    def sample_feature(self, p: np.ndarray):
        """Unit-norm interpolated feature at one point, or None if the
        neighborhood holds no observations."""
        vals, ok = self.interpolate(np.asarray(p, dtype=np.float64)[None, :])
        if not ok[0]:
            return None
        v = vals[0]
        n = np.linalg.norm(v)
        return v / n if n > 0 else None

    def sample_features(self, points: np.ndarray):
        """Batched sample_feature: returns (unit features (N, D_f), ok (N,))."""
        vals, ok = self.interpolate(points)
        norms = np.linalg.norm(vals, axis=1)
        good = ok & (norms > 0)
        out = np.zeros_like(vals)
        out[good] = vals[good] / norms[good, None]
        return out, good

    def interpolate_tsdf(self, points: np.ndarray) -> np.ndarray:
        """Plain trilinear TSDF interpolation (all corners, no occupancy test)."""
        points = np.atleast_2d(points)
        g = (points - self.origin) / self.voxel_size - 0.5
        i0 = np.floor(g).astype(np.int64)
        frac = g - i0
        out = np.zeros(points.shape[0])
        flat = self.tsdf.reshape(-1)
        for corner in _CORNERS:
            ci = np.clip(i0 + corner, 0, np.array(self.dims) - 1)
            lin = np.ravel_multi_index(ci.T, self.dims)
            tw = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1)
            out += tw * flat[lin]
        return out

    # ------------------------------------------------------------------
    def extract_surface(self, n_samples: int,
                        rng: np.random.Generator | None = None,
                        attach_features: bool = True) -> SurfaceSamples:
        """Marching cubes at TSDF zero level + area-weighted point sampling.

        Samples whose feature neighborhood is empty are discarded when
        attach_features is set.  Raises NoSurface without a zero crossing.
        """
        rng = rng or np.random.default_rng(0)
        tsdf = np.asarray(self.tsdf, dtype=np.float64)
        if tsdf.min() >= 0 or tsdf.max() <= 0:
            raise NoSurface("TSDF has no zero crossing")
        mask = None
        if self.tsdf_weights.max() > 0:
            mask = self.tsdf_weights > 0
            if mask.all():
                mask = None
        try:
            verts, faces, _, _ = measure.marching_cubes(
                tsdf, level=0.0,
                spacing=(self.voxel_size,) * 3, mask=mask)
        except (ValueError, RuntimeError) as exc:
            raise NoSurface(str(exc)) from exc
        if faces.shape[0] == 0:
            raise NoSurface("no triangles at the zero level")
        verts = verts + self.origin + 0.5 * self.voxel_size

        tri = verts[faces]
        areas = 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        total = areas.sum()
        if total <= 0:
            raise NoSurface("degenerate surface")
        choice = rng.choice(faces.shape[0], size=n_samples, p=areas / total)
        r1 = rng.random(n_samples)
        r2 = rng.random(n_samples)
        flip = r1 + r2 > 1.0
        r1 = np.where(flip, 1.0 - r1, r1)
        r2 = np.where(flip, 1.0 - r2, r2)
        t = tri[choice]
        pts = t[:, 0] + r1[:, None] * (t[:, 1] - t[:, 0]) + r2[:, None] * (t[:, 2] - t[:, 0])

        inb = self.in_bounds(pts)
        pts = pts[inb]
        if not attach_features:
            return SurfaceSamples(points=pts,
                                  features=np.zeros((pts.shape[0], self.feature_dim)))
        feats, ok = self.sample_features(pts)
        return SurfaceSamples(points=pts[ok], features=feats[ok])


def _sample_feature_map(fmap: np.ndarray, uv: np.ndarray, W: int, H: int) -> np.ndarray:
    """Bilinear lookup of a (possibly lower-resolution) feature map at image
    pixels, renormalized to unit length."""
    Hf, Wf = fmap.shape[:2]
    gx = np.clip((uv[:, 0] + 0.5) * Wf / W - 0.5, 0, Wf - 1)
    gy = np.clip((uv[:, 1] + 0.5) * Hf / H - 0.5, 0, Hf - 1)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, Wf - 1)
    y1 = np.minimum(y0 + 1, Hf - 1)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    out = (fmap[y0, x0] * (1 - fx) * (1 - fy) + fmap[y0, x1] * fx * (1 - fy)
           + fmap[y1, x0] * (1 - fx) * fy + fmap[y1, x1] * fx * fy)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norms, 1e-12)


# ---------------------------------------------------------------------------
# persistence: magic "FVOL", dims u32, origin/voxel f32, D_f u32, then f32
# arrays (features, weights, tsdf, tsdf_weights) in x-fastest order.


def save_volume(vol: FeatureVolume, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"FVOL")
        fh.write(struct.pack("<3I", *vol.dims))
        fh.write(struct.pack("<3f", *vol.origin))
        fh.write(struct.pack("<f", vol.voxel_size))
        fh.write(struct.pack("<I", vol.feature_dim))
        fh.write(struct.pack("<f", vol.trunc))
        fh.write(np.ascontiguousarray(
            vol.features.transpose(2, 1, 0, 3), dtype="<f4").tobytes())
        for arr in (vol.weights, vol.tsdf, vol.tsdf_weights):
            fh.write(np.ascontiguousarray(arr.transpose(2, 1, 0), dtype="<f4").tobytes())


def load_volume(path) -> FeatureVolume:
    with open(path, "rb") as fh:
        if fh.read(4) != b"FVOL":
            raise ValueError("not a volume file")
        dims = struct.unpack("<3I", fh.read(12))
        origin = struct.unpack("<3f", fh.read(12))
        voxel = struct.unpack("<f", fh.read(4))[0]
        dfeat = struct.unpack("<I", fh.read(4))[0]
        trunc = struct.unpack("<f", fh.read(4))[0]
        vol = FeatureVolume(origin, voxel, dims, dfeat, trunc=trunc)
        nx, ny, nz = dims

        def read(shape):
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 4), dtype="<f4")
            return data.reshape(shape)

        vol.features = np.ascontiguousarray(
            read((nz, ny, nx, dfeat)).transpose(2, 1, 0, 3))
        vol.weights = np.ascontiguousarray(read((nz, ny, nx)).transpose(2, 1, 0))
        vol.tsdf = np.ascontiguousarray(read((nz, ny, nx)).transpose(2, 1, 0))
        vol.tsdf_weights = np.ascontiguousarray(read((nz, ny, nx)).transpose(2, 1, 0))
    return vol
