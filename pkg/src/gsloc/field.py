"""Scene-specific 3D descriptor field.

A multi-resolution hash-grid encoding feeds a small MLP that outputs a
unit-norm descriptor for any 3D position.  The field is trained by
distillation against unit feature targets sampled on the scene surface,
minimizing mean |1 - cos(decoded, target)| with Adam.

Parameters are float32 (that is also their on-disk format); all math is
dtype-generic, so tests can run the identical code paths in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySamples

_HASH_PRIMES = np.array([2654435761, 805459861, 3674653429], dtype=np.uint64)
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)],
                    dtype=np.int64)


class HashEncoding:
    """L levels of hashed trilinear feature grids over the scene bounds.

    Level resolutions decrease geometrically from ``extent / coarsest_divisor``
    down to ``finest_resolution``.  Corner -> table index is a spatial hash:
    three large prime multipliers XOR-folded, modulo table size.
    """

    def __init__(self, bounds_min, bounds_max, levels: int = 8,
                 features_per_level: int = 2, table_size_log2: int = 19,
                 finest_resolution: float = 0.06, coarsest_divisor: float = 8.0,
                 rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(bounds_max, dtype=np.float64)
        extent = float(np.max(self.bounds_max - self.bounds_min))
        coarsest = max(extent / coarsest_divisor, finest_resolution)
        if levels == 1:
            self.resolutions = np.array([finest_resolution])
        else:
            ratio = (finest_resolution / coarsest) ** (1.0 / (levels - 1))
            self.resolutions = coarsest * ratio ** np.arange(levels)
        self.levels = levels
        self.features_per_level = features_per_level
        self.table_size = 1 << table_size_log2
        self.tables = rng.uniform(-1e-4, 1e-4,
                                  size=(levels, self.table_size, features_per_level)
                                  ).astype(dtype)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def _hash(self, cells: np.ndarray) -> np.ndarray:
        c = cells.astype(np.uint64)
        h = (c[..., 0] * _HASH_PRIMES[0]) ^ (c[..., 1] * _HASH_PRIMES[1]) \
            ^ (c[..., 2] * _HASH_PRIMES[2])
        return (h % np.uint64(self.table_size)).astype(np.int64)

    def encode(self, points: np.ndarray, cache: list | None = None) -> np.ndarray:
        """Concatenated per-level trilinear lookups at (B, 3) points.

        Points are clamped to the scene bounds.  When ``cache`` is a list,
        (indices, weights) per level are appended for the backward pass.
        """
        pts = np.clip(np.atleast_2d(points), self.bounds_min, self.bounds_max)
        B = pts.shape[0]
        out = np.zeros((B, self.output_dim))
        for l in range(self.levels):
            g = (pts - self.bounds_min) / self.resolutions[l]
            i0 = np.floor(g).astype(np.int64)
            frac = (g - i0).astype(np.float64)
            idx = np.empty((B, 8), dtype=np.int64)
            w = np.empty((B, 8))
            for c, corner in enumerate(_CORNERS):
                idx[:, c] = self._hash(i0 + corner)
                w[:, c] = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1)
            gathered = self.tables[l][idx].astype(np.float64)   # (B, 8, F)
            out[:, l * self.features_per_level:(l + 1) * self.features_per_level] = \
                np.einsum("bc,bcf->bf", w, gathered)
            if cache is not None:
                cache.append((idx, w))
        return out

    def encode_backward(self, cache: list, d_out: np.ndarray) -> np.ndarray:
        """Scatter encoding gradients back into per-level tables (dense).

        Returns d_tables with the same shape as ``self.tables``.
        """
        d_tables = np.zeros_like(self.tables, dtype=np.float64)
        for l, (idx, grads) in enumerate(self.encode_backward_sparse(cache, d_out)):
            d_tables[l][idx] = grads
        return d_tables

    def encode_backward_sparse(self, cache: list, d_out: np.ndarray):
        """Per-level (unique table indices, summed gradients) pairs.

        The sparse form keeps training cost proportional to the touched
        entries rather than the full table.
        """
        F = self.features_per_level
        out = []
        for l, (idx, w) in enumerate(cache):
            dslice = d_out[:, l * F:(l + 1) * F].astype(np.float64)  # (B, F)
            contrib = (w[:, :, None] * dslice[:, None, :]).reshape(-1, F)
            flat_idx = idx.reshape(-1)
            uniq, inv = np.unique(flat_idx, return_inverse=True)
            sums = np.zeros((uniq.size, F))
            np.add.at(sums, inv, contrib)
            out.append((uniq, sums))
        return out


class DescriptorDecoder:
    """MLP head: encoding -> unit-norm descriptor.

    ``layers`` linear maps with ReLU between them, followed by L2
    normalization of the output.
    """

    def __init__(self, in_dim: int, out_dim: int = 256, hidden: int = 128,
                 layers: int = 4, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.weights = []
        self.biases = []
        for a, b in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / a)
            self.weights.append((rng.normal(0, scale, size=(a, b))).astype(dtype))
            self.biases.append(np.zeros(b, dtype=dtype))
        self.out_dim = out_dim

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W.astype(np.float64) + b.astype(np.float64)
            if i < last:
                h_next = np.maximum(z, 0.0)
            else:
                h_next = z
            if cache is not None:
                cache.append((h, z))
            h = h_next
        norm = np.linalg.norm(h, axis=1, keepdims=True)
        norm = np.maximum(norm, 1e-12)
        g = h / norm
        if cache is not None:
            cache.append((h, norm))
        return g

    def backward(self, cache: list, d_g: np.ndarray):
        """Gradients of the loss w.r.t. weights, biases, and the input.

        ``cache`` comes from forward(); d_g is dL/d(normalized output).
        """
        y, norm = cache[-1]
        g = y / norm
        d_y = (d_g - np.sum(d_g * g, axis=1, keepdims=True) * g) / norm

        d_weights = [None] * len(self.weights)
        d_biases = [None] * len(self.weights)
        grad = d_y
        for i in range(len(self.weights) - 1, -1, -1):
            h_in, z = cache[i]
            if i < len(self.weights) - 1:
                grad = grad * (z > 0)
            d_weights[i] = h_in.T @ grad
            d_biases[i] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        return d_weights, d_biases, grad


@dataclass
class DistillLog:
    losses: list = field(default_factory=list)
    final_mean_cosine: float = 0.0


class DescriptorField:
    """Hash encoding + decoder bundle with training and batched inference."""

    def __init__(self, encoding: HashEncoding, decoder: DescriptorDecoder):
        self.encoding = encoding
        self.decoder = decoder
        self._adam = None

    @classmethod
    def create(cls, bounds_min, bounds_max, descriptor_dim: int = 256,
               levels: int = 8, features_per_level: int = 2,
               table_size_log2: int = 19, finest_resolution: float = 0.06,
               coarsest_divisor: float = 8.0, hidden: int = 128,
               layers: int = 4, seed: int = 0, dtype=np.float32) -> "DescriptorField":
        rng = np.random.default_rng(seed)
        enc = HashEncoding(bounds_min, bounds_max, levels, features_per_level,
                           table_size_log2, finest_resolution, coarsest_divisor,
                           rng=rng, dtype=dtype)
        dec = DescriptorDecoder(enc.output_dim, descriptor_dim, hidden, layers,
                                rng=rng, dtype=dtype)
        return cls(enc, dec)

    def decode(self, p: np.ndarray) -> np.ndarray:
        """Unit-norm descriptor at a single 3D position."""
        return self.batch_decode(np.asarray(p, dtype=np.float64)[None, :])[0]

    def batch_decode(self, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
        points = np.atleast_2d(points)
        outs = []
        for lo in range(0, points.shape[0], chunk):
            enc = self.encoding.encode(points[lo:lo + chunk])
            outs.append(self.decoder.forward(enc))
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, self.decoder.out_dim))

    # ------------------------------------------------------------------
    def loss_and_grads(self, points: np.ndarray, targets: np.ndarray,
                       sparse_tables: bool = False):
        """Mean |1 - cos| loss and gradients for one minibatch.

        Targets are renormalized defensively; returns
        (loss, mean_cos, d_tables, d_weights, d_biases) where d_tables is
        dense, or per-level sparse (indices, grads) pairs when requested.
        """
        t = targets / np.maximum(np.linalg.norm(targets, axis=1, keepdims=True), 1e-12)
        enc_cache: list = []
        enc = self.encoding.encode(points, cache=enc_cache)
        dec_cache: list = []
        g = self.decoder.forward(enc, cache=dec_cache)
        cos = np.sum(g * t, axis=1)
        loss = float(np.mean(1.0 - cos))
        d_g = -t / points.shape[0]
        d_w, d_b, d_enc = self.decoder.backward(dec_cache, d_g)
        if sparse_tables:
            d_tables = self.encoding.encode_backward_sparse(enc_cache, d_enc)
        else:
            d_tables = self.encoding.encode_backward(enc_cache, d_enc)
        return loss, float(cos.mean()), d_tables, d_w, d_b

    def distill(self, samples, steps: int, lr: float = 1e-3,
                batch: int = 4096, rng: np.random.Generator | None = None,
                log_fn=None) -> DistillLog:
        """Fit the field to surface samples (points + unit feature targets)."""
        pts = np.asarray(samples.points, dtype=np.float64)
        feats = np.asarray(samples.features, dtype=np.float64)
        if pts.shape[0] == 0:
            raise EmptySamples("no surface samples to distill from")
        rng = rng or np.random.default_rng(0)
        log = DistillLog()
        if steps <= 0:
            return log

        beta1, beta2, eps = 0.9, 0.999, 1e-8
        dense = [*self.decoder.weights, *self.decoder.biases]
        m = [np.zeros_like(p, dtype=np.float64) for p in dense]
        v = [np.zeros_like(p, dtype=np.float64) for p in dense]
        # lazy per-entry Adam for the hash tables: moments decay is applied
        # on touch, so cost scales with touched entries, not table size
        tables = self.encoding.tables
        tm = np.zeros(tables.shape, dtype=np.float32)
        tv = np.zeros(tables.shape, dtype=np.float32)
        tstep = np.zeros(tables.shape[:2], dtype=np.int64)

        for step in range(1, steps + 1):
            if pts.shape[0] <= batch:
                sel = np.arange(pts.shape[0])
            else:
                sel = rng.choice(pts.shape[0], size=batch, replace=False)
            loss, mean_cos, d_tab, d_w, d_b = self.loss_and_grads(
                pts[sel], feats[sel], sparse_tables=True)
            log.losses.append(loss)
            for i, (p, gr) in enumerate(zip(dense, [*d_w, *d_b])):
                m[i] = beta1 * m[i] + (1 - beta1) * gr
                v[i] = beta2 * v[i] + (1 - beta2) * gr * gr
                mh = m[i] / (1 - beta1**step)
                vh = v[i] / (1 - beta2**step)
                p -= (lr * mh / (np.sqrt(vh) + eps)).astype(p.dtype)
            for l, (idx, gr) in enumerate(d_tab):
                lag = step - 1 - tstep[l][idx]
                decay1 = beta1 ** lag
                decay2 = beta2 ** lag
                mm = tm[l][idx] * decay1[:, None] * beta1 + (1 - beta1) * gr
                vv = tv[l][idx] * decay2[:, None] * beta2 + (1 - beta2) * gr * gr
                tm[l][idx] = mm
                tv[l][idx] = vv
                tstep[l][idx] = step
                mh = mm / (1 - beta1**step)
                vh = vv / (1 - beta2**step)
                tables[l][idx] -= (lr * mh / (np.sqrt(vh) + eps)).astype(tables.dtype)
            if log_fn is not None and step % 200 == 0:
                log_fn(f"distill step {step}/{steps}: loss {loss:.5f}, cos {mean_cos:.4f}")

        final = self.batch_decode(pts[:min(len(pts), 8192)])
        tgt = feats[:final.shape[0]]
        tgt = tgt / np.maximum(np.linalg.norm(tgt, axis=1, keepdims=True), 1e-12)
        log.final_mean_cosine = float(np.mean(np.sum(final * tgt, axis=1)))
        return log
