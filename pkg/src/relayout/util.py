"""Shared helpers: seeded substreams, hashing, and exact array resampling."""

from __future__ import annotations

import hashlib

import numpy as np


def substream_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Derive a named, order-independent child seed from one root seed."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "big")
    return np.random.SeedSequence(entropy=(int(seed) & 0xFFFFFFFFFFFFFFFF, key))


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_array(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def _check_integer_ratio(src: int, dst: int) -> tuple[int, int]:
    """Return (down, up) block factors for an exact integer resampling."""
    if src == dst:
        return 1, 1
    if src > dst:
        if src % dst:
            raise ValueError(f"resolution {src} not an integer multiple of {dst}")
        return src // dst, 1
    if dst % src:
        raise ValueError(f"resolution {dst} not an integer multiple of {src}")
    return 1, dst // src


def area_resample(arr: np.ndarray, resolution: tuple[int, int]) -> np.ndarray:
    """Resample a 2-D map by block averaging (down) or replication (up).

    Factors must be integers in each axis; this keeps the operation exact,
    which the gradient pass and the resampling oracles rely on.
    """
    if arr.ndim != 2:
        raise ValueError("area_resample expects a 2-D map")
    h, w = arr.shape
    th, tw = resolution
    dh, uh = _check_integer_ratio(h, th)
    dw, uw = _check_integer_ratio(w, tw)
    out = arr.reshape(h // dh, dh, w // dw, dw).mean(axis=(1, 3))
    if uh > 1:
        out = np.repeat(out, uh, axis=0)
    if uw > 1:
        out = np.repeat(out, uw, axis=1)
    return out


def area_resample_vjp(grad_out: np.ndarray, source_shape: tuple[int, int]) -> np.ndarray:
    """Backward pass of :func:`area_resample` for a cotangent at the output."""
    th, tw = grad_out.shape
    h, w = source_shape
    dh, uh = _check_integer_ratio(h, th)
    dw, uw = _check_integer_ratio(w, tw)
    g = grad_out
    if uh > 1:  # forward repeat -> backward block sum
        g = g.reshape(h, uh, g.shape[1]).sum(axis=1)
    if uw > 1:
        g = g.reshape(g.shape[0], w, uw).sum(axis=2)
    if dh > 1 or dw > 1:  # forward block mean -> backward spread / block size
        g = np.repeat(np.repeat(g, dh, axis=0), dw, axis=1) / float(dh * dw)
    return g


def bilinear_resize(arr: np.ndarray, resolution: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an [..., h, w] array using pixel-center alignment."""
    h, w = arr.shape[-2:]
    th, tw = resolution
    if (h, w) == (th, tw):
        return arr.copy()
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)
    top = arr[..., y0, :][..., :, x0] * (1 - wx) + arr[..., y0, :][..., :, x1] * wx
    bot = arr[..., y1, :][..., :, x0] * (1 - wx) + arr[..., y1, :][..., :, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def mask_to_resolution(mask: np.ndarray, resolution: tuple[int, int]) -> np.ndarray:
    """Binary mask to a working resolution: area-average then threshold at 0.5."""
    frac = area_resample(mask.astype(np.float64), resolution)
    return frac >= 0.5


def bbox_of_mask(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight (x, y, w, h) bounding box of a binary mask, or None if empty."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)
