"""Convolutional expert over the three-channel grid input.

Fixed architecture: three 3x3 same-padded conv layers (16, 32, 64 channels),
each followed by per-channel spatial normalization with learnable affine,
ReLU, and dropout; a final 3x3 conv to one channel and a channel average
yield the H x W field.

Differentiation comes in two flavors, matching how the field is used:

* ``cnn_backward`` -- reverse mode through the live normalization statistics
  (and dropout masks); this is the gradient of the training objective.
* ``cnn_cell_jacobian`` -- rows d out[p] / d omega with the normalization
  statistics frozen at the evaluation point, which is the linearization the
  Laplace step uses. Frozen statistics make the rows receptive-field local,
  so all cells are produced with a handful of batched window contractions
  instead of one backward pass per cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import FieldRaster

__all__ = [
    "CnnArchitecture",
    "param_shapes",
    "param_count",
    "init_omega",
    "unpack_omega",
    "build_input",
    "cnn_forward",
    "cnn_backward",
    "cnn_cell_jacobian",
]


@dataclass(frozen=True)
class CnnArchitecture:
    channels: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 3
    kernel: int = 3
    dropout: float = 0.1
    norm_eps: float = 1e-5


def param_shapes(arch: CnnArchitecture) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    prev = arch.in_channels
    k = arch.kernel
    for i, c in enumerate(arch.channels):
        shapes.append((f"conv{i}.w", (c, prev, k, k)))
        shapes.append((f"conv{i}.b", (c,)))
        shapes.append((f"norm{i}.gain", (c,)))
        shapes.append((f"norm{i}.shift", (c,)))
        prev = c
    shapes.append(("head.w", (1, prev, k, k)))
    shapes.append(("head.b", (1,)))
    return shapes


def param_count(arch: CnnArchitecture) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(arch))


def unpack_omega(omega: np.ndarray, arch: CnnArchitecture) -> dict[str, np.ndarray]:
    """Views into the flat vector, keyed by parameter group name."""
    n = param_count(arch)
    if omega.shape != (n,):
        raise ValueError(f"omega has length {omega.shape}, architecture needs {n}")
    out = {}
    pos = 0
    for name, shape in param_shapes(arch):
        size = int(np.prod(shape))
        out[name] = omega[pos : pos + size].reshape(shape)
        pos += size
    return out


def init_omega(arch: CnnArchitecture, rng: np.random.Generator) -> np.ndarray:
    """Zero biases, rectifier-scaled Gaussian weights, identity normalization."""
    parts = []
    for name, shape in param_shapes(arch):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).ravel())
        elif name.endswith(".gain"):
            parts.append(np.ones(shape).ravel())
        else:
            parts.append(np.zeros(shape).ravel())
    return np.concatenate(parts)


def build_input(heights: FieldRaster) -> np.ndarray:
    """Three-channel input: standardized heights plus [-1, 1] coordinate ramps.

    Heights are standardized over all cells (streets are identically zero, so
    mask-restricted statistics would be degenerate).
    """
    h, w = heights.spec.shape
    hv = heights.values
    std = hv.std()
    z = (hv - hv.mean()) / (std if std > 1e-12 else 1.0)
    cols = np.linspace(-1.0, 1.0, w)
    rows = np.linspace(-1.0, 1.0, h)
    px = np.broadcast_to(cols, (h, w))
    py = np.broadcast_to(rows[:, None], (h, w))
    return np.stack([z, px, py])


# ---------------------------------------------------------------------------
# Forward / training backward
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (C*k*k, H*W) with zero same-padding; rows follow the
    kernel's (channel, dy, dx) raveling so wflat @ cols is the convolution."""
    c, h, w = x.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r)))
    cols = np.empty((c, k * k, h * w))
    for a in range(k):
        for b in range(k):
            cols[:, a * k + b, :] = xp[:, a : a + h, b : b + w].reshape(c, -1)
    return cols.reshape(c * k * k, h * w)


def _conv(cols: np.ndarray, w: np.ndarray, b: np.ndarray, shape_hw) -> np.ndarray:
    o = w.shape[0]
    z = w.reshape(o, -1) @ cols
    return z.reshape(o, *shape_hw) + b[:, None, None]


def _conv_input_grad(dz: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Transposed conv of a stride-1 same-pad conv is a conv with the kernel
    # flipped and in/out channels swapped.
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    cols = _im2col(dz, w.shape[2])
    return _conv(cols, wt, np.zeros(wt.shape[0]), dz.shape[1:])


def cnn_forward(
    x: np.ndarray,
    omega: np.ndarray,
    arch: CnnArchitecture,
    *,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout_masks: list[np.ndarray] | None = None,
    frozen_stats: list[tuple[np.ndarray, np.ndarray]] | None = None,
    want_cache: bool = False,
):
    """Evaluate the network; returns the H x W field (and a cache on request).

    ``mode="train"`` applies inverted dropout using ``rng`` (or the explicit
    ``dropout_masks``). ``frozen_stats`` substitutes fixed per-layer
    normalization (mean, var) pairs for the live spatial statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    p = unpack_omega(np.asarray(omega, dtype=float), arch)
    hw = x.shape[1:]
    cache = {
        "x": x,
        "layers": [],
        "stats": [],
        "mode": mode,
        "frozen": frozen_stats is not None,
    }
    cur = x
    for i in range(len(arch.channels)):
        cols = _im2col(cur, arch.kernel)
        z = _conv(cols, p[f"conv{i}.w"], p[f"conv{i}.b"], hw)
        if frozen_stats is not None:
            m, v = frozen_stats[i]
        else:
            m, v = z.mean(axis=(1, 2)), z.var(axis=(1, 2))
        sigma = np.sqrt(v + arch.norm_eps)
        xhat = (z - m[:, None, None]) / sigma[:, None, None]
        gain = p[f"norm{i}.gain"]
        n = gain[:, None, None] * xhat + p[f"norm{i}.shift"][:, None, None]
        relu_mask = n > 0
        a = np.where(relu_mask, n, 0.0)
        if mode == "train" and arch.dropout > 0.0:
            if dropout_masks is not None:
                keep = dropout_masks[i]
            else:
                if rng is None:
                    raise ValueError("train mode with dropout needs an rng or masks")
                keep = rng.random(a.shape) >= arch.dropout
            d = a * keep / (1.0 - arch.dropout)
        else:
            keep = None
            d = a
        cache["stats"].append((m, v))
        cache["layers"].append(
            {
                "cols": cols,
                "sigma": sigma,
                "xhat": xhat,
                "gain": gain,
                "relu_mask": relu_mask,
                "keep": keep,
                "out": d,
            }
        )
        cur = d
    cols = _im2col(cur, arch.kernel)
    z = _conv(cols, p["head.w"], p["head.b"], hw)
    cache["head_cols"] = cols
    out = z.mean(axis=0)
    if want_cache:
        return out, cache
    return out


def cnn_backward(seed: np.ndarray, cache: dict, omega: np.ndarray, arch: CnnArchitecture) -> np.ndarray:
    """Gradient of sum(seed * output) with respect to omega.

    Differentiates the forward pass exactly as evaluated, including through
    the spatial normalization statistics and any dropout masks in the cache.
    """
    p = unpack_omega(np.asarray(omega, dtype=float), arch)
    grads = {}
    hw = seed.shape
    msp = hw[0] * hw[1]

    head_w = p["head.w"]
    dz = np.repeat(seed[None], head_w.shape[0], axis=0) / head_w.shape[0]
    grads["head.w"] = (dz.reshape(dz.shape[0], -1) @ cache["head_cols"].T).reshape(head_w.shape)
    grads["head.b"] = dz.sum(axis=(1, 2))
    dd = _conv_input_grad(dz, head_w)

    for i in reversed(range(len(arch.channels))):
        layer = cache["layers"][i]
        if layer["keep"] is not None:
            dd = dd * layer["keep"] / (1.0 - arch.dropout)
        dn = np.where(layer["relu_mask"], dd, 0.0)
        xhat = layer["xhat"]
        grads[f"norm{i}.gain"] = (dn * xhat).sum(axis=(1, 2))
        grads[f"norm{i}.shift"] = dn.sum(axis=(1, 2))
        dxhat = dn * layer["gain"][:, None, None]
        if cache.get("frozen", False):
            dzc = dxhat / layer["sigma"][:, None, None]
        else:
            mean_dxhat = dxhat.mean(axis=(1, 2), keepdims=True)
            mean_dx_xhat = (dxhat * xhat).mean(axis=(1, 2), keepdims=True)
            dzc = (dxhat - mean_dxhat - xhat * mean_dx_xhat) / layer["sigma"][:, None, None]
        w = p[f"conv{i}.w"]
        grads[f"conv{i}.w"] = (dzc.reshape(dzc.shape[0], -1) @ layer["cols"].T).reshape(w.shape)
        grads[f"conv{i}.b"] = dzc.sum(axis=(1, 2))
        if i > 0:
            dd = _conv_input_grad(dzc, w)

    return np.concatenate([grads[name].ravel() for name, _ in param_shapes(arch)])


# ---------------------------------------------------------------------------
# Frozen-statistics cell Jacobian
# ---------------------------------------------------------------------------


def _gather_windows(field: np.ndarray, cells: np.ndarray, radius: int) -> np.ndarray:
    """(C, H, W) field -> (M, C, (2r+1)^2) zero-padded windows around cells."""
    k = 2 * radius + 1
    fp = np.pad(field, ((0, 0), (radius, radius), (radius, radius)))
    win = sliding_window_view(fp, (k, k), axis=(1, 2))
    g = win[:, cells[:, 0], cells[:, 1]]  # (C, M, k, k)
    m = cells.shape[0]
    return g.transpose(1, 0, 2, 3).reshape(m, field.shape[0], k * k)


def _offset_map(k_outer: int, k_inner: int) -> np.ndarray:
    """Flat index map: (outer window offset, kernel offset) -> combined offset."""
    ko, ki = k_outer, k_inner
    kc = ko + ki - 1
    idx = np.empty((ko * ko, ki * ki), dtype=int)
    for t in range(ko * ko):
        tr, tc = divmod(t, ko)
        for d in range(ki * ki):
            dr, dc = divmod(d, ki)
            idx[t, d] = (tr + dr) * kc + (tc + dc)
    return idx


def _spread_matrix(k_outer: int, k_inner: int) -> np.ndarray:
    """Binary matrix summing (outer, kernel) offset pairs into combined offsets."""
    idx = _offset_map(k_outer, k_inner)
    kc = k_outer + k_inner - 1
    s = np.zeros((k_outer * k_outer * k_inner * k_inner, kc * kc))
    s[np.arange(idx.size), idx.ravel()] = 1.0
    return s


def cnn_cell_jacobian(
    cells: np.ndarray,
    cache: dict,
    omega: np.ndarray,
    arch: CnnArchitecture,
) -> np.ndarray:
    """Rows d out[cell] / d omega, (M, param_count), normalization statistics
    frozen at the cached evaluation point.

    Requires an eval-mode cache (the linearization is defined without dropout).
    """
    if cache["mode"] != "eval":
        raise ValueError("cell Jacobians are defined for eval-mode caches")
    if arch.channels != (16, 32, 64) and len(arch.channels) != 3:
        raise ValueError("jacobian assembly expects the three-layer architecture")
    cells = np.asarray(cells, dtype=int)
    m = cells.shape[0]
    p = unpack_omega(np.asarray(omega, dtype=float), arch)
    k = arch.kernel
    layers = cache["layers"]

    # Per-layer constant fields of the frozen-stat linearization.
    R, EX, ES = [], [], []
    for layer in layers:
        a_coef = (layer["gain"] / layer["sigma"])[:, None, None]
        rmask = layer["relu_mask"].astype(float)
        R.append(rmask * a_coef)
        EX.append(rmask * layer["xhat"])
        ES.append(rmask)

    out = {}
    k2 = k * k

    # Head: out[p] = mean_ch conv(d2); single output channel.
    d2win = _gather_windows(layers[2]["out"], cells, 1)  # (M, 64, 9)
    out["head.w"] = d2win.reshape(m, -1)
    out["head.b"] = np.ones((m, 1))

    w3v = p["head.w"][0].reshape(-1, k2)  # (64, 9)
    r2win = _gather_windows(R[2], cells, 1)
    t2 = w3v[None] * r2win  # (M, 64, 9): d out / d z2 on the 3x3 window
    out["norm2.gain"] = (w3v[None] * _gather_windows(EX[2], cells, 1)).sum(axis=2)
    out["norm2.shift"] = (w3v[None] * _gather_windows(ES[2], cells, 1)).sum(axis=2)
    out["conv2.b"] = t2.sum(axis=2)

    d1win5 = _gather_windows(layers[1]["out"], cells, 2)  # (M, 32, 25)
    u99 = _offset_map(k, k)
    # sum_t t2[m,c,t] * d1[m,i,t+d] as a batched matmul over the cell axis
    d1g = d1win5[:, :, u99].transpose(0, 2, 1, 3).reshape(m, k2, -1)  # (M, 9, 32*9)
    out["conv2.w"] = t2 @ d1g  # (M, 64, 32*9)

    # d out / d d1 on the 5x5 window.
    c2, c1 = p["conv2.w"].shape[:2]
    w2v = p["conv2.w"].reshape(c2, c1 * k2)
    e1 = (t2.transpose(0, 2, 1).reshape(m * k2, c2) @ w2v).reshape(m, k2, c1, k2)
    q1 = e1.transpose(0, 2, 1, 3).reshape(m, c1, -1) @ _SPREAD_3_3  # (M, 32, 25)
    t1 = q1 * _gather_windows(R[1], cells, 2)
    out["norm1.gain"] = (q1 * _gather_windows(EX[1], cells, 2)).sum(axis=2)
    out["norm1.shift"] = (q1 * _gather_windows(ES[1], cells, 2)).sum(axis=2)
    out["conv1.b"] = t1.sum(axis=2)

    d0win7 = _gather_windows(layers[0]["out"], cells, 3)  # (M, 16, 49)
    u59 = _offset_map(5, k)
    d0g = d0win7[:, :, u59].transpose(0, 2, 1, 3).reshape(m, 25, -1)  # (M, 25, 16*9)
    out["conv1.w"] = t1 @ d0g  # (M, 32, 16*9)

    # d out / d d0 on the 7x7 window.
    c0 = p["conv1.w"].shape[1]
    w1v = p["conv1.w"].reshape(c1, c0 * k2)
    e0 = (t1.transpose(0, 2, 1).reshape(m * 25, c1) @ w1v).reshape(m, 25, c0, k2)
    q0 = e0.transpose(0, 2, 1, 3).reshape(m, c0, -1) @ _SPREAD_5_3  # (M, 16, 49)
    t0 = q0 * _gather_windows(R[0], cells, 3)
    out["norm0.gain"] = (q0 * _gather_windows(EX[0], cells, 3)).sum(axis=2)
    out["norm0.shift"] = (q0 * _gather_windows(ES[0], cells, 3)).sum(axis=2)
    out["conv0.b"] = t0.sum(axis=2)

    xwin9 = _gather_windows(cache["x"], cells, 4)  # (M, 3, 81)
    u79 = _offset_map(7, k)
    xg = xwin9[:, :, u79].transpose(0, 2, 1, 3).reshape(m, 49, -1)  # (M, 49, 3*9)
    out["conv0.w"] = t0 @ xg  # (M, 16, 3*9)

    return np.concatenate(
        [out[name].reshape(m, -1) for name, _ in param_shapes(arch)], axis=1
    )


_SPREAD_3_3 = _spread_matrix(3, 3)
_SPREAD_5_3 = _spread_matrix(5, 3)
