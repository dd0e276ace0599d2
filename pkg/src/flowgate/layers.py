"""Invertible layers: actnorm, channel-mixing convolution, affine coupling,
squeeze and split.

Every layer works on batched channels-last tensors (``[B, *spatial, C]``) and
returns a :class:`LayerOutput` whose ``log_det`` has one entry per sample.
Parameters live in ``layer.params`` as named :class:`~flowgate.engine.Tensor`
objects; the trainer swaps in updated arrays between steps.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import scipy.linalg

from . import engine as E
from .engine import Tensor
from .errors import DimensionError, SingularMatrixError

# coupling scale = sigmoid(h2 + SCALE_SHIFT) + SCALE_FLOOR, bounded in (0.6, 1.6)
SCALE_SHIFT = -0.1
SCALE_FLOOR = 0.6


class LayerOutput(NamedTuple):
    z: Tensor
    log_det: Tensor


def _pixels(x: Tensor) -> int:
    return int(np.prod(x.shape[1:-1]))


def _per_sample(value: Tensor, batch: int) -> Tensor:
    """Broadcast a scalar log-det term to shape ``[batch]`` (keeps gradients)."""
    return E.add(np.zeros(batch), value)


def _require_even(c: int, what: str) -> None:
    if c % 2:
        raise DimensionError(f"{what} needs an even channel extent, got {c}")


class FlowLayer:
    """Base class: no parameters, identity shape."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def output_shape(self, shape: tuple) -> tuple:
        return tuple(shape)

    def forward(self, x: Tensor) -> LayerOutput:
        raise NotImplementedError

    def inverse(self, z: Tensor) -> Tensor:
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}

    def state(self) -> dict:
        return {}

    def load_state(self, state: dict) -> None:
        pass


class ActNorm(FlowLayer):
    """Per-channel affine map ``z = (x + bias) * exp(log_scale)``."""

    kind = "actnorm"

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.params = {
            "log_scale": Tensor(np.zeros(channels)),
            "bias": Tensor(np.zeros(channels)),
        }
        self.initialized = False

    def initialize(self, x) -> None:
        """Data-dependent init: zero mean, unit variance per channel on ``x``."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        flat = data.reshape(-1, self.channels)
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        self.params["bias"] = Tensor(-mu)
        self.params["log_scale"] = Tensor(-0.5 * np.log(np.maximum(var, 1e-12)))
        self.initialized = True

    def forward(self, x: Tensor) -> LayerOutput:
        if x.shape[-1] != self.channels:
            raise DimensionError(f"actnorm expects {self.channels} channels, got {x.shape[-1]}")
        ls, b = self.params["log_scale"], self.params["bias"]
        z = E.mul(E.add(x, b), E.exp(ls))
        log_det = _per_sample(E.mul(E.sum(ls), float(_pixels(x))), x.shape[0])
        return LayerOutput(z, log_det)

    def inverse(self, z: Tensor) -> Tensor:
        ls, b = self.params["log_scale"].data, self.params["bias"].data
        return Tensor(z.data * np.exp(-ls) - b)

    def config(self) -> dict:
        return {"kind": self.kind, "channels": self.channels}

    def state(self) -> dict:
        return {"initialized": self.initialized}

    def load_state(self, state: dict) -> None:
        self.initialized = bool(state.get("initialized", False))


def random_rotation(channels: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random orthogonal matrix with determinant +1."""
    q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class InvConv(FlowLayer):
    """Invertible 1x1 (2-D) / 1x1x1 (3-D) convolution with kernel ``K``.

    The log-determinant is ``pixels * log|det K|``, where ``pixels`` is
    ``H*W`` or ``D*H*W``.
    """

    kind = "invconv"

    def __init__(self, channels: int, rng: np.random.Generator | None = None, kernel=None):
        super().__init__()
        self.channels = channels
        if kernel is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            kernel = random_rotation(channels, rng)
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.shape != (channels, channels):
            raise DimensionError(f"kernel must be {channels}x{channels}, got {kernel.shape}")
        self.params = {"kernel": Tensor(kernel)}

    def forward(self, x: Tensor) -> LayerOutput:
        K = self.params["kernel"]
        z = E.channel_mix(x, K)
        log_det = _per_sample(E.mul(E.log_abs_det(K), float(_pixels(x))), x.shape[0])
        return LayerOutput(z, log_det)

    def inverse(self, z: Tensor) -> Tensor:
        lu = E.lu_factor(self.params["kernel"].data)
        k_inv = scipy.linalg.lu_solve(lu, np.eye(self.channels))
        return Tensor(E.channel_mix(z.data, k_inv).data)

    def is_singular(self) -> bool:
        try:
            E.lu_factor(self.params["kernel"].data)
        except SingularMatrixError:
            return True
        return False

    def reorthogonalize(self) -> None:
        """Replace the kernel by its nearest orthogonal matrix (polar factor)."""
        K = np.nan_to_num(self.params["kernel"].data)
        u, _, vt = np.linalg.svd(K)
        self.params["kernel"] = Tensor(u @ vt)

    def config(self) -> dict:
        return {"kind": self.kind, "channels": self.channels}


class AffineCoupling(FlowLayer):
    """Affine coupling with the bounded scale ``sigmoid(h2 - 0.1) + 0.6``.

    The first channel half conditions a small CNN (conv k -> ReLU -> conv 1
    -> ReLU -> conv k) whose output splits into ``h2`` and ``t``. The second
    half is transformed as ``z_b = (x_b + t) * scale``. The final conv is
    zero-initialised so a fresh layer is close to the identity.
    """

    kind = "coupling"

    def __init__(
        self,
        channels: int,
        ndim: int = 2,
        width: int = 512,
        kernel_size: int = 3,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        _require_even(channels, "affine coupling")
        self.channels = channels
        self.ndim = ndim
        self.width = width
        self.kernel_size = kernel_size
        rng = rng if rng is not None else np.random.default_rng(0)
        ca = channels // 2
        cb = channels - ca
        k = kernel_size

        def init(shape):
            fan_in = int(np.prod(shape[:-1]))
            return rng.standard_normal(shape) / math.sqrt(fan_in)

        self.params = {
            "w1": Tensor(init((k,) * ndim + (ca, width))),
            "b1": Tensor(np.zeros(width)),
            "w2": Tensor(init((1,) * ndim + (width, width))),
            "b2": Tensor(np.zeros(width)),
            "w3": Tensor(np.zeros((k,) * ndim + (width, 2 * cb))),
            "b3": Tensor(np.zeros(2 * cb)),
        }

    def net(self, xa: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(h2, t)`` computed from the conditioning half."""
        p = self.params
        h = E.relu(E.conv(xa, p["w1"], p["b1"]))
        h = E.relu(E.conv(h, p["w2"], p["b2"]))
        out = E.conv(h, p["w3"], p["b3"])
        cb = self.channels - self.channels // 2
        return E.slice_channels(out, 0, cb), E.slice_channels(out, cb, 2 * cb)

    def scale(self, h2: Tensor) -> Tensor:
        return E.add(E.sigmoid(E.add(h2, SCALE_SHIFT)), SCALE_FLOOR)

    def _check(self, x: Tensor) -> None:
        _require_even(x.shape[-1], "affine coupling")
        if x.shape[-1] != self.channels:
            raise DimensionError(f"coupling expects {self.channels} channels, got {x.shape[-1]}")

    def forward(self, x: Tensor) -> LayerOutput:
        self._check(x)
        ca = self.channels // 2
        xa = E.slice_channels(x, 0, ca)
        xb = E.slice_channels(x, ca, self.channels)
        h2, t = self.net(xa)
        s = self.scale(h2)
        zb = E.mul(E.add(xb, t), s)
        return LayerOutput(E.concat_channels([xa, zb]), E.sum_per_sample(E.log(s)))

    def inverse(self, z: Tensor) -> Tensor:
        self._check(z)
        ca = self.channels // 2
        za = Tensor(z.data[..., :ca])
        h2, t = self.net(za)
        s = self.scale(h2)
        xb = z.data[..., ca:] / s.data - t.data
        return Tensor(np.concatenate([za.data, xb], axis=-1))

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "channels": self.channels,
            "ndim": self.ndim,
            "width": self.width,
            "kernel_size": self.kernel_size,
        }


def squeeze(x: Tensor) -> Tensor:
    """Space-to-channel: halve every spatial extent, multiply channels by 2**nd."""
    shape = x.shape
    b, spatial, c = shape[0], shape[1:-1], shape[-1]
    if any(s % 2 for s in spatial):
        raise DimensionError(f"squeeze needs even spatial extents, got {spatial}")
    nd = len(spatial)
    split = [b]
    for s in spatial:
        split += [s // 2, 2]
    split.append(c)
    y = E.reshape(x, tuple(split))
    # [B, s1, 2, s2, 2, ..., C] -> [B, s1, s2, ..., C, 2, 2, ...]
    perm = [0] + [1 + 2 * i for i in range(nd)] + [1 + 2 * nd] + [2 + 2 * i for i in range(nd)]
    y = E.transpose(y, tuple(perm))
    return E.reshape(y, (b,) + tuple(s // 2 for s in spatial) + (c * 2**nd,))


def unsqueeze(x: Tensor) -> Tensor:
    """Exact inverse of :func:`squeeze`."""
    shape = x.shape
    b, spatial, c = shape[0], shape[1:-1], shape[-1]
    nd = len(spatial)
    if c % 2**nd:
        raise DimensionError(f"unsqueeze needs channels divisible by {2**nd}, got {c}")
    c0 = c // 2**nd
    y = E.reshape(x, (b,) + tuple(spatial) + (c0,) + (2,) * nd)
    perm = [0]
    for i in range(nd):
        perm += [1 + i, 2 + nd + i]
    perm.append(1 + nd)
    y = E.transpose(y, tuple(perm))
    return E.reshape(y, (b,) + tuple(2 * s for s in spatial) + (c0,))


def split_channels(z: Tensor) -> tuple[Tensor, Tensor]:
    """``z1 = z[..., :C/2]``, ``z2 = z[..., C/2:]``."""
    c = z.shape[-1]
    _require_even(c, "split")
    return E.slice_channels(z, 0, c // 2), E.slice_channels(z, c // 2, c)


def concat(z1: Tensor, z2: Tensor) -> Tensor:
    return E.concat_channels([z1, z2])


class Squeeze(FlowLayer):
    kind = "squeeze"

    def output_shape(self, shape):
        nd = len(shape) - 1
        if any(s % 2 for s in shape[:-1]):
            raise DimensionError(f"squeeze needs even spatial extents, got {shape[:-1]}")
        return tuple(s // 2 for s in shape[:-1]) + (shape[-1] * 2**nd,)

    def forward(self, x: Tensor) -> LayerOutput:
        return LayerOutput(squeeze(x), Tensor(np.zeros(x.shape[0])))

    def inverse(self, z: Tensor) -> Tensor:
        return Tensor(unsqueeze(Tensor(z.data)).data)


class Split(FlowLayer):
    """Factors out the second channel half against the standard-normal prior.

    The model handles the factored half; ``forward`` here only returns the
    kept half with zero log-det.
    """

    kind = "split"

    def output_shape(self, shape):
        _require_even(shape[-1], "split")
        return tuple(shape[:-1]) + (shape[-1] // 2,)

    def factored_shape(self, shape):
        return tuple(shape[:-1]) + (shape[-1] - shape[-1] // 2,)

    def forward_split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return split_channels(x)

    def inverse_split(self, z1: Tensor, z2: Tensor) -> Tensor:
        return Tensor(np.concatenate([z1.data, z2.data], axis=-1))

    def forward(self, x: Tensor) -> LayerOutput:
        z1, _ = split_channels(x)
        return LayerOutput(z1, Tensor(np.zeros(x.shape[0])))


def layer_from_config(cfg: dict) -> FlowLayer:
    kind = cfg["kind"]
    if kind == "actnorm":
        return ActNorm(cfg["channels"])
    if kind == "invconv":
        return InvConv(cfg["channels"], kernel=np.eye(cfg["channels"]))
    if kind == "coupling":
        return AffineCoupling(
            cfg["channels"], ndim=cfg["ndim"], width=cfg["width"], kernel_size=cfg["kernel_size"]
        )
    if kind == "squeeze":
        return Squeeze()
    if kind == "split":
        return Split()
    raise ValueError(f"unknown layer kind {kind!r}")
