"""Multi-scale flow model: exact log-density, sampling and checkpoints."""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import CheckpointError, DimensionError, NumericError
from .fileio import read_fgt1, write_fgt1
from .layers import (
    ActNorm,
    AffineCoupling,
    FlowLayer,
    InvConv,
    Split,
    Squeeze,
    layer_from_config,
)

CHECKPOINT_MAGIC = b"FGCK"
CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


def standard_normal_logpdf(z: Tensor) -> Tensor:
    """Per-sample ``-1/2 * sum(z**2 + log 2pi)``."""
    return E.mul(E.sum_per_sample(E.add(E.square(z), LOG_2PI)), -0.5)


@dataclass
class FlowModel:
    """An ordered stack of invertible layers over a fixed N(0, I) prior.

    ``input_shape`` excludes the batch axis: ``(H, W, C)`` or ``(D, H, W, C)``.
    Inputs are expected in the rescaled domain ``img / 2**n_bits - 0.5``.
    """

    input_shape: tuple
    layers: list[FlowLayer]
    n_bits: int = 8
    hparams: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        # latent shapes are validated eagerly so a bad stack fails at build time
        self.latent_shapes()

    @property
    def dim(self) -> int:
        return int(np.prod(self.input_shape))

    # structure -----------------------------------------------------------

    def latent_shapes(self) -> list[tuple]:
        """Per-sample shapes of each factored-out latent, then the final one."""
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            if isinstance(layer, Split):
                shapes.append(layer.factored_shape(shape))
            shape = layer.output_shape(shape)
        shapes.append(shape)
        if sum(int(np.prod(s)) for s in shapes) != self.dim:
            raise DimensionError("latent dimensions do not add up to the input dimension")
        return shapes

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out[f"{i:03d}.{layer.kind}.{name}"] = p
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        idx, _, pname = name.split(".", 2)
        layer = self.layers[int(idx)]
        layer.params[pname] = Tensor(np.asarray(value, dtype=np.float64))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def actnorms(self) -> list[ActNorm]:
        return [l for l in self.layers if isinstance(l, ActNorm)]

    def invconvs(self) -> list[InvConv]:
        return [l for l in self.layers if isinstance(l, InvConv)]

    # density -------------------------------------------------------------

    def _batched(self, x) -> tuple[Tensor, bool]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape == self.input_shape:
            return E.reshape(x, (1,) + self.input_shape), True
        if x.shape[1:] != self.input_shape:
            raise DimensionError(
                f"input shape {x.shape} does not match model input {self.input_shape}"
            )
        return x, False

    def forward(self, x, check_finite: bool = True):
        """Map ``x`` to latents.

        Returns ``(latents, log_det)`` where ``latents`` lists each factored
        tensor followed by the final one and ``log_det`` is the per-sample sum
        of layer log-determinants.
        """
        h, _ = self._batched(x)
        latents = []
        log_det = Tensor(np.zeros(h.shape[0]))
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Split):
                h, z2 = layer.forward_split(h)
                latents.append(z2)
                continue
            h, ld = layer.forward(h)
            log_det = E.add(log_det, ld)
            if check_finite and not (
                np.all(np.isfinite(h.data)) and np.all(np.isfinite(ld.data))
            ):
                raise NumericError(f"non-finite output at layer {i} ({layer.kind})")
        latents.append(h)
        return latents, log_det

    def log_prob(self, x):
        """Exact log-density in nats: prior of all latents plus layer log-dets.

        Unbatched input returns a float; batched input returns a ``[B]`` Tensor
        (differentiable when a tape watches the parameters).
        """
        _, single = self._batched(x)
        latents, log_det = self.forward(x)
        total = log_det
        for z in latents:
            total = E.add(total, standard_normal_logpdf(z))
        if not np.all(np.isfinite(total.data)):
            raise NumericError("non-finite log-probability")
        return total.item() if single else total

    def bits_per_dim(self, x):
        """``-(log p(x) - D * log 2**n_bits) / (D * log 2)``.

        The shift converts the density over the unit-width rescaled domain to
        a probability mass over discrete pixel values.
        """
        lp = self.log_prob(x)
        lp = lp if isinstance(lp, float) else lp.data
        d = self.dim
        return -(lp - d * self.n_bits * math.log(2.0)) / (d * math.log(2.0))

    # inverse / sampling --------------------------------------------------

    def inverse(self, latents: list) -> np.ndarray:
        """Map latents (as returned by :meth:`forward`) back to data space."""
        latents = [z if isinstance(z, Tensor) else Tensor(z) for z in latents]
        factored = list(latents[:-1])
        h = latents[-1]
        for layer in reversed(self.layers):
            if isinstance(layer, Split):
                h = layer.inverse_split(h, factored.pop())
            else:
                h = layer.inverse(h)
        return h.data

    def draw_latents(self, n: int, seed: int | None, temperature: float = 1.0) -> list[np.ndarray]:
        if temperature < 0:
            raise ValueError("temperature must be non-negative")
        rng = np.random.default_rng(seed)
        return [
            temperature * rng.standard_normal((n,) + tuple(s)) for s in self.latent_shapes()
        ]

    def sample(self, n: int = 1, seed: int | None = None, temperature: float = 1.0) -> np.ndarray:
        """Draw ``z ~ N(0, T^2 I)`` at every latent and invert the flow."""
        return self.inverse(self.draw_latents(n, seed, temperature))

    # initialisation ------------------------------------------------------

    def data_init(self, batch) -> None:
        """Initialise every uninitialised actnorm from a data batch, in order."""
        h, _ = self._batched(batch)
        h = Tensor(h.data)
        for layer in self.layers:
            if isinstance(layer, Split):
                h, _ = layer.forward_split(h)
                h = Tensor(h.data)
                continue
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.initialize(h)
            h = Tensor(layer.forward(h).z.data)

    # persistence ---------------------------------------------------------

    def config(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "n_bits": self.n_bits,
            "hparams": self.hparams,
            "layers": [l.config() for l in self.layers],
            "layer_state": [l.state() for l in self.layers],
        }

    def copy(self) -> "FlowModel":
        return load_bytes(save_bytes(self))

    def save(self, path: str | os.PathLike) -> None:
        save(self, path)


def build_glow(
    input_shape,
    levels: int = 2,
    depth: int = 4,
    width: int = 64,
    kernel_size: int = 3,
    n_bits: int = 8,
    seed: int = 0,
) -> FlowModel:
    """Glow-style multi-scale model.

    Each level squeezes, applies ``depth`` steps of actnorm -> invconv ->
    coupling, and (except the last level) splits off half the channels.
    """
    input_shape = tuple(int(s) for s in input_shape)
    if levels < 1 or depth < 1:
        raise ValueError("levels and depth must be at least 1")
    rng = np.random.default_rng(seed)
    nd = len(input_shape) - 1
    shape = input_shape
    layers: list[FlowLayer] = []
    for level in range(levels):
        sq = Squeeze()
        shape = sq.output_shape(shape)
        layers.append(sq)
        c = shape[-1]
        for _ in range(depth):
            layers.append(ActNorm(c))
            layers.append(InvConv(c, rng))
            layers.append(AffineCoupling(c, ndim=nd, width=width, kernel_size=kernel_size, rng=rng))
        if level < levels - 1:
            sp = Split()
            shape = sp.output_shape(shape)
            layers.append(sp)
    hparams = {
        "levels": levels,
        "depth": depth,
        "width": width,
        "kernel_size": kernel_size,
        "seed": seed,
    }
    return FlowModel(input_shape, layers, n_bits=n_bits, hparams=hparams)


# checkpoint I/O --------------------------------------------------------------


def save_bytes(model: FlowModel, training: dict | None = None) -> bytes:
    params = model.named_parameters()
    meta = {
        "model": model.config(),
        "training": training if training is not None else model.metadata,
        "params": list(params),
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(meta_raw)))
    buf.write(meta_raw)
    for p in params.values():
        write_fgt1(buf, p.data)
    return buf.getvalue()


def load_bytes(raw: bytes) -> FlowModel:
    f = io.BytesIO(raw)
    if f.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a flowgate checkpoint (bad magic)")
    head = f.read(12)
    if len(head) != 12:
        raise CheckpointError("truncated checkpoint header")
    version, meta_len = struct.unpack("<IQ", head)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    meta_raw = f.read(meta_len)
    if len(meta_raw) != meta_len:
        raise CheckpointError("truncated checkpoint metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    cfg = meta["model"]
    layers = [layer_from_config(c) for c in cfg["layers"]]
    for layer, st in zip(layers, cfg["layer_state"]):
        layer.load_state(st)
    model = FlowModel(
        tuple(cfg["input_shape"]),
        layers,
        n_bits=cfg["n_bits"],
        hparams=cfg.get("hparams", {}),
        metadata=meta.get("training") or {},
    )
    expected = model.named_parameters()
    if list(expected) != meta["params"]:
        raise CheckpointError("parameter index does not match layer configuration")
    for name in meta["params"]:
        arr = read_fgt1(f)
        if arr.shape != expected[name].shape:
            raise CheckpointError(f"parameter {name}: shape {arr.shape} != {expected[name].shape}")
        model.set_parameter(name, arr)
    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return model


def save(model: FlowModel, path: str | os.PathLike, training: dict | None = None) -> None:
    raw = save_bytes(model, training)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(raw)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> FlowModel:
    with open(path, "rb") as f:
        return load_bytes(f.read())
