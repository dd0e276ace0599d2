"""Named model/training configurations.

``cxr2d`` and ``bct3d`` reproduce the published full-scale settings (chest
radiographs and brain CT volumes); they need far more compute than a desk
machine. ``desk2d`` and ``desk3d`` are the small synthetic-data settings the
acceptance run and the demos use; their m0 runs twice the epochs of m1
because the normal-only split is half the size of the mixture, so both
models take the same number of optimizer steps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class Preset:
    name: str
    shape: tuple
    levels: int
    depth: int
    width: int
    n_bits: int
    batch_size: int
    lr: float
    warmup_steps: int
    epochs_m0: int
    epochs_m1: int
    kernel_size: int = 3

    @property
    def ndim(self) -> int:
        return len(self.shape) - 1

    def epochs(self, which: str) -> int:
        return self.epochs_m0 if which == "m0" else self.epochs_m1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    def override(self, **changes) -> "Preset":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


PRESETS = {
    "cxr2d": Preset("cxr2d", (512, 512, 1), levels=7, depth=32, width=512, n_bits=8,
                    batch_size=128, lr=1e-3, warmup_steps=500, epochs_m0=200, epochs_m1=200),
    "bct3d": Preset("bct3d", (32, 128, 128, 1), levels=4, depth=32, width=512, n_bits=7,
                    batch_size=1, lr=1e-4, warmup_steps=500, epochs_m0=30, epochs_m1=20),
    "desk2d": Preset("desk2d", (16, 16, 1), levels=2, depth=4, width=64, n_bits=8,
                     batch_size=64, lr=1e-3, warmup_steps=50, epochs_m0=80, epochs_m1=40),
    "desk3d": Preset("desk3d", (8, 16, 16, 1), levels=2, depth=2, width=32, n_bits=7,
                     batch_size=16, lr=1e-3, warmup_steps=50, epochs_m0=20, epochs_m1=10),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
