import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowgate import engine as E
from flowgate.layers import ActNorm, AffineCoupling, InvConv
from flowgate.model import build_glow

settings.register_profile(
    "flowgate", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("flowgate")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize(model, rng, scale=0.05):
    """Give every parameter a small random value so no layer is at identity."""
    for name, p in model.named_parameters().items():
        if ".invconv." in name:
            continue
        model.set_parameter(name, p.data + scale * rng.standard_normal(p.shape))
    for a in model.actnorms():
        a.initialized = True
    return model


@pytest.fixture
def tiny_model(rng):
    """2-level 2-D model on 4x4x1 inputs with every layer off identity."""
    return randomize(build_glow((4, 4, 1), levels=2, depth=1, width=4, kernel_size=3, seed=3), rng)


def random_layers(rng, channels=4, ndim=2):
    an = ActNorm(channels)
    an.params["bias"].data[...] = rng.standard_normal(channels) * 0.3
    an.params["log_scale"].data[...] = rng.standard_normal(channels) * 0.3
    an.initialized = True
    ic = InvConv(channels, rng)
    ic.params["kernel"].data[...] += 0.2 * rng.standard_normal((channels, channels))
    cp = AffineCoupling(channels, ndim=ndim, width=3, kernel_size=3, rng=rng)
    for p in cp.params.values():
        p.data[...] = rng.standard_normal(p.shape) * 0.3
    return {"actnorm": an, "invconv": ic, "coupling": cp}


def as_np(t):
    return t.data if isinstance(t, E.Tensor) else np.asarray(t)


# acceptance reporting --------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
