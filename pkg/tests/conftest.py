import math

import numpy as np
import pytest
import torch
from hypothesis import strategies as st

from cs3d.geometry import Box3D, Camera


def fd_check(fn, x: torch.Tensor, n_samples: int = 20, eps: float = 1e-5, rtol: float = 1e-4,
             floor: float = 1e-6, seed: int = 0) -> float:
    """Compare autograd and central differences of ``sum(fn(x) * w)`` at sampled coordinates.

    ``w`` is a fixed random weighting so every output contributes. Relative
    error is |a - n| / max(|a|, |n|, floor). Returns the worst error seen and
    asserts it is below ``rtol``.
    """
    gen = torch.Generator().manual_seed(seed)
    x = x.detach().clone().to(torch.float64)
    out = fn(x)
    w = torch.rand(out.shape, generator=gen, dtype=torch.float64) + 0.5

    def scalar(v):
        return (fn(v) * w).sum()

    xv = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(scalar(xv), xv)
    flat = x.reshape(-1)
    n = flat.numel()
    idx = torch.randperm(n, generator=gen)[:n_samples] if n > n_samples else torch.arange(n)
    worst = 0.0
    for i in idx.tolist():
        xp, xm = flat.clone(), flat.clone()
        xp[i] += eps
        xm[i] -= eps
        with torch.no_grad():
            num = (scalar(xp.reshape(x.shape)) - scalar(xm.reshape(x.shape))).item() / (2 * eps)
        ana = grad.reshape(-1)[i].item()
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    assert worst < rtol, f"finite-difference mismatch {worst:.3g} >= {rtol}"
    return worst


def random_box(rng: np.random.Generator, spread: float = 2.0) -> Box3D:
    return Box3D(tuple(rng.uniform(-spread, spread, 3)), tuple(rng.uniform(0.3, 3.0, 3)),
                 float(rng.uniform(-math.pi, math.pi)))


def random_params(rng: np.random.Generator, depth: float = 8.0) -> np.ndarray:
    """A box well in front of the camera."""
    return np.array([rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(depth - 1, depth + 1),
                     *rng.uniform(0.5, 2.0, 3), rng.uniform(-math.pi, math.pi)])


@st.composite
def boxes(draw, spread: float = 3.0):
    f = st.floats(-spread, spread, allow_nan=False)
    s = st.floats(0.2, 4.0, allow_nan=False)
    return Box3D((draw(f), draw(f), draw(f)), (draw(s), draw(s), draw(s)),
                 draw(st.floats(-math.pi, math.pi, allow_nan=False)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return Camera(520.0, 520.0, 320.0, 240.0, 640, 480)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance_log():
    def log(n: int, ok: bool, detail: str):
        _ACCEPTANCE[n] = (ok, detail)
    return log


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
