import numpy as np
import pytest

from atxf import tensor as T
from atxf.vit import ViTConfig, init_params


def grad_check(build, arrays, eps=1e-5, seed=0):
    """Compare autodiff against central differences for ``sum(build(*xs) * R)``.

    Returns the worst relative error over every input array.
    """
    rng = np.random.default_rng(seed)
    leaves = [T.parameter(a.copy()) for a in arrays]
    out = build(*leaves)
    R = rng.standard_normal(out.shape)
    loss = (out * R).sum()
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        def f():
            return float(np.sum(build(*[T.Tensor(l.data) for l in leaves]).data * R))

        num = T.numeric_grad(f, leaf.data, eps)
        worst = max(worst, T.max_rel_error(leaf.grad, num, floor=1e-6))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return ViTConfig(image_size=8, patch_size=4, depth=2, heads=2, dim=8, num_classes=3)


@pytest.fixture
def small_model(small_cfg):
    return init_params(small_cfg, 7)


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    assert passed, f"criterion {number}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
