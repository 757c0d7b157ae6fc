import numpy as np
import pytest

from anomem import autodiff as ad
from anomem.autodiff import Tensor


def rel_err(a, b) -> float:
    """Norm-wise relative error between two gradient arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def grad_errors(build, leaves, rng, h=1e-5) -> list[float]:
    """Analytic vs central-difference gradients of ``sum(build() * W)``.

    ``W`` is a fixed random weighting so that every output entry matters.
    """
    ad.new_record()
    out = build()
    weight = rng.normal(size=out.shape)

    def loss():
        return ad.sum(ad.mul(build(), weight))

    for leaf in leaves:
        leaf.grad = None
    ad.backward(loss())
    errs = []
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        errs.append(rel_err(analytic, ad.finite_difference_grad(loss, leaf, h)))
    return errs


def leaf(rng, *shape, low=None, high=None) -> Tensor:
    if low is not None:
        data = rng.uniform(low, high, size=shape)
    else:
        data = rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def acceptance(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
