import numpy as np
import pytest
from conftest import grad_errors, leaf
from hypothesis import given, settings
from hypothesis import strategies as st

from anomem import autodiff as ad
from anomem.autodiff import Tensor
from anomem.errors import NumericError, ValidationError
from anomem.losses import (
    ScaleWeights,
    contrastive_loss,
    loss_com,
    loss_com_ms,
    loss_dist,
    loss_sup,
    loss_variance,
    nt_xent,
    sample_positions,
)
from anomem.memory import HopfieldMemory

GRAD_TOL = 1e-5
N_CASES = 100


# ----------------------------------------------------------------------
# brute-force oracles (plain loops over numpy vectors)
# ----------------------------------------------------------------------


def _cos(u, v):
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def bf_nt_xent(anchor, positive, pool, tau):
    den = sum(np.exp(_cos(anchor, p) / tau) for p in pool)
    return -np.log(np.exp(_cos(anchor, positive) / tau) / den)


def bf_loss_com(za, zb, tau):
    b = len(za)
    views = list(za) + list(zb)
    total = 0.0
    for k in range(b):
        for anchor, positive, idx in ((za[k], zb[k], k), (zb[k], za[k], b + k)):
            pool = [v for j, v in enumerate(views) if j != idx]
            total += bf_nt_xent(anchor, positive, pool, tau)
    return total / (2 * b)


def bf_retrieve(x, beta, q, tol, max_iters):
    xi = q.copy()
    for _ in range(max_iters):
        logits = beta * (xi @ x)
        w = np.exp(logits - logits.max())
        nxt = (w / w.sum()) @ x.T
        if np.abs(nxt - xi).max() < tol:
            break
        xi = nxt
    return xi


def bf_variance(rows, y):
    n = sum(y)
    if n == 0:
        return 0.0
    return -sum(yk * np.sqrt(np.var(r)) for r, yk in zip(rows, y)) / n


def bf_loss_com_ms(featsA, featsB, y, lambdas, lambda_v, mems, tau):
    """Full sampling (r = 1): sum every position term by term."""
    total, count = 0.0, 0
    for s, (fa, fb) in enumerate(zip(featsA, featsB)):
        x, beta, tol, it = mems[s].weights.data, mems[s].beta, mems[s].tol, mems[s].max_iters
        grid = [(None, None)] if fa.ndim == 2 else [(i, j) for i in range(fa.shape[1]) for j in range(fa.shape[2])]
        for i, j in grid:
            a = fa if i is None else fa[:, i, j]
            b = fb if i is None else fb[:, i, j]
            gated = [bf_retrieve(x, beta, a[k], tol, it) if y[k] else a[k] for k in range(len(a))]
            term = bf_loss_com(gated, list(b), tau) + lambda_v * bf_variance(gated, y)
            total += lambdas[s] * term
            count += 1
    return total / count


# ----------------------------------------------------------------------
# nt_xent
# ----------------------------------------------------------------------


def test_nt_xent_single_positive_pool_is_zero():
    a, p = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    assert nt_xent(a, p, p[None]).item() == pytest.approx(0.0, abs=1e-15)


def test_nt_xent_closed_form():
    a = np.array([1.0, 0.0, 0.0])
    pool = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    val = nt_xent(a, a, pool, tau=1.0).item()
    assert val == pytest.approx(-np.log(np.e / (np.e + 2)), abs=1e-12)
    assert val == pytest.approx(0.55144, abs=1e-5)


def test_nt_xent_matches_brute_force():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        views = rng.normal(size=(4, 5))
        got = nt_xent(views[0], views[2], views[1:], tau=0.1).item()
        assert abs(got - bf_nt_xent(views[0], views[2], views[1:], 0.1)) < 1e-9


def test_nt_xent_scale_invariance():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(4, 3))
    base = nt_xent(v[0], v[1], v[1:]).item()
    scaled = nt_xent(7.5 * v[0], v[1], v[1:]).item()
    assert abs(base - scaled) < 1e-10


def test_nt_xent_zero_vector_is_numeric_error():
    with pytest.raises(NumericError):
        nt_xent(np.zeros(2), np.ones(2), np.ones((1, 2)))


# ----------------------------------------------------------------------
# loss_com
# ----------------------------------------------------------------------


def test_loss_com_single_pair_is_zero():
    rng = np.random.default_rng(0)
    assert loss_com(rng.normal(size=(1, 4)), rng.normal(size=(1, 4))).item() == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("b", [2, 3, 4])
def test_loss_com_matches_brute_force(b):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        za, zb = rng.normal(size=(b, 5)), rng.normal(size=(b, 5))
        assert abs(loss_com(za, zb, 0.1).item() - bf_loss_com(za, zb, 0.1)) < 1e-9


def test_loss_com_is_symmetric():
    rng = np.random.default_rng(1)
    za, zb = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert abs(loss_com(za, zb).item() - loss_com(zb, za).item()) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_loss_com_non_negative(seed, b):
    rng = np.random.default_rng(seed)
    assert loss_com(rng.normal(size=(b, 3)), rng.normal(size=(b, 3))).item() >= 0.0


def test_loss_com_vanishes_when_positives_dominate():
    za = np.eye(3)
    assert loss_com(za, za, tau=1e-3).item() < 1e-12


def test_loss_com_rejects_empty_and_zero():
    with pytest.raises(NumericError):
        loss_com(np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValidationError):
        loss_com(np.ones(3), np.ones(3))


def test_non_strict_zero_vector_has_cosine_zero():
    val = contrastive_loss(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), 1.0, strict=False)
    assert np.isfinite(val.data).all()


# ----------------------------------------------------------------------
# loss_variance
# ----------------------------------------------------------------------


def test_variance_examples():
    assert loss_variance(np.full((2, 3), 4.0), [1, 1]).item() == 0.0
    assert loss_variance(np.array([[0.0, 2.0]]), [1]).item() == pytest.approx(-1.0)


def test_variance_without_normals_is_zero():
    assert loss_variance(np.ones((2, 3)) * np.arange(3), [0, 0]).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["sample", "batch"]))
def test_variance_ignores_anomalous_rows(seed, mode):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4, 3))
    y = [1, 0, 1, 0]
    other = z.copy()
    other[[1, 3]] = rng.normal(size=(2, 3)) * 10
    assert loss_variance(z, y, mode).item() == loss_variance(other, y, mode).item()
    assert loss_variance(z, y, mode).item() <= 0.0


def test_batch_mode_uses_per_feature_spread():
    z = np.array([[0.0, 1.0], [2.0, 1.0]])
    assert loss_variance(z, [1, 1], "batch").item() == pytest.approx(-0.5)
    assert loss_variance(z, [1, 1], "sample").item() == pytest.approx(-0.5)
    assert loss_variance(np.array([[1.0, 1.0], [3.0, 3.0]]), [1, 1], "sample").item() == 0.0


# ----------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------


def test_sample_positions_counts():
    assert len(sample_positions(8, 8, 1.0, 0)) == 64
    assert len(sample_positions(8, 8, 0.3, 0)) == 19
    with pytest.raises(ValidationError):
        sample_positions(2, 2, 0.2, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.floats(0.05, 1.0), st.integers(0, 10**6))
def test_sample_positions_exact_distinct(h, w, r, seed):
    count = int(np.floor(h * w * r))
    if count < 1:
        with pytest.raises(ValidationError):
            sample_positions(h, w, r, seed)
        return
    pos = sample_positions(h, w, r, seed)
    assert len(pos) == count
    assert len({tuple(p) for p in pos}) == count
    assert pos[:, 0].max() < h and pos[:, 1].max() < w


def test_sample_positions_deterministic():
    np.testing.assert_array_equal(sample_positions(8, 8, 0.3, 5), sample_positions(8, 8, 0.3, 5))


# ----------------------------------------------------------------------
# loss_com_ms
# ----------------------------------------------------------------------


def _mems(rng, dims, n=3, **kw):
    return [HopfieldMemory.init(d, n, rng, beta=2.0, radius=1.5, **kw) for d in dims]


def test_ms_single_scale_reduces_to_components():
    rng = np.random.default_rng(0)
    (mem,) = _mems(rng, [4])
    za, zb, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), [1, 0, 1]
    w = ScaleWeights((1.5,), 0.05, (1.0,))
    got = loss_com_ms([za], [zb], y, w, [mem], seed=0).total.item()
    gated = np.where(np.array(y)[:, None] == 1, mem.retrieve(za).data, za)
    want = 1.5 * (loss_com(gated, zb).item() + 0.05 * loss_variance(gated, y).item())
    assert abs(got - want) < 1e-12


def test_ms_full_sampling_is_seed_free():
    rng = np.random.default_rng(1)
    mems = _mems(rng, [3, 4])
    fa = [rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(2, 4))]
    fb = [rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(2, 4))]
    w = ScaleWeights((1.0, 2.0), 0.05, (1.0, 1.0))
    a = loss_com_ms(fa, fb, [1, 1], w, mems, seed=1).total.item()
    b = loss_com_ms(fa, fb, [1, 1], w, mems, seed=2).total.item()
    assert abs(a - b) < 1e-12


@pytest.mark.parametrize("y", [[1, 1], [1, 0], [0, 1, 1, 0]])
def test_ms_matches_brute_force(y):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        b = len(y)
        mems = _mems(rng, [3, 4])
        fa = [rng.normal(size=(b, 2, 2, 3)), rng.normal(size=(b, 4))]
        fb = [rng.normal(size=(b, 2, 2, 3)), rng.normal(size=(b, 4))]
        w = ScaleWeights((1.0, 2.0), 0.05, (1.0, 1.0))
        got = loss_com_ms(fa, fb, y, w, mems, tau=0.1, seed=0).total.item()
        want = bf_loss_com_ms(fa, fb, y, w.lambdas, 0.05, mems, 0.1)
        assert abs(got - want) < 1e-9


def test_ms_linear_in_lambdas_without_variance():
    rng = np.random.default_rng(2)
    mems = _mems(rng, [3, 4])
    fa = [rng.normal(size=(3, 4, 4, 3)), rng.normal(size=(3, 4))]
    fb = [rng.normal(size=(3, 4, 4, 3)), rng.normal(size=(3, 4))]
    base = loss_com_ms(fa, fb, [1, 1, 0], ScaleWeights((1.0, 2.0), 0.0, (0.3, 1.0)), mems, seed=4)
    scaled = loss_com_ms(fa, fb, [1, 1, 0], ScaleWeights((3.0, 6.0), 0.0, (0.3, 1.0)), mems, seed=4)
    assert abs(scaled.total.item() - 3.0 * base.total.item()) < 1e-12
    assert base.positions == [4, 1]


def test_ms_scale_subset_and_no_memory():
    rng = np.random.default_rng(3)
    fa = [rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(2, 4))]
    fb = [rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(2, 4))]
    w = ScaleWeights((1.0, 2.0), 0.05, (1.0, 1.0))
    out = loss_com_ms(fa, fb, [1, 1], w, None, scales=[1])
    assert abs(out.total.item() - 2.0 * loss_com(fa[1], fb[1]).item()) < 1e-12


def test_ms_reports_failing_scale():
    rng = np.random.default_rng(4)
    fa = [np.zeros((2, 2, 2, 3)), rng.normal(size=(2, 4))]
    fb = [rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(2, 4))]
    with pytest.raises(NumericError, match="scale 1"):
        loss_com_ms(fa, fb, [0, 0], ScaleWeights((1.0, 2.0), 0.0, (1.0, 1.0)), None, strict=True)


# ----------------------------------------------------------------------
# hinge losses
# ----------------------------------------------------------------------


@pytest.mark.parametrize("d,y,want", [(0.4, 1, 0.0), (1.5, 1, 1.0), (3.0, 0, 0.0), (0.5, 0, 1.5)])
def test_loss_dist_examples(d, y, want):
    assert loss_dist(d, y, 2.0) == pytest.approx(want)


def test_loss_dist_rejects_negative_distance():
    with pytest.raises(ValidationError):
        loss_dist(-0.1, 1)


def test_loss_sup_examples():
    assert loss_sup(np.array([[0.1, 0.2], [5.0, 4.0]]), [1, 0]).item() == 0.0
    assert loss_sup(np.array([[1.5, 3.0]]), [1]).item() == pytest.approx(1.75)
    d = np.array([[1.5, 3.0], [0.3, 0.1]])
    assert loss_sup(np.vstack([d, d]), [1, 0, 1, 0]).item() == pytest.approx(loss_sup(d, [1, 0]).item())


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 10), st.sampled_from([0, 1]), st.floats(0.1, 5))
def test_hinge_tensor_agrees_with_scalar(d, y, m):
    assert loss_sup(np.array([[d]]), [y], m).item() == pytest.approx(loss_dist(d, y, m), abs=1e-12)


# ----------------------------------------------------------------------
# gradients
# ----------------------------------------------------------------------


def _kink_free(rng, b, s, y, m):
    """Distances at least 0.05 away from the hinge corners."""
    d = rng.uniform(0, 4, size=(b, s))
    for _ in range(100):
        corner = np.where(np.array(y)[:, None] == 1, 1 / m, m)
        bad = np.abs(d - corner) < 0.05
        if not bad.any():
            break
        d[bad] = rng.uniform(0, 4, size=bad.sum())
    return Tensor(d, requires_grad=True)


def _ms_case(rng):
    y = [1, 0, 1]
    mems = _mems(rng, [3, 4], max_iters=3, tol=1e-12)
    fa = [leaf(rng, 3, 2, 2, 3), leaf(rng, 3, 4)]
    fb = [leaf(rng, 3, 2, 2, 3), leaf(rng, 3, 4)]
    w = ScaleWeights((1.0, 2.0), 0.05, (0.5, 1.0))
    leaves = fa + fb + [m.weights for m in mems]

    def build():
        return loss_com_ms(fa, fb, y, w, mems, tau=0.5, seed=7).total

    return build, leaves


def _case(name, rng):
    if name == "nt_xent":
        a, p, n = leaf(rng, 4), leaf(rng, 4), leaf(rng, 2, 4)
        return (lambda: nt_xent(a, p, ad.concat([ad.reshape(p, (1, 4)), n]), tau=0.5)), [a, p, n]
    if name == "loss_com":
        za, zb = leaf(rng, 3, 4), leaf(rng, 3, 4)
        return (lambda: loss_com(za, zb, tau=0.5)), [za, zb]
    if name in ("loss_variance_sample", "loss_variance_batch"):
        mode = name.rsplit("_", 1)[1]
        z = leaf(rng, 4, 5)
        return (lambda: loss_variance(z, [1, 0, 1, 1], mode)), [z]
    if name == "loss_com_ms":
        return _ms_case(rng)
    if name == "loss_sup":
        y = [1, 0, 1]
        d = _kink_free(rng, 3, 2, y, 2.0)
        return (lambda: loss_sup(d, y, 2.0)), [d]
    raise KeyError(name)


LOSSES = ["nt_xent", "loss_com", "loss_variance_sample", "loss_variance_batch", "loss_com_ms", "loss_sup"]


@pytest.mark.parametrize("name", LOSSES)
def test_loss_gradient_matches_central_differences(name):
    worst = 0.0
    for seed in range(N_CASES):
        rng = np.random.default_rng(seed)
        build, leaves = _case(name, rng)
        worst = max(worst, *grad_errors(build, leaves, rng))
    assert worst < GRAD_TOL, f"{name}: worst relative error {worst:.2e}"
