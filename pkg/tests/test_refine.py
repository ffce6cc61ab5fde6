import numpy as np
import pytest
from hypothesis import given, strategies as st

from slimmerge.decompose import decompose, hard_truncate, svd, svd_all
from slimmerge.errors import ConfigError, MissingFactor, RankOutOfRange
from slimmerge.ranks import RankAllocation
from slimmerge.refine import (FactorPair, RefineConfig, grad_factors, init_all, init_factors, load_factors,
                              per_task_losses, random_factors, refine, refine_loss, save_factors,
                              temperature_weights)
from slimmerge.store import SyntheticSpec, generate_synthetic

from conftest import tiny_set


def _alloc(dec, rank_of):
    cont = {(c, l): float(rank_of(c, l)) for c in dec.components() for l in dec.layer_names}
    return RankAllocation.from_continuous(cont, dec.dims)


def _planted(seed, T=3):
    spec = SyntheticSpec(T=T, L=2, dims=[(20, 16), (16, 24)], shared_rank=4, expert_rank=3, similarity=0.5,
                         noise_sigma=0.02, seed=seed)
    return decompose(generate_synthetic(spec))


def _flat(factors):
    return np.concatenate([np.concatenate([f.A.ravel(), f.B.ravel()]) for f in factors.values()])


def _unflat(factors, x):
    out, i = {}, 0
    for key, f in factors.items():
        a, b = f.A.size, f.B.size
        out[key] = FactorPair(x[i:i + a].reshape(f.A.shape), x[i + a:i + a + b].reshape(f.B.shape), *key)
        i += a + b
    return out


# --------------------------------------------------------------------------
# init


def test_init_rank_zero_is_empty():
    f = init_factors(np.arange(12.0).reshape(3, 4), 0)
    assert f.A.shape == (3, 0) and f.B.shape == (0, 4)
    assert np.all(f.product() == 0)


def test_init_rank_one_closed_form():
    u = np.array([0.6, 0.8])
    v = np.array([0.0, 1.0, 0.0])
    f = init_factors(4.0 * np.outer(u, v), 1)
    sign = np.sign(f.A[0, 0])
    assert np.allclose(f.A[:, 0], sign * 2.0 * u) and np.allclose(f.B[0], sign * 2.0 * v)


def test_init_product_is_truncation(rng):
    m = rng.standard_normal((6, 4))
    f = init_factors(m, 2)
    assert np.max(np.abs(f.product() - hard_truncate(svd(m), 2))) <= 1e-10
    # balanced split: each factor carries sqrt of the spectrum
    assert np.allclose(np.linalg.norm(f.A, axis=0), np.linalg.norm(f.B, axis=1))


def test_init_rejects_bad_rank(rng):
    with pytest.raises(RankOutOfRange):
        init_factors(rng.standard_normal((3, 3)), 4)


def test_random_init_starts_at_zero_product(rng):
    f = random_factors(5, 4, 3, rng)
    assert np.all(f.product() == 0) and np.any(f.A != 0)


# --------------------------------------------------------------------------
# loss and gradients


def _scalar_case(a_s, a_t, tau):
    factors = {("shared", "w"): FactorPair(np.array([[a_s]]), np.array([[1.0]])),
               ("t0", "w"): FactorPair(np.array([[a_t]]), np.array([[1.0]]))}
    return factors, [{"w": np.array([[tau]])}], ["t0"]


def test_scalar_loss_and_gradient():
    factors, targets, ids = _scalar_case(1.0, 1.0, 3.0)
    assert refine_loss(factors, targets, ids) == pytest.approx(1.0)
    g = grad_factors(factors, targets, ids)
    # E = -1, B = 1, so dL/dA = 2 E B = -2 for both pairs
    assert g[("t0", "w")][0][0, 0] == pytest.approx(-2.0)
    assert g[("shared", "w")][0][0, 0] == pytest.approx(-2.0)


def test_zero_everything():
    factors = {("shared", "w"): FactorPair(np.zeros((3, 1)), np.zeros((1, 2))),
               ("t0", "w"): FactorPair(np.zeros((3, 1)), np.zeros((1, 2)))}
    targets = [{"w": np.zeros((3, 2))}]
    assert refine_loss(factors, targets, ["t0"]) == 0.0
    for gA, gB in grad_factors(factors, targets, ["t0"]).values():
        assert not gA.any() and not gB.any()


def test_missing_factor():
    factors, targets, _ = _scalar_case(1.0, 1.0, 3.0)
    with pytest.raises(MissingFactor):
        refine_loss(factors, targets, ["t9"])


def test_single_task_loss_is_dropped_spectrum(rng):
    # one task: the expert is zero, so the loss is the shared tail energy
    m = rng.standard_normal((7, 5))
    s = np.linalg.svd(m, compute_uv=False)
    dec = decompose(_one_task(m))
    for r in range(6):
        factors = init_all(dec, _alloc(dec, lambda c, l: r if c == "shared" else 0))
        assert refine_loss(factors, dec.targets(), dec.task_ids) == pytest.approx(np.sum(s[r:] ** 2), abs=1e-10)


def _one_task(m):
    from slimmerge.store import LayerMatrix, TaskVectorSet

    return TaskVectorSet([("t0", {"w": LayerMatrix("w", m)})])


def test_init_loss_matches_independent_truncation():
    dec = decompose(tiny_set(3, T=3))
    ranks = {"shared": 2, "t0": 1, "t1": 2, "t2": 0}
    factors = init_all(dec, _alloc(dec, lambda c, l: ranks[c]))
    expect = 0.0
    for t, tid in enumerate(dec.task_ids):
        for l in dec.layer_names:
            # oracle uses numpy's SVD directly
            parts = []
            for comp in ("shared", tid):
                U, S, Vt = np.linalg.svd(dec.matrix(comp, l), full_matrices=False)
                r = ranks[comp]
                parts.append((U[:, :r] * S[:r]) @ Vt[:r])
            expect += np.sum((parts[0] + parts[1] - dec.targets()[t][l]) ** 2)
    assert refine_loss(factors, dec.targets(), dec.task_ids) == pytest.approx(expect / 3, rel=1e-10)


def test_full_rank_init_is_exact():
    dec = decompose(tiny_set(4))
    factors = init_all(dec, _alloc(dec, lambda c, l: min(dec.dims[l])))
    assert refine_loss(factors, dec.targets(), dec.task_ids) <= 1e-20


def _fd_check(seed, weighted, reg):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 4))
    dims = [(int(rng.integers(2, 6)), int(rng.integers(2, 6))) for _ in range(int(rng.integers(1, 3)))]
    ids = [f"t{t}" for t in range(T)]
    factors = {}
    for l, (m, n) in enumerate(dims):
        for comp in ("shared", *ids):
            r = int(rng.integers(1, 4))
            factors[(comp, f"l{l}")] = FactorPair(rng.standard_normal((m, r)), rng.standard_normal((r, n)))
    targets = [{f"l{l}": rng.standard_normal((m, n)) for l, (m, n) in enumerate(dims)} for _ in range(T)]
    w = rng.uniform(0.2, 2.0, T) if weighted else None
    lam = 0.3 if reg else 0.0
    reg_t = {key: rng.standard_normal(f.product().shape) for key, f in factors.items()} if reg else None
    g = grad_factors(factors, targets, ids, lam, reg_t, w)
    analytic = np.concatenate([np.concatenate([g[k][0].ravel(), g[k][1].ravel()]) for k in factors])
    x = _flat(factors)
    h = 1e-6
    numeric = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        numeric[i] = (refine_loss(_unflat(factors, xp), targets, ids, lam, reg_t, w)
                      - refine_loss(_unflat(factors, xm), targets, ids, lam, reg_t, w)) / (2 * h)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


@pytest.mark.parametrize("weighted,reg", [(False, False), (True, False), (False, True), (True, True)])
def test_gradient_matches_finite_differences(weighted, reg):
    for seed in range(10):
        assert _fd_check(seed, weighted, reg) <= 1e-4


# --------------------------------------------------------------------------
# temperature weights


@given(st.lists(st.floats(0.0, 1e3), min_size=1, max_size=8), st.floats(0.05, 50.0))
def test_temperature_weights_sum_to_T(losses, tau):
    w = temperature_weights(np.array(losses), tau)
    assert w.sum() == pytest.approx(len(losses))
    assert np.all(w >= 0)


def test_temperature_weights_order_and_limit():
    ell = np.array([1.0, 2.0, 4.0])
    w = temperature_weights(ell, 1.0)
    assert w[0] < w[1] < w[2]
    assert np.allclose(temperature_weights(ell, 1e9), 1.0)


# --------------------------------------------------------------------------
# refinement


def test_config_validation():
    with pytest.raises(ConfigError):
        RefineConfig(lr2=0).validate()
    with pytest.raises(ConfigError):
        RefineConfig(weighting="softmax").validate()
    with pytest.raises(ConfigError):
        RefineConfig(adam_betas=(1.0, 0.9)).validate()


def test_zero_iterations_is_noop():
    dec = _planted(0)
    factors = init_all(dec, _alloc(dec, lambda c, l: 2), svd_all(dec))
    res = refine(factors, dec.targets(), dec.task_ids, RefineConfig(max_iters=0))
    assert res.final_loss == res.initial_loss
    for key, f in factors.items():
        assert np.array_equal(res.factors[key].A, f.A) and np.array_equal(res.factors[key].B, f.B)


def test_input_factors_not_mutated():
    dec = _planted(1)
    factors = init_all(dec, _alloc(dec, lambda c, l: 2), svd_all(dec))
    before = {k: f.A.copy() for k, f in factors.items()}
    refine(factors, dec.targets(), dec.task_ids, RefineConfig(max_iters=20))
    assert all(np.array_equal(before[k], factors[k].A) for k in factors)


def test_full_rank_converges_to_exact():
    # start from a perturbed full-rank point so there is something to do
    dec = decompose(tiny_set(5))
    factors = init_all(dec, _alloc(dec, lambda c, l: min(dec.dims[l])))
    rng = np.random.default_rng(0)
    for f in factors.values():
        f.A += 0.05 * rng.standard_normal(f.A.shape)
    res = refine(factors, dec.targets(), dec.task_ids, RefineConfig(lr2=0.003, max_iters=3000, tol=0.0))
    assert res.initial_loss > 1e-2
    assert res.final_loss <= 1e-8


@pytest.mark.parametrize("seed", range(4))
def test_under_budget_improves(seed):
    dec = _planted(seed)
    factors = init_all(dec, _alloc(dec, lambda c, l: 2 if c == "shared" else 1), svd_all(dec))
    res = refine(factors, dec.targets(), dec.task_ids, RefineConfig(max_iters=400))
    assert res.final_loss <= 0.99 * res.initial_loss
    trace = [row["L_task"] for row in res.trace]
    assert trace[0] == pytest.approx(res.initial_loss)
    assert min(trace) == pytest.approx(res.final_loss)
    # per-task columns reproduce the mean
    row = res.trace[-1]
    assert row["L_task"] == pytest.approx(np.mean([row[f"loss_{t}"] for t in dec.task_ids]))


@pytest.mark.parametrize("seed", range(3))
def test_trace_settles_after_burn_in(seed):
    dec = _planted(10 + seed)
    factors = init_all(dec, _alloc(dec, lambda c, l: 2 if c == "shared" else 1), svd_all(dec))
    res = refine(factors, dec.targets(), dec.task_ids, RefineConfig(max_iters=300))
    trace = np.array([row["L_task"] for row in res.trace])
    assert np.all(np.diff(trace[10:]) <= 1e-12 * trace[10:-1])


def test_regularizer_keeps_products_near_init():
    dec = _planted(2)
    factors = init_all(dec, _alloc(dec, lambda c, l: 2 if c == "shared" else 1), svd_all(dec))
    start = {k: f.product() for k, f in factors.items()}

    def drift(res):
        return np.sqrt(sum(np.sum((res.factors[k].product() - start[k]) ** 2) for k in start))

    free = refine(factors, dec.targets(), dec.task_ids, RefineConfig(max_iters=300))
    held = refine(factors, dec.targets(), dec.task_ids, RefineConfig(max_iters=300, reg_lambda=1.0))
    assert drift(held) <= drift(free)
    assert held.final_loss >= free.final_loss - 1e-12


def test_temperature_weighting_runs_and_improves():
    dec = _planted(3)
    factors = init_all(dec, _alloc(dec, lambda c, l: 2 if c == "shared" else 1), svd_all(dec))
    res = refine(factors, dec.targets(), dec.task_ids, RefineConfig(max_iters=200, weighting="temperature"))
    assert res.final_loss < res.initial_loss


def test_svd_init_beats_random_init():
    dec = _planted(4)
    alloc = _alloc(dec, lambda c, l: 2 if c == "shared" else 1)
    svd_start = refine_loss(init_all(dec, alloc, svd_all(dec)), dec.targets(), dec.task_ids)
    res = refine(init_all(dec, alloc, random_init=True, seed=0), dec.targets(), dec.task_ids,
                 RefineConfig(max_iters=300))
    trace = np.array([row["L_task"] for row in res.trace])
    reached = np.flatnonzero(trace <= svd_start)
    # the SVD start is there at iteration 0; random init needs strictly more
    assert reached.size == 0 or reached[0] > 0


def test_init_all_shapes():
    dec = _planted(5)
    factors = init_all(dec, _alloc(dec, lambda c, l: 3), svd_all(dec))
    assert set(factors) == {(c, l) for c in dec.components() for l in dec.layer_names}
    for (c, l), f in factors.items():
        assert f.A.shape == (dec.dims[l][0], 3) and f.B.shape == (3, dec.dims[l][1])
    ell = per_task_losses(factors, dec.targets(), dec.task_ids)
    assert ell.shape == (dec.T,)


def test_factor_file_round_trip(tmp_path):
    dec = _planted(6)
    factors = init_all(dec, _alloc(dec, lambda c, l: 0 if c == "task1" else 2), svd_all(dec))
    save_factors(factors, dec.task_ids, tmp_path / "f", {"final_loss": 1.5}, {"config_hash": "h"})
    back, ids, manifest = load_factors(tmp_path / "f")
    assert ids == dec.task_ids and manifest["meta"]["final_loss"] == 1.5
    assert manifest["provenance"]["config_hash"] == "h"
    for key, f in factors.items():
        assert back[key].A.shape == f.A.shape and back[key].B.shape == f.B.shape
        # stored as float32
        assert np.allclose(back[key].A, f.A, rtol=1e-6, atol=1e-7)
