import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pucnigan import noise_model as nm
from pucnigan.datasets import NearestMeanOracle


def random_stochastic(rng, n):
    m = rng.random((n, n)) + 1e-3
    return m / m.sum(axis=1, keepdims=True)


def test_ema_constant_delta_geometric_identity():
    rng = np.random.default_rng(0)
    delta = random_stochastic(rng, 4)
    lam, n = 0.99, 500
    c = nm.ConfusionMatrix.identity(4, lam)
    for _ in range(n):
        c = nm.ema_update(c, delta)
    expected = lam ** n * np.eye(4) + (1 - lam ** n) * delta
    assert np.max(np.abs(c.entries - expected)) <= 1e-10
    assert c.update_count == n


def test_ema_varying_delta_matches_weighted_sum():
    rng = np.random.default_rng(1)
    lam, n = 0.9, 50
    deltas = [random_stochastic(rng, 3) for _ in range(n)]
    c = nm.ConfusionMatrix.identity(3, lam)
    for d in deltas:
        c = nm.ema_update(c, d)
    expected = lam ** n * np.eye(3) + sum((1 - lam) * lam ** (n - 1 - t) * d for t, d in enumerate(deltas))
    assert np.max(np.abs(c.entries - expected)) <= 1e-10


def test_rows_stay_stochastic_after_many_updates():
    rng = np.random.default_rng(2)
    deltas = [random_stochastic(rng, 3) for _ in range(64)]
    c = nm.ConfusionMatrix.identity(3, 0.99)
    for t in range(100_000):
        c = nm.ema_update(c, deltas[t % 64])
    assert np.max(np.abs(c.entries.sum(axis=1) - 1)) <= 1e-9
    assert c.entries.min() >= 0


def test_ema_rejects_bad_lambda():
    c = nm.ConfusionMatrix.identity(2)
    with pytest.raises(ValueError):
        nm.ema_update(c, np.eye(2), lam=1.5)


def test_confusion_rejects_non_stochastic():
    with pytest.raises(ValueError):
        nm.ConfusionMatrix(np.array([[0.5, 0.6], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        nm.ConfusionMatrix(np.ones((2, 3)) / 3)


def test_estimate_delta_copies_unseen_rows():
    current = nm.ConfusionMatrix(np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.3, 0.3, 0.4]]))
    delta = nm.estimate_delta([0, 1, 1, 2], [0, 0, 0, 2], current)
    assert np.allclose(delta[0], [1 / 3, 2 / 3, 0])
    assert np.allclose(delta[1], current.entries[1])
    assert np.allclose(delta[2], [0, 0, 1])


def test_corruption_frequencies_within_three_sigma():
    row = np.array([0.7, 0.2, 0.1])
    m = np.array([row, [0, 1, 0], [0, 0, 1]])
    n = 10_000
    gen = torch.Generator().manual_seed(0)
    out = nm.corrupt_labels(torch.zeros(n, dtype=torch.long), m, gen).numpy()
    counts = np.bincount(out, minlength=3)
    sigma = np.sqrt(n * row * (1 - row))
    assert np.all(np.abs(counts - n * row) <= 3 * sigma)


def test_identity_corruption_is_a_no_op():
    gen = torch.Generator().manual_seed(0)
    y = torch.randint(0, 4, (1000,), generator=gen)
    assert torch.equal(nm.corrupt_labels(y, np.eye(4), gen), y)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_corruption_stays_in_alphabet(n, seed):
    rng = np.random.default_rng(seed)
    m = random_stochastic(rng, n)
    gen = torch.Generator().manual_seed(seed)
    y = torch.randint(0, n, (200,), generator=gen)
    out = nm.corrupt_labels(y, m, gen)
    assert out.min() >= 0 and out.max() < n


def test_pg_of_replay_generator_is_identity():
    means = np.array([[0.0, 0.0], [10.0, 0.0], [5.0, 8.66]])
    oracle = NearestMeanOracle(means)

    def replay(labels, gen):
        return means[labels.numpy()]

    pg = nm.estimate_pg(replay, oracle, 3, 100)
    assert np.array_equal(pg.entries, np.eye(3))
    assert pg.trace_mean == 1.0


def test_pg_of_permuting_generator():
    means = np.array([[0.0, 0.0], [10.0, 0.0], [5.0, 8.66]])
    oracle = NearestMeanOracle(means)
    perm = np.array([1, 0, 2])

    def swapped(labels, gen):
        return means[perm[labels.numpy()]]

    pg = nm.estimate_pg(swapped, oracle, 3, 100)
    assert np.array_equal(pg.entries, nm.permutation_matrix(perm))
    trace, dist = nm.permutation_diagnostics(pg)
    assert trace == pytest.approx(1 / 3)
    assert dist == 0.0
    assert nm.nearest_permutation(pg.entries)[0].tolist() == perm.tolist()


def test_pg_rectangular_for_fewer_generated_labels():
    means = np.array([[0.0, 0.0], [10.0, 0.0], [5.0, 8.66]])
    oracle = NearestMeanOracle(means)
    pg = nm.estimate_pg(lambda labels, gen: means[labels.numpy()], oracle, 2, 10)
    assert pg.entries.shape == (2, 3)
    assert pg.trace_mean == 1.0


def test_permutation_diagnostics_reference_cases():
    assert nm.permutation_diagnostics(np.eye(3)) == (1.0, 0.0)
    assert nm.permutation_diagnostics(np.full((2, 2), 0.5)) == (0.5, 0.5)


def test_nearest_permutation_limit():
    with pytest.raises(ValueError):
        nm.nearest_permutation(np.eye(11))


@pytest.mark.parametrize("kind", ["confusion", "transition"])
def test_matrix_serialization_round_trip(tmp_path, kind):
    rng = np.random.default_rng(3)
    m = random_stochastic(rng, 3)
    obj = nm.ConfusionMatrix(m, 0.95, 7) if kind == "confusion" else nm.TransitionMatrix(m, [10, 20, 30])
    nm.save_matrix(tmp_path / "m.txt", obj)
    back = nm.load_matrix(tmp_path / "m.txt")
    assert np.array_equal(back.entries, m)
    assert (tmp_path / "m.txt").read_text().startswith(f"# kind={kind},version=1,K=2")
    if kind == "confusion":
        assert (back.ema_lambda, back.update_count) == (0.95, 7)
    else:
        assert back.sample_count.tolist() == [10, 20, 30]
