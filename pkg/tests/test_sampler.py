import numpy as np
import pytest
from scipy import stats

from probshift.errors import ContractError
from probshift.generator import ArchitectureGenerator
from probshift.sampler import (PinnedDistribution, SamplingDistribution, UpdateContext, distribution_update,
                               finite_difference_update, pin_distribution)
from probshift.space import ResourceBinning, toy_space
from probshift.supernet import Supernet


def test_uniform_logits_give_uniform_bins():
    dist = SamplingDistribution(ResourceBinning(48, 144, 14))
    assert dist.binning.k == 8
    rng = np.random.default_rng(0)
    counts = np.bincount([dist.sample_bin(rng).index for _ in range(20_000)], minlength=8)
    assert np.all(np.abs(counts / 20_000 - 1 / 8) < 0.02)
    assert stats.chisquare(counts).pvalue > 0.01


def test_dominant_logit_nearly_always_chosen():
    dist = SamplingDistribution(ResourceBinning(48, 144, 14))
    dist.logits.data[3] = 20.0
    rng = np.random.default_rng(1)
    assert sum(dist.sample_bin(rng).index == 3 for _ in range(2000)) >= 1998


def test_sampled_target_is_a_center():
    dist = SamplingDistribution(ResourceBinning(48, 144, 14))
    dist.logits.data = np.random.default_rng(2).normal(size=8)
    rng = np.random.default_rng(3)
    for _ in range(200):
        s = dist.sample_bin(rng)
        assert s.target.item() == pytest.approx(s.center, abs=1e-12)
        assert s.center == dist.binning.centers[s.index]
        assert s.onehot.data.sum() == 1.0


def test_bad_temperature():
    with pytest.raises(ContractError):
        SamplingDistribution(ResourceBinning(0, 1, 1), tau=0.0)


def _linear_loss(table):
    return lambda phase, sample: (sample.onehot * table[phase]).sum()


def test_identical_losses_give_zero_gradient_and_no_move():
    dist = SamplingDistribution(ResourceBinning(0, 7, 1))
    table = {"prev": np.linspace(0, 1, 8), "curr": np.linspace(0, 1, 8)}
    res = finite_difference_update(dist, _linear_loss(table), np.random.default_rng(0).gumbel(size=8))
    assert np.array_equal(res.grad, np.zeros(8))
    assert np.array_equal(dist.logits.data, np.zeros(8))
    assert dist.t == 1


@pytest.mark.parametrize("seed", range(5))
def test_improving_bin_gains_probability(seed):
    dist = SamplingDistribution(ResourceBinning(0, 1, 1), lr=0.1)
    table = {"prev": np.array([1.0, 1.0]), "curr": np.array([1.0, 0.0])}
    before = dist.probabilities[1]
    res = finite_difference_update(dist, _linear_loss(table), np.random.default_rng(seed).gumbel(size=2))
    assert res.grad[1] > 0 > res.grad[0]
    assert dist.probabilities[1] > before


def test_both_passes_see_same_bin():
    dist = SamplingDistribution(ResourceBinning(0, 7, 1))
    seen = []

    def loss(phase, sample):
        seen.append(sample.index)
        return (sample.onehot * np.arange(8.0)).sum()

    finite_difference_update(dist, loss, np.random.default_rng(4).gumbel(size=8))
    assert len(seen) == 2 and seen[0] == seen[1]


def test_pinned_distribution():
    dist = SamplingDistribution(ResourceBinning(0, 7, 1))
    pinned = pin_distribution(dist)
    assert isinstance(pinned, PinnedDistribution)
    table = {"prev": np.ones(8), "curr": np.zeros(8)}
    with pytest.raises(ContractError):
        finite_difference_update(pinned, _linear_loss(table), np.zeros(8))
    with pytest.raises(ContractError):
        pinned.logits
    rng = np.random.default_rng(5)
    for _ in range(20):
        pinned.sample_bin(rng)
    assert np.array_equal(dist.logits.data, np.zeros(8))
    assert pinned.unpin() is dist


def _setup(seed=0):
    space = toy_space(depth=3)
    binning = space.default_binning()
    rng = np.random.default_rng(seed)
    net = Supernet(space, 4, 3, rng)
    gen = ArchitectureGenerator(space, binning, rng)
    dist = SamplingDistribution(binning, lr=0.05)
    data = rng.normal(size=(32, 4)), rng.integers(0, 3, size=32)
    return net, gen, dist, data


def test_identical_snapshots_zero_update():
    net, gen, dist, batch = _setup()
    snap = net.snapshot()
    ctx = UpdateContext.draw(snap, snap, batch, dist, gen, np.random.default_rng(1))
    res = distribution_update(dist, ctx, net, gen)
    assert np.array_equal(res.grad, np.zeros(dist.binning.k))
    assert res.loss_prev == res.loss_curr
    assert np.array_equal(dist.logits.data, np.zeros(dist.binning.k))


def test_update_leaves_current_weights_and_clean_grads():
    net, gen, dist, batch = _setup()
    prev = net.snapshot()
    for p in net.parameters():
        p.data = p.data + 0.01
    curr = net.snapshot()
    ctx = UpdateContext.draw(prev, curr, batch, dist, gen, np.random.default_rng(2))
    distribution_update(dist, ctx, net, gen)
    assert net.snapshot() == curr
    assert all(p.grad is None or not np.any(p.grad) for p in net.parameters() + gen.parameters())


def test_update_needs_both_snapshots():
    net, gen, dist, batch = _setup()
    ctx = UpdateContext.draw(None, net.snapshot(), batch, dist, gen, np.random.default_rng(0))
    with pytest.raises(ContractError):
        distribution_update(dist, ctx, net, gen)


def test_update_is_deterministic():
    results = []
    for _ in range(2):
        net, gen, dist, batch = _setup(7)
        prev = net.snapshot()
        for p in net.parameters():
            p.data = p.data * 1.05
        ctx = UpdateContext.draw(prev, net.snapshot(), batch, dist, gen, np.random.default_rng(3))
        res = distribution_update(dist, ctx, net, gen)
        results.append((res.grad.copy(), dist.logits.data.copy()))
    assert np.array_equal(results[0][0], results[1][0])
    assert np.array_equal(results[0][1], results[1][1])


def test_state_roundtrip():
    dist = SamplingDistribution(ResourceBinning(0, 7, 1), lr=0.1)
    table = {"prev": np.arange(8.0), "curr": np.zeros(8)}
    finite_difference_update(dist, _linear_loss(table), np.random.default_rng(0).gumbel(size=8))
    other = SamplingDistribution(ResourceBinning(0, 7, 1), lr=0.1)
    other.load_state_dict(dist.state_dict())
    assert np.array_equal(other.logits.data, dist.logits.data) and other.t == 1
    noise = np.random.default_rng(1).gumbel(size=8)
    finite_difference_update(dist, _linear_loss(table), noise)
    finite_difference_update(other, _linear_loss(table), noise)
    assert np.array_equal(other.logits.data, dist.logits.data)
