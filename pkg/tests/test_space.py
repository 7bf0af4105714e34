import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from probshift.autodiff import Parameter, backward, softmax
from probshift.errors import BudgetExceededError, ContractError
from probshift.space import (CandidateSet, ResourceBinning, SearchSpace, bin_pmf, build_policy, clean_step,
                             irwin_hall_reference, map_policy, policy_from_choices, rejection_sample,
                             subnet_resource, toy_space, uniform_choices, uniform_resources, uniform_sample)


def test_map_policy_examples():
    op = CandidateSet((1, 2, 3), 1.0)
    assert np.array_equal(map_policy(np.array([0.0, 1.0, 0.0]), op.mask_table).data, [1, 1, 0])
    assert np.array_equal(map_policy(np.array([1.0, 0.0, 0.0]), op.mask_table).data, [1, 0, 0])
    assert np.array_equal(map_policy(np.array([0.0, 0.0, 1.0]), op.mask_table).data, [1, 1, 1])


def test_map_policy_strict_rejects_soft():
    op = CandidateSet((1, 2, 3), 1.0)
    with pytest.raises(ContractError):
        map_policy(np.array([0.5, 0.5, 0.0]), op.mask_table)
    soft = map_policy(np.array([0.5, 0.5, 0.0]), op.mask_table, strict=False)
    assert np.allclose(soft.data, [1.0, 0.5, 0.0])


def test_map_policy_gradient_is_mask_table_transpose():
    op = CandidateSet((2, 3, 5), 1.0)
    p = Parameter(np.array([0.0, 1.0, 0.0]), "p")
    w = np.arange(5.0)
    backward((map_policy(p, op.mask_table) * w).sum())
    assert np.array_equal(p.grad, op.mask_table.T @ w)


def test_masks_nested_and_low_index():
    for op in toy_space(depth=3, candidates=(2, 5, 7, 11)).ops:
        for i in range(op.n):
            m = op.mask(i)
            assert m.sum() == op.candidates[i]
            assert np.all(m[: op.candidates[i]] == 1)
            if i + 1 < op.n:
                assert np.array_equal(m * op.mask(i + 1), m)


@pytest.mark.parametrize("cands", [(3,), (4, 4), (5, 3), (0, 2)])
def test_candidate_validation(cands):
    with pytest.raises(ContractError):
        CandidateSet(cands, 1.0)


def test_skippable_rules():
    base = CandidateSet((4, 8), 1.0)
    skip = CandidateSet((0, 8), 1.0, skippable=True)
    SearchSpace((base, skip))
    with pytest.raises(ContractError):
        SearchSpace((skip, base))
    with pytest.raises(ContractError):
        SearchSpace((CandidateSet((4, 6), 1.0), skip))
    with pytest.raises(ContractError):
        CandidateSet((2, 8), 1.0, skippable=True)


def test_subnet_resource_examples():
    space = toy_space()
    assert policy_from_choices(space, (0,) * 6).resource.item() == 6 * 8
    assert policy_from_choices(space, (2,) * 6).resource.item() == 6 * 24
    assert policy_from_choices(space, (0, 1, 2, 0, 1, 2)).resource.item() == 96


def test_subnet_resource_exact_for_every_onehot():
    space = toy_space(depth=4, candidates=(1, 3, 4))
    for choices in itertools.product(range(3), repeat=4):
        policy = policy_from_choices(space, choices)
        assert policy.resource.item() == sum(space.widths(choices))
        assert subnet_resource(policy, space).item() == policy.resource.item()


def test_soft_policy_resource_is_differentiable():
    space = toy_space(depth=2)
    logits = [Parameter(np.array([0.1, 0.2, -0.3]), f"l{d}") for d in range(2)]
    policy = build_policy(space, [softmax(z) for z in logits], strict=False)
    backward(policy.resource)
    assert all(np.linalg.norm(z.grad) > 0 for z in logits)


def test_uniform_sample_single_op_frequencies():
    space = toy_space(depth=1)
    rng = np.random.default_rng(0)
    counts = np.bincount([uniform_choices(space, rng)[0] for _ in range(100_000)], minlength=3)
    assert np.all(np.abs(counts / counts.sum() - 1 / 3) < 0.02)
    assert stats.chisquare(counts).pvalue > 0.01


def test_uniform_sample_is_valid_policy():
    policy = uniform_sample(toy_space(), np.random.default_rng(0))
    assert policy.is_hard and len(policy.masks) == 6


def test_uniform_resource_mean_linearity():
    space = SearchSpace((CandidateSet((2, 4, 9), 1.0), CandidateSet((1, 5), 2.0), CandidateSet((3, 4, 5, 6), 0.5)))
    mean = uniform_resources(space, 100_000, np.random.default_rng(1)).mean()
    expected = sum(op.candidate_costs.mean() for op in space.ops)
    assert abs(mean - expected) / expected < 0.01


def test_depth_one_is_uniform_over_costs():
    pmf = irwin_hall_reference(toy_space(depth=1))
    assert np.array_equal(pmf.values, [8, 16, 24])
    assert np.allclose(pmf.probs, 1 / 3)


def test_irwin_hall_two_coins():
    space = toy_space(depth=2, candidates=(1, 2))
    assert irwin_hall_reference(space).as_dict() == {2.0: 0.25, 3.0: 0.5, 4.0: 0.25}


def test_irwin_hall_matches_enumeration():
    space = SearchSpace((CandidateSet((1, 3), 1.0), CandidateSet((2, 3, 7), 1.0), CandidateSet((1, 2, 4), 0.5)))
    counts = {}
    for choices in itertools.product(*(range(op.n) for op in space.ops)):
        r = round(space.resource_of(choices), 9)
        counts[r] = counts.get(r, 0) + 1
    exact = irwin_hall_reference(space).as_dict()
    assert exact.keys() == counts.keys()
    for r, c in counts.items():
        assert exact[r] == pytest.approx(c / space.size, abs=1e-15)


def test_irwin_hall_budget():
    with pytest.raises(BudgetExceededError, match="Monte-Carlo"):
        irwin_hall_reference(toy_space(depth=16))
    assert irwin_hall_reference(toy_space(depth=16), budget=None).probs.sum() == pytest.approx(1.0)


def test_binning_geometry():
    b = ResourceBinning(48, 144, 14)
    assert b.k == 8
    assert np.allclose(np.diff(b.centers), b.spacing)
    assert b.centers[0] == 48 and b.centers[-1] == 144
    assert toy_space().default_binning() == b
    assert clean_step(96 / 7) == 14


def test_bin_edge_goes_to_lower_bin():
    b = ResourceBinning(0, 10, 1)
    assert b.bin_of(0.5) == 0
    assert b.bin_of(0.5000001) == 1
    assert b.bin_of(9.5) == 9
    assert b.bin_of(-3) == 0 and b.bin_of(30) == 10


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 100), st.floats(1, 100), st.floats(0.5, 20), st.floats(0, 1))
def test_bin_of_is_nearest_center(lo, width, step, frac):
    b = ResourceBinning(lo, lo + width, step)
    r = lo + frac * width
    k = b.bin_of(r)
    assert abs(b.centers[k] - r) <= b.spacing / 2 + 1e-9


def test_bin_pmf_sums_to_one():
    space = toy_space()
    assert bin_pmf(irwin_hall_reference(space), space.default_binning()).sum() == pytest.approx(1.0)


def test_rejection_modal_bin_tries():
    space = toy_space()
    b = space.default_binning()
    probs = bin_pmf(irwin_hall_reference(space), b)
    k = int(np.argmax(probs))
    rng = np.random.default_rng(3)
    results = [rejection_sample(space, b, k, rng) for _ in range(2000)]
    assert all(r.policy is not None and b.bin_of(r.policy.resource.item()) == k for r in results)
    assert np.mean([r.tries for r in results]) == pytest.approx(1 / probs[k], rel=0.1)


def test_rejection_empty_bin_times_out():
    space = toy_space(depth=1)
    b = ResourceBinning(8, 24, 2)
    res = rejection_sample(space, b, 1, np.random.default_rng(0), max_tries=500)
    assert res.timed_out and res.tries == 500


def test_rejection_tail_bin_is_slow():
    space = toy_space(depth=10)
    b = space.default_binning()
    probs = bin_pmf(irwin_hall_reference(space), b)
    assert probs[0] < 1e-3
    rng = np.random.default_rng(4)
    tries = [rejection_sample(space, b, 0, rng).tries for _ in range(100)]
    assert np.mean(tries) > 1000


def test_rejection_bad_bin():
    with pytest.raises(ContractError):
        rejection_sample(toy_space(), toy_space().default_binning(), 99, np.random.default_rng(0))
