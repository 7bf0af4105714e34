import numpy as np
import pytest
from scipy import stats

from probshift.autodiff import Adam, Parameter, Value, backward
from probshift.errors import ContractError
from probshift.generator import ArchitectureGenerator, extract_argmax, gumbel_softmax, joint_loss, rc_loss
from probshift.space import CandidateSet, SearchSpace, policy_from_choices, toy_space
from probshift.supernet import Supernet

from gradcheck import check, soft_path_cases


def make_gen(seed=0, space=None):
    space = space or toy_space()
    return ArchitectureGenerator(space, space.default_binning(), np.random.default_rng(seed))


def test_gumbel_equal_logits_uniform():
    rng = np.random.default_rng(0)
    noise = rng.gumbel(size=(100_000, 3))
    counts = np.bincount(np.argmax(noise, axis=1), minlength=3)
    # same argmax rule as gumbel_softmax, vectorised for speed
    assert np.all(np.abs(counts / 1e5 - 1 / 3) < 0.02)
    assert stats.chisquare(counts).pvalue > 0.01
    idx = [int(np.argmax(gumbel_softmax(np.zeros(3), noise=z).data)) for z in noise[:2000]]
    assert idx == np.argmax(noise[:2000], axis=1).tolist()


def test_gumbel_dominant_logit():
    rng = np.random.default_rng(1)
    hits = sum(gumbel_softmax(np.array([20.0, -20.0, -20.0]), rng=rng).data[0] == 1.0 for _ in range(10_000))
    assert hits >= 9990


def test_gumbel_hard_is_onehot_with_soft_gradient():
    rng = np.random.default_rng(2)
    w = rng.normal(size=4)
    for _ in range(20):
        z = rng.normal(size=4)
        noise = rng.gumbel(size=4)
        a = Parameter(z, "a")
        hard = gumbel_softmax(a, 0.7, hard=True, noise=noise)
        assert hard.data.sum() == 1.0 and np.count_nonzero(hard.data) == 1
        backward((hard * w).sum())
        b = Parameter(z, "b")
        backward((gumbel_softmax(b, 0.7, hard=False, noise=noise) * w).sum())
        assert np.array_equal(a.grad, b.grad)


def test_gumbel_bad_temperature():
    with pytest.raises(ContractError):
        gumbel_softmax(np.zeros(3), tau=0.0, noise=np.zeros(3))


def test_rc_loss_examples():
    space = SearchSpace((CandidateSet((1, 2, 3), [1.0, 1.0, 1.0]),))
    policy = policy_from_choices(space, (1,))
    assert np.array_equal(policy.masks[0].data, [1, 1, 0])
    assert rc_loss(policy, 3.0).item() == 1.0
    assert rc_loss(policy, 2.0).item() == 0.0
    b = space.default_binning()
    assert rc_loss(policy, 2.0, b).item() == 0.0
    assert rc_loss(policy, 3.0, b).item() == pytest.approx(0.25)


@pytest.mark.parametrize("name", ["rc_loss_soft", "rc_loss_gumbel_soft", "gumbel_softmax_soft"])
def test_soft_paths_gradcheck(name):
    rng = np.random.default_rng(3)
    for _ in range(10):
        fn, inputs = soft_path_cases(rng)[name]
        assert check(fn, inputs) < 1e-4


def test_joint_loss():
    task, rc = Value(0.5), Value(0.25)
    assert joint_loss(task, rc, 0.0).item() == 0.5
    assert joint_loss(task, rc, 2.0).item() == 1.0
    values = [joint_loss(task, rc, lam).item() for lam in (0.0, 0.1, 1.0, 10.0)]
    assert values == sorted(values)


def test_untrained_generator_output_is_valid():
    gen = make_gen()
    policy = gen.generate(100.0, np.random.default_rng(0))
    assert policy.is_hard and len(policy.onehots) == 6
    for mask, op, p in zip(policy.masks, gen.space.ops, policy.onehots):
        assert np.array_equal(mask.data, op.mask_table @ p.data)
    assert policy.resource.item() == gen.space.resource_of(policy.choices)


def test_generate_deterministic_given_rng():
    gen = make_gen()
    a = gen.generate(90.0, np.random.default_rng(5)).choices
    b = gen.generate(90.0, np.random.default_rng(5)).choices
    assert a == b


def test_generate_target_out_of_range():
    gen = make_gen()
    with pytest.raises(ContractError):
        gen.generate(10.0, np.random.default_rng(0))
    with pytest.raises(ContractError):
        extract_argmax(gen, 200.0)


def test_extract_argmax_deterministic_and_matches_probabilities():
    gen = make_gen(3)
    a, b = extract_argmax(gen, 75.0), extract_argmax(gen, 75.0)
    assert a.choices == b.choices and a.is_hard
    assert a.choices == tuple(int(np.argmax(p)) for p in gen.probabilities(75.0))


def test_target_reaches_lstm_and_embedding():
    gen = make_gen()
    net = Supernet(gen.space, 4, 3, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(8, 4)), rng.integers(0, 3, size=8)
    policy = gen.generate(100.0, rng)
    backward(joint_loss(net.task_loss(x, y, policy), rc_loss(policy, 100.0, gen.binning), 0.1))
    for p in (gen.w_input, gen.w_hidden, gen.heads[0][0], gen.embed_weight):
        assert p.grad is not None and np.linalg.norm(p.grad) > 0


def test_target_gradient_flows_back():
    gen = make_gen()
    c = Parameter(np.array(100.0), "c")
    policy = gen.generate(c, np.random.default_rng(2))
    backward(rc_loss(policy, 96.0, gen.binning) + policy.resource * 0.0)
    assert c.grad is not None


def test_generator_learns_to_hit_targets():
    space = toy_space(depth=3)
    gen = ArchitectureGenerator(space, space.default_binning(), np.random.default_rng(0))
    opt = Adam(gen.parameters(), 0.01)
    rng = np.random.default_rng(1)
    centers = gen.binning.centers
    for _ in range(1500):
        target = float(rng.choice(centers))
        opt.zero_grad()
        backward(rc_loss(gen.generate(target, rng), target, gen.binning))
        opt.step()
    # resources live on a lattice of 8, so the best reachable error is below one spacing
    errors = [abs(extract_argmax(gen, c).resource.item() - c) for c in centers]
    assert max(errors) <= gen.binning.spacing + 1e-9
