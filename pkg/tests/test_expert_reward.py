import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from restlab import expert_reward as er
from restlab.segnet import predict_batch

RECIPE32 = er.NegativeRecipe.for_size(32)


def test_one_positive_per_labeled_pair(trained_seg, small_split, demonstrations):
    train, _ = small_split.fold_pairs(0)
    pos, _ = demonstrations
    assert len(pos) == len(train)
    states = predict_batch(trained_seg.model, [s for s, _ in train])
    assert all(d.state.tobytes() == s.tobytes() for d, s in zip(pos, states))
    assert all(d.polarity == 1 and np.array_equal(d.label, m.pixels) for d, (_, m) in zip(pos, train))
    again = er.build_demonstrations(trained_seg.model, train)
    assert all(a.state.tobytes() == b.state.tobytes() for a, b in zip(pos, again))


def test_negative_cardinality_and_difference(demonstrations):
    pos, neg = demonstrations
    assert len(neg) == 2 * len(pos)
    by_src = {d.source_id: d for d in pos}
    for d in neg:
        src = by_src[d.source_id].label > 0
        union = np.count_nonzero(src | (d.label > 0))
        assert np.count_nonzero(src != (d.label > 0)) >= 0.05 * union > 0
        assert d.polarity == -1


def test_negatives_are_deterministic(demonstrations):
    pos, neg = demonstrations
    again = er.synthesize_negatives(pos, 0, RECIPE32)
    assert [d.label.tobytes() for d in again] == [d.label.tobytes() for d in neg]
    other = er.synthesize_negatives(pos, 1, RECIPE32)
    assert [d.label.tobytes() for d in other] != [d.label.tobytes() for d in neg]


def test_recipe_guards():
    with pytest.raises(ValueError):
        er.NegativeRecipe(shift=(0, 24))
    with pytest.raises(ValueError):
        er.NegativeRecipe(enabled=())
    with pytest.raises(ValueError):
        er.NegativeRecipe(enabled=("blur",))
    with pytest.raises(ValueError):
        er.synthesize_negatives([], 0)


@pytest.mark.parametrize("recipe", er.RECIPES)
def test_each_recipe_alone(demonstrations, recipe):
    pos, _ = demonstrations
    neg = er.synthesize_negatives(pos, 3, er.NegativeRecipe.for_size(32, enabled=(recipe,)))
    assert len(neg) == 2 * len(pos)
    with_fg = {d.source_id for d in pos if d.label.any()}
    for d in neg:
        # only a random blob can contradict an empty expert label
        assert d.recipe == (recipe if d.source_id in with_fg else "random")


def toy_demonstrations(n=24, seed=0):
    """Positives pair a state with an empty label, negatives add a bright 8 x 8 patch."""
    rng = np.random.default_rng(seed)
    pos, neg = [], []
    for i in range(n):
        state = rng.uniform(0.05, 0.3, (16, 16)).astype(np.float32)
        empty = np.zeros((16, 16), np.uint8)
        patch = empty.copy()
        y, x = rng.integers(0, 8, 2)
        patch[y:y + 8, x:x + 8] = 1
        pos.append(er.Demonstration(state, empty, +1, i))
        neg.append(er.Demonstration(state, patch, -1, i, "random"))
    return pos, neg


def test_separable_toy_reaches_full_accuracy():
    pos, neg = toy_demonstrations()
    model = er.train_expert_reward(pos, neg, er.IRLHyper(seed=0, epochs=40))
    assert model.heldout_accuracy == 1.0


def test_identical_classes_abort():
    pos, _ = toy_demonstrations(12)
    neg = [er.Demonstration(d.state, d.label, -1, d.source_id) for d in pos]
    with pytest.raises(er.UnusableRewardModel):
        er.train_expert_reward(pos, neg, er.IRLHyper(seed=0, epochs=6, restarts=1))


def test_missing_class_is_refused():
    pos, _ = toy_demonstrations(4)
    with pytest.raises(ValueError):
        er.train_expert_reward(pos, [])


def test_trained_model_is_frozen_and_pure(expert, demonstrations):
    pos, _ = demonstrations
    assert expert.frozen and all(not p.requires_grad for p in expert.parameters())
    digest = expert.digest()
    a = er.score(expert, pos[0].state, pos[0].label)
    b = er.score(expert, pos[0].state, pos[0].label)
    assert a == b and a[0] == int(a[1] >= expert.threshold)
    assert expert.digest() == digest
    assert expert.heldout_accuracy >= 0.75


def test_score_shape_mismatch(expert):
    from restlab.numcore import ShapeError
    with pytest.raises(ShapeError):
        er.score(expert, np.zeros((32, 32)), np.zeros((16, 16)))


def test_held_out_expert_pairs_accepted_and_empty_labels_rejected(expert, demonstrations):
    pos, neg = demonstrations
    _, _, ho = er.split_holdout(pos, neg, er.IRLHyper(seed=0))
    experts = [d for d in ho if d.polarity > 0]
    accept = er.batch_scores(expert, [(d.state, d.label) for d in experts])
    empty = er.batch_scores(expert, [(d.state, np.zeros_like(d.label)) for d in experts if d.label.any()])
    assert accept.mean() >= 0.9
    assert 1 - empty.mean() >= 0.9


def test_batch_reward_arithmetic(expert, demonstrations):
    pos, neg = demonstrations
    pairs = [(d.state, d.label) for d in pos + neg]
    scores = er.batch_scores(expert, pairs)
    ones = [p for p, s in zip(pairs, scores) if s == 1]
    zeros = [p for p, s in zip(pairs, scores) if s == 0]
    assert ones and zeros
    assert er.batch_reward(expert, ones[:4]) == 1.0
    if len(ones) >= 3:
        assert er.batch_reward(expert, ones[:3] + zeros[:1]) == 0.75
    with pytest.raises(ValueError):
        er.batch_reward(expert, [])


@settings(max_examples=20, deadline=None)
@given(st.randoms(use_true_random=False))
def test_batch_reward_is_permutation_invariant_and_monotone(expert, demonstrations, rnd):
    pos, neg = demonstrations
    pairs = [(d.state, d.label) for d in pos[:6] + neg[:6]]
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    r = er.batch_reward(expert, pairs)
    assert r == er.batch_reward(expert, shuffled) and 0 <= r <= 1
    scores = er.batch_scores(expert, pairs)
    one = next((p for p, s in zip(pairs, scores) if s == 1), None)
    zero = next((i for i, s in enumerate(scores) if s == 0), None)
    if one is not None and zero is not None:
        swapped = pairs[:zero] + [one] + pairs[zero + 1:]
        assert er.batch_reward(expert, swapped) >= r


def test_equal_error_threshold_separates_clean_scores():
    t = er.equal_error_threshold(np.array([1.0, 2.0, 3.0]), np.array([-3.0, -1.0]))
    assert -1.0 < t < 1.0


def test_demonstration_manifest_lists_recipes(demonstrations):
    pos, neg = demonstrations
    lines = er.DemonstrationSet(pos, neg).manifest_lines()
    assert len(lines) == 1 + len(pos) + len(neg)
    assert lines[-1].split()[1] == "-1" and lines[-1].split()[2] in er.RECIPES
