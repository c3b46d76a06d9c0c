import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from openpixel import metrics as mx
from openpixel.dataset import IGNORE, UNKNOWN, ClassScheme, make_closed_scheme, make_loco_scheme
from oracles import brute_force_kappa

HAND = mx.ConfusionMatrix(np.array([[2, 1], [0, 1]]))

square = st.integers(2, 6).flatmap(
    lambda n: arrays(np.int64, (n, n), elements=st.integers(0, 50)).filter(lambda a: a.sum() > 0)
)


def test_hand_computed_scores():
    assert mx.overall_accuracy(HAND) == 0.75
    assert mx.normalized_accuracy(HAND) == pytest.approx(5 / 6)
    assert mx.cohen_kappa(HAND) == pytest.approx(0.5, abs=1e-15)


def test_diagonal_and_zero_diagonal():
    diag = mx.ConfusionMatrix(np.diag([3, 5, 1]))
    assert mx.overall_accuracy(diag) == 1.0 and mx.cohen_kappa(diag) == 1.0
    off = mx.ConfusionMatrix(np.array([[0, 4], [2, 0]]))
    assert mx.overall_accuracy(off) == 0.0


def test_na_one_class_wrong():
    cm = mx.ConfusionMatrix(np.array([[0, 5], [0, 5]]))
    assert mx.normalized_accuracy(cm) == 0.5


def test_balanced_na_equals_oa():
    cm = mx.ConfusionMatrix(np.array([[7, 3], [1, 9]]))
    assert mx.normalized_accuracy(cm) == pytest.approx(mx.overall_accuracy(cm))


def test_na_skips_absent_rows():
    cm = mx.ConfusionMatrix(np.array([[4, 0, 0], [0, 0, 0], [1, 0, 1]]))
    assert mx.normalized_accuracy(cm) == pytest.approx(0.75)
    assert mx.normalized_accuracy(cm, rows=[0]) == 1.0
    with pytest.raises(ValueError):
        mx.normalized_accuracy(cm, rows=[1])


def test_empty_matrix_refused():
    cm = mx.ConfusionMatrix.empty(4)
    for f in (mx.overall_accuracy, mx.normalized_accuracy, mx.cohen_kappa):
        with pytest.raises(ValueError):
            f(cm)


def test_single_class_kappa_undefined():
    with pytest.raises(ValueError):
        mx.cohen_kappa(mx.ConfusionMatrix(np.array([[4, 0], [0, 0]])))


def test_matrix_validation():
    with pytest.raises(ValueError):
        mx.ConfusionMatrix(np.zeros((2, 3), np.int64))
    with pytest.raises(ValueError):
        mx.ConfusionMatrix(np.array([[1, -1], [0, 0]]))
    with pytest.raises(ValueError):
        mx.ConfusionMatrix(np.array([[0.5, 0], [0, 1]]))


def test_accumulate_perfect_is_diagonal(rng):
    scheme = make_loco_scheme("car")
    truth = rng.integers(0, 5, (10, 10)).astype(np.uint8)
    pred = scheme.remap(truth)
    cm = mx.accumulate(pred, truth, scheme)
    assert cm.counts.shape == (5, 5)
    assert (cm.counts == np.diag(np.diag(cm.counts))).all() and cm.total == 100


def test_accumulate_drops_ignore():
    scheme = make_loco_scheme("car")
    truth = np.array([[IGNORE, IGNORE]], np.uint8)
    cm = mx.accumulate(np.array([[0, UNKNOWN]], np.uint8), truth, scheme)
    assert cm.total == 0
    with pytest.raises(ValueError):
        mx.overall_accuracy(cm)


def test_accumulate_places_unknown_last():
    scheme = make_loco_scheme("street")
    truth = np.array([[0, 1]], np.uint8)  # street (held out), building
    cm = mx.accumulate(np.array([[UNKNOWN, 0]], np.uint8), truth, scheme)
    expected = np.zeros((5, 5), np.int64)
    expected[4, 4] = 1
    expected[0, 0] = 1
    np.testing.assert_array_equal(cm.counts, expected)


def test_accumulate_rejects_out_of_scheme_prediction():
    scheme = make_loco_scheme("car")
    with pytest.raises(ValueError):
        mx.accumulate(np.array([[4]], np.uint8), np.array([[0]], np.uint8), scheme)
    with pytest.raises(ValueError):
        mx.accumulate(np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.uint8), scheme)


def test_tilewise_accumulation_is_additive(rng):
    scheme = make_loco_scheme("tree")
    truth = rng.integers(0, 5, (3, 8, 8)).astype(np.uint8)
    pred = rng.integers(0, 4, (3, 8, 8)).astype(np.uint8)
    pred[rng.random(pred.shape) < 0.3] = UNKNOWN
    whole = mx.accumulate(pred.reshape(-1, 8), truth.reshape(-1, 8), scheme)
    cm = None
    for p, t in zip(pred[::-1], truth[::-1]):
        cm = mx.accumulate(p, t, scheme, into=cm)
    np.testing.assert_array_equal(cm.counts, whole.counts)


def test_kappa_matches_brute_force_on_random_matrices(rng):
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        counts = rng.integers(0, 40, (n, n))
        counts[0, 1] += 1  # never single-class
        counts[1, 1] += 1
        worst = max(worst, abs(mx.cohen_kappa(mx.ConfusionMatrix(counts)) - brute_force_kappa(counts)))
    assert worst <= 1e-12


def test_independent_marginals_kappa_near_zero(rng):
    truth = rng.choice(4, 200_000, p=[0.1, 0.2, 0.3, 0.4])
    pred = rng.choice(4, 200_000, p=[0.4, 0.3, 0.2, 0.1])
    counts = np.zeros((4, 4), np.int64)
    np.add.at(counts, (truth, pred), 1)
    assert abs(mx.cohen_kappa(mx.ConfusionMatrix(counts))) < 0.05


@given(square)
@settings(max_examples=200)
def test_score_bounds(counts):
    cm = mx.ConfusionMatrix(counts)
    assert 0 <= mx.overall_accuracy(cm) <= 1
    assert 0 <= mx.normalized_accuracy(cm) <= 1
    try:
        k = mx.cohen_kappa(cm)
    except ValueError:
        return
    assert -1 - 1e-12 <= k <= 1 + 1e-12
    is_diag = not (counts - np.diag(np.diag(counts))).any()
    assert (abs(k - 1) < 1e-12) == is_diag


@given(square, st.randoms(use_true_random=False))
def test_relabeling_invariance(counts, rnd):
    perm = list(range(len(counts)))
    rnd.shuffle(perm)
    a = mx.ConfusionMatrix(counts)
    b = mx.ConfusionMatrix(counts[np.ix_(perm, perm)])
    assert mx.overall_accuracy(a) == pytest.approx(mx.overall_accuracy(b))
    assert mx.normalized_accuracy(a) == pytest.approx(mx.normalized_accuracy(b))
    try:
        assert mx.cohen_kappa(a) == pytest.approx(mx.cohen_kappa(b))
    except ValueError:
        pass


def test_confusion_csv_round_trip():
    labels = ["a", "b"]
    text = HAND.to_csv(labels)
    assert text.splitlines()[0] == "truth\\pred,a,b"
    np.testing.assert_array_equal(mx.ConfusionMatrix.from_csv(text).counts, HAND.counts)


def closed_baseline(scheme, rng, shape=(12, 12)):
    """Closed-set predictor: never emits UNKNOWN, perfect on known classes."""
    truth = rng.integers(0, len(scheme.classes), shape).astype(np.uint8)
    pred = scheme.remap(truth)
    held = pred == UNKNOWN
    pred[held] = rng.integers(0, scheme.n_known, int(held.sum()))
    return mx.accumulate(pred, truth, scheme)


def test_error_rates_closed_baseline_and_perfect(rng):
    classes = ("street", "building", "grass", "tree", "car")
    closed = [(make_loco_scheme(c), closed_baseline(make_loco_scheme(c), rng)) for c in classes]
    names, cols, table = mx.per_class_error_rates(closed)
    assert names == list(classes) and cols == list(classes)
    np.testing.assert_array_equal(np.diag(table), 1.0)
    off_diag = table[~np.eye(5, dtype=bool)]
    np.testing.assert_array_equal(off_diag, 0.0)

    perfect = []
    for c in classes:
        s = make_loco_scheme(c)
        truth = rng.integers(0, 5, (6, 6)).astype(np.uint8)
        perfect.append((s, mx.accumulate(s.remap(truth), truth, s)))
    assert not mx.per_class_error_rates(perfect)[2].any()


def test_error_rates_require_every_rotation(rng):
    s = make_loco_scheme("car")
    with pytest.raises(ValueError, match="missing"):
        mx.per_class_error_rates([(s, closed_baseline(s, rng))])
    with pytest.raises(ValueError):
        mx.per_class_error_rates([])
    closed = make_closed_scheme()
    with pytest.raises(ValueError):
        mx.per_class_error_rates([(closed, mx.ConfusionMatrix.empty(5))])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_error_rates_bounded(seed):
    rng = np.random.default_rng(seed)
    scheme = ClassScheme(("a", "b", "c"), "c")
    truth = rng.integers(0, 3, (5, 5)).astype(np.uint8)
    pred = rng.integers(0, 2, (5, 5)).astype(np.uint8)
    pred[rng.random((5, 5)) < 0.3] = UNKNOWN
    table = mx.per_class_error_rates([(scheme, mx.accumulate(pred, truth, scheme))], ["c"])[2]
    vals = table[~np.isnan(table)]
    assert ((vals >= 0) & (vals <= 1)).all()


def test_metrics_row_format():
    row = mx.metrics_row("morph_openpixel", "car", "open_morph", 0.7, HAND)
    assert row == ["morph_openpixel", "car", "open_morph", "0.7000", "0.750000", "0.833333", "0.500000"]
    assert mx.metrics_csv([row]).splitlines()[0] == ",".join(mx.METRICS_HEADER)
