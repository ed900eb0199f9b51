import math

import numpy as np
import pytest

from lsqdistill.losses import LossBreakdown, loss_att, loss_hidden, loss_kd, loss_total
from lsqdistill.model import ForwardTrace
from lsqdistill.tensor import ShapeError, Tensor, backward


def make_trace(hidden_arrays, score_arrays, logits):
    return ForwardTrace(
        hidden=[Tensor(h) for h in hidden_arrays],
        scores=[Tensor(s) for s in score_arrays],
        logits=Tensor(logits),
    )


def random_trace(rng, layers=2, batch=3, n=4, d=8, heads=2, classes=2, requires_grad=False):
    trace = ForwardTrace(
        hidden=[Tensor(rng.normal(size=(batch, n, d)), requires_grad=requires_grad)
                for _ in range(layers + 1)],
        scores=[Tensor(rng.normal(size=(batch, heads, n, n)), requires_grad=requires_grad)
                for _ in range(layers)],
        logits=Tensor(rng.normal(size=(batch, classes)), requires_grad=requires_grad),
    )
    return trace


class TestLossHidden:
    def test_identical_traces(self):
        rng = np.random.default_rng(0)
        t = random_trace(rng)
        assert loss_hidden(t, t).item() == 0.0

    def test_term_count(self):
        rng = np.random.default_rng(1)
        a, b = random_trace(rng, layers=2), random_trace(rng, layers=2)
        # unit offset per entry: each of the L+1 terms contributes exactly 1
        offset = ForwardTrace(
            hidden=[Tensor(h.data + 1.0) for h in a.hidden],
            scores=a.scores,
            logits=a.logits,
        )
        assert loss_hidden(offset, a).item() == pytest.approx(3.0)

    def test_unit_offset_single_entry(self):
        a = make_trace([np.zeros((2, 3))], [], np.zeros((2, 2)))
        b = make_trace([np.ones((2, 3))], [], np.zeros((2, 2)))
        assert loss_hidden(a, b).item() == 1.0

    def test_shape_mismatch(self):
        a = make_trace([np.zeros((2, 3))], [], np.zeros((2, 2)))
        b = make_trace([np.zeros((2, 4))], [], np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            loss_hidden(a, b)

    def test_length_mismatch(self):
        a = make_trace([np.zeros((2, 3))] * 2, [], np.zeros((2, 2)))
        b = make_trace([np.zeros((2, 3))] * 3, [], np.zeros((2, 2)))
        with pytest.raises(ValueError):
            loss_hidden(a, b)


class TestLossAtt:
    def test_identical(self):
        rng = np.random.default_rng(2)
        t = random_trace(rng)
        assert loss_att(t, t).item() == 0.0

    def test_term_count_is_layers(self):
        rng = np.random.default_rng(3)
        a = random_trace(rng, layers=2)
        offset = ForwardTrace(
            hidden=a.hidden,
            scores=[Tensor(s.data + 1.0) for s in a.scores],
            logits=a.logits,
        )
        assert loss_att(offset, a).item() == pytest.approx(2.0)

    def test_no_cross_layer_matching(self):
        rng = np.random.default_rng(4)
        student = random_trace(rng)
        teacher = random_trace(rng)
        swapped = ForwardTrace(hidden=student.hidden,
                               scores=[student.scores[1], student.scores[0]],
                               logits=student.logits)
        assert loss_att(student, teacher).item() != loss_att(swapped, teacher).item()


class TestLossKd:
    def test_identical_traces_leave_teacher_entropy(self):
        rng = np.random.default_rng(5)
        t = random_trace(rng)
        pre, trm, kd = loss_kd(t, t)
        assert trm.item() == 0.0
        probs = np.exp(t.logits.data - t.logits.data.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        entropy = float(-(probs * np.log(probs)).sum(axis=-1).mean())
        assert pre.item() == pytest.approx(entropy, rel=1e-12)
        assert kd.item() == pytest.approx(pre.item())

    def test_one_hot_teacher_degenerates_to_ce(self):
        from lsqdistill.tensor import cross_entropy
        rng = np.random.default_rng(6)
        student = random_trace(rng)
        labels = [1, 0, 1]
        hard_logits = np.full((3, 2), -1e4)
        hard_logits[np.arange(3), labels] = 1e4
        teacher = ForwardTrace(hidden=[Tensor(h.data) for h in student.hidden],
                               scores=[Tensor(s.data) for s in student.scores],
                               logits=Tensor(hard_logits))
        pre, _, _ = loss_kd(student, teacher)
        ce = cross_entropy(student.logits, labels).item()
        assert pre.item() == pytest.approx(ce, abs=1e-9)

    def test_additivity(self):
        rng = np.random.default_rng(7)
        a, b = random_trace(rng), random_trace(rng)
        pre, trm, kd = loss_kd(a, b)
        hidden = loss_hidden(a, b).item()
        att = loss_att(a, b).item()
        assert trm.item() == pytest.approx(hidden + att, abs=1e-9)
        assert kd.item() == pytest.approx(pre.item() + trm.item(), abs=1e-9)


class TestLossTotal:
    def test_mode_composition(self):
        rng = np.random.default_rng(8)
        a, b = random_trace(rng), random_trace(rng)
        labels = [0, 1, 0]
        _, kd_gt = loss_total(a, b, labels, "kd+gt")
        assert kd_gt.total == pytest.approx(kd_gt.kd + kd_gt.gt, abs=1e-9)
        _, gt_only = loss_total(a, b, labels, "gt-only")
        assert gt_only.total == pytest.approx(gt_only.gt, abs=1e-12)
        _, kd_only = loss_total(a, b, labels, "kd-only")
        assert kd_only.total == pytest.approx(kd_only.kd, abs=1e-12)

    def test_gt_only_uniform_logits(self):
        rng = np.random.default_rng(9)
        a, b = random_trace(rng), random_trace(rng)
        a.logits.data[:] = 0.0
        _, breakdown = loss_total(a, b, [0, 1, 1], "gt-only")
        assert breakdown.total == pytest.approx(math.log(2), abs=1e-12)

    def test_kd_only_ignores_labels(self):
        rng = np.random.default_rng(10)
        a, b = random_trace(rng), random_trace(rng)
        total1, _ = loss_total(a, b, [0, 1, 0], "kd-only")
        rng2 = np.random.default_rng(10)
        a2, b2 = random_trace(rng2), random_trace(rng2)
        total2, _ = loss_total(a2, b2, [1, 0, 1], "kd-only")
        assert total1.item() == total2.item()

    def test_invalid_mode(self):
        rng = np.random.default_rng(11)
        a, b = random_trace(rng), random_trace(rng)
        with pytest.raises(ValueError):
            loss_total(a, b, [0, 1, 0], "everything")

    def test_all_components_recorded_and_non_negative(self):
        rng = np.random.default_rng(12)
        a, b = random_trace(rng), random_trace(rng)
        for mode in ("gt-only", "kd-only", "kd+gt"):
            _, breakdown = loss_total(a, b, [0, 1, 0], mode)
            for value in breakdown.as_dict().values():
                assert value >= 0.0

    def test_gradients_reach_student_trace(self):
        rng = np.random.default_rng(13)
        student = random_trace(rng, requires_grad=True)
        teacher = random_trace(rng)
        total, _ = loss_total(student, teacher, [0, 1, 0], "kd+gt")
        backward(total)
        for tensor in student.hidden + student.scores + [student.logits]:
            assert tensor.grad is not None
            assert np.isfinite(tensor.grad).all()


class TestLossBreakdown:
    def test_round_trips_through_dict(self):
        breakdown = LossBreakdown(hidden=0.1, att=0.2, trm=0.3, pre=0.4, kd=0.7,
                                  gt=0.5, total=1.2)
        assert LossBreakdown.from_dict(breakdown.as_dict()) == breakdown
