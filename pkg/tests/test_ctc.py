import itertools
import math

import numpy as np
import pytest

from helpers import fd_grad, rel_err
from repfuse.ctc import (
    CtcHead,
    ctc_grad,
    ctc_loss,
    ctc_loss_grad,
    greedy_decode,
    log_softmax_rows,
    min_frames,
)
from repfuse.errors import DomainError
from repfuse.store import BLANK, Vocab

VOCAB_AB = Vocab((BLANK, "a", "b"))


def brute_force_prob(log_probs, target):
    """Sum path probabilities over every labeling that collapses to target."""
    t_len, v = log_probs.shape
    target = list(target)
    total = 0.0
    for path in itertools.product(range(v), repeat=t_len):
        collapsed, prev = [], -1
        for sym in path:
            if sym != prev and sym != 0:
                collapsed.append(sym)
            prev = sym
        if collapsed == target:
            total += math.exp(sum(log_probs[t, s] for t, s in enumerate(path)))
    return total


def random_instance(rng, t_max=8, v_max=4, target_max=3):
    t = int(rng.integers(1, t_max + 1))
    v = int(rng.integers(2, v_max + 1))
    length = int(rng.integers(0, target_max + 1))
    target = [int(rng.integers(1, v)) for _ in range(length)]
    log_probs = log_softmax_rows(rng.normal(0, 1, (t, v)))
    return log_probs, target


class TestLoss:
    def test_single_frame_uniform(self):
        lp = np.log(np.full((1, 2), 0.5))
        assert ctc_loss(lp, [1]) == pytest.approx(-math.log(0.5))

    def test_two_frame_alignment_sum(self):
        # target "a" in two frames: aa, a-, -a
        lp = log_softmax_rows(np.random.default_rng(0).normal(0, 1, (2, 3)))
        p = np.exp(lp)
        expected = p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1]
        assert ctc_loss(lp, [1]) == pytest.approx(-math.log(expected), rel=1e-12)

    def test_empty_target_is_all_blank_path(self):
        lp = log_softmax_rows(np.random.default_rng(1).normal(0, 1, (4, 3)))
        assert ctc_loss(lp, []) == pytest.approx(-lp[:, 0].sum(), rel=1e-12)

    def test_infeasible_target_returns_inf(self):
        lp = np.log(np.full((1, 3), 1.0 / 3.0))
        assert math.isinf(ctc_loss(lp, [1, 2]))
        # repeated symbol needs a separating blank frame
        lp2 = np.log(np.full((2, 3), 1.0 / 3.0))
        assert math.isinf(ctc_loss(lp2, [1, 1]))
        assert min_frames([1, 1]) == 3

    def test_matches_brute_force_enumeration(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            lp, target = random_instance(rng)
            loss = ctc_loss(lp, target)
            assert loss >= 0.0 or math.isinf(loss)
            total = brute_force_prob(lp, target)
            if total == 0.0:
                assert math.isinf(loss)
            else:
                assert math.exp(-loss) == pytest.approx(total, rel=1e-6)

    def test_unnormalized_rows_rejected(self):
        with pytest.raises(DomainError):
            ctc_loss(np.zeros((2, 3)), [1])

    def test_bad_target_id_rejected(self):
        lp = np.log(np.full((2, 3), 1.0 / 3.0))
        with pytest.raises(DomainError):
            ctc_loss(lp, [0])
        with pytest.raises(DomainError):
            ctc_loss(lp, [3])


class TestGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            t = int(rng.integers(1, 7))
            v = int(rng.integers(2, 6))
            length = int(rng.integers(0, 4))
            target = [int(rng.integers(1, v)) for _ in range(length)]
            logits = rng.normal(0, 1, (t, v))
            if t < min_frames(target):
                continue
            analytic = ctc_grad(log_softmax_rows(logits), target)
            fd = fd_grad(lambda: ctc_loss(log_softmax_rows(logits), target), logits, h=1e-5)
            assert rel_err(analytic, fd) < 1e-3

    def test_rows_sum_to_zero(self):
        rng = np.random.default_rng(4)
        lp = log_softmax_rows(rng.normal(0, 1, (6, 4)))
        g = ctc_grad(lp, [1, 3, 2])
        assert np.abs(g.sum(axis=1)).max() < 1e-5

    def test_single_frame_hand_derivative(self):
        # loss = -log p(a); d/dlogit_blank = p(blank), d/dlogit_a = p(a) - 1
        lp = log_softmax_rows(np.array([[0.3, -0.2]]))
        p = np.exp(lp)
        g = ctc_grad(lp, [1])
        assert g[0, 0] == pytest.approx(p[0, 0], rel=1e-12)
        assert g[0, 1] == pytest.approx(p[0, 1] - 1.0, rel=1e-12)

    def test_infeasible_gives_zero_grad_and_inf_loss(self):
        lp = np.log(np.full((1, 3), 1.0 / 3.0))
        loss, grad = ctc_loss_grad(lp, [1, 2])
        assert math.isinf(loss)
        assert not grad.any()


class TestGreedyDecode:
    def _lp(self, path, v=3):
        out = np.full((len(path), v), -10.0)
        for t, idx in enumerate(path):
            out[t, idx] = 0.0
        return out

    def test_collapse_repeats_around_blank(self):
        # a a - a -> "aa"
        assert greedy_decode(self._lp([1, 1, 0, 1]), VOCAB_AB) == "aa"

    def test_all_blank_decodes_empty(self):
        assert greedy_decode(self._lp([0, 0, 0]), VOCAB_AB) == ""

    def test_repeat_collapse_rule(self):
        # a b b - b -> "abb"
        assert greedy_decode(self._lp([1, 2, 2, 0, 2]), VOCAB_AB) == "abb"

    def test_tie_breaks_to_lowest_index(self):
        lp = np.zeros((2, 3))  # exact ties everywhere: argmax picks index 0 (blank)
        assert greedy_decode(lp, VOCAB_AB) == ""
        lp2 = np.array([[-5.0, 1.0, 1.0]])  # tie between a and b resolves to a
        assert greedy_decode(lp2, VOCAB_AB) == "a"


class TestHead:
    def test_zero_init_gives_uniform_predictions(self):
        vocab = Vocab((BLANK, "a", "b", "c"))
        head = CtcHead.zeros(5, vocab)
        feats = np.random.default_rng(5).normal(0, 1, (7, 5)).astype(np.float32)
        lp = log_softmax_rows(head.logits(feats))
        np.testing.assert_allclose(np.exp(lp), 0.25, atol=1e-12)
        # empty target has exactly one alignment, so its loss is the closed form T*log(V)
        assert ctc_loss(lp, []) == pytest.approx(7 * math.log(4), rel=1e-9)

    def test_rejects_mismatched_features(self):
        head = CtcHead.zeros(5, VOCAB_AB)
        with pytest.raises(Exception):
            head.logits(np.zeros((3, 4), np.float32))
