import math

import numpy as np
import pytest

from crossview.autodiff import Tensor, backward, grad_check
from crossview.contrastive import (
    MemoryBank,
    ViewState,
    compute_context,
    compute_context_batch,
    cross_view_terms,
    loss_cross_directed,
    loss_cross_total,
    loss_infonce,
    loss_km,
    topk_mine,
)


def _unit_rows(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestMemoryBank:
    def test_fifo_order(self):
        bank = MemoryBank(4, 2)
        a, b, c, d, e, f = np.eye(2)[[0, 1, 0, 1, 0, 1]] * 1.0
        bank.enqueue(np.stack([a, b]))
        bank.enqueue(np.stack([c, d]))
        bank.enqueue(np.stack([e, f]))
        np.testing.assert_array_equal(bank.contents(), np.stack([c, d, e, f]))

    def test_growth_until_full(self):
        rng = np.random.default_rng(0)
        bank = MemoryBank(8, 4)
        bank.enqueue(_unit_rows(rng, 3, 4))
        assert len(bank) == 3 and not bank.full
        bank.enqueue(_unit_rows(rng, 3, 4))
        assert len(bank) == 6
        bank.enqueue(_unit_rows(rng, 3, 4))
        assert len(bank) == 8 and bank.full

    def test_batch_larger_than_capacity_keeps_tail(self):
        rng = np.random.default_rng(1)
        bank = MemoryBank(3, 4)
        batch = _unit_rows(rng, 7, 4)
        bank.enqueue(batch)
        np.testing.assert_array_equal(bank.contents(), batch[-3:])

    def test_rejects_unnormalized(self):
        bank = MemoryBank(4, 3)
        with pytest.raises(ValueError, match="norm"):
            bank.enqueue(np.array([[1.0, 1.0, 0.0]]))

    def test_randomized_start_is_full_and_unit(self):
        bank = MemoryBank(16, 8)
        assert len(bank) == 0
        bank = MemoryBank.randomized(16, 8, np.random.default_rng(2))
        assert bank.full
        np.testing.assert_allclose(np.linalg.norm(bank.matrix, axis=1), 1.0,
                                   rtol=0, atol=1e-12)

    def test_fifo_property_randomized(self):
        """Random enqueue schedules keep order, capacity, and normalization."""
        rng = np.random.default_rng(3)
        for trial in range(200):
            capacity = int(rng.integers(2, 12))
            dim = int(rng.integers(2, 6))
            bank = MemoryBank(capacity, dim)
            mirror = []
            for _ in range(int(rng.integers(1, 8))):
                batch = _unit_rows(rng, int(rng.integers(1, capacity + 3)), dim)
                bank.enqueue(batch)
                mirror.extend(batch)
                mirror = mirror[-capacity:]
                assert len(bank) == min(len(mirror), capacity) <= capacity
                np.testing.assert_allclose(
                    np.linalg.norm(bank.matrix, axis=1), 1.0, rtol=0, atol=1e-9)
            np.testing.assert_array_equal(bank.contents(), np.array(mirror))

    def test_slot_alignment_across_banks(self):
        """Identical enqueue schedules leave sample ids at identical slots."""
        rng = np.random.default_rng(4)
        bank_a = MemoryBank.randomized(8, 3, np.random.default_rng(10))
        bank_b = MemoryBank.randomized(8, 3, np.random.default_rng(11))
        ids_a = -np.ones(8, dtype=int)
        ids_b = -np.ones(8, dtype=int)
        next_id = 0
        for _ in range(25):
            n = int(rng.integers(1, 5))
            ids = np.arange(next_id, next_id + n)
            next_id += n
            pos_a = (bank_a._cursor + np.arange(n)) % 8
            pos_b = (bank_b._cursor + np.arange(n)) % 8
            bank_a.enqueue(_unit_rows(rng, n, 3))
            bank_b.enqueue(_unit_rows(rng, n, 3))
            ids_a[pos_a] = ids
            ids_b[pos_b] = ids
            np.testing.assert_array_equal(ids_a, ids_b)


class TestContext:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(5)
        bank = _unit_rows(rng, 4, 6)
        sims = compute_context(bank[2], bank)
        assert abs(sims[2] - 1.0) < 1e-12

    def test_orthogonal_is_zero(self):
        bank = np.eye(3)[:2]
        sims = compute_context(np.array([0.0, 0.0, 1.0]), bank)
        np.testing.assert_allclose(sims, 0.0, rtol=0, atol=0)

    def test_hand_dot_product(self):
        sims = compute_context(np.array([0.6, 0.8]), np.array([[0.8, 0.6]]))
        np.testing.assert_allclose(sims, [0.96], rtol=0, atol=1e-15)

    def test_empty_bank_rejected(self):
        with pytest.raises(ValueError, match="bank"):
            compute_context(np.array([1.0, 0.0]), np.zeros((0, 2)))

    def test_values_bounded_by_unit_norms(self):
        rng = np.random.default_rng(6)
        bank = _unit_rows(rng, 32, 5)
        sims = compute_context(_unit_rows(rng, 1, 5)[0], bank)
        assert np.all(np.abs(sims) <= 1.0 + 1e-12)


class TestTopk:
    def test_argmax(self):
        values, idx = topk_mine(np.array([0.2, 0.8, -0.1]), 1)
        np.testing.assert_array_equal(idx, [1])
        np.testing.assert_array_equal(values, [0.8])

    def test_order_statistics(self):
        values, idx = topk_mine(np.array([0.2, 0.8, -0.1]), 2)
        np.testing.assert_array_equal(idx, [1, 0])
        np.testing.assert_array_equal(values, [0.8, 0.2])

    def test_tie_breaks_to_lowest_index(self):
        _, idx = topk_mine(np.array([0.5, 0.5]), 1)
        np.testing.assert_array_equal(idx, [0])

    def test_k_zero_and_k_too_large(self):
        values, idx = topk_mine(np.array([0.5, 0.1]), 0)
        assert values.size == 0 and idx.size == 0
        with pytest.raises(ValueError, match="topk"):
            topk_mine(np.array([0.5, 0.1]), 3)

    def test_selected_dominate_rest(self):
        rng = np.random.default_rng(7)
        sims = rng.normal(size=40)
        values, idx = topk_mine(sims, 7)
        rest = np.delete(sims, idx)
        assert values.min() >= rest.max()


class TestInfoNCE:
    def test_hand_value_single_negative(self):
        # pos = 1, one negative at 0, tau = 0.5 -> log(1 + e^-2)
        z = np.array([1.0, 0.0])
        z_hat = np.array([1.0, 0.0])
        bank = np.array([[0.0, 1.0]])
        loss = loss_infonce(z, z_hat, bank, tau=0.5)
        np.testing.assert_allclose(loss.item(), math.log(1.0 + math.exp(-2.0)),
                                   rtol=0, atol=1e-15)

    def test_uniform_similarities_give_log_n_plus_one(self):
        z = np.array([1.0, 0.0])
        for n in (1, 4, 9):
            bank = np.tile(z, (n, 1))
            loss = loss_infonce(z, z, bank, tau=0.07)
            np.testing.assert_allclose(loss.item(), math.log(n + 1.0),
                                       rtol=0, atol=1e-12)

    def test_strictly_positive(self):
        rng = np.random.default_rng(8)
        z = _unit_rows(rng, 5, 8)
        zh = _unit_rows(rng, 5, 8)
        bank = _unit_rows(rng, 16, 8)
        assert loss_infonce(z, zh, bank, tau=0.2).item() > 0.0

    def test_raising_one_negative_raises_loss(self):
        rng = np.random.default_rng(9)
        z = _unit_rows(rng, 1, 6)[0]
        zh = _unit_rows(rng, 1, 6)[0]
        bank = _unit_rows(rng, 10, 6)
        base = loss_infonce(z, zh, bank, tau=0.3).item()
        for i in (0, 4, 9):
            bumped = bank.copy()
            bumped[i] = bumped[i] + 0.05 * z  # raises z.m_i by 0.05 exactly
            assert loss_infonce(z, zh, bumped, tau=0.3).item() > base

    def test_matches_direct_formula(self):
        """Stability form agrees with the textbook ratio at 1e-12."""
        rng = np.random.default_rng(10)
        for _ in range(20):
            z = _unit_rows(rng, 1, 5)[0]
            zh = _unit_rows(rng, 1, 5)[0]
            bank = _unit_rows(rng, 12, 5)
            tau = float(rng.uniform(0.05, 1.0))
            pos = math.exp(z @ zh / tau)
            den = pos + sum(math.exp(z @ m / tau) for m in bank)
            direct = -math.log(pos / den)
            engine = loss_infonce(z, zh, bank, tau).item()
            assert abs(direct - engine) < 1e-12

    def test_rejects_bad_temperature(self):
        z = np.array([1.0, 0.0])
        with pytest.raises(ValueError, match="temperature"):
            loss_infonce(z, z, np.eye(2), tau=0.0)

    def test_gradient_wrt_query(self):
        rng = np.random.default_rng(11)
        zh = _unit_rows(rng, 3, 8)
        bank = _unit_rows(rng, 8, 8)
        z0 = _unit_rows(rng, 3, 8)
        err = grad_check(lambda t: loss_infonce(t, zh, bank, 0.07), z0)
        assert err < 1e-4

    def test_key_and_bank_receive_no_gradient(self):
        rng = np.random.default_rng(12)
        z = Tensor(_unit_rows(rng, 2, 6), requires_grad=True)
        zh = _unit_rows(rng, 2, 6)
        bank = _unit_rows(rng, 5, 6)
        grads = backward(loss_infonce(z, zh, bank, 0.1))
        assert z in grads
        assert all(t is z or t.requires_grad for t in grads)


class TestKnowledgeMining:
    def test_k_zero_equals_infonce_bitwise(self):
        rng = np.random.default_rng(13)
        z = _unit_rows(rng, 4, 8)
        zh = _unit_rows(rng, 4, 8)
        bank = _unit_rows(rng, 16, 8)
        a = loss_km(z, zh, bank, tau=0.07, k=0).item()
        b = loss_infonce(z, zh, bank, tau=0.07).item()
        assert a == b

    def test_k_full_bank_is_zero(self):
        rng = np.random.default_rng(14)
        z = _unit_rows(rng, 3, 6)
        zh = _unit_rows(rng, 3, 6)
        bank = _unit_rows(rng, 9, 6)
        assert abs(loss_km(z, zh, bank, tau=0.07, k=9).item()) < 1e-12

    def test_single_negative_promoted(self):
        z = np.array([1.0, 0.0])
        zh = np.array([1.0, 0.0])
        bank = np.array([[0.5, math.sqrt(1 - 0.25)]])  # z.m = 0.5
        assert loss_km(z, zh, bank, tau=1.0, k=1).item() == 0.0

    def test_loss_decreases_with_k(self):
        rng = np.random.default_rng(15)
        z = _unit_rows(rng, 2, 8)
        zh = _unit_rows(rng, 2, 8)
        bank = _unit_rows(rng, 12, 8)
        losses = [loss_km(z, zh, bank, tau=0.2, k=k).item() for k in range(13)]
        assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-12

    def test_unmined_negative_gradient_is_positive(self):
        """Finite differences on a similarity input, mined set held fixed."""
        rng = np.random.default_rng(16)
        z = _unit_rows(rng, 1, 6)[0]
        zh = _unit_rows(rng, 1, 6)[0]
        bank = _unit_rows(rng, 8, 6)
        sims = compute_context(z, bank)
        _, mined = topk_mine(sims, 2)
        unmined = [i for i in range(8) if i not in mined]
        eps = 1e-6
        for i in unmined[:3]:
            hi = bank.copy()
            hi[i] += eps * z
            lo = bank.copy()
            lo[i] -= eps * z
            slope = (loss_km(z, zh, hi, 0.2, 2).item()
                     - loss_km(z, zh, lo, 0.2, 2).item()) / (2 * eps)
            assert slope > 0.0

    def test_positive_similarity_gradient_is_negative(self):
        rng = np.random.default_rng(17)
        z = _unit_rows(rng, 1, 6)[0]
        zh = _unit_rows(rng, 1, 6)[0]
        bank = _unit_rows(rng, 8, 6)
        eps = 1e-6
        for fn in (lambda zz, b: loss_infonce(z, zz, b, 0.2),
                   lambda zz, b: loss_km(z, zz, b, 0.2, 2)):
            slope = (fn(zh + eps * z, bank).item()
                     - fn(zh - eps * z, bank).item()) / (2 * eps)
            assert slope < 0.0

    def test_gradient_wrt_query(self):
        rng = np.random.default_rng(18)
        zh = _unit_rows(rng, 2, 8)
        bank = _unit_rows(rng, 16, 8)
        z0 = _unit_rows(rng, 2, 8)
        assert grad_check(lambda t: loss_km(t, zh, bank, 0.07, 3), z0) < 1e-4


class TestCrossDirected:
    def _state(self, rng, batch=3, dim=8, bank_size=16):
        z = _unit_rows(rng, batch, dim)
        zh = _unit_rows(rng, batch, dim)
        bank = _unit_rows(rng, bank_size, dim)
        return z, zh, bank

    def test_unit_context_equals_km_with_transplanted_set(self):
        rng = np.random.default_rng(19)
        z_u, zh_u, bank_u = self._state(rng)
        z_v, _, bank_v = self._state(rng)
        sims_v = compute_context_batch(z_v, bank_v)
        mined_v = np.stack([topk_mine(s, 2)[1] for s in sims_v])
        ones = np.ones((3, 16))
        cross = loss_cross_directed(z_u, zh_u, bank_u, ones, mined_v, tau=0.07).item()

        # km evaluated with the same transplanted positive set
        from crossview.contrastive import _as_batch, _ratio_loss
        km_like = _ratio_loss(_as_batch(z_u), zh_u, bank_u, 0.07, mined_v).item()
        assert cross == km_like

    def test_all_indices_mined_gives_zero(self):
        rng = np.random.default_rng(20)
        z_u, zh_u, bank_u = self._state(rng)
        ctx = np.abs(compute_context_batch(z_u, bank_u)) + 0.1
        every = np.arange(16)
        loss = loss_cross_directed(z_u, zh_u, bank_u, ctx, every, tau=0.1)
        assert abs(loss.item()) < 1e-12

    def test_identical_views_are_symmetric(self):
        rng = np.random.default_rng(21)
        z, zh, bank = self._state(rng)
        sims = compute_context_batch(z, bank)
        mined = np.stack([topk_mine(s, 1)[1] for s in sims])
        a = loss_cross_directed(z, zh, bank, sims, mined, tau=0.07).item()
        b = loss_cross_directed(z, zh, bank, sims, mined, tau=0.07).item()
        assert a == b

    def test_misaligned_context_rejected(self):
        rng = np.random.default_rng(22)
        z_u, zh_u, bank_u = self._state(rng)
        with pytest.raises(ValueError, match="context"):
            loss_cross_directed(z_u, zh_u, bank_u, np.ones((3, 9)),
                                np.zeros((3, 1), dtype=int), tau=0.07)

    def test_gradient_wrt_query(self):
        rng = np.random.default_rng(23)
        z_u, zh_u, bank_u = self._state(rng, batch=2)
        ctx = _unit_rows(rng, 2, 16)
        mined = np.array([[3, 5], [1, 2]])
        err = grad_check(
            lambda t: loss_cross_directed(t, zh_u, bank_u, ctx, mined, 0.07), z_u)
        assert err < 1e-4

    def test_guide_gradient_flows_when_context_is_tensor(self):
        rng = np.random.default_rng(24)
        z_u, zh_u, bank_u = self._state(rng, batch=2)
        z_v = Tensor(_unit_rows(rng, 2, 8), requires_grad=True)
        from crossview import autodiff as ad
        ctx = ad.matmul(z_v, _unit_rows(rng, 16, 8).T)
        mined = np.array([[0, 1], [2, 3]])
        grads = backward(loss_cross_directed(z_u, zh_u, bank_u, ctx, mined, 0.07))
        assert z_v in grads


class TestCrossTotal:
    def _states(self, rng, views=2, batch=3, dim=8, bank_size=12):
        out = []
        for _ in range(views):
            z = Tensor(_unit_rows(rng, batch, dim), requires_grad=True)
            zh = _unit_rows(rng, batch, dim)
            bank = _unit_rows(rng, bank_size, dim)
            out.append(ViewState(z, zh, bank))
        return out

    def test_two_views_sum_of_two_directed_terms(self):
        rng = np.random.default_rng(25)
        states = self._states(rng, views=2)
        terms = cross_view_terms(states, tau=0.07, k=1)
        assert set(terms) == {(0, 1), (1, 0)}
        total = loss_cross_total(states, tau=0.07, k=1)
        np.testing.assert_allclose(total.item(),
                                   terms[(0, 1)].item() + terms[(1, 0)].item(),
                                   rtol=0, atol=1e-15)

    def test_three_views_give_six_terms(self):
        rng = np.random.default_rng(26)
        states = self._states(rng, views=3)
        terms = cross_view_terms(states, tau=0.07, k=1)
        assert len(terms) == 6

    def test_identical_views_equal_terms(self):
        rng = np.random.default_rng(27)
        z = _unit_rows(rng, 3, 8)
        zh = _unit_rows(rng, 3, 8)
        bank = _unit_rows(rng, 12, 8)
        states = [ViewState(Tensor(z.copy()), zh.copy(), bank.copy()) for _ in range(3)]
        values = [t.item() for t in cross_view_terms(states, tau=0.07, k=2).values()]
        np.testing.assert_allclose(values, values[0], rtol=0, atol=1e-12)

    def test_needs_two_views(self):
        rng = np.random.default_rng(28)
        with pytest.raises(ValueError, match="2 views"):
            loss_cross_total(self._states(rng, views=1), tau=0.07, k=1)

    def test_gradients_reach_every_view(self):
        rng = np.random.default_rng(29)
        states = self._states(rng, views=2)
        grads = backward(loss_cross_total(states, tau=0.07, k=1))
        assert states[0].z in grads and states[1].z in grads

    def test_total_gradient_check_flowing_context(self):
        # with guide_grad the whole path is differentiable, so plain finite
        # differences see the same function the tape does
        rng = np.random.default_rng(30)
        fixed = self._states(rng, views=2, batch=2)

        def fn(t):
            states = [ViewState(t, fixed[0].z_hat, fixed[0].bank), fixed[1]]
            return loss_cross_total(states, tau=0.07, k=1, guide_grad=True)

        z0 = _unit_rows(np.random.default_rng(31), 2, 8)
        assert grad_check(fn, z0) < 1e-4

    def test_total_gradient_check_stopped_context(self):
        # default mode stops gradients at the guiding similarities; freeze
        # them outside the probe so finite differences match that contract
        rng = np.random.default_rng(32)
        fixed = self._states(rng, views=2, batch=2)
        base = _unit_rows(np.random.default_rng(33), 2, 8)
        bank0 = np.asarray(fixed[0].bank)
        bank1 = np.asarray(fixed[1].bank)
        ctx0 = compute_context_batch(base, bank0)
        ctx1 = compute_context_batch(fixed[1].z.data, bank1)
        mined0 = np.stack([topk_mine(s, 1)[1] for s in ctx0])
        mined1 = np.stack([topk_mine(s, 1)[1] for s in ctx1])

        def fn(t):
            to_view0 = loss_cross_directed(t, fixed[0].z_hat, bank0, ctx1, mined1, 0.07)
            to_view1 = loss_cross_directed(fixed[1].z, fixed[1].z_hat, bank1,
                                           ctx0, mined0, 0.07)
            return to_view0 + to_view1

        assert grad_check(fn, base) < 1e-4
