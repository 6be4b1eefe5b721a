import numpy as np
import pytest

from beamlora.optim import AdamState, adam_step, slice_moments, write_moments
from beamlora.tensor import ContractError, Tensor


def test_first_step_magnitude():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=1e-3)
    adam_step({"w": p}, state, grads={"w": np.array([1.0])})
    # m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
    assert p.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_zero_gradient_leaves_params():
    p = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    state = AdamState(lr=1e-2)
    for _ in range(20):
        adam_step({"w": p}, state, grads={"w": np.zeros(2)})
    np.testing.assert_array_equal(p.data, [0.3, -0.2])


def test_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = Tensor(rng.standard_normal(5), requires_grad=True)
        st = AdamState(lr=1e-2)
        for _ in range(30):
            adam_step({"w": p}, st, grads={"w": rng.standard_normal(5)})
        return p.data.tobytes()

    assert run() == run()


def test_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ContractError):
        adam_step({"w": p}, AdamState(), grads={"w": np.zeros(2)})


def test_missing_gradient():
    with pytest.raises(ContractError):
        adam_step({"w": Tensor(np.zeros(3), requires_grad=True)}, AdamState())


def test_convex_quadratic_monotone_after_burn_in():
    target = np.array([1.0, -2.0, 0.5])
    p = Tensor(np.zeros(3), requires_grad=True)
    st = AdamState(lr=1e-3)
    losses = []
    for _ in range(300):
        g = 2 * (p.data - target)
        losses.append(float(np.sum((p.data - target) ** 2)))
        adam_step({"w": p}, st, grads={"w": g})
    assert all(b < a for a, b in zip(losses[10:], losses[11:]))


def _state_with(shape_b=(4, 2), shape_a=(2, 3)):
    rng = np.random.default_rng(5)
    st = AdamState()
    st.M["layer0.B"] = rng.standard_normal(shape_b)
    st.V["layer0.B"] = rng.random(shape_b)
    st.M["layer0.A"] = rng.standard_normal(shape_a)
    st.V["layer0.A"] = rng.random(shape_a)
    return st


class TestSlices:
    def test_b_column(self):
        st = _state_with()
        m, v = slice_moments(st, "layer0.B", 1, axis=1)
        np.testing.assert_array_equal(m, st.M["layer0.B"][:, 1])
        assert m.shape == (4,) and v.shape == (4,)

    def test_wrong_axis(self):
        with pytest.raises(ContractError):
            slice_moments(_state_with(), "layer0.B", 0, axis=0)
        with pytest.raises(ContractError):
            slice_moments(_state_with(), "layer0.A", 0, axis=1)

    def test_reassemble(self):
        st = _state_with()
        cols = [slice_moments(st, "layer0.B", i)[0] for i in range(2)]
        assert np.stack(cols, axis=1).tobytes() == st.M["layer0.B"].tobytes()
        rows = [slice_moments(st, "layer0.A", i)[0] for i in range(2)]
        assert np.stack(rows).tobytes() == st.M["layer0.A"].tobytes()

    def test_untouched_rank_stays_zero(self):
        B = Tensor(np.zeros((4, 2)), requires_grad=True)
        st = AdamState()
        g = np.zeros((4, 2))
        g[:, 0] = [1.0, 2.0, 3.0, 4.0]
        adam_step({"layer0.B": B}, st, grads={"layer0.B": g})
        m, v = slice_moments(st, "layer0.B", 1)
        assert np.all(m == 0) and np.all(v == 0)
        assert np.all(slice_moments(st, "layer0.B", 0)[0] != 0)

    def test_round_trip_and_isolation(self):
        st = _state_with(shape_a=(3, 3))
        others = [slice_moments(st, "layer0.A", i) for i in (0, 1)]
        m, v = np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.2, 0.3])
        write_moments(st, "layer0.A", 2, m, v)
        got = slice_moments(st, "layer0.A", 2)
        assert got[0].tobytes() == m.tobytes() and got[1].tobytes() == v.tobytes()
        for i, (om, ov) in zip((0, 1), others):
            gm, gv = slice_moments(st, "layer0.A", i)
            assert gm.tobytes() == om.tobytes() and gv.tobytes() == ov.tobytes()

    def test_negative_v_rejected(self):
        with pytest.raises(ContractError):
            write_moments(_state_with(), "layer0.B", 0, np.zeros(4), -np.ones(4))

    def test_bad_slice_shape(self):
        with pytest.raises(ContractError):
            write_moments(_state_with(), "layer0.B", 0, np.zeros(3), np.zeros(3))

    def test_transplant_then_step_replays_fresh_run(self):
        rng = np.random.default_rng(8)
        # donor state for a single rank: parameter values plus moments
        b, mb, vb = rng.standard_normal(4), rng.standard_normal(4), rng.random(4)
        g = rng.standard_normal((4, 2))

        B = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        st = AdamState(lr=1e-2, step=7)
        st.M["layer0.B"] = rng.standard_normal((4, 2))
        st.V["layer0.B"] = rng.random((4, 2))
        B.data[:, 1] = b
        write_moments(st, "layer0.B", 1, mb, vb)
        adam_step({"layer0.B": B}, st, grads={"layer0.B": g})

        fresh = Tensor(b.copy()[:, None], requires_grad=True)
        fst = AdamState(lr=1e-2, step=7, M={"w": mb.copy()[:, None]}, V={"w": vb.copy()[:, None]})
        adam_step({"w": fresh}, fst, grads={"w": g[:, 1:2]})
        assert B.data[:, 1].tobytes() == fresh.data[:, 0].tobytes()
        assert np.all(st.V["layer0.B"] >= 0)
