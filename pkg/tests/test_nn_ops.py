import numpy as np

from ariann import dealer, nn_ops
from ariann.beaver import ElemwiseGeometry
from ariann.ring import RingTensor
from ariann.runtime import run_local_pair
from ariann.sharing import decode_pair, encode_fixed, reconstruct, share

N_BITS = 32
P = 3


def _run(builder, program, n=N_BITS):
    d = dealer.make_dealer(n, seed=101)

    def wrapped(session):
        return program(session, d.for_party(session.party))

    return run_local_pair(wrapped)


def _shared(values, rng, precision=P, n=N_BITS):
    return share(encode_fixed(values, precision, n), rng, precision=precision)


def test_relu_examples_and_rounds():
    rng = np.random.default_rng(0)
    xs = _shared([-2.0, 0.0, 3.0], rng)

    def program(session, prep):
        return nn_ops.relu(session, xs[session.party], prep.relu(3))

    (r0, l0), (r1, _) = _run(None, program)
    assert np.allclose(decode_pair(r0, r1), [0.0, 0.0, 3.0])
    assert l0.total_rounds() == 2
    assert l0.rounds == {"comparison": 1, "mul": 1}


def test_relu_all_negative_is_zero():
    rng = np.random.default_rng(1)
    xs = _shared([-5.0, -0.001, -99.9], rng)

    def program(session, prep):
        return nn_ops.relu(session, xs[session.party], prep.relu(3))

    (r0, _), (r1, _) = _run(None, program)
    assert np.allclose(decode_pair(r0, r1), 0.0)


def test_relu_matches_plaintext_in_bulk():
    rng = np.random.default_rng(2)
    vals = rng.uniform(-100, 100, 10_000)
    xs = _shared(vals, rng)

    def program(session, prep):
        return nn_ops.relu(session, xs[session.party], prep.relu(vals.size))

    (r0, _), (r1, _) = _run(None, program)
    got = decode_pair(r0, r1)
    want = np.maximum(np.floor(vals * 1000) / 1000, 0.0)
    assert np.allclose(got, want, atol=1e-9)


def test_relu_plus_negated_relu_is_abs():
    rng = np.random.default_rng(3)
    vals = rng.uniform(-50, 50, 200)
    vals[np.abs(vals) < 0.01] = 1.0  # keep away from zero
    xs = _shared(vals, rng)

    def program(session, prep):
        x = xs[session.party]
        pos = nn_ops.relu(session, x, prep.relu(vals.size))
        neg = nn_ops.relu(session, -x, prep.relu(vals.size))
        return pos + neg

    (r0, _), (r1, _) = _run(None, program)
    want = np.abs(np.floor(vals * 1000) / 1000)
    assert np.allclose(decode_pair(r0, r1), want, atol=1e-9)


def test_argmax_basic_tie_and_rounds():
    rng = np.random.default_rng(4)
    xs = _shared([1.0, 3.0, 2.0], rng)

    def program(session, prep):
        return nn_ops.argmax(session, xs[session.party], prep.argmax(1, 3))

    (r0, l0), (r1, _) = _run(None, program)
    assert reconstruct(r0, r1).data.tolist() == [0, 1, 0]
    assert l0.total_rounds() == 2
    assert l0.rounds == {"comparison": 1, "equality": 1}

    ties = _shared([5.0, 5.0, 1.0], rng)

    def program2(session, prep):
        return nn_ops.argmax(session, ties[session.party], prep.argmax(1, 3))

    (r0, _), (r1, _) = _run(None, program2)
    assert reconstruct(r0, r1).data.tolist() == [1, 1, 0]


def test_argmax_output_sum_equals_max_multiplicity():
    rng = np.random.default_rng(5)
    rows = np.array([[1.0, 4.0, 4.0, 0.0],
                     [7.0, 7.0, 7.0, 7.0],
                     [0.0, 1.0, 2.0, 3.0]])
    xs = _shared(rows, rng)

    def program(session, prep):
        return nn_ops.argmax(session, xs[session.party], prep.argmax(3, 4))

    (r0, _), (r1, _) = _run(None, program)
    sums = reconstruct(r0, r1).data.sum(axis=-1)
    assert sums.tolist() == [2, 4, 1]


def test_argmax_bulk_matches_numpy():
    rng = np.random.default_rng(6)
    rows = rng.uniform(-10, 10, (1000, 10))
    # The protocol sees 3-decimal encodings: drop rows whose top two values
    # collide at that granularity (they would legitimately multi-hot).
    q = np.sort(np.floor(rows * 1000), axis=-1)
    distinct = (q[:, -1] - q[:, -2]) >= 1
    rows = rows[distinct]
    m = rows.shape[0]
    xs = _shared(rows, rng, n=40)  # keep the sign failure mass negligible

    def program(session, prep):
        return nn_ops.argmax(session, xs[session.party], prep.argmax(m, 10))

    (r0, _), (r1, _) = _run(None, program, n=40)
    onehot = reconstruct(r0, r1).data
    assert np.array_equal(np.argmax(onehot, axis=-1), np.argmax(rows, axis=-1))
    assert np.all(onehot.sum(axis=-1) == 1)


def test_break_ties_single_candidate_passthrough():
    rng = np.random.default_rng(7)
    delta = share(RingTensor.from_ints([0, 1, 0], N_BITS), rng)

    def program(session, prep):
        return nn_ops.break_ties(session, delta[session.party],
                                 prep.cmp_keys(3), coin=0.77)

    (r0, l0), (r1, _) = _run(None, program)
    assert reconstruct(r0, r1).data.tolist() == [0, 1, 0]
    assert l0.total_rounds() == 1


def test_break_ties_uniform_over_pair():
    rng = np.random.default_rng(8)
    trials = 10_000
    coins = np.random.default_rng(9).uniform(0, 1, (trials, 1))
    delta = share(RingTensor.from_ints(np.ones((trials, 2), dtype=np.int64),
                                       N_BITS), rng)

    def program(session, prep):
        return nn_ops.break_ties(session, delta[session.party],
                                 prep.cmp_keys(2 * trials), coin=coins)

    (r0, _), (r1, _) = _run(None, program)
    out = reconstruct(r0, r1).data
    assert np.all(out.sum(axis=-1) == 1)
    first = out[:, 0].sum()
    sigma = np.sqrt(trials * 0.25)
    assert abs(first - trials / 2) <= 3 * sigma


def test_break_ties_three_way_is_onehot():
    rng = np.random.default_rng(10)
    delta = share(RingTensor.from_ints([1, 1, 1], N_BITS), rng)

    def program(session, prep):
        return nn_ops.break_ties(session, delta[session.party],
                                 prep.cmp_keys(3), coin=0.42)

    (r0, _), (r1, _) = _run(None, program)
    assert reconstruct(r0, r1).data.sum() == 1


def test_maxpool_example_constant_and_rounds():
    rng = np.random.default_rng(11)
    xs = _shared([[1.0, 2.0], [3.0, 4.0]], rng)

    def program(session, prep):
        return nn_ops.maxpool(session, xs[session.party], 2, prep.maxpool(2, 2))

    (r0, l0), (r1, _) = _run(None, program)
    assert np.allclose(decode_pair(r0, r1), [[4.0]])
    assert l0.total_rounds() == 3

    const = _shared(np.full((4, 4), 2.5), rng)

    def program2(session, prep):
        return nn_ops.maxpool(session, const[session.party], 2, prep.maxpool(4, 2))

    (r0, _), (r1, _) = _run(None, program2)
    assert np.allclose(decode_pair(r0, r1), 2.5 - 1e-3, atol=2e-3)


def test_maxpool_random_matches_plaintext():
    rng = np.random.default_rng(12)
    for trial in range(20):
        vals = rng.uniform(-10, 10, (8, 8))
        xs = _shared(vals, rng)

        def program(session, prep):
            return nn_ops.maxpool(session, xs[session.party], 2,
                                  prep.maxpool(8, 2))

        (r0, _), (r1, _) = _run(None, program)
        want = np.floor(vals * 1000).reshape(4, 2, 4, 2).transpose(0, 2, 1, 3)
        want = want.reshape(4, 4, 4).max(axis=-1) / 1000
        assert np.allclose(decode_pair(r0, r1), want, atol=1e-9), trial


def test_maxpool_k2_matches_and_uses_four_rounds():
    rng = np.random.default_rng(13)
    vals = rng.uniform(-10, 10, (6, 6))
    xs = _shared(vals, rng)

    def via_tree(session, prep):
        return nn_ops.maxpool_k2(session, xs[session.party], prep.maxpool_k2(6))

    def via_argmax(session, prep):
        return nn_ops.maxpool(session, xs[session.party], 2, prep.maxpool(6, 2))

    (t0, lt), (t1, _) = _run(None, via_tree)
    (a0, la), (a1, _) = _run(None, via_argmax)
    assert np.allclose(decode_pair(t0, t1), decode_pair(a0, a1))
    assert lt.total_rounds() == 4
    assert la.total_rounds() == 3
    # Tree variant needs ~4x fewer comparisons than pairwise argmax.
    assert la.elements["comparison"] / lt.elements["comparison"] == 4.0


def test_inv_sqrt_newton_classic_convergence():
    rng = np.random.default_rng(14)
    v = _shared(np.full(3, 4.0), rng)
    theta0 = _shared(np.full(3, 0.4), rng)

    def program(session, prep):
        return nn_ops.inv_sqrt_newton(session, v[session.party],
                                      theta0[session.party], 5, 2.0,
                                      prep.newton((3,), 5))

    (r0, l0), (r1, _) = _run(None, program)
    got = decode_pair(r0, r1)
    assert np.all(np.abs(got - 0.5) <= 0.005)
    assert l0.total_rounds() == 15  # 3 rounds per iteration


def test_batchnorm_constant_batch_returns_beta():
    rng = np.random.default_rng(15)
    x = _shared(np.full((6, 4), 3.3), rng, n=40)
    gamma = _shared(np.ones(4), rng, n=40)
    beta = _shared(np.array([0.5, -0.5, 1.0, 0.0]), rng, n=40)

    def program(session, prep):
        out, _ = nn_ops.batchnorm_forward(
            session, x[session.party], gamma[session.party],
            beta[session.party], prep.batchnorm(6, 4, 50))
        return out

    (r0, _), (r1, _) = _run(None, program, n=40)
    got = decode_pair(r0, r1)
    assert np.allclose(got, [0.5, -0.5, 1.0, 0.0], atol=0.05)


def test_batchnorm_unit_variance_case():
    rng = np.random.default_rng(16)
    x = _shared(np.array([[-1.0], [1.0]]), rng, n=40)
    gamma = _shared(np.ones(1), rng, n=40)
    beta = _shared(np.zeros(1), rng, n=40)

    def program(session, prep):
        out, _ = nn_ops.batchnorm_forward(
            session, x[session.party], gamma[session.party],
            beta[session.party], prep.batchnorm(2, 1, 50))
        return out

    (r0, _), (r1, _) = _run(None, program, n=40)
    got = decode_pair(r0, r1).ravel()
    want = np.array([-1.0, 1.0]) / np.sqrt(1.0 + 0.01)
    assert np.all(np.abs(got - want) / np.abs(want) <= 0.05)


def test_batchnorm_random_batch_vs_plaintext():
    rng = np.random.default_rng(17)
    vals = rng.normal(0, 1.5, (32, 8))
    x = _shared(vals, rng, n=40)
    g_vals = rng.uniform(0.5, 1.5, 8)
    b_vals = rng.uniform(-0.5, 0.5, 8)
    gamma = _shared(g_vals, rng, n=40)
    beta = _shared(b_vals, rng, n=40)

    def program(session, prep):
        out, _ = nn_ops.batchnorm_forward(
            session, x[session.party], gamma[session.party],
            beta[session.party], prep.batchnorm(32, 8, 50))
        return out

    (r0, _), (r1, _) = _run(None, program, n=40)
    got = decode_pair(r0, r1)
    mu = vals.mean(axis=0)
    var = vals.var(axis=0)
    want = g_vals * (vals - mu) / np.sqrt(var + 0.01) + b_vals
    # 5% relative on the normalization estimate plus a fixed-point floor.
    assert np.allclose(got, want, rtol=0.05, atol=0.02)


def test_prep_plans_match_published_formulas():
    assert nn_ops.relu_plan(100) == [
        ("cmp", 100), ("triple", "mul", ElemwiseGeometry((100,)))]
    assert nn_ops.argmax_plan(1, 10)[0] == ("cmp", 90)
    assert nn_ops.argmax_plan(1, 10)[1] == ("eq", 10)
    plan = nn_ops.maxpool_plan(8, 2)
    assert plan[0] == ("cmp", 16 * 4 * 3)
    assert plan[1] == ("eq", 16 * 4)
    assert len(nn_ops.newton_plan((5,), 3)) == 9
