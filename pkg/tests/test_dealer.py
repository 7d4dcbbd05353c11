import numpy as np
import pytest

from ariann import beaver, dealer, fss, nn_ops, train as tr
from ariann.ring import ring_mask


def test_relu_plan_yields_published_counts():
    b0, b1, _ = dealer.preprocess(nn_ops.relu_plan(100), 32,
                                  np.random.default_rng(0))
    assert isinstance(b0.items[0], fss.CmpKeyBatch) and b0.items[0].count == 100
    assert isinstance(b0.items[1], beaver.BeaverTriple)
    assert b0.items[1].geometry == beaver.ElemwiseGeometry((100,))
    assert b1.items[0].count == 100


def test_same_plan_same_seed_identical_bundles():
    plan = nn_ops.relu_plan(10) + nn_ops.argmax_plan(1, 4)
    a0, a1, _ = dealer.preprocess(plan, 16, np.random.default_rng(7))
    b0, b1, _ = dealer.preprocess(plan, 16, np.random.default_rng(7))
    blob_a = fss.serialize_keys(fss.pack_keys(a0.items[0], a1.items[0]))
    blob_b = fss.serialize_keys(fss.pack_keys(b0.items[0], b1.items[0]))
    assert blob_a == blob_b
    assert np.array_equal(a0.items[1].a.data, b0.items[1].a.data)


def test_mlp_bundle_sizes_match_consumption_table():
    # 3-linear-layer MLP shape, batch 4: two hidden ReLUs consume
    # batch*width comparison keys each; one matmul triple per layer.
    sizes = [784, 128, 128, 10]
    batch = 4
    plan = tr.mlp_forward_plan(sizes, batch)
    cmp_total = sum(entry[1] for entry in plan if entry[0] == "cmp")
    matmuls = [e for e in plan if e[0] == "triple" and e[1] == beaver.OP_MATMUL]
    muls = [e for e in plan if e[0] == "triple" and e[1] == beaver.OP_MUL]
    assert cmp_total == batch * (128 + 128)
    assert len(matmuls) == 3 and len(muls) == 2
    assert matmuls[0][2] == beaver.MatmulGeometry(4, 784, 128)

    b0, b1, _ = dealer.preprocess(plan, 32, np.random.default_rng(1))
    got_cmp = sum(item.count for item in b0.items
                  if isinstance(item, fss.CmpKeyBatch))
    assert got_cmp == cmp_total


def test_preprocess_keeps_audit_tapes_on_request():
    plan = [("cmp", 5), ("eq", 3)]
    b0, b1, tapes = dealer.preprocess(plan, 16, np.random.default_rng(2),
                                      keep_tapes=True)
    assert len(tapes) == 2
    assert fss.audit_keys(b0.items[0], b1.items[0], tapes[0], range(5)) == []
    assert fss.audit_keys(b0.items[1], b1.items[1], tapes[1], range(3)) == []


def test_plan_is_data_independent():
    # The dealer never sees values: a plan is derivable from shapes alone,
    # and bundles generated for it work for any inputs of that shape.
    plan = nn_ops.relu_plan(4)
    b0, b1, _ = dealer.preprocess(plan, 32, np.random.default_rng(3))
    rec = (b0.items[0].alpha_share + b1.items[0].alpha_share) & ring_mask(32)
    assert rec.shape == (4,)  # alphas exist before any data is chosen


def test_streaming_dealer_detects_desync():
    d = dealer.make_dealer(16, seed=4)
    p0, p1 = d.for_party(0), d.for_party(1)
    p0.cmp_keys(3)
    with pytest.raises(RuntimeError, match="desync"):
        p1.eq_keys(3)


def test_streaming_dealer_frees_delivered_slots():
    d = dealer.make_dealer(16, seed=5)
    p0, p1 = d.for_party(0), d.for_party(1)
    for _ in range(4):
        p0.cmp_keys(2)
        p1.cmp_keys(2)
    assert d._made == {}
