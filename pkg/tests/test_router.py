from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from relayrank.errors import NoCapacityError, PoolError, ProtocolError
from relayrank.router import (HASH_KEY_HEADER, Instance, InstancePool, Kind, Policy, Reason, Request,
                              ServiceClass, Stage, churn_diff, classify, route)


@pytest.fixture
def pool():
    return InstancePool.build(20, 10, 10)


def test_keyed_requests_meet_on_one_instance(pool):
    for i in range(200):
        u = f"user-{i}"
        pre = route(pool, Request.pre_infer(u))
        rank = route(pool, Request.rank(u, range(8), keyed=True))
        assert pre.instance_id == rank.instance_id and pre.reason is Reason.AFFINITY
        assert pool.get(pre.instance_id).kind is Kind.SPECIAL


def test_round_robin_cycles_normals(pool):
    got = [route(pool, Request.rank(f"u{i}", [1], keyed=False)).instance_id for i in range(20)]
    assert got == pool.normal_ids * 2


def test_least_connections():
    pool = InstancePool.build(5, 2, 3, policy=Policy.LEAST_CONNECTIONS)
    pool.connections.update({"normal-0": 3, "normal-1": 1, "normal-2": 1})
    d = route(pool, Request.rank("x", [1], keyed=False))
    assert d.instance_id == "normal-1" and d.reason is Reason.LEAST_CONNECTIONS


def test_ring_balance():
    pool = InstancePool.build(10, 10, 10)
    counts = Counter(pool.owners([f"k{i}" for i in range(100_000)]))
    mean = 100_000 / 10
    assert all(abs(c - mean) / mean < 0.3 for c in counts.values())


@given(st.integers(0, 9), st.integers(2, 12))
@settings(max_examples=20, deadline=None)
def test_removal_moves_only_removed_keys(victim, n):
    pool = InstancePool.build(n, n, n, per_server_special_cap=2)
    victim_id = f"special-{victim % n}"
    after = pool.remove_instance(victim_id)
    keys = [f"k{i}" for i in range(3000)]
    for _, a, b, moved in churn_diff(pool, after, keys):
        assert moved == (a == victim_id)


def test_addition_moves_only_to_new(pool):
    after = pool.add_instance(Instance("special-new", Kind.SPECIAL, "server-x"))
    diff = churn_diff(pool, after, [f"k{i}" for i in range(5000)])
    moved = [d for d in diff if d[3]]
    assert moved and all(d[2] == "special-new" for d in moved)
    assert 0.03 < len(moved) / 5000 < 0.2  # ~1/11 expected


def test_pool_is_immutable_snapshot(pool):
    after = pool.remove_instance("special-0")
    assert "special-0" in pool.special_ids and "special-0" not in after.special_ids


def test_pool_errors():
    with pytest.raises(PoolError):
        InstancePool.build(30, 25, 10)
    with pytest.raises(PoolError):
        InstancePool((Instance("a", Kind.NORMAL, "s"), Instance("a", Kind.NORMAL, "s")))
    with pytest.raises(PoolError):
        InstancePool(tuple(Instance(f"s{i}", Kind.SPECIAL, "srv") for i in range(3)))
    p = InstancePool.build(3, 1, 2)
    with pytest.raises(PoolError):
        p.add_instance(Instance("normal-0", Kind.NORMAL, "s"))
    with pytest.raises(PoolError):
        p.remove_instance("nope")


def test_no_capacity():
    only_normal = InstancePool.build(3, 0, 3)
    with pytest.raises(NoCapacityError):
        route(only_normal, Request.pre_infer("u"))
    only_special = InstancePool.build(2, 2, 2)
    with pytest.raises(NoCapacityError):
        route(only_special, Request.rank("u", [1], keyed=False))


def test_request_shape():
    pre = Request.pre_infer("u1")
    pre.validate()
    assert pre.stage is Stage.PRE_INFER and pre.header == {HASH_KEY_HEADER: "u1"}
    assert '"consistency-hash-key": "u1"' in pre.to_json()
    assert classify(None, pre) is ServiceClass.SPECIAL
    assert classify(None, Request.rank("u1", [1], keyed=False)) is ServiceClass.NORMAL
    for bad in (Request({HASH_KEY_HEADER: "u1"}, "u1", Stage.PRE_INFER, [1]),
                Request({}, "u1", Stage.PRE_INFER),
                Request.rank("u1", [], keyed=True),
                Request({HASH_KEY_HEADER: "u2"}, "u1", Stage.RANK, [1])):
        with pytest.raises(ProtocolError):
            bad.validate()
