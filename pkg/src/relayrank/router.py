"""Affinity routing over the special-instance pool.

Keyed requests (those carrying ``consistency-hash-key``) land on the first
ring point clockwise of the key's hash, so the pre-infer signal and the later
rank request for one user meet on the same instance. Keyless traffic goes to
normal instances by round-robin or least-connections.

The ring is an immutable snapshot; :meth:`InstancePool.add_instance` and
:meth:`InstancePool.remove_instance` return a new pool.
"""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import NoCapacityError, PoolError, ProtocolError
from .kernels import hash_key, hash_keys

HASH_KEY_HEADER = "consistency-hash-key"
DEFAULT_VNODES = 128


class Stage(str, enum.Enum):
    PRE_INFER = "pre-infer"
    RANK = "rank"


@dataclass(frozen=True)
class Request:
    """Wire-shaped unit of work. ``items`` is any sized collection of candidates."""

    header: dict
    user_id: str
    stage: Stage
    items: Any = ()

    @classmethod
    def pre_infer(cls, user_id: str) -> "Request":
        return cls({HASH_KEY_HEADER: user_id}, user_id, Stage.PRE_INFER, ())

    @classmethod
    def rank(cls, user_id: str, items, keyed: bool) -> "Request":
        header = {HASH_KEY_HEADER: user_id} if keyed else {}
        return cls(header, user_id, Stage.RANK, items)

    @property
    def hash_key(self) -> str | None:
        return self.header.get(HASH_KEY_HEADER)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def validate(self) -> None:
        if self.stage is Stage.PRE_INFER:
            if self.n_items:
                raise ProtocolError("pre-infer requests carry no candidate items")
            if self.hash_key != self.user_id:
                raise ProtocolError("pre-infer requests must be keyed by their user id")
        elif self.n_items == 0:
            raise ProtocolError("rank request without candidate items")
        if self.hash_key is not None and self.hash_key != self.user_id:
            raise ProtocolError("header key and body user_id disagree")

    def to_json(self) -> str:
        body = {"user_id": self.user_id, "stage": self.stage.value}
        if self.stage is Stage.RANK:
            body["items"] = self.n_items
        return json.dumps({"header": self.header, "body": body}, sort_keys=True)


class Kind(str, enum.Enum):
    NORMAL = "normal"
    SPECIAL = "special"


@dataclass(frozen=True)
class Instance:
    instance_id: str
    kind: Kind
    server_id: str


class Policy(str, enum.Enum):
    ROUND_ROBIN = "round_robin"
    LEAST_CONNECTIONS = "least_connections"


class Reason(str, enum.Enum):
    AFFINITY = "affinity"
    ROUND_ROBIN = "round_robin"
    LEAST_CONNECTIONS = "least_connections"


@dataclass(frozen=True)
class RouteDecision:
    instance_id: str
    reason: Reason
    affinity_key_used: str | None = None


class ServiceClass(str, enum.Enum):
    NORMAL = "normal_service"
    SPECIAL = "special_service"


@dataclass(frozen=True)
class Ring:
    points: np.ndarray
    owners: tuple

    @classmethod
    def build(cls, special_ids: Sequence[str], vnodes: int) -> "Ring":
        labels = [f"{sid}#{v}" for sid in special_ids for v in range(vnodes)]
        owners_flat = [sid for sid in special_ids for _ in range(vnodes)]
        points = hash_keys(labels) if labels else np.zeros(0, dtype=np.uint64)
        # Collisions are astronomically unlikely; stable sort on (point, label) keeps it deterministic.
        order = np.lexsort((np.arange(len(labels)), points))
        return cls(points[order], tuple(owners_flat[i] for i in order))

    def lookup(self, key: str) -> str:
        if not len(self.points):
            raise NoCapacityError("no special instances on the ring")
        idx = int(np.searchsorted(self.points, np.uint64(hash_key(key)), side="left"))
        return self.owners[idx % len(self.owners)]

    def lookup_many(self, keys: Sequence[str]) -> list[str]:
        if not len(self.points):
            raise NoCapacityError("no special instances on the ring")
        idx = np.searchsorted(self.points, hash_keys(keys), side="left") % len(self.owners)
        return [self.owners[i] for i in idx]


@dataclass
class InstancePool:
    instances: tuple
    vnodes: int = DEFAULT_VNODES
    per_server_special_cap: int = 2
    policy: Policy = Policy.ROUND_ROBIN
    ring: Ring = None
    rr_cursor: int = 0
    connections: Counter = field(default_factory=Counter)

    def __post_init__(self):
        ids = [i.instance_id for i in self.instances]
        if len(set(ids)) != len(ids):
            raise PoolError("duplicate instance ids")
        per_server = Counter(i.server_id for i in self.instances if i.kind is Kind.SPECIAL)
        crowded = {s: c for s, c in per_server.items() if c > self.per_server_special_cap}
        if crowded:
            raise PoolError(f"special-instance cap {self.per_server_special_cap} exceeded on {crowded}")
        if self.ring is None:
            self.ring = Ring.build(self.special_ids, self.vnodes)

    @classmethod
    def build(cls, n_instances: int, n_special: int, n_servers: int,
              per_server_special_cap: int = 2, vnodes: int = DEFAULT_VNODES,
              policy: Policy = Policy.ROUND_ROBIN) -> "InstancePool":
        """Lay out instances over servers, spreading specials one per server first."""
        if n_special > n_servers * per_server_special_cap:
            raise PoolError(f"{n_special} special instances do not fit on {n_servers} servers "
                            f"at {per_server_special_cap} per server")
        if n_special > n_instances:
            raise PoolError("more special instances than instances")
        instances = []
        for s in range(n_special):
            instances.append(Instance(f"special-{s}", Kind.SPECIAL, f"server-{s % n_servers}"))
        for j in range(n_instances - n_special):
            instances.append(Instance(f"normal-{j}", Kind.NORMAL, f"server-{(n_special + j) % n_servers}"))
        return cls(tuple(instances), vnodes, per_server_special_cap, Policy(policy))

    @property
    def special_ids(self) -> list[str]:
        return [i.instance_id for i in self.instances if i.kind is Kind.SPECIAL]

    @property
    def normal_ids(self) -> list[str]:
        return [i.instance_id for i in self.instances if i.kind is Kind.NORMAL]

    def get(self, instance_id: str) -> Instance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise PoolError(f"unknown instance {instance_id!r}")

    def add_instance(self, instance: Instance) -> "InstancePool":
        if any(i.instance_id == instance.instance_id for i in self.instances):
            raise PoolError(f"instance {instance.instance_id!r} already in pool")
        return replace(self, instances=self.instances + (instance,), ring=None,
                       connections=Counter(self.connections))

    def remove_instance(self, instance_id: str) -> "InstancePool":
        self.get(instance_id)
        kept = tuple(i for i in self.instances if i.instance_id != instance_id)
        conns = Counter({k: v for k, v in self.connections.items() if k != instance_id})
        return replace(self, instances=kept, ring=None, connections=conns)

    def owner(self, key: str) -> str:
        return self.ring.lookup(key)

    def owners(self, keys: Iterable[str]) -> list[str]:
        return self.ring.lookup_many(list(keys))


def classify(pool: InstancePool, req: Request, cfg=None) -> ServiceClass:
    """Keyed requests belong to the special service; everything else is normal."""
    return ServiceClass.SPECIAL if req.hash_key is not None else ServiceClass.NORMAL


def route(pool: InstancePool, req: Request) -> RouteDecision:
    key = req.hash_key
    if key is not None:
        return RouteDecision(pool.owner(key), Reason.AFFINITY, key)
    normals = pool.normal_ids
    if not normals:
        raise NoCapacityError("no normal instances for keyless traffic")
    if pool.policy is Policy.LEAST_CONNECTIONS:
        target = min(normals, key=lambda i: (pool.connections[i], normals.index(i)))
        return RouteDecision(target, Reason.LEAST_CONNECTIONS)
    target = normals[pool.rr_cursor % len(normals)]
    pool.rr_cursor += 1
    return RouteDecision(target, Reason.ROUND_ROBIN)


def add_instance(pool: InstancePool, instance: Instance) -> InstancePool:
    return pool.add_instance(instance)


def remove_instance(pool: InstancePool, instance_id: str) -> InstancePool:
    return pool.remove_instance(instance_id)


def churn_diff(before: InstancePool, after: InstancePool, keys: Sequence[str]) -> list[tuple]:
    """``(key, owner_before, owner_after, moved)`` for every key."""
    a = before.owners(keys)
    b = after.owners(keys)
    return [(k, x, y, x != y) for k, x, y in zip(keys, a, b)]
