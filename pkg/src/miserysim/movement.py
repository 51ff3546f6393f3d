"""Movement Manager: the periodic transformation process.

Each period r it selects one layer in 2..d and two of that layer's nodes
uniformly at random, switches their positions (parents and children exchange,
firewall rules rewritten in one transaction), resets both nodes from the warm
instance pool (same image, fresh id and disk, old instance terminated), and
then writes the changed child tables to the Address Server.  Parents keep
routing on their stale tables until their subscription callback lands, so
every cycle opens a short inconsistency window; when the cycle hits layer 2
the window takes out every path at once, which is where failed requests
cluster under load.  Layer 1 and the target are never selected.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .addresses import AddressServer
from .cloud import CloudProvider, ImageKind, Instance
from .errors import (
    CloudError,
    ConcurrentMutation,
    NoEligibleLayer,
    StorageFailure,
    UnknownOwner,
)
from .eventlog import EventLog
from .sim import PRIO_CONTROL, Simulation
from .topology import MiseryDigraph, derive_firewall_rules, replacement_id


@dataclass(frozen=True)
class MovementSchedule:
    """Period and seed for the transformation process."""

    r: float
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.r <= 0:
            raise ValueError(f"period r must be positive, got {self.r}")

    def make_rng(self) -> random.Random:
        return random.Random(f"{self.rng_seed}/movement")


@dataclass(frozen=True)
class SwitchOp:
    layer: int
    nodes: tuple[str, str]


@dataclass(frozen=True)
class ResetOp:
    old: str
    replacement: Instance
    image: ImageKind


@dataclass
class MovementEvent:
    t: float
    cycle: int
    op: str                  # "switch" | "reset"
    layer: int
    nodes: list[str]
    new_ids: list[str] = field(default_factory=list)
    versions: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"t": self.t, "cycle": self.cycle, "op": self.op,
                "layer": self.layer, "nodes": list(self.nodes),
                "new_ids": list(self.new_ids), "versions": dict(self.versions)}


def select_transformation(digraph: MiseryDigraph, rng: random.Random) -> SwitchOp:
    """Uniform layer from the eligible middle layers, then a uniform node
    pair without replacement from that layer."""
    eligible = [a for a in range(2, digraph.d + 1) if len(digraph.layer(a)) >= 2]
    if not eligible:
        raise NoEligibleLayer(
            f"no layer in 2..{digraph.d} has two nodes (k={digraph.k})")
    layer = rng.choice(eligible)
    u, v = rng.sample(list(digraph.layer(layer)), 2)
    return SwitchOp(layer, (u, v))


class MovementManager:
    """Single writer for topology mutations; cycles never overlap."""

    def __init__(self, sim: Simulation, provider: CloudProvider,
                 addresses: AddressServer, deployment, schedule: MovementSchedule,
                 log: EventLog, counters: dict):
        self.sim = sim
        self.provider = provider
        self.addresses = addresses
        self.deployment = deployment
        self.schedule = schedule
        self.log = log
        self.counters = counters
        self._rng = sim.rng("movement")
        self._busy = False
        self._generation: dict[tuple[int, int, int], int] = {}
        self._retry_owners: set[str] = set()
        self.cycle_no = 0
        self.events: list[MovementEvent] = []
        self._task = None

    # -- scheduling --------------------------------------------------------

    def start(self, epoch: float, j: float) -> None:
        """Run a cycle every r on the virtual clock until epoch + j."""
        self._task = self.sim.spawn(self._loop(epoch, j), priority=PRIO_CONTROL)

    def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            self._task = None

    def _loop(self, epoch: float, j: float):
        horizon = epoch + j
        next_t = epoch + self.schedule.r
        while next_t <= horizon + 1e-9:
            delay = next_t - self.sim.now
            if delay > 0:
                yield delay
            yield from self._cycle()
            next_t = max(next_t + self.schedule.r, self.sim.now)

    def trigger(self):
        """Run one cycle immediately; returns the task future (for tests)."""
        return self.sim.spawn(self._cycle(), priority=PRIO_CONTROL).future

    # -- the cycle -----------------------------------------------------------

    def _cycle(self):
        if self._busy:
            raise ConcurrentMutation("transformation already in flight")
        self._busy = True
        try:
            yield from self._run_cycle()
        finally:
            self._busy = False

    def _run_cycle(self):
        self.cycle_no += 1
        cycle = self.cycle_no
        self._flush_retries()
        digraph = self.deployment.digraph
        try:
            op = select_transformation(digraph, self._rng)
        except NoEligibleLayer:
            self.counters["skipped_cycles"] = self.counters.get(
                "skipped_cycles", 0) + 1
            return
        # Don't start a switch the pool cannot finish: a reset stalled on
        # provisioning would leave the switched layer routing nowhere for the
        # whole provisioning latency.
        image = (ImageKind.REQUESTS_SERVER if op.layer == digraph.d
                 else ImageKind.MULTICASTER)
        pool = self.provider.pool
        if pool is not None and pool.s > 0 and pool.ready_count(image) < 2:
            self.counters["skipped_pool_short"] = self.counters.get(
                "skipped_pool_short", 0) + 1
            self.log.emit(self.sim.now, "movement.skip", instance=None,
                          detail={"cycle": cycle, "layer": op.layer,
                                  "image": image.value})
            return
        started = self.sim.now
        try:
            yield from self._execute_switch(cycle, op)
            new_ids = []
            for old in op.nodes:
                new_ids.append((yield from self._execute_reset(old)))
            versions = yield from self._propagate(op.layer, new_ids)
        except (CloudError, StorageFailure) as err:
            # Abort cleanly; the digraph cell always reflects applied steps,
            # so the next cycle starts from a consistent state.
            self.counters["aborted_cycles"] = self.counters.get(
                "aborted_cycles", 0) + 1
            self.log.emit(self.sim.now, "movement.abort", instance=None,
                          detail={"cycle": cycle, "error": type(err).__name__})
            self._repair_layer_tables(op.layer)
            return
        for old, new in zip(op.nodes, new_ids):
            self._emit(MovementEvent(self.sim.now, cycle, "reset", op.layer,
                                     [old], [new], dict(versions)))
        self.counters["transformations"] = self.counters.get(
            "transformations", 0) + 1
        self.log.emit(self.sim.now, "movement.window", instance=None,
                      detail={"cycle": cycle, "layer": op.layer,
                              "t0": started,
                              "t1": self.sim.now + self.addresses.notify_bound,
                              "nodes": list(op.nodes), "new_ids": new_ids})

    def _emit(self, event: MovementEvent) -> None:
        self.events.append(event)
        payload = event.to_dict()
        payload.pop("t")
        self.log.emit(event.t, "movement", instance=None, **payload)

    def _rule_delta(self, before: MiseryDigraph, after: MiseryDigraph):
        old = set(derive_firewall_rules(before).rules)
        new = set(derive_firewall_rules(after).rules)
        revoke = sorted((r.src, r.dst, r.port) for r in old - new)
        grant = sorted((r.src, r.dst, r.port) for r in new - old)
        return revoke, grant

    def _execute_switch(self, cycle: int, op: SwitchOp):
        digraph = self.deployment.digraph
        u, v = op.nodes
        swapped = digraph.with_positions_swapped(u, v)
        yield self.provider.api_latency()
        revoke, grant = self._rule_delta(digraph, swapped)
        self.provider.rewrite_rules(revoke, grant)
        self.deployment.set_digraph(swapped)
        self._emit(MovementEvent(self.sim.now, cycle, "switch", op.layer,
                                 [u, v]))

    def _execute_reset(self, old: str):
        """Replace one node with a pool instance at its current position."""
        digraph = self.deployment.digraph
        layer, slot = digraph.position(old)
        width = digraph.spec.layer_width(layer)
        tree, offset = divmod(slot, width)
        image = (ImageKind.REQUESTS_SERVER if layer == digraph.d
                 else ImageKind.MULTICASTER)
        instance = yield self.provider.pool.allocate(image)
        yield self.provider.api_latency()
        key = (tree, layer, offset)
        self._generation[key] = self._generation.get(key, 0) + 1
        prefix = f"{digraph.roots[tree]}~" if digraph.n_roots > 1 else ""
        new_id = replacement_id(layer, offset, self._generation[key], prefix)
        self.provider.adopt_instance(
            instance.id, new_id,
            tags={"role": digraph.role_of(old), **self.deployment.base_tags})
        replaced = digraph.with_node_replaced(old, new_id)
        revoke, grant = self._rule_delta(digraph, replaced)
        self.provider.rewrite_rules(revoke, grant)
        self.deployment.set_digraph(replaced)
        self.deployment.attach_node(new_id)
        yield self.provider.api_latency()
        self.provider.terminate_instance(old)
        self.deployment.detach_node(old)
        self.addresses.remove(old)
        self.counters["resets"] = self.counters.get("resets", 0) + 1
        return new_id

    def _propagate(self, layer: int, new_ids: list[str]):
        """Push the changed child tables: the distinct parents of the replaced
        nodes, plus the target's layer-d endpoint list when layer == d."""
        digraph = self.deployment.digraph
        owners = []
        for new in new_ids:
            parent = digraph.parent_of(new)
            if parent is not None and parent not in owners:
                owners.append(parent)
        yield self.provider.api_latency()
        versions: dict[str, int] = {}
        for owner in owners:
            version = self._update_owner(owner)
            if version is not None:
                versions[owner] = version
        if layer == digraph.d:
            version = self._update_target_record()
            if version is not None:
                versions[digraph.target] = version
        return versions

    def _entries_for(self, owner: str) -> list[tuple[str, str]]:
        digraph = self.deployment.digraph
        if owner == digraph.target:
            children = digraph.layer(digraph.d)
        else:
            children = digraph.children_of(owner)
        return [(child, self.provider.instance(child).address)
                for child in children]

    def _update_owner(self, owner: str) -> int | None:
        try:
            record = self.addresses.update(owner, self._entries_for(owner))
        except (UnknownOwner, CloudError):
            self._retry_owners.add(owner)
            self.counters["propagation_retries"] = self.counters.get(
                "propagation_retries", 0) + 1
            return None
        return record.version

    def _update_target_record(self) -> int | None:
        return self._update_owner(self.deployment.digraph.target)

    def _repair_layer_tables(self, layer: int) -> None:
        """After an abort, whatever steps did apply are already in the digraph
        cell; re-deriving the tables around the touched layer puts routing
        back in step with the rules instead of waiting for a later cycle to
        happen to hit the same nodes.  A switch changes the parents' child
        assignment and the swapped nodes' own children; an aborted reset
        leaves the swapped nodes running their old runtimes, so both layers
        need a push."""
        digraph = self.deployment.digraph
        for owner in digraph.layer(layer - 1):
            self._update_owner(owner)
        if layer < digraph.d:
            for owner in digraph.layer(layer):
                self._update_owner(owner)
        else:
            self._update_target_record()

    def _flush_retries(self) -> None:
        retries, self._retry_owners = self._retry_owners, set()
        digraph = self.deployment.digraph
        known = set(digraph.all_nodes())
        for owner in sorted(retries):
            if owner in known:
                self._update_owner(owner)
