"""Deployment: from a digraph to a running set of instances and runtimes.

deploy_misery provisions one instance per digraph node (plus the warm pool),
applies the derived firewall rules, wires up node runtimes with their
endpoint bindings and Address Server records, and starts the Polling Server.
deploy_normal builds the three-node baseline chain the misery digraph is a
drop-in replacement for.  Both are generator tasks for Simulation.spawn; the
task future resolves to a Deployment.

The Deployment object is also the mutation surface for the Movement Manager:
a single digraph cell plus attach/detach of node runtimes, and a global
consistency sweep comparing live address tables against the digraph.
"""

from __future__ import annotations

import os

from .addresses import AddressServer
from .cloud import CloudProvider, ImageKind, Instance, min_pool_requirements
from .errors import TopologyError
from .eventlog import EventLog
from .multicaster import AddressTable, ForwardPolicy, MulticasterNode
from .sim import Future, Simulation
from .target import (
    AppServerNode,
    BackendStore,
    DatabaseServerNode,
    PollingServerNode,
    RequestRegistry,
    RequestsServerNode,
)
from .topology import (
    PUBLIC_INTERNET,
    FirewallRule,
    FirewallRuleSet,
    MiseryDigraph,
    derive_firewall_rules,
)

NORMAL_CHAIN = ("web", "app", "db")


def swappable_image_counts(digraph: MiseryDigraph) -> dict[ImageKind, int]:
    """Running instance counts over the layers movement may reset (2..d)."""
    counts: dict[ImageKind, int] = {}
    for layer_no in range(2, digraph.d + 1):
        kind = image_for_layer(digraph, layer_no)
        counts[kind] = counts.get(kind, 0) + len(digraph.layer(layer_no))
    return counts


def gather(futures: list[Future]) -> Future:
    """Future resolving to all results in order; rejects on the first failure."""
    out = Future()
    results: list = [None] * len(futures)
    remaining = len(futures)
    if remaining == 0:
        out.resolve(results)
        return out

    def make_cb(index: int):
        def cb(fut: Future) -> None:
            nonlocal remaining
            if fut.failed:
                out.reject(fut.exception())
                return
            results[index] = fut.result()
            remaining -= 1
            if remaining == 0:
                out.resolve(results)
        return cb

    for index, fut in enumerate(futures):
        fut.add_done_callback(make_cb(index))
    return out


def image_for_layer(digraph: MiseryDigraph, layer: int) -> ImageKind:
    if layer == digraph.d + 1:
        return ImageKind.POLLING_TARGET
    if layer == digraph.d:
        return ImageKind.REQUESTS_SERVER
    return ImageKind.MULTICASTER


class Deployment:
    """Live view of one deployed topology: instances, runtimes, store."""

    def __init__(self, sim: Simulation, provider: CloudProvider,
                 addresses: AddressServer, log: EventLog, counters: dict, *,
                 u: float, m: float, base_tags: dict[str, str],
                 registry_dir: str | None = None, fsync: bool = False):
        self.sim = sim
        self.provider = provider
        self.addresses = addresses
        self.log = log
        self.counters = counters
        self.u = u
        self.m = m
        self.base_tags = dict(base_tags)
        self.registry_dir = registry_dir
        self.fsync = fsync
        self.digraph: MiseryDigraph | None = None
        self.runtimes: dict[str, object] = {}
        self.node_instances: dict[str, Instance] = {}
        self.store = BackendStore()
        self.ps: PollingServerNode | None = None
        self.entry_addresses: dict[str, str] = {}

    @property
    def entry_address(self) -> str:
        return next(iter(self.entry_addresses.values()))

    def set_digraph(self, digraph: MiseryDigraph) -> None:
        self.digraph = digraph

    # -- runtime construction ------------------------------------------------

    def _child_entries(self, node: str) -> list[tuple[str, str]]:
        return [(child, self.provider.instance(child).address)
                for child in self.digraph.children_of(node)]

    def _layer_d_entries(self) -> list[tuple[str, str]]:
        return [(leaf, self.provider.instance(leaf).address)
                for leaf in self.digraph.layer(self.digraph.d)]

    def _new_registry(self, node: str) -> RequestRegistry:
        if self.registry_dir is None:
            return RequestRegistry(None)
        return RequestRegistry(os.path.join(self.registry_dir, f"{node}.log"),
                               fsync=self.fsync)

    def _transport_ports(self, node: str) -> list[int]:
        tree = self.digraph.tree_of(node)
        return [s.port for s in self.digraph.services_of_tree(tree)]

    def attach_node(self, node: str) -> None:
        """Build and wire the runtime for one digraph node (initial deploy
        and movement replacements go through the same path)."""
        digraph = self.digraph
        layer = digraph.layer_of(node)
        self.node_instances[node] = self.provider.instance(node)
        if layer < digraph.d:
            runtime = MulticasterNode(
                self.sim, self.provider, self.log, node, ForwardPolicy(self.u),
                self.counters, layer=layer, is_entry=(layer == 1),
                table=AddressTable(1, tuple(self._child_entries(node))))
            handler = runtime.on_http if layer == 1 else runtime.on_request
            for port in self._transport_ports(node):
                self.provider.bind(node, port, on_request=handler)
            self.addresses.register(node, self._child_entries(node))
            self.addresses.subscribe(node, runtime.apply_update)
        elif layer == digraph.d:
            runtime = RequestsServerNode(
                self.sim, self.provider, self.log, node,
                self._new_registry(node), self.u, self.counters)
            for port in self._transport_ports(node):
                self.provider.bind(node, port, on_request=runtime.on_request)
            for service in digraph.poll_services:
                self.provider.bind(node, service.port,
                                   on_channel=runtime.on_poll_channel)
        else:
            raise TopologyError(f"cannot attach {node!r} at layer {layer}")
        self.runtimes[node] = runtime

    def detach_node(self, node: str) -> None:
        runtime = self.runtimes.pop(node, None)
        self.node_instances.pop(node, None)
        if isinstance(runtime, RequestsServerNode):
            runtime.registry.close()

    def attach_target(self) -> None:
        digraph = self.digraph
        target = digraph.target
        self.node_instances[target] = self.provider.instance(target)
        ps = PollingServerNode(
            self.sim, self.provider, self.log, target, self.store, self.m,
            digraph.poll_services[0].port, self.counters)
        ps.set_record(self._layer_d_entries())
        self.addresses.register(target, self._layer_d_entries())
        self.addresses.subscribe(target, lambda record: ps.set_record(record.entries))
        self.ps = ps
        self.runtimes[target] = ps
        ps.start()

    # -- global consistency sweep ---------------------------------------------

    def consistency_check(self) -> list[str]:
        """Compare every runtime's routing view against the digraph; returns
        human-readable mismatches (empty when globally consistent)."""
        digraph = self.digraph
        problems: list[str] = []
        if digraph is None:
            return problems
        for layer_no in range(1, digraph.d):
            for node in digraph.layer(layer_no):
                expected = tuple(self._child_entries(node))
                runtime = self.runtimes.get(node)
                if runtime is None:
                    problems.append(f"{node}: no runtime attached")
                    continue
                if tuple(runtime.table.children) != expected:
                    problems.append(
                        f"{node}: table {runtime.table.children} != {expected}")
                record = self.addresses.lookup(node)
                if tuple(record.entries) != expected:
                    problems.append(
                        f"{node}: address record {record.entries} != {expected}")
        expected = tuple(self._layer_d_entries())
        if self.ps is not None and tuple(self.ps.endpoints) != expected:
            problems.append(
                f"{digraph.target}: poll endpoints {self.ps.endpoints} != {expected}")
        record = self.addresses.lookup(digraph.target)
        if tuple(record.entries) != expected:
            problems.append(
                f"{digraph.target}: address record {record.entries} != {expected}")
        return problems


def deploy_misery(sim: Simulation, provider: CloudProvider,
                  addresses: AddressServer, log: EventLog, counters: dict,
                  digraph: MiseryDigraph, *, u: float, m: float, s: int,
                  base_tags: dict[str, str] | None = None,
                  registry_dir: str | None = None, fsync: bool = False):
    """Generator task: provision, rule, wire and start a misery digraph."""
    digraph.validate()
    base_tags = dict(base_tags or {"instance_type": "mdg"})
    deployment = Deployment(sim, provider, addresses, log, counters,
                            u=u, m=m, base_tags=base_tags,
                            registry_dir=registry_dir, fsync=fsync)
    deployment.set_digraph(digraph)

    ready = []
    for node in digraph.all_nodes():
        layer = digraph.layer_of(node)
        inst = provider.create_instance(
            image_for_layer(digraph, layer), instance_id=node,
            tags={**base_tags, "role": digraph.role_of(node)})
        ready.append(inst.ready)

    pool = provider.configure_pool(s)
    standbys = pool.fill(min_pool_requirements(swappable_image_counts(digraph), s))

    # spares provision in parallel with the topology, so waiting for them
    # costs nothing and completion means the pool holds its minimums
    yield gather(ready + [inst.ready for inst in standbys])

    provider.apply_rules(derive_firewall_rules(digraph))
    for layer_no in range(1, digraph.d + 1):
        for node in digraph.layer(layer_no):
            deployment.attach_node(node)
    deployment.attach_target()
    for root in digraph.roots:
        deployment.entry_addresses[root] = provider.instance(root).address
    log.emit(sim.now, "deploy.complete", instance=None,
             detail={"nodes": len(digraph.all_nodes()), "pool": s})
    return deployment


def deploy_normal(sim: Simulation, provider: CloudProvider,
                  addresses: AddressServer, log: EventLog, counters: dict, *,
                  u: float, base_tags: dict[str, str] | None = None):
    """Generator task: the baseline entry -> app -> database chain (d=0)."""
    base_tags = dict(base_tags or {"instance_type": "normal"})
    deployment = Deployment(sim, provider, addresses, log, counters,
                            u=u, m=0.1, base_tags=base_tags)
    web, app, db = NORMAL_CHAIN
    roles = {web: "entry-point", app: "intermediate", db: "target"}
    images = {web: ImageKind.MULTICASTER, app: ImageKind.REQUESTS_SERVER,
              db: ImageKind.POLLING_TARGET}
    ready = []
    for node in NORMAL_CHAIN:
        inst = provider.create_instance(images[node], instance_id=node,
                                        tags={**base_tags, "role": roles[node]})
        ready.append(inst.ready)
    yield gather(ready)

    provider.apply_rules(FirewallRuleSet(frozenset({
        FirewallRule(PUBLIC_INTERNET, web, 80),
        FirewallRule(web, app, 80),
        FirewallRule(app, db, 3306),
    })))

    app_address = provider.instance(app).address
    db_address = provider.instance(db).address
    web_node = MulticasterNode(
        sim, provider, log, web, ForwardPolicy(u), counters, layer=1,
        is_entry=True, table=AddressTable(1, ((app, app_address),)))
    app_node = AppServerNode(sim, provider, log, app, db_address, 3306, u,
                             counters)
    db_node = DatabaseServerNode(sim, provider, log, db, deployment.store,
                                 counters)
    provider.bind(web, 80, on_request=web_node.on_http)
    provider.bind(app, 80, on_request=app_node.on_request)
    provider.bind(db, 3306, on_channel=db_node.on_channel)
    addresses.register(web, [(app, app_address)])
    addresses.subscribe(web, web_node.apply_update)

    deployment.runtimes = {web: web_node, app: app_node, db: db_node}
    deployment.node_instances = {n: provider.instance(n) for n in NORMAL_CHAIN}
    deployment.entry_addresses[web] = provider.instance(web).address
    log.emit(sim.now, "deploy.complete", instance=None,
             detail={"nodes": 3, "pool": 0})
    return deployment
