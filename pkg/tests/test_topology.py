"""Topology: connectivity extraction, k-ary expansion, rules, transforms.

The rule-set and layer-count checks use independent first-principles
oracles (closed-form counts and brute-force enumeration) rather than the
implementation's own arithmetic.
"""

from __future__ import annotations

import json
import random

import pytest

from miserysim.errors import (
    IncompatibleSpecs,
    LayerConflict,
    NoEntryPoint,
    NoTaggedInstances,
    NoTarget,
    TopologyError,
)
from miserysim.topology import (
    PUBLIC_INTERNET,
    ROLE_ENTRY,
    ROLE_MULTICASTER,
    ROLE_REQUESTS_SERVER,
    ROLE_TARGET,
    FirewallRule,
    MiseryDigraph,
    MiseryDigraphSpec,
    NetworkDescription,
    build_misery_digraph,
    canonical_chain_description,
    classify_rules,
    derive_firewall_rules,
    enabled_path,
    extract_connectivity,
    replacement_id,
    split_by_service,
    union_misery_digraphs,
)


# --- oracles (independent of the implementation) ---------------------------

def oracle_layer_count(n_roots: int, k: int, layer: int) -> int:
    return n_roots * k ** (layer - 1)


def oracle_rule_count(n_roots: int, k: int, d: int,
                      n_transport: int, n_poll: int) -> int:
    """public->roots + every tree edge x transport services + target->leaf
    polls, counted from scratch."""
    public = n_roots * n_transport
    edges = sum(oracle_layer_count(n_roots, k, i + 1) for i in range(1, d))
    polls = oracle_layer_count(n_roots, k, d) * n_poll
    return public + edges * n_transport + polls


def oracle_expand_edges(digraph: MiseryDigraph) -> set[tuple[str, str]]:
    """Edges recomputed from positions alone: global slot s at layer i maps
    to slots [k*off, k*off+k) of the next layer within the same tree."""
    k = digraph.k
    out = set()
    for i in range(1, digraph.d):
        row, nxt = digraph.layer(i), digraph.layer(i + 1)
        width, nxt_width = len(row) // digraph.n_roots, len(nxt) // digraph.n_roots
        for s, node in enumerate(row):
            tree, off = divmod(s, width)
            for j in range(k * off, k * off + k):
                out.add((node, nxt[tree * nxt_width + j]))
    return out


def chain():
    return extract_connectivity(canonical_chain_description(),
                                ("instance_type", "mdg"))


# --- connectivity extraction ------------------------------------------------

def test_extract_canonical_chain():
    conn = chain()
    assert conn.entry_points == ("web",)
    assert conn.target == "db"
    assert conn.role_of("app") == "intermediate"
    ports = sorted(s.port for _, _, s in conn.edges)
    assert ports == [80, 3306]


def test_extract_requires_tagged_instances():
    with pytest.raises(NoTaggedInstances):
        extract_connectivity(canonical_chain_description(), ("instance_type", "nope"))


def test_extract_requires_target_and_entry():
    doc = {
        "instances": [{"id": "a", "tags": {"t": "x"}},
                      {"id": "b", "tags": {"t": "x"}}],
        "rules": [{"src": "a", "dst": "b", "port": 80}],
        "entry_points": ["a"],
        "target": "",
    }
    with pytest.raises(NoTarget):
        extract_connectivity(NetworkDescription.from_json_dict(doc), ("t", "x"))
    doc["entry_points"] = []
    doc["target"] = "b"
    with pytest.raises(NoEntryPoint):
        extract_connectivity(NetworkDescription.from_json_dict(doc), ("t", "x"))


def test_split_by_service_partitions_edges():
    conn = chain()
    parts = split_by_service(conn)
    assert len(parts) == 2
    all_edges = set()
    for part in parts:
        assert len({s for _, _, s in part.edges}) == 1
        assert not (all_edges & part.edges)
        all_edges |= part.edges
    assert all_edges == conn.edges


# --- spec and expansion ------------------------------------------------------

def test_spec_rejects_degenerate_shapes():
    with pytest.raises(TopologyError):
        MiseryDigraphSpec(1, 2)
    with pytest.raises(TopologyError):
        MiseryDigraphSpec(3, 0)


def test_layer_widths_closed_form():
    for d in range(2, 6):
        for k in range(1, 4):
            spec = MiseryDigraphSpec(d, k)
            for layer in range(1, d + 1):
                assert spec.layer_width(layer) == k ** (layer - 1)


def test_expansion_shape_d3_k2():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    assert dg.layer(1) == ("web",)
    assert len(dg.layer(2)) == 2
    assert len(dg.layer(3)) == 4
    assert dg.target == "db"
    # absorbed original intermediate sits at layer-d slot 0
    assert dg.layer(3)[0] == "app"
    assert dg.position("app") == (3, 0)
    assert dg.role_of("web") == ROLE_ENTRY
    assert dg.role_of(dg.layer(2)[0]) == ROLE_MULTICASTER
    assert dg.role_of("app") == ROLE_REQUESTS_SERVER
    assert dg.role_of("db") == ROLE_TARGET


def test_expansion_layer_counts_match_oracle():
    for d in range(2, 6):
        for k in range(1, 4):
            dg = build_misery_digraph(chain(), MiseryDigraphSpec(d, k))
            dg.validate()
            for layer in range(1, d + 1):
                assert len(dg.layer(layer)) == oracle_layer_count(1, k, layer)
            assert len(dg.all_nodes()) == sum(
                oracle_layer_count(1, k, i) for i in range(1, d + 1)) + 1


def test_edges_match_positional_oracle():
    for d, k in ((2, 1), (3, 2), (4, 2), (3, 3), (5, 2)):
        dg = build_misery_digraph(chain(), MiseryDigraphSpec(d, k))
        got = {(src, dst) for src, dst, _ in dg.edges()}
        assert got == oracle_expand_edges(dg)


def test_parent_child_are_mutually_consistent():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(4, 3))
    for i in range(1, dg.d):
        for node in dg.layer(i):
            for child in dg.children_of(node):
                assert dg.parent_of(child) == node
    assert dg.parent_of("web") is None


def test_node_ids_are_unique():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(5, 3))
    nodes = dg.all_nodes()
    assert len(nodes) == len(set(nodes))


# --- firewall rules -----------------------------------------------------------

def test_rule_count_matches_oracle_fig_style():
    # d=3, k=2, one transport service, one poll service:
    # 1 public + 6 edges + 4 polls = 11
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    rules = derive_firewall_rules(dg)
    assert oracle_rule_count(1, 2, 3, 1, 1) == 11
    assert len(rules) == 11
    grouped = classify_rules(rules, dg.target)
    assert len(grouped["public"]) == 1
    assert len(grouped["edges"]) == 6
    assert len(grouped["polling"]) == 4


def test_rule_counts_match_oracle_across_shapes():
    for d in range(2, 6):
        for k in range(1, 4):
            dg = build_misery_digraph(chain(), MiseryDigraphSpec(d, k))
            assert len(derive_firewall_rules(dg)) == oracle_rule_count(1, k, d, 1, 1)


def test_target_has_zero_inbound_rules():
    for d, k in ((3, 2), (4, 3)):
        dg = build_misery_digraph(chain(), MiseryDigraphSpec(d, k))
        rules = derive_firewall_rules(dg)
        assert not [r for r in rules if r.dst == dg.target]


def test_rules_enumerate_by_brute_force():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    rules = derive_firewall_rules(dg)
    expected = {(PUBLIC_INTERNET, "web", 80)}
    expected |= {(src, dst, 80) for src, dst in oracle_expand_edges(dg)}
    expected |= {("db", leaf, 3306) for leaf in dg.layer(3)}
    assert {(r.src, r.dst, r.port) for r in rules} == expected


def test_ruleset_iterates_sorted_and_permits():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    rules = derive_firewall_rules(dg)
    listed = [(r.src, r.dst, r.port) for r in rules]
    assert listed == sorted(listed)
    assert rules.permits(PUBLIC_INTERNET, "web", 80)
    assert not rules.permits(PUBLIC_INTERNET, "web", 81)
    assert not rules.permits("web", "db", 3306)


# --- positional transforms ----------------------------------------------------

def test_swap_exchanges_positions_only():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    a, b = dg.layer(2)
    swapped = dg.with_positions_swapped(a, b)
    assert swapped.position(a) == dg.position(b)
    assert swapped.position(b) == dg.position(a)
    assert sorted(swapped.all_nodes()) == sorted(dg.all_nodes())
    # original is untouched (pure transform)
    assert dg.layer(2) == (a, b)


def test_swap_rewires_children_with_position():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    a, b = dg.layer(2)
    swapped = dg.with_positions_swapped(a, b)
    assert swapped.children_of(a) == dg.children_of(b)
    assert swapped.children_of(b) == dg.children_of(a)


def test_swap_rejects_cross_layer_and_boundary_layers():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(4, 2))
    with pytest.raises(LayerConflict):
        dg.with_positions_swapped(dg.layer(2)[0], dg.layer(3)[0])
    with pytest.raises(TopologyError):
        dg.with_positions_swapped(dg.layer(2)[0], dg.layer(2)[0])


def test_replace_preserves_position_and_moves_enabled_leaf():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    pos = dg.position("app")
    replaced = dg.with_node_replaced("app", replacement_id(3, 0, 1))
    assert replaced.position("L3.s0.g1") == pos
    assert "app" not in replaced.all_nodes()
    assert replaced.enabled_leaf == "L3.s0.g1"
    with pytest.raises(TopologyError):
        dg.with_node_replaced("web", "other")
    with pytest.raises(TopologyError):
        dg.with_node_replaced("app", dg.layer(2)[0])


def test_enabled_path_walks_root_to_designated_leaf():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(4, 2))
    path = enabled_path(dg)
    assert path[0] == "web"
    assert path[-1] == dg.enabled_leaf
    assert len(path) == 4
    for parent, child in zip(path, path[1:]):
        assert child in dg.children_of(parent)


def test_enabled_path_follows_swaps():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    a, b = dg.layer(2)
    on_path = enabled_path(dg)[1]
    swapped = dg.with_positions_swapped(a, b)
    other = b if on_path == a else a
    assert enabled_path(swapped)[1] == other


def test_random_transform_sequences_preserve_invariants():
    rng = random.Random(42)
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(4, 2))
    gen = 0
    for _ in range(200):
        layer = rng.choice([2, 3, 4])
        row = dg.layer(layer)
        if rng.random() < 0.5 and len(row) >= 2:
            u, v = rng.sample(list(row), 2)
            dg = dg.with_positions_swapped(u, v)
        else:
            gen += 1
            old = rng.choice(list(row))
            _, slot = dg.position(old)
            dg = dg.with_node_replaced(old, f"fresh.g{gen}.{slot}")
        dg.validate()
        assert {(s, t) for s, t, _ in dg.edges()} == oracle_expand_edges(dg)
        assert len(derive_firewall_rules(dg)) == oracle_rule_count(1, 2, 4, 1, 1)


# --- serialization ------------------------------------------------------------

def test_json_round_trip():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    doc = json.loads(json.dumps(dg.to_json_dict()))
    back = MiseryDigraph.from_json_dict(doc)
    assert back.to_json_dict() == dg.to_json_dict()
    assert back.layers == dg.layers
    assert back.spec == dg.spec
    assert back.target == dg.target
    assert back.tree_services == dg.tree_services
    assert back.poll_services == dg.poll_services
    assert back.enabled_leaf == dg.enabled_leaf


def test_dot_output_mentions_every_node_and_edge():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    dot = dg.to_dot()
    assert dot.startswith("digraph")
    for node in dg.all_nodes():
        assert f'"{node}"' in dot
    for src, dst, _ in dg.edges():
        assert f'"{src}" -> "{dst}"' in dot


# --- union ---------------------------------------------------------------------

def two_entry_conn():
    doc = {
        "instances": [
            {"id": "web1", "tags": {"t": "x"}},
            {"id": "web2", "tags": {"t": "x"}},
            {"id": "db", "tags": {"t": "x"}},
        ],
        "rules": [
            {"src": "web1", "dst": "db", "port": 80},
            {"src": "web2", "dst": "db", "port": 443},
        ],
        "entry_points": ["web1", "web2"],
        "target": "db",
    }
    return extract_connectivity(NetworkDescription.from_json_dict(doc), ("t", "x"))


def test_multi_entry_forest_prefixes_decoys():
    dg = build_misery_digraph(two_entry_conn(), MiseryDigraphSpec(3, 2))
    assert dg.roots == ("web1", "web2")
    assert len(dg.layer(2)) == 4
    assert any(n.startswith("web1~") for n in dg.layer(2))
    assert any(n.startswith("web2~") for n in dg.layer(2))
    # transports are per tree (one service each) while the target polls every
    # leaf on the union of its inbound services (two here):
    # 2 public + 2x6 edges + 8x2 polls
    assert len(derive_firewall_rules(dg)) == 2 + 12 + 16


def both_services_conn(entries):
    doc = {
        "instances": [{"id": e, "tags": {"t": "x"}} for e in entries]
        + [{"id": "db", "tags": {"t": "x"}}],
        "rules": [{"src": e, "dst": "db", "port": p}
                  for e in entries for p in (80, 443)],
        "entry_points": list(entries),
        "target": "db",
    }
    return extract_connectivity(NetworkDescription.from_json_dict(doc), ("t", "x"))


def test_union_merges_parallel_service_trees():
    conn = both_services_conn(("web1", "web2"))
    parts = split_by_service(conn)
    digraphs = [build_misery_digraph(p, MiseryDigraphSpec(3, 2)) for p in parts]
    merged = union_misery_digraphs(digraphs)
    merged.validate()
    reversed_merge = union_misery_digraphs(list(reversed(digraphs)))
    whole_edges = {(s, t) for s, t, _ in merged.edges()}
    assert whole_edges == set.union(
        *({(s, t) for s, t, _ in dg.edges()} for dg in digraphs))
    assert reversed_merge.layers == merged.layers
    assert merged.roots == ("web1", "web2")
    for tree in range(2):
        assert sorted(s.port for s in merged.services_of_tree(tree)) == [80, 443]


def test_union_juxtaposes_distinct_roots():
    a = build_misery_digraph(both_services_conn(("web1", "web2")),
                             MiseryDigraphSpec(3, 2))
    b = build_misery_digraph(both_services_conn(("web1", "web3")),
                             MiseryDigraphSpec(3, 2))
    merged = union_misery_digraphs([a, b])
    merged.validate()
    assert merged.roots == ("web1", "web2", "web3")
    assert len(merged.layer(3)) == 12
    got = {(s, t) for s, t, _ in merged.edges()}
    assert got == ({(s, t) for s, t, _ in a.edges()}
                   | {(s, t) for s, t, _ in b.edges()})


def test_union_rejects_colliding_decoy_namespaces():
    # two single-entry builds both name their decoys L2.s0.g0 etc; merging
    # them as a forest would place one id under two roots
    parts = split_by_service(two_entry_conn())
    digraphs = [build_misery_digraph(p, MiseryDigraphSpec(3, 2)) for p in parts]
    with pytest.raises(LayerConflict):
        union_misery_digraphs(digraphs)


def test_union_rejects_diverged_tree():
    dg = build_misery_digraph(chain(), MiseryDigraphSpec(3, 2))
    mutated = dg.with_node_replaced(dg.layer(2)[0], "L2.s0.g1")
    with pytest.raises(LayerConflict):
        union_misery_digraphs([dg, mutated])


def test_union_rejects_mismatched_specs():
    conn = two_entry_conn()
    parts = split_by_service(conn)
    a = build_misery_digraph(parts[0], MiseryDigraphSpec(3, 2))
    b = build_misery_digraph(parts[1], MiseryDigraphSpec(4, 2))
    with pytest.raises(IncompatibleSpecs):
        union_misery_digraphs([a, b])


def test_union_merges_same_root_service_labels():
    doc = {
        "instances": [
            {"id": "web", "tags": {"t": "x"}},
            {"id": "db", "tags": {"t": "x"}},
        ],
        "rules": [
            {"src": "web", "dst": "db", "port": 80},
            {"src": "web", "dst": "db", "port": 443},
        ],
        "entry_points": ["web"],
        "target": "db",
    }
    conn = extract_connectivity(NetworkDescription.from_json_dict(doc), ("t", "x"))
    parts = split_by_service(conn)
    digraphs = [build_misery_digraph(p, MiseryDigraphSpec(3, 2)) for p in parts]
    merged = union_misery_digraphs(digraphs)
    assert merged.n_roots == 1
    ports = sorted(s.port for s in merged.services_of_tree(0))
    assert ports == [80, 443]
    # both services ride every edge and both are polled (the entry feeds the
    # target directly here, so the inbound-service union is {80, 443})
    assert len(derive_firewall_rules(merged)) == oracle_rule_count(1, 2, 3, 2, 2)
