from __future__ import annotations

import pytest

from physreg.scene_graph import (
    SceneGraph, approximate_dag, infer_contacts_geometric, load_contacts, save_contacts,
)

from .conftest import placed


def _g(n, *edges):
    return SceneGraph(n, frozenset(edges))


def test_chain():
    d = approximate_dag(_g(3, (0, 1), (1, 2)))
    assert d.order == (0, 1, 2)
    assert d.parents[1] == {0} and d.parents[2] == {1}


def test_triangle():
    d = approximate_dag(_g(3, (0, 1), (0, 2), (1, 2)))
    assert d.order == (0, 1, 2)
    assert d.parents[1] == {0} and d.parents[2] == {0, 1}


def test_isolated_node_attached_to_environment():
    d = approximate_dag(_g(4, (0, 1), (1, 2)))
    assert d.order == (0, 1, 2, 3)
    assert d.parents[3] == {0}


def test_dag_is_acyclic_on_cycle():
    d = approximate_dag(_g(4, (0, 1), (1, 2), (2, 3), (3, 1)))
    rank = {v: k for k, v in enumerate(d.order)}
    assert all(rank[p] < rank[c] for p, c in d.edges())


def test_load_contacts(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("0 1\n1 2\n")
    assert load_contacts(p).edges == {(0, 1), (1, 2)}
    p.write_text("")
    assert load_contacts(p).edges == frozenset()
    p.write_text("1 1\n")
    with pytest.raises(ValueError, match="self-loop"):
        load_contacts(p)
    p.write_text("0 x\n")
    with pytest.raises(ValueError, match=":1:"):
        load_contacts(p)


def test_contacts_round_trip(tmp_path):
    g = _g(4, (0, 1), (2, 1), (0, 3))
    save_contacts(g, tmp_path / "c.txt")
    assert load_contacts(tmp_path / "c.txt", 4) == g


def test_geometric_contacts_stack(unit_cube, floor):
    bodies = {1: unit_cube, 2: unit_cube}
    g = infer_contacts_geometric(bodies, {1: placed((0, 0, 0.5)), 2: placed((0, 0, 1.5))}, floor)
    assert g.edges == {(0, 1), (1, 2)}


def test_geometric_contacts_floating(unit_cube, floor):
    g = infer_contacts_geometric({1: unit_cube}, {1: placed((0, 0, 1.0))}, floor)
    assert g.edges == frozenset()


def test_geometric_contacts_ring_has_cycle(unit_cube, floor):
    poses = {1: placed((0, 0, 0.5)), 2: placed((1, 0, 0.5)), 3: placed((0.5, 1, 0.5))}
    g = infer_contacts_geometric({i: unit_cube for i in poses}, poses, floor)
    assert {(1, 2), (1, 3), (2, 3)} <= g.edges
    assert {(0, 1), (0, 2), (0, 3)} <= g.edges
