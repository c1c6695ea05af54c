import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SHOP_DOC, SHOP_ROWS, build_db, star_doc, write_db
from rdbfm.errors import ConsistencyError, ParseError
from rdbfm.graph import Direction, build_graph, load_graph, relation_metadata_text, save_graph
from rdbfm.ingest import TIME_NEG_INF, load_manifest, load_tables


def _five(tmp_path, fks):
    rows = {"users": [[i, "no"] for i in range(3)],
            "purchases": [[i, fk, 1.0, 100 + i] for i, fk in enumerate(fks)]}
    return build_db(tmp_path, star_doc(), rows)


def test_forward_and_reverse_edges(tmp_path):
    g = _five(tmp_path, [0, 0, 1, 2, 2])
    assert g.node_types == [("users", 3), ("purchases", 5)]
    fwd, rev = g.relations
    assert fwd.direction is Direction.FORWARD and rev.direction is Direction.REVERSED
    assert fwd.name == "purchases.user_id→users"
    assert rev.name == "users←purchases.user_id"
    assert fwd.edge_list().tolist() == [[0, 0], [1, 0], [2, 1], [3, 2], [4, 2]]
    assert rev.neighbors(0).tolist() == [0, 1]
    assert rev.neighbors(1).tolist() == [2]
    assert [len(rev.neighbors(u)) for u in range(3)] == [2, 1, 2]
    assert fwd.num_edges == rev.num_edges == 5


def test_all_null_fk_column_has_no_edges(tmp_path):
    g = _five(tmp_path, [None] * 5)
    assert all(r.num_edges == 0 for r in g.relations)
    assert g.relations[1].csr_offsets.tolist() == [0, 0, 0, 0]


def test_untimed_tables_get_minus_infinity(tmp_path):
    g = _five(tmp_path, [0, 1, 2, 0, 1])
    assert (g.node_times[0] == TIME_NEG_INF).all()
    assert g.node_times[1].tolist() == [100, 101, 102, 103, 104]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(0, 5)), max_size=25))
def test_reverse_is_transpose(tmp_path_factory, fks):
    rows = {"users": [[i, "no"] for i in range(6)],
            "purchases": [[i, fk, 0.0, i] for i, fk in enumerate(fks)]}
    g = build_db(tmp_path_factory.mktemp("g"), star_doc(), rows)
    fwd, rev = g.relations
    a = sorted(map(tuple, fwd.edge_list().tolist()))
    b = sorted((d, s) for s, d in rev.edge_list().tolist())
    assert a == b
    assert a == sorted((i, fk) for i, fk in enumerate(fks) if fk is not None)
    # CSR targets within a source are sorted
    for u in range(6):
        n = rev.neighbors(u)
        assert (np.diff(n) > 0).all()


def test_metadata_text(tmp_path):
    g = build_db(tmp_path, SHOP_DOC, {"users": SHOP_ROWS["users"], "purchases": SHOP_ROWS["purchases"][:5]})
    fwd, rev = g.relations
    assert relation_metadata_text(fwd, g.manifest) == "edge from purchases via user_id to users"
    assert relation_metadata_text(rev, g.manifest) == "reverse of edge from purchases via user_id to users"


def test_self_reference(tmp_path):
    doc = {"name": "org", "tables": [{"name": "employees", "columns": [
        {"name": "id", "kind": "primary_key"},
        {"name": "manager_id", "kind": "foreign_key", "fk_target": "employees.id"}]}],
        "relations": [{"fk_table": "employees", "fk_column": "manager_id", "pk_table": "employees", "pk_column": "id"}]}
    g = build_db(tmp_path, doc, {"employees": [[0, None], [1, 0], [2, 0], [3, 1]]})
    fwd, rev = g.relations
    assert fwd.src_type == fwd.dst_type == 0
    assert rev.neighbors(0).tolist() == [1, 2]
    assert relation_metadata_text(fwd, g.manifest) == "edge from employees via manager_id to employees"
    assert relation_metadata_text(rev, g.manifest).startswith("reverse of ")
    assert fwd.name != rev.name


def test_frames_must_match_manifest(shop_manifest):
    m = load_manifest(shop_manifest)
    frames, _ = load_tables(m, shop_manifest.parent)
    with pytest.raises(ConsistencyError):
        build_graph(frames[:1], m)


def test_snapshot_round_trip(shop_manifest, tmp_path):
    m = load_manifest(shop_manifest)
    frames, _ = load_tables(m, shop_manifest.parent)
    g = build_graph(frames, m)
    save_graph(g, tmp_path / "g.bin")
    h = load_graph(tmp_path / "g.bin")
    assert h.manifest == g.manifest and h.node_types == g.node_types
    for a, b in zip(g.node_times, h.node_times):
        assert np.array_equal(a, b)
    for a, b in zip(g.relations, h.relations):
        assert (a.name, a.src_type, a.dst_type, a.direction, a.relation) == (b.name, b.src_type, b.dst_type, b.direction, b.relation)
        assert np.array_equal(a.csr_offsets, b.csr_offsets) and np.array_equal(a.csr_targets, b.csr_targets)
    with pytest.raises(ConsistencyError):
        h.frame(0)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTGRAPH" + (tmp_path / "g.bin").read_bytes()[8:])
    with pytest.raises(ParseError):
        load_graph(bad)


def test_build_is_deterministic(shop_manifest, tmp_path):
    m = load_manifest(shop_manifest)
    frames, _ = load_tables(m, shop_manifest.parent)
    save_graph(build_graph(frames, m), tmp_path / "a.bin")
    save_graph(build_graph(frames, m, workers=2), tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
