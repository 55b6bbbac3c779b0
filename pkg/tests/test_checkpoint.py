import numpy as np
import pytest

from lorashear.checkpoint import checkpoint_extra, load_checkpoint, read_checkpoint, save_checkpoint
from lorashear.errors import FormatError
from lorashear.util import model_hash


def test_round_trip_is_bit_identical(toy_model, tmp_path):
    path = tmp_path / "m.lshr"
    save_checkpoint(toy_model, path, extra={"stage": "test"})
    loaded = load_checkpoint(path)
    assert model_hash(loaded) == model_hash(toy_model)
    assert loaded.config == toy_model.config


def test_save_load_save_is_byte_identical(toy_model, tmp_path):
    a, b = tmp_path / "a.lshr", tmp_path / "b.lshr"
    save_checkpoint(toy_model, a, extra={"stage": "test", "n": 3})
    save_checkpoint(load_checkpoint(a), b, extra=checkpoint_extra(a))
    assert a.read_bytes() == b.read_bytes()


def test_truncated_file_is_rejected_without_partial_model(toy_model, tmp_path):
    path = tmp_path / "m.lshr"
    save_checkpoint(toy_model, path)
    blob = path.read_bytes()
    for cut in (3, 7, 40, len(blob) - 5):
        (tmp_path / "cut.lshr").write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "cut.lshr")


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.lshr"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(path)


def test_bad_version_rejected(toy_model, tmp_path):
    path = tmp_path / "m.lshr"
    save_checkpoint(toy_model, path)
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(path)


def test_compressed_model_round_trip_preserves_reduced_shapes(toy_model, tmp_path):
    from lorashear.compress import apply_compression, plan_compression
    from lorashear.graph import build_trace_graph, mark_composed_spans
    from lorashear.groups import discover_node_groups, partition_variables, zero_structure

    graph = build_trace_graph(toy_model)
    node_groups = discover_node_groups(graph, mark_composed_spans(graph))
    group_set = partition_variables(node_groups, toy_model)
    victims = ["blocks.0.mlp:ch:005", "blocks.1.attn:head:002"]
    for gid in victims:
        zero_structure(toy_model, group_set.by_id[gid])
        group_set.set_status(gid, "redundant")
    plan = plan_compression(group_set, node_groups, graph, toy_model)
    compact = apply_compression(toy_model, plan)
    assert compact.blocks[0].mlp_dim == 63
    assert compact.blocks[1].n_heads == 3

    path = tmp_path / "compact.lshr"
    save_checkpoint(compact, path)
    loaded = load_checkpoint(path)
    assert model_hash(loaded) == model_hash(compact)
    assert loaded.blocks[0].mlp_dim == 63 and loaded.blocks[1].n_heads == 3
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 64, size=(2, 10))
    assert np.array_equal(loaded.forward(tokens).data, compact.forward(tokens).data)


def test_extra_metadata_round_trips(toy_model, tmp_path):
    path = tmp_path / "m.lshr"
    save_checkpoint(toy_model, path, extra={"stage": "prune", "config_hash": "abc"})
    assert checkpoint_extra(path) == {"stage": "prune", "config_hash": "abc"}
