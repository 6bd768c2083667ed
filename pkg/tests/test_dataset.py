import numpy as np
import pytest

from klal import vocab
from klal.dataset import (
    HEADER,
    MANIFEST,
    DatasetFormatError,
    ForgeConfig,
    TokenLayout,
    label_of,
    make_dataset,
    make_gridpatch_sample,
    make_intersection_sample,
    make_tracing_sample,
    quantize_map,
    read_dataset,
    split_counts,
    write_dataset,
)
from klal.geometry import gen_graph, trace_polyline_patches
from oracles import gridpatch_oracle, intersection_oracle, tracing_oracle

CFG = ForgeConfig()


def _check_gt(s):
    gt = s.gt_array()
    assert abs(gt.sum() - 1.0) < 1e-9
    assert (gt > 0).all()
    assert int(np.argmax(gt)) in s.targets


# -- layouts -----------------------------------------------------------------------
def test_layout_order_and_anchor():
    s = make_intersection_sample(1, 2)
    lay = s.layout
    tok = lay.tokens()
    assert list(tok[: lay.visual_start]) == list(vocab.encode(vocab.SYSTEM_PROMPT))
    assert (tok[lay.visual_start : lay.visual_end] == vocab.IMG).all()
    assert lay.visual_len == CFG.grid.size
    assert vocab.decode(lay.answer) == ["2", "<eos>"]
    # the anchor row emits the last content answer token
    assert tok[lay.anchor + 1] == lay.content_answer[-1]
    assert lay.anchor == lay.prefix_len - 1


def test_gridpatch_anchor_emits_column_token():
    s = make_gridpatch_sample(3)
    tok = s.layout.tokens()
    _, col = label_of(s)
    assert vocab.decode([tok[s.layout.anchor + 1]]) == [f"c{col}"]


def test_layout_invariants():
    with pytest.raises(ValueError):
        TokenLayout((1, 4), 2, 64, (5,), ())
    with pytest.raises(ValueError):
        TokenLayout((1, 4), 3, 64, (5,), (6,))


# -- per-task construction -------------------------------------------------------------
@pytest.mark.parametrize("count", range(4))
def test_intersection_targets_match_oracle(count):
    for seed in range(10):
        s = make_intersection_sample(seed, count)
        n, patches = intersection_oracle(s, CFG)
        assert n == count == label_of(s)
        if count:
            assert set(s.targets) == patches
        _check_gt(s)


def test_zero_count_targets_both_curves():
    from klal.geometry import gen_polyline_pair

    s = make_intersection_sample(4, 0)
    red, blue = gen_polyline_pair(4, 0, CFG.polyline)
    line_patches = set(trace_polyline_patches(red, CFG.grid)) | set(trace_polyline_patches(blue, CFG.grid))
    assert set(s.targets) == line_patches
    assert int(np.argmax(s.gt_array())) in line_patches


def test_tracing_yes_targets_follow_edge():
    g = gen_graph(11)
    u, v = g.edges[0]
    a, b = g.nodes[u].label, g.nodes[v].label
    s = make_tracing_sample(11, (a, b))
    assert s.label == "yes"
    assert set(s.targets) == set(trace_polyline_patches(g.paths[0], CFG.grid))
    # consecutive traced patches are 8-neighbours
    order = trace_polyline_patches(g.paths[0], CFG.grid)
    for p, q in zip(order, order[1:]):
        (r1, c1), (r2, c2) = CFG.grid.cell(p), CFG.grid.cell(q)
        assert max(abs(r1 - r2), abs(c1 - c2)) == 1


def test_tracing_no_targets_are_node_patches():
    g = gen_graph(12)
    linked = {frozenset(e) for e in g.edges}
    i, j = next((i, j) for i in range(len(g.nodes)) for j in range(len(g.nodes)) if i != j and frozenset((i, j)) not in linked)
    s = make_tracing_sample(12, (g.nodes[i].label, g.nodes[j].label))
    assert s.label == "no"
    from klal.geometry import point_to_patch

    assert set(s.targets) == {point_to_patch(g.nodes[k].center, CFG.grid) for k in (i, j)}


def test_tracing_rejects_self_pair():
    g = gen_graph(0)
    with pytest.raises(ValueError):
        make_tracing_sample(0, (g.nodes[0].label, g.nodes[0].label))


def test_tracing_dataset_is_balanced_and_correct():
    samples = make_dataset("tracing", 103, 5)
    assert len(samples) == 103
    yes = sum(s.label == "yes" for s in samples)
    assert abs(yes - (len(samples) - yes)) <= 1
    for s in samples:
        assert tracing_oracle(s, CFG) == s.label
        _check_gt(s)


def test_tracing_offsets_partition_the_stream():
    whole = make_dataset("tracing", 17, 2)
    parts = make_dataset("tracing", 8, 2) + make_dataset("tracing", 9, 2, offset=8)
    assert [s.id for s in whole] == [s.id for s in parts]
    assert whole == parts


def test_gridpatch_red_cell_and_answer():
    for seed in range(500):
        s = make_gridpatch_sample(seed)
        row, col = label_of(s)
        assert gridpatch_oracle(s, CFG.patch) == (row, col)
        assert CFG.grid.cell(int(np.argmax(s.gt_array()))) == (row, col)
        assert vocab.decode(s.layout.content_answer) == [f"c{row}", f"c{col}"]


def test_intersection_dataset_is_balanced():
    samples = make_dataset("intersection", 40, 0)
    counts = [label_of(s) for s in samples]
    assert all(counts.count(k) == 10 for k in range(4))


def test_unknown_task():
    with pytest.raises(ValueError):
        make_dataset("bogus", 1, 0)


def test_split_counts():
    assert split_counts(2400) == (1920, 480)
    assert sum(split_counts(1063)) == 1063


# -- quantisation and serialisation --------------------------------------------------------
def test_quantize_keeps_unit_sum():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = rng.random(64)
        v /= v.sum()
        q = quantize_map(v)
        assert sum(round(x * 1e9) for x in q) == 10**9
        assert max(abs(a - b) for a, b in zip(q, v)) <= 1e-9


def _mixed():
    return make_dataset("intersection", 8, 1) + make_dataset("tracing", 7, 1) + make_dataset("gridpatch", 6, 1)


def test_roundtrip(tmp_path):
    samples = _mixed()
    write_dataset(samples, tmp_path / "d")
    assert read_dataset(tmp_path / "d") == samples


def test_roundtrip_hundred(tmp_path):
    samples = make_dataset("gridpatch", 100, 9)
    write_dataset(samples, tmp_path / "d", png=True)
    assert read_dataset(tmp_path / "d") == samples
    assert (tmp_path / "d" / "images" / "gridpatch-000000.png").exists()


def test_empty_dataset(tmp_path):
    path = write_dataset([], tmp_path / "e")
    assert path.read_text() == HEADER + "\n"
    assert read_dataset(tmp_path / "e") == []


def test_regeneration_is_byte_identical(tmp_path):
    write_dataset(_mixed(), tmp_path / "a")
    write_dataset(_mixed(), tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_truncated_line_is_named(tmp_path):
    write_dataset(make_dataset("gridpatch", 3, 0), tmp_path / "t")
    manifest = tmp_path / "t" / MANIFEST
    text = manifest.read_text()
    manifest.write_text(text[: len(text) - 40])
    with pytest.raises(DatasetFormatError, match="line 4"):
        read_dataset(tmp_path / "t")


def test_malformed_middle_line_is_named(tmp_path):
    write_dataset(make_dataset("gridpatch", 3, 0), tmp_path / "m")
    manifest = tmp_path / "m" / MANIFEST
    lines = manifest.read_text().split("\n")
    lines[2] = lines[2].replace("\t", " ", 1)
    manifest.write_text("\n".join(lines))
    with pytest.raises(DatasetFormatError, match="line 3"):
        read_dataset(tmp_path / "m")


def test_version_mismatch(tmp_path):
    write_dataset([], tmp_path / "v")
    (tmp_path / "v" / MANIFEST).write_text("klal-dataset v2\n")
    with pytest.raises(DatasetFormatError, match="header"):
        read_dataset(tmp_path / "v")


def test_missing_image_is_a_format_error(tmp_path):
    write_dataset(make_dataset("gridpatch", 1, 0), tmp_path / "i")
    (tmp_path / "i" / "images" / "gridpatch-000000.ppm").unlink()
    with pytest.raises(DatasetFormatError, match="line 2"):
        read_dataset(tmp_path / "i")
