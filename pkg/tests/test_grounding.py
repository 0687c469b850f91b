from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
import support
from ovmap.config import ConfigError, PipelineConfig
from ovmap.geometry import VoxelSet
from ovmap.grounding import (
    CandidateReport, InstanceMap, LabelTable, assign_labels, build_round1_prompt, build_round2_prompt,
    ground, parse_choice, rank_candidates, spatial_context,
)
from ovmap.llm import ScriptedLLM
from ovmap.merging import Instance3D
from ovmap.providers import HashedTokenEmbedder

CFG = PipelineConfig()
SECTIONS = ("## Navigation Task Definition", "## Instance Description Criteria", "## Output Format Constraints")


def inst_at(iid, x, feature, y=0.0, z=0.0):
    # half-metre voxels; cell (k, 0, 0) has its centre at 0.5 k + 0.25
    cloud = VoxelSet.from_points(np.array([[x, y, z]]), 0.5)
    return Instance3D(iid, (iid,), cloud, np.asarray(feature, dtype=np.float64))


def random_map(rng, n, dim=8):
    insts = [inst_at(i, *rng.uniform(-4, 4, 3)[:1], support.unit(rng.normal(size=dim)),
                     *rng.uniform(-4, 4, 2)) for i in range(n)]
    return InstanceMap(insts)


# -- ranking ---------------------------------------------------------------


def test_exact_feature_ranks_first():
    e = np.eye(4)
    imap = InstanceMap([inst_at(i, i, e[i]) for i in range(4)])
    ranked = rank_candidates(imap, e[2], 8)
    assert ranked[0] == (2, 1.0)
    assert len(ranked) == 4  # clamped to the map size


@pytest.mark.parametrize("seed", range(5))
def test_ranking_matches_full_sort(seed):
    rng = np.random.default_rng(seed)
    imap = random_map(rng, 50)
    q = rng.normal(size=8)
    feats = {int(i.instance_id): i.representative_feature for i in imap.instances}
    qn = q / np.linalg.norm(q)
    want = sorted(feats, key=lambda i: (-float(feats[i] @ qn), i))
    assert [i for i, _ in rank_candidates(imap, q)] == want


@given(st.floats(0.01, 100.0))
@settings(max_examples=25)
def test_ranking_invariant_to_query_scale(scale):
    imap = random_map(np.random.default_rng(7), 20)
    q = np.random.default_rng(8).normal(size=8)
    assert [i for i, _ in rank_candidates(imap, q)] == [i for i, _ in rank_candidates(imap, q * scale)]


# -- spatial context --------------------------------------------------------


def test_isolated_candidate_has_no_neighbours():
    imap = InstanceMap([inst_at(0, 0, [1, 0]), inst_at(1, 5, [0, 1])])
    assert spatial_context(imap, 0, 5, 2.0) == []


def test_radius_cut():
    imap = InstanceMap([inst_at(i, x, [1, 0]) for i, x in enumerate([0.0, 0.5, 1.5, 2.5])])
    got = spatial_context(imap, 0, 5, 2.0)
    assert [i for i, _ in got] == [1, 2]
    assert [round(d, 6) for _, d in got] == [0.5, 1.5]


@pytest.mark.parametrize("seed", range(5))
def test_context_matches_linear_scan(seed):
    rng = np.random.default_rng(seed)
    imap = random_map(rng, 40)
    cents = {int(i): tuple(imap.centroid(int(i))) for i in imap.ids}
    for cid in list(cents)[:10]:
        got = spatial_context(imap, cid, 5, 2.0)
        assert [i for i, _ in got] == oracles.linear_neighbors(cents, cid, 5, 2.0)
        assert all(i != cid and d <= 2.0 for i, d in got)


# -- labels -------------------------------------------------------------------


def test_label_assignment_and_tie_rule():
    e = np.eye(3)
    table = LabelTable(["a", "b", "b-again"], np.stack([e[0], e[1], e[1]]))
    imap = InstanceMap([inst_at(0, 0, e[0]), inst_at(1, 3, e[1])], table)
    assert imap.labels[0][1] == "a"
    assert imap.labels[1][:2] == (1, "b")


def test_cluster_label_accuracy():
    rng = np.random.default_rng(0)
    centres = [support.unit(rng.normal(size=32)) for _ in range(10)]
    table = LabelTable([f"c{i}" for i in range(10)], np.stack(centres))
    insts, truth = [], []
    for i in range(200):
        k = int(rng.integers(10))
        insts.append(inst_at(i, i * 3.0, support.unit(centres[k] + 0.08 * rng.normal(size=32))))
        truth.append(k)
    labels = assign_labels(InstanceMap(insts), table)
    acc = np.mean([labels[i][0] == truth[i] for i in range(200)])
    assert acc >= 0.95


def test_labels_only_change_prompt_text():
    rng = np.random.default_rng(4)
    insts = [inst_at(i, *rng.uniform(-2, 2, 1), support.unit(rng.normal(size=8))) for i in range(12)]
    table = LabelTable([f"l{i}" for i in range(3)], np.stack([support.unit(rng.normal(size=8)) for _ in range(3)]))
    plain, labelled = InstanceMap(insts), InstanceMap(insts, table)
    q = rng.normal(size=8)
    assert rank_candidates(plain, q) == rank_candidates(labelled, q)
    for i in range(12):
        assert spatial_context(plain, i, 5, 2.0) == spatial_context(labelled, i, 5, 2.0)


def test_label_table_file_formats(tmp_path):
    p = tmp_path / "labels.json"
    p.write_text(json.dumps([{"label": "cup", "embedding": [2.0, 0.0]}]))
    assert LabelTable.load(p).embeddings.tolist() == [[1.0, 0.0]]
    p.write_text(json.dumps(["cup"]))
    with pytest.raises(ValueError):
        LabelTable.load(p)
    assert LabelTable.load(p, HashedTokenEmbedder(4)).labels == ["cup"]


# -- prompts ------------------------------------------------------------------


def test_round1_prompt_structure():
    msgs = build_round1_prompt("I am thirsty")
    text = "\n".join(m["content"] for m in msgs)
    assert [m["role"] for m in msgs] == ["system", "user"]
    for s in SECTIONS:
        assert text.count(s) == 1
    assert '"a cup filled with water"' in text
    assert "Instruction: I am thirsty" in msgs[1]["content"]


def test_round1_closed_vocabulary():
    text = build_round1_prompt("go", ["cup", "sofa"])[0]["content"]
    assert "cup, sofa" in text and "## Label Vocabulary" in text


def test_empty_instruction_rejected():
    with pytest.raises(ValueError):
        build_round1_prompt("  ")


def test_round2_single_and_many():
    one = build_round2_prompt([CandidateReport(3, (1.234, 0, -1), 0.876)])
    body = one[1]["content"]
    assert "Candidate Instance 1: {location: (1.23, 0.00, -1.00); semantic similarity: 0.88; surrounding objects: []}" in body
    assert "from 1 to 1" in body
    assert parse_choice("1", 1) == 1 and parse_choice("2", 1) is None
    many = build_round2_prompt([CandidateReport(i, (i, 0, 0), 1 - i / 10) for i in range(8)])
    lines = [ln for ln in many[1]["content"].splitlines() if ln.startswith("Candidate Instance")]
    assert [ln.split(":")[0] for ln in lines] == [f"Candidate Instance {k}" for k in range(1, 9)]
    with pytest.raises(ValueError):
        build_round2_prompt([])


@pytest.mark.parametrize("reply,expected", [
    ("3", 3), ("Candidate 2", 2), ("answer: 4", 4), ("Answer: candidate 1.", 1), ("  5 ", 5),
    ("9", None), ("0", None), ("the second one", None), ("2 or 3", None), ("", None),
])
def test_parse_choice(reply, expected):
    assert parse_choice(reply, 8) == expected


# -- ground -------------------------------------------------------------------


def chairs_map():
    emb = HashedTokenEmbedder(16)
    chair, table = emb.embed_text("chair"), emb.embed_text("table")
    rng = np.random.default_rng(0)
    near = support.unit(chair + 0.6 * support.unit(rng.normal(size=16)))
    insts = [inst_at(0, 0.0, table), inst_at(1, 0.8, near), inst_at(2, 6.0, chair)]
    labels = LabelTable(["chair", "table"], np.stack([chair, table]))
    return InstanceMap(insts, labels), emb


def test_neighbour_reasoning_picks_table_chair():
    imap, emb = chairs_map()
    script = {"Prepare the chair, I want to eat.": {"round1": "chair", "round2": {"choose_with_neighbor": "table"}}}
    res = ground("Prepare the chair, I want to eat.", imap, emb, ScriptedLLM(script), CFG)
    assert res.instance_id == 1
    assert res.trace["candidates"][0]["instance_id"] == 2  # the isolated chair is closer in feature space
    no_sel = ground("Prepare the chair, I want to eat.", imap, emb, ScriptedLLM(script), CFG, selection=False)
    assert no_sel.instance_id == 2 and len(no_sel.trace["prompts"]) == 1


def test_unparseable_twice_falls_back():
    imap, emb = chairs_map()
    res = ground("sit", imap, emb, ScriptedLLM(["chair", "99", "no idea"]), CFG)
    assert res.instance_id == res.trace["candidates"][0]["instance_id"]
    assert res.trace["flags"] == ["llm_fallback"]
    assert len(res.trace["replies"]) == 3


def test_reminder_recovers():
    imap, emb = chairs_map()
    res = ground("sit", imap, emb, ScriptedLLM(["chair", "hmm", "Candidate 2"]), CFG)
    assert res.instance_id == res.trace["candidates"][1]["instance_id"] and res.trace["flags"] == []


def test_single_instance_map():
    emb = HashedTokenEmbedder(16)
    imap = InstanceMap([inst_at(5, 0, emb.embed_text("lamp"))])
    for reply in ("1", "7", "garbage"):
        assert ground("anything", imap, emb, ScriptedLLM(["sofa", reply, reply]), CFG).instance_id == 5


def test_ground_is_reproducible():
    imap, emb = chairs_map()
    script = ["chair", "2"]
    a = ground("sit", imap, emb, ScriptedLLM(script), CFG).trace
    b = ground("sit", imap, emb, ScriptedLLM(script), CFG).trace
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_closed_vocabulary_needs_labels_and_matching_dimension():
    emb = HashedTokenEmbedder(16)
    imap = InstanceMap([inst_at(0, 0, emb.embed_text("lamp"))])
    with pytest.raises(ConfigError):
        ground("x", imap, emb, ScriptedLLM(["lamp"]), CFG, parsing=False)
    with pytest.raises(ConfigError):
        ground("x", imap, HashedTokenEmbedder(8), ScriptedLLM(["lamp"]), CFG)


def test_closed_vocabulary_prompt_lists_labels():
    imap, emb = chairs_map()
    llm = ScriptedLLM(["chair", "1"])
    ground("sit", imap, emb, llm, CFG, parsing=False)
    assert "chair, table" in llm.calls[0][0]["content"]
