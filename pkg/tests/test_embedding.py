import json

import numpy as np
import pytest

from src.embedding import (
    ClassEntry,
    ClassEmbeddingRegistry,
    TaskSchedule,
    normalize,
    mean_known_embedding,
    pseudo_unknown_embedding,
    prompt_matrix,
    register_task,
    save_embedding_file,
    load_embedding_file,
    registry_to_dict,
    registry_from_dict,
)
from src.utils.errors import (ZeroVector, EmptyRegistry, DegenerateMean, DuplicateClass, InvalidSchedule,
                              ParseError)

E1 = np.array([1.0, 0.0])
E2 = np.array([0.0, 1.0])


def make_registry(vectors, w0=E1, alpha=0.4):
    reg = ClassEmbeddingRegistry(generic_object=np.asarray(w0, dtype=float), alpha=alpha)
    return register_task(reg, [(f"k{i}", np.asarray(v, dtype=float)) for i, v in enumerate(vectors)])


def test_normalize():
    np.testing.assert_allclose(normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    np.testing.assert_array_equal(normalize(np.array([1.0, 0.0, 0.0])), [1.0, 0.0, 0.0])
    with pytest.raises(ZeroVector):
        normalize(np.array([0.0, 0.0]))


def test_normalize_idempotent():
    v = np.random.default_rng(0).normal(size=7)
    np.testing.assert_allclose(normalize(normalize(v)), normalize(v), atol=1e-12)


def test_mean_known_embedding_examples():
    np.testing.assert_allclose(mean_known_embedding(make_registry([[0.0, 2.0]])), [0.0, 1.0])
    mean = mean_known_embedding(make_registry([E1, E2]))
    np.testing.assert_allclose(mean, [0.5, 0.5])
    assert np.linalg.norm(mean) == pytest.approx(np.sqrt(2) / 2)
    np.testing.assert_allclose(mean_known_embedding(make_registry([E1, -E1])), [0.0, 0.0])


def test_mean_known_embedding_scale_invariant():
    rng = np.random.default_rng(1)
    vecs = rng.normal(size=(4, 5))
    scaled = vecs * np.array([[1.0], [3.0], [0.2], [10.0]])
    np.testing.assert_allclose(mean_known_embedding(make_registry(vecs, w0=np.ones(5))),
                               mean_known_embedding(make_registry(scaled, w0=np.ones(5))), atol=1e-12)


def test_mean_known_embedding_errors():
    with pytest.raises(EmptyRegistry):
        mean_known_embedding(ClassEmbeddingRegistry(generic_object=E1))
    with pytest.raises(ZeroVector):
        mean_known_embedding(make_registry([E1, [0.0, 0.0]]))


def test_pseudo_unknown_embedding():
    reg = make_registry([[0.0, 2.0]], w0=E1, alpha=0.4)
    np.testing.assert_allclose(pseudo_unknown_embedding(reg), [1.0, -0.4])


def test_pseudo_unknown_alpha_zero_is_exactly_w0():
    w0 = np.random.default_rng(2).normal(size=2)
    reg = make_registry([E1, E2], w0=w0, alpha=0.0)
    assert np.array_equal(pseudo_unknown_embedding(reg), w0)


def test_pseudo_unknown_degenerate_mean():
    with pytest.raises(DegenerateMean):
        pseudo_unknown_embedding(make_registry([E1, -E1]))


def test_prompt_matrix_rows():
    reg = make_registry([E1, E2, [1.0, 1.0]])
    known = prompt_matrix(reg, include_unknown=False)
    assert known.shape == (3, 2)
    np.testing.assert_array_equal(known, reg.matrix())
    full = prompt_matrix(reg, include_unknown=True)
    assert full.shape == (4, 2)
    np.testing.assert_allclose(full[-1], pseudo_unknown_embedding(reg))


def test_prompt_matrix_replacement_row():
    reg = make_registry([E1, E2], w0=[0.3, 0.7])
    rows = prompt_matrix(reg, include_unknown=True, unknown_row=reg.generic_object)
    np.testing.assert_array_equal(rows[-1], [0.3, 0.7])


def test_register_task_freezes_previous():
    rng = np.random.default_rng(3)
    reg = register_task(ClassEmbeddingRegistry(generic_object=np.ones(4)),
                        [(f"a{i}", rng.normal(size=4)) for i in range(10)])
    before = reg.matrix().copy()
    reg2 = register_task(reg, [(f"b{i}", rng.normal(size=4)) for i in range(7)])
    assert len(reg2) == 17
    assert [e.frozen for e in reg2.entries] == [True] * 10 + [False] * 7
    assert [e.task_id for e in reg2.entries] == [1] * 10 + [2] * 7
    assert reg2.matrix()[:10].tobytes() == before.tobytes()


def test_register_first_class():
    reg = register_task(ClassEmbeddingRegistry(generic_object=E1), [("only", E2)])
    assert len(reg) == 1
    assert reg.entries[0].task_id == 1
    assert reg.entries[0].frozen is False


def test_register_duplicate_class():
    reg = make_registry([E1])
    with pytest.raises(DuplicateClass):
        register_task(reg, [("k0", E2)])
    with pytest.raises(DuplicateClass):
        register_task(reg, [("x", E2), ("x", E1)])


def test_with_embeddings_keeps_frozen_rows():
    reg = register_task(make_registry([E1]), [("new", E2)])
    updated = reg.with_embeddings(np.array([[5.0, 5.0], [0.6, 0.8]]))
    assert updated.entries[0].embedding is reg.entries[0].embedding
    np.testing.assert_array_equal(updated.entries[1].embedding, [0.6, 0.8])


def test_registry_rejects_decreasing_tasks():
    entries = (ClassEntry("a", E1, 2, False), ClassEntry("b", E2, 1, False))
    with pytest.raises(InvalidSchedule):
        ClassEmbeddingRegistry(entries=entries, generic_object=E1)


def test_task_schedule():
    schedule = TaskSchedule.from_dict({"1": ["a", "b"], "2": ["c"]}, all_classes=["a", "b", "c", "u"])
    assert schedule.num_tasks == 2
    assert schedule.known_at(1) == ["a", "b"]
    assert schedule.previously_known_at(2) == ["a", "b"]
    assert schedule.introduced_at(2) == ["c"]
    assert schedule.unknown_at(1) == ["c", "u"]
    assert schedule.task_of("u") is None
    with pytest.raises(InvalidSchedule):
        TaskSchedule.from_dict({"1": ["a"], "3": ["b"]})
    with pytest.raises(InvalidSchedule):
        TaskSchedule.from_dict({"1": ["a"], "2": ["a"]})


def test_embedding_file_nine_digits(tmp_path):
    path = str(tmp_path / "emb.json")
    vec = np.array([0.123456789123, -0.5, 1.0 / 3.0])
    save_embedding_file(path, {"cls": vec, "object": np.array([1.0, 0.0, 0.0])})
    loaded = load_embedding_file(path)
    assert set(loaded) == {"cls", "object"}
    np.testing.assert_allclose(loaded["cls"], vec, rtol=1e-8)


def test_embedding_file_parse_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"a": [1, 2],\n "b": [1, 2')
    with pytest.raises(ParseError) as excinfo:
        load_embedding_file(str(bad))
    assert excinfo.value.line_no == 2
    mixed = tmp_path / "mixed.json"
    mixed.write_text(json.dumps({"a": [1, 2], "b": [1, 2, 3]}))
    with pytest.raises(ParseError):
        load_embedding_file(str(mixed))


def test_registry_dict_is_exact():
    rng = np.random.default_rng(4)
    reg = register_task(make_registry(rng.normal(size=(2, 2))), [("z", rng.normal(size=2))])
    back = registry_from_dict(json.loads(json.dumps(registry_to_dict(reg))))
    assert back.names == reg.names
    assert back.matrix().tobytes() == reg.matrix().tobytes()
    assert [e.frozen for e in back.entries] == [e.frozen for e in reg.entries]
    assert back.alpha == reg.alpha
