import json

import pytest

from tablefuse.llm.gateway import FixtureStore, Gateway, GatewayConfig
from tablefuse.modality import (
    FEW_SHOT, ModalityError, ModalitySchema, _corrective, _parse_schema, build_mi_prompt, infer_modalities,
    normalize_tag, render_rows, sample_row_indices,
)
from tablefuse.table import Modality, generate_synthetic_dataset


def replay():
    store = FixtureStore()
    return Gateway(GatewayConfig(mode="replay"), store), store


@pytest.fixture
def table():
    return generate_synthetic_dataset(20, 0)


GOOD = {"age": "numerical", "gender": "categorical", "description": "text", "images": "image_path",
        "adopted": "categorical"}


def test_normalize_tag_synonyms():
    assert normalize_tag("Image Path") == Modality.IMAGE_PATH
    assert normalize_tag("numeric") == Modality.NUMERICAL
    assert normalize_tag("ID") == Modality.IDENTIFIER
    with pytest.raises(ModalityError):
        normalize_tag("sound")


def test_prompt_contains_examples_sample_rows_and_directive(table):
    b = build_mi_prompt(table, "adoption task", sample_rows=3, seed=4)
    assert len(b.few_shot_blocks) == len(FEW_SHOT)
    assert "adoption task" in b.user_text
    for i in sample_row_indices(table.n_rows, 3, 4):
        assert render_rows([table.row(i)]) in b.user_text
    assert build_mi_prompt(table, "adoption task", 3, 4) == b


def test_long_cells_are_clipped():
    from tablefuse.table import StructuredTable
    t = StructuredTable(("t",), (("x" * 500,),))
    assert "x" * 81 not in build_mi_prompt(t).user_text


def test_infer_accepts_full_coverage(table):
    gw, store = replay()
    store.add(build_mi_prompt(table, "d"), "Output: " + json.dumps(GOOD))
    schema = infer_modalities(table, "d", gw)
    assert schema.modalities == {c: Modality(v) for c, v in GOOD.items()}
    assert set(schema.provenance.values()) == {"llm"}
    assert schema.feature_modalities("adopted") == [Modality.NUMERICAL, Modality.CATEGORICAL, Modality.TEXT,
                                                    Modality.IMAGE_PATH]


def _error_of(text, columns):
    try:
        _parse_schema(text, columns)
    except ValueError as exc:
        return exc
    raise AssertionError("expected a parse error")


@pytest.mark.parametrize("bad", [
    {k: v for k, v in GOOD.items() if k != "images"},
    dict(GOOD, extra="text"),
    dict(GOOD, age="sound"),
])
def test_invalid_answer_gets_one_corrective_retry(table, bad):
    gw, store = replay()
    b = build_mi_prompt(table, "d")
    store.add(b, json.dumps(bad))
    exc = _error_of(json.dumps(bad), list(table.columns))
    store.add(b.with_correction(_corrective(exc)), json.dumps(GOOD))
    assert infer_modalities(table, "d", gw)["images"] == Modality.IMAGE_PATH


def test_second_invalid_answer_raises(table):
    gw, store = replay()
    b = build_mi_prompt(table, "d")
    bad = json.dumps({"age": "numerical"})
    store.add(b, bad)
    store.add(b.with_correction(_corrective(_error_of(bad, list(table.columns)))), bad)
    with pytest.raises(ModalityError, match="images"):
        infer_modalities(table, "d", gw)


def test_overrides_and_task_label_fix(table):
    gw, store = replay()
    answer = dict(GOOD, adopted="numerical")
    store.add(build_mi_prompt(table, ""), json.dumps(answer))
    schema = infer_modalities(table, "", gw, overrides={"gender": "numerical"}, task="binary")
    assert schema["gender"] == Modality.NUMERICAL and schema.provenance["gender"] == "user_override"
    assert schema["adopted"] == Modality.CATEGORICAL and schema.provenance["adopted"] == "user_override"
    with pytest.raises(ModalityError):
        infer_modalities(table, "", gw, overrides={"nope": "text"})


def test_schema_json_round_trip_and_restrict():
    s = ModalitySchema({"a": Modality.TEXT, "b": Modality.IDENTIFIER}, {"a": "llm", "b": "user_override"})
    assert ModalitySchema.from_json(json.loads(json.dumps(s.to_json()))) == s
    assert s.feature_modalities(None) == [Modality.TEXT]
    assert list(s.restrict(["a"])) == ["a"]


def test_empty_table_rejected():
    from tablefuse.table import StructuredTable
    with pytest.raises(ModalityError):
        build_mi_prompt(StructuredTable(("a",), ()))
