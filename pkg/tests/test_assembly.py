import json

import pytest

from tablefuse.assembly import (
    AssemblyError, Branch, FusionSpec, ProcessorPlan, build_fusion_spec, build_processor_plan,
    generate_code_artifact, generate_processor_artifact, load_pipeline_document, pipeline_document,
    validate_fusion_code,
)
from tablefuse.llm.gateway import FixtureStore, Gateway, GatewayConfig
from tablefuse.modality import ModalitySchema
from tablefuse.table import Modality, synthetic_schema
from tablefuse.testing import ScriptedLLM
from tablefuse.zoo import SelectionResult, builtin_zoo


def spec_of(dims, hidden=(8,), out=3):
    mods = list(Modality)[: len(dims)]
    return FusionSpec(tuple(Branch(m, f"m{i}", d) for i, (m, d) in enumerate(zip(mods, dims))), hidden, out,
                      tuple(1.0 for _ in dims))


@pytest.fixture
def zoo():
    return builtin_zoo(Gateway(GatewayConfig(mode="replay"), FixtureStore()))


def picks():
    names = {Modality.IMAGE_PATH: "resnet50", Modality.NUMERICAL: "numerical_mlp", Modality.TEXT: "roberta-large",
             Modality.CATEGORICAL: "categorical_mlp"}
    return {m: SelectionResult(n, "r", (n,)) for m, n in names.items()}


def test_dimension_law_worked_example():
    s = spec_of([512, 768, 64])
    assert s.max_dim == 768 and s.concat_dim == 2304
    assert s.adapters == [(512, 768), (768, 768), (64, 768)]
    assert s.body_dims == [(2304, 8)] and s.head_dims == (8, 3)


def test_spec_validation():
    with pytest.raises(AssemblyError):
        FusionSpec((), (), 1, ())
    with pytest.raises(AssemblyError, match="weights"):
        spec_of([4]).with_weights([0.0], 0.0)
    with pytest.raises(AssemblyError):
        spec_of([4], hidden=(0,))
    with pytest.raises(AssemblyError):
        spec_of([4], out=0)


def test_build_spec_orders_branches_canonically(zoo):
    s = build_fusion_spec(picks(), zoo.by_name, output_dim=2)
    assert [b.modality for b in s.branches] == [Modality.NUMERICAL, Modality.CATEGORICAL, Modality.TEXT,
                                                 Modality.IMAGE_PATH]
    assert s.max_dim == 64 and s.hidden_widths == (64, 64)
    assert FusionSpec.from_json(json.loads(json.dumps(s.to_json()))) == s


def test_processor_plan_has_label_and_no_fusion(zoo):
    schema = ModalitySchema(dict(synthetic_schema()))
    plan = build_processor_plan(schema, picks(), "adopted", "binary", zoo.by_name)
    assert plan.keys() == ["numerical", "categorical", "text", "image_path", "label"]
    assert plan.processors["text"]["width"] == 64
    assert plan.label_processor["kind"] == "index_map"
    assert build_processor_plan(schema, picks(), "adopted", "regression").label_processor["kind"] == "identity"
    missing = {m: s for m, s in picks().items() if m != Modality.TEXT}
    with pytest.raises(AssemblyError, match="text"):
        build_processor_plan(schema, missing, "adopted", "binary")


def test_pipeline_document_round_trip(zoo):
    s = build_fusion_spec(picks(), zoo.by_name, 2)
    plan = build_processor_plan(ModalitySchema(dict(synthetic_schema())), picks(), "adopted", "binary")
    doc = json.loads(json.dumps(pipeline_document(s, plan, "binary", "adopted")))
    assert load_pipeline_document(doc) == (s, plan)
    with pytest.raises(AssemblyError, match="version"):
        load_pipeline_document(dict(doc, version=99))


def test_code_token_checks():
    s = spec_of([16, 32])
    good = ('fusion_model = X; fusion_head = Y  # m0 m1\nadapt to 32\n'
            'out = {"logits": 1, "features": 2, "weight": 3}')
    assert all(ok for _, ok in validate_fusion_code(good, s))
    bad = dict(validate_fusion_code(good.replace("fusion_head", "head").replace("32", "320"), s))
    assert bad["defines_fusion_head"] is False and bad["mentions_max_dim"] is False
    assert dict(validate_fusion_code(good.replace('"weight"', "w"), s))["output_key:weight"] is False


def test_generated_artifacts_are_text_only(zoo):
    gw = Gateway(GatewayConfig(mode="record"), FixtureStore(), transport=ScriptedLLM().transport())
    s = build_fusion_spec(picks(), zoo.by_name, 2)
    art = generate_code_artifact(s, zoo.by_name, gw)
    assert art.ok and isinstance(art.text, str)
    plan = build_processor_plan(ModalitySchema(dict(synthetic_schema())), picks(), "adopted", "binary")
    proc = generate_processor_artifact(plan, zoo.by_name, gw)
    assert proc.ok, proc.report()


def test_plan_round_trip():
    p = ProcessorPlan({"text": {"kind": "hashed_ngrams", "columns": ["t"], "width": 8, "n": 3}},
                      {"kind": "index_map", "column": "y"})
    assert ProcessorPlan.from_json(p.to_json()) == p and not p.fitted
