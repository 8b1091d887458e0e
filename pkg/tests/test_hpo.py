import json
import math

import pytest

from tablefuse.hpo import (
    HPOSpace, SearchSpaceError, best_document, build_hpo_prompt, describe_hyperparameters, parse_range,
    propose_search_space, run_search, validate_space, write_trials,
)
from tablefuse.llm.gateway import FixtureStore, Gateway, GatewayConfig
from tablefuse.runtime import TrainConfig, TrainingDiverged
from tablefuse.testing import ScriptedLLM

CONFIG = {"learning_rate": 0.1, "batch_size": 32, "epochs": 20, "loss_weight": 1.0}


def scripted(**kw):
    return Gateway(GatewayConfig(mode="record"), FixtureStore(), transport=ScriptedLLM(**kw).transport())


@pytest.mark.parametrize("raw,values", [
    ("[0.05,0.1,0.2]", (0.05, 0.1, 0.2)),
    ([1, 2, 3], (1, 2, 3)),
    ("[adam, sgd]", ("adam", "sgd")),
    ('["a", "b"]', ("a", "b")),
])
def test_parse_range_forms(raw, values):
    assert parse_range(raw) == values


@pytest.mark.parametrize("raw", ["(0.01, 1.0)", "[]", 0.5, "[[1], 2]"])
def test_parse_range_rejects(raw):
    with pytest.raises(SearchSpaceError):
        parse_range(raw)


def test_validate_space_rules():
    assert validate_space({"learning_rate": (0.05, 0.1, 0.2)}, CONFIG).names() == ["learning_rate"]
    four = {k: (1, 2, 3) for k in ("learning_rate", "batch_size", "epochs", "loss_weight")}
    with pytest.raises(SearchSpaceError, match="up to 3"):
        validate_space(four, CONFIG)
    with pytest.raises(SearchSpaceError, match="forged"):
        validate_space({"momentum": (0.8, 0.9, 0.99)}, CONFIG)
    with pytest.raises(SearchSpaceError, match="at least 3"):
        validate_space({"learning_rate": (0.1, 0.2)}, CONFIG)
    with pytest.raises(SearchSpaceError, match="original"):
        validate_space({"learning_rate": (0.2, 0.3, 0.4)}, CONFIG)
    with pytest.raises(SearchSpaceError, match="checkpoint_name"):
        validate_space({"learning_rate": (0.05, 0.1, 0.2)}, dict(CONFIG, checkpoint_name="bert"))
    assert validate_space({"loss_weight": (0.5, 1.0, 2.0)}, dict(CONFIG, checkpoint_name="bert"))
    # categorical lists pass without the numeric length rule
    assert validate_space({"opt": ("adam", "sgd")}, {"opt": "adam"})


def test_propose_with_scripted_model_and_retry():
    space = propose_search_space(CONFIG, {}, "", scripted())
    assert space.to_json() == {"learning_rate": [0.05, 0.1, 0.2], "loss_weight": [0.5, 1.0, 2.0]}
    store = FixtureStore()
    b = build_hpo_prompt(CONFIG, {}, "")
    store.add(b, '{"learning_rate": "[0.2,0.3,0.4]"}')
    gw = Gateway(GatewayConfig(mode="replay"), store)
    msg = ("Your previous answer was invalid: rule (include original value): learning_rate range [0.2, 0.3, 0.4] "
           "lacks the original 0.1. Fix it and answer with JSON only.")
    store.add(b.with_correction(msg), '{"epochs": "[10,20,40]"}')
    assert propose_search_space(CONFIG, {}, "", gw).to_json() == {"epochs": [10, 20, 40]}


def test_descriptions_fill_placeholders_for_missing():
    gw = scripted(overrides={"hpo_describe": '{"learning_rate": "step size"}'})
    desc, missing = describe_hyperparameters(CONFIG, gw)
    assert desc["learning_rate"] == "step size"
    assert missing == ["batch_size", "epochs", "loss_weight"]


def fake_objective(cfg: TrainConfig) -> float:
    return -(math.log10(cfg.learning_rate) + 1) ** 2 - ((cfg.loss_weight or 1.0) - 1) ** 2 + cfg.batch_size / 1000


def test_grid_matches_exhaustive_enumeration():
    space = HPOSpace({"learning_rate": (0.01, 0.1), "loss_weight": (0.5, 1.0, 2.0)})
    base = TrainConfig(loss_weight=1.0)
    result = run_search(space, base, fake_objective, metric="auc", strategy="grid")
    assert len(result.records) == 6
    brute = max((fake_objective(base.overlay({"learning_rate": a, "loss_weight": b})), a, b)
                for a in space.ranges["learning_rate"] for b in space.ranges["loss_weight"])
    assert result.best.metric == brute[0]
    assert result.best.assignment == {"learning_rate": brute[1], "loss_weight": brute[2]}
    low = run_search(space, base, fake_objective, metric="rmse", strategy="grid")
    assert low.best.metric == min(r.metric for r in low.records)


def test_random_search_is_seeded_and_ties_go_earliest():
    space = HPOSpace({"learning_rate": (0.01, 0.1, 1.0), "batch_size": (8, 16, 32)})
    a = run_search(space, TrainConfig(), fake_objective, metric="auc", trials=7, seed=3)
    b = run_search(space, TrainConfig(), fake_objective, metric="auc", trials=7, seed=3, parallelism=3)
    assert [r.assignment for r in a.records] == [r.assignment for r in b.records]
    assert a.best == b.best
    flat = run_search(space, TrainConfig(), lambda c: 0.5, metric="auc", trials=4, seed=0)
    assert flat.best.index == 0
    one = run_search(space, TrainConfig(), fake_objective, metric="auc", trials=1, seed=9)
    assert one.best == one.records[0]


def test_diverged_trials_score_worst():
    def objective(cfg):
        if cfg.learning_rate > 0.5:
            raise TrainingDiverged(1)
        return 0.7

    space = HPOSpace({"learning_rate": (0.1, 1.0)})
    r = run_search(space, TrainConfig(), objective, metric="rmse", strategy="grid")
    assert r.records[1].diverged and r.records[1].metric == math.inf
    assert r.best.index == 0
    doc = best_document(run_search(HPOSpace({"learning_rate": (1.0,)}), TrainConfig(), objective, metric="auc",
                                   strategy="grid"))
    assert doc["metric"] is None and doc["diverged_trials"] == [0]


def test_empty_space_runs_baseline(tmp_path):
    r = run_search(HPOSpace({}), TrainConfig(), fake_objective, metric="auc")
    assert r.empty_space and len(r.records) == 1 and r.best.assignment == {}
    assert r.best.metric == fake_objective(TrainConfig())
    lines = write_trials(r, tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "trial,assignment,metric" and lines[1].startswith("0,{}")
    assert json.loads(json.dumps(best_document(r)))["empty_space"] is True
