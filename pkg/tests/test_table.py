import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tablefuse.table import (
    MISSING, CorruptionPlan, Modality, StructuredTable, TableError, corrupt, generate_synthetic_dataset,
    load_table, maskable_columns, save_table, synthetic_image_features, synthetic_rule, write_sidecars,
)


def small():
    return StructuredTable(("a", "b", "y"), (("1", "x", "0"), ("2", "y", "1"), ("3", "x", "1")), "y")


def test_modality_order_is_canonical():
    assert [m.value for m in Modality] == ["numerical", "categorical", "text", "image_path", "video_path",
                                           "identifier"]
    assert Modality.TEXT.rank == 2


@pytest.mark.parametrize("columns,cells,label,msg", [
    (("a", "a"), (), None, "duplicate"),
    (("a", ""), (), None, "empty"),
    (("a", "b"), (("1",),), None, "ragged row 0"),
    (("a",), ((1,),), None, "non-string"),
    (("a",), (), "z", "label column"),
])
def test_table_validation(columns, cells, label, msg):
    with pytest.raises(TableError, match=msg):
        StructuredTable(columns, cells, label)


def test_accessors_and_select():
    t = small()
    assert t.n_rows == 3 and t.feature_columns == ["a", "b"]
    assert t.column("b") == ["x", "y", "x"]
    assert t.row(1) == {"a": "2", "b": "y", "y": "1"}
    s = t.select_columns(["b"])
    assert s.columns == ("b",) and s.label_column is None
    with pytest.raises(KeyError):
        t.index("nope")


def test_csv_round_trip_with_commas_and_quotes(tmp_path):
    t = StructuredTable(("text", "y"), (('a, "quoted" cell', "1"), ("line\nbreak", "0")), "y")
    p = save_table(t, tmp_path / "t.csv")
    back = load_table(p, "y")
    assert back.cells == t.cells and back.columns == t.columns


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_table(tmp_path / "missing.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(TableError, match="no header"):
        load_table(tmp_path / "empty.csv")
    (tmp_path / "ragged.csv").write_text("a,b\n1,2\n3\n")
    with pytest.raises(TableError, match="ragged row 1"):
        load_table(tmp_path / "ragged.csv")
    (tmp_path / "ok.csv").write_text("a,b\n1,2\n")
    with pytest.raises(TableError, match="label"):
        load_table(tmp_path / "ok.csv", "y")


def test_synthetic_dataset_follows_rule(tmp_path):
    t = generate_synthetic_dataset(200, 3, sidecar_dir=tmp_path)
    for row in (t.row(i) for i in range(t.n_rows)):
        assert row["adopted"] == str(synthetic_rule(int(row["age"]), row["gender"]))
        assert (tmp_path / row["images"]).is_file()
    assert generate_synthetic_dataset(200, 3).cells == t.cells
    with pytest.raises(TableError):
        generate_synthetic_dataset(1, 0)


def test_synthetic_is_linearly_separable_by_oracle():
    # independent oracle: a logistic regression on (age, one-hot gender)
    LogisticRegression = pytest.importorskip("sklearn.linear_model").LogisticRegression
    import numpy as np
    t = generate_synthetic_dataset(500, 7)
    age = np.array([float(a) for a in t.column("age")])
    g = np.array(t.column("gender"))
    X = np.column_stack([(age - 50) / 30, g == "1", g == "2", g == "3"]).astype(float)
    y = np.array([int(v) for v in t.column("adopted")])
    clf = LogisticRegression(C=1e4, max_iter=5000).fit(X, y)
    assert clf.score(X, y) >= 0.97


def test_sidecars_round_trip(tmp_path):
    t = generate_synthetic_dataset(4, 0)
    feats = synthetic_image_features(4, 0)
    write_sidecars(t, tmp_path, feats)
    vals = [float(v) for v in (tmp_path / t.column("images")[2]).read_text().split()]
    assert vals == list(feats[2])


def test_corrupt_masks_exact_fraction_and_records_plan():
    t = generate_synthetic_dataset(50, 1)
    out, plan = corrupt(t, 0.2, 4, seed=5)
    assert maskable_columns(t) == ["age", "gender", "description"]
    for col in ("age", "gender", "description"):
        assert out.column(col).count(MISSING) == 10
    assert MISSING not in out.column("images") and MISSING not in out.column("adopted")
    assert [n for n, _ in plan.noise_columns] == ["lucky_number", "favorite_color", "memo", "lucky_number_1"]
    assert out.columns[:5] == t.columns
    for r, c in plan.masked_positions:
        assert out.row(r)[c] == MISSING
    again = CorruptionPlan.from_json(json.loads(plan.dumps()))
    assert again == plan
    assert corrupt(t, 0.2, 4, seed=5)[0] == out


def test_corrupt_honours_modality_map_and_bounds():
    t = generate_synthetic_dataset(10, 1)
    mods = {"age": Modality.IDENTIFIER}
    assert "age" not in maskable_columns(t, mods)
    with pytest.raises(TableError):
        corrupt(t, 1.5, 0, 0)
    with pytest.raises(TableError):
        corrupt(t, 0.1, -1, 0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 60), f=st.floats(0, 1), seed=st.integers(0, 1000))
def test_corrupt_count_property(n, f, seed):
    t = generate_synthetic_dataset(n, 0)
    out, plan = corrupt(t, f, 0, seed)
    expected = math.floor(f * n + 0.5 + 1e-9)
    assert all(out.column(c).count(MISSING) == expected for c in ("age", "gender", "description"))
    assert len(plan.masked_positions) == 3 * expected
