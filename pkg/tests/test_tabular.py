import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blendsa.errors import MissingValueError, ParseError
from blendsa.tabular import (
    Column,
    ColumnSchema,
    ColumnTable,
    available,
    derive_indicators,
    design_matrix,
    load_schema,
    parse_formula,
    parse_schema,
    read_csv,
    response_vector,
    schema_to_json,
    write_csv,
    write_schema,
)

SCH = {
    "X": ColumnSchema("binary"),
    "Z1": ColumnSchema("binary"),
    "Z2": ColumnSchema("continuous"),
    "C": ColumnSchema("categorical", ("none", "pos", "neg"), "none"),
}


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def random_table(rng, n=100):
    data = {
        "X": rng.integers(0, 2, n).astype(float),
        "Z1": rng.integers(0, 2, n).astype(float),
        "Z2": rng.normal(size=n) * 10 ** rng.uniform(-5, 5, n),
        "C": list(rng.integers(0, 3, n)),
    }
    for k in ("X", "Z2"):
        data[k][rng.random(n) < 0.2] = np.nan
    miss = rng.random(n) < 0.2
    data["C"] = [None if m else int(c) for m, c in zip(miss, data["C"])]
    return ColumnTable.from_arrays(data, SCH)


# ---------------------------------------------------------------- read_csv

def test_empty_cell_is_masked(tmp_path):
    p = _write(tmp_path, "X,Z1,Z2,C\n1,0,0.5,none\n0,1,1.5,pos\n1,1,,neg\n0,0,2.5,none\n")
    t = read_csv(p, SCH)
    assert t.n_rows == 4
    assert t["Z2"].mask.tolist() == [True, True, False, True]
    assert t["C"].values.tolist() == [0, 1, 2, 0]


def test_binary_two_rejected_with_cell(tmp_path):
    p = _write(tmp_path, "X,Z1,Z2,C\n1,0,0.5,none\n2,1,1.5,pos\n")
    with pytest.raises(ParseError) as ei:
        read_csv(p, SCH)
    assert ei.value.row == 3 and ei.value.column == "X"


@pytest.mark.parametrize(
    "body,column",
    [
        ("1,0,abc,none\n", "Z2"),
        ("1,0,0.5,maybe\n", "C"),
        ("1,0,inf,none\n", "Z2"),
    ],
)
def test_bad_cells_named(tmp_path, body, column):
    p = _write(tmp_path, "X,Z1,Z2,C\n" + body)
    with pytest.raises(ParseError) as ei:
        read_csv(p, SCH)
    assert ei.value.column == column and ei.value.row == 2


def test_row_length_mismatch(tmp_path):
    p = _write(tmp_path, "X,Z1,Z2,C\n1,0,0.5\n")
    with pytest.raises(ParseError) as ei:
        read_csv(p, SCH)
    assert ei.value.row == 2


def test_header_checks(tmp_path):
    with pytest.raises(ParseError):
        read_csv(_write(tmp_path, ""), SCH)
    with pytest.raises(ParseError):
        read_csv(_write(tmp_path, "X,Z1,Z2\n1,0,0\n"), SCH)
    with pytest.raises(ParseError):
        read_csv(_write(tmp_path, "X,Z1,Z2,C,W\n1,0,0,none,1\n"), SCH)


def test_round_trip_bit_exact(tmp_path):
    t = random_table(np.random.default_rng(3))
    p = tmp_path / "rt.csv"
    write_csv(t, p)
    back = read_csv(p, SCH)
    assert back.equals(t)
    for name in t.names:
        np.testing.assert_array_equal(back[name].mask, t[name].mask)
        a, b = back[name].values[t[name].mask], t[name].values[t[name].mask]
        assert a.tobytes() == b.tobytes()


def test_schema_json_round_trip(tmp_path):
    p = tmp_path / "s.json"
    write_schema(SCH, p)
    assert load_schema(p) == SCH
    assert parse_schema(schema_to_json(SCH)) == SCH


def test_column_invariants():
    with pytest.raises(ValueError):
        Column("binary", np.array([0.0, 2.0]), np.array([True, True]))
    with pytest.raises(ValueError):
        Column("continuous", np.array([np.inf]), np.array([True]))
    # a masked slot may hold anything
    c = Column("binary", np.array([0.0, 7.0]), np.array([True, False]))
    assert np.isnan(c.values[1])


# ---------------------------------------------------------------- design

def test_hand_expansion():
    t = ColumnTable.from_arrays({"Y": [1.0, 2.0], "X": [1.0, 0.0], "Z1": [1.0, 1.0]})
    X, names = design_matrix(t, "Y ~ X + Z1 + X:Z1")
    assert names == ["(Intercept)", "X", "Z1", "X:Z1"]
    np.testing.assert_array_equal(X, [[1, 1, 1, 1], [1, 0, 1, 0]])
    np.testing.assert_array_equal(response_vector(t, "Y ~ X"), [1.0, 2.0])


def test_categorical_dummies():
    t = ColumnTable.from_arrays({"C": ["none", "pos", "neg"]}, SCH)
    X, names = design_matrix(t, "~ C")
    assert names == ["(Intercept)", "C[pos]", "C[neg]"]
    np.testing.assert_array_equal(X[:, 1:], [[0, 0], [1, 0], [0, 1]])


def test_categorical_interaction_brute_force():
    rng = np.random.default_rng(11)
    s = {
        "A": ColumnSchema("categorical", ("a", "b", "c"), "b"),
        "B": ColumnSchema("categorical", ("u", "v", "w"), "u"),
    }
    a = rng.integers(0, 3, 20)
    b = rng.integers(0, 3, 20)
    t = ColumnTable.from_arrays({"A": list(a), "B": list(b)}, s)
    X, names = design_matrix(t, "~ A:B - 1")
    # oracle: product of indicator pairs over non-baseline levels
    expect, enames = [], []
    for la, lb in itertools.product(["a", "c"], ["v", "w"]):
        ia, ib = s["A"].levels.index(la), s["B"].levels.index(lb)
        expect.append(((a == ia) & (b == ib)).astype(float))
        enames.append(f"A[{la}]:B[{lb}]")
    assert names == enames
    np.testing.assert_array_equal(X, np.column_stack(expect))


def test_missing_value_named():
    t = ColumnTable.from_arrays({"Y": [1.0, 2.0, 3.0], "X": [1.0, np.nan, 0.0]})
    with pytest.raises(MissingValueError) as ei:
        design_matrix(t, "Y ~ X")
    assert ei.value.column == "X" and ei.value.subject == 1
    X, _ = design_matrix(t, "Y ~ X", rows=[0, 2])
    assert X.shape == (2, 2)


def test_formula_parsing():
    f = parse_formula("Y ~ X + Z1 + X:Z1 - 1")
    assert f.response == "Y" and not f.intercept
    assert [t.label for t in f.terms] == ["X", "Z1", "X:Z1"]
    assert parse_formula(str(f)) == f
    assert parse_formula("~ 1").terms == ()


def test_available():
    t = ColumnTable.from_arrays({"a": [1.0, np.nan, 2.0], "b": [np.nan, 1.0, 1.0]})
    assert available(t, ["a", "b"]).tolist() == [False, False, True]
    assert available(t, []).tolist() == [True, True, True]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 40))
def test_row_filter_commutes(seed, n):
    rng = np.random.default_rng(seed)
    t = ColumnTable.from_arrays(
        {"X": rng.integers(0, 2, n).astype(float), "Z": rng.normal(size=n), "C": list(rng.integers(0, 3, n))},
        {"X": ColumnSchema("binary"), "C": SCH["C"]},
    )
    rows = np.flatnonzero(rng.random(n) < 0.5)
    f = "~ X + Z + C + X:Z + X:C"
    A, na = design_matrix(t, f, rows=rows)
    B, nb = design_matrix(t.take(rows), f)
    assert na == nb
    np.testing.assert_array_equal(A, B)


# ---------------------------------------------------------------- indicators

class _Mech:
    def __init__(self, variables=(), indicator=None):
        self.variables = tuple(variables)
        self.indicator = indicator


class _Mod:
    def __init__(self, *m):
        self.mechanisms = m


def test_conjunction_and_cumulative():
    t = ColumnTable.from_arrays(
        {
            "CKD0": [1.0, 0.0, 1.0, np.nan],
            "CCS0": [np.nan, 1.0, 0.0, 1.0],
            "ENR": [1.0, 1.0, 0.0, 1.0],
            "B5": [2.0, np.nan, 1.0, 1.0],
        }
    )
    mod = _Mod(_Mech(["CKD0", "CCS0"]), _Mech(indicator="ENR"), _Mech(["B5"]))
    ind = derive_indicators(t, mod)
    assert ind.R[0].tolist() == [False, True, True, False]
    assert ind.R[1].tolist() == [True, True, False, True]
    assert ind.R_bar[2].tolist() == [False, False, False, False]
    assert ind.R_bar[1].tolist() == [False, True, False, False]


def test_fully_observed_all_ones():
    t = ColumnTable.from_arrays({"a": [1.0, 2.0], "b": [3.0, 4.0]})
    ind = derive_indicators(t, _Mod(_Mech(["a"]), _Mech(["b"])))
    assert ind.R.all() and ind.R_bar.all()


def test_missing_indicator_reachable_is_error():
    t = ColumnTable.from_arrays({"a": [1.0, 2.0], "ENR": [1.0, np.nan]})
    with pytest.raises(MissingValueError):
        derive_indicators(t, _Mod(_Mech(["a"]), _Mech(indicator="ENR")))
    # unreachable subjects may have a missing indicator
    t = ColumnTable.from_arrays({"a": [1.0, np.nan], "ENR": [1.0, np.nan]})
    ind = derive_indicators(t, _Mod(_Mech(["a"]), _Mech(indicator="ENR")))
    assert ind.R_bar[1].tolist() == [True, False]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_indicators_idempotent_and_order_free(seed):
    rng = np.random.default_rng(seed)
    n = 30
    data = {c: np.where(rng.random(n) < 0.3, np.nan, rng.normal(size=n)) for c in "abcd"}
    t = ColumnTable.from_arrays(data)
    mod = _Mod(_Mech(["a", "b"]), _Mech(["c"]), _Mech(["d"]))
    one = derive_indicators(t, mod)
    two = derive_indicators(t, mod)
    rev = derive_indicators(ColumnTable.from_arrays({c: data[c] for c in "dcba"}), mod)
    np.testing.assert_array_equal(one.R, two.R)
    np.testing.assert_array_equal(one.R, rev.R)
    # R_bar is the cumulative product and non-increasing in k
    np.testing.assert_array_equal(one.R_bar, np.cumprod(one.R, axis=0).astype(bool))
    assert np.all(one.R_bar[1:] <= one.R_bar[:-1])
