import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subtree.dataset import (Column, DataError, Dataset, Role, group_categorical, group_ordinal_at_mean,
                             load_csv, load_gbsg2, read_roles, to_csv, write_roles)


def write(tmp_path, data, roles):
    d, r = tmp_path / "d.csv", tmp_path / "d.roles"
    d.write_text(data)
    r.write_text(roles)
    return d, r


def ordinal(values):
    v = np.array([np.nan if x is None else x for x in values], dtype=float)
    return Column("x", Role.ORDINAL, np.nan_to_num(v), np.isnan(v))


def test_minimal_parse(tmp_path):
    d, r = write(tmp_path, "y,z,x1\n1.5,a,3\n2.5,b,4\n", "y r\nz t\nx1 n\n")
    ds = load_csv(d, r)
    assert ds.n_rows == 2
    assert ds.treatment.levels == ("a", "b")
    np.testing.assert_array_equal(ds.y, [1.5, 2.5])


def test_na_in_predictor_is_missing(tmp_path):
    d, r = write(tmp_path, "y,z,x1,c\n1,a,NA,u\n2,b,4,\n3,a,5,v\n", "y r\nz t\nx1 n\nc c\n")
    ds = load_csv(d, r)
    assert ds.n_rows == 3
    assert ds.column("x1").missing.tolist() == [True, False, False]
    assert ds.column("c").missing.tolist() == [False, True, False]
    assert ds.column("c").levels == ("u", "v")


def test_missing_token_is_case_sensitive(tmp_path):
    d, r = write(tmp_path, "y,z,c\n1,a,na\n2,b,NA\n", "y r\nz t\nc c\n")
    ds = load_csv(d, r)
    assert ds.column("c").levels == ("na",)


def test_excluded_columns_are_dropped(tmp_path):
    d, r = write(tmp_path, "id,y,z,x\n7,1,a,1\n8,2,b,2\n", "id x\ny r\nz t\nx n\n")
    assert [c.name for c in load_csv(d, r).columns] == ["y", "z", "x"]


@pytest.mark.parametrize("data,roles,needle", [
    ("y,z\n1,a\n2,b\n", "y r\nz t\nw n\n", "'w'"),
    ("y,z,x\n1,a,1\n2,b,2\n", "y r\nz t\n", "'x'"),
    ("y,z,x\n1,a,1\n2,b,oops\n", "y r\nz t\nx n\n", "oops"),
    ("y,z,x\nNA,a,1\n2,b,2\n", "y r\nz t\nx n\n", "'y'"),
    ("y,z,x\n1,NA,1\n2,b,2\n", "y r\nz t\nx n\n", "'z'"),
    ("y,z,d,x\n1,a,2,1\n2,b,0,2\n", "y r\nz t\nd d\nx n\n", "'d'"),
    ("y,z,x\n1,a,1\n2,a,2\n", "y r\nz t\nx n\n", "level"),
    ("y,z,x\n1,a,1\n2,b,2\n", "y r\nz q\nx n\n", "'q'"),
    ("y,z,x\n1,a,1\n", "y r\nz t\nz2 t\nx n\n", "'z2'"),
])
def test_input_errors_name_the_column(tmp_path, data, roles, needle):
    d, r = write(tmp_path, data, roles)
    with pytest.raises(DataError, match=needle):
        load_csv(d, r)


def test_roles_need_exactly_one_response_and_treatment():
    y = Column("y", Role.RESPONSE, np.zeros(2), np.zeros(2, bool))
    with pytest.raises(DataError):
        Dataset([y])


def test_treatment_reference_option(tmp_path):
    d, r = write(tmp_path, "y,z,x\n1,a,1\n2,b,2\n3,b,3\n", "y r\nz t\nx n\n")
    assert load_csv(d, r, treatment_reference="b").treatment.levels == ("b", "a")
    with pytest.raises(DataError):
        load_csv(d, r, treatment_reference="c")


def test_round_trip(tmp_path, rng):
    n = 25
    x = rng.normal(size=n)
    x[[2, 7]] = np.nan
    cat = [None if i % 6 == 0 else f"L{i % 3}" for i in range(n)]
    ds = Dataset.from_arrays(rng.normal(size=n), rng.integers(0, 2, n), ordinal={"x": x},
                             categorical={"c": cat}, event=rng.integers(0, 2, n))
    path, roles = tmp_path / "rt.csv", tmp_path / "rt.roles"
    to_csv(ds, path)
    write_roles(ds, roles)
    back = load_csv(path, roles)
    for a, b in zip(ds.columns, back.columns):
        assert a.name == b.name and a.role == b.role
        assert a.labels() == b.labels()
        np.testing.assert_array_equal(a.missing, b.missing)
    assert read_roles(roles)["delta"] is Role.EVENT


def test_group_at_mean_examples():
    g = group_ordinal_at_mean(ordinal([1, 2, 3, 4]))
    assert g.cut == 2.5
    assert g.codes.tolist() == [0, 0, 1, 1]
    assert "NA" not in g.labels
    g = group_ordinal_at_mean(ordinal([0, 0, None, 10]))
    assert g.cut == pytest.approx(10 / 3)
    assert g.sizes.tolist() == [2, 1, 1]
    assert g.labels[-1] == "NA"
    g = group_ordinal_at_mean(ordinal([5, 5, 5]))
    assert g.degenerate
    g = group_ordinal_at_mean(ordinal([None, None]))
    assert g.labels == ("NA",) and g.degenerate


def test_group_at_mean_uses_node_rows_only():
    col = ordinal([0, 1, 2, 100, 3, 4])
    g = group_ordinal_at_mean(col, rows=[0, 1, 2, 4])
    assert g.cut == pytest.approx(1.5)
    assert g.codes.tolist() == [0, 0, 1, 1]


def test_group_categorical_adds_missing_level():
    col = Column("c", Role.CATEGORICAL, np.array([0, 1, -1, 1]), np.array([False, False, True, False]),
                 ("u", "v"))
    g = group_categorical(col)
    assert g.labels == ("u", "v", "NA")
    assert g.sizes.tolist() == [1, 2, 1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(-100, 100)), min_size=1, max_size=40), st.randoms())
def test_group_at_mean_permutation_invariant(values, rnd):
    col = ordinal(values)
    perm = list(range(len(values)))
    rnd.shuffle(perm)
    a = group_ordinal_at_mean(col)
    b = group_ordinal_at_mean(col, rows=perm)
    assert a.labels == b.labels
    np.testing.assert_array_equal(a.codes[perm], b.codes)


def test_take_and_subset_partition(rng):
    ds = Dataset.from_arrays(rng.normal(size=10), rng.integers(0, 2, 10), ordinal={"x": rng.normal(size=10)})
    sub = ds.take([3, 3, 9])
    assert sub.n_rows == 3
    assert sub.y.tolist() == [ds.y[3], ds.y[3], ds.y[9]]


def test_gbsg2_bundle():
    ds = load_gbsg2()
    assert ds.n_rows == 686
    assert ds.censored
    assert ds.treatment.name == "horTh" and ds.n_treatments == 2
    assert [c.name for c in ds.predictors] == ["age", "menostat", "tsize", "tgrade", "pnodes",
                                               "progrec", "estrec"]
