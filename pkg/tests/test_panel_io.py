import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from vharcov.errors import DimensionError, ParseError, ValidationError
from vharcov.panel_io import (CovPanel, ReturnsPanel, clean_panel, load_panel, load_returns, save_panel,
                              save_returns, unvech, unvech_many, vech, vech_many)


def _dates(t, start="2020-01-01"):
    return np.datetime64(start) + np.arange(t)


# -- vech -------------------------------------------------------------------

def test_vech_examples():
    assert vech(np.array([[1.0, 2.0], [2.0, 3.0]])).tolist() == [1, 2, 3]
    assert vech(np.eye(3)).tolist() == [1, 0, 0, 1, 0, 1]


def test_vech_order_is_lower_column_major():
    m = np.array([[11, 21, 31], [21, 22, 32], [31, 32, 33]], dtype=float)
    assert vech(m).tolist() == [11, 21, 31, 22, 32, 33]


def test_unvech_examples():
    np.testing.assert_array_equal(unvech([1, 2, 3], 2), [[1, 2], [2, 3]])
    np.testing.assert_array_equal(unvech([5.0], 1), [[5.0]])


def test_vech_rejects_asymmetry_naming_entry():
    m = np.eye(3)
    m[2, 0] = 0.5
    with pytest.raises(ValidationError, match=r"\(0,2\)"):
        vech(m)


def test_unvech_length_mismatch():
    with pytest.raises(DimensionError):
        unvech([1.0, 2.0], 2)
    with pytest.raises(DimensionError):
        unvech([1.0, 2.0])


def test_vech_roundtrip_random(rng):
    for _ in range(100):
        n = int(rng.integers(1, 21))
        a = rng.standard_normal((n, n))
        m = a + a.T
        assert np.max(np.abs(unvech(vech(m), n) - m)) == 0.0


@given(hnp.arrays(np.float64, st.integers(1, 55),
                  elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)))
def test_unvech_vech_roundtrip_property(v):
    # keep only lengths that are triangular numbers
    n = int((np.sqrt(8 * v.size + 1) - 1) // 2)
    v = v[: n * (n + 1) // 2]
    np.testing.assert_array_equal(vech(unvech(v)), v)


def test_vech_many_matches_loop(rng):
    a = rng.standard_normal((4, 5, 5))
    m = a + a.transpose(0, 2, 1)
    v = vech_many(m)
    for t in range(4):
        np.testing.assert_array_equal(v[t], vech(m[t]))
    np.testing.assert_array_equal(unvech_many(v), m)


# -- panel types ------------------------------------------------------------

def test_covpanel_validation():
    with pytest.raises(ValidationError):
        CovPanel(np.array(["2020-01-02", "2020-01-01"], dtype="datetime64[D]"), ("a",), [[1.0], [1.0]])
    with pytest.raises(DimensionError):
        CovPanel(_dates(1), ("a", "b"), [[1.0, 0.0]])
    with pytest.raises(ValidationError):
        CovPanel(_dates(1), ("a",), [[-1.0]])


def test_returns_panel_rejects_gaps():
    with pytest.raises(ValidationError):
        ReturnsPanel(_dates(2), ("a",), [[0.1], [np.nan]], [0.0, 0.0])


# -- file formats -----------------------------------------------------------

def test_csv_fixture_one_day_two_assets(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("date,v1,v2,v3\n2021-03-04,1.5,0.25,2\n")
    panel = load_panel(p)
    assert panel.t == 1 and panel.n == 2
    np.testing.assert_array_equal(panel.matrix(0), [[1.5, 0.25], [0.25, 2.0]])


def test_csv_nan_cell_reports_row_and_column(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("date,v1,v2,v3\n2021-03-04,1,0,1\n2021-03-05,1,nan,1\n")
    with pytest.raises(ParseError) as info:
        load_panel(p)
    assert info.value.line == 3 and info.value.column == 3
    assert "line 3" in str(info.value) and "column 3" in str(info.value)


@pytest.mark.parametrize("text", [
    "day,v1\n2021-01-01,1\n",                        # header
    "date,v1,v2\n2021-01-01,1,2\n",                  # 2 is not triangular
    "date,v1\n2021-01-02,1\n2021-01-01,1\n",         # dates decreasing
    "date,v1\n2021-01-01,inf\n",                     # non-finite
    "date,v1\n2021-01-01,1,2\n",                     # ragged row
])
def test_csv_malformed(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ParseError):
        load_panel(p)


def _random_panel(rng, t=7, n=4):
    a = rng.standard_normal((t, n, n))
    mats = np.einsum("tij,tkj->tik", a, a)
    return CovPanel(_dates(t), tuple(f"X{i}" for i in range(n)), vech_many(mats))


def test_binary_roundtrip_byte_identical(tmp_path, rng):
    panel = _random_panel(rng)
    p1, p2 = tmp_path / "a.cvp", tmp_path / "b.cvp"
    save_panel(panel, p1)
    back = load_panel(p1)
    save_panel(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(back.mats, panel.mats)
    assert back.assets == panel.assets
    np.testing.assert_array_equal(back.dates, panel.dates)


def test_binary_layout(tmp_path):
    panel = CovPanel(np.array(["1970-01-03"], dtype="datetime64[D]"), ("a",), [[2.0]])
    p = tmp_path / "x.cvp"
    save_panel(panel, p)
    raw = p.read_bytes()
    assert raw[:4] == b"CVP1"
    assert int.from_bytes(raw[4:12], "little") == 1 and int.from_bytes(raw[12:20], "little") == 1
    assert int.from_bytes(raw[20:28], "little", signed=True) == 2
    assert np.frombuffer(raw[28:36], "<f8")[0] == 2.0


def test_binary_truncated(tmp_path, rng):
    p = tmp_path / "a.cvp"
    save_panel(_random_panel(rng), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ParseError):
        load_panel(p)


def test_csv_roundtrip_exact(tmp_path, rng):
    panel = _random_panel(rng)
    p = tmp_path / "a.csv"
    save_panel(panel, p)
    back = load_panel(p)
    np.testing.assert_array_equal(back.mats, panel.mats)  # 17 significant digits round-trip doubles
    assert back.assets == panel.assets


@pytest.mark.parametrize("suffix", [".csv", ".rtp"])
def test_returns_roundtrip(tmp_path, rng, suffix):
    r = ReturnsPanel(_dates(5), ("a", "b"), rng.standard_normal((5, 2)) * 0.01, np.full(5, 1e-4))
    p = tmp_path / f"r{suffix}"
    save_returns(r, p)
    back = load_returns(p)
    np.testing.assert_array_equal(back.returns, r.returns)
    np.testing.assert_array_equal(back.risk_free, r.risk_free)
    assert back.assets == r.assets


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.cvp"):
        load_panel(tmp_path / "nope.cvp")


# -- cleaning ---------------------------------------------------------------

def _noise_panel(rng, t=80, n=4):
    base = np.eye(n) + 0.2
    mats = base + 0.01 * rng.standard_normal((t, n, n))
    mats = 0.5 * (mats + mats.transpose(0, 2, 1))
    return CovPanel(_dates(t), tuple("abcd"[:n]), vech_many(mats))


def test_clean_no_spikes_is_identity(rng):
    panel = _noise_panel(rng)
    cleaned, report = clean_panel(panel)
    assert report.flagged_days == ()
    np.testing.assert_array_equal(cleaned.mats, panel.mats)


def test_clean_spiked_day_flagged_and_replaced():
    n, days = 8, 50
    m = n * (n + 1) // 2
    const = np.tile(1.0 + 0.25 * np.arange(m), (days + 1, 1))  # dyadic: averages are exact
    diag = [j * n - j * (j - 1) // 2 for j in range(n)]
    const[:, diag] += 10.0
    mats = const.copy()
    k = int(np.ceil(0.3 * m))
    mats[days, :k] += 10.0  # a constant history has zero sd, so any jump is extreme
    panel = CovPanel(_dates(days + 1), tuple(f"a{i}" for i in range(n)), mats)
    cleaned, report = clean_panel(panel)
    assert report.flagged_days == (days,)
    assert report.sources[days] == tuple(range(days - 1, days - 11, -1))
    np.testing.assert_array_equal(cleaned.mats[days], np.mean(mats[days - 10:days], axis=0))
    np.testing.assert_array_equal(cleaned.mats[days], const[days])
    np.testing.assert_array_equal(cleaned.mats[:days], mats[:days])
    # input untouched
    assert panel.mats[days, 0] == const[days, 0] + 10.0


def test_clean_boundary_exactly_quarter_not_flagged():
    n, days = 7, 30                      # M = 28, 7 entries = exactly 25%
    m = n * (n + 1) // 2
    mats = np.ones((days + 1, m))
    mats[days, :7] += 5.0
    panel = CovPanel(_dates(days + 1), tuple(f"a{i}" for i in range(n)), mats)
    _, report = clean_panel(panel)
    assert report.fraction_extreme[days] == 0.25
    assert report.flagged_days == ()
    mats[days, :8] += 5.0
    _, report = clean_panel(CovPanel(panel.dates, panel.assets, mats))
    assert report.flagged_days == (days,)


def test_clean_first_two_days_never_flagged():
    mats = np.array([[1.0], [100.0], [1.0], [1.0]])
    _, report = clean_panel(CovPanel(_dates(4), ("a",), mats), min_history=2)
    assert 0 not in report.flagged_days and 1 not in report.flagged_days
    assert report.fraction_extreme[0] == report.fraction_extreme[1] == 0


def test_clean_uses_available_history_when_short():
    mats = np.array([[1.0], [1.0], [1.0], [50.0]])
    cleaned, report = clean_panel(CovPanel(_dates(4), ("a",), mats), min_history=2)
    assert report.flagged_days == (3,)
    assert report.sources[3] == (2, 1, 0)
    assert cleaned.mats[3, 0] == 1.0


def test_clean_idempotent_and_unflagged_untouched(rng):
    panel = _noise_panel(rng, t=120)
    mats = panel.mats.copy()
    for day in (40, 77, 78):
        mats[day] *= 30.0
    panel = CovPanel(panel.dates, panel.assets, mats)
    cleaned, report = clean_panel(panel)
    assert set(report.flagged_days) == {40, 77, 78}
    keep = np.setdiff1d(np.arange(panel.t), report.flagged_days)
    np.testing.assert_array_equal(cleaned.mats[keep], panel.mats[keep])
    again, report2 = clean_panel(cleaned)
    assert report2.flagged_days == ()
    np.testing.assert_array_equal(again.mats, cleaned.mats)
    assert np.all((report.fraction_extreme >= 0) & (report.fraction_extreme <= 1))


def test_clean_min_history_delays_testing():
    mats = np.array([[1.0], [1.0], [1.0], [50.0]])
    _, report = clean_panel(CovPanel(_dates(4), ("a",), mats))
    assert report.flagged_days == ()
    with pytest.raises(ValidationError):
        clean_panel(CovPanel(_dates(4), ("a",), mats), min_history=1)


def test_clean_noisy_start_does_not_cascade():
    # with a 2-day history this panel flags day 2; feeding replacements back
    # into the statistics used to flag every later day as well
    rng = np.random.default_rng(1010)
    mats = 1.0 + 0.01 * rng.standard_normal((60, 36))
    panel = CovPanel(_dates(60), tuple(f"a{i}" for i in range(8)), mats)
    _, early = clean_panel(panel, min_history=2)
    assert early.flagged_days[0] == 2 and len(early.flagged_days) < 5
    cleaned, report = clean_panel(panel)
    assert report.flagged_days == ()
    np.testing.assert_array_equal(cleaned.mats, mats)


def test_clean_flagged_days_excluded_from_statistics():
    # two identical spikes in a row: the first must not widen the band for the second
    mats = np.ones((40, 1))
    mats[::2] += 0.01
    mats[30] = mats[31] = 5.0
    _, report = clean_panel(CovPanel(_dates(40), ("a",), mats))
    assert report.flagged_days == (30, 31)
