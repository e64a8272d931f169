import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurosens.config import ConfigError, parse_config
from neurosens.reports import emit_report, fmt_number, render_csv, write_json


def test_header_only_csv_for_empty_rows(tmp_path):
    p = emit_report([], "csv", tmp_path / "e.csv", ["a", "b"])
    assert p.read_text() == "a,b\n"


def test_number_formatting():
    assert render_csv([{"v": 0.5}]) == "v\n0.5\n"
    assert render_csv([{"v": 1 / 3}]) == "v\n0.333333\n"
    assert fmt_number(123456789.0) == 123457000.0
    assert render_csv([{"v": 2}]) == "v\n2\n"


def test_same_rows_give_identical_bytes(tmp_path):
    rows = [{"x": i, "series": "s", "value": i / 7} for i in range(5)]
    a = emit_report(rows, "csv", tmp_path / "a.csv").read_bytes()
    b = emit_report(rows, "csv", tmp_path / "b.csv").read_bytes()
    assert a == b
    j = emit_report(rows, "json-lines", tmp_path / "a.jsonl").read_text().splitlines()
    assert json.loads(j[1])["value"] == pytest.approx(1 / 7, rel=1e-5)


def test_unwritable_path_errors(tmp_path):
    (tmp_path / "f").write_text("x")
    with pytest.raises(OSError):
        emit_report([{"a": 1}], "csv", tmp_path / "f" / "sub.csv")
    with pytest.raises(ValueError):
        emit_report([{"a": 1}], "xml", tmp_path / "x")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    write_json(tmp_path / "d.json", {"b": 1, "a": [1.0, 0.25]})
    assert [p.name for p in tmp_path.iterdir()] == ["d.json"]


@settings(max_examples=60, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e12, max_value=1e12))
def test_six_significant_digits(v):
    text = render_csv([{"v": v}]).splitlines()[1]
    assert float(text) == pytest.approx(float(f"{v:.6g}"), rel=1e-12, abs=1e-300)


GOOD = """
[run]
seed = 4
[data]
split = 0.8, 0.1, 0.1
[attack]
kind = pgd_linf
eps_255 = 8   # comment
[eval.strong]
kind = pgd_linf
eps_unit = 0.0627
"""


def test_config_parses_and_dumps_canonically():
    cfg = parse_config(GOOD)
    assert cfg.get("run", "seed") == 4
    assert cfg.get("data", "split") == [0.8, 0.1, 0.1]
    assert cfg.attack().epsilon == pytest.approx(8 / 255)
    assert [a.epsilon for a in cfg.eval_attacks()] == [0.0627]
    cfg.set("run", "seed", 9)
    text = cfg.dumps()
    assert "seed = 9" in text
    assert parse_config(text).dumps() == text


@pytest.mark.parametrize("text,msg", [
    ("[run]\nbogus = 1\n", "unknown key"),
    ("[weird]\nx = 1\n", "unknown section"),
    ("[run]\nseed = abc\n", "seed"),
    ("[attack]\nkind = pgd_linf\neps_255 = 8\neps_unit = 0.1\n", "not both"),
    ("[attack]\nkind = nope\n", "unknown attack kind"),
    ("no header\n", "malformed"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)
