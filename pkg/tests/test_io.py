import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from seguq import io as sio
from seguq.core import Measure, ModelFamily, UncertaintyMap, UncertaintyType, UQError
from seguq.study import ReportRow, StudyReport
from seguq.toygen import build_scenario


# ----------------------------------------------------------------------- NPY


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_float_roundtrip_is_bit_exact(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("npy") / "a.npy"
    sio.write_array(p, a)
    b = sio.read_array(p)
    assert b.dtype == np.float64 and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_mask_roundtrip_and_bool(tmp_path):
    m = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    sio.write_array(tmp_path / "m.npy", m)
    assert np.array_equal(sio.read_array(tmp_path / "m.npy"), m)
    sio.write_array(tmp_path / "b.npy", m > 5)
    assert sio.read_array(tmp_path / "b.npy").dtype == np.uint8


def test_output_is_readable_by_numpy(tmp_path):
    a = np.linspace(0, 1, 12).reshape(3, 4)
    sio.write_array(tmp_path / "a.npy", a)
    assert np.array_equal(np.load(tmp_path / "a.npy"), a)
    assert (tmp_path / "a.npy").read_bytes()[6:8] == b"\x01\x00"


@pytest.mark.parametrize("arr", [np.zeros(3, np.float32), np.zeros(3, np.int64), np.zeros(3, ">f8")])
def test_unsupported_dtypes(tmp_path, arr):
    np.save(tmp_path / "x.npy", arr)
    with pytest.raises(sio.ArrayFormatError) as e:
        sio.read_array(tmp_path / "x.npy")
    assert e.value.code == "DTYPE_UNSUPPORTED"
    if arr.dtype.str != ">f8":
        with pytest.raises(sio.ArrayFormatError):
            sio.write_array(tmp_path / "y.npy", arr)


def test_fortran_order_rejected(tmp_path):
    np.save(tmp_path / "f.npy", np.asfortranarray(np.ones((3, 4))))
    with pytest.raises(sio.ArrayFormatError) as e:
        sio.read_array(tmp_path / "f.npy")
    assert e.value.code == "DTYPE_UNSUPPORTED"


def test_bad_magic_and_truncation(tmp_path):
    (tmp_path / "x.npy").write_bytes(b"PK\x03\x04 not numpy")
    with pytest.raises(sio.ArrayFormatError) as e:
        sio.read_array(tmp_path / "x.npy")
    assert e.value.code == "MAGIC_MISMATCH"
    sio.write_array(tmp_path / "a.npy", np.ones(100))
    raw = (tmp_path / "a.npy").read_bytes()
    for cut in (8, 40, len(raw) - 8):
        (tmp_path / "t.npy").write_bytes(raw[:cut])
        with pytest.raises(sio.ArrayFormatError) as e:
            sio.read_array(tmp_path / "t.npy")
        assert e.value.code == "TRUNCATED_FILE"


# ----------------------------------------------------------------- manifests


@pytest.fixture
def saved_cases(tmp_path):
    cases = [s.materialize() for s in build_scenario("S1", 0, 16)[::40]]
    entries = [sio.save_case(tmp_path, c) for c in cases]
    sio.write_manifest(tmp_path / "manifest.json", sio.Manifest("TOY", tuple(entries)))
    return tmp_path, cases


def test_manifest_roundtrip(saved_cases):
    root, cases = saved_cases
    loaded = sio.load_cases(root / "manifest.json", with_image=True)
    assert [c.case_id for c in loaded] == [c.case_id for c in cases]
    for a, b in zip(cases, loaded):
        assert a.split == b.split and a.role == b.role and tuple(a.scenario_tags) == tuple(b.scenario_tags)
        assert np.array_equal(a.raters.masks, b.raters.masks)
        assert a.image.tobytes() == b.image.tobytes()
    assert sio.read_manifest(root / "manifest.json") == sio.read_manifest(root / "manifest.json")


def test_manifest_roles_filter(saved_cases):
    root, cases = saved_cases
    train = sio.load_cases(root / "manifest.json", roles=("TRAIN",))
    assert {c.role.value for c in train} <= {"TRAIN"}
    assert len(train) == sum(c.role.value == "TRAIN" for c in cases)


def test_duplicate_ids_rejected(saved_cases):
    root, _ = saved_cases
    d = json.loads((root / "manifest.json").read_text())
    d["cases"].append(d["cases"][0])
    (root / "dup.json").write_text(json.dumps(d))
    with pytest.raises(UQError) as e:
        sio.read_manifest(root / "dup.json")
    assert e.value.code == "DUPLICATE_CASE_ID"
    m = sio.read_manifest(root / "manifest.json")
    with pytest.raises(UQError):
        sio.write_manifest(root / "w.json", sio.Manifest("X", m.cases + m.cases[:1]))


def test_missing_file_and_bad_entries(saved_cases):
    root, _ = saved_cases
    m = sio.read_manifest(root / "manifest.json")
    (root / m.cases[0].raters).unlink()
    with pytest.raises(FileNotFoundError):
        sio.read_manifest(root / "manifest.json")
    assert len(sio.read_manifest(root / "manifest.json", check_files=False).cases) == len(m.cases)
    d = json.loads((root / "manifest.json").read_text())
    d["cases"][0]["split"] = "SIDEWAYS"
    (root / "bad.json").write_text(json.dumps(d))
    with pytest.raises(UQError) as e:
        sio.read_manifest(root / "bad.json", check_files=False)
    assert e.value.code == "MANIFEST_INVALID"


# ---------------------------------------------------------------- run config


def test_config_roundtrip():
    cfg = sio.RunConfig(families=("TTD",), seeds=(4, 5), simulators={"TTD": {"n_samples": 6}}, volume_edge=32)
    again = sio.RunConfig.loads(cfg.dumps())
    assert again == cfg and again.dumps() == cfg.dumps()
    grid = again.grid()
    assert grid.seeds == (4, 5) and grid.simulator(ModelFamily.TTD, 4).n_samples == 6


@pytest.mark.parametrize("d", [{"bogus": 1}, {"families": ["NOPE"]}, {"aggregations": ["MEDIAN"]},
                               {"format_version": 9}, {"simulators": {"TTD": {"n_samples": 1}}}])
def test_config_rejects(d):
    with pytest.raises(UQError) as e:
        sio.RunConfig.from_dict(d)
    assert e.value.code == "CONFIG_INVALID"


# ------------------------------------------------------------------- reports


def _rows():
    return tuple(ReportRow("D", t, "ALL", f, "MI", "EU", "PATCH_MAX", s, v)
                 for t, f, s, v in [("AUROC", "TTD", 0, 0.9), ("AUROC", "TTD", 1, 0.8), ("NCC", "SSN", 0, -0.25)])


def test_empty_report_is_header_only():
    text = sio.report_csv(StudyReport(()))
    assert text == ",".join(sio.ROW_FIELDS) + "\n"
    assert sio.parse_report_csv(text).rows == ()


def test_report_order_independent_and_reparses():
    rows = _rows()
    a, b = StudyReport(rows), StudyReport(rows[::-1])
    assert sio.report_csv(a) == sio.report_csv(b) and sio.report_json(a) == sio.report_json(b)
    assert sio.parse_report_csv(sio.report_csv(a)) == a
    assert "0.85" in sio.summary_csv(a)


def test_report_rejects_foreign_columns():
    with pytest.raises(UQError):
        sio.parse_report_csv("a,b\n1,2\n")


def test_render_report(tmp_path):
    paths = sio.render_report(StudyReport(_rows(), ("note",)), tmp_path, extra={"study": "x"})
    d = json.loads(open(paths["json"]).read())
    assert d["notes"] == ["note"] and d["study"] == "x" and len(d["rows"]) == 3


@pytest.mark.parametrize("family,bound", [(ModelFamily.DETERMINISTIC, 0.5), (ModelFamily.TTD, 0.7),
                                          (ModelFamily.SSN, 0.7)])
def test_heatmap_bounds(tmp_path, family, bound):
    u = UncertaintyMap(np.array([0.0, 0.25, 0.6, 2.0]), Measure.PE, UncertaintyType.PU)
    meta = sio.export_heatmap(u, family, tmp_path, "h")
    assert meta["normalization"] == {"min": 0.0, "max": bound}
    assert json.loads((tmp_path / "h.json").read_text()) == meta
    h = sio.read_array(tmp_path / "h.npy")
    assert np.allclose(h, np.minimum([0.0, 0.25, 0.6, 2.0], bound) / bound) and h.max() == 1.0


def test_run_dirs_never_reused(tmp_path):
    dirs = {sio.new_run_dir(tmp_path) for _ in range(5)}
    assert len(dirs) == 5 and all(d.is_dir() for d in dirs)
