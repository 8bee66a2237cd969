import struct

import numpy as np
import pytest

from hncrfs.errors import (
    FormatError,
    IngestionError,
    LabelValidationError,
    ParseError,
    SchemaError,
    UnsupportedFormatError,
)
from hncrfs.io import (
    read_clinical_csv,
    read_feature_table,
    read_labels,
    read_nifti,
    write_clinical_csv,
    write_feature_table,
    write_labels,
    write_nifti,
)
from hncrfs.pipeline import FeatureTable, encode_clinical
from hncrfs.survstat import SurvivalRecord
from hncrfs.volume import LabelVolume, ScalarVolume
from fixtures import byte_swapped_copy

@pytest.fixture
def scalar():
    rng = np.random.default_rng(0)
    vals = rng.normal(0, 100, (7, 5, 3)).astype(np.float32).astype(float)
    return ScalarVolume(vals, (2.0, 2.0, 2.0), (-10.5, 3.25, 100.0))


# --- NIfTI -------------------------------------------------------------------

def test_scalar_round_trip_bit_exact(tmp_path, scalar):
    write_nifti(scalar, tmp_path / "a.nii")
    back = read_nifti(tmp_path / "a.nii")
    assert back.dims == scalar.dims
    assert back.spacing == (2.0, 2.0, 2.0)
    assert back.origin == scalar.origin
    assert np.array_equal(back.values, scalar.values)


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
def test_round_trip_all_datatypes(tmp_path, dtype):
    vals = np.arange(60, dtype=float).reshape(3, 4, 5)
    write_nifti(ScalarVolume(vals, (1.5, 0.5, 3.0)), tmp_path / "a.nii", dtype=dtype)
    back = read_nifti(tmp_path / "a.nii")
    assert np.array_equal(back.values, vals)
    assert back.spacing == (1.5, 0.5, 3.0)


def test_label_round_trip_uint8(tmp_path):
    rng = np.random.default_rng(1)
    lab = LabelVolume(rng.integers(0, 3, (6, 6, 4)), (2, 2, 2))
    write_nifti(lab, tmp_path / "m.nii")
    raw = (tmp_path / "m.nii").read_bytes()
    assert struct.unpack("<h", raw[70:72])[0] == 2  # uint8 datatype code
    back = read_nifti(tmp_path / "m.nii", "label")
    assert np.array_equal(back.labels, lab.labels)
    assert set(np.unique(back.labels)) <= {0, 1, 2}


def test_byte_swapped_header(tmp_path, scalar):
    write_nifti(scalar, tmp_path / "le.nii")
    byte_swapped_copy(tmp_path / "le.nii", tmp_path / "be.nii", np.float32)
    raw = (tmp_path / "be.nii").read_bytes()
    assert struct.unpack("<h", raw[40:42])[0] == 3 * 256
    back = read_nifti(tmp_path / "be.nii")
    assert np.array_equal(back.values, scalar.values)
    assert back.spacing == scalar.spacing and back.origin == scalar.origin


def test_big_endian_writer_matches_swapped_fixture(tmp_path, scalar):
    write_nifti(scalar, tmp_path / "le.nii")
    byte_swapped_copy(tmp_path / "le.nii", tmp_path / "swapped.nii", np.float32)
    write_nifti(scalar, tmp_path / "be.nii", endian=">")
    assert (tmp_path / "be.nii").read_bytes() == (tmp_path / "swapped.nii").read_bytes()


def test_bad_magic(tmp_path, scalar):
    write_nifti(scalar, tmp_path / "a.nii")
    raw = bytearray((tmp_path / "a.nii").read_bytes())
    raw[344:348] = b"ni1\x00"
    (tmp_path / "bad.nii").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_nifti(tmp_path / "bad.nii")


def test_truncated_and_unsupported(tmp_path, scalar):
    write_nifti(scalar, tmp_path / "a.nii")
    raw = (tmp_path / "a.nii").read_bytes()
    (tmp_path / "short.nii").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        read_nifti(tmp_path / "short.nii")
    odd = bytearray(raw)
    struct.pack_into("<h", odd, 70, 32)  # complex64
    (tmp_path / "odd.nii").write_bytes(bytes(odd))
    with pytest.raises(UnsupportedFormatError):
        read_nifti(tmp_path / "odd.nii")


def test_label_out_of_range_is_named(tmp_path):
    write_nifti(ScalarVolume(np.full((2, 2, 2), 3.0)), tmp_path / "m.nii", dtype=np.uint8)
    with pytest.raises(LabelValidationError, match="3"):
        read_nifti(tmp_path / "m.nii", "label")


def test_scaling_slope_applied(tmp_path):
    write_nifti(ScalarVolume(np.arange(8.0).reshape(2, 2, 2)), tmp_path / "a.nii", dtype=np.int16)
    raw = bytearray((tmp_path / "a.nii").read_bytes())
    struct.pack_into("<2f", raw, 112, 2.0, -1.0)
    (tmp_path / "s.nii").write_bytes(bytes(raw))
    assert np.array_equal(read_nifti(tmp_path / "s.nii").values, np.arange(8.0).reshape(2, 2, 2) * 2 - 1)


# --- clinical CSV ------------------------------------------------------------

HEADER = "patient_id,gender,age,tobacco,alcohol,performance_status,hpv_status,surgery,chemotherapy,rfs_time,relapse\n"


def test_clinical_csv_missing_values(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text(HEADER + "A,M,61,0,1,0,,1,1,12.5,1\nB,F,,1,,2,1,0,1,30,0\n")
    recs = read_clinical_csv(p)
    assert recs[0].hpv_status is None and recs[1].age is None
    table = encode_clinical(recs)
    assert table.column("hpv_status")[0] == 0.0
    assert table.column("tobacco")[0] == -1.0
    assert recs[0].survival == SurvivalRecord(12.5, True)


def test_clinical_csv_errors(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("patient_id,gender\nA,M\n")
    with pytest.raises(SchemaError, match="rfs_time"):
        read_clinical_csv(p)
    p.write_text(HEADER + "A,M,61,0,1,0,,1,1,12.5,1\nB,F,old,1,,2,1,0,1,30,0\n")
    with pytest.raises(ParseError) as err:
        read_clinical_csv(p)
    assert err.value.line == 3
    p.write_text(HEADER + "A,M,61,0,1,0,,1,1,12.5,1\nA,F,50,1,,2,1,0,1,30,0\n")
    with pytest.raises(IngestionError):
        read_clinical_csv(p)
    p.write_text(HEADER + "A,M,61,0,1,0,,1,1,0,1\n")
    with pytest.raises(ParseError):
        read_clinical_csv(p)


def test_clinical_csv_round_trip(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text(HEADER + "A,M,61,0,1,0,,1,1,12.5,1\nB,F,,1,,2,1,0,1,30,0\n")
    recs = read_clinical_csv(p)
    write_clinical_csv(tmp_path / "d.csv", recs)
    assert read_clinical_csv(tmp_path / "d.csv") == recs


# --- feature tables and labels -----------------------------------------------

def test_feature_table_round_trip_exact(tmp_path):
    rng = np.random.default_rng(2)
    t = FeatureTable(["p1", "p2", "p3"], ["a", "b"], rng.normal(size=(3, 2)) * 1e-7, "PET")
    write_feature_table(t, tmp_path / "t.csv", {"seed": 3, "config_hash": "abc"})
    back = read_feature_table(tmp_path / "t.csv")
    assert back.modality == "PET"
    assert np.array_equal(back.values, t.values)
    assert back.patient_ids == t.patient_ids and back.feature_names == t.feature_names
    text = (tmp_path / "t.csv").read_text()
    assert "# config_hash=abc" in text and "# seed=3" in text


def test_labels_round_trip(tmp_path):
    recs = {"a": SurvivalRecord(1.5, True), "b": SurvivalRecord(2.25, False)}
    write_labels(tmp_path / "l.csv", recs, {"a": True, "b": False})
    back, gtvp = read_labels(tmp_path / "l.csv")
    assert back == recs and gtvp == {"a": True, "b": False}
