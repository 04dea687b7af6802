import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otfs.episodes import LabeledEmbeddingSet
from otfs.errors import FormatError
from otfs.formats import (
    decode_embeddings,
    decode_encoder,
    encode_embeddings,
    encode_encoder,
    read_embeddings,
    read_matrix,
    write_embeddings,
)


def random_set(n=10, d=4, labeled=True, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d)).astype(np.float32).astype(np.float64)
    return LabeledEmbeddingSet(x, rng.integers(0, 5, n) if labeled else None)


def reference_blob(data):
    """EMB1 bytes assembled field by field with struct, independent of numpy dtypes."""
    n, d = data.embeddings.shape
    out = b"EMB1" + struct.pack("<III", n, d, int(data.labeled))
    out += b"".join(struct.pack("<f", v) for v in data.embeddings.ravel())
    if data.labeled:
        out += b"".join(struct.pack("<I", int(v)) for v in data.labels)
    return out


def test_layout_matches_struct_reference():
    for labeled in (True, False):
        data = random_set(labeled=labeled)
        assert encode_embeddings(data) == reference_blob(data)


@pytest.mark.parametrize("suffix", [".emb", ".csv"])
def test_roundtrip_bit_identical(tmp_path, suffix):
    data = random_set()
    path = tmp_path / f"set{suffix}"
    write_embeddings(data, path)
    back = read_embeddings(path)
    assert back.embeddings.astype(np.float32).tobytes() == data.embeddings.astype(np.float32).tobytes()
    assert back.labels.tolist() == data.labels.tolist()


def test_roundtrip_unlabeled_csv(tmp_path):
    data = random_set(labeled=False)
    write_embeddings(data, tmp_path / "u.csv")
    back = read_embeddings(tmp_path / "u.csv")
    assert back.labels is None
    assert (tmp_path / "u.csv").read_text().splitlines()[0] == "e0,e1,e2,e3"


def test_csv_header_with_labels(tmp_path):
    write_embeddings(random_set(d=3), tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "label,e0,e1,e2"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 12), st.integers(1, 6), st.booleans(), st.integers(0, 1000))
def test_roundtrip_property(n, d, labeled, seed):
    data = random_set(n, d, labeled, seed)
    back = decode_embeddings(encode_embeddings(data))
    assert back.embeddings.shape == (n, d)
    assert np.array_equal(back.embeddings, data.embeddings)
    assert (back.labels is None) == (not labeled)


def test_bad_magic():
    blob = bytearray(encode_embeddings(random_set()))
    blob[:4] = b"EMB2"
    with pytest.raises(FormatError) as info:
        decode_embeddings(bytes(blob))
    assert info.value.offset == 0


def test_every_truncation_rejected():
    blob = encode_embeddings(random_set(n=6, d=3))
    for cut in range(len(blob)):
        with pytest.raises(FormatError) as info:
            decode_embeddings(blob[:cut])
        assert 0 <= info.value.offset <= cut


def test_trailing_bytes_and_bad_flag():
    blob = encode_embeddings(random_set(n=3, d=2))
    with pytest.raises(FormatError) as info:
        decode_embeddings(blob + b"\x00")
    assert info.value.offset == len(blob)
    bad_flag = blob[:12] + struct.pack("<I", 2) + blob[16:]
    with pytest.raises(FormatError) as info:
        decode_embeddings(bad_flag)
    assert info.value.offset == 12


def test_csv_field_count_mismatch(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,e0,e1\n0,1.0,2.0\n1,3.0\n")
    with pytest.raises(FormatError) as info:
        read_embeddings(path)
    assert info.value.offset == len("label,e0,e1\n0,1.0,2.0\n")


def test_csv_bad_header_and_value(tmp_path):
    (tmp_path / "h.csv").write_text("label,x,y\n0,1,2\n")
    with pytest.raises(FormatError):
        read_embeddings(tmp_path / "h.csv")
    (tmp_path / "v.csv").write_text("e0,e1\n1,abc\n")
    with pytest.raises(FormatError):
        read_embeddings(tmp_path / "v.csv")


def test_magic_bytes_win_over_suffix(tmp_path):
    data = random_set()
    (tmp_path / "looks.csv").write_bytes(encode_embeddings(data))
    assert np.array_equal(read_embeddings(tmp_path / "looks.csv").embeddings, data.embeddings)


def test_read_matrix_variants(tmp_path):
    (tmp_path / "m.json").write_text("[[1, 2], [3, 4]]")
    assert read_matrix(tmp_path / "m.json").tolist() == [[1.0, 2.0], [3.0, 4.0]]
    (tmp_path / "m.txt").write_text("# cost\n1 2 3\n4,5,6\n")
    assert read_matrix(tmp_path / "m.txt").tolist() == [[1, 2, 3], [4, 5, 6]]
    (tmp_path / "v.txt").write_text("0.25 0.75\n")
    assert read_matrix(tmp_path / "v.txt").tolist() == [0.25, 0.75]
    (tmp_path / "r.txt").write_text("1 2\n3\n")
    with pytest.raises(FormatError):
        read_matrix(tmp_path / "r.txt")
    (tmp_path / "bad.json").write_text("[[1, 2]")
    with pytest.raises(FormatError):
        read_matrix(tmp_path / "bad.json")


def test_encoder_roundtrip_and_truncation():
    rng = np.random.default_rng(0)
    w, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    blob = encode_encoder(w, b)
    w2, b2 = decode_encoder(blob)
    assert w2.tobytes() == w.tobytes() and b2.tobytes() == b.tobytes()
    for cut in range(len(blob)):
        with pytest.raises(FormatError):
            decode_encoder(blob[:cut])
    with pytest.raises(FormatError):
        decode_encoder(b"ENC2" + blob[4:])
    with pytest.raises(ValueError):
        encode_encoder(w, np.zeros(4))
