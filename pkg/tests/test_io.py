import struct

import numpy as np
import pytest

from vitp import io
from vitp.io import FormatError
from vitp.model import SCRATCH_PREFIXES, ModelConfig, init_params
from vitp.structures import ProposalSet


def random_set(rng, n=4, k=5, hw=(6, 7)):
    scores = rng.dirichlet(np.ones(k + 1), n).astype(np.float32).astype(np.float64)
    return ProposalSet(rng.uniform(0, 1, (n, *hw)).astype(np.float32), scores, "000042")


def test_fnv1a64_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert io.fnv1a64(b"") == 0xCBF29CE484222325
    assert io.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert io.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_proposal_round_trip_bitwise(tmp_path):
    props = random_set(np.random.default_rng(0))
    path = io.proposal_path(tmp_path, props.image_id)
    io.write_proposals(props, path)
    back = io.read_proposals(path)
    assert back.image_id == "000042"
    assert back.masks.tobytes() == props.masks.tobytes()
    assert np.array_equal(back.class_scores, props.class_scores)
    io.write_proposals(back, tmp_path / "again.vtp")
    assert (tmp_path / "again.vtp").read_bytes() == path.read_bytes()


def test_proposal_header_layout(tmp_path):
    props = random_set(np.random.default_rng(1), n=2, k=3, hw=(4, 5))
    io.write_proposals(props, tmp_path / "a.vtp")
    data = (tmp_path / "a.vtp").read_bytes()
    assert data[:4] == b"VTP1"
    assert struct.unpack("<6I", data[4:28]) == (1, 4, 5, 2, 3, 1)
    assert len(data) == 28 + 2 * 4 * 5 * 4 + 2 * 4 * 4


def test_proposal_u8_quantisation(tmp_path):
    props = random_set(np.random.default_rng(2))
    io.write_proposals(props, tmp_path / "q.vtp", mask_format="u8")
    back = io.read_proposals(tmp_path / "q.vtp")
    assert np.max(np.abs(back.masks.astype(np.float64) - props.masks)) <= 1 / 510 + 1e-7
    with pytest.raises(ValueError):
        io.write_proposals(props, tmp_path / "x.vtp", mask_format="f16")


def test_proposal_errors(tmp_path):
    props = random_set(np.random.default_rng(3))
    path = tmp_path / "p.vtp"
    io.write_proposals(props, path)
    data = path.read_bytes()
    (tmp_path / "t.vtp").write_bytes(data[:-3])
    with pytest.raises(FormatError, match=f"expected {len(data)} bytes, file has {len(data) - 3}"):
        io.read_proposals(tmp_path / "t.vtp")
    (tmp_path / "m.vtp").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="bad magic"):
        io.read_proposals(tmp_path / "m.vtp")
    (tmp_path / "v.vtp").write_bytes(data[:4] + struct.pack("<I", 7) + data[8:])
    with pytest.raises(FormatError, match="version"):
        io.read_proposals(tmp_path / "v.vtp")
    (tmp_path / "h.vtp").write_bytes(data[:10])
    with pytest.raises(FormatError, match="truncated"):
        io.read_proposals(tmp_path / "h.vtp")


def test_checkpoint_round_trip(tmp_path):
    params = init_params(ModelConfig(num_classes=3, image_size=(16, 16), patch_size=4, embed_dim=16,
                                     depth=1, heads=2), seed=5)
    io.write_checkpoint(params, tmp_path / "c.vtpc")
    back = io.read_checkpoint(tmp_path / "c.vtpc")
    assert list(back) == sorted(params)
    for name in params:
        assert back[name].data.tobytes() == params[name].data.tobytes()
    io.write_checkpoint(back, tmp_path / "d.vtpc")
    assert (tmp_path / "d.vtpc").read_bytes() == (tmp_path / "c.vtpc").read_bytes()


def test_checkpoint_flipped_byte(tmp_path):
    params = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(2, np.float32)}
    io.write_checkpoint(params, tmp_path / "c.vtpc")
    data = bytearray((tmp_path / "c.vtpc").read_bytes())
    data[30] ^= 0x01
    (tmp_path / "bad.vtpc").write_bytes(bytes(data))
    with pytest.raises(FormatError, match="checksum mismatch at byte"):
        io.read_checkpoint(tmp_path / "bad.vtpc")


def test_checkpoint_duplicate_names(tmp_path):
    body = bytearray(b"VTPC" + struct.pack("<II", 1, 2))
    for _ in range(2):
        body += struct.pack("<I", 1) + b"w" + struct.pack("<II", 1, 1) + np.float32(1).tobytes()
    body += struct.pack("<Q", io.fnv1a64(bytes(body)))
    (tmp_path / "dup.vtpc").write_bytes(bytes(body))
    with pytest.raises(FormatError, match="duplicate"):
        io.read_checkpoint(tmp_path / "dup.vtpc")


def test_box_checkpoint_names_cover_point_model(tmp_path):
    cfg = ModelConfig(num_classes=4, image_size=(16, 16), patch_size=4, embed_dim=16, depth=1, heads=2)
    io.write_checkpoint(init_params(cfg, 0), tmp_path / "box.vtpc")
    names = set(io.read_checkpoint(tmp_path / "box.vtpc"))
    required = {n for n in init_params(cfg, 1) if not n.startswith(SCRATCH_PREFIXES)}
    assert required <= names


def test_pnm_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    io.write_ppm(img, tmp_path / "a.ppm")
    assert np.array_equal(io.read_ppm(tmp_path / "a.ppm"), img)
    ids = rng.integers(0, 65536, (5, 7)).astype(np.uint16)
    io.write_pgm16(ids, tmp_path / "a.pgm")
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n65535\n")
    assert np.array_equal(io.read_pgm16(tmp_path / "a.pgm"), ids)


def test_pgm_maxval_must_be_65535(tmp_path):
    (tmp_path / "b.pgm").write_bytes(b"P5\n2 1\n255\n" + bytes(2))
    with pytest.raises(FormatError, match="maxval 65535"):
        io.read_pgm16(tmp_path / "b.pgm")
    (tmp_path / "c.pgm").write_bytes(b"P5\n2 x\n65535\n" + bytes(4))
    with pytest.raises(FormatError, match="malformed PNM header"):
        io.read_pgm16(tmp_path / "c.pgm")


def test_dataset_round_trip(tmp_path, small_dataset):
    io.write_dataset(small_dataset, tmp_path / "ds")
    back = io.read_dataset(tmp_path / "ds")
    assert back.taxonomy.to_dict() == small_dataset.taxonomy.to_dict()
    assert len(back.images) == len(small_dataset.images)
    for a, b in zip(small_dataset.images, back.images):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.fine, b.fine)
        assert np.array_equal(a.coarse, b.coarse)
        assert a.segments == b.segments and a.boxes == b.boxes
        assert (a.image_id, a.split) == (b.image_id, b.split)
    io.write_dataset(back, tmp_path / "ds2")
    assert io.tree_digest(tmp_path / "ds") == io.tree_digest(tmp_path / "ds2")


def test_dataset_audit_errors(tmp_path, small_dataset):
    root = tmp_path / "ds"
    io.write_dataset(small_dataset, root)
    fine = root / "train" / "fine_000000.pgm"
    ids = io.read_pgm16(fine)
    ids[0, 0] = 999
    io.write_pgm16(ids, fine)
    with pytest.raises(FormatError, match="absent from the meta table"):
        io.read_dataset(root)
    (root / "train" / "meta_000000.json").unlink()
    with pytest.raises(FormatError, match="missing"):
        io.read_dataset(root)


def test_reports_are_stable(tmp_path):
    io.write_json({"b": np.float64(0.5), "a": np.arange(2)}, tmp_path / "r.json")
    assert (tmp_path / "r.json").read_text().startswith('{\n  "a": [\n    0,\n    1\n  ],\n  "b": 0.5')
    io.write_csv([{"config": "x", "mIoU": 1.5}], ["config", "PQ", "mIoU"], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == "config,PQ,mIoU\nx,,1.5\n"
