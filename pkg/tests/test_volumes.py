import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ct2xray.errors import ContractViolation, FormatError
from ct2xray.geometry import ProjectionConfig, path_integral_image, pose_from_angles
from ct2xray.volumes import (PhantomSpec, Volume, from_hounsfield, generate_phantom,
                             load_image, load_volume, make_pseudo_xray, save_image,
                             save_volume, write_pgm)


def test_phantom_deterministic():
    spec = PhantomSpec(shape=(16, 16, 16))
    a = generate_phantom(spec, seed=7)
    b = generate_phantom(spec, seed=7)
    assert np.array_equal(a.voxels, b.voxels)
    c = generate_phantom(spec, seed=8)
    assert not np.array_equal(a.voxels, c.voxels)


def test_phantom_rejects_degenerate_specs():
    with pytest.raises(ContractViolation):
        generate_phantom(PhantomSpec(shape=(16, 16, 16), n_bone_bodies=0), 0)
    with pytest.raises(ContractViolation):
        generate_phantom(PhantomSpec(shape=(16, 16, 16),
                                     mu_soft=(0.05, 0.06),
                                     mu_bone=(0.01, 0.02)), 0)


def test_phantom_bone_brighter_than_background(phantom32):
    spec = PhantomSpec(shape=(32, 32, 32))
    bone_mask = phantom32.voxels >= spec.mu_bone[0]
    assert bone_mask.any()
    assert phantom32.voxels[bone_mask].mean() > phantom32.voxels[~bone_mask].mean()
    assert (phantom32.voxels >= 0).all()


def test_volume_invariants():
    with pytest.raises(ContractViolation):
        Volume(-np.ones((4, 4, 4)))
    with pytest.raises(ContractViolation):
        Volume(np.ones((4, 4, 4)), spacing=(1.0, 0.0, 1.0))


def test_hounsfield_conversion():
    vol = from_hounsfield(np.array([[[0.0, -1000.0, 1000.0]]] * 2))
    assert vol.voxels[0, 0, 0] == pytest.approx(0.02)
    assert vol.voxels[0, 0, 1] == pytest.approx(0.0)
    assert vol.voxels[0, 0, 2] == pytest.approx(0.04)


# ---------------------------------------------------------------------------
# raw file I/O
# ---------------------------------------------------------------------------

def test_volume_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.random((32, 32, 32), dtype=np.float32), (1.0, 1.0, 2.0))
    save_volume(vol, tmp_path / "v")
    back = load_volume(tmp_path / "v")
    assert np.array_equal(back.voxels, vol.voxels)
    assert back.spacing == vol.spacing


def test_sidecar_shape_mismatch(tmp_path):
    vol = Volume(np.ones((8, 8, 8), dtype=np.float32))
    save_volume(vol, tmp_path / "v")
    sidecar = tmp_path / "v.json"
    meta = json.loads(sidecar.read_text())
    meta["shape"] = [8, 8, 9]
    sidecar.write_text(json.dumps(meta))
    with pytest.raises(FormatError, match="bytes"):
        load_volume(tmp_path / "v")


def test_image_round_trip(tmp_path):
    img = np.random.default_rng(1).random((16, 24), dtype=np.float32)
    save_image(img, tmp_path / "i")
    assert np.array_equal(load_image(tmp_path / "i"), img)


def test_spacing_honored_in_path_lengths():
    # 16 voxels at 2 mm spacing = the same 32 mm physical cube
    cube = Volume(np.full((16, 16, 16), 0.02, dtype=np.float32), (2.0, 2.0, 2.0))
    cfg = ProjectionConfig(det_px=9, det_pitch_mm=6.0, step=0.05, intensity_scale=1.0)
    a = path_integral_image(cube, pose_from_angles(0, 0, cfg), cfg)
    assert a[4, 4] == pytest.approx(0.64, rel=0.01)


def test_pgm_header_and_size(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    path = write_pgm(img, tmp_path / "p.pgm")
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n4 3\n65535\n")
    assert len(blob) == len(b"P5\n4 3\n65535\n") + 12 * 2


# ---------------------------------------------------------------------------
# pseudo-X-ray transform
# ---------------------------------------------------------------------------

def test_pseudo_xray_zero_image():
    out = make_pseudo_xray(np.zeros((16, 16)), style_seed=5)
    assert np.array_equal(out, np.zeros((16, 16), dtype=np.float32))


def test_pseudo_xray_deterministic():
    img = np.random.default_rng(2).random((16, 16))
    a = make_pseudo_xray(img, style_seed=9)
    b = make_pseudo_xray(img, style_seed=9)
    assert np.array_equal(a, b)
    c = make_pseudo_xray(img, style_seed=10)
    assert not np.array_equal(a, c)


def test_pseudo_xray_not_identity_on_drr(drr_samples):
    for img in drr_samples[:5]:
        out = make_pseudo_xray(img, style_seed=3)
        assert np.abs(out.astype(np.float64) - img).mean() > 0.02


@given(st.integers(0, 10 ** 6))
def test_pseudo_xray_stays_in_unit_range(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((12, 12))
    out = make_pseudo_xray(img, style_seed=seed)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_pseudo_xray_rejects_out_of_range():
    with pytest.raises(ContractViolation):
        make_pseudo_xray(np.full((4, 4), 1.5), 0)
