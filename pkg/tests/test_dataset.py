import json
import math

import numpy as np
import pytest

from lapreg.dataset import (generate_sample, load_patient, read_sample,
                            samples_equal, write_sample)
from lapreg.errors import ConfigError
from lapreg.meshio import save_mesh_ply


@pytest.fixture(scope="module")
def tiny_patient(tmp_path_factory, dense_sphere_mesh):
    """A small sphere-based bundle so sample synthesis stays fast."""
    root = tmp_path_factory.mktemp("tiny_patient")
    save_mesh_ply(root / "surface.ply", dense_sphere_mesh, dtype="float64")
    lobe = [int(i) for i in range(60)]
    (root / "lobe.json").write_text(json.dumps(lobe))
    (root / "patient.toml").write_text(
        "schema_version = 1\n"
        'name = "tiny"\n'
        "[paths]\n"
        'surface_mesh = "surface.ply"\n'
        'lobe_labels = "lobe.json"\n'
        "[crop]\n"
        "keep_fraction = 0.08\n"
        "[deform]\n"
        'types = ["compression"]\n'
        "handle_fraction = 0.05\n"
        "compression_max = 0.06\n"
        "[rigid]\n"
        "max_angle = 20.0\n"
        "max_translation = 0.05\n"
        "[noise]\n"
        "sigma = 0.0\n"
    )
    return load_patient(root / "patient.toml")


@pytest.fixture(scope="module")
def noisy_patient(tmp_path_factory, dense_sphere_mesh):
    root = tmp_path_factory.mktemp("noisy_patient")
    save_mesh_ply(root / "surface.ply", dense_sphere_mesh, dtype="float64")
    (root / "patient.toml").write_text(
        "schema_version = 1\n"
        'name = "noisy"\n'
        "[paths]\n"
        'surface_mesh = "surface.ply"\n'
        "[deform]\n"
        'types = ["compression"]\n'
        "[noise]\n"
        "sigma = 0.002\n"
    )
    return load_patient(root / "patient.toml")


class TestPatientLoading:
    def test_normalized_to_unit_diagonal(self, tiny_patient):
        v = tiny_patient.surface.vertices
        diag = np.linalg.norm(v.max(axis=0) - v.min(axis=0))
        assert abs(diag - 1.0) < 1e-9
        assert tiny_patient.scale_mm == pytest.approx(
            tiny_patient.normalization.diagonal)

    def test_config_echo(self, tiny_patient):
        assert tiny_patient.crop.keep_fraction == 0.08
        assert tiny_patient.deform.compression_max == 0.06
        assert tiny_patient.rigid_max_angle == 20.0
        assert tiny_patient.noise_sigma == 0.0

    def test_unknown_key_rejected(self, tmp_path, dense_sphere_mesh):
        save_mesh_ply(tmp_path / "surface.ply", dense_sphere_mesh)
        (tmp_path / "patient.toml").write_text(
            "schema_version = 1\n"
            "[paths]\n"
            'surface_mesh = "surface.ply"\n'
            "[crop]\n"
            "keep_fractoin = 0.1\n"  # typo must fail loudly
        )
        with pytest.raises(ConfigError):
            load_patient(tmp_path / "patient.toml")

    def test_schema_version_required(self, tmp_path, dense_sphere_mesh):
        save_mesh_ply(tmp_path / "surface.ply", dense_sphere_mesh)
        (tmp_path / "patient.toml").write_text(
            "[paths]\nsurface_mesh = \"surface.ply\"\n")
        with pytest.raises(ConfigError):
            load_patient(tmp_path / "patient.toml")

    def test_missing_surface(self, tmp_path):
        (tmp_path / "patient.toml").write_text(
            "schema_version = 1\n[paths]\nsurface_mesh = \"absent.ply\"\n")
        with pytest.raises(ConfigError):
            load_patient(tmp_path / "patient.toml")


class TestGenerateSample:
    def test_deterministic(self, tiny_patient):
        a = generate_sample(tiny_patient, 3)
        b = generate_sample(tiny_patient, 3)
        assert samples_equal(a, b)

    def test_different_seeds_differ(self, tiny_patient):
        a = generate_sample(tiny_patient, 1)
        b = generate_sample(tiny_patient, 2)
        assert not samples_equal(a, b)

    def test_complete_is_shuffled_rigid_rest(self, tiny_patient):
        s = generate_sample(tiny_patient, 4)
        rest = tiny_patient.surface.vertices
        np.testing.assert_allclose(
            s.complete.points, s.rigid.apply(rest)[s.perm_x], atol=1e-12)

    def test_partial_is_shuffled_deformed_crop(self, tiny_patient):
        s = generate_sample(tiny_patient, 4)
        np.testing.assert_allclose(
            s.partial.points, s.gt_deformed[s.retained][s.perm_y], atol=1e-12)

    def test_gt_matches_link_same_vertex(self, tiny_patient):
        s = generate_sample(tiny_patient, 5)
        pairs = s.gt_matches.pairs
        # complete row i and partial row j must refer to one original vertex
        orig_of_complete = s.perm_x[pairs[:, 0]]
        np.testing.assert_array_equal(
            np.sort(orig_of_complete), np.sort(s.retained))
        np.testing.assert_allclose(
            s.gt_deformed[orig_of_complete],
            s.partial.points[pairs[:, 1]], atol=1e-12)

    def test_hidden_mask_complements_candidates(self, tiny_patient):
        s = generate_sample(tiny_patient, 6)
        mask = s.hidden_vertex_mask()
        assert mask.dtype == bool
        assert not np.any(mask[s.candidates])
        assert mask.sum() == len(s.complete) - len(s.candidates)

    def test_crop_size_contract(self, tiny_patient):
        s = generate_sample(tiny_patient, 7)
        M = len(tiny_patient.surface.vertices)
        expected = math.ceil(tiny_patient.crop.keep_fraction * M)
        if not s.flagged:
            assert len(s.partial) == expected
        else:
            assert len(s.partial) < expected

    def test_overlap_labels(self, tiny_patient):
        s = generate_sample(tiny_patient, 8)
        assert s.gt_overlap_x.sum() == len(s.partial)
        assert np.all(s.gt_overlap_y == 1)

    def test_noise_applied_to_partial_only(self, noisy_patient):
        s = generate_sample(noisy_patient, 2)
        rest = noisy_patient.surface.vertices
        np.testing.assert_allclose(
            s.complete.points, s.rigid.apply(rest)[s.perm_x], atol=1e-12)
        residual = s.partial.points - s.gt_deformed[s.retained][s.perm_y]
        rms = np.sqrt(np.mean(residual**2))
        assert 0.0005 < rms < 0.005


def test_sample_roundtrip(tmp_path, tiny_patient):
    s = generate_sample(tiny_patient, 11)
    write_sample(s, tmp_path / "sample")
    back = read_sample(tmp_path / "sample")
    assert samples_equal(s, back)
    assert back.scale_mm == pytest.approx(s.scale_mm)
    np.testing.assert_array_equal(back.constraints.handle_indices,
                                  s.constraints.handle_indices)
