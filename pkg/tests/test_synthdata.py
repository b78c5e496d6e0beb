from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from consinstancy import tensorio
from consinstancy.synthdata import (
    DatasetManifest,
    SceneSpec,
    SceneTooDenseError,
    generate_dataset,
    generate_scene,
)

GAPPED = SceneSpec(
    height=48, width=48, particle_count_range=(2, 4), radius_range=(4.0, 8.0), seed=11
)

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_EIGHT = np.ones((3, 3), dtype=bool)


def test_scene_deterministic():
    img1, ids1 = generate_scene(GAPPED, 5)
    img2, ids2 = generate_scene(GAPPED, 5)
    np.testing.assert_array_equal(img1, img2)
    np.testing.assert_array_equal(ids1, ids2)
    img3, _ = generate_scene(GAPPED, 6)
    assert not np.array_equal(img1, img3)


def test_scene_shapes_and_ranges():
    for seed in range(10):
        img, ids = generate_scene(GAPPED, seed)
        assert img.dtype == np.float32 and ids.dtype == np.int32
        assert img.shape == (48, 48) and ids.shape == (48, 48)
        assert 0.0 <= img.min() and img.max() <= 1.0
        present = np.unique(ids)
        count = present.max()
        assert 2 <= count <= 4
        # contiguous ids starting at 1, with 0 for the suspension
        np.testing.assert_array_equal(present, np.arange(count + 1))


def test_instances_are_single_4connected_components():
    for seed in range(10):
        _, ids = generate_scene(GAPPED, seed)
        for oid in range(1, ids.max() + 1):
            _, n = ndimage.label(ids == oid, structure=_FOUR)
            assert n == 1


def test_gap_guarantee_without_adjacency():
    for seed in range(20):
        _, ids = generate_scene(GAPPED, seed)
        for oid in range(1, ids.max() + 1):
            ring = ndimage.binary_dilation(ids == oid, structure=_EIGHT) & (ids != oid)
            assert not (ids[ring] > 0).any()


def test_adjacent_placement_touches():
    spec = SceneSpec(
        height=64,
        width=64,
        particle_count_range=(3, 3),
        radius_range=(5.0, 8.0),
        adjacency_prob=1.0,
        seed=0,
    )
    for seed in range(10):
        _, ids = generate_scene(spec, seed)
        touching = False
        for oid in range(1, ids.max() + 1):
            ring = ndimage.binary_dilation(ids == oid, structure=_EIGHT) & (ids != oid)
            if (ids[ring] > 0).any():
                touching = True
        assert touching
        # touching is contact, never overlap: instances stay disjoint by id
        assert (np.bincount(ids[ids > 0]) > 0).sum() == ids.max()


def test_too_dense_raises():
    spec = SceneSpec(
        height=32, width=32, particle_count_range=(6, 6), radius_range=(10.0, 11.0)
    )
    with pytest.raises(SceneTooDenseError):
        generate_scene(spec, 0)


def test_spec_validation():
    assert GAPPED.validate() is GAPPED
    with pytest.raises(ValueError):
        SceneSpec(radius_range=(0.0, 5.0)).validate()
    with pytest.raises(ValueError):
        SceneSpec(height=64, width=64, radius_range=(4.0, 32.0)).validate()
    with pytest.raises(ValueError):
        SceneSpec(particle_count_range=(5, 3)).validate()
    with pytest.raises(ValueError):
        SceneSpec(adjacency_prob=1.5).validate()
    with pytest.raises(ValueError):
        SceneSpec(noise_std=-0.1).validate()
    with pytest.raises(ValueError):
        SceneSpec(boundary_softness=-1.0).validate()


def test_spec_dict_round_trip():
    spec = SceneSpec(adjacency_prob=0.3, boundary_softness=1.5, seed=9)
    assert SceneSpec.from_dict(spec.to_dict()) == spec


def test_rendering_params_do_not_move_particles():
    crisp = replace(GAPPED, boundary_softness=0.0, noise_std=0.02)
    soft = replace(GAPPED, boundary_softness=2.0, noise_std=0.05)
    img_c, ids_c = generate_scene(crisp, 4)
    img_s, ids_s = generate_scene(soft, 4)
    np.testing.assert_array_equal(ids_c, ids_s)
    assert not np.array_equal(img_c, img_s)


def test_generate_dataset_layout(tmp_path):
    manifest = generate_dataset(GAPPED, 2, 3, tmp_path, split_name="train")
    assert len(manifest.labeled_items) == 2
    assert len(manifest.unlabeled_items) == 3
    for img_rel, lbl_rel in manifest.labeled_items:
        assert (tmp_path / img_rel).exists()
        assert (tmp_path / lbl_rel).exists()
    for img_rel in manifest.unlabeled_items:
        assert (tmp_path / img_rel).exists()

    loaded = DatasetManifest.load(tmp_path / "train_manifest.json")
    assert loaded.labeled_items == manifest.labeled_items
    assert loaded.unlabeled_items == manifest.unlabeled_items
    assert loaded.spec == manifest.spec
    assert Path(loaded.root) == tmp_path
    loaded.validate(check_files=True)


def test_dataset_items_derive_from_base_seed(tmp_path):
    manifest = generate_dataset(GAPPED, 2, 1, tmp_path)
    _, ids1 = generate_scene(GAPPED, GAPPED.seed + 1)
    stored = tensorio.read_label_png(tmp_path / manifest.labeled_items[1][1])
    np.testing.assert_array_equal(stored, ids1)

    # unlabeled item j continues the seed sequence after the labeled items
    image, _ = generate_scene(GAPPED, GAPPED.seed + 2)
    tensorio.write_image_png(tmp_path / "check.png", image)
    assert (tmp_path / "check.png").read_bytes() == (
        tmp_path / manifest.unlabeled_items[0]
    ).read_bytes()


def test_manifest_validate_missing_file(tmp_path):
    manifest = generate_dataset(GAPPED, 1, 1, tmp_path)
    (tmp_path / manifest.unlabeled_items[0]).unlink()
    with pytest.raises(FileNotFoundError):
        manifest.validate()


def test_manifest_rejects_duplicate_paths(tmp_path):
    manifest = generate_dataset(GAPPED, 1, 1, tmp_path)
    manifest.unlabeled_items.append(manifest.unlabeled_items[0])
    with pytest.raises(ValueError, match="disjoint"):
        manifest.validate(check_files=False)


def test_generate_dataset_rejects_negative_counts(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(GAPPED, -1, 0, tmp_path)
