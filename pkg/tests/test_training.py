import json
import math

import numpy as np
import pytest
import torch

from consinstancy.model import ModelConfig
from consinstancy.synthdata import DatasetManifest, SceneSpec
from consinstancy.training import (
    BEST_CHECKPOINT,
    FINAL_CHECKPOINT,
    TrainConfig,
    TrainHistory,
    _epoch_seed,
    init_weights,
    load_training_arrays,
    make_batches,
    predict,
    train,
)


def fake_manifest(n_labeled, n_unlabeled):
    """Path-only manifest; good enough for batch scheduling tests."""
    return DatasetManifest(
        root=".",
        split_name="train",
        spec=SceneSpec(),
        labeled_items=[(f"img_{i}.png", f"lbl_{i}.png") for i in range(n_labeled)],
        unlabeled_items=[f"unl_{j}.png" for j in range(n_unlabeled)],
    )


def test_config_validation():
    with pytest.raises(ValueError, match="exceeds"):
        TrainConfig(batch_size=4, labeled_per_batch=5).validate()
    with pytest.raises(ValueError, match="unlabeled slots"):
        TrainConfig(variant="ConsInst", batch_size=4, labeled_per_batch=4).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0).validate()
    # labeled-only variants may fill the whole batch
    TrainConfig(variant="Inst", batch_size=4, labeled_per_batch=4).validate()


def test_config_dict_round_trip():
    config = TrainConfig(
        variant="Inst",
        max_epochs=7,
        loss_weights={"cons": 0.5},
        model=ModelConfig(n_blocks=2, base_width=4, head_channels=8),
    ).validate()
    restored = TrainConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    assert restored.to_dict() == config.to_dict()
    assert restored.model == config.model


def test_model_config_follows_variant():
    config = TrainConfig(variant="Seg")
    assert config.model_config().variant == "Seg"
    assert config.uses_unlabeled() is False
    assert TrainConfig(variant="ConsInst").uses_unlabeled() is True
    weighted = TrainConfig(variant="ConsInst", loss_weights={"cons": 0.0})
    assert weighted.uses_unlabeled() is False


def test_epoch_seeds_are_distinct():
    seen = {_epoch_seed(seed, epoch) for seed in range(10) for epoch in range(1000)}
    assert len(seen) == 10 * 1000


def test_make_batches_consinst_schedule():
    manifest = fake_manifest(3, 3)
    config = TrainConfig(variant="ConsInst", batch_size=4, labeled_per_batch=2)
    batches = make_batches(manifest, config, epoch_seed=42)
    # one pass over the unlabeled split with 2 slots per batch
    assert len(batches) == 2
    unlabeled_drawn = [u for _, unl in batches for u in unl]
    assert len(unlabeled_drawn) == 4
    assert set(unlabeled_drawn) == set(manifest.unlabeled_items)
    for lab, unl in batches:
        assert len(lab) == 2 and len(unl) == 2
        assert all(item in manifest.labeled_items for item in lab)


def test_make_batches_labeled_only_schedule():
    manifest = fake_manifest(5, 3)
    config = TrainConfig(variant="Inst", batch_size=2, labeled_per_batch=2)
    batches = make_batches(manifest, config, epoch_seed=7)
    assert len(batches) == 3  # ceil(5 / 2)
    assert all(unl == () for _, unl in batches)
    drawn = [item for lab, _ in batches for item in lab]
    counts = {item: drawn.count(item) for item in manifest.labeled_items}
    assert max(counts.values()) - min(counts.values()) <= 1


def test_make_batches_cycles_labeled_items_evenly():
    # a small labeled pool is recycled many times per epoch when the
    # unlabeled split is large
    manifest = fake_manifest(17, 827)
    config = TrainConfig(variant="ConsInst", batch_size=8, labeled_per_batch=4)
    batches = make_batches(manifest, config, epoch_seed=0)
    assert len(batches) == math.ceil(827 / 4)

    labeled_drawn = [item for lab, _ in batches for item in lab]
    assert len(labeled_drawn) == len(batches) * 4
    counts = {item: labeled_drawn.count(item) for item in manifest.labeled_items}
    assert max(counts.values()) - min(counts.values()) <= 1

    unlabeled_drawn = [u for _, unl in batches for u in unl]
    u_counts = {u: unlabeled_drawn.count(u) for u in manifest.unlabeled_items}
    assert min(u_counts.values()) >= 1  # full coverage every epoch
    assert max(u_counts.values()) <= 2  # wrap-around refills at most once


def test_make_batches_deterministic_per_seed():
    manifest = fake_manifest(4, 6)
    config = TrainConfig(variant="ConsInst", batch_size=4, labeled_per_batch=2)
    assert make_batches(manifest, config, 13) == make_batches(manifest, config, 13)
    assert make_batches(manifest, config, 13) != make_batches(manifest, config, 14)


def test_make_batches_rejects_empty_splits():
    config = TrainConfig(variant="ConsInst", batch_size=4, labeled_per_batch=2)
    with pytest.raises(ValueError, match="labeled"):
        make_batches(fake_manifest(0, 5), config, 0)
    with pytest.raises(ValueError, match="unlabeled"):
        make_batches(fake_manifest(3, 0), config, 0)


def test_load_training_arrays(tiny_manifest):
    labeled, unlabeled = load_training_arrays(tiny_manifest, n_classes=2)
    assert set(labeled) == {tuple(item) for item in tiny_manifest.labeled_items}
    assert set(unlabeled) == set(tiny_manifest.unlabeled_items)
    entry = labeled[tuple(tiny_manifest.labeled_items[0])]
    assert entry["image"].shape == (1, 32, 32)
    assert entry["semantic"].shape == (2, 32, 32)
    assert entry["orientation"].shape == (3, 32, 32)
    assert entry["delta_plus"].shape == (1, 32, 32)
    assert entry["delta_minus"].shape == (1, 32, 32)
    for tensor in entry.values():
        assert tensor.dtype == torch.float32


def test_init_weights_matches_config():
    config = TrainConfig(
        variant="Seg", model=ModelConfig(n_blocks=2, base_width=4, head_channels=8)
    )
    state = init_weights(config, seed=4)
    assert state.config.variant == "Seg"
    assert state.epoch == 0 and state.seed == 4
    assert len(state.optimizer.param_groups) == 2


def test_train_is_deterministic(tiny_manifest, tiny_config, tmp_path):
    config_a = tiny_config("Inst", checkpoint_dir=str(tmp_path / "a"))
    state_a, history_a = train(config_a, tiny_manifest)
    config_b = tiny_config("Inst", checkpoint_dir=str(tmp_path / "b"))
    state_b, history_b = train(config_b, tiny_manifest)

    assert history_a.records == history_b.records
    sd_a, sd_b = state_a.net.state_dict(), state_b.net.state_dict()
    for name in sd_a:
        assert torch.equal(sd_a[name], sd_b[name]), name
    assert (tmp_path / "a" / FINAL_CHECKPOINT).read_bytes() == (
        tmp_path / "b" / FINAL_CHECKPOINT
    ).read_bytes()


def test_train_writes_history_and_checkpoints(tiny_manifest, tiny_config, tmp_path):
    config = tiny_config("Seg", max_epochs=3)
    state, history = train(config, tiny_manifest)
    assert state.epoch == 3
    assert len(history.records) == 3
    assert len(history.wall_clock) == 3
    for epoch, record in enumerate(history.records):
        assert record["epoch"] == epoch
        assert record["n_batches"] == 2
        assert set(record) >= {"epoch", "lr", "n_batches", "l_ce", "total"}
        assert "l_cos" not in record  # Seg trains on cross-entropy alone

    checkpoint_dir = tmp_path / "checkpoints"
    assert (checkpoint_dir / BEST_CHECKPOINT).exists()
    assert (checkpoint_dir / FINAL_CHECKPOINT).exists()

    history_path = tmp_path / "history.jsonl"
    timing_path = tmp_path / "timing.jsonl"
    history.save(history_path, timing_path)
    reloaded = TrainHistory.load(history_path)
    assert reloaded.records == history.records
    timing = [json.loads(line) for line in timing_path.read_text().splitlines()]
    assert [t["epoch"] for t in timing] == [0, 1, 2]
    assert all(t["seconds"] >= 0 for t in timing)
    # determinism-relevant history carries no wall-clock fields
    assert all("seconds" not in r for r in history.records)


def test_train_loss_decreases(tiny_manifest, tiny_config):
    config = tiny_config("Inst", max_epochs=12)
    _, history = train(config, tiny_manifest)
    assert history.records[-1]["total"] < history.records[0]["total"]


def test_plateau_decay_schedule(tiny_manifest, tiny_config):
    # an impossible improvement threshold forces a decay every
    # patience_epochs epochs after the first
    config = tiny_config(
        "Seg", max_epochs=7, min_improvement=1e9, patience_epochs=2, lr=1e-3
    )
    _, history = train(config, tiny_manifest)
    lrs = [record["lr"] for record in history.records]
    base, once, twice, thrice = 1e-3, 1e-3 * 0.1, 1e-3 * 0.1 * 0.1, 1e-3 * 0.1 * 0.1 * 0.1
    assert lrs == [base, base, once, once, twice, twice, thrice]


def test_best_checkpoint_tracks_minimum(tiny_manifest, tiny_config, tmp_path):
    from consinstancy.model import load_checkpoint
    from consinstancy.tensorio import read_array_archive

    config = tiny_config("Inst", max_epochs=6)
    _, history = train(config, tiny_manifest)
    _, meta = read_array_archive(tmp_path / "checkpoints" / BEST_CHECKPOINT)
    assert meta["which"] == "best"
    best_total = min(record["total"] for record in history.records)
    assert meta["train_loss"] == best_total

    final = load_checkpoint(tmp_path / "checkpoints" / FINAL_CHECKPOINT)
    assert final.epoch == 6
    assert final.optimizer is not None


def test_cons_weight_zero_equals_inst(tiny_manifest, tiny_config, tmp_path):
    """With the consistency weight at 0 the unlabeled half is skipped
    entirely, so ConsInst reproduces Inst bit for bit."""
    inst = tiny_config("Inst", checkpoint_dir=str(tmp_path / "inst"))
    state_inst, history_inst = train(inst, tiny_manifest)
    cons = tiny_config(
        "ConsInst", checkpoint_dir=str(tmp_path / "cons"), loss_weights={"cons": 0.0}
    )
    state_cons, history_cons = train(cons, tiny_manifest)

    sd_i = state_inst.net.state_dict()
    sd_c = state_cons.net.state_dict()
    for name in sd_i:
        assert torch.equal(sd_i[name], sd_c[name]), name
    for rec_i, rec_c in zip(history_inst.records, history_cons.records):
        assert rec_i["total"] == rec_c["total"]
        assert rec_c.get("l_cons") is None


def test_train_requires_splits(tiny_manifest, tiny_config):
    config = tiny_config("ConsInst")
    empty = DatasetManifest(
        root=tiny_manifest.root,
        split_name="train",
        spec=tiny_manifest.spec,
        labeled_items=list(tiny_manifest.labeled_items),
        unlabeled_items=[],
    )
    with pytest.raises(ValueError, match="unlabeled"):
        train(config, empty)
    no_labels = DatasetManifest(
        root=tiny_manifest.root,
        split_name="train",
        spec=tiny_manifest.spec,
        labeled_items=[],
        unlabeled_items=list(tiny_manifest.unlabeled_items),
    )
    with pytest.raises(ValueError, match="labeled"):
        train(tiny_config("Seg"), no_labels)


def test_predict_output_contract(tiny_config):
    for variant, keys in (
        ("Seg", {"semantic"}),
        ("ConsInst", {"semantic", "orientation", "delta_plus", "delta_minus"}),
    ):
        state = init_weights(tiny_config(variant), seed=1)
        image = np.random.default_rng(0).random((32, 32), dtype=np.float32)
        maps = predict(state.net, image)
        assert set(maps) == keys
        assert maps["semantic"].shape == (32, 32, 2)
        assert maps["semantic"].dtype == np.float32
        np.testing.assert_allclose(maps["semantic"].sum(axis=2), 1.0, atol=1e-6)
        if "orientation" in maps:
            assert maps["orientation"].shape == (32, 32, 3)
            assert maps["delta_plus"].shape == (32, 32, 1)
