"""Training loop: mixed labeled/unlabeled minibatches for three variants.

One epoch is a pass over the unlabeled split when the consistency term is
active (it is the larger split) and a pass over the labeled split
otherwise; labeled items cycle with reshuffling either way. Each step
forwards the labeled half (plus the unlabeled half when needed, as one
concatenated batch), composes the variant's loss terms, and applies an
adaptive-moment update with decoupled L2 on conv kernels only. The learning
rate decays by a fixed factor after ``patience_epochs`` epochs without the
epoch-mean training loss improving by at least ``min_improvement``.

Runs are bit-reproducible given (config, manifest) on a single-threaded
CPU: batch composition derives from per-epoch integer seeds and weight
init from a dedicated generator, and no other randomness exists.
"""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import ce_loss, consinstancy_loss, cosine_loss, mse_loss, total_loss
from .model import (
    DualDecoderNet,
    ModelConfig,
    ModelState,
    init_parameters,
    make_optimizer,
    save_checkpoint,
)
from .representations import InstanceLabelMap, reference_maps
from .tensorio import read_image_png, read_label_png

BEST_CHECKPOINT = "best.ckpt"
FINAL_CHECKPOINT = "final.ckpt"


@dataclass
class TrainConfig:
    variant: str = "ConsInst"
    batch_size: int = 8
    labeled_per_batch: int = 4
    lr: float = 1e-3
    lr_decay_factor: float = 0.1
    patience_epochs: int = 25
    min_improvement: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    l2_factor: float = 1e-5
    max_epochs: int = 300
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    loss_weights: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.labeled_per_batch > self.batch_size:
            raise ValueError("labeled_per_batch exceeds batch_size")
        if self.labeled_per_batch < 1:
            raise ValueError("need at least one labeled item per batch")
        if self.variant == "ConsInst" and self.labeled_per_batch >= self.batch_size:
            raise ValueError("ConsInst needs unlabeled slots: labeled_per_batch < batch_size")
        for name in ("lr", "lr_decay_factor", "beta1", "beta2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.patience_epochs < 1 or self.max_epochs < 1:
            raise ValueError("patience_epochs and max_epochs must be >= 1")
        self.model_config()
        return self

    def model_config(self):
        return self.model.with_variant(self.variant)

    def uses_unlabeled(self):
        return self.variant == "ConsInst" and self.loss_weights.get("cons", 1.0) != 0.0

    def to_dict(self):
        d = {
            "variant": self.variant,
            "batch_size": self.batch_size,
            "labeled_per_batch": self.labeled_per_batch,
            "lr": self.lr,
            "lr_decay_factor": self.lr_decay_factor,
            "patience_epochs": self.patience_epochs,
            "min_improvement": self.min_improvement,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "l2_factor": self.l2_factor,
            "max_epochs": self.max_epochs,
            "seed": self.seed,
            "checkpoint_dir": str(self.checkpoint_dir),
            "loss_weights": dict(self.loss_weights),
            "model": self.model.to_dict(),
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = d.pop("model", None)
        config = cls(**d)
        if model is not None:
            config.model = ModelConfig.from_dict(model)
        return config.validate()


@dataclass
class TrainHistory:
    """Per-epoch loss/learning-rate records plus wall-clock telemetry.

    The records are deterministic for a fixed config; wall-clock seconds
    are not, so they serialize to a separate file that reproducibility
    comparisons can ignore.
    """

    records: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)

    def save(self, history_path, timing_path=None):
        with open(history_path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if timing_path is not None:
            with open(timing_path, "w", encoding="utf-8") as fh:
                for epoch, seconds in enumerate(self.wall_clock):
                    fh.write(json.dumps({"epoch": epoch, "seconds": seconds}) + "\n")

    @classmethod
    def load(cls, history_path):
        records = []
        with open(history_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        return cls(records=records)


def _epoch_seed(seed, epoch):
    # distinct, order-independent integer per (run seed, epoch)
    return int(seed) * 1_000_003 + int(epoch)


def init_weights(config: TrainConfig, seed) -> ModelState:
    """Fresh model state: He-initialized network plus zeroed optimizer."""
    model_config = config.model_config()
    net = init_parameters(DualDecoderNet(model_config), seed)
    optimizer = make_optimizer(net, config.lr, config.beta1, config.beta2, config.l2_factor)
    return ModelState(config=model_config, net=net, optimizer=optimizer, epoch=0, seed=int(seed))


def make_batches(manifest, config: TrainConfig, epoch_seed):
    """Batch schedule for one epoch: a list of (labeled items, unlabeled
    items) tuples of manifest entries, sizes fixed by the config."""
    labeled = [tuple(item) for item in manifest.labeled_items]
    if not labeled:
        raise ValueError("manifest has no labeled items")
    rng_labeled = np.random.default_rng([int(epoch_seed), 1])

    def labeled_stream():
        while True:
            for idx in rng_labeled.permutation(len(labeled)):
                yield labeled[int(idx)]

    stream = labeled_stream()

    if config.uses_unlabeled():
        unlabeled = list(manifest.unlabeled_items)
        if not unlabeled:
            raise ValueError("variant ConsInst requires a non-empty unlabeled split")
        slots = config.batch_size - config.labeled_per_batch
        rng_unlabeled = np.random.default_rng([int(epoch_seed), 2])
        order = [unlabeled[int(i)] for i in rng_unlabeled.permutation(len(unlabeled))]
        n_batches = math.ceil(len(order) / slots)
        batches = []
        for b in range(n_batches):
            chunk = tuple(order[(b * slots + k) % len(order)] for k in range(slots))
            lab = tuple(next(stream) for _ in range(config.labeled_per_batch))
            batches.append((lab, chunk))
        return batches

    n_batches = math.ceil(len(labeled) / config.labeled_per_batch)
    return [
        (tuple(next(stream) for _ in range(config.labeled_per_batch)), ())
        for _ in range(n_batches)
    ]


def _map_to_tensor(m):
    return torch.from_numpy(np.ascontiguousarray(np.transpose(m, (2, 0, 1))))


def _tensor_to_map(t):
    return np.ascontiguousarray(t.detach().cpu().numpy().transpose(1, 2, 0))


def load_training_arrays(manifest, n_classes):
    """Decode every manifest item once: images plus, for labeled items, the
    reference representation maps, all as (C, H, W) tensors keyed by the
    manifest entry."""
    root = Path(manifest.root)
    labeled = {}
    for item in manifest.labeled_items:
        img_rel, lbl_rel = item
        image = read_image_png(root / img_rel)
        ids = read_label_png(root / lbl_rel)
        semantic, orientation, dpos, dneg = reference_maps(InstanceLabelMap(ids), n_classes)
        labeled[(img_rel, lbl_rel)] = {
            "image": torch.from_numpy(image)[None],
            "semantic": _map_to_tensor(semantic),
            "orientation": _map_to_tensor(orientation),
            "delta_plus": _map_to_tensor(dpos),
            "delta_minus": _map_to_tensor(dneg),
        }
    unlabeled = {
        img_rel: torch.from_numpy(read_image_png(root / img_rel))[None]
        for img_rel in manifest.unlabeled_items
    }
    return labeled, unlabeled


def _stack(entries, key):
    return torch.stack([e[key] for e in entries])


def train(config: TrainConfig, manifest, progress=None):
    """Run the full loop; returns (ModelState, TrainHistory).

    Writes ``best.ckpt`` (lowest epoch-mean training loss) and
    ``final.ckpt`` into ``config.checkpoint_dir``.
    """
    config.validate()
    if not manifest.labeled_items:
        raise ValueError("training requires a non-empty labeled split")
    if config.uses_unlabeled() and not manifest.unlabeled_items:
        raise ValueError("variant ConsInst requires a non-empty unlabeled split")

    state = init_weights(config, config.seed)
    net, optimizer = state.net, state.optimizer
    labeled_data, unlabeled_data = load_training_arrays(manifest, config.model.n_classes)

    checkpoint_dir = Path(config.checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)

    history = TrainHistory()
    lr = config.lr
    plateau_best = math.inf
    epochs_since_improvement = 0
    best_loss = math.inf

    for epoch in range(config.max_epochs):
        started = time.perf_counter()
        batches = make_batches(manifest, config, _epoch_seed(config.seed, epoch))
        sums, counts = {}, {}
        net.train()
        for labeled_items, unlabeled_items in batches:
            lab = [labeled_data[item] for item in labeled_items]
            x_lab = _stack(lab, "image")
            n_lab = x_lab.shape[0]
            if unlabeled_items:
                x_unl = torch.stack([unlabeled_data[item] for item in unlabeled_items])
                out = net(torch.cat([x_lab, x_unl], dim=0))
            else:
                out = net(x_lab)

            terms = {"ce": ce_loss(out["semantic"][:n_lab], _stack(lab, "semantic"))}
            if config.variant != "Seg":
                terms["cos"] = cosine_loss(out["orientation"][:n_lab], _stack(lab, "orientation"))
                terms["mse_plus"] = mse_loss(out["delta_plus"][:n_lab], _stack(lab, "delta_plus"))
                terms["mse_minus"] = mse_loss(out["delta_minus"][:n_lab], _stack(lab, "delta_minus"))
            if unlabeled_items:
                terms["cons"] = consinstancy_loss(
                    out["semantic"][n_lab:],
                    (out["delta_plus"][n_lab:], out["delta_minus"][n_lab:]),
                )

            total, report = total_loss(terms, config.variant, config.loss_weights)
            report.check_finite()
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            for key, value in report.to_dict().items():
                if value is not None:
                    sums[key] = sums.get(key, 0.0) + value
                    counts[key] = counts.get(key, 0) + 1

        means = {key: sums[key] / counts[key] for key in sums}
        epoch_total = means["total"]
        state.epoch = epoch + 1

        if epoch_total < best_loss:
            best_loss = epoch_total
            save_checkpoint(
                checkpoint_dir / BEST_CHECKPOINT,
                state,
                extra_meta={"which": "best", "train_loss": best_loss},
            )

        if epoch_total < plateau_best - config.min_improvement:
            plateau_best = epoch_total
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement >= config.patience_epochs:
                lr *= config.lr_decay_factor
                for group in optimizer.param_groups:
                    group["lr"] = lr
                epochs_since_improvement = 0

        record = {"epoch": epoch, "lr": lr, "n_batches": len(batches)}
        record.update(means)
        history.records.append(record)
        history.wall_clock.append(time.perf_counter() - started)
        if progress is not None:
            progress(record)

    save_checkpoint(
        checkpoint_dir / FINAL_CHECKPOINT,
        state,
        extra_meta={"which": "final", "train_loss": history.records[-1]["total"]},
    )
    return state, history


def predict(net: DualDecoderNet, image) -> dict:
    """Inference on one grayscale (H, W) image in [0, 1]; returns
    channel-last float32 numpy maps keyed like the forward pass."""
    net.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(image, dtype=np.float32))[None, None]
        out = net(x)
    return {key: _tensor_to_map(value[0]) for key, value in out.items()}
