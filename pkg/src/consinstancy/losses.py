"""Supervised and consistency loss terms and their composition per variant.

All losses take (B, C, H, W) tensors and return scalar tensors that average
over batch and pixels, so values are comparable across batch sizes. The
supervised terms (cross-entropy, cosine, squared error on the distance
maps) are computed on the labeled batch half; the consistency term compares
the predicted thing-class scores against the sum of the predicted distance
maps on the unlabeled half and needs no reference data at all.
"""

import math
from dataclasses import dataclass

import torch
from torch.nn import functional as F

from .representations import THING_CHANNEL_OFFSET

TERMS_BY_VARIANT = {
    "Seg": ("ce",),
    "Inst": ("ce", "cos", "mse_plus", "mse_minus"),
    "ConsInst": ("ce", "cos", "mse_plus", "mse_minus", "cons"),
}

_REPORT_FIELD = {
    "ce": "l_ce",
    "cos": "l_cos",
    "mse_plus": "l_mse_plus",
    "mse_minus": "l_mse_minus",
    "cons": "l_cons",
}

_PROB_FLOOR = 1e-12


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term turns NaN or infinite during training."""

    def __init__(self, term, value):
        super().__init__(f"loss term {term!r} is non-finite: {value}")
        self.term = term


def _check_shapes(pred, ref, name):
    if pred.shape != ref.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(pred.shape)} vs {tuple(ref.shape)}")


def ce_loss(pred, ref):
    """Pixelwise categorical cross-entropy between predicted class scores
    and a one-hot reference, probabilities floored at 1e-12."""
    _check_shapes(pred, ref, "ce_loss")
    log_p = torch.log(pred.clamp(min=_PROB_FLOOR))
    return -(ref * log_p).sum(dim=1).mean()


def cosine_loss(pred, ref):
    """Mean over pixels of 1 minus the dot product of the two unit-vector
    fields; 0 when aligned, 2 when antipodal."""
    _check_shapes(pred, ref, "cosine_loss")
    return (1.0 - (pred * ref).sum(dim=1)).mean()


def mse_loss(pred, ref):
    _check_shapes(pred, ref, "mse_loss")
    return F.mse_loss(pred, ref)


def consinstancy_loss(pred_semantic, pred_pair):
    """Per thing class, the mean squared residual between the predicted
    class scores and the sum of the predicted distance map pair, summed
    over classes. Zero exactly when the maps satisfy the thing-mask
    identity; gradients flow into all three inputs."""
    delta_plus, delta_minus = pred_pair
    _check_shapes(delta_plus, delta_minus, "consinstancy_loss")
    n_thing = delta_plus.shape[1]
    if pred_semantic.shape[1] < THING_CHANNEL_OFFSET + n_thing:
        raise ValueError(
            f"semantic map has {pred_semantic.shape[1]} channels, need at least "
            f"{THING_CHANNEL_OFFSET + n_thing} for {n_thing} thing classes"
        )
    y_thing = pred_semantic[:, THING_CHANNEL_OFFSET:THING_CHANNEL_OFFSET + n_thing]
    if y_thing.shape[2:] != delta_plus.shape[2:]:
        raise ValueError(
            f"consinstancy_loss: spatial mismatch {tuple(y_thing.shape[2:])} vs "
            f"{tuple(delta_plus.shape[2:])}"
        )
    residual = y_thing - (delta_plus + delta_minus)
    return residual.pow(2).mean(dim=(0, 2, 3)).sum()


@dataclass
class LossReport:
    """Scalar values of the enabled terms (None = term not part of the
    variant) and their weighted total."""

    l_ce: float = None
    l_cos: float = None
    l_mse_plus: float = None
    l_mse_minus: float = None
    l_cons: float = None
    total: float = 0.0

    def to_dict(self):
        return {
            "l_ce": self.l_ce,
            "l_cos": self.l_cos,
            "l_mse_plus": self.l_mse_plus,
            "l_mse_minus": self.l_mse_minus,
            "l_cons": self.l_cons,
            "total": self.total,
        }

    def check_finite(self):
        for term, field in _REPORT_FIELD.items():
            value = getattr(self, field)
            if value is not None and not math.isfinite(value):
                raise NonFiniteLossError(term, value)
        if not math.isfinite(self.total):
            raise NonFiniteLossError("total", self.total)
        return self


def total_loss(terms, variant, weights=None):
    """Compose computed term scalars into the variant's total objective.

    ``terms`` maps term names (subset of ce/cos/mse_plus/mse_minus/cons) to
    scalar tensors or floats. Every term the variant enables must be
    present, except that a term whose weight is exactly 0 may be omitted
    (it is then reported as disabled). Returns ``(total, report)`` where
    ``total`` preserves tensor-ness for backprop and ``report`` carries
    plain floats.
    """
    if variant not in TERMS_BY_VARIANT:
        raise ValueError(f"unknown variant {variant!r}")
    weights = dict(weights or {})
    report = LossReport()
    total = None
    for name in TERMS_BY_VARIANT[variant]:
        weight = weights.get(name, 1.0)
        value = terms.get(name)
        if value is None:
            if weight == 0.0:
                continue
            if name == "cons":
                raise ValueError(
                    "consistency term enabled but not computed; the variant "
                    "requires an unlabeled batch half"
                )
            raise ValueError(f"variant {variant} requires loss term {name!r}")
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        setattr(report, _REPORT_FIELD[name], scalar)
        contribution = value if weight == 1.0 else weight * value
        total = contribution if total is None else total + contribution
    if total is None:
        raise ValueError(f"variant {variant} produced no enabled loss terms")
    report.total = float(total.detach()) if torch.is_tensor(total) else float(total)
    return total, report
