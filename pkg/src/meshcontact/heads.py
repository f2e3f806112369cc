"""Prediction heads and the weighted multi-task training objective.

Contact: a linear map scores each coarse vertex, the fixed upsampler lifts
the logits to the full mesh, and a sigmoid yields per-vertex contact
probabilities.  Mesh: a linear map regresses coarse vertex offsets from
the rest pose, upsampled to full resolution.  Two per-cell linear decoders
classify the feature grid into scene-semantic and body-part classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mesh
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericsError

PROB_CLAMP = 1e-7


@dataclass
class ContactPrediction:
    probs: Tensor  # (v_full,) strictly inside (0, 1)
    source: str  # "fused", "enc_a", or "enc_b"
    logits: Tensor  # (v_full,) pre-sigmoid, upsampled


@dataclass(frozen=True)
class LossWeights:
    mesh: float = 1.0
    cls_a: float = 1.0
    cls_b: float = 0.1
    sem: float = 1.0
    bp: float = 1.0


@dataclass
class LossBreakdown:
    l_mesh: Tensor
    l_cls_a: Tensor
    l_cls_b: Tensor
    l_sem: Tensor
    l_bp: Tensor

    def components(self):
        return {
            "L_m": self.l_mesh,
            "L_cls_A": self.l_cls_a,
            "L_cls_B": self.l_cls_b,
            "L_sem": self.l_sem,
            "L_bp": self.l_bp,
        }


def init_head_params(token_dim: int, c_sem: int, c_bp: int, rng) -> dict:
    if c_sem < 2 or c_bp < 2:
        raise ConfigError(f"decoders need >= 2 classes, got sem={c_sem} bp={c_bp}")
    scale = np.sqrt(1.0 / token_dim)
    return {
        "heads.contact.w": rng.normal(0.0, scale, size=(token_dim, 1)),
        "heads.contact.b": np.zeros(1),
        "heads.mesh.w": rng.normal(0.0, scale, size=(token_dim, 3)),
        "heads.mesh.b": np.zeros(3),
        "heads.sem.w": rng.normal(0.0, scale, size=(token_dim, c_sem)),
        "heads.sem.b": np.zeros(c_sem),
        "heads.bp.w": rng.normal(0.0, scale, size=(token_dim, c_bp)),
        "heads.bp.b": np.zeros(c_bp),
    }


def contact_head(features: Tensor, template: mesh.MeshTemplate, params: dict,
                 source: str = "fused") -> ContactPrediction:
    """Coarse logits, lifted to the full mesh by the upsampler, then sigmoid.

    Probabilities are clamped to [PROB_CLAMP, 1-PROB_CLAMP] so they stay
    strictly inside (0, 1) even when the sigmoid saturates in float64.
    """
    coarse_logits = ad.add(ad.matmul(features, params["heads.contact.w"]),
                           params["heads.contact.b"])
    full_logits = ad.reshape(
        ad.matmul(Tensor(template.upsample_matrix), coarse_logits), (template.v_full,)
    )
    probs = ad.clip(ad.sigmoid(full_logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return ContactPrediction(probs=probs, source=source, logits=full_logits)


def mesh_head(features: Tensor, template: mesh.MeshTemplate, params: dict) -> Tensor:
    """Coarse offsets from rest pose, upsampled to full vertices."""
    offsets = ad.add(ad.matmul(features, params["heads.mesh.w"]), params["heads.mesh.b"])
    coarse = ad.add(Tensor(template.coarse_rest_vertices), offsets)
    return mesh.upsample(coarse, template)


def semantic_decoder(grid_tokens: Tensor, params: dict) -> Tensor:
    """Per-grid-cell scene class logits."""
    return ad.add(ad.matmul(grid_tokens, params["heads.sem.w"]), params["heads.sem.b"])


def bodypart_decoder(grid_tokens: Tensor, params: dict) -> Tensor:
    """Per-grid-cell body-part class logits."""
    return ad.add(ad.matmul(grid_tokens, params["heads.bp.w"]), params["heads.bp.b"])


# ---------------------------------------------------------------------------
# losses


def loss_mesh(pred_vertices: Tensor, gt_vertices) -> Tensor:
    """Mean squared error over all vertex coordinates."""
    gt = gt_vertices if isinstance(gt_vertices, Tensor) else Tensor(gt_vertices)
    diff = ad.sub(pred_vertices, gt)
    return ad.mean(ad.mul(diff, diff))


def loss_contact(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped away from {0,1}."""
    y = np.asarray(labels, dtype=np.float64)
    p = ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = ad.mul(Tensor(y), ad.log(p))
    neg = ad.mul(Tensor(1.0 - y), ad.log(ad.sub(Tensor(1.0), p)))
    return ad.neg(ad.mean(ad.add(pos, neg)))


def loss_segmentation(logits: Tensor, gt_mask) -> Tensor:
    """Mean per-cell cross-entropy against integer class ids."""
    labels = np.asarray(gt_mask, dtype=np.int64).reshape(-1)
    picked = ad.gather_rows(ad.log_softmax(logits, axis=1), labels)
    return ad.neg(ad.mean(picked))


def aggregate_losses(breakdown: LossBreakdown, weights: LossWeights) -> Tensor:
    """Weighted sum of the five loss terms."""
    terms = [
        (weights.mesh, breakdown.l_mesh),
        (weights.cls_a, breakdown.l_cls_a),
        (weights.cls_b, breakdown.l_cls_b),
        (weights.sem, breakdown.l_sem),
        (weights.bp, breakdown.l_bp),
    ]
    total = None
    for name, (w, term) in zip(breakdown.components(), terms):
        v = term.item()
        if not np.isfinite(v):
            raise NumericsError(f"loss component {name} is not finite: {v}")
        if v < 0:
            raise ContractError(f"loss component {name} is negative: {v}")
        piece = ad.mul(Tensor(w), term)
        total = piece if total is None else ad.add(total, piece)
    return total
