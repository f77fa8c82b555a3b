"""Balanced cross-entropy objectives for boundaries, occlusions, segmentation.

All three losses normalize by the full pixel count (batch x pixels) and
penalize missed positives with a factor ``alpha``. The occlusion and
segmentation variants additionally re-weight negatives that sit on an
instance boundary by the same ``alpha``, which synchronizes the different
supervisions across a cascade of heads.

Each loss is registered on the tape as a single op with an analytic gradient
with respect to the prediction. Log arguments are clamped to
``[clamp_eps, 1]``; the gradient is zero where the clamp binds.
"""

from dataclasses import dataclass, field

import numpy as np

from mcseg.autodiff import Tensor

PRED_TOLERANCE = 1e-5


@dataclass
class LossConfig:
    alpha: float = 10.0
    clamp_eps: float = 1e-12
    head_weights: dict = field(default_factory=dict)

    def validate(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 < self.clamp_eps <= 1e-3:
            raise ValueError("clamp_eps must lie in (0, 1e-3]")

    def weight(self, head):
        return float(self.head_weights.get(head, 1.0))


def _check_pred(pred, *gts):
    for gt in gts:
        if gt.shape != pred.shape:
            raise ValueError("shape mismatch: pred %s vs ground truth %s"
                             % (pred.shape, gt.shape))
    d = pred.data
    if d.min() < -PRED_TOLERANCE or d.max() > 1.0 + PRED_TOLERANCE:
        raise ValueError("predictions must lie in [0, 1]; got range [%g, %g]"
                         % (d.min(), d.max()))


def _as_array(gt, like):
    data = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    return data.astype(like.dtype, copy=False)


def _balanced_bce(pred, target, neg_weight, alpha, eps, tape):
    """- mean(alpha*t*log(p) + neg_weight*(1-t)*log(1-p)) with clamped logs."""
    p = pred.data
    t = target
    pc = np.clip(p, eps, 1.0)
    qc = np.clip(1.0 - p, eps, 1.0)
    count = p.size
    total = alpha * (t * np.log(pc)).sum() + (neg_weight * (1.0 - t) * np.log(qc)).sum()
    value = -total / count
    out = Tensor(np.asarray(value, dtype=p.dtype).reshape(1, 1, 1, 1))
    if tape is not None:
        pos_open = (p > eps)           # clamp gradient gate
        neg_open = ((1.0 - p) > eps)

        def bwd(gy):
            g = gy.reshape(())
            grad = (-alpha * t * pos_open / pc
                    + neg_weight * (1.0 - t) * neg_open / qc) * (g / count)
            return (grad.astype(p.dtype, copy=False),)

        tape.record(out, (pred,), bwd)
    return out


def loss_boundary(pred, gt_b, cfg=None, tape=None):
    """Eq.-style boundary loss: alpha on positives, unit weight on negatives."""
    cfg = cfg or LossConfig()
    cfg.validate()
    _check_pred(pred, gt_b)
    b = _as_array(gt_b, pred)
    return _balanced_bce(pred, b, 1.0, cfg.alpha, cfg.clamp_eps, tape)


def loss_occlusion(pred, gt_o, gt_b, cfg=None, tape=None):
    """Occluding-side loss; negatives on a boundary pixel weigh alpha, else 1."""
    cfg = cfg or LossConfig()
    cfg.validate()
    _check_pred(pred, gt_o, gt_b)
    o = _as_array(gt_o, pred)
    b = _as_array(gt_b, pred)
    beta = np.where(b > 0.5, cfg.alpha, 1.0)
    return _balanced_bce(pred, o, beta, cfg.alpha, cfg.clamp_eps, tape)


def loss_segmentation(pred, gt_y, gt_b, cfg=None, tape=None):
    """Unoccluded-instance segmentation loss; same structure as the occlusion loss."""
    cfg = cfg or LossConfig()
    cfg.validate()
    _check_pred(pred, gt_y, gt_b)
    y = _as_array(gt_y, pred)
    b = _as_array(gt_b, pred)
    beta = np.where(b > 0.5, cfg.alpha, 1.0)
    return _balanced_bce(pred, y, beta, cfg.alpha, cfg.clamp_eps, tape)


LOSS_BY_KIND = {
    "boundary": "boundary",
    "occlusion": "occlusion",
    "segmentation": "segmentation",
}


def head_kind(head_name):
    """Map a head name (possibly suffixed, e.g. segmentation_aux) to its kind."""
    for kind in LOSS_BY_KIND:
        if head_name == kind or head_name.startswith(kind + "_"):
            return kind
    raise ValueError("cannot infer loss kind for head %r" % (head_name,))


def total_loss(head_outputs, gts, cfg=None, tape=None):
    """Weighted sum of per-head losses.

    ``gts`` maps the ground-truth keys "boundary", "occlusion", "segmentation"
    to arrays shaped like the head outputs. Returns (scalar tensor, per-head
    float dict).
    """
    cfg = cfg or LossConfig()
    cfg.validate()
    if not head_outputs:
        raise ValueError("no head outputs to score")
    per_head = {}
    total = None
    for name in head_outputs:
        kind = head_kind(name)
        pred = head_outputs[name]
        if kind == "boundary":
            if "boundary" not in gts:
                raise ValueError("missing ground truth for head %r" % name)
            part = loss_boundary(pred, gts["boundary"], cfg, tape=tape)
        elif kind == "occlusion":
            if "occlusion" not in gts or "boundary" not in gts:
                raise ValueError("missing ground truth for head %r" % name)
            part = loss_occlusion(pred, gts["occlusion"], gts["boundary"], cfg,
                                  tape=tape)
        else:
            if "segmentation" not in gts or "boundary" not in gts:
                raise ValueError("missing ground truth for head %r" % name)
            part = loss_segmentation(pred, gts["segmentation"], gts["boundary"],
                                     cfg, tape=tape)
        per_head[name] = part.item()
        weighted = part if cfg.weight(name) == 1.0 else _scaled(part, cfg.weight(name), tape)
        total = weighted if total is None else _added(total, weighted, tape)
    return total, per_head


def _scaled(t, c, tape):
    from mcseg.autodiff import smul
    return smul(t, c, tape=tape)


def _added(a, b, tape):
    from mcseg.autodiff import merge
    return merge([a, b], mode="sum", tape=tape)
