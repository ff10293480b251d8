"""Training losses, the Dice similarity metric, and 3D prediction assembly."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import AFTError, FormatError, ShapeError
from .tensor import Tensor, no_grad
from .volume import iter_groups


def one_hot(labels, num_classes, dtype=np.float64):
    labels = np.asarray(labels)
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} out of range for {num_classes} classes")
    return (np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(dtype)


def _spatial_axes(t):
    return tuple(range(1, t.ndim))


def dice_loss(logits, labels, smooth=1.0):
    """1 - mean foreground soft Dice; ``logits`` has the class axis first."""
    probs = T.softmax(logits, axis=0)
    g = one_hot(labels, logits.shape[0], logits.dtype)
    axes = _spatial_axes(logits)
    inter = (probs * g).sum(axis=axes)
    denom = probs.sum(axis=axes) + g.sum(axis=axes)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - dice[1:].mean()


def ce_loss(logits, labels):
    """Mean voxel cross entropy (log-sum-exp inside ``log_softmax``)."""
    logp = T.log_softmax(logits, axis=0)
    g = one_hot(labels, logits.shape[0], logits.dtype)
    n = g[0].size
    return -(logp * g).sum() * (1.0 / n)


def combined_loss(logits, labels, smooth=1.0):
    return dice_loss(logits, labels, smooth) + ce_loss(logits, labels)


def dsc(pred, truth):
    """2|p & g| / (|p| + |g|) on binary masks; two empty masks score 1."""
    pred, truth = np.asarray(pred, dtype=bool), np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


# -- assembly -------------------------------------------------------------------

@dataclass
class SegmentationGroup:
    center: int
    logits: np.ndarray  # C_cls x H x W x N_A


@dataclass
class PredictionVolume:
    labels: np.ndarray            # H x W x D class indices
    probabilities: np.ndarray = None  # C_cls x H x W x D, optional


def middle_index(n_a):
    return n_a // 2


def assemble(groups, depth=None, keep_probabilities=False):
    """Stack the argmax of each group's middle map into an H x W x D volume."""
    groups = sorted(groups, key=lambda g: g.center)
    depth = len(groups) if depth is None else depth
    centers = [g.center for g in groups]
    if centers != list(range(depth)):
        missing = sorted(set(range(depth)) - set(centers))
        raise AFTError(f"assemble needs one group per centre 0..{depth - 1}; missing {missing[:5]}")
    mids = np.stack([g.logits[..., middle_index(g.logits.shape[-1])] for g in groups], axis=-1)
    labels = mids.argmax(axis=0).astype(np.uint8)
    probs = None
    if keep_probabilities:
        e = np.exp(mids - mids.max(axis=0, keepdims=True))
        probs = e / e.sum(axis=0, keepdims=True)
    return PredictionVolume(labels, probs)


def predict_groups(model, vol):
    cfg = model.cfg
    with no_grad():
        for group in iter_groups(vol, cfg.n_a, cfg.n_f):
            yield SegmentationGroup(group.center, model(group.slices).data)


def predict_volume(model, vol, keep_probabilities=False):
    return assemble(predict_groups(model, vol), vol.depth, keep_probabilities)


# -- evaluation -----------------------------------------------------------------

def class_names(num_classes):
    return ["background"] + [f"class_{c}" for c in range(1, num_classes)]


def dsc_table(predictions, truths, num_classes):
    """Per-class DSC averaged over scans, plus the foreground mean."""
    if not predictions:
        raise AFTError("evaluation needs at least one scan")
    per_class = {}
    names = class_names(num_classes)
    for c in range(1, num_classes):
        scores = [dsc(p == c, t == c) for p, t in zip(predictions, truths)]
        per_class[names[c]] = float(np.mean(scores))
    return {"per_class": per_class, "mean": float(np.mean(list(per_class.values())))}


def evaluate(model, dataset, predictor=None):
    """DSC table for ``model`` over ``(Volume, LabelVolume)`` pairs.

    ``predictor(volume) -> H x W x D labels`` replaces the model when given
    (used to score oracle and constant predictors through the same path).
    """
    if not dataset:
        raise AFTError("evaluation needs at least one scan")
    num_classes = model.cfg.num_classes if model is not None else None
    preds, truths = [], []
    for vol, lab in dataset:
        if predictor is not None:
            preds.append(np.asarray(predictor(vol)))
        else:
            preds.append(predict_volume(model, vol).labels)
        truths.append(lab.labels)
    if num_classes is None:
        num_classes = int(max(t.max() for t in truths)) + 1
    return dsc_table(preds, truths, num_classes)


def format_table(result, title="afterunet"):
    names = list(result["per_class"])
    head = ["Method", "DSC"] + names
    row = [title, f"{100 * result['mean']:.2f}"] + [f"{100 * result['per_class'][n]:.2f}" for n in names]
    widths = [max(len(a), len(b)) for a, b in zip(head, row)]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))
    return "\n".join([fmt(head), "-+-".join("-" * w for w in widths), fmt(row)])


def format_metrics(result):
    lines = [f"dsc.{name}={val:.6f}" for name, val in result["per_class"].items()]
    lines.append(f"dsc.mean={result['mean']:.6f}")
    return "\n".join(lines) + "\n"
