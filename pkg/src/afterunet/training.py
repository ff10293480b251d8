"""Adam, the two-phase learning-rate schedule, the epoch loop and checkpoints.

Each epoch draws one random slice group per scan.  All randomness of epoch
``e`` comes from ``default_rng([seed, e])``, so resuming at any epoch
boundary replays exactly what an uninterrupted run would have done.
"""
import logging
import os
from dataclasses import dataclass, fields

import numpy as np

from .axial import MODES
from .checkpoint import read_entries, write_entries
from .errors import ConfigError, ConfigMismatchError, FormatError, NumericError
from .losses import combined_loss
from .model import AFTerUNet, ModelConfig
from .volume import LabelVolume, Volume, elastic_augment, sample_slice_group

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 550
    phase1_epochs: int = 500
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    elastic_amplitude: float = 0.0
    elastic_smoothness: float = 4.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.phase1_epochs <= self.epochs:
            raise ConfigError(f"phase1_epochs must lie in [0, epochs={self.epochs}], got {self.phase1_epochs}")
        for name in ("lr_phase1", "lr_phase2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.weight_decay < 0 or self.elastic_amplitude < 0:
            raise ConfigError("weight_decay and elastic_amplitude must be >= 0")


def lr_at(epoch, cfg):
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr_phase1 if epoch < cfg.phase1_epochs else cfg.lr_phase2


class Adam:
    """Adam with bias correction and L2 weight decay folded into the gradient."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    @classmethod
    def from_config(cls, model, cfg):
        return cls(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    def step(self, lr):
        for name, p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def _augment_group(group, cfg, rng):
    if cfg.elastic_amplitude <= 0:
        return group.slices, group.labels
    seed = int(rng.integers(2**31))
    v, l = elastic_augment(Volume(group.slices), LabelVolume(group.labels),
                           cfg.elastic_amplitude, cfg.elastic_smoothness, seed)
    return v.data, l.labels


def train_step(model, opt, slices, labels, lr):
    logits = model(slices)
    loss = combined_loss(logits, labels)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError("non-finite loss")
    opt.zero_grad()
    loss.backward()
    opt.step(lr)
    return value


def train_epoch(model, opt, dataset, epoch, cfg):
    """One optimizer step per scan on a randomly drawn slice group; mean loss."""
    if not dataset:
        raise ConfigError("training dataset is empty")
    rng = np.random.default_rng([cfg.seed, epoch])
    lr = lr_at(epoch, cfg)
    mcfg = model.cfg
    losses = []
    for scan in rng.permutation(len(dataset)):
        vol, lab = dataset[scan]
        d = int(rng.integers(vol.depth))
        group = sample_slice_group(vol, d, mcfg.n_a, mcfg.n_f, lab)
        slices, labels = _augment_group(group, cfg, rng)
        try:
            losses.append(train_step(model, opt, slices.astype(mcfg.dtype), labels, lr))
        except NumericError as exc:
            raise NumericError(f"scan {scan}, centre {d}: {exc}") from None
    return float(np.mean(losses))


def fit(model, dataset, cfg, opt=None, start_epoch=0, stop_epoch=None, log_path=None,
        checkpoint_path=None, echo=print):
    """Train from ``start_epoch`` up to ``stop_epoch`` (default: cfg.epochs).

    Returns the per-epoch mean losses.  Writes one ``epoch=.. lr=.. loss=..``
    line per epoch to ``echo`` and, if given, appends it to ``log_path``.
    """
    opt = opt or Adam.from_config(model, cfg)
    stop = cfg.epochs if stop_epoch is None else stop_epoch
    history = []
    for epoch in range(start_epoch, stop):
        loss = train_epoch(model, opt, dataset, epoch, cfg)
        history.append(loss)
        line = f"epoch={epoch} lr={lr_at(epoch, cfg):g} loss={loss:.6f}"
        if echo is not None:
            echo(line)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(line + "\n")
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, opt, epoch + 1)
    return history


# -- checkpoints ------------------------------------------------------------------

_INT_META = ("num_classes", "in_channels", "n_a", "n_f", "heads", "layers", "seed")


def _meta_entries(cfg):
    out = [("meta.channels", np.array(cfg.channels, dtype=np.float32)),
           ("meta.image_size", np.array(cfg.image_size, dtype=np.float32))]
    out += [(f"meta.{k}", np.array(getattr(cfg, k), dtype=np.float32)) for k in _INT_META]
    out += [("meta.attention", np.array(MODES.index(cfg.attention), dtype=np.float32)),
            ("meta.shared_merge", np.array(int(cfg.shared_merge), dtype=np.float32))]
    return out


def _config_from_meta(entries, dtype="float32"):
    try:
        kw = {k: int(entries[f"meta.{k}"]) for k in _INT_META}
        kw["channels"] = tuple(int(c) for c in entries["meta.channels"])
        kw["image_size"] = tuple(int(c) for c in entries["meta.image_size"])
        kw["attention"] = MODES[int(entries["meta.attention"])]
        kw["shared_merge"] = bool(int(entries["meta.shared_merge"]))
    except (KeyError, IndexError) as exc:
        raise FormatError(f"checkpoint lacks model metadata: {exc}") from None
    return ModelConfig(dtype=dtype, **kw)


def save_checkpoint(path, model, opt=None, epoch=0):
    entries = list(model.named_parameters())
    entries = [(n, p.data) for n, p in entries]
    if opt is not None:
        entries += [(f"adam.m.{n}", opt.m[n]) for n, _ in opt.params]
        entries += [(f"adam.v.{n}", opt.v[n]) for n, _ in opt.params]
        entries.append(("adam.step", np.array(opt.t, dtype=np.float32)))
    entries.append(("train.epoch", np.array(epoch, dtype=np.float32)))
    entries += _meta_entries(model.cfg)
    tmp = f"{path}.tmp"
    write_entries(tmp, entries)
    os.replace(tmp, path)
    log.debug("checkpoint %s written at epoch %d", path, epoch)


def load_checkpoint(path, model_cfg=None, train_cfg=None):
    """Rebuild ``(model, optimizer, next_epoch)`` from an AFTC file.

    With ``model_cfg`` given, any difference in architecture fields raises
    :class:`ConfigMismatchError` instead of silently loading.
    """
    entries = read_entries(path)
    stored = _config_from_meta(entries, model_cfg.dtype if model_cfg else "float32")
    if model_cfg is not None:
        diffs = [f.name for f in fields(ModelConfig)
                 if f.name != "dtype" and getattr(stored, f.name) != getattr(model_cfg, f.name)]
        if diffs:
            detail = ", ".join(f"{k}: checkpoint={getattr(stored, k)!r} config={getattr(model_cfg, k)!r}" for k in diffs)
            raise ConfigMismatchError(f"checkpoint/config mismatch ({detail})")
    model = AFTerUNet(stored)
    names = [n for n, _ in model.named_parameters()]
    missing = [n for n in names if n not in entries]
    if missing:
        raise ConfigMismatchError(f"checkpoint lacks parameters, e.g. {missing[:3]}")
    model.load_state_dict({n: entries[n] for n in names})
    tcfg = train_cfg or TrainConfig()
    opt = Adam.from_config(model, tcfg)
    if "adam.step" in entries:
        for n, p in opt.params:
            opt.m[n] = entries[f"adam.m.{n}"].astype(p.dtype)
            opt.v[n] = entries[f"adam.v.{n}"].astype(p.dtype)
        opt.t = int(entries["adam.step"])
    epoch = int(entries.get("train.epoch", 0))
    return model, opt, epoch
