"""Downstream evaluation of the pretrained teacher backbone."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_module, load_tensors
from .config import ProbeConfig
from .dsp import LogMelSpectrogram
from .errors import DegenerateSplitError
from .vit import VisionTransformer

log = logging.getLogger(__name__)


@dataclass
class LabeledClip:
    spectrogram: LogMelSpectrogram
    labels: tuple

    def __post_init__(self):
        self.labels = tuple(int(i) for i in np.atleast_1d(self.labels))


@dataclass
class EvalReport:
    metric: str
    value: float
    per_class: list
    num_examples: int
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"metric: {self.metric}",
            f"value: {self.value!r}",
            f"num_examples: {self.num_examples}",
            f"config_fingerprint: {self.config_fingerprint}",
            "per_class: " + ",".join(repr(float(v)) for v in self.per_class),
        ]
        lines += [f"{k}: {v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path) -> "EvalReport":
        kv = {}
        for line in Path(path).read_text().splitlines():
            k, _, v = line.partition(": ")
            kv[k] = v
        per_class = [float(x) for x in kv.pop("per_class", "").split(",") if x]
        base = {k: kv.pop(k) for k in ("metric", "value", "num_examples", "config_fingerprint")}
        return cls(base["metric"], float(base["value"]), per_class, int(base["num_examples"]),
                   base["config_fingerprint"], kv)


# -- metrics -----------------------------------------------------------------


def average_precision(scores, targets) -> float:
    """AP of one ranking; ties keep the original index order."""
    scores, targets = np.asarray(scores, dtype=np.float64), np.asarray(targets).astype(bool)
    n_pos = targets.sum()
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = targets[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_pos)


def per_class_average_precision(scores, targets) -> np.ndarray:
    scores, targets = np.atleast_2d(scores), np.atleast_2d(targets)
    if scores.shape != targets.shape:
        raise ValueError(f"scores {scores.shape} and targets {targets.shape} differ in shape")
    return np.array([average_precision(scores[:, c], targets[:, c]) for c in range(scores.shape[1])])


def mean_average_precision(scores, targets) -> float:
    """Unweighted mean of per-class AP over classes with at least one positive."""
    ap = per_class_average_precision(scores, targets)
    excluded = np.flatnonzero(np.isnan(ap))
    if excluded.size:
        log.warning("mAP: classes without positives excluded: %s", excluded.tolist())
    if excluded.size == ap.size:
        raise ValueError("no class has a positive example")
    return float(np.nanmean(ap))


def _one_hot(labels, num_classes) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    for i, ls in enumerate(labels):
        out[i, list(np.atleast_1d(ls))] = 1.0
    return out


def _first_labels(labels) -> np.ndarray:
    return np.array([np.atleast_1d(l)[0] for l in labels], dtype=np.int64)


def _report(scores, labels, num_classes, multilabel, fingerprint="", **extra) -> EvalReport:
    if multilabel:
        targets = _one_hot(labels, num_classes)
        ap = per_class_average_precision(scores, targets)
        return EvalReport("mAP", mean_average_precision(scores, targets), ap.tolist(), len(labels), fingerprint, extra)
    y = _first_labels(labels)
    pred = np.asarray(scores).argmax(axis=1)
    per_class = [float((pred[y == c] == c).mean()) if (y == c).any() else float("nan") for c in range(num_classes)]
    return EvalReport("accuracy", float((pred == y).mean()), per_class, len(labels), fingerprint, extra)


# -- backbone loading / features ---------------------------------------------


def load_backbone(checkpoint):
    """Teacher backbone of a pretraining checkpoint (path or state); heads are dropped.

    Returns ``(backbone, run_config, (norm_mean, norm_std))``.
    """
    from .train import TwinModelState, config_from_header

    if isinstance(checkpoint, TwinModelState):
        backbone = copy.deepcopy(checkpoint.teacher.backbone)
        return backbone.eval(), checkpoint.cfg, (checkpoint.norm_mean, checkpoint.norm_std)
    tensors, header = load_tensors(checkpoint)
    cfg = config_from_header(header, checkpoint)
    backbone = VisionTransformer(cfg.backbone, cfg.input_shape)
    load_module(backbone, tensors, "teacher.backbone")
    return backbone.eval(), cfg, (float(header.get("norm_mean", 0.0)), float(header.get("norm_std", 1.0)))


def _as_array(clips) -> list:
    out = []
    for c in clips:
        if isinstance(c, LabeledClip):
            c = c.spectrogram
        out.append(np.asarray(getattr(c, "values", c), dtype=np.float32))
    return out


def fit_frames(values: np.ndarray, frames: int) -> np.ndarray:
    """Crop (leading frames) or zero-pad a normalised ``(T, F)`` clip to ``frames``."""
    t = values.shape[0]
    if t >= frames:
        return values[:frames]
    return np.concatenate([values, np.zeros((frames - t, values.shape[1]), dtype=values.dtype)])


def pool(backbone: VisionTransformer, spec: torch.Tensor, pooling: str = "cls") -> torch.Tensor:
    emb = backbone(spec)
    return emb.class_token if pooling == "cls" else emb.data_tokens.mean(dim=1)


@torch.no_grad()
def extract_features(checkpoint, clips, pooling: str = "cls", batch_size: int = 32, frames: int | None = None
                     ) -> np.ndarray:
    """One embedding per (normalised) clip: final class token, or mean of data tokens.

    With ``frames`` set, clips are cropped or padded to that length first;
    otherwise any length is embedded through positional interpolation.
    """
    if pooling not in ("cls", "mean"):
        raise ValueError(f"pooling must be 'cls' or 'mean', got {pooling!r}")
    backbone = checkpoint if isinstance(checkpoint, VisionTransformer) else load_backbone(checkpoint)[0]
    backbone.eval()
    arrays = _as_array(clips)
    if frames is not None:
        arrays = [fit_frames(a, frames) for a in arrays]
    feats = [None] * len(arrays)
    # group by shape so variable-length clips batch cleanly
    by_shape: dict = {}
    for i, a in enumerate(arrays):
        by_shape.setdefault(a.shape, []).append(i)
    for idx in by_shape.values():
        for k in range(0, len(idx), batch_size):
            chunk = idx[k : k + batch_size]
            x = torch.from_numpy(np.stack([arrays[i] for i in chunk]))
            out = pool(backbone, x, pooling).numpy()
            for i, row in zip(chunk, out):
                feats[i] = row
    return np.stack(feats) if feats else np.zeros((0, backbone.embed_dim), dtype=np.float32)


# -- linear probe --------------------------------------------------------------


def _check_split(train_labels, test_labels) -> None:
    seen = {c for ls in train_labels for c in np.atleast_1d(ls)}
    missing = sorted({int(c) for ls in test_labels for c in np.atleast_1d(ls)} - seen)
    if missing:
        raise DegenerateSplitError(f"classes {missing} appear in the test split but never in training")


def _standardizer(x: np.ndarray):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def fit_linear(x, y, num_classes, multilabel, cfg: ProbeConfig):
    """SGD with momentum from a zero initialisation, in seeded minibatches (or full batch)."""
    x = torch.as_tensor(x, dtype=torch.float64)
    w = torch.zeros(x.shape[1], num_classes, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.SGD([w, b], lr=cfg.lr, momentum=cfg.momentum)
    if multilabel:
        target = torch.as_tensor(_one_hot(y, num_classes))
    else:
        target = torch.as_tensor(_first_labels(y))
    n = x.shape[0]
    batch = cfg.batch_size if 0 < cfg.batch_size < n else n
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            idx = torch.as_tensor(order[start:start + batch])
            opt.zero_grad()
            logits = x[idx] @ w + b
            if multilabel:
                loss = F.binary_cross_entropy_with_logits(logits, target[idx])
            else:
                loss = F.cross_entropy(logits, target[idx])
            if cfg.weight_decay:
                loss = loss + 0.5 * cfg.weight_decay * (w * w).sum()
            loss.backward()
            opt.step()
    return w.detach().numpy(), b.detach().numpy()


def linear_probe(features, labels, split, cfg: ProbeConfig | None = None, num_classes=None, multilabel=False,
                 fingerprint: str = "") -> EvalReport:
    """Train a linear classifier on the ``"train"`` rows and report on the ``"test"`` rows."""
    cfg = cfg or ProbeConfig()
    features = np.asarray(features, dtype=np.float64)
    split = np.asarray(split)
    tr, te = np.flatnonzero(split == "train"), np.flatnonzero(split == "test")
    if not len(tr) or not len(te):
        raise DegenerateSplitError("linear probe needs non-empty train and test splits")
    y_tr, y_te = [labels[i] for i in tr], [labels[i] for i in te]
    _check_split(y_tr, y_te)
    num_classes = num_classes or 1 + max(int(c) for ls in labels for c in np.atleast_1d(ls))
    x_tr, x_te = features[tr], features[te]
    if cfg.standardize:
        mu, sd = _standardizer(x_tr)
        x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
    w, b = fit_linear(x_tr, y_tr, num_classes, multilabel, cfg)
    return _report(x_te @ w + b, y_te, num_classes, multilabel, fingerprint, probe="linear")


# -- finetuning ----------------------------------------------------------------


class Classifier(nn.Module):
    def __init__(self, backbone: VisionTransformer, num_classes: int, pooling: str = "cls"):
        super().__init__()
        self.backbone = backbone
        self.pooling = pooling
        self.head = nn.Linear(backbone.embed_dim, num_classes)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(pool(self.backbone, x, self.pooling))


@torch.no_grad()
def _scores(model: Classifier, values, idx, batch_size=32) -> np.ndarray:
    model.eval()
    out = [model(torch.from_numpy(values[idx[k : k + batch_size]])).numpy() for k in range(0, len(idx), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.head.out_features))


def finetune(checkpoint, values, labels, split, cfg: ProbeConfig | None = None, num_classes=None, multilabel=False,
             seed: int = 0, fingerprint: str = "") -> EvalReport:
    """Train a new head and the whole backbone; report the test metric of the best-validation epoch.

    ``values`` are normalised spectrograms ``(N, T, F)``. A ``val_fraction``
    slice of the training rows is held out for model selection.
    """
    cfg = cfg or ProbeConfig()
    split = np.asarray(split)
    tr, te = np.flatnonzero(split == "train"), np.flatnonzero(split == "test")
    if not len(tr) or not len(te):
        raise DegenerateSplitError("finetuning needs non-empty train and test splits")
    _check_split([labels[i] for i in tr], [labels[i] for i in te])
    num_classes = num_classes or 1 + max(int(c) for ls in labels for c in np.atleast_1d(ls))
    rng = np.random.default_rng([seed, 7])
    perm = rng.permutation(tr)
    n_val = int(round(cfg.val_fraction * len(tr)))
    val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])

    torch.manual_seed(seed)
    backbone = load_backbone(checkpoint)[0] if not isinstance(checkpoint, VisionTransformer) else copy.deepcopy(checkpoint)
    model = Classifier(backbone, num_classes, cfg.pooling)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.finetune_lr, weight_decay=cfg.finetune_weight_decay)
    if multilabel:
        target = torch.as_tensor(_one_hot(labels, num_classes), dtype=torch.float32)
    else:
        target = torch.as_tensor(_first_labels(labels))

    def evaluate(idx):
        return _report(_scores(model, values, idx), [labels[i] for i in idx], num_classes, multilabel)

    best_state, best_val, best_epoch = copy.deepcopy(model.state_dict()), -np.inf, 0
    for epoch in range(cfg.finetune_epochs):
        model.train()
        order = np.random.default_rng([seed, 8, epoch]).permutation(tr)
        for k in range(0, len(order), cfg.finetune_batch_size):
            idx = order[k : k + cfg.finetune_batch_size]
            logits = model(torch.from_numpy(values[idx]))
            if multilabel:
                loss = F.binary_cross_entropy_with_logits(logits, target[idx])
            else:
                loss = F.cross_entropy(logits, target[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        score = evaluate(val if len(val) else tr).value
        if score > best_val:
            best_val, best_epoch = score, epoch + 1
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    report = evaluate(te)
    report.config_fingerprint = fingerprint
    report.extra = {"probe": "finetune", "best_epoch": best_epoch}
    return report
