"""Run-directory lifecycle: pretraining, evaluation, feature export and ratio sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, build_config, write_config
from .data import SpectrogramCorpus, corpus_stats, load_corpus, read_manifest
from .errors import CheckpointError, ConfigError, DataError, NumericFault
from .probe import EvalReport, extract_features, finetune, linear_probe, load_backbone
from .train import MetricsWriter, TwinModelState, pretrain, steps_per_epoch

log = logging.getLogger(__name__)

SWEEP_RATIOS = (0.1, 0.3, 0.5, 0.7, 0.9)
LOCK_NAME = ".lock"


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive ownership of a run directory for the lifetime of the block."""
    path = Path(run_dir) / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"run directory {run_dir} is locked by another process ({path})") from None
    except OSError as exc:
        raise DataError(f"cannot lock run directory {run_dir}: {exc}") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def run_directory(cfg: RunConfig, kind: str = "pretrain") -> Path:
    name = cfg.run.run_name or f"{kind}-{cfg.fingerprint()}"
    return cfg.run.resolved_root / name


def prepare_corpus(cfg: RunConfig, stats: tuple[float, float] | None = None) -> SpectrogramCorpus:
    """Load the manifest's spectrograms and normalise them.

    Without ``stats`` the training split supplies mean and std.
    """
    if not cfg.run.manifest:
        raise ConfigError("run.manifest is required")
    corpus = load_corpus(read_manifest(cfg.run.manifest), cfg.dsp, cfg.run.cache_dir or None)
    mean, std = stats if stats is not None else corpus_stats(corpus, "train")
    corpus.normalize(mean, std, cfg.dsp.norm_divisor)
    return corpus


def _write_report(path: Path, fields: dict) -> None:
    path.write_text("".join(f"{k}: {v}\n" for k, v in fields.items()))


def run_pretrain(cfg: RunConfig, resume: bool = False, corpus: SpectrogramCorpus | None = None) -> Path:
    """Pretrain into a self-describing run directory and return its path.

    The directory holds ``config.cfg``, ``VERSION``, ``metrics.csv``,
    ``last.ckpt``, ``best.ckpt`` (lowest mean epoch loss) and ``report.txt``.
    """
    run_dir = run_directory(cfg)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create run directory {run_dir}: {exc}") from exc
    with run_lock(run_dir):
        write_config(cfg, run_dir / "config.cfg")
        (run_dir / "VERSION").write_text(f"asit {__version__}\nconfig {cfg.fingerprint()}\n")
        if corpus is None:
            corpus = prepare_corpus(cfg)
        train_idx = corpus.indices("train")
        if not len(train_idx):
            raise DataError("manifest has no training clips")
        total = steps_per_epoch(len(train_idx), cfg.train.batch_size) * cfg.train.epochs

        last, best = run_dir / "last.ckpt", run_dir / "best.ckpt"
        if resume and last.exists():
            state = TwinModelState.load(last)
            if state.cfg != cfg:
                raise CheckpointError(f"{last}: stored config differs from the requested one")
            log.info("resuming from epoch %d (step %d)", state.epoch, state.step)
        else:
            state = TwinModelState.create(cfg, total)
        state.norm_mean, state.norm_std = corpus.mean, corpus.std
        best_loss = [float("inf")]
        if resume and best.exists():
            best_loss[0] = float(_checkpoint_header(best).get("mean_loss", "inf"))

        def on_epoch_end(st, summary):
            if summary["mean_loss"] < best_loss[0]:
                best_loss[0] = summary["mean_loss"]
                st.save(best, {"mean_loss": summary["mean_loss"]})
            if st.epoch % cfg.train.checkpoint_every == 0 or st.epoch == cfg.train.epochs:
                st.save(last, {"mean_loss": summary["mean_loss"]})

        start = time.perf_counter()
        if state.epoch == 0 and not (resume and last.exists()):
            state.save(last)
            state.save(best)
        with MetricsWriter(run_dir / "metrics.csv", append=resume) as metrics:
            try:
                history = pretrain(state, corpus.values, train_idx, cfg.train.epochs, metrics, on_epoch_end)
            except NumericFault as exc:
                _write_report(run_dir / "fault.txt", {"error": str(exc), **exc.context})
                raise
        _write_report(run_dir / "report.txt", {
            "code_version": __version__,
            "config_fingerprint": cfg.fingerprint(),
            "epochs": state.epoch,
            "steps": state.step,
            "final_mean_loss": repr(history[-1]["mean_loss"]) if history else "",
            "best_mean_loss": repr(best_loss[0]) if history else "",
            "wall_seconds": f"{time.perf_counter() - start:.1f}",
        })
    return run_dir


def _checkpoint_header(path) -> dict:
    from .checkpoint import load_tensors

    return load_tensors(path)[1]


def _checkpoint(cfg: RunConfig, checkpoint=None) -> Path:
    path = Path(checkpoint or cfg.run.checkpoint or "")
    if not str(checkpoint or cfg.run.checkpoint) or not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return path


def _eval_inputs(cfg: RunConfig, checkpoint):
    ckpt = _checkpoint(cfg, checkpoint)
    backbone, ckpt_cfg, stats = load_backbone(ckpt)
    # spectrogram geometry must match what the backbone was pretrained on
    eval_cfg = dataclasses.replace(cfg, dsp=ckpt_cfg.dsp)
    corpus = prepare_corpus(eval_cfg, stats)
    return ckpt, backbone, ckpt_cfg, corpus


def run_probe(cfg: RunConfig, checkpoint=None, out=None) -> Path:
    """Linear probe of a checkpoint's teacher backbone; writes and returns the report path."""
    ckpt, backbone, ckpt_cfg, corpus = _eval_inputs(cfg, checkpoint)
    feats = extract_features(backbone, corpus.values, cfg.probe.pooling)
    report = linear_probe(feats, corpus.labels, corpus.splits, cfg.probe, corpus.num_classes,
                          multilabel=_is_multilabel(corpus), fingerprint=ckpt_cfg.fingerprint())
    out = Path(out) if out else ckpt.parent / f"probe_{ckpt.stem}.txt"
    report.write(out)
    return out


def run_finetune(cfg: RunConfig, checkpoint=None, out=None) -> Path:
    ckpt, backbone, ckpt_cfg, corpus = _eval_inputs(cfg, checkpoint)
    report = finetune(backbone, corpus.values, corpus.labels, corpus.splits, cfg.probe, corpus.num_classes,
                      multilabel=_is_multilabel(corpus), seed=cfg.run.seed, fingerprint=ckpt_cfg.fingerprint())
    out = Path(out) if out else ckpt.parent / f"finetune_{ckpt.stem}.txt"
    report.write(out)
    return out


def run_extract(cfg: RunConfig, checkpoint=None, out=None) -> Path:
    """Embeddings of every manifest clip as ``.npz`` (features, labels, splits, paths)."""
    ckpt, backbone, _, corpus = _eval_inputs(cfg, checkpoint)
    feats = extract_features(backbone, corpus.values, cfg.probe.pooling)
    out = Path(out) if out else ckpt.parent / f"features_{ckpt.stem}.npz"
    np.savez(out, features=feats, labels=np.array([";".join(map(str, l)) for l in corpus.labels]),
             splits=corpus.splits, paths=np.array(corpus.paths))
    return out


def _is_multilabel(corpus: SpectrogramCorpus) -> bool:
    return any(len(l) != 1 for l in corpus.labels)


def with_ratio(cfg: RunConfig, ratio: float, run_name: str | None = None) -> RunConfig:
    """Copy of ``cfg`` with both corruption ratios set to ``ratio``."""
    pairs = [(k, v) for k, v in cfg.flat().items()]
    pairs += [("corrupt.zero_ratio", ratio), ("corrupt.alien_ratio", ratio)]
    if run_name is not None:
        pairs.append(("run.run_name", run_name))
    out = build_config(pairs)
    out.provenance = dict(cfg.provenance)
    return out


def sweep(cfg: RunConfig, ratios=SWEEP_RATIOS, probe: bool = True) -> Path:
    """One pretraining run (and probe) per corruption ratio plus a combined summary and plot."""
    from .plots import plot_ratio_sweep

    base = cfg.run.run_name or f"sweep-{cfg.fingerprint()}"
    sweep_dir = cfg.run.resolved_root / base
    sweep_dir.mkdir(parents=True, exist_ok=True)
    corpus = prepare_corpus(cfg)
    rows = []
    for r in ratios:
        run_cfg = with_ratio(cfg, float(r), f"{base}/ratio-{float(r):g}")
        run_dir = run_pretrain(run_cfg, corpus=corpus)
        row = {"ratio": float(r), "run_dir": str(run_dir)}
        if probe:
            report = EvalReport.read(run_probe(run_cfg, run_dir / "last.ckpt"))
            row.update(metric=report.metric, value=report.value)
        rows.append(row)
    summary = sweep_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    if probe:
        plot_ratio_sweep(summary, sweep_dir / "metric_vs_ratio.png")
    return sweep_dir

