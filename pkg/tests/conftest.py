import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

SMALL = {
    "dsp.target_frames": 48,
    "dsp.n_mels": 32,
    "backbone.depth": 2,
    "backbone.embed_dim": 16,
    "backbone.n_heads": 2,
    "backbone.head_hidden_dim": 24,
    "backbone.head_bottleneck_dim": 8,
    "distill.local_dim": 16,
    "distill.global_dim": 32,
    "train.batch_size": 4,
    "train.epochs": 2,
}


def small_config(**overrides):
    """A seconds-scale configuration for tests: 48x32 spectrograms, 3x2 token grid."""
    from asit.config import parse_config

    over = dict(SMALL)
    over.update({k.replace("__", "."): v for k, v in overrides.items()})
    return parse_config(None, over)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
