"""Shared fixtures and the acceptance-summary reporter.

The acceptance tests record one line per criterion; the terminal summary
prints them as a block so a full run ends with an at-a-glance scorecard.
"""

import time

import pytest

from touchalign.datagen import WorldConfig, generate_world
from touchalign.encoder import EncoderConfig
from touchalign.trainer import TrainConfig, fit

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"criterion {number} {name}: {status} ({detail})")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


# Pinned evaluation scale: 4 materials, 3 sensors, 2000 pairs each,
# encoder dim 64 / 2 blocks / 32-d output, 30 epochs of batch-48 training.
TOY_WORLD = WorldConfig(m=4, k=3, image_size=32, patch_size=8, pairs_per_sensor=2000,
                        objects_per_class=8)
TOY_ENCODER = EncoderConfig(h=32, w=32, patch_size=8, dim=64, n_blocks=2, n_heads=4,
                            out_dim=32, tokens_per_sensor=5, n_sensors=3)
TOY_TRAIN = TrainConfig(
    base_lr=1e-3, weight_decay=0.02, epochs=30, tau=0.07, sigma=0.75,
    batch_size=48, seed=0, anchor_beta=0.45, encoder=TOY_ENCODER,
)


class ToyRun:
    def __init__(self, dataset, checkpoint, gen_seconds, fit_seconds):
        self.dataset = dataset
        self.checkpoint = checkpoint
        self.gen_seconds = gen_seconds
        self.fit_seconds = fit_seconds


@pytest.fixture(scope="session")
def toy_run():
    """The seed-pinned end-to-end training run shared by acceptance tests."""
    t0 = time.time()
    dataset = generate_world(TOY_WORLD, seed=0)
    t1 = time.time()
    ckpt = fit(dataset, TOY_TRAIN)
    t2 = time.time()
    return ToyRun(dataset, ckpt, t1 - t0, t2 - t1)
