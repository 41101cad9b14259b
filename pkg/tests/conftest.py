import dataclasses

import pytest

from insdel.rng import stream
from insdel.tasks import STANDARD_REGIMES, TaskConfig, generate, required_max_positions
from insdel.training import TrainConfig, train_loop
from insdel.transformer import ModelConfig

# Step budget for the alphabet-shift runs; calibrated once (BLEU 99.7 on the
# training set by step 1000 with seed 0) and kept at 2x as a regression bound.
ALPHA_SHIFT_STEPS = 2000
SEEDS = (0, 1, 2)

# PASS/FAIL lines from test_acceptance.py, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@dataclasses.dataclass
class Run:
    seed: int
    train: list
    held_out: list
    model_config: ModelConfig
    train_config: TrainConfig
    state: object
    metrics: list


def alpha_shift_data(seed):
    n_train, n_eval = STANDARD_REGIMES["alpha-shift"]
    train = generate(TaskConfig("alpha-shift", count=n_train), stream(seed, "data", "train"))
    held_out = generate(TaskConfig("alpha-shift", count=n_eval), stream(seed, "data", "eval"))
    return train, held_out


@pytest.fixture(scope="session")
def alpha_shift_runs():
    """Default-size models trained jointly on 1000 alphabet-shift examples, one per seed."""
    runs = {}
    model_config = ModelConfig(max_positions=required_max_positions(TaskConfig("alpha-shift")))
    for seed in SEEDS:
        train, held_out = alpha_shift_data(seed)
        train_config = TrainConfig(steps=ALPHA_SHIFT_STEPS, seed=seed, eval_every=100,
                                   checkpoint_every=ALPHA_SHIFT_STEPS)
        metrics = []
        state = train_loop(train, model_config, train_config, on_metrics=metrics.append)
        runs[seed] = Run(seed, train, held_out, model_config, train_config, state, metrics)
    return runs
