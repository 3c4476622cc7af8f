import time
from dataclasses import dataclass

import numpy as np
import pytest

_ACCEPTANCE: list[str] = []

BENCH_SEED = 0
BENCH_SCENES = 64
BENCH_TRAIN = 48
BENCH_STEPS = 2000


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for the terminal summary and return the verdict."""

    def record(name: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@dataclass
class Benchmark:
    specs: list
    test_items: list
    initial: object
    trained: object
    trace1: list
    trace2: list
    before: tuple
    after: tuple
    seconds: float


def held_out_errors(items, weights):
    """Mean per-scene (albedo, shading, recon) MSE over ``items``."""
    from pointiid.model import decompose

    a = s = r = 0.0
    for it in items:
        res = decompose(it.cloud, weights, normals=it.normals)
        a += np.mean((res.albedo - it.albedo) ** 2)
        s += np.mean((res.shading - it.shading) ** 2)
        r += np.mean((res.recon - it.image) ** 2)
    n = len(items)
    return a / n, s / n, r / n


@pytest.fixture(scope="session")
def benchmark():
    """Desk-scale run: 64 synthetic sphere scenes, 48 train / 16 held out, both stages."""
    from pointiid.data import render_synthetic, sample_specs
    from pointiid.model import TrainConfig, init_weights, train_stage1, train_stage2
    from pointiid.pipeline import prepare_item

    start = time.perf_counter()
    specs = sample_specs(BENCH_SCENES, seed=BENCH_SEED)
    items = [prepare_item(render_synthetic(s)) for s in specs]
    train, test = items[:BENCH_TRAIN], items[BENCH_TRAIN:]
    w0 = init_weights(BENCH_SEED)
    before = held_out_errors(test, w0)
    cfg = TrainConfig(steps=BENCH_STEPS, seed=BENCH_SEED, log_every=0)
    w1, trace1 = train_stage1(train, w0, cfg)
    w2, trace2 = train_stage2(train, w1, cfg)
    after = held_out_errors(test, w2)
    seconds = time.perf_counter() - start
    return Benchmark(specs, test, w0, w2, trace1, trace2, before, after, seconds)
