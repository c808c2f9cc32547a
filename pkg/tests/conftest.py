import numpy as np
import pytest

from predguard import data, nn, target


@pytest.fixture(scope="session")
def tiny():
    """A small trained target model on clustered synthetic data."""
    X = data.synthesize(data.SynthesisConfig(400, 40, 4, 40, 0.1, seed=1))
    ds = data.cluster_labels(X, 4, seed=1)
    split = data.make_splits(400, 200, 200, 0.5, seed=1)
    spec = target.target_spec(40, 4, hidden=(32,))
    cfg = nn.TrainConfig(learning_rate=1e-2, epochs=30, batch_size=16, seed=1)
    model = target.train_target(ds, split.member, spec, cfg)
    return ds, split, model


SUMMARY: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if SUMMARY:
        terminalreporter.section("acceptance criteria")
        for line in SUMMARY:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """The desk-scale pipeline under the default configuration.

    Returns the lab plus the wall time from an empty directory to the
    undefended MIM0 report.
    """
    import time

    from predguard.config import ExperimentConfig
    from predguard.experiment import Lab

    lab = Lab(ExperimentConfig(), out=tmp_path_factory.mktemp("desk"))
    start = time.perf_counter()
    undefended = lab.evaluate("MIM0", defended=False)
    elapsed = time.perf_counter() - start
    return lab, undefended, elapsed
