import numpy as np
import pytest
from hypothesis import settings

from slate_lab.core import Context, Feedback, LogRecord, ModelParams, Slate, Variant

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_params(rng, P=6, d=3, dy=2, dz=4, k_max=3, variant=Variant.FULL, scale=1.0):
    return ModelParams(
        phi=rng.normal(0, scale, dy),
        Gamma=rng.normal(0, scale, (d, dz)),
        Psi=rng.normal(0, scale, (P, d)),
        gamma=rng.normal(0, scale, k_max),
        alpha=rng.normal(0, scale, k_max),
        variant=variant,
        phi_scalar=float(rng.normal(0, scale)),
    )


def random_record(rng, params, k=None, click=None):
    k = k or int(rng.integers(1, params.k_max + 1))
    slate = Slate(tuple(int(a) for a in rng.choice(params.num_items, size=k, replace=False)))
    ctx = Context(rng.normal(size=params.dim_y), rng.normal(size=params.dim_z), k)
    c = int(rng.integers(0, k + 1)) if click is None else click
    return LogRecord(ctx, slate, Feedback.from_index(c, k), 0.5, tuple([0.5] * k))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
