import os

import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(int(os.environ.get("WBSYNTH_THREADS", "1")))

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def case32():
    from wbsynth.phantom import generate
    return generate(7, 32)


# Desk-scale artifacts shared by the slower tests.  Each is trained once per
# session with the default TrainConfig.

@pytest.fixture(scope="session")
def desk_cfg():
    from wbsynth.train import TrainConfig
    return TrainConfig()


@pytest.fixture(scope="session")
def desk_cases(desk_cfg):
    from wbsynth.train import make_cases
    return make_cases(desk_cfg), make_cases(desk_cfg, held_out=True)


@pytest.fixture(scope="session")
def segmenter(desk_cfg, desk_cases):
    from wbsynth.semalign import train_proxy_segmenter
    return train_proxy_segmenter(desk_cases[0], steps=desk_cfg.seg_steps, lr=desk_cfg.seg_lr,
                                 seed=desk_cfg.seed)


@pytest.fixture(scope="session")
def registration(desk_cfg, desk_cases):
    import time
    from wbsynth.train import train_registration
    start = time.perf_counter()
    R, critic, log = train_registration(desk_cases[0], desk_cfg)
    return R, log, time.perf_counter() - start


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
