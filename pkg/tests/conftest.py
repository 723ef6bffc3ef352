import numpy as np
import pytest

from pipeplan.workload import ClusterSpec, ModelSpec


@pytest.fixture
def small_model():
    return ModelSpec(num_layers=4, hidden=512, heads=8, vocab=4096, seq=256, name="small")


@pytest.fixture
def small_cluster():
    return ClusterSpec(
        nodes=2, gpus_per_node=2, gpu_mem_capacity=16e9, peak_flops=100e12, mfu=0.5,
        bw_intra=100e9, bw_inter=10e9, bw_d2h=10e9, bw_h2d=10e9, name="small",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdicts ---------------------------------------------------------

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per acceptance check; unrecorded checks count as failed."""
    book = request.config.stash.setdefault(_VERDICTS, {})
    key = tuple(request.node.get_closest_marker("criterion").args)
    book[key] = ("FAIL", "did not complete")

    def record(ok: bool, detail: str):
        book[key] = ("PASS" if ok else "FAIL", detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    book = config.stash.get(_VERDICTS, {})
    if not book:
        return
    terminalreporter.section("acceptance")
    for (n, title), (status, detail) in sorted(book.items()):
        terminalreporter.write_line(f"[{n}] {status} {title}: {detail}")
