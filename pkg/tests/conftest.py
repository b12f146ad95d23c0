import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
sys.path.insert(0, str(Path(__file__).parents[1] / "scripts"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_root(tmp_path_factory):
    """A data root holding real MNIST digits in IDX form.

    Prefers ``$DATA_DIR/mnist``; otherwise exports the 5000-digit sample
    shipped with mlxtend as the ``mnist-sample`` dataset.
    """
    root = os.environ.get("DATA_DIR")
    if root and (Path(root) / "mnist").is_dir():
        return Path(root), "mnist"
    pytest.importorskip("mlxtend")
    from make_mnist_sample import export

    root = tmp_path_factory.mktemp("data")
    export(root / "mnist-sample")
    return root, "mnist-sample"


@pytest.fixture(scope="session")
def mnist_bundle(mnist_root):
    from vic.data import load_dataset

    root, name = mnist_root
    return load_dataset(name, root)


# -- acceptance summary: one line per criterion ----------------------------

_ACCEPTANCE: list[tuple[int, str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    labels = getattr(item.module, "CRITERIA", None)
    name = getattr(item, "originalname", item.name)
    if labels is None or name not in labels:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        label = labels[name]
        if "[" in item.name:
            label += " " + item.name[item.name.index("["):]
        if report.skipped:
            status, detail = "SKIP", report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
        else:
            status = "PASS" if report.passed else "FAIL"
            detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE.append((list(labels).index(name), label, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, label, status, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{status:4s}  {label}: {detail}")
