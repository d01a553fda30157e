import pytest

from dinomix.config import TrainConfig
from dinomix.volcore import PhantomSpec, generate_dataset, load_dataset, make_split

TINY_PHANTOM = PhantomSpec(dims=(16, 32, 32), fractions=(0.1, 0.02, 0.004), contrasts=(0.3, 0.6, 0.45), noise=0.1)

# small enough for many steps per test on one CPU core
TINY = TrainConfig(
    crop_dims=(16, 16, 16),
    labeled_bs=1,
    unlabeled_bs=2,
    e_max=4,
    steps_per_epoch=2,
    base_channels=4,
    stages=2,
    teacher_channels=8,
    teacher_input=16,
    eval_stride=(16, 16, 16),
)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny-data")
    return generate_dataset(root, 11, TINY_PHANTOM, make_split(6, 0.34, 1, 1))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_manifest):
    return load_dataset(tiny_manifest)


# acceptance reporting: one PASS/FAIL line per criterion-marked test
_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, title = mark.args
    status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    item.config.stash[_CRITERIA][n] = f"criterion {n:2d} {status}  {title}"


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_CRITERIA]
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
