import pytest

from gmvit.cli.config import RunConfig
from gmvit.cli.commands import cmd_gen_data

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(k: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[k] = f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[k])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def tiny_config(root, **fields) -> RunConfig:
    """circle12, 4 classes, 4 train / 2 test per class, mini variant, one epoch."""
    cfg = RunConfig()
    base = {"dataset.path": str(root / "ds"), "dataset.rig": "circle12", "dataset.C": "4",
            "dataset.per_class_train": "4", "dataset.per_class_test": "2", "model.variant": "mini",
            "optimizer.epochs": "1", "run.out": str(root / "run")}
    base.update({k: str(v) for k, v in fields.items()})
    for key, value in base.items():
        section, name = key.split(".")
        cfg = cfg.set(section, name, value)
    return cfg


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cmd_gen_data(tiny_config(root))
    return root


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default synthetic dataset: 8 classes, dodeca20, 25/10 per class."""
    root = tmp_path_factory.mktemp("default")
    cfg = RunConfig().set("dataset", "path", str(root / "ds"))
    cmd_gen_data(cfg)
    return root / "ds"
