import pytest

from adaptrace.pipeline.config import PipelineConfig
from adaptrace.pipeline.training import label_map, train_pipeline
from adaptrace.synthgen import default_spec, gen_trace
from adaptrace.trace import ExportEntry, ModuleImage, ModuleMap


@pytest.fixture
def small_map():
    return ModuleMap([
        ModuleImage("ntdll.dll", 0x1000, 0x1000, (
            ExportEntry("ZwClose", 0x200, 0x300),
            ExportEntry("NtReadFile", 0x300, 0x380),
            ExportEntry("LdrInitializeThunk", 0x400, 0x480),
        )),
        ModuleImage("user32.dll", 0x10000, 0x800, (
            ExportEntry("GetMessageW", 0x100, 0x180),
            ExportEntry("DispatchMessageW", 0x200, 0x280),
        )),
    ])


@pytest.fixture(scope="session")
def workload():
    """Small labelled synthetic workload shared by the pipeline tests."""
    return gen_trace(default_spec(windows_per_class=24, processes_per_class=3, seed=11))


@pytest.fixture(scope="session")
def trained(workload):
    cfg = PipelineConfig(n_trees=25, seed=3)
    return train_pipeline(workload.events, workload.module_map, label_map(workload.labels), cfg)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
