import pytest

from ssclab.data import AttributeRegion, SyntheticSpec, generate
from ssclab.nn import BackboneConfig

TINY_SPEC = SyntheticSpec(
    height=16, width=12,
    attributes=(AttributeRegion("top", (0.25, 0.5), 0.0, 0.5),
                AttributeRegion("low", (0.75, 0.5), 0.5, 0.4)),
    glyph_size=(3, 4), jitter=1, clutter_density=0.3, seed=1)

TINY_BACKBONE = BackboneConfig(in_height=16, in_width=12, channels=(4, 8), strides=(2, 2),
                               kernels=None,
                               norm_groups=2)


@pytest.fixture(scope="session")
def tiny_data():
    return (generate(TINY_SPEC, 48, "train"), generate(TINY_SPEC, 16, "val"),
            generate(TINY_SPEC, 16, "test"))


# -- acceptance summary ------------------------------------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        _CRITERIA[name] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        verdict, detail = _CRITERIA[name]
        number = name.split("_")[2]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")
