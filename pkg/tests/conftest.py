import pytest

from rdistill.config import from_dict

SEPARABLE = {
    "epochs": 30,
    "teacher": {"family": "mlp_small", "feature_dim": 16, "pretrain_epochs": 5},
    "student": {"family": "mlp_tiny"},
    "adapter": {"d_h": 8},
    "data": {"source": "separable", "n_pretrain": 400, "n_downstream": 200},
}


def separable_cfg(method="rd_full", seed=0, **top):
    return from_dict({**SEPARABLE, **top, "method": method, "seed": seed})


@pytest.fixture
def sep_cfg():
    return separable_cfg


# acceptance criteria report: one line per criterion at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
