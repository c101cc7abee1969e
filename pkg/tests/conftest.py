import pytest

from fstta import model, navsim


@pytest.fixture(scope="session")
def pretrained():
    return model.pretrain(navsim.teacher_sampler(), model.TrainConfig(), seed=0)


@pytest.fixture(scope="session")
def pretrained_file(pretrained, tmp_path_factory):
    path = tmp_path_factory.mktemp("params") / "policy.bin"
    model.save_params(pretrained, path)
    return path


_ACCEPTANCE = {}


def acceptance_report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
