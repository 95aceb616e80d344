import pytest

from stlayout.diffusion import DenoiserDims, ToyDenoiser

TINY = DenoiserDims(d_model=16, heads=2, blocks=2, mlp_mult=2)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """Untrained small denoiser on disk, for plumbing tests."""
    path = tmp_path_factory.mktemp("ck") / "tiny"
    ToyDenoiser(TINY, seed=0).save(path)
    return path


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
