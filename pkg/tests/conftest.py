import numpy as np
import pytest
import torch

from refir.restorer import ModelConfig
from refir.restorer.train import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    """Untrained 16-px model; the condition branch is still zero-initialised."""
    return build_model(ModelConfig(image_size=16, base_width=16), seed=0).eval()


@pytest.fixture(scope="session")
def perturbed_model():
    """Small model whose zero projections have been given weights, so conditioning matters."""
    model = build_model(ModelConfig(image_size=16, base_width=16), seed=1).eval()
    gen = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for conv in [*model.zero_skips, model.zero_mid]:
            conv.weight.copy_(0.1 * torch.randn(conv.weight.shape, generator=gen))
    return model


_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.details = number, title, []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc is not None:
            detail = f"{detail}; {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}".lstrip("; ")
        _ACCEPTANCE[self.number] = (status, self.title, detail)
        return False


@pytest.fixture
def criterion():
    """Context manager recording one acceptance criterion's outcome for the summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title} [{detail}]")
