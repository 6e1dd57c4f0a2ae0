import numpy as np
import pytest
import torch
from torch import nn

from xaiens.config import from_dict

torch.set_num_threads(1)


class LinearScorer(nn.Module):
    """Two-class linear model: logits ``[w.x + b, -(w.x + b)]``."""

    def __init__(self, weight: torch.Tensor, bias: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(weight.clone())
        self.bias = nn.Parameter(torch.tensor(bias, dtype=weight.dtype))

    def forward(self, x):
        s = (x * self.weight).flatten(1).sum(1) + self.bias
        return torch.stack([s, -s], dim=1)


class ConstantModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 1, 3, padding=1)

    def forward(self, x):
        # depends on x only through a zero multiple, so every gradient vanishes
        return torch.stack([0.0 * self.conv(x).sum((1, 2, 3)) + 1.0, 0.0 * x.sum((1, 2, 3))], dim=1)


@pytest.fixture
def linear_case():
    gen = torch.Generator().manual_seed(3)
    w = torch.randn(3, 16, 16, generator=gen, dtype=torch.float64)
    x = torch.rand(3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    return LinearScorer(w, bias=0.25).double(), w, x


def _tiny_run_config(out, **run):
    return from_dict(
        {
            "run": {"out": str(out), "seed": 5, "preset": "Saliency+GuidedBackprop", **run},
            "data": {"n": 12, "side": 32},
            "classifier": {"epochs": 3, "width": 4},
            "ensembler": {"blocks": [1, 1, 1, 1], "width_scale": 0.125},
            "train": {"max_epochs": 2, "batch_size": 4},
            "eval": {"robustness_images": 1, "randomisation_images": 1, "lipschitz_samples": 1},
        }
    )


@pytest.fixture
def tiny_config():
    """Factory for a pipeline config that runs end to end in seconds."""
    return _tiny_run_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------ acceptance reporting

_ACCEPTANCE: dict[int, tuple[str, str, float, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    verdict = "PASS" if rep.passed else "FAIL"
    _ACCEPTANCE[number] = (title, verdict, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, verdict, seconds, detail = _ACCEPTANCE[number]
        line = f"criterion {number} {verdict}  {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
