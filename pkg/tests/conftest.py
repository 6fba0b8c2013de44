import math
import sys

import pytest

from causal_sfda.data import SyntheticDomainSpec, generate_domain_pair
from causal_sfda.models import TargetModel, ToyVilEncoder
from causal_sfda.trainer import AdaptationConfig, SourceConfig, adapt, train_source

# The default rotated scenario: five classes, target style plane turned by 90 degrees.
DEFAULT_SPEC = SyntheticDomainSpec(rotation=math.pi / 2)


class DefaultRun:
    def __init__(self, seed: int = 0):
        self.spec = DEFAULT_SPEC
        self.seed = seed
        self.source, self.target = generate_domain_pair(self.spec, seed)
        self.encoder = ToyVilEncoder.for_synthetic(self.spec, seed)
        self.base = TargetModel(self.spec.dim, self.spec.n_classes, seed=seed)
        self.source_model = train_source(self.base, self.source, SourceConfig(seed=seed))
        self.events = []
        self.history = adapt(self.source_model, self.target, self.encoder, AdaptationConfig(seed=seed),
                             on_event=lambda phase, it: self.events.append((phase, it)))


@pytest.fixture(scope="session")
def default_run() -> DefaultRun:
    return DefaultRun(0)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """A closed-set scenario written by the command line."""
    from causal_sfda.cli import main

    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--seed", "0"]) == 0
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
