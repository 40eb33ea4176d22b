import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small audio-mode synthetic corpus with extracted features (all offsets)."""
    from ssl_am import pipeline as pl
    from ssl_am.experiment import synth_manifest
    from ssl_am.manifest import read_manifest
    from ssl_am.synth import SynthSpec

    spec = SynthSpec(seed=3, utterances={"labeled": 8, "unlabeled": 12, "heldout": 6},
                     speakers={"labeled": 3, "unlabeled": 4, "heldout": 2}, durations_s=(1.0, 1.5))
    d = tmp_path_factory.mktemp("corpus")
    manifest = read_manifest(synth_manifest(spec, d))
    feats, prior, mvn = pl.extract_all(manifest)
    return spec, manifest, feats, prior, mvn
