import numpy as np
import pytest


@pytest.fixture
def report(request):
    """Print one uncaptured status line, e.g. ``report(3, ok, "max err 1e-15")``."""
    capture = request.config.pluginmanager.getplugin("capturemanager")

    def emit(number: int, ok: bool, detail: str = "") -> None:
        line = f"[acceptance {number:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
        if capture is None:
            print(line)
            return
        with capture.global_and_fixture_disabled():
            print("\n" + line, flush=True)

    return emit


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
