import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from rhythmlab.audio_features import SAMPLE_RATE, AudioSignal, FeatureSequence
from rhythmlab.corpus import SEGMENT_FRAMES, SegmentRecord

_ACCEPTANCE = {}


@pytest.fixture(autouse=True, scope="session")
def single_thread():
    # determinism reference: one BLAS thread
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sine(freq, seconds=1.0, amplitude=1.0, rate=SAMPLE_RATE):
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioSignal(amplitude * np.sin(2 * np.pi * freq * t), rate)


def random_segment(rng, language, speaker, frames=SEGMENT_FRAMES, source="test"):
    levels = np.clip(rng.random((frames, 3)), 0, 1)
    levels[:, 2] = levels[:, 2] > 0.5
    return SegmentRecord(FeatureSequence.from_frames(levels), language, speaker, source)


@pytest.fixture
def toy_segments(rng):
    """Three languages, three speakers each, four short segments per speaker."""
    segs = []
    for lang in range(3):
        for spk in range(3):
            for _ in range(4):
                segs.append(random_segment(rng, lang, f"L{lang}S{spk}", frames=40))
    return segs


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        marker = getattr(report, "criterion", None) or report.nodeid.split("::")[-1]
        _ACCEPTANCE[report.nodeid] = (marker, report.outcome, report.duration)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = f"criterion {mark.args[0]:>2}: {mark.args[1]}"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for marker, outcome, duration in sorted(_ACCEPTANCE.values()):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {marker}  ({duration:.1f} s)")


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
