import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def small_dataset():
    from vitp.synth import SynthConfig, generate
    return generate(SynthConfig(num_images=12, seed=3))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
