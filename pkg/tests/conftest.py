import numpy as np
import pytest
from hypothesis import settings

from lpgflow.model import DiT, ModelConfig

settings.register_profile("ci", deadline=None, max_examples=40)
settings.load_profile("ci")


def tiny_config(**kw) -> ModelConfig:
    base = dict(patch_size=4, hidden_dim=16, num_layers=1, num_heads=2, lora_rank=2,
                num_prompt_tokens=3, time_freq_dim=8, token_vocab_size=64)
    base.update(kw)
    return ModelConfig(**base)


def random_inputs(rng, batch=2, size=8, caption_len=3, channels=3):
    """Stitched-canvas input dict for DiT.forward with a right-half mask."""
    z_t = rng.standard_normal((batch, size, 2 * size, channels)).astype(np.float32)
    canvas = rng.uniform(0, 1, (batch, size, 2 * size, channels)).astype(np.float32)
    mask = np.zeros((batch, size, 2 * size, 1), dtype=np.float32)
    mask[:, :, size:] = 1.0
    return {"z_t": z_t, "z0_masked": canvas * (1 - mask), "mask": mask,
            "cond_ids": rng.integers(1, 40, size=(batch, caption_len)),
            "t": rng.uniform(0, 1, size=batch)}


def perturb(model: DiT, rng, std=0.05):
    """Give zero-initialised weights nonzero values so every path carries signal."""
    for p in model.params.values():
        p.data = (p.data + rng.normal(0, std, p.data.shape)).astype(p.data.dtype)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_config()


# -- acceptance reporting -------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one summary line each at the end of
# the run, carrying any values recorded with ``record_property``.

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    if rep.when == "call" or rep.failed:
        item.config._criteria[number] = (title, rep.outcome, dict(rep.user_properties))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(config._criteria):
        title, outcome, props = config._criteria[number]
        detail = ", ".join(f"{k}={v}" for k, v in props.items())
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{number:2d}] {verdict}  {title}" + (f"  ({detail})" if detail else ""))
