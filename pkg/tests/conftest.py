import pytest
import torch

from recurvsr.denoiser import DenoiserConfig

torch.set_num_threads(1)

# filled by the acceptance tests, echoed at the end of every run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)


def smoke_config(**overrides) -> DenoiserConfig:
    """Smallest config that still exercises every code path (2 levels, attention + injection)."""
    base = dict(
        image_size=16,
        low_res_size=8,
        hidden_channels=16,
        channel_multipliers=(1, 2),
        attention_levels=(2,),
        expression_injection_level=2,
        timestep_embedding_dim=16,
        attention_heads=2,
        expression_encoder_channels=8,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


def toy_config(**overrides) -> DenoiserConfig:
    """Desk-scale config: 32x32 frames, 8x8 low-res, hidden 32, multipliers [1, 2, 4]."""
    base = dict(
        image_size=32,
        low_res_size=8,
        hidden_channels=32,
        channel_multipliers=(1, 2, 4),
        attention_levels=(3,),
        expression_injection_level=3,
        timestep_embedding_dim=32,
        expression_encoder_channels=32,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


def random_batch(cfg: DenoiserConfig, b=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    hi = lambda: torch.rand(b, 3, cfg.image_size, cfg.image_size, generator=g, dtype=dtype) * 2 - 1
    return {
        "noisy": torch.randn(b, 3, cfg.image_size, cfg.image_size, generator=g, dtype=dtype),
        "identity": hi(),
        "previous": hi(),
        "target": hi(),
        "low_res": torch.rand(b, 3, cfg.low_res_size, cfg.low_res_size, generator=g, dtype=dtype) * 2 - 1,
    }


@pytest.fixture
def smoke_cfg():
    return smoke_config()
