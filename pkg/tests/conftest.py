from __future__ import annotations

import pytest

from fedinject import evaluation as E
from fedinject.config import RunConfig, from_dict

TINY = {
    "federation": {"n_clients": 3, "rounds": 2, "server_epochs": 1},
    "model": {"d": 16, "n_layers": 1, "d_ff": 32, "n_experts": 3, "rank": 2, "d_k": 8,
              "enc_out_dim": 8},
    "pretrain": {"steps": 40},
    "benchmark": {"n_train": 80, "n_val": 40},
}


def tiny_config(**overrides) -> RunConfig:
    raw = {k: dict(v) for k, v in TINY.items()}
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        if name:
            raw[section][name] = value
        else:
            raw[section] = value
    return from_dict(raw)


@pytest.fixture(scope="session")
def tiny_world():
    """Data plus a pretrained tiny backbone, shared by every tiny-run test."""
    cfg = tiny_config()
    data = E.prepare_data(cfg)
    vocab = E.build_vocab(cfg, data)
    backbone, _ = E.pretrained_backbone(cfg, vocab)
    return cfg, data, vocab, backbone


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")
