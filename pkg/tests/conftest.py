from __future__ import annotations

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from madmax.io import load_model, load_system, load_task  # noqa: E402
from madmax.workload import MLP, DeviceSpec, LayerSpec, ModelArch, SystemSpec, TaskSpec  # noqa: E402


def make_device(peak=1e12, util=1.0, hbm=1e12, hbm_bw=1e12, hbm_util=1.0, **peaks) -> DeviceSpec:
    flops = {"fp32": peak, "fp16": 2 * peak}
    flops.update(peaks)
    return DeviceSpec("toy", flops, hbm, hbm_bw, util, hbm_util)


def make_system(dpn=8, nodes=16, intra=100e9, inter=10e9, **kw) -> SystemSpec:
    return SystemSpec("toy", make_device(**kw), dpn, nodes, intra, inter)


def mlp_model(*dims, name="toy") -> ModelArch:
    """Chain of single-layer MLPs ``dims[0] -> dims[1] -> ...``."""
    layers = tuple(LayerSpec(f"l{i}", MLP(a, b)) for i, (a, b) in enumerate(zip(dims, dims[1:])))
    return ModelArch(name, layers, tuple(layer.id for layer in layers))


def task(kind="pretrain", batch=1024, **kw) -> TaskSpec:
    return TaskSpec(kind, batch, **kw)


@pytest.fixture(scope="session")
def dlrm_a():
    return load_model("dlrm_a"), load_system("zionex_a100_128"), load_task("dlrm_a_pretrain")


@pytest.fixture(scope="session")
def gpt3():
    return load_model("gpt3_175b"), load_system("llm_a100_2048"), load_task("gpt3_175b_pretrain")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
