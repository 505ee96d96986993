from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_system, mlp_model, task
from oracles import fsdp_bytes_script
from madmax.io import fixture_names, load_model, load_system
from madmax.plan import (
    CollectiveKind,
    ParallelPlan,
    PlanEntry,
    PlanError,
    Strategy,
    per_device_memory,
    required_collectives,
    sharding_factor,
    validate_plan,
)
from madmax.workload import MLP, EmbeddingBag, LayerSpec, ModelArch, TaskSpec, layer_param_count

DDP, FSDP, TP, MP, NONE = Strategy.DDP, Strategy.FSDP, Strategy.TP, Strategy.MP_SHARD, Strategy.NONE
E = PlanEntry
SYS = make_system(8, 16)


def plan(**groups):
    return ParallelPlan({g: e for g, e in groups.items()})


def test_sharding_factor_examples():
    assert sharding_factor(E(TP, DDP), SYS) == 8
    assert sharding_factor(E(DDP, TP), SYS) == 16
    assert sharding_factor(E(FSDP, FSDP), SYS) == 128
    assert sharding_factor(E(DDP, NONE), SYS) == 1


def test_ddp_emits_one_grad_allreduce():
    layer = LayerSpec("m", MLP(100, 50))
    reqs = required_collectives(layer, E(DDP, DDP), task(), SYS)
    assert len(reqs) == 1
    r = reqs[0]
    assert (r.kind, r.phase, r.blocking, r.level) == (CollectiveKind.ALLREDUCE, "backward", False, "global")
    assert r.bytes_per_device == layer_param_count(layer) * 4


def test_sharded_embedding_inference_single_all2all():
    layer = LayerSpec("e", EmbeddingBag(8, 1000, 64, 2))
    reqs = required_collectives(layer, E(MP, MP), task("inference"), SYS)
    assert [(r.kind, r.phase, r.blocking) for r in reqs] == [(CollectiveKind.ALL2ALL, "forward", True)]
    # pooled bytes leave for the other D-1 devices
    pooled = 8 * 64 * 4 * (1024 / 128)
    assert reqs[0].bytes_per_device == pytest.approx(pooled * 127 / 128)


def test_fsdp_collectives_and_bytes():
    layer = LayerSpec("m", MLP(1000, 1000))
    reqs = required_collectives(layer, E(FSDP, FSDP), task(), SYS)
    kinds = [(r.kind, r.phase) for r in reqs]
    assert kinds == [
        (CollectiveKind.ALLGATHER, "forward"),
        (CollectiveKind.ALLGATHER, "backward"),
        (CollectiveKind.REDUCESCATTER, "backward"),
    ]
    shard = layer_param_count(layer) * 4 / 128
    assert all(r.bytes_per_device == pytest.approx(shard) for r in reqs)
    assert [r.blocking for r in reqs] == [True, True, False]
    total = sum(r.bytes_per_device for r in reqs)
    assert total == pytest.approx(fsdp_bytes_script(layer_param_count(layer) * 4, 128, True))


@given(st.integers(128, 1 << 16))
def test_fsdp_bytes_invariant_to_batch(batch):
    layer = LayerSpec("m", MLP(64, 32))
    a = sum(r.bytes_per_device for r in required_collectives(layer, E(FSDP, FSDP), task(batch=batch), SYS))
    b = sum(r.bytes_per_device for r in required_collectives(layer, E(FSDP, FSDP), task(batch=128), SYS))
    assert a == b


def test_tp_emits_blocking_activation_allreduce_both_phases():
    layer = LayerSpec("m", MLP(64, 32))
    reqs = required_collectives(layer, E(TP, DDP), task(), SYS)
    tp = [r for r in reqs if r.role == "activation"]
    assert [(r.phase, r.blocking, r.level) for r in tp] == [("forward", True, "intra"), ("backward", True, "intra")]


def test_mp_on_dense_layer_rejected():
    with pytest.raises(PlanError):
        required_collectives(LayerSpec("m", MLP(2, 2)), E(MP, MP), task(), SYS)


def test_finetune_frozen_layer_has_no_grad_collectives():
    layer = LayerSpec("m", MLP(8, 8))
    t = TaskSpec("finetune", 1024, frozen_layers=frozenset({"m"}))
    reqs = required_collectives(layer, E(FSDP, DDP), t, SYS)
    assert not any(r.role == "grad_reduce" for r in reqs)


def _sample_layers():
    return [
        LayerSpec("mlp", MLP(256, 512, 3)),
        LayerSpec("emb", EmbeddingBag(4, 1000, 16, 3)),
    ]


@pytest.mark.parametrize("intra", [DDP, FSDP, TP, NONE])
@pytest.mark.parametrize("inter", [DDP, FSDP, TP, NONE])
def test_inference_collectives_are_forward_subset(intra, inter):
    for layer in _sample_layers():
        entry = E(intra, inter)
        train = required_collectives(layer, entry, task("pretrain"), SYS)
        infer = required_collectives(layer, entry, task("inference"), SYS)
        assert infer == [r for r in train if r.phase == "forward"]


@pytest.mark.parametrize("name", fixture_names("models"))
def test_inference_subset_on_fixtures(name):
    model = load_model(name)
    system = load_system("llm_a100_2048")
    ctx = 256
    for layer in model.layers:
        for entry in (E(FSDP, FSDP), E(TP, DDP), E(DDP, FSDP)):
            train = required_collectives(layer, entry, TaskSpec("pretrain", 4096, ctx), system)
            infer = required_collectives(layer, entry, TaskSpec("inference", 4096, ctx), system)
            assert infer == [r for r in train if r.phase == "forward"]


# -- memory ----------------------------------------------------------------------


def one_mlp():
    # 1e6 parameters including bias
    return ModelArch("m", (LayerSpec("m", MLP(999, 1000)),), ("m",))


def test_memory_inference_params_only():
    model = one_mlp()
    mem = per_device_memory(model, plan(dense=E(DDP, DDP)), TaskSpec("inference", 128), SYS)
    assert mem.params == 4e6
    assert mem.grads == mem.optimizer_states == 0


def test_memory_pretrain_components():
    model = one_mlp()
    mem = per_device_memory(model, plan(dense=E(DDP, DDP)), TaskSpec("pretrain", 128), SYS)
    assert (mem.params, mem.grads, mem.optimizer_states) == (4e6, 4e6, 8e6)
    assert mem.total == 16e6 + mem.activations
    assert mem.activations == 1000 * 1 * 4


def test_dlrm_a_ddp_oom_tp_ddp_fits(dlrm_a):
    model, system, tf = dlrm_a
    mp = E(MP, MP)
    assert not per_device_memory(model, plan(dense=E(DDP, DDP), embedding=mp), tf.task, system).fits
    assert per_device_memory(model, plan(dense=E(TP, DDP), embedding=mp), tf.task, system).fits
    assert validate_plan(model, plan(dense=E(TP, DDP), embedding=mp), tf.task, system) is None


def test_gpt3_tp_ddp_oom(gpt3):
    model, system, tf = gpt3
    p = ParallelPlan({"transformer": E(TP, DDP), "embedding": E(DDP, DDP), "dense": E(FSDP, FSDP)})
    report = validate_plan(model, p, tf.task, system)
    assert report is not None and report.kind == "oom" and report.overage_bytes > 0


def test_empty_model_structural():
    report = validate_plan(ModelArch("empty", (), ()), plan(dense=E(DDP, DDP)), task(), SYS)
    assert report.kind == "structural"


def test_unsynced_replication_structural_but_ok_for_inference():
    model = one_mlp()
    assert validate_plan(model, plan(dense=E(NONE, NONE)), task(), SYS).kind == "structural"
    assert validate_plan(model, plan(dense=E(NONE, NONE)), task("inference"), SYS) is None


def test_plan_must_cover_groups():
    report = validate_plan(one_mlp(), plan(embedding=E(MP, MP)), task(), SYS)
    assert report.kind == "structural" and "dense" in report.message


@pytest.mark.parametrize("dpn,nodes", [(8, 16), (4, 2), (2, 32)])
@pytest.mark.parametrize("a,b", [(TP, DDP), (FSDP, DDP), (TP, NONE), (FSDP, NONE)])
def test_ordering_sensitivity(dpn, nodes, a, b):
    system = make_system(dpn, nodes)
    model = mlp_model(64, 64, 64)
    ab = per_device_memory(model, plan(dense=E(a, b)), task(batch=dpn * nodes), system)
    ba = per_device_memory(model, plan(dense=E(b, a)), task(batch=dpn * nodes), system)
    assert ab != ba
    assert ab.params * dpn == ba.params * nodes


def test_params_ratio_exactly_eight_sixteenths():
    model = mlp_model(512, 512)
    m1 = per_device_memory(model, plan(dense=E(DDP, TP)), task(), SYS)
    m2 = per_device_memory(model, plan(dense=E(TP, DDP)), task(), SYS)
    assert m1.params / m2.params == 8 / 16


@pytest.mark.parametrize("entry", [E(FSDP, FSDP), E(TP, FSDP), E(TP, TP), E(DDP, FSDP), E(TP, DDP), E(DDP, DDP)])
def test_parameter_bytes_conservation(entry):
    model = mlp_model(128, 256, 64)
    mem = per_device_memory(model, plan(dense=entry), task(), SYS)
    model_bytes = sum(layer_param_count(layer) * 4 for layer in model.layers)
    replication = SYS.total_devices // sharding_factor(entry, SYS)
    assert mem.params * SYS.total_devices == pytest.approx(replication * model_bytes)
    if replication == 1:
        assert mem.params * SYS.total_devices == pytest.approx(model_bytes)


@pytest.mark.parametrize("entry", [E(FSDP, FSDP), E(TP, DDP), E(DDP, DDP), E(DDP, FSDP)])
def test_footprint_monotone_over_task_kinds(entry):
    model = mlp_model(128, 256, 64, 32)
    p = plan(dense=entry)
    inf = per_device_memory(model, p, TaskSpec("inference", 1024), SYS)
    fin = per_device_memory(model, p, TaskSpec("finetune", 1024, frozen_layers=frozenset({"l0"})), SYS)
    pre = per_device_memory(model, p, TaskSpec("pretrain", 1024), SYS)
    for field in ("params", "grads", "optimizer_states", "activations", "total"):
        assert getattr(inf, field) <= getattr(fin, field) <= getattr(pre, field)


def test_plan_round_trip():
    p = ParallelPlan({"dense": E(TP, DDP), "embedding": E(MP, MP)}, {"top": E(FSDP, FSDP)}, True)
    assert ParallelPlan.from_dict(p.to_dict()) == p
    assert p.name == "dense=(TP, DDP) embedding=(MP) top=(FSDP, FSDP) prefetch"
