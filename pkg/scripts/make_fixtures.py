#!/usr/bin/env python3
"""Regenerate the shipped JSON fixtures under src/madmax/fixtures.

Run from the repository root: ``python3 scripts/make_fixtures.py``.
Assumptions that are not published dimensions are written into each file's
``notes`` so they travel with the data.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

from madmax.plan import ParallelPlan, PlanEntry, Strategy
from madmax.workload import (
    MLP,
    SCHEMA_VERSION,
    Aggregate,
    DeviceSpec,
    EmbeddingBag,
    LayerSpec,
    ModelArch,
    MoE,
    SystemSpec,
    TransformerBlock,
)

ROOT = Path(__file__).resolve().parents[1] / "src" / "madmax" / "fixtures"

DDP, FSDP, TP, MP = Strategy.DDP, Strategy.FSDP, Strategy.TP, Strategy.MP_SHARD
DENSE_DOMAIN = {"intra": ["DDP", "FSDP", "TP"], "inter": ["DDP", "FSDP", "TP"]}


def write(kind: str, name: str, doc: dict) -> None:
    path = ROOT / kind / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Recommendation models

# embedding tables hold 99.96% of DLRM-A's 793e9 parameters
DLRM_A = dict(
    emb_params=792.683e9,
    lookup_bytes=22.61e6,
    pooled_bytes=580e3,
    bot=dict(flops=368e6, params=184e6, act=80e3),
    top=dict(flops=270e6, params=133e6, act=80e3),
)
DLRM_B = dict(
    emb_params=331.97e9,
    lookup_bytes=13.19e6,
    pooled_bytes=320e3,
    bot=dict(flops=30e6, params=15e6, act=16e3),
    top=dict(flops=30e6, params=15e6, act=16e3),
)
DLRM_NOTES = [
    "Aggregate layers: per-sample FLOPs, parameters and lookup bytes follow the published model totals;"
    " the split between bottom and top MLP and the activation sizes are assumptions.",
    "Embedding tables are stored in 2-byte precision; dense layers in 4-byte precision.",
]


def dlrm_layers(cfg: dict, *, transformer: bool = False, moe: bool = False) -> tuple[list[LayerSpec], list[str]]:
    emb = LayerSpec(
        "emb",
        Aggregate(0.0, cfg["emb_params"], cfg["lookup_bytes"], cfg["pooled_bytes"]),
        param_precision_bytes=2,
    )
    # the bottom MLP reads dense features, not embeddings
    bot = LayerSpec(
        "bot_mlp", Aggregate(cfg["bot"]["flops"], cfg["bot"]["params"], 0.0, cfg["bot"]["act"]), inputs=()
    )
    top_kind = Aggregate(cfg["top"]["flops"], cfg["top"]["params"], 0.0, cfg["top"]["act"])
    layers = [emb, bot]
    order = ["emb", "bot_mlp"]
    top_inputs = ("emb", "bot_mlp")
    if transformer:
        layers.append(
            LayerSpec(
                "transformer",
                TransformerBlock(hidden_dim=512, num_heads=8, ffn_dim=2048, num_layers=4),
                inputs=("emb", "bot_mlp"),
            )
        )
        order.append("transformer")
        top_inputs = ("transformer",)
    if moe:
        top = LayerSpec("top_moe", MoE(top_kind, num_experts=16, active_experts=2), inputs=top_inputs)
    else:
        top = LayerSpec("top_mlp", top_kind, inputs=top_inputs)
    layers.append(top)
    order.append(top.id)
    return layers, order


def recsys_models() -> None:
    for tag, cfg in (("a", DLRM_A), ("b", DLRM_B)):
        for variant, kw, extra in (
            ("", {}, []),
            ("_transformer", {"transformer": True}, [
                "Transformer variant: 4 blocks, hidden 512, 8 heads, ffn 2048 over a down-sampled sequence of 80;"
                " dimensions are assumptions sized to the published per-sample FLOPs.",
            ]),
            ("_moe", {"moe": True}, [
                "MoE variant: the top MLP becomes 16 experts with 2 active per sample.",
            ]),
        ):
            layers, order = dlrm_layers(cfg, **kw)
            model = ModelArch(f"dlrm_{tag}{variant}", tuple(layers), tuple(order), tuple(DLRM_NOTES + extra))
            write("models", model.name, model.to_dict())


# ---------------------------------------------------------------------------
# Language models


def llm(name, *, blocks, d, heads, ffn, vocab, ctx, gated, kv_heads=None, notes=(), moe=None):
    layers = [
        LayerSpec(
            "tok_emb",
            EmbeddingBag(num_tables=1, rows_per_table=vocab, embedding_dim=d, lookups_per_table_per_sample=ctx),
            param_precision_bytes=4,
            activation_precision_bytes=2,
            group="embedding",
        )
    ]
    for i in range(blocks):
        if moe is None:
            kind = TransformerBlock(d, heads, ffn, num_kv_heads=kv_heads, gated_ffn=gated)
            layers.append(LayerSpec(f"block{i:03d}", kind, 2, 2))
        else:
            layers.append(LayerSpec(f"attn{i:03d}", TransformerBlock(d, heads, 0, num_kv_heads=kv_heads), 2, 2))
            expert = MLP(d, d, num_layers=2, hidden_dim=4 * d)
            layers.append(LayerSpec(f"moe{i:03d}", MoE(expert, moe[0], moe[1]), 2, 2))
    layers.append(LayerSpec("lm_head", MLP(d, vocab), 2, 2))
    model = ModelArch(name, tuple(layers), tuple(layer.id for layer in layers), tuple(notes))
    write("models", name, model.to_dict())


LLM_NOTES = [
    "Token embedding is an EmbeddingBag with one lookup per token, stored in 4-byte precision;"
    " every sample is one sequence, so the lookup count per sample equals the context length.",
    "Blocks and the output head compute in 2-byte precision.",
]


def language_models() -> None:
    llm("gpt3_175b", blocks=96, d=12288, heads=96, ffn=4 * 12288, vocab=50257, ctx=2048, gated=False, notes=LLM_NOTES)
    llm("llama_65b", blocks=80, d=8192, heads=64, ffn=22016, vocab=32000, ctx=2048, gated=True, notes=LLM_NOTES)
    llm(
        "llama2_70b",
        blocks=80,
        d=8192,
        heads=64,
        ffn=28672,
        vocab=32000,
        ctx=4096,
        gated=True,
        kv_heads=8,
        notes=LLM_NOTES + ["Grouped-query attention with 8 key/value heads."],
    )
    llm(
        "llm_moe_1p8t",
        blocks=120,
        d=10752,
        heads=84,
        ffn=0,
        vocab=100000,
        ctx=8192,
        gated=False,
        moe=(16, 2),
        notes=LLM_NOTES
        + [
            "Assumed layout: 120 attention blocks each followed by 16 two-layer MLP experts (hidden 4x) with 2 active,"
            " sized to the published 1.8e12 parameters and 42.8 KB lookup bytes per token.",
        ],
    )


# ---------------------------------------------------------------------------
# Systems

SYSTEM_NOTES = ["Bandwidths are unidirectional bytes/s per device."]


def system(name, *, peaks, hbm, hbm_bw, dpn, nodes, intra, inter, util=0.7, hbm_util=0.8, notes=()):
    dev = DeviceSpec(name, peaks, hbm, hbm_bw, util, hbm_util)
    sys_ = SystemSpec(name, dev, dpn, nodes, intra, inter, notes=tuple(SYSTEM_NOTES + list(notes)))
    write("systems", name, sys_.to_dict())


A100_PEAKS = {"fp32": 156e12, "fp16": 312e12}


def systems() -> None:
    system(
        "zionex_a100_128",
        peaks=A100_PEAKS,
        hbm=40e9,
        hbm_bw=1.6e12,
        dpn=8,
        nodes=16,
        intra=300e9,
        inter=25e9,
        notes=["128 A100 40GB; NVLink 300 GB/s and 200 Gbps RoCE per device."],
    )
    system(
        "llm_a100_2048",
        peaks=A100_PEAKS,
        hbm=80e9,
        hbm_bw=1.935e12,
        dpn=8,
        nodes=256,
        intra=300e9,
        inter=25e9,
        util=0.54,
        notes=[
            "2048 A100 80GB; 200 Gbps Infiniband per device.",
            "compute_utilization 0.54 is calibrated against the published 1.4T-token training time.",
        ],
    )
    h100 = dict(peaks={"fp32": 378e12, "fp16": 756e12, "fp8": 1512e12}, hbm=80e9, hbm_bw=2.0e12, dpn=8, intra=450e9)
    system("h100", nodes=16, inter=50e9, notes=["H100 node: NVLink 900 GB/s bidirectional, 400 Gbps per device between nodes."], **h100)
    system("h100_superpod", nodes=16, inter=225e9, notes=["H100 SuperPOD: NVLink network between nodes."], **h100)
    system(
        "mi250x",
        peaks={"fp32": 95.7e12, "fp16": 383e12},
        hbm=128e9,
        hbm_bw=3.2e12,
        dpn=8,
        nodes=16,
        intra=250e9,
        inter=25e9,
    )
    system(
        "mi300x",
        peaks={"fp32": 163.4e12, "fp16": 1307e12, "fp8": 2615e12},
        hbm=192e9,
        hbm_bw=5.3e12,
        dpn=8,
        nodes=16,
        intra=448e9,
        inter=50e9,
    )
    system(
        "gaudi2",
        peaks={"fp32": 200e12, "fp16": 400e12},
        hbm=96e9,
        hbm_bw=2.45e12,
        dpn=8,
        nodes=16,
        intra=131.25e9,
        inter=37.5e9,
    )
    system(
        "v100_128",
        peaks={"fp32": 15.7e12, "fp16": 125e12},
        hbm=32e9,
        hbm_bw=0.9e12,
        dpn=8,
        nodes=16,
        intra=150e9,
        inter=12.5e9,
    )


# ---------------------------------------------------------------------------
# Tasks


def plan(**groups) -> dict:
    return ParallelPlan({g: e for g, e in groups.items() if g != "fsdp_prefetch"},
                        fsdp_prefetch=groups.get("fsdp_prefetch", False)).to_dict()


def task(name, body: dict) -> None:
    write("tasks", name, {"schema_version": SCHEMA_VERSION, "name": name, **body})


def tasks() -> None:
    mp = PlanEntry(MP, MP)
    recsys = {"embedding": mp.to_dict(), "dense": DENSE_DOMAIN}
    for tag, batch in (("a", 65536), ("b", 262144)):
        # fused sparse updates touch only the unique rows of a batch
        base = {"global_batch": batch, "unit": "samples", "options": {"backward_lookup_factor": 0.3}}
        best = plan(dense=PlanEntry(TP, DDP), embedding=mp)
        fsdp = plan(dense=PlanEntry(FSDP, FSDP), embedding=mp)
        for kind in ("pretrain", "inference"):
            task(
                f"dlrm_{tag}_{kind}",
                {"kind": kind, **base, "plan": best, "baseline": fsdp, "search": recsys},
            )
        tf = plan(dense=PlanEntry(TP, DDP), transformer=PlanEntry(TP, DDP), embedding=mp)
        task(
            f"dlrm_{tag}_transformer_pretrain",
            {
                "kind": "pretrain",
                **base,
                "context_length": 80,
                "plan": tf,
                "baseline": plan(dense=PlanEntry(FSDP, FSDP), transformer=PlanEntry(FSDP, FSDP), embedding=mp),
                "search": {**recsys, "transformer": DENSE_DOMAIN},
            },
        )
        task(
            f"dlrm_{tag}_moe_pretrain",
            {
                "kind": "pretrain",
                **base,
                "plan": plan(dense=PlanEntry(TP, DDP), moe=PlanEntry(FSDP, FSDP), embedding=mp),
                "baseline": plan(dense=PlanEntry(FSDP, FSDP), moe=PlanEntry(FSDP, FSDP), embedding=mp),
                "search": {**recsys, "moe": DENSE_DOMAIN},
            },
        )

    llm_search = {
        "embedding": [{"intra": "DDP", "inter": "DDP"}],
        "transformer": DENSE_DOMAIN,
        # the output head is a small share of the work; keep the search on the blocks
        "dense": [{"intra": "FSDP", "inter": "FSDP"}],
    }
    fsdp = PlanEntry(FSDP, FSDP)
    emb = PlanEntry(DDP, DDP)
    llm_plan = plan(embedding=emb, transformer=fsdp, dense=fsdp, fsdp_prefetch=True)
    llm_base = plan(embedding=emb, transformer=fsdp, dense=fsdp)
    for name, ctx in (("gpt3_175b", 2048), ("llama_65b", 2048), ("llama2_70b", 4096)):
        body = {
            "kind": "pretrain",
            "global_batch": 2048,
            "context_length": ctx,
            "unit": "tokens",
            "plan": llm_plan,
            "baseline": llm_base,
            "search": llm_search,
        }
        if name == "llama_65b":
            body["total_work"] = 1.4e12
            body["steps"] = 306000
        task(f"{name}_pretrain", body)
        infer = {k: v for k, v in body.items() if k not in ("total_work", "steps")}
        task(f"{name}_inference", {**infer, "kind": "inference"})
    task(
        "llm_moe_1p8t_pretrain",
        {
            "kind": "pretrain",
            "global_batch": 2048,
            "context_length": 8192,
            "unit": "tokens",
            "plan": plan(embedding=emb, transformer=fsdp, moe=fsdp, dense=fsdp, fsdp_prefetch=True),
            "baseline": plan(embedding=emb, transformer=fsdp, moe=fsdp, dense=fsdp),
            "search": {**llm_search, "moe": DENSE_DOMAIN},
        },
    )


def main() -> int:
    recsys_models()
    language_models()
    systems()
    tasks()
    print(f"fixtures written to {ROOT}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
