"""Finite-difference verification suites for every loss in the system.

All checks run in float64 with dropout disabled and compare analytic
gradients against central differences. The CTC hypothesis fed to the LM is
held fixed inside the joint-loss check because greedy decoding is discrete.
"""

from __future__ import annotations

import numpy as np

from .ctc import ctc_loss
from .encoder import EncoderConfig, encode, init_encoder_params
from .fusion import LmConfig, assemble, lm_loss, speech_embed, stutter_embed
from .model import ModelConfig, System
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.gradcheck import grad_check
from .nn.layers import NetContext, mean_pool
from .sed import FocalParams, SedConfig, focal_loss, init_sed_params, sed_classify, sed_loss, sed_project
from .nn.params import ParamStore

TOLERANCE = 1e-5


def _rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def ctc_checks(n_instances: int = 20, seed: int = 11) -> list[tuple[str, float]]:
    rng = _rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        t, v, l = 5, 4, 2
        target = [int(x) for x in rng.integers(1, v + 1, size=l)]

        def fn(point, target=target):
            logits = Tensor(point["logits"], requires_grad=True)
            loss = ctc_loss(logits, target)
            loss.backward()
            return loss.item(), {"logits": logits.grad}

        worst = max(worst, grad_check(fn, {"logits": rng.normal(0, 2, size=(t, v + 1))}))
    return [("ctc_loss", worst)]


def sed_checks(n_instances: int = 20, seed: int = 12) -> list[tuple[str, float]]:
    rng = _rng(seed)
    fp = FocalParams()
    worst_focal = worst_supcon = worst_hybrid = worst_cls = worst_pool = 0.0

    cfg = SedConfig(hidden_dim=8, proj_dim=4, dropout=0.0)
    store = ParamStore(np.float64)
    init_sed_params(store, cfg, 6, rng)

    for _ in range(n_instances):
        labels = (rng.random((4, 5)) < 0.45).astype(np.float64)

        def focal_fn(point, labels=labels):
            logits = Tensor(point["logits"], requires_grad=True)
            loss = focal_loss(logits, labels, fp)
            loss.backward()
            return loss.item(), {"logits": logits.grad}

        worst_focal = max(worst_focal,
                          grad_check(focal_fn, {"logits": rng.normal(0, 2, size=(4, 5))}))

        z0 = rng.normal(size=(4, 4))
        z0 /= np.linalg.norm(z0, axis=1, keepdims=True)

        def supcon_fn(point, labels=labels):
            from .sed import supcon_loss

            z = Tensor(point["z"], requires_grad=True)
            loss = supcon_loss(z, labels, 0.2, check_norm=False)
            loss.backward()
            if loss._parents == ():
                return loss.item(), {"z": np.zeros_like(point["z"])}
            return loss.item(), {"z": z.grad}

        worst_supcon = max(worst_supcon, grad_check(supcon_fn, {"z": z0}))

        def hybrid_fn(point, labels=labels):
            logits = Tensor(point["logits"], requires_grad=True)
            z = Tensor(point["z"], requires_grad=True)
            loss = sed_loss(logits, labels, z, fp, 0.3, 0.1, check_norm=False)
            loss.backward()
            gz = z.grad if z.grad is not None else np.zeros_like(point["z"])
            return loss.item(), {"logits": logits.grad, "z": gz}

        worst_hybrid = max(worst_hybrid, grad_check(
            hybrid_fn, {"logits": rng.normal(0, 2, size=(4, 5)), "z": z0}))

        def cls_fn(point):
            ctx = NetContext(store, training=False)
            v = Tensor(point["v"], requires_grad=True)
            logits, _ = sed_classify(ctx, cfg, v)
            z = sed_project(ctx, v)
            loss = ag.add(ag.sum_all(logits), ag.sum_all(ag.mul(z, z)))
            loss.backward()
            return loss.item(), {"v": v.grad}

        worst_cls = max(worst_cls, grad_check(cls_fn, {"v": rng.normal(size=6)}))

        def pool_fn(point):
            h = Tensor(point["h"], requires_grad=True)
            loss = ag.sum_all(mean_pool(h))
            loss.backward()
            return loss.item(), {"h": h.grad}

        worst_pool = max(worst_pool, grad_check(pool_fn, {"h": rng.normal(size=(5, 3))}))

    return [
        ("focal_loss", worst_focal),
        ("supcon_loss", worst_supcon),
        ("hybrid_sed_loss", worst_hybrid),
        ("sed_classifier_chain", worst_cls),
        ("mean_pool", worst_pool),
    ]


def _tiny_system(seed: int) -> System:
    cfg = ModelConfig(
        feature_dim=4,
        alphabet="abcd",
        encoder=EncoderConfig(layers=1, dim=8, heads=2, ffn_dim=12, dropout=0.0),
        sed=SedConfig(hidden_dim=8, proj_dim=4, dropout=0.0),
        lm=LmConfig(layers=2, dim=8, heads=2, ffn_dim=12, lora_rank=2, lora_alpha=4.0,
                    lora_dropout=0.0),
    )
    system = System(cfg, seed=seed, dtype=np.float64)
    rng = _rng(seed + 1)
    system.attach_lora(rng)
    # nonzero adapters so their gradients are informative
    for name in system.store.names():
        if name.endswith("lora_b"):
            system.store[name].data = rng.normal(0, 0.1, size=system.store[name].data.shape)
    return system


def lm_checks(n_instances: int = 20, seed: int = 13) -> list[tuple[str, float]]:
    worst_ce = 0.0
    worst_total = 0.0
    for inst in range(n_instances):
        system = _tiny_system(seed + 100 + inst)
        rng = _rng(seed + 200 + inst)
        frames = [rng.normal(size=(5, 4)), rng.normal(size=(6, 4))]
        fluent = ["ab", "ca"]
        fixed_hyp_ids = [system.tokenizer.encode("ab"), system.tokenizer.encode("c")]
        # rows share class 3 so the contrastive term has a positive pair
        labels = np.asarray([[1, 0, 0, 1, 0], [0, 1, 0, 1, 0]], dtype=np.float64)
        check_names = [
            "lm.block0.attn.q.w.lora_a", "lm.block0.attn.q.w.lora_b",
            "lm.block1.ffn.fc1.w.lora_a", "fusion.speech.fc2.w", "fusion.stutter.b",
        ]

        def ce_fn(point):
            store = system.store.astype(np.float64)
            for k, v in point.items():
                store[k].data = v
            ctx = NetContext(store, training=False)
            h_s = encode(ctx, system.cfg.encoder, Tensor(frames[0]))
            _, h2 = sed_classify(ctx, system.cfg.sed, mean_pool(h_s))
            seq = assemble(ctx, "train", speech_embed(ctx, h_s), stutter_embed(ctx, h2),
                           fixed_hyp_ids[0], system.prompt_ids[:5],
                           system.tokenizer.encode(fluent[0]))
            loss = lm_loss(ctx, system.cfg.lm, seq)
            loss.backward()
            return loss.item(), {k: ctx.tensors[k].grad for k in point}

        point = {n: system.store[n].data.copy() for n in check_names}
        worst_ce = max(worst_ce, grad_check(ce_fn, point))

        total_names = ["fusion.stutter.w", "ctc.out.b", "sed.out.w",
                       "lm.block0.attn.v.w.lora_a", "sed.proj2.b"]

        def total_fn(point):
            store = system.store.astype(np.float64)
            for k, v in point.items():
                store[k].data = v
            ctx = NetContext(store, training=False)
            l_llm_parts, l_ctc_parts, logit_rows, z_rows = [], [], [], []
            for b in range(2):
                h_s = encode(ctx, system.cfg.encoder, Tensor(frames[b]))
                ctc_logits = ctx.dense("ctc.out", h_s)
                l_ctc_parts.append(ctc_loss(ctc_logits, system.vocab.encode(fluent[b])))
                v = mean_pool(h_s)
                logits, h2 = sed_classify(ctx, system.cfg.sed, v)
                logit_rows.append(ag.reshape(logits, (1, -1)))
                z_rows.append(ag.reshape(sed_project(ctx, v), (1, -1)))
                seq = assemble(ctx, "train", speech_embed(ctx, h_s), stutter_embed(ctx, h2),
                               fixed_hyp_ids[b], system.prompt_ids[:5],
                               system.tokenizer.encode(fluent[b]))
                l_llm_parts.append(lm_loss(ctx, system.cfg.lm, seq))
            l_llm = ag.scale(ag.add(*l_llm_parts), 0.5)
            l_ctc = ag.scale(ag.add(*l_ctc_parts), 0.5)
            l_sed = sed_loss(ag.concat_rows(logit_rows), labels, ag.concat_rows(z_rows),
                             FocalParams(), 0.3, 0.1, check_norm=False)
            loss = ag.add(ag.add(l_llm, ag.scale(l_ctc, 0.3)), ag.scale(l_sed, 0.1))
            loss.backward()
            return loss.item(), {k: (ctx.tensors[k].grad if ctx.tensors[k].grad is not None
                                     else np.zeros_like(point[k])) for k in point}

        point = {n: system.store[n].data.copy() for n in total_names}
        worst_total = max(worst_total, grad_check(total_fn, point))

    return [("masked_lm_ce", worst_ce), ("total_loss_chain", worst_total)]


SUITES = {"ctc": ctc_checks, "sed": sed_checks, "lm": lm_checks}


def run_module(module: str, n_instances: int = 20, seed: int = 0) -> list[tuple[str, float]]:
    if module == "all":
        results = []
        for offset, name in enumerate(SUITES):
            results.extend(SUITES[name](n_instances, seed + 31 * offset))
        return results
    if module not in SUITES:
        raise ValueError(f"unknown gradcheck module {module!r}")
    return SUITES[module](n_instances, seed)
