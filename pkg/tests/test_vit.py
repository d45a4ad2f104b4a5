import dataclasses

import numpy as np
import pytest

from reference import vit_reference_logits
from saint.prune import PruneConfig
from saint.tensor_core import Rng
from saint.vit import VitConfig, init_vit_weights, patch_embed, patchify, vit_forward

SMALL = VitConfig(layers=4, dim=32, heads=4, patch=4, image_size=16, num_classes=7)


def images(seed, cfg=SMALL, batch=2):
    return Rng(seed).normal((batch, cfg.in_chans, cfg.image_size, cfg.image_size))


def test_weight_shapes():
    cfg = dataclasses.replace(SMALL, distill_token=True)
    w = init_vit_weights(cfg, 0)
    assert w["patch_embed.weight"].shape == (3 * 16, 32)
    assert w["pos_embed"].shape == (1, 16 + 2, 32)
    assert w["blocks.3.attn.qkv.weight"].shape == (32, 96)
    assert w["blocks.0.mlp.fc1.weight"].shape == (32, 128)
    assert w["head.weight"].shape == (32, 7)
    assert all(v.dtype == np.float32 for v in w.values())


def test_patchify_channel_major_row_major():
    img = np.arange(2 * 4 * 4, dtype=np.float32).reshape(1, 2, 4, 4)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 8)
    # patch (0, 1): rows 0-1, cols 2-3, channel 0 then channel 1
    assert p[0, 1].tolist() == [2, 3, 6, 7, 18, 19, 22, 23]


def test_unpruned_forward_matches_float64_reference():
    w = init_vit_weights(SMALL, 3)
    img = images(4) * 5
    out = vit_forward(img, SMALL, w)
    ref = vit_reference_logits(patch_embed(img, w, SMALL), w, SMALL)
    np.testing.assert_allclose(out.logits, ref, rtol=1e-4, atol=1e-5)
    assert out.token_schedule == [17] * 4


def test_forward_is_deterministic_and_rejects_bad_images():
    w = init_vit_weights(SMALL, 0)
    a = vit_forward(images(1), SMALL, w).logits
    b = vit_forward(images(1), SMALL, w).logits
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        vit_forward(np.ones((1, 3, 12, 12), np.float32), SMALL, w)


@pytest.mark.parametrize("mode", ["saint", "constant_drop", "merge", "random_drop", "attention_drop"])
def test_pruned_forward_keeps_prefix_and_cuts_flops(mode):
    cfg = dataclasses.replace(
        SMALL,
        distill_token=True,
        prune_layers=frozenset({0, 1}),
        prune=PruneConfig(mode=mode, tau=-1.0, k_neighbors=1, constant_r=3),
    )
    w = init_vit_weights(cfg, 0)
    out = vit_forward(images(2), cfg, w, capture_attention=True)
    ref = vit_forward(images(2), dataclasses.replace(cfg, prune=PruneConfig(mode="off")), w)
    for t in out.traces:
        assert (t.positions[:, :2] == [0, 1]).all()
        assert t.token_count_out == t.token_count_in - t.prune_r
    assert out.traces[0].prune_r > 0
    assert out.token_schedule[-1] < 18
    assert out.flops.total < ref.flops.total
    assert out.logits.shape == (2, 7)


def test_saint_score_order_equals_positional_order():
    base = dataclasses.replace(
        SMALL, prune=PruneConfig(mode="saint", tau=0.0, k_neighbors=1), prune_layers=frozenset({1})
    )
    w = init_vit_weights(base, 5)
    a = vit_forward(images(6), base, w)
    b = vit_forward(images(6), dataclasses.replace(base, order_policy="positional_order"), w)
    assert a.traces[1].prune_r > 0
    np.testing.assert_allclose(a.logits, b.logits, rtol=1e-5, atol=1e-7)


def test_layer_override_and_dynamics():
    cfg = dataclasses.replace(
        SMALL, layer_overrides=((2, PruneConfig(mode="constant_drop", constant_r=2)),)
    )
    w = init_vit_weights(cfg, 0)
    out = vit_forward(images(0), cfg, w, capture_attention=True)
    assert [t.prune_r for t in out.traces] == [0, 0, 2, 0]
    rec = out.traces[1].dynamics(0)
    assert rec.token_count == 17 and 0 < rec.key_similarity <= 1


def test_stop_after_returns_tokens_only():
    w = init_vit_weights(SMALL, 0)
    out = vit_forward(images(0), SMALL, w, stop_after=1)
    assert len(out.traces) == 2 and out.logits.shape == (2, 0)
    assert out.tokens.shape == (2, 17, 32)


def test_embedding_input_skips_patch_flops():
    w = init_vit_weights(SMALL, 0)
    emb = patch_embed(images(0), w, SMALL)
    a = vit_forward(images(0), SMALL, w)
    b = vit_forward(emb, SMALL, w)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert b.flops.embed == 0 and a.flops.embed > 0
