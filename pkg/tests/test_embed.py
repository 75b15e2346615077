from __future__ import annotations

import numpy as np
import pytest
import torch

from conftest import random_icon, random_pixels
from signsynth.config import Config
from signsynth.core import (Annotation, BBox, Patch, Provenance, SignIcon, TaxonomyError, composite, rect_mask,
                            restore_outside_mask, to_tensor)
from signsynth.embed import (EmbedNet, IconScaleRule, StreamABatch, StreamBBatch, blend_tensor, embed_icon,
                             extract_context_patch, icon_canvas, icon_rect, make_stream_b, process_patch,
                             replace_signs_in_frame, stream_a_forward, stream_a_generator_losses, stream_b_forward,
                             stream_b_generator_losses, union_mask)
from signsynth.inpaint import MaskSpec, UntrainedWarning
from signsynth.losses import l1_loss

SMALL = {"inpaint.channels": 4, "inpaint.res_blocks": 1}


def small_net(approach="pasted", residual=False, **extra) -> EmbedNet:
    net = EmbedNet.build(approach, Config({**SMALL, **extra}), seed=0, residual=residual)
    net.steps = 1
    return net


def icon_hw(h, w, alpha=1.0, class_id=3):
    px = np.ones((h, w, 4), np.float32) * 0.5
    px[..., 3] = alpha
    return SignIcon(class_id, px)


# ---------------------------------------------------------------- icon placement


@pytest.mark.parametrize("h,w,rect", [(50, 100, BBox(32, 48, 64, 32)), (64, 64, BBox(32, 32, 64, 64))])
def test_embed_icon_rect_arithmetic(h, w, rect, rng):
    patch = Patch(random_pixels(rng))
    out, r = embed_icon(patch, icon_hw(h, w), IconScaleRule(delta_max=0), rng)
    assert r == rect
    outside = ~rect_mask(rect)
    assert np.array_equal(out.pixels[outside], patch.pixels[outside])


def test_scale_rule_range_and_determinism(rng):
    rule = IconScaleRule(16)
    sides = {rule.sample(rng) for _ in range(2000)}
    assert sides == set(range(48, 65))
    assert {IconScaleRule(0).sample(rng) for _ in range(50)} == {64}
    with pytest.raises(ValueError):
        IconScaleRule(64)


def test_pasted_and_cycled_share_topology():
    a, b = EmbedNet.build("pasted", Config(SMALL)), EmbedNet.build("cycled", Config(SMALL))
    for name in ("g1", "g2", "d1", "d2"):
        sa = {k: v.shape for k, v in a.modules()[name].state_dict().items()}
        sb = {k: v.shape for k, v in b.modules()[name].state_dict().items()}
        assert sa == sb
    with pytest.raises(ValueError):
        EmbedNet.build("stacked")


# ---------------------------------------------------------------- stream A


def _stream_a(rng, alpha=1.0):
    bg = to_tensor(random_pixels(rng))
    icon = icon_hw(40, 40, alpha)
    rgb, a = icon_canvas(icon, icon_rect(icon, 40))
    mask = torch.from_numpy(MaskSpec(30, 30).array()).float()[None, None]
    return StreamABatch(to_tensor(random_pixels(rng)), bg, mask, rgb, a)


def test_transparent_icon_bg_l1_covers_whole_patch(rng):
    net = small_net()
    b = _stream_a(rng, alpha=0.0)
    fw = stream_a_forward(net.g1, net.g2, b)
    bundle = stream_a_generator_losses(net, b, fw)
    assert bundle["g2_bg_l1"] == pytest.approx(float(l1_loss(fw["out2"], fw["x2"]).detach()), rel=1e-6)
    assert torch.equal(fw["x2"], fw["comp1"])


def test_identity_refiner_has_zero_background_loss(rng):
    zeros = {f"loss.{k}": 0.0 for k in ("adversarial", "l1", "perceptual", "style", "cut_l1")}
    net = small_net(residual=True, **zeros)
    b = _stream_a(rng)
    bundle = stream_a_generator_losses(net, b, stream_a_forward(net.g1, net.g2, b))
    assert float(bundle.total.detach()) == 0.0


# ---------------------------------------------------------------- stream B


def test_stream_b_oracle_generators_leave_only_compositing_residual(rng):
    bg = to_tensor(random_pixels(rng))
    icon = random_icon(rng, h=30, w=30, alpha="binary")
    rect = icon_rect(icon, 30)
    rgb, alpha = icon_canvas(icon, rect)
    real = blend_tensor(bg, rgb, alpha)  # sign rendered exactly as the icon
    net = small_net()
    g1 = lambda x: bg  # noqa: E731  (oracle inpainter)
    g2 = lambda x: x  # noqa: E731  (identity refiner)
    for side in (30, 20):  # mask covering the icon, then one smaller than it
        mask = torch.from_numpy(MaskSpec(side, side).array()).float()[None, None]
        restore = torch.from_numpy(union_mask(MaskSpec(side, side).array(), rect)).float()[None, None]
        b = StreamBBatch(real, mask, rgb, alpha, restore)
        fw = stream_b_forward(g1, g2, b)
        bundle = stream_b_generator_losses(net, b, fw)
        comp1 = bg * mask + real * (1 - mask)
        residual = float(l1_loss(blend_tensor(comp1, rgb, alpha), real))
        assert bundle["rec_l1"] == pytest.approx(residual, abs=1e-7)
        if side == 30:
            assert residual == pytest.approx(0.0, abs=1e-7)
        # cut_l1 compares G1 with the input only outside the cut
        outside = (1 - mask).expand_as(real).bool()
        assert bundle["cut_l1"] == pytest.approx(float((bg - real).abs()[outside].mean()), abs=1e-7)


def test_stream_b_missing_icon_is_taxonomy_error(rng):
    patch = Patch(random_pixels(rng), MaskSpec(20, 20).array())
    with pytest.raises(TaxonomyError):
        make_stream_b([patch], [None], IconScaleRule(), rng)


# ---------------------------------------------------------------- process_patch


@pytest.mark.parametrize("seed", range(5))
def test_process_patch_outside_union_bit_exact(seed):
    rng = np.random.default_rng(seed)
    net = small_net()
    patch = Patch(random_pixels(rng), MaskSpec(*(int(v) for v in rng.integers(8, 65, 2))).array())
    icon = random_icon(rng, class_id=204)  # a rare class never seen in training
    out, rect = process_patch(net, patch, icon, rng)
    keep = ~union_mask(patch.removal_mask, rect)
    assert np.array_equal(out.pixels[keep], patch.pixels[keep])


def test_process_patch_identity_nets_equal_composite(rng):
    net = small_net(residual=True, **{"embed.delta_max": 0})
    mask = MaskSpec(40, 24).array()
    patch = Patch(random_pixels(rng), mask)
    icon = random_icon(rng, h=20, w=36)
    out, rect = process_patch(net, patch, icon, rng)
    holed = patch.pixels.copy()
    holed[mask] = 0.0
    oracle = composite(icon, Patch(holed), rect)
    oracle = restore_outside_mask(patch, oracle, union_mask(mask, rect))
    assert np.allclose(out.pixels, oracle.pixels, atol=1e-6)


def test_process_patch_warns_untrained(rng):
    net = small_net()
    net.steps = 0
    with pytest.warns(UntrainedWarning):
        process_patch(net, Patch(random_pixels(rng), MaskSpec(8, 8).array()), random_icon(rng), rng)


# ---------------------------------------------------------------- frames


def _frame_with_signs(rng, n):
    frame = rng.random((120, 420, 3)).astype(np.float32)
    anns = [Annotation("f", BBox(20 + 65 * k, 40, 18, 22), k % 4) for k in range(n)]
    return frame, anns


def _icons(rng):
    return {c: random_icon(rng, class_id=c) for c in range(8)}


def test_replace_frame_without_signs_is_unchanged(rng):
    frame, _ = _frame_with_signs(rng, 0)
    out, anns, skips = replace_signs_in_frame(small_net(), frame, [], lambda r: None, rng)
    assert np.array_equal(out, frame) and anns == [] and skips == []


def test_replace_six_signs_and_determinism(rng):
    frame, anns = _frame_with_signs(rng, 6)
    icons = _icons(rng)
    source = lambda r: icons[int(r.integers(4, 8))]  # noqa: E731
    net = small_net()
    out1, new1, skips = replace_signs_in_frame(net, frame, anns, source, np.random.default_rng(7))
    out2, new2, _ = replace_signs_in_frame(net, frame, anns, source, np.random.default_rng(7))
    assert len(new1) == 6 and not skips
    assert all(a.provenance is Provenance.SYNTHETIC and 4 <= a.class_id < 8 for a in new1)
    assert np.array_equal(out1, out2) and new1 == new2
    # pixels far from every sign are untouched
    touched = np.zeros(frame.shape[:2], bool)
    for a in anns:
        touched[max(a.bbox.y - 12, 0):a.bbox.y2 + 12, max(a.bbox.x - 12, 0):a.bbox.x2 + 12] = True
    assert np.array_equal(out1[~touched], frame[~touched])


def test_replace_skips_sign_whose_window_leaves_frame(rng):
    frame, anns = _frame_with_signs(rng, 2)
    anns.append(Annotation("f", BBox(0, 0, 20, 20), 1))
    icons = _icons(rng)
    _, new, skips = replace_signs_in_frame(small_net(), frame, anns, lambda r: icons[5], rng)
    assert len(new) == 2 and len(skips) == 1 and skips[0].bbox == BBox(0, 0, 20, 20)


def test_context_patch_mask_covers_sign(rng):
    frame = rng.random((100, 100, 3)).astype(np.float32)
    p = extract_context_patch(frame, BBox(40, 40, 20, 10), "f", ratio=2.0, margin=2)
    assert p.origin.window == BBox(30, 25, 40, 40)
    ys, xs = np.nonzero(p.removal_mask)
    # 20 px sign over a 40 px window -> 64 px in patch space, plus margins (capped at 64)
    assert xs.max() - xs.min() + 1 == 64 and ys.max() - ys.min() + 1 == 36
    assert extract_context_patch(frame, BBox(0, 0, 20, 20), "f") is None
