"""Loss terms: hand values, brute-force oracles, gradients, composition."""

import numpy as np
import pytest

from styleforge.errors import ShapeError, StyleForgeError
from styleforge.flow import FlowField, OcclusionMask
from styleforge.losses import (
    LossWeights,
    PairForward,
    StyleTarget,
    content_loss,
    gram,
    style_loss,
    style_target,
    temporal_feature_loss,
    temporal_output_loss,
    total_stage1,
    total_stage2,
    tv_loss,
)
from styleforge.perceptual import extract, tiny_extractor
from styleforge.stylenet import ArchConfig, build, forward
from styleforge.tensor import Tensor

from conftest import assert_grad_close, finite_difference

LUMA = (0.2126, 0.7152, 0.0722)


def taps_of(arr_map):
    return {k: Tensor(v) for k, v in arr_map.items()}


def const_flow(h, w, u, v):
    return FlowField(np.broadcast_to(np.array([u, v], dtype=np.float32), (h, w, 2)).copy())


def full_mask(h, w):
    return OcclusionMask(np.ones((h, w), dtype=np.uint8))


class TestGram:
    def test_hand_case(self):
        feat = Tensor(np.stack([np.ones((2, 2)), 2 * np.ones((2, 2))])[None])
        g = gram(feat).data
        assert np.allclose(g, [[0.5, 1.0], [1.0, 2.0]])

    def test_symmetric_nonnegative_diagonal(self, rng):
        feat = Tensor(rng.standard_normal((1, 4, 5, 6)))
        g = gram(feat).data
        assert np.allclose(g, g.T)
        assert np.all(np.diag(g) >= 0)

    def test_zero_feature(self):
        assert not gram(Tensor(np.zeros((1, 3, 2, 2)))).data.any()

    def test_psd_by_min_eigenvalue(self, rng):
        g = gram(Tensor(rng.standard_normal((1, 6, 4, 4)))).data
        assert np.linalg.eigvalsh(g).min() >= -1e-6

    def test_batch_rejected(self, rng):
        with pytest.raises(ShapeError):
            gram(Tensor(rng.standard_normal((2, 3, 2, 2))))


class TestContentLoss:
    def test_identical_taps_zero(self, rng):
        f = rng.standard_normal((1, 4, 4, 4))
        assert content_loss(taps_of({"relu2_2": f}), taps_of({"relu2_2": f.copy()})).item() == 0

    def test_constant_offset(self, rng):
        f = rng.standard_normal((1, 4, 4, 4))
        loss = content_loss(taps_of({"relu2_2": f + 1.0}), taps_of({"relu2_2": f}))
        assert abs(loss.item() - 1.0) < 1e-6

    def test_matches_elementwise_oracle(self, rng):
        a = rng.standard_normal((1, 3, 5, 5))
        b = rng.standard_normal((1, 3, 5, 5))
        loss = content_loss(taps_of({"relu2_2": a}), taps_of({"relu2_2": b}))
        assert abs(loss.item() - np.mean((a - b) ** 2)) < 1e-6

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            content_loss(taps_of({"relu2_2": rng.standard_normal((1, 3, 4, 4))}),
                         taps_of({"relu2_2": rng.standard_normal((1, 3, 5, 5))}))


class TestStyleLoss:
    def test_own_taps_zero(self, rng):
        taps = {label: rng.standard_normal((1, 3, 4, 4))
                for label in ("relu1_2", "relu2_2", "relu3_3", "relu4_3")}
        target = StyleTarget({label: gram(Tensor(f)).data for label, f in taps.items()})
        assert style_loss(taps_of(taps), target).item() < 1e-12

    def test_single_tap_matches_matrix_oracle(self, rng):
        f = rng.standard_normal((1, 3, 4, 4))
        target_feat = rng.standard_normal((1, 3, 4, 4))
        target = StyleTarget({"relu1_2": gram(Tensor(target_feat)).data})
        got = style_loss(taps_of({"relu1_2": f}), target).item()
        wanted = np.sum((gram(Tensor(f)).data - gram(Tensor(target_feat)).data) ** 2)
        assert abs(got - wanted) < 1e-6

    def test_zeroed_gen_gives_target_norm(self, rng):
        target_feat = rng.standard_normal((1, 3, 4, 4))
        tg = gram(Tensor(target_feat)).data
        target = StyleTarget({"relu1_2": tg})
        got = style_loss(taps_of({"relu1_2": np.zeros((1, 3, 4, 4))}), target).item()
        assert abs(got - np.sum(tg ** 2)) < 1e-9

    def test_missing_tap_rejected(self, rng):
        target = StyleTarget({"relu1_2": np.eye(3), "relu4_3": np.eye(3)})
        with pytest.raises(KeyError):
            style_loss(taps_of({"relu1_2": rng.standard_normal((1, 3, 2, 2))}), target)

    def test_invariant_to_spatial_permutation(self, rng):
        f = rng.standard_normal((1, 3, 4, 4))
        perm = rng.permutation(16)
        shuffled = f.reshape(1, 3, 16)[:, :, perm].reshape(1, 3, 4, 4)
        target = StyleTarget({"relu1_2": gram(Tensor(rng.standard_normal((1, 3, 4, 4)))).data})
        a = style_loss(taps_of({"relu1_2": f}), target).item()
        b = style_loss(taps_of({"relu1_2": shuffled}), target).item()
        assert abs(a - b) < 1e-9


class TestTvLoss:
    def test_constant_zero(self):
        assert tv_loss(Tensor(np.full((1, 3, 4, 4), 0.7))).item() == 0

    def test_hand_case(self):
        img = Tensor(np.array([[[[0.0, 1.0], [0.0, 1.0]]]]))
        assert abs(tv_loss(img).item() - 0.5) < 1e-9

    def test_transpose_symmetry(self, rng):
        img = rng.standard_normal((1, 2, 5, 5))
        a = tv_loss(Tensor(img)).item()
        b = tv_loss(Tensor(img.transpose(0, 1, 3, 2))).item()
        assert abs(a - b) < 1e-9


class TestTemporalFeatureLoss:
    def test_warped_equal_zero(self, rng):
        from styleforge.flow import warp
        f_prev = Tensor(rng.standard_normal((1, 4, 8, 8)))
        flow = const_flow(8, 8, 1.0, 0.0)
        f_t = warp(f_prev, flow)
        loss = temporal_feature_loss(f_t, f_prev, flow, full_mask(8, 8))
        assert loss.item() < 1e-12

    def test_all_untraceable_zero(self, rng):
        f = Tensor(rng.standard_normal((1, 4, 8, 8)))
        g = Tensor(rng.standard_normal((1, 4, 8, 8)))
        mask = OcclusionMask(np.zeros((8, 8), dtype=np.uint8))
        assert temporal_feature_loss(f, g, const_flow(8, 8, 0, 0), mask).item() == 0

    def test_static_offset_gives_mean_square(self, rng):
        f_prev = rng.standard_normal((1, 4, 8, 8))
        delta = rng.standard_normal((1, 4, 8, 8))
        loss = temporal_feature_loss(Tensor(f_prev + delta), Tensor(f_prev),
                                     const_flow(8, 8, 0, 0), full_mask(8, 8))
        assert abs(loss.item() - np.mean(delta ** 2)) < 1e-9

    def test_resolution_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            temporal_feature_loss(Tensor(rng.standard_normal((1, 4, 8, 8))),
                                  Tensor(rng.standard_normal((1, 4, 8, 8))),
                                  const_flow(4, 4, 0, 0), full_mask(4, 4))

    def test_masked_oracle(self, rng):
        f_t = rng.standard_normal((1, 3, 4, 4))
        f_prev = rng.standard_normal((1, 3, 4, 4))
        mask = (rng.uniform(0, 1, (4, 4)) > 0.4).astype(np.uint8)
        loss = temporal_feature_loss(Tensor(f_t), Tensor(f_prev),
                                     const_flow(4, 4, 0, 0), OcclusionMask(mask))
        count = mask.sum() * 3
        want = ((f_t - f_prev) ** 2 * mask[None, None]).sum() / count
        assert abs(loss.item() - want) < 1e-9

    def test_gradient(self, rng):
        f_t = rng.uniform(-1, 1, (1, 2, 4, 4))
        f_prev = rng.uniform(-1, 1, (1, 2, 4, 4))
        flow = FlowField(rng.uniform(-1, 1, (4, 4, 2)).astype(np.float32))
        mask = full_mask(4, 4)

        def run():
            a = Tensor(f_t, requires_grad=True)
            b = Tensor(f_prev, requires_grad=True)
            return temporal_feature_loss(a, b, flow, mask), (a, b)

        loss, (a, b) = run()
        loss.backward()
        assert_grad_close(a.grad, finite_difference(lambda: run()[0].item(), f_t))
        assert_grad_close(b.grad, finite_difference(lambda: run()[0].item(), f_prev))


class TestTemporalOutputLoss:
    def test_static_identical_zero(self, rng):
        o = Tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
        i = Tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
        loss = temporal_output_loss(o, o, i, i, const_flow(4, 4, 0, 0), full_mask(4, 4))
        assert loss.item() < 1e-12

    def test_static_constant_offset(self, rng):
        o = rng.uniform(0, 1, (1, 3, 4, 4))
        i = Tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
        loss = temporal_output_loss(Tensor(o + 0.3), Tensor(o), i, i,
                                    const_flow(4, 4, 0, 0), full_mask(4, 4))
        assert abs(loss.item() - 0.09) < 1e-6

    def test_matches_pixel_oracle(self, rng):
        h = w = 4
        o_t = rng.uniform(0, 1, (1, 3, h, w))
        o_prev = rng.uniform(0, 1, (1, 3, h, w))
        i_t = rng.uniform(0, 1, (1, 3, h, w))
        i_prev = rng.uniform(0, 1, (1, 3, h, w))
        mask = (rng.uniform(0, 1, (h, w)) > 0.3).astype(np.uint8)
        flow = const_flow(h, w, 0, 0)
        got = temporal_output_loss(Tensor(o_t), Tensor(o_prev), Tensor(i_t), Tensor(i_prev),
                                   flow, OcclusionMask(mask)).item()
        lum_t = sum(LUMA[c] * i_t[0, c] for c in range(3))
        lum_p = sum(LUMA[c] * i_prev[0, c] for c in range(3))
        acc = 0.0
        for c in range(3):
            acc += (((o_t[0, c] - o_prev[0, c]) - (lum_t - lum_p)) ** 2 * mask).sum()
        want = acc / (mask.sum() * 3)
        assert abs(got - want) < 1e-6

    def test_gradient_wrt_outputs(self, rng):
        h = w = 4
        o_t = rng.uniform(0, 1, (1, 3, h, w))
        o_prev = rng.uniform(0, 1, (1, 3, h, w))
        i_t = Tensor(rng.uniform(0, 1, (1, 3, h, w)))
        i_prev = Tensor(rng.uniform(0, 1, (1, 3, h, w)))
        flow = FlowField(rng.uniform(-1, 1, (h, w, 2)).astype(np.float32))
        mask = full_mask(h, w)

        def run():
            a = Tensor(o_t, requires_grad=True)
            b = Tensor(o_prev, requires_grad=True)
            return temporal_output_loss(a, b, i_t, i_prev, flow, mask), (a, b)

        loss, (a, b) = run()
        loss.backward()
        assert_grad_close(a.grad, finite_difference(lambda: run()[0].item(), o_t))
        assert_grad_close(b.grad, finite_difference(lambda: run()[0].item(), o_prev))


class TestComposition:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        ext = tiny_extractor(2)
        gen = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
        content = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
        style = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
        target = style_target(ext, style)
        gen_taps = extract(ext, gen)
        content_taps = {k: v.detach() for k, v in extract(ext, content).items()}
        return ext, gen, gen_taps, content_taps, target

    def test_zero_weights_zero(self):
        _, gen, gen_taps, content_taps, target = self._setup()
        weights = LossWeights(0, 0, 0, 0, 0)
        assert total_stage1(gen, gen_taps, content_taps, target, weights).item() == 0

    def test_content_only(self):
        _, gen, gen_taps, content_taps, target = self._setup()
        weights = LossWeights(1.0, 0, 0, 0, 0)
        total = total_stage1(gen, gen_taps, content_taps, target, weights).item()
        assert abs(total - content_loss(gen_taps, content_taps).item()) < 1e-7

    def test_recomposition_oracle(self):
        _, gen, gen_taps, content_taps, target = self._setup(3)
        weights = LossWeights(0.7, 123.0, 0.02, 0, 0)
        total = total_stage1(gen, gen_taps, content_taps, target, weights).item()
        want = (0.7 * content_loss(gen_taps, content_taps).item()
                + 123.0 * style_loss(gen_taps, target).item()
                + 0.02 * tv_loss(gen).item())
        assert abs(total - want) < 1e-6 * max(1.0, abs(want))

    def test_negative_weight_rejected(self):
        with pytest.raises(StyleForgeError):
            LossWeights(gamma=-1.0)


def make_pair_forward(seed, weights_res=16):
    rng = np.random.default_rng(seed)
    ext = tiny_extractor(7)
    model = build(ArchConfig(0.125, 0.5), 1)
    h = w = weights_res
    frames = [Tensor(rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32)) for _ in range(2)]
    outs = [forward(model, f) for f in frames]
    flow = FlowField(rng.uniform(-1, 1, (h, w, 2)).astype(np.float32))
    mask = OcclusionMask((rng.uniform(0, 1, (h, w)) > 0.2).astype(np.uint8))
    from styleforge.flow import downsample_flow, downsample_mask
    style = Tensor(rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32))
    target = style_target(ext, style)
    pf = PairForward(
        inputs=(frames[0], frames[1]),
        outputs=(outs[0].output, outs[1].output),
        features=(outs[0].features, outs[1].features),
        gen_taps=(extract(ext, outs[0].output), extract(ext, outs[1].output)),
        content_taps=tuple({k: v.detach() for k, v in extract(ext, f).items()} for f in frames),
        flow=flow,
        mask=mask,
        flow_down=downsample_flow(flow),
        mask_down=downsample_mask(mask),
    )
    return pf, target


class TestStage2:
    def test_reduces_to_stage1_sum_when_lambdas_zero(self):
        pf, target = make_pair_forward(5)
        weights = LossWeights(1.0, 50.0, 0.01, 0.0, 0.0)
        total = total_stage2(pf, target, weights).item()
        per_frame = sum(
            total_stage1(pf.outputs[i], pf.gen_taps[i], pf.content_taps[i], target,
                         weights).item()
            for i in (0, 1))
        assert abs(total - per_frame) < 1e-5 * max(1.0, abs(per_frame))

    def test_recomposition_oracle(self):
        pf, target = make_pair_forward(6)
        weights = LossWeights(0.5, 20.0, 0.03, 0.4, 2.0)
        total = total_stage2(pf, target, weights).item()
        want = sum(
            total_stage1(pf.outputs[i], pf.gen_taps[i], pf.content_taps[i], target,
                         weights).item()
            for i in (0, 1))
        want += 0.4 * temporal_feature_loss(pf.features[1], pf.features[0],
                                            pf.flow_down, pf.mask_down).item()
        want += 2.0 * temporal_output_loss(pf.outputs[1], pf.outputs[0],
                                           pf.inputs[1], pf.inputs[0],
                                           pf.flow, pf.mask).item()
        assert abs(total - want) < 1e-6 * max(1.0, abs(want))

    def test_static_identical_pair_temporal_terms_zero(self, rng):
        ext = tiny_extractor(7)
        model = build(ArchConfig(0.125, 0.5), 1)
        h = w = 16
        frame = Tensor(rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32))
        out = forward(model, frame)
        tf = temporal_feature_loss(out.features, out.features,
                                   const_flow(h // 4, w // 4, 0, 0), full_mask(h // 4, w // 4))
        to = temporal_output_loss(out.output, out.output, frame, frame,
                                  const_flow(h, w, 0, 0), full_mask(h, w))
        assert tf.item() < 1e-12 and to.item() < 1e-12


class TestLossGradientsThroughNetwork:
    def test_stage1_gradient_wrt_model_output(self):
        """End-to-end: d(total_stage1)/d(gen image) matches finite differences.

        16x16 is the extractor's smallest legal input; finite differences are
        checked on a random coordinate subset to keep the runtime sane.
        """
        rng = np.random.default_rng(8)
        ext = tiny_extractor(2).astype(np.float64)
        gen = rng.uniform(0.2, 0.8, (1, 3, 16, 16))
        content = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
        style = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
        target = style_target(ext, style)
        content_taps = {k: v.detach() for k, v in extract(ext, content).items()}
        weights = LossWeights(1.0, 10.0, 0.1, 0, 0)

        def run():
            g = Tensor(gen, requires_grad=True)
            loss = total_stage1(g, extract(ext, g), content_taps, target, weights)
            return loss, g

        loss, leaf = run()
        loss.backward()
        flat = gen.reshape(-1)
        step = 1e-4  # deep composite: 1e-3 leaves visible truncation error
        picks = rng.choice(flat.size, size=60, replace=False)
        analytic = leaf.grad.reshape(-1)[picks]
        numeric = np.empty(len(picks))
        for n, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + step
            up = run()[0].item()
            flat[i] = orig - step
            down = run()[0].item()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * step)
        assert_grad_close(analytic, numeric)
