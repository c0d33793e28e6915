"""Moment detector: attention oracles, saliency head, anchor refinement, masking."""

import math

import numpy as np
import pytest

from qdmr import tensor as T
from qdmr.model import (
    EncoderOutput,
    ModelConfig,
    Moment,
    MomentDetector,
    sinusoidal_embedding,
    width_modulated_logits,
)
from qdmr.tensor import Tensor


@pytest.fixture(autouse=True)
def _float64():
    T.set_default_dtype("float64")
    yield


def tiny_config(**kw) -> ModelConfig:
    base = dict(video_in_dim=5, text_in_dim=4, d_model=8, n_heads=1,
                n_cross_layers=1, n_self_layers=1, n_decoder_layers=1,
                n_moment_queries=2, ffn_dim=16)
    base.update(kw)
    return ModelConfig(**base)


def _np_layer_norm(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


class TestMoment:
    def test_interval_roundtrip(self):
        m = Moment.from_interval(0.2, 0.6)
        assert m.center == pytest.approx(0.4) and m.width == pytest.approx(0.4)
        assert m.interval() == pytest.approx((0.2, 0.6))

    def test_clamping_only_at_export(self):
        m = Moment(center=0.05, width=0.4)
        s, e = m.interval()
        assert s < 0.0
        cs, ce = m.interval_clamped()
        assert cs == 0.0 and ce == pytest.approx(0.25)

    def test_validation(self):
        with pytest.raises(ValueError):
            Moment(center=1.2, width=0.1)
        with pytest.raises(ValueError):
            Moment(center=0.5, width=0.0)


class TestConfigValidation:
    def test_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            tiny_config(d_model=6, n_heads=4).validate()

    def test_counts_positive(self):
        with pytest.raises(ValueError, match="n_decoder_layers"):
            tiny_config(n_decoder_layers=0).validate()


class TestCrossAttention:
    def test_single_text_token_weights_are_one(self):
        """With one key the softmax is 1, so every clip gets that token's value."""
        model = MomentDetector(tiny_config(), seed=1)
        rng = np.random.default_rng(0)
        q = Tensor(rng.normal(size=(3, 8)))
        kv = Tensor(rng.normal(size=(1, 8)))
        out = model.attention("enc.cross0.attn", q, kv, None).data

        p = {k: v.data for k, v in model.params.items()}
        v = kv.data @ p["enc.cross0.attn.wv"] + p["enc.cross0.attn.bv"]
        want = v @ p["enc.cross0.attn.wo"] + p["enc.cross0.attn.bo"]
        np.testing.assert_allclose(out, np.repeat(want, 3, axis=0), atol=1e-12)

    def test_identical_clip_rows_give_identical_outputs(self):
        model = MomentDetector(tiny_config(), seed=2)
        rng = np.random.default_rng(1)
        row = rng.normal(size=8)
        q = Tensor(np.stack([row, row]))
        kv = Tensor(rng.normal(size=(3, 8)))
        out = model.attention("enc.cross0.attn", q, kv, None).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_hand_sized_attention_weights(self):
        """L=2, N=2, d=2, identity projections, one head: scalar softmax oracle."""
        cfg = tiny_config(video_in_dim=2, text_in_dim=2, d_model=2, n_heads=1)
        model = MomentDetector(cfg, seed=3)
        eye = np.eye(2)
        for name in ("wq", "wk", "wv", "wo"):
            model.params[f"enc.cross0.attn.{name}"] = Tensor(eye, requires_grad=True)
        for name in ("bq", "bk", "bv", "bo"):
            model.params[f"enc.cross0.attn.{name}"] = Tensor(np.zeros(2), requires_grad=True)

        video = np.array([[1.0, 0.0], [0.0, 2.0]])
        text = np.array([[1.0, 1.0], [2.0, 0.0]])
        out = model.attention("enc.cross0.attn", Tensor(video), Tensor(text), None).data

        want = np.zeros((2, 2))
        for i in range(2):
            logits = [sum(video[i, k] * text[j, k] for k in range(2)) / math.sqrt(2.0)
                      for j in range(2)]
            mx = max(logits)
            weights = [math.exp(z - mx) for z in logits]
            ssum = sum(weights)
            weights = [w / ssum for w in weights]
            for j in range(2):
                for k in range(2):
                    want[i, k] += weights[j] * text[j, k]
        np.testing.assert_allclose(out, want, atol=1e-6)


class TestEncoder:
    def test_default_output_shapes(self):
        cfg = ModelConfig(video_in_dim=10, text_in_dim=6)
        model = MomentDetector(cfg, seed=0)
        rng = np.random.default_rng(0)
        enc = model.encode(rng.normal(size=(3, 10)), rng.normal(size=(2, 6)))
        assert enc.video_tokens.shape == (3, 256)
        assert enc.saliency_token.shape == (256,)

    def test_zero_weight_collapse(self):
        """With attention and FFN weights zeroed, only projection + norms remain."""
        cfg = tiny_config(n_cross_layers=2, n_self_layers=2)
        model = MomentDetector(cfg, seed=4)
        for name, p in model.params.items():
            if ".attn." in name or ".ffn." in name:
                model.params[name] = Tensor(np.zeros_like(p.data), requires_grad=True)

        rng = np.random.default_rng(2)
        video = rng.normal(size=(4, 5))
        text = rng.normal(size=(2, 4))
        enc = model.encode(video, text)

        p = {k: v.data for k, v in model.params.items()}
        x = video @ p["input.video.w"] + p["input.video.b"]
        for _ in range(2):  # cross blocks collapse to two layer norms each
            x = _np_layer_norm(_np_layer_norm(x))
        x = x + sinusoidal_embedding(np.arange(4) / 4, 8)
        for _ in range(2):
            x = _np_layer_norm(_np_layer_norm(x))
        np.testing.assert_allclose(enc.video_tokens.data, x, atol=1e-10)

    def test_text_perturbation_changes_video_tokens(self):
        model = MomentDetector(tiny_config(), seed=5)
        rng = np.random.default_rng(3)
        video = rng.normal(size=(4, 5))
        text = rng.normal(size=(3, 4))
        base = model.encode(video, text).video_tokens.data
        bumped = model.encode(video, text + 0.5).video_tokens.data
        assert np.abs(base - bumped).max() > 1e-6

    def test_forward_is_deterministic(self):
        model = MomentDetector(tiny_config(), seed=6)
        rng = np.random.default_rng(4)
        video = rng.normal(size=(4, 5))
        text = rng.normal(size=(3, 4))
        a = model.forward(video, text)
        b = model.forward(video, text)
        np.testing.assert_array_equal(a.saliency.data, b.saliency.data)
        np.testing.assert_array_equal(a.layers[-1].moments.data, b.layers[-1].moments.data)

    def test_same_seed_same_init(self):
        a = MomentDetector(tiny_config(), seed=9)
        b = MomentDetector(tiny_config(), seed=9)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


class TestSaliencyHead:
    def _enc(self, d, token, rows):
        return EncoderOutput(video_tokens=Tensor(np.asarray(rows, dtype=float)),
                             saliency_token=Tensor(np.asarray(token, dtype=float)),
                             clip_mask=np.ones(len(rows), dtype=bool))

    def test_scalar_oracle(self):
        """ws.xs = 2 and wv.xv = 3 with d = 4 gives 2*3/sqrt(4) = 3.0 exactly."""
        cfg = tiny_config(d_model=4, video_in_dim=4, text_in_dim=4)
        model = MomentDetector(cfg, seed=0)
        model.params["saliency.ws"] = Tensor([2.0, 0.0, 0.0, 0.0], requires_grad=True)
        model.params["saliency.wv"] = Tensor([0.0, 3.0, 0.0, 0.0], requires_grad=True)
        enc = self._enc(4, [1.0, 0.0, 0.0, 0.0], [[0.0, 1.0, 0.0, 0.0]])
        scores = model.saliency_scores(enc).data
        assert scores[0] == 3.0

    def test_zero_token_weight_zeroes_scores(self):
        cfg = tiny_config(d_model=4, video_in_dim=4, text_in_dim=4)
        model = MomentDetector(cfg, seed=1)
        model.params["saliency.ws"] = Tensor(np.zeros(4), requires_grad=True)
        enc = self._enc(4, [1.0, 2.0, 3.0, 4.0], np.random.default_rng(0).normal(size=(5, 4)))
        np.testing.assert_array_equal(model.saliency_scores(enc).data, np.zeros(5))

    def test_bilinear_scaling(self):
        cfg = tiny_config(d_model=4, video_in_dim=4, text_in_dim=4)
        model = MomentDetector(cfg, seed=2)
        enc = self._enc(4, [1.0, -1.0, 0.5, 2.0], np.random.default_rng(1).normal(size=(3, 4)))
        base = model.saliency_scores(enc).data
        model.params["saliency.ws"] = Tensor(model.params["saliency.ws"].data * 2.0,
                                             requires_grad=True)
        np.testing.assert_allclose(model.saliency_scores(enc).data, 2.0 * base, atol=1e-12)

    def test_plain_head_when_token_disabled(self):
        model = MomentDetector(tiny_config(), use_saliency_token=False, seed=3)
        rng = np.random.default_rng(5)
        out = model.forward(rng.normal(size=(4, 5)), rng.normal(size=(2, 4)))
        assert out.encoder.saliency_token is None
        assert out.saliency.shape == (4,)
        assert "saliency.token" not in model.params
        assert "saliency.bias" in model.params


class TestAnchorDecoder:
    def test_zero_delta_keeps_anchors(self):
        model = MomentDetector(tiny_config(n_decoder_layers=2), seed=7)
        for name in ("dec.refine.fc2.w", "dec.refine.fc2.b"):
            model.params[name] = Tensor(np.zeros_like(model.params[name].data),
                                        requires_grad=True)
        rng = np.random.default_rng(6)
        enc = model.encode(rng.normal(size=(4, 5)), rng.normal(size=(2, 4)))
        dec = model.decode(enc)
        init = model.params["dec.anchors"].data
        for layer_anchors in dec.anchors:
            np.testing.assert_allclose(layer_anchors.data, init, atol=1e-12)

    def test_anchor_init_grid(self):
        model = MomentDetector(tiny_config(n_moment_queries=4), seed=0)
        np.testing.assert_allclose(model.params["dec.anchors"].data[:, 0],
                                   [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(model.params["dec.anchors"].data[:, 1], 0.1)

    def test_anchors_stay_in_unit_interval(self):
        model = MomentDetector(tiny_config(n_decoder_layers=3), seed=8)
        # blow up the refinement output to push updates hard
        model.params["dec.refine.fc2.w"] = Tensor(
            model.params["dec.refine.fc2.w"].data * 500.0, requires_grad=True)
        rng = np.random.default_rng(7)
        enc = model.encode(rng.normal(size=(5, 5)), rng.normal(size=(3, 4)))
        dec = model.decode(enc)
        for layer_anchors in dec.anchors:
            assert (layer_anchors.data >= 0.0).all()
            assert (layer_anchors.data <= 1.0).all()

    def test_width_modulated_logits_scalar_oracle(self):
        """One query, two clips: PE similarity divided by width, by hand."""
        d, temp, ref_w = 8, 10000.0, 0.1
        clip_pos = np.array([0.0, 0.5])
        clip_pe = sinusoidal_embedding(clip_pos, d, temp)
        centers = Tensor([0.3])
        widths = Tensor([0.25])
        got, _ = width_modulated_logits(centers, widths, clip_pe, ref_w, temp)

        for j, p in enumerate(clip_pos):
            sim = 0.0
            for k in range(d // 2):
                freq = 1.0 / temp ** (2.0 * k / d)
                a = 2.0 * math.pi * 0.3 * freq
                b = 2.0 * math.pi * p * freq
                sim += math.sin(a) * math.sin(b) + math.cos(a) * math.cos(b)
            want = sim / math.sqrt(d) * (ref_w / 0.25)
            assert got.data[0, j] == pytest.approx(want, abs=1e-6)

    def test_wider_anchor_attends_more_diffusely(self):
        d, temp = 16, 10000.0
        clip_pe = sinusoidal_embedding(np.linspace(0, 1, 12, endpoint=False), d, temp)
        narrow, _ = width_modulated_logits(Tensor([0.5]), Tensor([0.05]), clip_pe, 0.1, temp)
        wide, _ = width_modulated_logits(Tensor([0.5]), Tensor([0.8]), clip_pe, 0.1, temp)
        spread = lambda z: np.ptp(z)  # noqa: E731 peak-to-floor range of the logits
        assert spread(narrow.data[0]) > spread(wide.data[0])


class TestPredictions:
    def test_output_count_and_probs(self):
        cfg = tiny_config(n_decoder_layers=3, n_moment_queries=4)
        model = MomentDetector(cfg, seed=9)
        rng = np.random.default_rng(8)
        out = model.forward(rng.normal(size=(5, 5)), rng.normal(size=(2, 4)))
        assert len(out.layers) == 3
        total = sum(layer.moments.shape[0] for layer in out.layers)
        assert total == 3 * 4
        for layer in out.layers:
            z = layer.class_logits.data
            probs = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
            np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)

    def test_zero_class_head_gives_half_probs(self):
        model = MomentDetector(tiny_config(), seed=10)
        model.params["head.class.w"] = Tensor(np.zeros((8, 2)), requires_grad=True)
        model.params["head.class.b"] = Tensor(np.zeros(2), requires_grad=True)
        rng = np.random.default_rng(9)
        out = model.forward(rng.normal(size=(4, 5)), rng.normal(size=(2, 4)))
        np.testing.assert_allclose(out.layers[-1].fg_probs(), 0.5, atol=1e-12)

    def test_moment_objects_are_valid(self):
        model = MomentDetector(tiny_config(), seed=11)
        rng = np.random.default_rng(10)
        out = model.forward(rng.normal(size=(6, 5)), rng.normal(size=(3, 4)))
        for m in out.layers[-1].moment_objects():
            assert 0.0 <= m.center <= 1.0 and 0.0 < m.width <= 1.0


class TestMaskInvariance:
    def test_clip_padding_changes_nothing(self):
        model = MomentDetector(tiny_config(n_heads=2), seed=12)
        rng = np.random.default_rng(11)
        video = rng.normal(size=(5, 5))
        text = rng.normal(size=(3, 4))
        base = model.forward(video, text)

        padded_video = np.concatenate([video, np.full((3, 5), 7.7)], axis=0)
        mask = np.array([True] * 5 + [False] * 3)
        padded = model.forward(padded_video, text, clip_mask=mask)

        np.testing.assert_allclose(padded.saliency.data[:5], base.saliency.data, atol=1e-9)
        np.testing.assert_allclose(padded.layers[-1].moments.data,
                                   base.layers[-1].moments.data, atol=1e-9)
        np.testing.assert_allclose(padded.layers[-1].class_logits.data,
                                   base.layers[-1].class_logits.data, atol=1e-9)

    def test_text_padding_changes_nothing(self):
        model = MomentDetector(tiny_config(), seed=13)
        rng = np.random.default_rng(12)
        video = rng.normal(size=(4, 5))
        text = rng.normal(size=(2, 4))
        base = model.forward(video, text)

        padded_text = np.concatenate([text, np.full((4, 4), -3.3)], axis=0)
        mask = np.array([True, True, False, False, False, False])
        padded = model.forward(video, padded_text, text_mask=mask)
        np.testing.assert_allclose(padded.saliency.data, base.saliency.data, atol=1e-9)
        np.testing.assert_allclose(padded.layers[-1].moments.data,
                                   base.layers[-1].moments.data, atol=1e-9)

    def test_padding_invariance_in_cat_mode(self):
        model = MomentDetector(tiny_config(), use_cate=False, seed=14)
        rng = np.random.default_rng(13)
        video = rng.normal(size=(4, 5))
        text = rng.normal(size=(2, 4))
        base = model.forward(video, text)
        padded = model.forward(np.concatenate([video, np.ones((2, 5))]), text,
                               clip_mask=np.array([True] * 4 + [False] * 2))
        np.testing.assert_allclose(padded.saliency.data[:4], base.saliency.data, atol=1e-9)


class TestStructuralVariants:
    def test_cate_flag_swaps_block_families(self):
        with_cate = MomentDetector(tiny_config(), use_cate=True, seed=0)
        without = MomentDetector(tiny_config(), use_cate=False, seed=0)
        assert any(k.startswith("enc.cross0") for k in with_cate.params)
        assert not any(k.startswith("enc.cat") for k in with_cate.params)
        assert any(k.startswith("enc.cat0") for k in without.params)
        assert not any(k.startswith("enc.cross") for k in without.params)

    def test_dam_flag_swaps_decoder_machinery(self):
        with_dam = MomentDetector(tiny_config(), use_dam=True, seed=0)
        without = MomentDetector(tiny_config(), use_dam=False, seed=0)
        assert "dec.anchors" in with_dam.params and "dec.refine.fc1.w" in with_dam.params
        assert "dec.query_pos" not in with_dam.params
        assert "dec.anchors" not in without.params
        assert "dec.query_pos" in without.params and "head.moment.fc1.w" in without.params

    def test_plain_decoder_forward_works(self):
        model = MomentDetector(tiny_config(), use_dam=False, seed=1)
        rng = np.random.default_rng(14)
        out = model.forward(rng.normal(size=(5, 5)), rng.normal(size=(2, 4)))
        for m in out.layers[-1].moment_objects():
            assert 0.0 <= m.center <= 1.0 and 0.0 < m.width <= 1.0
