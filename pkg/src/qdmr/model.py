"""Query-dependent moment detector.

The encoder injects text into the video stream through cross-attention
blocks (video as query, text as key/value), prepends a learnable saliency
token, and runs self-attention over the token-plus-clips sequence.  A
decoder refines dynamic (center, width) anchors layer by layer, with a
width-modulated positional term added to the cross-attention logits.

Three structural switches mirror the ablation axes: ``use_cate`` swaps the
cross-attention blocks for self-attention over concatenated video and text
tokens, ``use_saliency_token`` falls back to a plain linear saliency head,
and ``use_dam`` falls back to learned query embeddings with a direct
sigmoid moment head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class Moment:
    """A temporal segment on the normalized [0, 1] video axis."""

    center: float
    width: float

    def __post_init__(self):
        if not 0.0 <= self.center <= 1.0:
            raise ValueError(f"moment center must lie in [0, 1], got {self.center}")
        if not 0.0 < self.width <= 1.0:
            raise ValueError(f"moment width must lie in (0, 1], got {self.width}")

    def interval(self) -> tuple[float, float]:
        """(start, end), which may poke past [0, 1] for wide off-center moments."""
        half = 0.5 * self.width
        return self.center - half, self.center + half

    def interval_clamped(self) -> tuple[float, float]:
        s, e = self.interval()
        return max(0.0, s), min(1.0, e)

    @staticmethod
    def from_interval(start: float, end: float) -> "Moment":
        return Moment(center=0.5 * (start + end), width=end - start)


@dataclass
class ModelConfig:
    video_in_dim: int
    text_in_dim: int
    d_model: int = 256
    n_heads: int = 8
    n_cross_layers: int = 2
    n_self_layers: int = 2
    n_decoder_layers: int = 2
    n_moment_queries: int = 10
    ffn_dim: int = 1024
    dropout: float = 0.0
    pe_temperature: float = 10000.0
    ln_eps: float = 1e-5
    anchor_width_init: float = 0.1
    reference_width: float = 0.1

    def validate(self) -> None:
        if self.video_in_dim < 1 or self.text_in_dim < 1:
            raise ValueError("feature dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even for sinusoidal embeddings, got {self.d_model}")
        for name in ("n_cross_layers", "n_self_layers", "n_decoder_layers",
                     "n_moment_queries", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class EncoderOutput:
    video_tokens: Tensor                 # [L, d]
    saliency_token: Tensor | None        # [d] when the token head is enabled
    clip_mask: np.ndarray                # [L] bool, True for real clips


@dataclass
class DecoderOutput:
    anchors: list[Tensor]        # per layer, [n_queries, 2] (center, width) in (0, 1)
    embeddings: list[Tensor]     # per layer, [n_queries, d]


@dataclass
class LayerPrediction:
    moments: Tensor              # [n_queries, 2] (center, width)
    class_logits: Tensor         # [n_queries, 2] (foreground, background)

    def fg_probs(self) -> np.ndarray:
        z = self.class_logits.data
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e[:, 0] / e.sum(axis=-1)

    def moment_objects(self) -> list[Moment]:
        # sigmoid can saturate to exactly 0 in floating point; keep widths legal
        return [Moment(center=float(c), width=max(float(w), 1e-6))
                for c, w in self.moments.data]


@dataclass
class ModelOutput:
    encoder: EncoderOutput
    saliency: Tensor                         # [L] per-clip scores (padded rows included)
    layers: list[LayerPrediction] | None     # None when decoding is skipped


def sinusoidal_embedding(positions: np.ndarray, d: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed [sin | cos] embedding of normalized positions in [0, 1].

    Positions are scaled by 2*pi so the base frequency spans one period over
    the whole video regardless of clip count.
    """
    pos = np.asarray(positions, dtype=np.float64) * (2.0 * math.pi)
    freqs = 1.0 / temperature ** (2.0 * np.arange(d // 2) / d)
    ang = pos[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _sinusoidal_embedding_t(positions: Tensor, d: int, temperature: float) -> Tensor:
    """Differentiable twin of ``sinusoidal_embedding`` for anchor centers."""
    pos = T.mul(T.reshape(positions, (-1, 1)), 2.0 * math.pi)
    freqs = 1.0 / temperature ** (2.0 * np.arange(d // 2) / d)
    ang = T.mul(pos, freqs[None, :])
    return T.concat([T.sin(ang), T.cos(ang)], axis=1)


def width_modulated_logits(centers: Tensor, widths: Tensor, clip_pe: np.ndarray,
                           reference_width: float, temperature: float) -> tuple[Tensor, Tensor]:
    """Positional cross-attention logits between anchors and clip positions.

    The embedding similarity is scaled by reference_width / anchor_width, so
    wide anchors attend more diffusely.  Returns (logits [n_queries, L],
    center embeddings [n_queries, d]).
    """
    d = clip_pe.shape[1]
    center_pe = _sinusoidal_embedding_t(centers, d, temperature)
    sim = T.mul(T.matmul(center_pe, Tensor(clip_pe.T)), 1.0 / math.sqrt(d))
    # widths can saturate to exactly 0 in float; same guard as inverse_sigmoid
    mod = T.reshape(T.div(reference_width, T.clip(widths, 1e-4, 1.0)), (-1, 1))
    return T.mul(sim, mod), center_pe


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, ...]) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class MomentDetector:
    """Encoder/decoder over precomputed clip and word features.

    Parameters live in ``params`` keyed by dotted names, all float tensors
    with ``requires_grad=True``.  Initialization is deterministic per seed.
    """

    def __init__(self, cfg: ModelConfig, *, use_cate: bool = True,
                 use_saliency_token: bool = True, use_dam: bool = True,
                 seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.use_cate = use_cate
        self.use_saliency_token = use_saliency_token
        self.use_dam = use_dam
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d = cfg.d_model

        self._add_linear(rng, "input.video", cfg.video_in_dim, d)
        self._add_linear(rng, "input.text", cfg.text_in_dim, d)

        fuse = "enc.cross" if use_cate else "enc.cat"
        for i in range(cfg.n_cross_layers):
            self._add_block(rng, f"{fuse}{i}")
        for i in range(cfg.n_self_layers):
            self._add_block(rng, f"enc.self{i}")

        if use_saliency_token:
            self._add(rng.normal(0.0, 0.02, size=d), "saliency.token")
            self._add(_xavier(rng, d, 1, (d,)), "saliency.ws")
            self._add(_xavier(rng, d, 1, (d,)), "saliency.wv")
        else:
            self._add(_xavier(rng, d, 1, (d,)), "saliency.wv")
            self._add(np.zeros(1), "saliency.bias")

        self._add(rng.normal(0.0, 0.02, size=(cfg.n_moment_queries, d)), "dec.content")
        if use_dam:
            centers = (np.arange(cfg.n_moment_queries) + 0.5) / cfg.n_moment_queries
            anchors = np.stack([centers, np.full(cfg.n_moment_queries,
                                                 cfg.anchor_width_init)], axis=1)
            self._add(anchors, "dec.anchors")
        else:
            self._add(rng.normal(0.0, 0.02, size=(cfg.n_moment_queries, d)), "dec.query_pos")
            self._add_mlp(rng, "head.moment", d, d, 2)
        for i in range(cfg.n_decoder_layers):
            self._add_attn(rng, f"dec.layer{i}.self")
            self._add_ln(f"dec.layer{i}.ln1")
            self._add_attn(rng, f"dec.layer{i}.cross")
            self._add_ln(f"dec.layer{i}.ln2")
            self._add_ffn(rng, f"dec.layer{i}.ffn")
            self._add_ln(f"dec.layer{i}.ln3")
        if use_dam:
            self._add_mlp(rng, "dec.refine", d, d, 2)
        self._add_linear(rng, "head.class", d, 2)

    # -- parameter bookkeeping -------------------------------------------------

    def _add(self, arr: np.ndarray, name: str) -> None:
        self.params[name] = Tensor(arr, requires_grad=True)

    def _add_linear(self, rng, prefix: str, fan_in: int, fan_out: int) -> None:
        self._add(_xavier(rng, fan_in, fan_out, (fan_in, fan_out)), f"{prefix}.w")
        self._add(np.zeros(fan_out), f"{prefix}.b")

    def _add_mlp(self, rng, prefix: str, d_in: int, d_hidden: int, d_out: int) -> None:
        self._add_linear(rng, f"{prefix}.fc1", d_in, d_hidden)
        self._add_linear(rng, f"{prefix}.fc2", d_hidden, d_out)

    def _add_attn(self, rng, prefix: str) -> None:
        d = self.cfg.d_model
        for name in ("wq", "wk", "wv", "wo"):
            self._add(_xavier(rng, d, d, (d, d)), f"{prefix}.{name}")
        for name in ("bq", "bk", "bv", "bo"):
            self._add(np.zeros(d), f"{prefix}.{name}")

    def _add_ln(self, prefix: str) -> None:
        d = self.cfg.d_model
        self._add(np.ones(d), f"{prefix}.g")
        self._add(np.zeros(d), f"{prefix}.b")

    def _add_ffn(self, rng, prefix: str) -> None:
        self._add_linear(rng, f"{prefix}.fc1", self.cfg.d_model, self.cfg.ffn_dim)
        self._add_linear(rng, f"{prefix}.fc2", self.cfg.ffn_dim, self.cfg.d_model)

    def _add_block(self, rng, prefix: str) -> None:
        self._add_attn(rng, f"{prefix}.attn")
        self._add_ln(f"{prefix}.ln1")
        self._add_ffn(rng, f"{prefix}.ffn")
        self._add_ln(f"{prefix}.ln2")

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- building blocks ---------------------------------------------------------

    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        return T.add(T.matmul(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        return self._linear(f"{prefix}.fc2", T.relu(self._linear(f"{prefix}.fc1", x)))

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], eps=self.cfg.ln_eps)

    def attention(self, prefix: str, q_in: Tensor, kv_in: Tensor,
                  kv_mask: np.ndarray | None, extra_logits: Tensor | None = None) -> Tensor:
        """Multi-head attention; ``extra_logits`` is added to every head's scores."""
        p = self.params
        h = self.cfg.n_heads
        dh = self.cfg.d_model // h
        scale = 1.0 / math.sqrt(dh)
        q = T.add(T.matmul(q_in, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
        k = T.add(T.matmul(kv_in, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
        v = T.add(T.matmul(kv_in, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
        heads = []
        for i in range(h):
            cols = slice(i * dh, (i + 1) * dh)
            logits = T.mul(T.matmul(q[:, cols], T.transpose(k[:, cols])), scale)
            if extra_logits is not None:
                logits = T.add(logits, extra_logits)
            attn = T.softmax_lastdim(logits, kv_mask)
            heads.append(T.matmul(attn, v[:, cols]))
        merged = heads[0] if h == 1 else T.concat(heads, axis=1)
        return T.add(T.matmul(merged, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])

    def _block(self, prefix: str, x: Tensor, kv: Tensor, kv_mask: np.ndarray | None,
               rng: np.random.Generator | None) -> Tensor:
        a = self._drop(self.attention(f"{prefix}.attn", x, kv, kv_mask), rng)
        x = self._ln(f"{prefix}.ln1", T.add(x, a))
        f = self._drop(self._mlp(f"{prefix}.ffn", x), rng)
        return self._ln(f"{prefix}.ln2", T.add(x, f))

    def _drop(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        if self.cfg.dropout > 0.0 and rng is not None:
            return T.dropout(x, self.cfg.dropout, rng)
        return x

    def _clip_positions(self, n_clips: int, n_real: int) -> np.ndarray:
        # Normalize by the real clip count so padding never shifts positions.
        return np.arange(n_clips) / max(n_real, 1)

    # -- forward -----------------------------------------------------------------

    def encode(self, video: np.ndarray, text: np.ndarray,
               clip_mask: np.ndarray | None = None, text_mask: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> EncoderOutput:
        """Fuse text into the clip stream and return contextualized clip tokens."""
        video = np.asarray(video)
        text = np.asarray(text)
        n_clips = video.shape[0]
        if clip_mask is None:
            clip_mask = np.ones(n_clips, dtype=bool)
        if text_mask is None:
            text_mask = np.ones(text.shape[0], dtype=bool)
        n_real = int(clip_mask.sum())

        v = self._linear("input.video", Tensor(video))
        t = self._linear("input.text", Tensor(text))
        pe = sinusoidal_embedding(self._clip_positions(n_clips, n_real),
                                  self.cfg.d_model, self.cfg.pe_temperature)

        if self.use_cate:
            for i in range(self.cfg.n_cross_layers):
                v = self._block(f"enc.cross{i}", v, t, text_mask, rng)
            v = T.add(v, pe)
        else:
            v = T.add(v, pe)
            joint_mask = np.concatenate([clip_mask, text_mask])
            tokens = T.concat([v, t], axis=0)
            for i in range(self.cfg.n_cross_layers):
                tokens = self._block(f"enc.cat{i}", tokens, tokens, joint_mask, rng)
            v = tokens[:n_clips]

        if self.use_saliency_token:
            tok = T.reshape(self.params["saliency.token"], (1, self.cfg.d_model))
            x = T.concat([tok, v], axis=0)
            mask = np.concatenate([[True], clip_mask])
            for i in range(self.cfg.n_self_layers):
                x = self._block(f"enc.self{i}", x, x, mask, rng)
            return EncoderOutput(video_tokens=x[1:], saliency_token=x[0],
                                 clip_mask=clip_mask)

        x = v
        for i in range(self.cfg.n_self_layers):
            x = self._block(f"enc.self{i}", x, x, clip_mask, rng)
        return EncoderOutput(video_tokens=x, saliency_token=None, clip_mask=clip_mask)

    def saliency_scores(self, enc: EncoderOutput) -> Tensor:
        """Per-clip saliency, one score per row of ``video_tokens``."""
        p = self.params
        d = self.cfg.d_model
        proj = T.reshape(T.matmul(enc.video_tokens, T.reshape(p["saliency.wv"], (d, 1))), (-1,))
        if self.use_saliency_token:
            tok = T.sum_(T.mul(p["saliency.ws"], enc.saliency_token))
            return T.mul(T.mul(proj, tok), 1.0 / math.sqrt(d))
        return T.add(proj, p["saliency.bias"])

    def decode(self, enc: EncoderOutput,
               rng: np.random.Generator | None = None) -> DecoderOutput:
        if self.use_dam:
            return self._decode_anchored(enc, rng)
        return self._decode_plain(enc, rng)

    def _decoder_layer(self, i: int, x: Tensor, q_pos: Tensor, enc: EncoderOutput,
                       cross_extra: Tensor | None, rng) -> Tensor:
        qk = T.add(x, q_pos)
        a = self._drop(self.attention(f"dec.layer{i}.self", qk, qk, None), rng)
        x = self._ln(f"dec.layer{i}.ln1", T.add(x, a))
        c = self._drop(self.attention(f"dec.layer{i}.cross", T.add(x, q_pos),
                                      enc.video_tokens, enc.clip_mask, cross_extra), rng)
        x = self._ln(f"dec.layer{i}.ln2", T.add(x, c))
        f = self._drop(self._mlp(f"dec.layer{i}.ffn", x), rng)
        return self._ln(f"dec.layer{i}.ln3", T.add(x, f))

    def _decode_anchored(self, enc: EncoderOutput, rng) -> DecoderOutput:
        """Layer-wise anchor refinement with width-modulated positional attention."""
        cfg = self.cfg
        n_clips = enc.video_tokens.shape[0]
        n_real = int(enc.clip_mask.sum())
        clip_pe = sinusoidal_embedding(self._clip_positions(n_clips, n_real),
                                       cfg.d_model, cfg.pe_temperature)
        x = self.params["dec.content"]
        anchors = self.params["dec.anchors"]
        out_anchors, out_emb = [], []
        for i in range(cfg.n_decoder_layers):
            pos_logits, center_pe = width_modulated_logits(
                anchors[:, 0], anchors[:, 1], clip_pe,
                cfg.reference_width, cfg.pe_temperature)
            x = self._decoder_layer(i, x, center_pe, enc, pos_logits, rng)
            delta = self._mlp("dec.refine", x)
            anchors = T.sigmoid(T.add(T.inverse_sigmoid(anchors), delta))
            out_anchors.append(anchors)
            out_emb.append(x)
        return DecoderOutput(anchors=out_anchors, embeddings=out_emb)

    def _decode_plain(self, enc: EncoderOutput, rng) -> DecoderOutput:
        x = self.params["dec.content"]
        q_pos = self.params["dec.query_pos"]
        out_anchors, out_emb = [], []
        for i in range(self.cfg.n_decoder_layers):
            x = self._decoder_layer(i, x, q_pos, enc, None, rng)
            out_anchors.append(T.sigmoid(self._mlp("head.moment", x)))
            out_emb.append(x)
        return DecoderOutput(anchors=out_anchors, embeddings=out_emb)

    def predict_moments(self, dec: DecoderOutput) -> list[LayerPrediction]:
        """Per-layer moments plus class logits (last entry is the final layer)."""
        return [LayerPrediction(moments=a, class_logits=self._linear("head.class", e))
                for a, e in zip(dec.anchors, dec.embeddings)]

    def forward(self, video: np.ndarray, text: np.ndarray,
                clip_mask: np.ndarray | None = None, text_mask: np.ndarray | None = None,
                decode: bool = True, rng: np.random.Generator | None = None) -> ModelOutput:
        enc = self.encode(video, text, clip_mask, text_mask, rng)
        saliency = self.saliency_scores(enc)
        layers = self.predict_moments(self.decode(enc, rng)) if decode else None
        return ModelOutput(encoder=enc, saliency=saliency, layers=layers)
