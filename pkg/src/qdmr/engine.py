"""Optimizer, training/evaluation loops, checkpointing, and experiment config.

One Trainer owns a model, Adam state, and the run RNG.  Every batch forwards
positive (video, query) pairs one sample at a time, forwards the rolled
negative pairs through the encoder only, assembles the combined loss,
backpropagates, clips the global gradient norm, and applies one Adam step.
Checkpoints serialize parameters, optimizer moments, and the RNG state to a
single binary file whose round trip is bit-exact; a config hash guards
against resuming under a different configuration.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Batch, Sample, build_batch, sample_negative_pairs
from .losses import (
    LossParts,
    LossWeights,
    hungarian_match,
    margin_loss,
    moment_loss,
    negative_pair_loss,
    rank_contrastive_loss,
    total_loss,
)
from .metrics import (
    MAP_THRESHOLD_GRID,
    EvalReport,
    highlight_metrics,
    moment_map,
    recall_at_1,
    temporal_iou,
)
from .model import ModelConfig, MomentDetector
from .tensor import Tensor, backward, no_grad, reset_tape

__all__ = [
    "AdamState",
    "CheckpointError",
    "ConfigError",
    "DivergenceError",
    "TrainConfig",
    "Trainer",
    "adam_step",
    "apply_overrides",
    "clip_grad_norm",
    "config_hash",
    "evaluate",
    "evaluate_records",
    "load_checkpoint",
    "parse_config_file",
    "parse_config_text",
    "predict_records",
    "save_checkpoint",
    "synthetic_preset",
]

CHECKPOINT_MAGIC = b"QDCK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")  # magic, version, header length

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    """Invalid or unknown configuration field."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the message carries diagnostics."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or belongs to a different configuration."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    lr_min: float = 0.0
    lr_schedule: str = "constant"
    weight_decay: float = 1e-4
    seed: int = 0
    grad_clip_norm: float = 0.1
    eval_every: int = 10
    precision: str = "float64"
    use_cate: bool = True
    use_neg_pair: bool = True
    use_saliency_token: bool = True
    use_dam: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(32, 32))

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.lr_min <= max(self.lr, 0):
            raise ConfigError(f"lr_min must lie in [0, lr], got {self.lr_min}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.grad_clip_norm < 0:
            raise ConfigError(f"grad_clip_norm must be >= 0, got {self.grad_clip_norm}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        self.loss.validate()
        self.model.validate()


def synthetic_preset(seed: int = 0) -> TrainConfig:
    """Small configuration sized for the planted-window synthetic task.

    Desk-scale training has a few hundred optimizer steps, not tens of
    thousands, so the preset trades the large-corpus defaults for a looser
    gradient clip, a higher learning rate, and anchors sized to the synthetic
    moment-width distribution.
    """
    model = ModelConfig(video_in_dim=32, text_in_dim=32, d_model=32, n_heads=2,
                        n_cross_layers=1, n_self_layers=1, n_decoder_layers=2,
                        n_moment_queries=8, ffn_dim=64, anchor_width_init=0.15,
                        reference_width=0.15)
    return TrainConfig(epochs=60, batch_size=16, lr=3e-3, lr_min=2e-4,
                       lr_schedule="cosine", grad_clip_norm=1.0, seed=seed,
                       model=model)


def config_hash(cfg: TrainConfig) -> str:
    """Stable digest of every configuration field."""
    canon = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# -- config files --------------------------------------------------------------------


def _parse_scalar(raw: str, where: str):
    if raw in ("true", "false"):
        return raw == "true"
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    if raw and " " not in raw:
        return raw
    raise ConfigError(f"{where}: cannot parse value {raw!r}")


def parse_config_text(text: str, where: str = "config") -> dict:
    """Flat `key = value` lines; # comments; booleans true/false; quoted strings."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{where}:{lineno}: empty key")
        mapping[key] = _parse_scalar(value.strip(), f"{where}:{lineno}")
    return mapping


def parse_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), where=str(path))


def _coerce(key: str, value, target):
    if isinstance(target, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"field {key!r} expects true/false, got {value!r}")
        return value
    if isinstance(target, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field {key!r} expects an integer, got {value!r}")
        return value
    if isinstance(target, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {key!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(target, str):
        if not isinstance(value, str):
            raise ConfigError(f"field {key!r} expects a string, got {value!r}")
        return value
    raise ConfigError(f"field {key!r} cannot be set from a config file")


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Return a new TrainConfig with dotted `model.` / `loss.` keys applied."""
    out = copy.deepcopy(cfg)
    for key, value in overrides.items():
        obj, name = out, key
        if key.startswith("model."):
            obj, name = out.model, key[len("model."):]
        elif key.startswith("loss."):
            obj, name = out.loss, key[len("loss."):]
        if name not in type(obj).__dataclass_fields__:
            raise ConfigError(f"unknown config field {key!r}")
        setattr(obj, name, _coerce(key, value, getattr(obj, name)))
    out.validate()
    return out


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    return repr(value)


def config_to_text(cfg: TrainConfig) -> str:
    """Serialize every field in the flat key = value grammar parse_config_text reads.

    Round trip is exact: apply_overrides(TrainConfig(...defaults...), parsed) == cfg.
    """
    lines = []
    for f in fields(TrainConfig):
        if f.name in ("model", "loss"):
            continue
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    for prefix, obj in (("model", cfg.model), ("loss", cfg.loss)):
        for f in fields(type(obj)):
            lines.append(f"{prefix}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


# -- optimizer -----------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS,
              weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam with decoupled weight decay (lr * wd * param)."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps) \
            - lr * weight_decay * p.data


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is <= max_norm; returns the raw norm."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params.values():
            p.grad *= scale
    return total


# -- trainer -------------------------------------------------------------------------


class Trainer:
    """Owns the model, optimizer state, and RNG for one training run."""

    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        T.set_default_dtype(cfg.precision)
        self.model = MomentDetector(cfg.model, use_cate=cfg.use_cate,
                                    use_saliency_token=cfg.use_saliency_token,
                                    use_dam=cfg.use_dam, seed=cfg.seed)
        self.opt = AdamState()
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0

    def current_lr(self) -> float:
        """Learning rate for the upcoming epoch; cosine anneals lr -> lr_min."""
        if self.cfg.lr_schedule == "constant":
            return self.cfg.lr
        t = min(1.0, self.epoch / max(1, self.cfg.epochs - 1))
        return self.cfg.lr_min + 0.5 * (self.cfg.lr - self.cfg.lr_min) * (
            1.0 + math.cos(math.pi * t))

    def _effective_weights(self) -> LossWeights:
        if self.cfg.use_neg_pair:
            return self.cfg.loss
        w = copy.deepcopy(self.cfg.loss)
        w.lambda_neg = 0.0
        return w

    def batch_loss(self, batch: Batch) -> tuple[LossParts, Tensor]:
        """Forward one batch (positives plus rolled negatives) and assemble the loss."""
        w = self._effective_weights()
        rng = self.rng if self.cfg.model.dropout > 0 else None
        scores, ranks, inside = [], [], []
        mr = Tensor(0.0)
        for sample in batch.samples:
            out = self.model.forward(sample.video_feat.data, sample.text_feat.data,
                                     rng=rng)
            for layer in out.layers:
                preds = list(zip(layer.moment_objects(), layer.fg_probs()))
                match = hungarian_match(preds, sample.gt_moments, w)
                mr = mr + moment_loss(match, layer.moments, layer.class_logits,
                                      sample.gt_moments, w)
            scores.append(out.saliency)
            ranks.append(sample.clip_ranks)
            inside.append(sample.in_moment)
        mr = mr * (1.0 / len(batch.samples))

        neg_scores = None
        if self.cfg.use_neg_pair and batch.neg_text_index is not None:
            pieces = []
            for pair in sample_negative_pairs(batch):
                enc = self.model.encode(pair.video[: pair.n_clips],
                                        pair.text[pair.text_mask], rng=rng)
                pieces.append(self.model.saliency_scores(enc))
            neg_scores = T.concat(pieces)

        margin = margin_loss(scores, ranks, inside, w, self.rng)
        cont = rank_contrastive_loss(scores, ranks, neg_scores, w)
        neg = negative_pair_loss(neg_scores) if neg_scores is not None else Tensor(0.0)
        parts = LossParts(mr=mr, margin=margin, cont=cont, neg=neg)
        return parts, total_loss(parts, w)

    def train_epoch(self, samples: list[Sample]) -> dict[str, float]:
        """One pass over the data; returns averaged loss components and grad norm."""
        if not samples:
            raise ValueError("train_epoch needs a non-empty sample list")
        order = self.rng.permutation(len(samples))
        stats = {"loss": 0.0, "mr": 0.0, "margin": 0.0, "cont": 0.0, "neg": 0.0,
                 "grad_norm": 0.0}
        lr = self.current_lr()
        n_batches = 0
        for start in range(0, len(order), self.cfg.batch_size):
            chunk = [samples[i] for i in order[start:start + self.cfg.batch_size]]
            batch = build_batch(chunk)
            parts, total = self.batch_loss(batch)
            if not np.isfinite(total.data):
                raise DivergenceError(
                    f"non-finite loss at epoch {self.epoch} batch {n_batches}: "
                    f"components {parts.values()}")
            backward(total)
            stats["grad_norm"] += clip_grad_norm(self.model.params,
                                                 self.cfg.grad_clip_norm)
            adam_step(self.model.params, self.opt, lr,
                      weight_decay=self.cfg.weight_decay)
            self.model.zero_grad()
            reset_tape()
            stats["loss"] += float(total.data)
            for k, val in parts.values().items():
                stats[k] += val
            n_batches += 1
        self.epoch += 1
        return {k: v / n_batches for k, v in stats.items()}


# -- evaluation ----------------------------------------------------------------------


def _query_parts(model: MomentDetector, sample: Sample):
    out = model.forward(sample.video_feat.data, sample.text_feat.data)
    final = out.layers[-1]
    preds = []
    for m, p in zip(final.moment_objects(), final.fg_probs()):
        lo, hi = m.interval_clamped()
        preds.append((lo * sample.duration, hi * sample.duration, float(p)))
    gts = [(m.interval()[0] * sample.duration, m.interval()[1] * sample.duration)
           for m in sample.gt_moments]
    return preds, gts, np.array(out.saliency.data, dtype=float)


def _assemble_report(preds_by_q, gts_by_q, scores_by_q, labels_by_q, qids) -> EvalReport:
    r1 = {theta: recall_at_1(preds_by_q, gts_by_q, theta) for theta in (0.5, 0.7)}
    map_at = moment_map(preds_by_q, gts_by_q, MAP_THRESHOLD_GRID)
    map_avg = float(np.mean([map_at[t] for t in MAP_THRESHOLD_GRID]))
    hd_map, hit = highlight_metrics(scores_by_q, labels_by_q)
    per_sample = []
    for qid, preds, gts in zip(qids, preds_by_q, gts_by_q):
        top_iou = 0.0
        if preds and gts:
            ranked = max(preds, key=lambda p: p[2])
            top_iou = max(temporal_iou((ranked[0], ranked[1]), gt) for gt in gts)
        per_sample.append({"qid": qid, "top_iou": top_iou})
    return EvalReport(r1_at=r1, map_at=map_at, map_avg=map_avg, hd_map=hd_map,
                      hit_at_1=hit, per_sample=per_sample)


def evaluate(model: MomentDetector, samples: list[Sample]) -> EvalReport:
    """Deterministic inference over all samples, scored with the metric stack."""
    preds_by_q, gts_by_q, scores_by_q, labels_by_q, qids = [], [], [], [], []
    with no_grad():
        for sample in samples:
            preds, gts, scores = _query_parts(model, sample)
            preds_by_q.append(preds)
            gts_by_q.append(gts)
            scores_by_q.append(scores)
            labels_by_q.append(sample.saliency_labels)
            qids.append(sample.qid)
    reset_tape()
    return _assemble_report(preds_by_q, gts_by_q, scores_by_q, labels_by_q, qids)


def predict_records(model: MomentDetector, samples: list[Sample]) -> list[dict]:
    """Submission-style JSONL records: windows ranked by score, plus saliency."""
    records = []
    with no_grad():
        for sample in samples:
            preds, _, scores = _query_parts(model, sample)
            ranked = sorted(range(len(preds)), key=lambda i: (-preds[i][2], i))
            records.append({
                "qid": sample.qid,
                "pred_relevant_windows": [[preds[i][0], preds[i][1], preds[i][2]]
                                          for i in ranked],
                "pred_saliency_scores": [float(s) for s in scores],
            })
    reset_tape()
    return records


def evaluate_records(records: list[dict], samples: list[Sample]) -> EvalReport:
    """Score a prediction dump against sample ground truth (matched by qid)."""
    by_qid = {r["qid"]: r for r in records}
    preds_by_q, gts_by_q, scores_by_q, labels_by_q, qids = [], [], [], [], []
    for sample in samples:
        if sample.qid not in by_qid:
            raise ValueError(f"prediction dump is missing qid {sample.qid!r}")
        rec = by_qid[sample.qid]
        preds_by_q.append([(float(s), float(e), float(p))
                           for s, e, p in rec["pred_relevant_windows"]])
        gts_by_q.append([(m.interval()[0] * sample.duration,
                          m.interval()[1] * sample.duration)
                         for m in sample.gt_moments])
        scores_by_q.append(np.array(rec["pred_saliency_scores"], dtype=float))
        labels_by_q.append(sample.saliency_labels)
        qids.append(sample.qid)
    return _assemble_report(preds_by_q, gts_by_q, scores_by_q, labels_by_q, qids)


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path: str | Path, trainer: Trainer) -> None:
    """Serialize parameters, Adam moments, RNG state, and the config hash."""
    payload = bytearray()
    entries = []

    def add(name: str, arr: np.ndarray) -> None:
        blob = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": str(arr.dtype), "offset": len(payload),
                        "nbytes": len(blob)})
        payload.extend(blob)

    for name in sorted(trainer.model.params):
        add(f"param.{name}", trainer.model.params[name].data)
    for name in sorted(trainer.opt.m):
        add(f"adam.m.{name}", trainer.opt.m[name])
    for name in sorted(trainer.opt.v):
        add(f"adam.v.{name}", trainer.opt.v[name])

    header = {"config_hash": config_hash(trainer.cfg), "epoch": trainer.epoch,
              "adam_step": trainer.opt.step,
              "rng_state": trainer.rng.bit_generator.state, "entries": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"),
                      default=int).encode()
    with Path(path).open("wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path, cfg: TrainConfig) -> Trainer:
    """Rebuild a Trainer from a checkpoint; refuses config-hash mismatches."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, header_len = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[_CKPT_HEADER.size:_CKPT_HEADER.size + header_len])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e

    want = config_hash(cfg)
    if header["config_hash"] != want:
        raise CheckpointError(
            f"{path}: config hash mismatch: checkpoint {header['config_hash'][:12]} "
            f"vs current {want[:12]}; refusing to load")

    trainer = Trainer(cfg)
    base = _CKPT_HEADER.size + header_len
    for entry in header["entries"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload at byte {len(raw)}")
        arr = np.frombuffer(raw[start:end], dtype=entry["dtype"]).reshape(
            entry["shape"]).copy()
        name = entry["name"]
        if name.startswith("param."):
            key = name[len("param."):]
            if key not in trainer.model.params:
                raise CheckpointError(f"{path}: unknown parameter {key!r}")
            if trainer.model.params[key].data.shape != arr.shape:
                raise CheckpointError(f"{path}: shape mismatch for {key!r}")
            trainer.model.params[key].data = arr
        elif name.startswith("adam.m."):
            trainer.opt.m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            trainer.opt.v[name[len("adam.v."):]] = arr
        else:
            raise CheckpointError(f"{path}: unknown entry {name!r}")
    trainer.opt.step = int(header["adam_step"])
    trainer.epoch = int(header["epoch"])
    trainer.rng.bit_generator.state = header["rng_state"]
    return trainer
