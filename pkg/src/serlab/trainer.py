"""Two-stage training: per-modality encoders first, then a fusion head on
frozen extractors.  Adam optimizer, best-dev checkpoint selection, JSONL
epoch logs, and deterministic outputs for a fixed (data, config, seed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import dataio, losses, model, sampling
from . import numerics as nm
from .dataio import PredictionSet, UtteranceRecord
from .metrics import (
    EMOTION_CODES,
    attribute_metrics,
    clamp_attributes,
    classification_metrics,
    code_to_index,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

STAGE_DEFAULTS = {1: {"learning_rate": 1e-5, "epochs": 20}, 2: {"learning_rate": 5e-6, "epochs": 5}}

CATEGORICAL_LOSSES = ("wce", "focal")
ATTRIBUTE_LOSSES = ("ccc_loss", "mse")
SAMPLERS = ("shuffled", "balanced")

CONCAT_ORDER = ("speech", "text")


@dataclass
class TrainConfig:
    stage: int
    task: str
    modality: str | None = None
    loss: str | None = None
    sampler: str = "shuffled"
    fusion: str = "concat"
    activation: str = "mish"
    batch_size: int = 32
    learning_rate: float | None = None
    epochs: int | None = None
    seed: int = 0
    hidden_dim: int = 16
    out_dim: int = 16
    attn_dim: int = 16
    focal_gamma: float = 2.0

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.task not in model.TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.stage == 1 and self.modality not in ("speech", "text"):
            raise ValueError(f"stage 1 needs modality 'speech' or 'text', got {self.modality!r}")
        if self.fusion not in model.FUSION_KINDS:
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.activation not in model.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.loss is None:
            self.loss = "focal" if self.task == "categorical" else "ccc_loss"
        allowed = CATEGORICAL_LOSSES if self.task == "categorical" else ATTRIBUTE_LOSSES
        if self.loss not in allowed:
            raise ValueError(f"loss {self.loss!r} does not fit task {self.task!r}")
        defaults = STAGE_DEFAULTS[self.stage]
        if self.learning_rate is None:
            self.learning_rate = defaults["learning_rate"]
        if self.epochs is None:
            self.epochs = defaults["epochs"]
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate < 0:
            raise ValueError("batch_size/epochs must be >= 1 and learning_rate >= 0")

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict

    @property
    def content_id(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.metadata, sort_keys=True).encode("utf-8"))
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype=np.float64)
            h.update(name.encode("utf-8"))
            h.update(str(arr.shape).encode("utf-8"))
            h.update(arr.tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        dataio.write_checkpoint(path, self.tensors, self.metadata)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, metadata = dataio.read_checkpoint(path)
        return cls(tensors=tensors, metadata=metadata)


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: nm.ParamStore, names: Sequence[str]) -> "AdamState":
        return cls(
            step=0,
            m={n: np.zeros_like(params.value(n)) for n in names},
            v={n: np.zeros_like(params.value(n)) for n in names},
        )


def adam_step(
    params: nm.ParamStore, grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> tuple[nm.ParamStore, AdamState]:
    """One Adam update over the parameters tracked by ``state``."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    for name in state.m:
        g = grads[name]
        p = params.value(name)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} mismatches {name!r} {p.shape}")
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params.set_value(name, p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
    return params, state


# ---------------------------------------------------------------------------
# shared training machinery

def _feature_dim(records: Sequence[UtteranceRecord], modality: str) -> int:
    attr = "speech_frames" if modality == "speech" else "text_tokens"
    dims = set()
    for r in records:
        mat = getattr(r, attr)
        if mat is None:
            raise ValueError(f"record {r.id!r}: missing {modality} features")
        dims.add(mat.shape[1])
    if len(dims) != 1:
        raise ValueError(f"inconsistent {modality} feature dims: {sorted(dims)}")
    return dims.pop()


def _split_records(
    records: Sequence[UtteranceRecord], task: str
) -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    train = [r for r in records if r.split == "train"]
    dev = [r for r in records if r.split == "dev"]
    if not train:
        raise ValueError("empty train split")
    if not dev:
        raise ValueError("empty dev split")
    needed = "emotion" if task == "categorical" else "attributes"
    for r in train + dev:
        if getattr(r, needed) is None:
            raise ValueError(f"record {r.id!r}: missing {needed} label for task {task!r}")
    return train, dev


def _make_plan(cfg: TrainConfig, train: Sequence[UtteranceRecord], epoch: int) -> list[list[int]]:
    seed = sampling.epoch_seed(cfg.seed, epoch)
    if cfg.sampler == "balanced":
        for r in train:
            if r.emotion is None:
                raise ValueError("balanced sampler requires emotion labels on train records")
        labels = [code_to_index(r.emotion) for r in train]
        plan = sampling.balanced_batches(labels, cfg.batch_size, seed)
    else:
        plan = sampling.shuffled_batches(len(train), cfg.batch_size, seed)
    if cfg.task == "attributes" and cfg.loss == "ccc_loss":
        # CCC is undefined for single samples; a trailing singleton is dropped
        plan = [b for b in plan if len(b) >= 2]
    return plan


def _categorical_loss_fn(cfg: TrainConfig, train: Sequence[UtteranceRecord]) -> Callable:
    if cfg.loss == "wce":
        counts = np.zeros(8, dtype=np.int64)
        for r in train:
            counts[code_to_index(r.emotion)] += 1
        weights = losses.class_weights_from_counts(counts)
        return lambda logits, targets: losses.weighted_cross_entropy(logits, targets, weights)
    focal_cfg = losses.FocalConfig(gamma=cfg.focal_gamma)
    return lambda logits, targets: losses.focal_loss(logits, targets, focal_cfg)


def _batch_loss(
    cfg: TrainConfig,
    forward: Callable[[UtteranceRecord], nm.Tensor],
    batch: Sequence[UtteranceRecord],
    cat_loss: Callable | None,
) -> nm.Tensor:
    outputs = nm.stack_rows([forward(r) for r in batch])
    if cfg.task == "categorical":
        targets = [code_to_index(r.emotion) for r in batch]
        return cat_loss(outputs, targets)
    truth = np.array([r.attributes for r in batch])
    if cfg.loss == "mse":
        return losses.mse_loss(outputs, truth)
    return losses.ccc_loss(outputs, truth)


def _eval_dev(
    task: str, forward: Callable[[UtteranceRecord], nm.Tensor], dev: Sequence[UtteranceRecord]
) -> dict[str, float]:
    if task == "categorical":
        preds = [EMOTION_CODES[int(np.argmax(forward(r).data))] for r in dev]
        truth = [r.emotion for r in dev]
        rep = classification_metrics(preds, truth)
        return {"f1_macro": rep.f1_macro, "f1_micro": rep.f1_micro, "accuracy": rep.accuracy}
    pred = np.array([forward(r).data for r in dev])
    truth = np.array([r.attributes for r in dev])
    rep = attribute_metrics(pred, truth)
    return rep.to_dict()


def _selection_key(task: str) -> str:
    return "f1_macro" if task == "categorical" else "ccc_avg"


def _run_epochs(
    cfg: TrainConfig,
    params: nm.ParamStore,
    forward: Callable[[UtteranceRecord], nm.Tensor],
    train: Sequence[UtteranceRecord],
    dev: Sequence[UtteranceRecord],
    log_path=None,
) -> tuple[dict[str, np.ndarray], dict[str, float], int, list[dict]]:
    cat_loss = _categorical_loss_fn(cfg, train) if cfg.task == "categorical" else None
    state = AdamState.for_params(params, params.trainable_names())
    key = _selection_key(cfg.task)
    best_state: dict[str, np.ndarray] | None = None
    best_dev: dict[str, float] | None = None
    best_epoch = -1
    history: list[dict] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            plan = _make_plan(cfg, train, epoch)
            total = 0.0
            count = 0
            for batch_idx in plan:
                batch = [train[i] for i in batch_idx]
                loss = _batch_loss(cfg, forward, batch, cat_loss)
                nm.backward(loss, params)
                adam_step(params, params.grads, state, cfg.learning_rate)
                total += loss.item() * len(batch)
                count += len(batch)
            dev_metrics = _eval_dev(cfg.task, forward, dev)
            entry = {"epoch": epoch, "train_loss": total / count, "dev": dev_metrics}
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            if best_dev is None or dev_metrics[key] > best_dev[key]:
                best_dev = dev_metrics
                best_epoch = epoch
                best_state = params.state_dict()
    finally:
        if log_file:
            log_file.close()
    return best_state, best_dev, best_epoch, history


# ---------------------------------------------------------------------------
# stage 1

def train_stage1(cfg: TrainConfig, records: Sequence[UtteranceRecord], log_path=None) -> Checkpoint:
    """Train one modality's encoder plus task head end-to-end."""
    if cfg.stage != 1:
        raise ValueError(f"train_stage1 requires cfg.stage == 1, got {cfg.stage}")
    train, dev = _split_records(records, cfg.task)
    modality = cfg.modality
    dim = _feature_dim(train + dev, modality)
    if modality == "speech":
        enc_cfg: model.EncoderCfg = model.SpeechEncoderCfg(dim, cfg.hidden_dim, cfg.out_dim)
    else:
        enc_cfg = model.TextEncoderCfg(dim, cfg.hidden_dim, cfg.out_dim)
    head_cfg = model.FusionHeadCfg(fusion=cfg.fusion, activation=cfg.activation, task=cfg.task)

    rng = np.random.default_rng(cfg.seed)
    params = nm.ParamStore()
    for name, arr in model.init_encoder_params(enc_cfg, rng).items():
        params.add(f"{modality}.{name}", arr)
    for name, arr in model.init_head_params(cfg.out_dim, head_cfg.out_dim, rng).items():
        params.add(f"head.{name}", arr)

    enc_view = params.view(f"{modality}.")
    head_view = params.view("head.")

    def forward(record: UtteranceRecord) -> nm.Tensor:
        feats = record.speech_frames if modality == "speech" else record.text_tokens
        if feats is None:
            raise ValueError(f"record {record.id!r}: missing {modality} features")
        emb = model.encoder_forward(enc_cfg, enc_view, feats)
        return model.fusion_head_forward(head_cfg, head_view, emb)

    best_state, best_dev, best_epoch, history = _run_epochs(
        cfg, params, forward, train, dev, log_path
    )
    metadata = {
        "stage": 1,
        "modality": modality,
        "task": cfg.task,
        "seed": cfg.seed,
        "config": cfg.echo(),
        "encoder": {"frame_dim": dim, "hidden_dim": cfg.hidden_dim, "out_dim": cfg.out_dim},
        "best_epoch": best_epoch,
        "dev_metrics": best_dev,
        "history": history,
    }
    return Checkpoint(tensors=best_state, metadata=metadata)


# ---------------------------------------------------------------------------
# stage 2

def _encoder_cfg_from_meta(meta: dict, modality: str) -> model.EncoderCfg:
    enc = meta["encoder"]
    if modality == "speech":
        return model.SpeechEncoderCfg(enc["frame_dim"], enc["hidden_dim"], enc["out_dim"])
    return model.TextEncoderCfg(enc["frame_dim"], enc["hidden_dim"], enc["out_dim"])


def _check_stage1_source(ckpt: Checkpoint, modality: str) -> None:
    meta = ckpt.metadata
    if meta.get("stage") != 1:
        raise ValueError(
            f"stage-2 {modality} source must be a stage-1 checkpoint, got stage {meta.get('stage')}"
        )
    if meta.get("modality") != modality:
        raise ValueError(
            f"expected a {modality} checkpoint, got modality {meta.get('modality')!r}"
        )


def _load_frozen_encoder(
    params: nm.ParamStore, ckpt: Checkpoint, modality: str
) -> model.EncoderCfg:
    enc_cfg = _encoder_cfg_from_meta(ckpt.metadata, modality)
    rng = np.random.default_rng(0)
    expected = [f"{modality}.{n}" for n in model.init_encoder_params(enc_cfg, rng)]
    for name in expected:
        if name not in ckpt.tensors:
            raise ValueError(f"checkpoint missing required tensor {name!r}")
        params.add(name, ckpt.tensors[name], trainable=False)
    return enc_cfg


def train_stage2(
    cfg: TrainConfig,
    speech_ckpt: Checkpoint,
    text_ckpt: Checkpoint,
    records: Sequence[UtteranceRecord],
    log_path=None,
) -> Checkpoint:
    """Train the fusion head on frozen stage-1 encoders.

    Encoder tensors are loaded untrainable and never touched by the
    optimizer; only head (and cross-attention projection) parameters move.
    """
    if cfg.stage != 2:
        raise ValueError(f"train_stage2 requires cfg.stage == 2, got {cfg.stage}")
    _check_stage1_source(speech_ckpt, "speech")
    _check_stage1_source(text_ckpt, "text")
    train, dev = _split_records(records, cfg.task)
    head_cfg = model.FusionHeadCfg(fusion=cfg.fusion, activation=cfg.activation, task=cfg.task)

    params = nm.ParamStore()
    s_cfg = _load_frozen_encoder(params, speech_ckpt, "speech")
    t_cfg = _load_frozen_encoder(params, text_ckpt, "text")

    rng = np.random.default_rng(cfg.seed)
    if cfg.fusion == "cross_attention":
        fuse_init = model.init_cross_attention_params(
            s_cfg.hidden_dim, t_cfg.hidden_dim, cfg.attn_dim, rng
        )
        for name, arr in fuse_init.items():
            params.add(f"fusion.{name}", arr)
        head_in = cfg.attn_dim
    else:
        head_in = s_cfg.out_dim + t_cfg.out_dim
    for name, arr in model.init_head_params(head_in, head_cfg.out_dim, rng).items():
        params.add(f"head.{name}", arr)

    s_view = params.view("speech.")
    t_view = params.view("text.")
    head_view = params.view("head.")
    fuse_view = params.view("fusion.") if cfg.fusion == "cross_attention" else None

    def forward(record: UtteranceRecord) -> nm.Tensor:
        if record.speech_frames is None or record.text_tokens is None:
            raise ValueError(f"record {record.id!r}: dual-modality model needs both feature sets")
        if cfg.fusion == "concat":
            es = model.encoder_forward(s_cfg, s_view, record.speech_frames)
            et = model.encoder_forward(t_cfg, t_view, record.text_tokens)
            fused = model.concat_fuse(es, et)
        else:
            hs = model.frame_hidden(s_cfg, s_view, record.speech_frames)
            ht = model.frame_hidden(t_cfg, t_view, record.text_tokens)
            fused = model.cross_attention_fuse(hs, ht, fuse_view)
        return model.fusion_head_forward(head_cfg, head_view, fused)

    best_state, best_dev, best_epoch, history = _run_epochs(
        cfg, params, forward, train, dev, log_path
    )
    metadata = {
        "stage": 2,
        "task": cfg.task,
        "fusion": cfg.fusion,
        "activation": cfg.activation,
        "seed": cfg.seed,
        "config": cfg.echo(),
        "speech_encoder": speech_ckpt.metadata["encoder"],
        "text_encoder": text_ckpt.metadata["encoder"],
        "attn_dim": cfg.attn_dim,
        "concat_order": list(CONCAT_ORDER),
        "sources": {"speech": speech_ckpt.content_id, "text": text_ckpt.content_id},
        "best_epoch": best_epoch,
        "dev_metrics": best_dev,
        "history": history,
    }
    return Checkpoint(tensors=best_state, metadata=metadata)


# ---------------------------------------------------------------------------
# inference

def _rebuild_forward(ckpt: Checkpoint) -> Callable[[UtteranceRecord], nm.Tensor]:
    meta = ckpt.metadata
    params = nm.ParamStore()
    task = meta["task"]
    activation = meta["config"]["activation"]
    if meta["stage"] == 1:
        modality = meta["modality"]
        enc_cfg = _encoder_cfg_from_meta(meta, modality)
        head_cfg = model.FusionHeadCfg(fusion="concat", activation=activation, task=task)
        for name, arr in ckpt.tensors.items():
            params.add(name, arr, trainable=False)
        for required in (f"{modality}.frame.W", "head.fc1.W", "head.fc2.W"):
            if required not in params:
                raise ValueError(f"checkpoint missing required tensor {required!r}")
        enc_view = params.view(f"{modality}.")
        head_view = params.view("head.")

        def forward(record: UtteranceRecord) -> nm.Tensor:
            feats = record.speech_frames if modality == "speech" else record.text_tokens
            if feats is None:
                raise ValueError(f"record {record.id!r}: missing {modality} features")
            return model.fusion_head_forward(
                head_cfg, head_view, model.encoder_forward(enc_cfg, enc_view, feats)
            )

        return forward

    fusion = meta["fusion"]
    s_cfg = model.SpeechEncoderCfg(**meta["speech_encoder"])
    t_cfg = model.TextEncoderCfg(
        token_dim=meta["text_encoder"]["frame_dim"],
        hidden_dim=meta["text_encoder"]["hidden_dim"],
        out_dim=meta["text_encoder"]["out_dim"],
    )
    head_cfg = model.FusionHeadCfg(fusion=fusion, activation=activation, task=task)
    for name, arr in ckpt.tensors.items():
        params.add(name, arr, trainable=False)
    required = ["speech.frame.W", "text.frame.W", "head.fc1.W", "head.fc2.W"]
    if fusion == "cross_attention":
        required.append("fusion.q.W")
    for name in required:
        if name not in params:
            raise ValueError(f"checkpoint missing required tensor {name!r}")
    s_view = params.view("speech.")
    t_view = params.view("text.")
    head_view = params.view("head.")
    fuse_view = params.view("fusion.") if fusion == "cross_attention" else None

    def forward(record: UtteranceRecord) -> nm.Tensor:
        if record.speech_frames is None or record.text_tokens is None:
            raise ValueError(f"record {record.id!r}: dual-modality model needs both feature sets")
        if fusion == "concat":
            fused = model.concat_fuse(
                model.encoder_forward(s_cfg, s_view, record.speech_frames),
                model.encoder_forward(t_cfg, t_view, record.text_tokens),
            )
        else:
            fused = model.cross_attention_fuse(
                model.frame_hidden(s_cfg, s_view, record.speech_frames),
                model.frame_hidden(t_cfg, t_view, record.text_tokens),
                fuse_view,
            )
        return model.fusion_head_forward(head_cfg, head_view, fused)

    return forward


def predict(ckpt: Checkpoint, records: Sequence[UtteranceRecord], clamp: bool = True) -> PredictionSet:
    """Per-utterance labels or attribute triples, in input order."""
    forward = _rebuild_forward(ckpt)
    task = ckpt.metadata["task"]
    preds = PredictionSet(task=task)
    for record in records:
        out = forward(record).data
        if task == "categorical":
            preds.add_label(record.id, EMOTION_CODES[int(np.argmax(out))], logits=out.copy())
        else:
            triple = tuple(float(v) for v in out)
            if clamp:
                triple, was_clamped = clamp_attributes(triple)
            else:
                was_clamped = False
            preds.add_attributes(record.id, triple, clamped=was_clamped)
    return preds


def frozen_tensor_hashes(ckpt: Checkpoint) -> dict[str, str]:
    """SHA-256 of each encoder tensor; used to verify the freeze contract."""
    out = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith(("speech.", "text.")):
            out[name] = hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()
    return out
