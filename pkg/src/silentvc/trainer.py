"""Alternating two-player training loop.

Each iteration performs one E-step (fit the variational estimator theta on
the current batch's detached embeddings, constant learning rate) followed by
one M-step (update everything else, phi', on reconstruction + contrastive +
MI-bound losses with a tri-stage learning-rate schedule).

All per-step randomness (face subsets, MI negatives) is derived from
(seed, step), never from ambient generator state, so a run resumed from a
checkpoint replays the exact batch and sampling stream of an uninterrupted
run.
"""

import json
import os
from dataclasses import dataclass, asdict, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import Corpus, Utterance, batch_for_step, face_sample_indices
from .errors import DataError, NumericError
from .losses import LossValue, afclip_loss, reconstruction_loss
from .miest import MiEstimator, e_step_loss, mi_upper_bound
from .model import ModelConfig, SilentVoiceModel

CHECKPOINT_VERSION = 1
SPEECH_BLOCK_PREFIXES = ("speech_encoder.", "adapter_a.")


@dataclass(frozen=True)
class TrainConfig:
    lambda_clip: float = 0.1
    lambda_mi: float = 0.01
    theta_lr: float = 1e-3
    peak_lr: float = 1e-4
    final_lr: float = 5e-6
    warmup_frac: float = 0.05
    hold_frac: float = 0.10
    decay_frac: float = 0.85
    total_updates: int = 10000
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    e_steps: int = 1
    temperature: float = 1.0
    freeze_encoders: bool = False

    def validate(self) -> None:
        if self.lambda_clip < 0 or self.lambda_mi < 0:
            raise ValueError("loss weights must be >= 0")
        for name in ("theta_lr", "peak_lr", "final_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        fracs = (self.warmup_frac, self.hold_frac, self.decay_frac)
        if any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"schedule fractions must be >= 0 and sum to 1, got {fracs}")
        if self.total_updates < 1:
            raise ValueError("total_updates must be >= 1")
        min_batch = 2 if (self.lambda_clip > 0 or self.lambda_mi > 0) else 1
        if self.batch_size < min_batch:
            raise ValueError(
                f"batch_size must be >= {min_batch} with the contrastive or "
                f"MI term active, got {self.batch_size}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("weight_decay and grad_clip must be >= 0")
        if self.e_steps < 1:
            raise ValueError("e_steps must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class TrainState:
    model: SilentVoiceModel
    estimator: MiEstimator
    opt_model: torch.optim.Optimizer
    opt_theta: torch.optim.Optimizer
    step: int
    model_config: ModelConfig
    train_config: TrainConfig


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Tri-stage schedule: linear warmup from 0 to peak, hold, linear decay
    to the final value reached at the last step."""
    total = cfg.total_updates
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    warm = round(cfg.warmup_frac * total)
    hold = round(cfg.hold_frac * total)
    if step < warm:
        return cfg.peak_lr * step / warm
    if step < warm + hold:
        return cfg.peak_lr
    decay_span = total - warm - hold
    if decay_span <= 1:
        return cfg.final_lr
    frac = (step - warm - hold) / (decay_span - 1)
    return cfg.peak_lr + (cfg.final_lr - cfg.peak_lr) * frac


def build_train_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    model_cfg.validate()
    train_cfg.validate()
    torch.manual_seed(train_cfg.seed)
    model = SilentVoiceModel(model_cfg)
    estimator = MiEstimator(model_cfg.width, model_cfg.estimator_hidden)
    if train_cfg.freeze_encoders:
        for module in (model.content_encoder, model.face_encoder,
                       model.speech_encoder):
            for p in module.parameters():
                p.requires_grad_(False)
    phi = [p for p in model.parameters() if p.requires_grad]
    opt_model = torch.optim.AdamW(
        phi, lr=train_cfg.peak_lr, betas=(train_cfg.beta1, train_cfg.beta2),
        weight_decay=train_cfg.weight_decay)
    opt_theta = torch.optim.Adam(estimator.parameters(), lr=train_cfg.theta_lr)
    return TrainState(model, estimator, opt_model, opt_theta, 0,
                      model_cfg, train_cfg)


def _step_seed(seed: int, step: int, stream: int) -> int:
    state = np.random.SeedSequence([seed, step, stream]).generate_state(1, np.uint64)
    return int(state[0] & np.uint64(0x7FFF_FFFF_FFFF_FFFF))


def _check_finite(value: torch.Tensor, name: str, step: int) -> None:
    if not bool(torch.isfinite(value.detach())):
        raise NumericError(f"{name} loss is non-finite at step {step}")


def train_step(state: TrainState, batch: Sequence[Utterance],
               skip_e_step: bool = False, skip_m_step: bool = False) -> dict:
    """One alternation: theta update on the likelihood loss, then phi' update
    on the combined objective. The skip flags exist for the parameter-
    partition tests and are not used in normal training."""
    if len(batch) < 1:
        raise ValueError("empty batch")
    cfg = state.train_config
    model, estimator = state.model, state.estimator
    step = state.step
    model.train()
    estimator.train()

    face_rng = np.random.default_rng([cfg.seed, step, 1])
    contents, facial_rows, mels = [], [], []
    for utt in batch:
        idx = face_sample_indices(utt.n_faces, state.model_config.max_images,
                                  face_rng)
        contents.append(model.encode_content(torch.from_numpy(utt.video)))
        facial_rows.append(model.encode_faces(torch.from_numpy(utt.faces[idx])))
        mels.append(torch.from_numpy(utt.mel))
    facial = torch.stack(facial_rows)

    zero = torch.zeros(())
    loss_estimator = zero
    run_e_step = cfg.lambda_mi > 0 and not skip_e_step
    if run_e_step:
        for _ in range(cfg.e_steps):
            ev = e_step_loss(estimator, facial, contents)
            _check_finite(ev.scalar, "estimator", step)
            state.opt_theta.zero_grad(set_to_none=True)
            ev.scalar.backward()
            state.opt_theta.step()
            loss_estimator = ev.scalar.detach()

    loss_rec = zero
    loss_clip = zero
    loss_mi = zero
    total = zero
    lr_model = lr_at(step, cfg)
    if not skip_m_step:
        rec_sum = torch.zeros(())
        for content, face_emb, mel in zip(contents, facial_rows, mels):
            pred = model.blend(model.fuse(content, face_emb))
            rec_sum = rec_sum + reconstruction_loss(pred, mel).scalar
        loss_rec = rec_sum / len(batch)
        _check_finite(loss_rec, "reconstruction", step)

        if cfg.lambda_clip > 0:
            audio = torch.stack([model.encode_speech(mel) for mel in mels])
            loss_clip = afclip_loss(audio, facial, cfg.temperature).scalar
            _check_finite(loss_clip, "contrastive", step)
        if cfg.lambda_mi > 0:
            gen = torch.Generator().manual_seed(_step_seed(cfg.seed, step, 2))
            loss_mi = mi_upper_bound(estimator, facial, contents,
                                     generator=gen).scalar
            _check_finite(loss_mi, "mi_bound", step)

        total = loss_rec + cfg.lambda_clip * loss_clip + cfg.lambda_mi * loss_mi
        _check_finite(total, "total", step)
        state.opt_model.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for g in state.opt_model.param_groups for p in g["params"]],
                cfg.grad_clip)
        for group in state.opt_model.param_groups:
            group["lr"] = lr_model
        state.opt_model.step()

    state.step = step + 1
    return {
        "step": step,
        "loss_total": float(total.detach()),
        "loss_rec": float(loss_rec.detach()),
        "loss_clip": float(loss_clip.detach()),
        "loss_mi": float(loss_mi.detach()),
        "loss_estimator": float(loss_estimator),
        "lr_model": lr_model,
        "lr_theta": cfg.theta_lr,
    }


def save_checkpoint(state: TrainState, path) -> None:
    """Atomic write: serialize to a sibling temp file, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "train",
        "model_config": state.model_config.to_json(),
        "train_config": asdict(state.train_config),
        "step": state.step,
        "model": state.model.state_dict(),
        "estimator": state.estimator.state_dict(),
        "opt_model": state.opt_model.state_dict(),
        "opt_theta": state.opt_theta.state_dict(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def _load_payload(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint version in {path}: "
            f"{payload.get('version') if isinstance(payload, dict) else '?'}")
    return payload


def load_checkpoint(path, expect_model_config: Optional[ModelConfig] = None) -> TrainState:
    payload = _load_payload(path)
    if payload.get("kind") != "train":
        raise DataError(f"{path} is not a training checkpoint "
                        f"(kind={payload.get('kind')!r})")
    model_cfg = ModelConfig.from_json(payload["model_config"])
    if expect_model_config is not None and model_cfg != expect_model_config:
        raise DataError(
            f"checkpoint {path} was trained with a different model config")
    train_cfg = TrainConfig(**payload["train_config"])
    state = build_train_state(model_cfg, train_cfg)
    state.model.load_state_dict(payload["model"])
    state.estimator.load_state_dict(payload["estimator"])
    state.opt_model.load_state_dict(payload["opt_model"])
    state.opt_theta.load_state_dict(payload["opt_theta"])
    state.step = int(payload["step"])
    return state


def export_inference(checkpoint_path, out_path) -> None:
    """Strip the training-only blocks (estimator, speech path, optimizer
    state); the exported file serves synthesis and conversion only."""
    payload = _load_payload(checkpoint_path)
    if payload.get("kind") != "train":
        raise DataError(f"{checkpoint_path} is not a training checkpoint")
    model_sd = {k: v for k, v in payload["model"].items()
                if not k.startswith(SPEECH_BLOCK_PREFIXES)}
    out = {
        "version": CHECKPOINT_VERSION,
        "kind": "inference",
        "model_config": payload["model_config"],
        "step": payload["step"],
        "model": model_sd,
    }
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".tmp")
    torch.save(out, tmp)
    os.replace(tmp, out_path)


def load_model_for_inference(path) -> tuple:
    """Load either checkpoint kind; returns (model, model_config, step).
    Inference exports leave the speech path at its random initialization, so
    only the synthesis-side methods are meaningful on them."""
    payload = _load_payload(path)
    model_cfg = ModelConfig.from_json(payload["model_config"])
    torch.manual_seed(0)
    model = SilentVoiceModel(model_cfg)
    if payload.get("kind") == "train":
        model.load_state_dict(payload["model"])
    elif payload.get("kind") == "inference":
        missing, unexpected = model.load_state_dict(payload["model"], strict=False)
        if unexpected:
            raise DataError(f"{path}: unexpected parameter keys {unexpected[:3]}")
        bad = [k for k in missing if not k.startswith(SPEECH_BLOCK_PREFIXES)]
        if bad:
            raise DataError(f"{path}: missing parameter keys {bad[:3]}")
    else:
        raise DataError(f"{path}: unknown checkpoint kind {payload.get('kind')!r}")
    model.eval()
    return model, model_cfg, int(payload["step"])


def append_metrics(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def read_metrics(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def run_training(corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 checkpoint_path=None, metrics_path=None,
                 resume_from=None, log_every: int = 50,
                 progress=None) -> TrainState:
    """Drive train_step from step 0 (or the resume point) to total_updates.

    Metrics are appended every `log_every` steps plus the final step; the
    checkpoint, if requested, is written once at the end (callers needing
    mid-run snapshots can save from the progress callback).
    """
    if resume_from is not None:
        state = load_checkpoint(resume_from, expect_model_config=model_cfg)
    else:
        state = build_train_state(model_cfg, train_cfg)
    cfg = state.train_config
    while state.step < cfg.total_updates:
        batch = batch_for_step(corpus, cfg.batch_size, cfg.seed, state.step)
        record = train_step(state, batch)
        is_last = state.step == cfg.total_updates
        if metrics_path is not None and (record["step"] % log_every == 0 or is_last):
            append_metrics(metrics_path, record)
        if progress is not None:
            progress(record)
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state


def save_run_config(path, mapping: dict) -> None:
    """key=value text format, one entry per line."""
    lines = [f"{key}={value}" for key, value in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_run_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce_fields(cls, raw: dict):
    """Build a config dataclass from string values (run-config files, CLI),
    rejecting unknown keys."""
    spec = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(raw) - set(spec))
    if unknown:
        raise DataError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if not isinstance(value, str):
            kwargs[key] = value
            continue
        ftype = spec[key]
        try:
            if ftype in ("int", int):
                kwargs[key] = int(value)
            elif ftype in ("float", float):
                kwargs[key] = float(value)
            elif ftype in ("bool", bool):
                low = value.lower()
                if low not in ("true", "false", "1", "0"):
                    raise ValueError(f"not a boolean: {value!r}")
                kwargs[key] = low in ("true", "1")
            else:
                kwargs[key] = value
        except ValueError as exc:
            raise DataError(f"bad value for {cls.__name__}.{key}: {exc}") from exc
    return cls(**kwargs)
