"""Synthesis-side API over a trained checkpoint: vanilla synthesis, identity
conversion, and interpolation between two pooled identity embeddings.

Everything here is numpy-in, numpy-out; torch stays an implementation
detail.  Interpolation endpoints are handled by branching rather than
arithmetic so alpha = 0 and alpha = 1 reproduce the plain calls bit for bit.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .model import ModelConfig, SilentVoiceModel
from .trainer import load_model_for_inference


@dataclass(frozen=True)
class ConversionRequest:
    """One unit of inference work, resolvable against a corpus.

    content_utt supplies the video; identity defaults to the content
    utterance's own faces (vanilla mode).  A secondary identity plus alpha
    in (0, 1) selects interpolation.
    """
    content_utt: str
    identity_utt: Optional[str] = None
    identity_utt_b: Optional[str] = None
    alpha: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if 0.0 < self.alpha < 1.0 and self.identity_utt_b is None:
            raise ValueError(
                "interpolation with 0 < alpha < 1 needs a secondary identity")


class Synthesizer:
    def __init__(self, model: SilentVoiceModel, config: ModelConfig, step: int = 0):
        self.model = model.eval()
        self.config = config
        self.step = step

    @classmethod
    def load(cls, checkpoint_path) -> "Synthesizer":
        model, config, step = load_model_for_inference(checkpoint_path)
        return cls(model, config, step)

    def identity(self, faces: np.ndarray) -> np.ndarray:
        """Pooled facial identity embedding, (width,) float32."""
        with torch.no_grad():
            emb = self.model.encode_faces(torch.from_numpy(
                np.ascontiguousarray(faces, dtype=np.float32)))
        return emb.numpy()

    def render_from_identity(self, video: np.ndarray,
                             identity: np.ndarray) -> np.ndarray:
        """Synthesize with an explicit identity vector; the other entry
        points all funnel through here."""
        with torch.no_grad():
            content = self.model.encode_content(torch.from_numpy(
                np.ascontiguousarray(video, dtype=np.float32)))
            fused = self.model.fuse(content, torch.from_numpy(
                np.ascontiguousarray(identity, dtype=np.float32)))
            mel = self.model.blend(fused)
        return mel.numpy()

    def synthesize(self, video: np.ndarray, faces: np.ndarray) -> np.ndarray:
        return self.render_from_identity(video, self.identity(faces))

    def convert(self, video: np.ndarray, target_faces: np.ndarray) -> np.ndarray:
        """Identity swap; vanilla synthesis is the special case where the
        target faces belong to the content speaker."""
        return self.synthesize(video, target_faces)

    def interpolate(self, video: np.ndarray, faces_a: np.ndarray,
                    faces_b: np.ndarray, alpha: float) -> np.ndarray:
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        if alpha == 0.0:
            identity = self.identity(faces_a)
        elif alpha == 1.0:
            identity = self.identity(faces_b)
        else:
            identity = ((1.0 - alpha) * self.identity(faces_a)
                        + alpha * self.identity(faces_b))
        return self.render_from_identity(video, identity)


def render_pgm(mel: np.ndarray, path) -> None:
    """8-bit binary PGM of a mel spectrogram: time left-to-right, frequency
    ascending upward, min-max normalized per file."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.size == 0:
        raise ValueError(f"expected a nonempty (T, bins) mel, got {mel.shape}")
    lo, hi = float(mel.min()), float(mel.max())
    if hi > lo:
        scaled = (mel - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(mel)
    image = np.flip(np.rint(scaled).astype(np.uint8).T, axis=0)
    height, width = image.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + image.tobytes())
