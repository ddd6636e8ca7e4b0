"""Trainable graph: content, facial, and speech paths with distinct adapters,
broadcast fusion, and an attention/convolution blender producing log-mel frames.

The three encoders are deliberately small stand-ins for the usual frozen
pretrained towers.  Each path keeps its adapter as a separate parameter block
so the adapters-only training regime is a config flag away.  Identity pooling
(faces over K images, speech over time) accumulates in float64 after a
canonical row ordering, which makes the pooled embeddings exactly invariant
to input permutation and exactly collapsing for duplicated inputs.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

CONTENT_MIXERS = ("attention", "none")
UPSAMPLE_MODES = ("repeat", "tail")


@dataclass(frozen=True)
class ModelConfig:
    video_dim: int = 32
    face_dim: int = 16
    mel_bins: int = 80
    mel_per_video_frame: int = 4
    width: int = 128
    heads: int = 4
    blender_layers: int = 2
    ffn_mult: int = 4
    conv_kernel: int = 7
    content_layers: int = 3
    content_kernel: int = 5
    content_mixer: str = "attention"
    speech_channels: int = 8
    speech_kernel: int = 5
    estimator_hidden: int = 64
    max_images: int = 16
    upsample: str = "repeat"
    dropout: float = 0.0
    train_adapters_only: bool = False

    def validate(self) -> None:
        for name in ("video_dim", "face_dim", "mel_bins", "width", "heads",
                     "blender_layers", "ffn_mult", "content_layers",
                     "speech_channels", "estimator_hidden", "max_images"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.mel_per_video_frame < 1:
            raise ValueError(f"mel_per_video_frame must be >= 1, got {self.mel_per_video_frame}")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        for name in ("conv_kernel", "content_kernel", "speech_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1, got {k}")
        if self.content_mixer not in CONTENT_MIXERS:
            raise ValueError(f"content_mixer must be one of {CONTENT_MIXERS}, "
                             f"got {self.content_mixer!r}")
        if self.upsample not in UPSAMPLE_MODES:
            raise ValueError(f"upsample must be one of {UPSAMPLE_MODES}, "
                             f"got {self.upsample!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        cfg = cls(**data)
        cfg.validate()
        return cfg


def sinusoidal_pe(length: int, width: int) -> torch.Tensor:
    """Fixed sine/cosine positional table, (length, width)."""
    position = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float32)
                    * (-math.log(10000.0) / width))
    pe = torch.zeros(length, width)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: (width + 1) // 2])
    return pe


def lexsort_rows(x: torch.Tensor) -> torch.Tensor:
    """Indices sorting rows lexicographically; the canonical order that makes
    float pooling independent of input row order."""
    arr = x.detach().cpu().numpy()
    keys = tuple(arr[:, col] for col in range(arr.shape[1] - 1, -1, -1))
    return torch.from_numpy(np.lexsort(keys).copy())


def pooled_mean(rows: torch.Tensor) -> torch.Tensor:
    """Mean over dim 0 accumulated in float64, cast back to the input dtype.

    Partial sums of duplicated float32 rows stay exact in float64, so K
    identical rows pool to the single-row value bit for bit.
    """
    return rows.double().mean(dim=0).to(rows.dtype)


class FeedForward(nn.Module):
    def __init__(self, width: int, mult: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.lin1 = nn.Linear(width, mult * width)
        self.lin2 = nn.Linear(mult * width, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.lin1(self.norm(x))
        y = self.drop(torch.nn.functional.silu(y))
        return self.drop(self.lin2(y))


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, dropout=dropout,
                                          batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm(x)
        out, _ = self.attn(y, y, y, need_weights=False)
        return out


class ConvBlock(nn.Module):
    """Pointwise GLU, depthwise convolution, pointwise projection.  Channel
    LayerNorm instead of BatchNorm keeps single-utterance forwards
    deterministic and batch-size independent."""

    def __init__(self, width: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.pw_in = nn.Conv1d(width, 2 * width, 1)
        self.depthwise = nn.Conv1d(width, width, kernel,
                                   padding=kernel // 2, groups=width)
        self.norm_mid = nn.LayerNorm(width)
        self.pw_out = nn.Linear(width, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm(x).transpose(1, 2)
        y = torch.nn.functional.glu(self.pw_in(y), dim=1)
        y = self.depthwise(y).transpose(1, 2)
        y = torch.nn.functional.silu(self.norm_mid(y))
        return self.drop(self.pw_out(y))


class BlenderBlock(nn.Module):
    """Half-FFN sandwich around self-attention and convolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ffn_pre = FeedForward(cfg.width, cfg.ffn_mult, cfg.dropout)
        self.attn = SelfAttention(cfg.width, cfg.heads, cfg.dropout)
        self.conv = ConvBlock(cfg.width, cfg.conv_kernel, cfg.dropout)
        self.ffn_post = FeedForward(cfg.width, cfg.ffn_mult, cfg.dropout)
        self.norm_out = nn.LayerNorm(cfg.width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + 0.5 * self.ffn_pre(x)
        x = x + self.attn(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ffn_post(x)
        return self.norm_out(x)


class ContentEncoder(nn.Module):
    """1-D convolution stack over time, optionally followed by a global
    self-attention mixer.  Without the mixer the receptive field radius is
    content_layers * (content_kernel // 2) frames."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        convs = []
        in_ch = cfg.video_dim
        for _ in range(cfg.content_layers):
            convs.append(nn.Conv1d(in_ch, cfg.width, cfg.content_kernel,
                                   padding=cfg.content_kernel // 2))
            in_ch = cfg.width
        self.convs = nn.ModuleList(convs)
        self.mixer = (SelfAttention(cfg.width, cfg.heads, cfg.dropout)
                      if cfg.content_mixer == "attention" else None)

    @property
    def receptive_field(self):
        """Radius in frames, or None when the attention mixer makes it global."""
        if self.mixer is not None:
            return None
        return self.cfg.content_layers * (self.cfg.content_kernel // 2)

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        if video.dim() != 2 or video.shape[1] != self.cfg.video_dim:
            raise ValueError(
                f"expected video features (T, {self.cfg.video_dim}), "
                f"got {tuple(video.shape)}")
        if video.shape[0] < 1:
            raise ValueError("empty video feature sequence")
        y = video.t().unsqueeze(0)
        for conv in self.convs:
            y = torch.nn.functional.gelu(conv(y))
        y = y.squeeze(0).t()
        if self.mixer is not None:
            y = y.unsqueeze(0)
            y = y + sinusoidal_pe(y.shape[1], y.shape[2]).to(y.dtype).unsqueeze(0)
            y = (y + self.mixer(y)).squeeze(0)
        return y


class FaceEncoder(nn.Module):
    """Two-layer perceptron per image; pooling happens in the model so the
    adapter output stays a per-image quantity."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.lin1 = nn.Linear(cfg.face_dim, cfg.width)
        self.lin2 = nn.Linear(cfg.width, cfg.width)

    def forward(self, faces: torch.Tensor) -> torch.Tensor:
        if faces.dim() != 2 or faces.shape[1] != self.cfg.face_dim:
            raise ValueError(
                f"expected face features (K, {self.cfg.face_dim}), "
                f"got {tuple(faces.shape)}")
        if faces.shape[0] < 1:
            raise ValueError("need at least one face image")
        return self.lin2(torch.nn.functional.gelu(self.lin1(faces)))


def conv_out_len(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


class SpeechEncoder(nn.Module):
    """Per-frame convolution over the frequency axis; no operation mixes
    time, so time pooling semantics live entirely in the model."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        k, c = cfg.speech_kernel, cfg.speech_channels
        self.conv1 = nn.Conv1d(1, c, k, stride=2, padding=k // 2)
        self.conv2 = nn.Conv1d(c, c, k, stride=2, padding=k // 2)
        l1 = conv_out_len(cfg.mel_bins, k, 2, k // 2)
        l2 = conv_out_len(l1, k, 2, k // 2)
        if l2 < 1:
            raise ValueError(f"mel_bins={cfg.mel_bins} too small for the "
                             f"frequency convolution stack")
        self.proj = nn.Linear(c * l2, cfg.width)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() != 2 or mel.shape[1] != self.cfg.mel_bins:
            raise ValueError(
                f"expected mel (T, {self.cfg.mel_bins}), got {tuple(mel.shape)}")
        if mel.shape[0] < 1:
            raise ValueError("empty mel input")
        y = mel.unsqueeze(1)
        y = torch.nn.functional.gelu(self.conv1(y))
        y = torch.nn.functional.gelu(self.conv2(y))
        return self.proj(y.flatten(start_dim=1))


class Blender(nn.Module):
    """Maps the fused content sequence to r*T_v log-mel frames.

    upsample="repeat" repeats each fused frame r times before the block
    stack (so attention runs at mel rate); upsample="tail" runs the stack at
    video rate and lets the head emit r frames per step, which is roughly r
    times cheaper per update.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(BlenderBlock(cfg) for _ in range(cfg.blender_layers))
        out = cfg.mel_bins if cfg.upsample == "repeat" else cfg.mel_bins * cfg.mel_per_video_frame
        self.head = nn.Linear(cfg.width, out)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.dim() != 2 or fused.shape[1] != self.cfg.width:
            raise ValueError(
                f"expected fused sequence (T, {self.cfg.width}), got {tuple(fused.shape)}")
        if fused.shape[0] < 1:
            raise ValueError("empty fused sequence")
        r = self.cfg.mel_per_video_frame
        y = fused
        if self.cfg.upsample == "repeat":
            y = y.repeat_interleave(r, dim=0)
        y = y.unsqueeze(0)
        y = y + sinusoidal_pe(y.shape[1], y.shape[2]).to(y.dtype).unsqueeze(0)
        for block in self.blocks:
            y = block(y)
        y = self.head(y).squeeze(0)
        if self.cfg.upsample == "tail":
            y = y.reshape(fused.shape[0] * r, self.cfg.mel_bins)
        return y


class SilentVoiceModel(nn.Module):
    """Full trainable graph minus the variational estimator (which belongs
    to the other optimization player and lives in its own module)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.content_encoder = ContentEncoder(cfg)
        self.adapter_v = nn.Linear(cfg.width, cfg.width)
        self.face_encoder = FaceEncoder(cfg)
        self.adapter_f = nn.Linear(cfg.width, cfg.width)
        self.speech_encoder = SpeechEncoder(cfg)
        self.adapter_a = nn.Linear(cfg.width, cfg.width)
        self.blender = Blender(cfg)
        if cfg.train_adapters_only:
            for module in (self.content_encoder, self.face_encoder,
                           self.speech_encoder):
                for p in module.parameters():
                    p.requires_grad_(False)

    def encode_content(self, video: torch.Tensor) -> torch.Tensor:
        return self.adapter_v(self.content_encoder(video))

    def encode_faces(self, faces: torch.Tensor) -> torch.Tensor:
        # Embed one image at a time: batched matmul kernels round differently
        # per batch size, which would break the exact pooling contract.
        order = lexsort_rows(faces)
        rows = faces[order]
        per_image = torch.cat([
            self.adapter_f(self.face_encoder(rows[k:k + 1]))
            for k in range(rows.shape[0])
        ])
        return pooled_mean(per_image)

    def encode_speech(self, mel: torch.Tensor) -> torch.Tensor:
        per_frame = self.adapter_a(self.speech_encoder(mel))
        return pooled_mean(per_frame)

    def fuse(self, content: torch.Tensor, identity: torch.Tensor) -> torch.Tensor:
        if content.dim() != 2 or identity.dim() != 1:
            raise ValueError("fuse expects a (T, d) sequence and a (d,) vector")
        if content.shape[1] != identity.shape[0]:
            raise ValueError(
                f"width mismatch: content d={content.shape[1]}, "
                f"identity d={identity.shape[0]}")
        return content + identity.unsqueeze(0)

    def blend(self, fused: torch.Tensor) -> torch.Tensor:
        return self.blender(fused)

    def synthesize(self, video: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
        """video (T_v, D_v) + faces (K, D_f) -> log-mel (r*T_v, mel_bins)."""
        content = self.encode_content(video)
        identity = self.encode_faces(faces)
        return self.blend(self.fuse(content, identity))

    @property
    def receptive_field(self):
        return self.content_encoder.receptive_field

    def parameter_blocks(self) -> dict:
        """Named top-level blocks; used by the gradient-reachability check."""
        return {
            "content_encoder": self.content_encoder,
            "adapter_v": self.adapter_v,
            "face_encoder": self.face_encoder,
            "adapter_f": self.adapter_f,
            "speech_encoder": self.speech_encoder,
            "adapter_a": self.adapter_a,
            "blender": self.blender,
        }


def build_model(cfg: ModelConfig, seed: int = 0) -> SilentVoiceModel:
    """Construct with deterministic initialization for a given seed."""
    cfg.validate()
    torch.manual_seed(seed)
    model = SilentVoiceModel(cfg)
    model.eval()
    return model
