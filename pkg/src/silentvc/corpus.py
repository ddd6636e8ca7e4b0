"""Synthetic multi-speaker corpus: generation, on-disk format, loading, batching.

Each speaker carries two ground-truth latents: an additive log-mel spectral
tilt (the "voice") and a face code (the "look").  Utterances are hold-walks
over a token vocabulary; every token has a fixed mel pattern and a fixed
video-feature pattern.  Because identity enters the mel grid purely additively,
a linear oracle can recover it from any synthesized spectrogram, which is what
makes conversion quality measurable without a pretrained speaker encoder.

Corpus layout on disk::

    <root>/manifest.json            index + token_pattern_mean (synthetic mode)
    <root>/speakers.json            speaker_id -> {tilt, face_code}
    <root>/patterns.json            token mel/video patterns (synthetic mode)
    <root>/utt/<utt_id>/video.f32   T_v x D_v   (+ video.shape.json)
    <root>/utt/<utt_id>/mel.f32     T_m x 80    (+ mel.shape.json)
    <root>/utt/<utt_id>/face_<k>.f32  D_f       (+ face_<k>.shape.json)
    <root>/utt/<utt_id>/tokens.json  token sequence (synthetic mode)
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .arrayio import read_f32, write_f32
from .errors import DataError

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class GenConfig:
    """Knobs for synthetic corpus generation; defaults give a trainable,
    non-degenerate task with high oracle SNR."""

    speakers: int = 20
    utts_per_speaker: int = 50
    vocab: int = 32
    video_dim: int = 32
    face_dim: int = 16
    frames_min: int = 30
    frames_max: int = 60
    faces_min: int = 4
    faces_max: int = 12
    hold_min: int = 2
    hold_max: int = 5
    sigma_video: float = 0.1
    sigma_face: float = 0.1
    sigma_mel: float = 0.05
    tilt_scale: float = 1.0
    identity_leak: float = 0.25
    mel_bins: int = 80
    mel_per_video_frame: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.speakers < 2:
            raise ValueError(f"need at least 2 speakers, got {self.speakers}")
        if self.vocab < 2:
            raise ValueError(f"need a token vocabulary of at least 2, got {self.vocab}")
        for name in ("utts_per_speaker", "video_dim", "face_dim", "mel_bins",
                     "mel_per_video_frame"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (1 <= self.frames_min <= self.frames_max):
            raise ValueError(f"bad frame range [{self.frames_min}, {self.frames_max}]")
        if not (1 <= self.faces_min <= self.faces_max):
            raise ValueError(f"bad face-count range [{self.faces_min}, {self.faces_max}]")
        if not (1 <= self.hold_min <= self.hold_max):
            raise ValueError(f"bad hold range [{self.hold_min}, {self.hold_max}]")
        for name in ("sigma_video", "sigma_face", "sigma_mel", "tilt_scale",
                     "identity_leak"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    tilt: np.ndarray        # (mel_bins,) additive log-mel envelope
    face_code: np.ndarray   # (face_dim,)


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    speaker_id: str
    video: np.ndarray       # (T_v, video_dim)
    faces: np.ndarray       # (K, face_dim)
    mel: np.ndarray         # (r * T_v, mel_bins)
    tokens: Optional[np.ndarray] = None  # (T_v,) synthetic mode only

    @property
    def n_frames(self) -> int:
        return self.video.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]


@dataclass(frozen=True)
class UttEntry:
    utt_id: str
    speaker_id: str
    n_frames: int
    n_faces: int


@dataclass
class CorpusManifest:
    version: int
    mel_bins: int
    mel_per_video_frame: int
    video_dim: int
    face_dim: int
    entries: list = field(default_factory=list)
    token_pattern_mean: Optional[np.ndarray] = None  # synthetic mode only

    @property
    def synthetic(self) -> bool:
        return self.token_pattern_mean is not None

    def to_json(self) -> dict:
        out = {
            "version": self.version,
            "mel_bins": self.mel_bins,
            "mel_per_video_frame": self.mel_per_video_frame,
            "video_dim": self.video_dim,
            "face_dim": self.face_dim,
            "utterances": [asdict(e) for e in self.entries],
        }
        if self.token_pattern_mean is not None:
            out["token_pattern_mean"] = [float(x) for x in self.token_pattern_mean]
        return out

    @classmethod
    def from_json(cls, data: dict) -> "CorpusManifest":
        if data.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {data.get('version')!r}")
        tpm = data.get("token_pattern_mean")
        return cls(
            version=data["version"],
            mel_bins=data["mel_bins"],
            mel_per_video_frame=data["mel_per_video_frame"],
            video_dim=data["video_dim"],
            face_dim=data["face_dim"],
            entries=[UttEntry(**e) for e in data["utterances"]],
            token_pattern_mean=None if tpm is None else np.asarray(tpm, dtype=np.float64),
        )


def moving_average(x: np.ndarray, window: int = 5) -> np.ndarray:
    """Same-length moving average with zero padding at the edges."""
    kernel = np.ones(window, dtype=np.float64) / window
    return np.convolve(np.asarray(x, dtype=np.float64), kernel, mode="same")


def hold_walk(rng: np.random.Generator, vocab: int, n_frames: int,
              hold_min: int = 2, hold_max: int = 5) -> np.ndarray:
    """Token sequence where each uniformly drawn token is held for a uniform
    number of frames, truncated to exactly `n_frames`."""
    tokens = []
    while len(tokens) < n_frames:
        z = int(rng.integers(0, vocab))
        hold = int(rng.integers(hold_min, hold_max + 1))
        tokens.extend([z] * hold)
    return np.asarray(tokens[:n_frames], dtype=np.int64)


def synth_utterance(
    tokens: np.ndarray,
    tilt: np.ndarray,
    face_code: np.ndarray,
    mel_patterns: np.ndarray,
    video_patterns: np.ndarray,
    leak_video: np.ndarray,
    n_faces: int,
    sigma_video: float,
    sigma_face: float,
    sigma_mel: float,
    mel_per_video_frame: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one utterance's (video, faces, mel) from its latents.

    `leak_video` is the speaker-constant identity component added to every
    video frame; pass zeros for identity-free video features.
    """
    t_v = len(tokens)
    r = mel_per_video_frame
    video = video_patterns[tokens] + leak_video[None, :]
    video = video + sigma_video * rng.standard_normal(video.shape)
    faces = face_code[None, :] + sigma_face * rng.standard_normal(
        (n_faces, face_code.shape[0]))
    mel = np.repeat(mel_patterns[tokens], r, axis=0) + tilt[None, :]
    mel = mel + sigma_mel * rng.standard_normal((r * t_v, tilt.shape[0]))
    return video, faces, mel


def generate_corpus(cfg: GenConfig, out_dir) -> CorpusManifest:
    """Generate a corpus under `out_dir`. Deterministic for a fixed config
    (same seed twice gives byte-identical directories)."""
    cfg.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    profiles = []
    for s in range(cfg.speakers):
        tilt = cfg.tilt_scale * moving_average(rng.standard_normal(cfg.mel_bins))
        face_code = rng.standard_normal(cfg.face_dim)
        profiles.append(SpeakerProfile(f"spk{s:03d}", tilt, face_code))

    mel_patterns = rng.standard_normal((cfg.vocab, cfg.mel_bins))
    video_patterns = rng.standard_normal((cfg.vocab, cfg.video_dim))
    leak_proj = rng.standard_normal((cfg.face_dim, cfg.video_dim)) / np.sqrt(cfg.face_dim)

    entries = []
    pattern_sum = np.zeros(cfg.mel_bins, dtype=np.float64)
    total_frames = 0
    for profile in profiles:
        leak_video = cfg.identity_leak * (profile.face_code @ leak_proj)
        for u in range(cfg.utts_per_speaker):
            utt_id = f"{profile.speaker_id}_u{u:03d}"
            t_v = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
            n_faces = int(rng.integers(cfg.faces_min, cfg.faces_max + 1))
            tokens = hold_walk(rng, cfg.vocab, t_v, cfg.hold_min, cfg.hold_max)
            video, faces, mel = synth_utterance(
                tokens, profile.tilt, profile.face_code,
                mel_patterns, video_patterns, leak_video,
                n_faces, cfg.sigma_video, cfg.sigma_face, cfg.sigma_mel,
                cfg.mel_per_video_frame, rng,
            )
            pattern_sum += mel_patterns[tokens].sum(axis=0)
            total_frames += t_v

            utt_dir = root / "utt" / utt_id
            utt_dir.mkdir(parents=True, exist_ok=True)
            write_f32(utt_dir / "video.f32", video)
            write_f32(utt_dir / "mel.f32", mel)
            for k in range(n_faces):
                write_f32(utt_dir / f"face_{k}.f32", faces[k])
            (utt_dir / "tokens.json").write_text(
                json.dumps([int(z) for z in tokens]), encoding="utf-8")
            entries.append(UttEntry(utt_id, profile.speaker_id, t_v, n_faces))

    manifest = CorpusManifest(
        version=MANIFEST_VERSION,
        mel_bins=cfg.mel_bins,
        mel_per_video_frame=cfg.mel_per_video_frame,
        video_dim=cfg.video_dim,
        face_dim=cfg.face_dim,
        entries=entries,
        token_pattern_mean=pattern_sum / total_frames,
    )
    (root / "manifest.json").write_text(
        json.dumps(manifest.to_json(), indent=1), encoding="utf-8")
    (root / "speakers.json").write_text(
        json.dumps({
            p.speaker_id: {
                "tilt": [float(x) for x in p.tilt],
                "face_code": [float(x) for x in p.face_code],
            } for p in profiles
        }, indent=1), encoding="utf-8")
    (root / "patterns.json").write_text(
        json.dumps({
            "mel_patterns": mel_patterns.tolist(),
            "video_patterns": video_patterns.tolist(),
            "leak_projection": leak_proj.tolist(),
            "identity_leak": cfg.identity_leak,
        }), encoding="utf-8")
    return manifest


class Corpus:
    """Loaded view of a corpus directory.

    With `preload=True` (default) every utterance is read and shape-checked
    up front and batch iteration is pure in-memory work.
    """

    def __init__(self, root, manifest: CorpusManifest,
                 speakers: Optional[dict] = None, preload: bool = True):
        self.root = Path(root)
        self.manifest = manifest
        self.speakers = speakers
        self._by_id = {e.utt_id: e for e in manifest.entries}
        self._cache: dict[str, Utterance] = {}
        if preload:
            for entry in manifest.entries:
                self._cache[entry.utt_id] = self._read(entry)

    @classmethod
    def load(cls, root, preload: bool = True) -> "Corpus":
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no manifest.json under {root}")
        try:
            manifest = CorpusManifest.from_json(
                json.loads(manifest_path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"corrupt manifest {manifest_path}: {exc}") from exc
        speakers = None
        speakers_path = root / "speakers.json"
        if speakers_path.exists():
            raw = json.loads(speakers_path.read_text(encoding="utf-8"))
            speakers = {
                sid: SpeakerProfile(
                    sid,
                    np.asarray(rec["tilt"], dtype=np.float64),
                    np.asarray(rec["face_code"], dtype=np.float64),
                ) for sid, rec in raw.items()
            }
        return cls(root, manifest, speakers, preload=preload)

    def __len__(self) -> int:
        return len(self.manifest.entries)

    @property
    def utt_ids(self) -> list:
        return [e.utt_id for e in self.manifest.entries]

    def entry(self, utt_id: str) -> UttEntry:
        try:
            return self._by_id[utt_id]
        except KeyError:
            raise DataError(f"unknown utterance {utt_id!r}") from None

    def load_utterance(self, utt_id: str) -> Utterance:
        if utt_id not in self._cache:
            self._cache[utt_id] = self._read(self.entry(utt_id))
        return self._cache[utt_id]

    def _read(self, entry: UttEntry) -> Utterance:
        m = self.manifest
        utt_dir = self.root / "utt" / entry.utt_id
        video = read_f32(utt_dir / "video.f32")
        if video.shape != (entry.n_frames, m.video_dim):
            raise DataError(
                f"{utt_dir / 'video.f32'}: shape {video.shape} does not match "
                f"manifest ({entry.n_frames}, {m.video_dim})")
        mel = read_f32(utt_dir / "mel.f32")
        want_mel = (m.mel_per_video_frame * entry.n_frames, m.mel_bins)
        if mel.shape != want_mel:
            raise DataError(
                f"{utt_dir / 'mel.f32'}: shape {mel.shape} does not match "
                f"manifest {want_mel}")
        faces = np.empty((entry.n_faces, m.face_dim), dtype=np.float32)
        for k in range(entry.n_faces):
            face = read_f32(utt_dir / f"face_{k}.f32")
            if face.shape != (m.face_dim,):
                raise DataError(
                    f"{utt_dir / f'face_{k}.f32'}: shape {face.shape} does not "
                    f"match manifest ({m.face_dim},)")
            faces[k] = face
        tokens = None
        tokens_path = utt_dir / "tokens.json"
        if tokens_path.exists():
            tokens = np.asarray(
                json.loads(tokens_path.read_text(encoding="utf-8")), dtype=np.int64)
        if not (np.isfinite(video).all() and np.isfinite(mel).all()
                and np.isfinite(faces).all()):
            raise DataError(f"non-finite values in utterance {entry.utt_id}")
        return Utterance(entry.utt_id, entry.speaker_id, video, faces, mel, tokens)


def face_sample_indices(n_faces: int, max_images: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Indices for sampling up to `max_images` face rows.

    With enough faces, draws `max_images` distinct rows.  With fewer, uses
    every face in full passes and tops up the remainder with distinct
    resamples (5 faces against 16 slots -> three full passes plus one
    extra draw).
    """
    if n_faces <= 0:
        raise ValueError("need at least one face row")
    if n_faces >= max_images:
        return rng.choice(n_faces, size=max_images, replace=False)
    reps, remainder = divmod(max_images, n_faces)
    idx = np.tile(np.arange(n_faces), reps)
    if remainder:
        idx = np.concatenate([idx, rng.choice(n_faces, size=remainder, replace=False)])
    return idx


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic utterance permutation for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def batch_for_step(corpus: Corpus, batch_size: int, seed: int,
                   step: int) -> list:
    """The batch a sequential run would see at `step`; stateless, so a
    resumed run reproduces the uninterrupted stream exactly."""
    n = len(corpus)
    bpe = batches_per_epoch(n, batch_size)
    epoch, idx = divmod(step, bpe)
    order = epoch_order(n, seed, epoch)
    chosen = order[idx * batch_size:(idx + 1) * batch_size]
    ids = corpus.utt_ids
    return [corpus.load_utterance(ids[i]) for i in chosen]


def iter_batches(corpus: Corpus, batch_size: int, seed: int,
                 epochs: Optional[int] = None) -> Iterator[list]:
    """Stream utterance groups; within an epoch every utterance appears
    exactly once and ordering is deterministic per (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(corpus)
    bpe = batches_per_epoch(n, batch_size)
    epoch = 0
    while epochs is None or epoch < epochs:
        for idx in range(bpe):
            yield batch_for_step(corpus, batch_size, seed, epoch * bpe + idx)
        epoch += 1
