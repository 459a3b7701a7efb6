"""Chunk encoders: map a complex operator-input slab to a short real key.

Two variants share one interface:

``projection``
    A seeded Gaussian random projection of the stacked real/imaginary planes
    (entries ``N(0, 1) / sqrt(key_dim)``).  Linear, so identical chunks give
    identical keys and scaling a chunk scales its key.
``cnn``
    Two strided convolutions (32 filters 5x5, 64 filters 3x3), a fixed 4x4
    adaptive average pool and a fully connected layer to ``key_dim``.  A slab
    of shape ``(k, a, b)`` is fed as a 2-channel image of shape ``(k*a, b)``.
    Trained with the contrastive distance-matching loss
    ``| ||z_a - z_b|| - ||ch_a - ch_b|| |`` on unit-norm chunks.
"""

from __future__ import annotations

import io
import logging
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

OPERATOR_IDS = ("fu1d", "fu2d", "fu1d_adj", "fu2d_adj", "f2d", "f2d_adj")
VARIANTS = ("projection", "cnn")

_LENC_MAGIC = b"LENC"
_LENC_VERSION = 1


class UnregisteredShape(ValueError):
    pass


@dataclass
class EncoderConfig:
    key_dim: int = 60
    variant: str = "projection"
    seed: int = 0
    conv1_filters: int = 32
    conv1_size: int = 5
    conv2_filters: int = 64
    conv2_size: int = 3
    epochs: int = 20
    learning_rate: float = 1e-3
    n_pairs: int = 200
    batch_size: int = 16

    def __post_init__(self):
        if self.key_dim < 2:
            raise ValueError("key_dim must be >= 2")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


@dataclass(frozen=True, eq=False)
class MemoKey:
    vector: np.ndarray
    location: object = None
    op_id: str = "fu1d"
    input_norm: float = float("nan")  # Frobenius norm of the encoded chunk

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector.astype(np.float64)))


def complex_split(chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary planes of a complex slab (copies)."""
    chunk = np.asarray(chunk)
    return np.array(chunk.real, dtype=np.float64), np.array(chunk.imag, dtype=np.float64)


def complex_join(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    out = np.empty(re.shape, dtype=np.complex128)
    out.real = re
    out.imag = im
    return out


def _registration(op_id: str, shape: Sequence[int]) -> str:
    return f"{op_id}:{'x'.join(str(int(s)) for s in shape)}"


class ProjectionEncoder:
    """Seeded random projection, one matrix per (operator, slab shape)."""

    variant = "projection"

    def __init__(self, cfg: EncoderConfig | None = None, auto_register: bool = True):
        self.cfg = cfg or EncoderConfig()
        self.auto_register = auto_register
        self._mats: dict[str, np.ndarray] = {}

    @property
    def key_dim(self) -> int:
        return self.cfg.key_dim

    def register(self, shape: Sequence[int], op_id: str) -> None:
        name = _registration(op_id, shape)
        if name in self._mats:
            return
        n = 2 * int(np.prod(shape))
        ss = np.random.SeedSequence([self.cfg.seed, zlib.crc32(name.encode())])
        rng = np.random.default_rng(ss)
        mat = rng.standard_normal((self.key_dim, n)) / np.sqrt(self.key_dim)
        # keep the f32-rounded matrix so a weights-file round trip is exact
        self._mats[name] = mat.astype(np.float32).astype(np.float64)

    def is_registered(self, shape, op_id) -> bool:
        return _registration(op_id, shape) in self._mats

    def encode(self, chunk: np.ndarray, op_id: str = "fu1d", location=None) -> MemoKey:
        chunk = np.asarray(chunk)
        name = _registration(op_id, chunk.shape)
        if name not in self._mats:
            if not self.auto_register:
                raise UnregisteredShape(f"shape {chunk.shape} for {op_id} is not registered")
            self.register(chunk.shape, op_id)
        re, im = complex_split(chunk)
        flat = np.concatenate([re.ravel(), im.ravel()])
        key = (self._mats[name] @ flat).astype(np.float32)
        return MemoKey(key, location, op_id, float(np.linalg.norm(flat)))

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: m.astype(np.float32) for name, m in self._mats.items()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self._mats = {name: t.astype(np.float64) for name, t in tensors.items()}


def _torch():
    import torch

    return torch


def _build_cnn(cfg: EncoderConfig):
    torch = _torch()
    nn = torch.nn
    return nn.Sequential(
        nn.Conv2d(2, cfg.conv1_filters, cfg.conv1_size, stride=2, padding=cfg.conv1_size // 2),
        nn.ReLU(),
        nn.Conv2d(cfg.conv1_filters, cfg.conv2_filters, cfg.conv2_size, stride=2,
                  padding=cfg.conv2_size // 2),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(4),
        nn.Flatten(),
        nn.Linear(cfg.conv2_filters * 16, cfg.key_dim),
    )


def _as_image(chunk: np.ndarray) -> np.ndarray:
    """``(k, a, b)`` complex slab -> ``(2, k*a, b)`` float32 image."""
    chunk = np.asarray(chunk)
    if chunk.ndim == 2:
        chunk = chunk[None]
    k, a, b = chunk.shape
    re, im = complex_split(chunk.reshape(k * a, b))
    return np.stack([re, im]).astype(np.float32)


def _unit(chunk: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(chunk)
    return chunk / n if n > 0 else chunk


class CnnEncoder:
    """Convolutional encoder; inputs are scaled to unit norm before encoding."""

    variant = "cnn"

    def __init__(self, cfg: EncoderConfig | None = None):
        torch = _torch()
        self.cfg = cfg or EncoderConfig(variant="cnn")
        torch.manual_seed(self.cfg.seed)
        self.net = _build_cnn(self.cfg).float()
        self.net.eval()
        self._shapes: set = set()

    @property
    def key_dim(self) -> int:
        return self.cfg.key_dim

    def register(self, shape, op_id: str = "fu1d") -> None:
        self._shapes.add(_registration(op_id, shape))

    def embed(self, images):
        """Batch of ``(2, H, W)`` float32 images -> ``(n, key_dim)`` tensor."""
        return self.net(images)

    def encode(self, chunk: np.ndarray, op_id: str = "fu1d", location=None) -> MemoKey:
        torch = _torch()
        chunk = np.asarray(chunk)
        if not np.any(chunk):
            return MemoKey(np.zeros(self.key_dim, np.float32), location, op_id, 0.0)
        with torch.no_grad():
            img = torch.from_numpy(_as_image(_unit(chunk)))[None]
            z = self.embed(img)[0].numpy().astype(np.float32)
        return MemoKey(z, location, op_id, float(np.linalg.norm(chunk)))

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().astype(np.float32)
                for k, v in self.net.state_dict().items()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        torch = _torch()
        self.net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})


def make_encoder(cfg: EncoderConfig | None = None):
    cfg = cfg or EncoderConfig()
    return CnnEncoder(cfg) if cfg.variant == "cnn" else ProjectionEncoder(cfg)


# --- contrastive training -------------------------------------------------

def pair_loss(z_a: np.ndarray, z_b: np.ndarray, ch_a: np.ndarray, ch_b: np.ndarray) -> float:
    """Distance-matching loss for one pair (exact; ``(x, x)`` gives 0)."""
    dz = np.linalg.norm(np.asarray(z_a, np.float64) - np.asarray(z_b, np.float64))
    dc = np.linalg.norm(np.asarray(ch_a) - np.asarray(ch_b))
    return abs(dz - dc)


def _pair_tensors(pairs):
    torch = _torch()
    a = np.stack([_as_image(_unit(p[0])) for p in pairs])
    b = np.stack([_as_image(_unit(p[1])) for p in pairs])
    labels = np.array([np.linalg.norm(_unit(p[0]) - _unit(p[1])) for p in pairs], np.float32)
    return torch.from_numpy(a), torch.from_numpy(b), torch.from_numpy(labels)


def evaluate_pairs(encoder: CnnEncoder, pairs) -> float:
    """Mean contrastive loss over ``pairs`` (no gradient)."""
    if not pairs:
        return float("nan")
    torch = _torch()
    a, b, labels = _pair_tensors(pairs)
    with torch.no_grad():
        dz = torch.linalg.vector_norm(encoder.embed(a) - encoder.embed(b), dim=1)
        return float(torch.mean(torch.abs(dz - labels)))


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    heldout_loss: list = field(default_factory=list)


def train_contrastive(sample_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                      cfg: EncoderConfig | None = None,
                      heldout_pairs: Sequence | None = None,
                      encoder: CnnEncoder | None = None):
    """Fit a CNN encoder so key distances track chunk distances.

    Returns ``(encoder, history)``; ``history`` entry 0 is the loss of the
    untrained network and entry ``e`` the loss after epoch ``e``.
    """
    torch = _torch()
    cfg = cfg or EncoderConfig(variant="cnn")
    if len(sample_pairs) < 2:
        raise ValueError("need at least two training pairs")
    if encoder is None:
        encoder = CnnEncoder(EncoderConfig(**{**cfg.__dict__, "variant": "cnn"}))
    heldout_pairs = list(heldout_pairs or [])
    a, b, labels = _pair_tensors(sample_pairs)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(encoder.net.parameters(), lr=cfg.learning_rate)
    hist = TrainingHistory()
    hist.train_loss.append(evaluate_pairs(encoder, sample_pairs))
    hist.heldout_loss.append(evaluate_pairs(encoder, heldout_pairs))
    n = len(sample_pairs)
    for epoch in range(1, cfg.epochs + 1):
        encoder.net.train()
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            dz = torch.linalg.vector_norm(encoder.embed(a[idx]) - encoder.embed(b[idx]), dim=1)
            loss = torch.mean(torch.abs(dz - labels[idx]))
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite contrastive loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        encoder.net.eval()
        hist.train_loss.append(total / n)
        hist.heldout_loss.append(evaluate_pairs(encoder, heldout_pairs))
        logger.info("epoch %d train %.4g heldout %.4g", epoch, hist.train_loss[-1],
                    hist.heldout_loss[-1])
    return encoder, hist


def sample_pairs(trajectories: dict, n_pairs: int, seed: int = 0) -> list:
    """Draw (same-location, different-iteration) chunk pairs.

    ``trajectories`` maps a location to the list of slabs recorded there
    over successive iterations.
    """
    rng = np.random.default_rng(seed)
    locs = [k for k, v in trajectories.items() if len(v) >= 2]
    if not locs:
        raise ValueError("every location needs at least two recorded iterations")
    pairs = []
    for _ in range(n_pairs):
        seq = trajectories[locs[rng.integers(len(locs))]]
        i, j = rng.choice(len(seq), size=2, replace=False)
        pairs.append((seq[i], seq[j]))
    return pairs


# --- weights file -----------------------------------------------------------

def save_weights(path, encoder) -> None:
    """Write ``encoder`` as an LENC weights file."""
    tensors = encoder.tensors()
    buf = io.BytesIO()
    buf.write(_LENC_MAGIC)
    buf.write(struct.pack("<HBI", _LENC_VERSION, VARIANTS.index(encoder.variant), encoder.key_dim))
    buf.write(struct.pack("<Q", encoder.cfg.seed))
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_weights(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != _LENC_MAGIC:
        raise ValueError("not an LENC weights file")
    version, variant, key_dim = struct.unpack("<HBI", buf.read(7))
    if version != _LENC_VERSION:
        raise ValueError(f"unsupported LENC version {version}")
    (seed,) = struct.unpack("<Q", buf.read(8))
    (count,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(shape).copy()
    kind = VARIANTS[variant]
    if kind == "cnn":
        w1 = tensors["0.weight"]
        w2 = tensors["2.weight"]
        cfg = EncoderConfig(key_dim=key_dim, variant="cnn", seed=seed,
                            conv1_filters=w1.shape[0], conv1_size=w1.shape[2],
                            conv2_filters=w2.shape[0], conv2_size=w2.shape[2])
        enc = CnnEncoder(cfg)
    else:
        enc = ProjectionEncoder(EncoderConfig(key_dim=key_dim, seed=seed))
    enc.load_tensors(tensors)
    return enc
