"""A small decoder-only vision-language transformer.

Visual tokens come from a learned linear projection of flattened image
patches; text tokens from an embedding table.  Blocks are pre-norm with
multi-head causal attention and a GELU MLP.  Every post-softmax attention
matrix is returned so that the attention loss can be taken on exactly the
weights used in the forward pass.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from . import vocab
from .tensor import Tensor
from .textfmt import dump_kv, load_kv

MAGIC = b"KLALCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    vocab_size: int = vocab.VOCAB_SIZE
    patch: int = 8
    grid_rows: int = 8
    grid_cols: int = 8
    max_seq: int = 96
    mlp_ratio: int = 4
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def n_visual(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    def to_text(self) -> str:
        return dump_kv(asdict(self))

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        raw = load_kv(text)
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(kinds)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**{k: (v if kinds[k] in ("str", str) else int(v)) for k, v in raw.items()})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in checkpoint order."""
    d, f = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    shapes = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq, d),
        "patch_w": (cfg.patch_dim, d),
        "patch_b": (d,),
        "patch_pos": (cfg.n_visual, d),
    }
    for l in range(cfg.layers):
        shapes.update(
            {
                f"l{l}.ln1_g": (d,),
                f"l{l}.ln1_b": (d,),
                f"l{l}.wq": (d, d),
                f"l{l}.wk": (d, d),
                f"l{l}.wv": (d, d),
                f"l{l}.wo": (d, d),
                f"l{l}.ln2_g": (d,),
                f"l{l}.ln2_b": (d,),
                f"l{l}.w1": (d, f),
                f"l{l}.b1": (f,),
                f"l{l}.w2": (f, d),
                f"l{l}.b2": (d,),
            }
        )
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "head_w": (d, cfg.vocab_size), "head_b": (cfg.vocab_size,)})
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    resid_scale = 1.0 / math.sqrt(2 * cfg.layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
            if leaf in ("wo", "w2"):
                arr *= resid_scale
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


class ForwardOutput(NamedTuple):
    logits: Tensor  # (B, T, V)
    attentions: list[Tensor]  # per layer, (B, H, T, T)
    hidden: Tensor  # residual stream after the last block, (B, T, d)


def images_to_patches(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, H, W, 3) uint8 -> (B, n_visual, patch*patch*3) floats in [0, 1]."""
    images = np.asarray(images)
    b, h, w, c = images.shape
    p = cfg.patch
    if (h, w, c) != (cfg.grid_rows * p, cfg.grid_cols * p, 3):
        raise ValueError(f"image shape {(h, w, c)} does not match config grid {cfg.grid_rows}x{cfg.grid_cols} of {p}px patches")
    x = images.reshape(b, cfg.grid_rows, p, cfg.grid_cols, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, cfg.n_visual, cfg.patch_dim).astype(cfg.dtype) / 255.0


class ToyVLM:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        expected = param_shapes(cfg)
        if list(self.params) != list(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> ToyVLM:
        return ToyVLM(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})

    def patchify(self, images: np.ndarray) -> Tensor:
        p = self.params
        x = Tensor(images_to_patches(images, self.cfg))
        return x @ p["patch_w"] + p["patch_b"] + p["patch_pos"]

    def forward(self, tokens: np.ndarray, images: np.ndarray, visual_start: int) -> ForwardOutput:
        cfg, p = self.cfg, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
            images = np.asarray(images)[None]
        b, n = tokens.shape
        if n > cfg.max_seq:
            raise ValueError(f"sequence of {n} tokens exceeds max_seq {cfg.max_seq}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token id outside vocabulary of {cfg.vocab_size}")
        ve = visual_start + cfg.n_visual
        if ve > n:
            raise ValueError("visual span does not fit in the sequence")
        text = T.embedding_lookup(p["tok_emb"], tokens)
        vis = self.patchify(images)
        x = T.concat([text[:, :visual_start], vis, text[:, ve:]], axis=1) + p["pos_emb"][:n]
        causal = np.tril(np.ones((n, n), dtype=bool))
        attentions = []
        for l in range(cfg.layers):
            x, attn = self._block(x, l, causal)
            attentions.append(attn)
        hidden = x
        x = T.layer_norm(x, p["lnf_g"], p["lnf_b"])
        logits = x @ p["head_w"] + p["head_b"]
        return ForwardOutput(logits, attentions, hidden)

    def _block(self, x: Tensor, l: int, causal: np.ndarray) -> tuple[Tensor, Tensor]:
        p, cfg = self.params, self.cfg
        b, n, d = x.shape
        hd, dk = cfg.heads, cfg.d_head
        h = T.layer_norm(x, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, n, hd, dk).transpose(0, 2, 1, 3)

        q = split(h @ p[f"l{l}.wq"])
        k = split(h @ p[f"l{l}.wk"])
        v = split(h @ p[f"l{l}.wv"])
        scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dk))
        attn = T.softmax_rows(scores, causal)
        mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        x = x + mixed @ p[f"l{l}.wo"]
        h = T.layer_norm(x, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
        h = T.gelu(h @ p[f"l{l}.w1"] + p[f"l{l}.b1"]) @ p[f"l{l}.w2"] + p[f"l{l}.b2"]
        return x + h, attn

    def greedy_decode(self, prefix: np.ndarray, images: np.ndarray, visual_start: int, max_new: int = 4) -> list[list[int]]:
        """Argmax decoding (ties go to the lower id) until EOS or ``max_new``.

        ``prefix`` is (B, P) with a shared length; returned answers exclude EOS.
        """
        seq = np.asarray(prefix, dtype=np.int64)
        if seq.ndim == 1:
            seq = seq[None]
            images = np.asarray(images)[None]
        done = np.zeros(len(seq), dtype=bool)
        answers: list[list[int]] = [[] for _ in range(len(seq))]
        with T.no_grad():
            for _ in range(max_new):
                if seq.shape[1] >= self.cfg.max_seq:
                    break
                logits = self.forward(seq, images, visual_start).logits.data[:, -1]
                nxt = np.argmax(logits, axis=-1)
                for i, tok in enumerate(nxt):
                    if not done[i]:
                        if tok == vocab.EOS:
                            done[i] = True
                        else:
                            answers[i].append(int(tok))
                if done.all():
                    break
                seq = np.concatenate([seq, nxt[:, None]], axis=1)
        return answers


# -- checkpoints ------------------------------------------------------------------
class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared content."""


class CheckpointNameError(CheckpointError):
    """Stored parameter names differ from the configuration's."""


def save_checkpoint(model: ToyVLM, path) -> None:
    cfg_text = model.cfg.to_text().encode("utf-8")
    out = [MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(cfg_text)), cfg_text]
    out.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> ToyVLM:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointVersionError("not a KLAL checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    cfg = ModelConfig.from_text(r.take(r.u32()).decode("utf-8"))
    expected = param_shapes(cfg)
    count = r.u32()
    if count != len(expected):
        raise CheckpointNameError(f"checkpoint stores {count} arrays, config declares {len(expected)}")
    params = {}
    for want, shape in expected.items():
        name = r.take(r.u32()).decode("utf-8")
        if name != want:
            raise CheckpointNameError(f"expected array {want!r}, found {name!r}")
        ndim = r.u32()
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        if dims != shape:
            raise CheckpointNameError(f"{name}: stored shape {dims}, config implies {shape}")
        arr = np.frombuffer(r.take(8 * int(np.prod(dims))), dtype="<f8").reshape(dims)
        params[name] = Tensor(arr.astype(cfg.dtype), requires_grad=True)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after the last array")
    return ToyVLM(cfg, params)
