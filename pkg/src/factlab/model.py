"""Small decoder-only autoregressive LM with exact log-probabilities.

Pre-norm residual blocks, learned absolute positions, untied output head,
no dropout: forward and backward are bit-deterministic for fixed inputs.
All probabilities live in the log domain (log_softmax) because answer
probabilities down to ~1e-33 must survive.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

_DTYPES = {"f32": torch.float32, "f64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    precision: str = "f32"
    init_seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.heads
        y = self.ln1(x)
        q, k, v = self.qkv(y).split(d, dim=-1)
        q = q.view(b, t, h, d // h).transpose(1, 2)
        k = k.view(b, t, h, d // h).transpose(1, 2)
        v = v.view(b, t, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.attn_out(y)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class TransformerLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.model_dim)
        self.pos_emb = nn.Embedding(config.context_len, config.model_dim)
        self.blocks = nn.ModuleList(
            Block(config.model_dim, config.heads, config.mlp_ratio) for _ in range(config.layers)
        )
        self.ln_f = nn.LayerNorm(config.model_dim)
        self.head = nn.Linear(config.model_dim, config.vocab_size)
        self.to(config.dtype)
        self._init_weights()

    def _init_weights(self):
        gen = torch.Generator().manual_seed(self.config.init_seed)
        scale = 0.02
        resid_scale = scale / math.sqrt(2 * self.config.layers)
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                std = resid_scale if name.endswith(("attn_out.weight", "fc2.weight")) else scale
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
            elif "ln" in name and name.endswith("weight"):
                nn.init.ones_(p)
            else:
                nn.init.zeros_(p)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens (B, T) -> logits (B, T, V)."""
        b, t = tokens.shape
        if t > self.config.context_len:
            raise ValueError(f"sequence length {t} exceeds context_len {self.config.context_len}")
        pos = torch.arange(t, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    def logprob_rows(self, tokens: list[int]) -> torch.Tensor:
        """(T, V) log-probability rows; row t conditions on tokens[..t]."""
        with torch.no_grad():
            logits = self(torch.tensor([tokens], dtype=torch.long))
        return F.log_softmax(logits[0], dim=-1)

    def next_logprobs(self, prefixes: list[list[int]]) -> torch.Tensor:
        """(B, V) log-probabilities of the next token, one row per prefix.
        Prefixes must share a length; only the last position is projected."""
        with torch.no_grad():
            toks = torch.tensor(prefixes, dtype=torch.long)
            b, t = toks.shape
            if t > self.config.context_len:
                raise ValueError(f"prefix length {t} exceeds context_len {self.config.context_len}")
            pos = torch.arange(t)
            x = self.tok_emb(toks) + self.pos_emb(pos)
            for block in self.blocks:
                x = block(x)
            logits = self.head(self.ln_f(x[:, -1]))
        return F.log_softmax(logits, dim=-1)


def sequence_logprob(model: TransformerLM, prompt: list[int], continuation: list[int]) -> float:
    """Sum of conditional log-probabilities of the continuation tokens (nats)."""
    if not continuation:
        raise ValueError("continuation must be non-empty")
    if not prompt:
        raise ValueError("prompt must contain at least one token (e.g. BOS)")
    rows = model.logprob_rows(prompt + continuation)
    total = 0.0
    for i, tok in enumerate(continuation):
        total += rows[len(prompt) - 1 + i, tok].item()
    return total


# -- checkpoint container -----------------------------------------------------
# magic, u64 header length, JSON header, little-endian tensor payloads,
# sha256 of everything preceding the digest.

_MAGIC = b"FLCKPT01"


def save_checkpoint(path, model: TransformerLM, step: int = 0, rng_state: dict | None = None) -> None:
    tensors = []
    payloads = []
    offset = 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy()
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        tensors.append(
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset, "nbytes": len(blob)}
        )
        payloads.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"config": asdict(model.config), "step": step, "rng_state": rng_state or {}, "tensors": tensors},
        sort_keys=True,
    ).encode()
    body = _MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payloads)
    with open(path, "wb") as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())


def load_checkpoint(path) -> tuple[TransformerLM, int, dict]:
    import numpy as np

    with open(path, "rb") as f:
        data = f.read()
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"checkpoint {path} failed integrity check")
    if body[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16 : 16 + hlen])
    payload = body[16 + hlen :]
    model = TransformerLM(ModelConfig(**header["config"]))
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(
            payload, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)) if t["shape"] else 1,
            offset=t["offset"],
        ).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, header["step"], header["rng_state"]


def checkpoint_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
