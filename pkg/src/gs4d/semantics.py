"""Language-aligned feature pathway: 64->512 decoder, text-embedding bank,
classification and open-vocabulary querying.

Text embeddings and teacher feature maps are input artifacts (G4DT tensors);
no vision-language model runs here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import DataError
from . import tensorio

FEATURE_IN = 64
FEATURE_OUT = 512
HIDDEN = 256
TAU_DEFAULT = 0.07

BANK_MAGIC = "G4DTBANK"


def _gelu(x):
    # tanh approximation: smooth enough for finite-difference checks
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_grad(x):
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * c * (1.0 + 3 * 0.044715 * x ** 2)


class FeatureDecoder:
    """Two-layer MLP lifting 64-d rendered features to the 512-d teacher
    space (hidden width 256, GELU)."""

    def __init__(self, rng: np.random.Generator | None = None,
                 d_in: int = FEATURE_IN, d_out: int = FEATURE_OUT, hidden: int = HIDDEN):
        rng = rng or np.random.default_rng(0)
        self.W1 = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, hidden))
        self.b1 = np.zeros(hidden)
        self.W2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, d_out))
        self.b2 = np.zeros(d_out)

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def set_params(self, params: Dict[str, np.ndarray]) -> None:
        self.W1, self.b1 = params["W1"], params["b1"]
        self.W2, self.b2 = params["W2"], params["b2"]

    def forward(self, feat: np.ndarray) -> Tuple[np.ndarray, tuple]:
        """Apply the decoder per position; feat is (..., d_in)."""
        if feat.shape[-1] != self.W1.shape[0]:
            raise DataError(
                f"decoder expects {self.W1.shape[0]} channels, got {feat.shape[-1]}")
        h_pre = feat @ self.W1 + self.b1
        h = _gelu(h_pre)
        out = h @ self.W2 + self.b2
        return out, (feat, h_pre, h)

    def __call__(self, feat: np.ndarray) -> np.ndarray:
        return self.forward(feat)[0]

    def backward(self, cache: tuple, d_out: np.ndarray
                 ) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """Gradients w.r.t. the input features and the decoder parameters."""
        feat, h_pre, h = cache
        flat = lambda a: a.reshape(-1, a.shape[-1])
        d_W2 = flat(h).T @ flat(d_out)
        d_b2 = flat(d_out).sum(axis=0)
        d_h = d_out @ self.W2.T
        d_hpre = d_h * _gelu_grad(h_pre)
        d_W1 = flat(feat).T @ flat(d_hpre)
        d_b1 = flat(d_hpre).sum(axis=0)
        d_feat = d_hpre @ self.W1.T
        return d_feat, {"W1": d_W1, "b1": d_b1, "W2": d_W2, "b2": d_b2}


@dataclass
class TextEmbeddingBank:
    """Per-class language embeddings; L2-normalized on construction."""

    labels: List[str]
    embeddings: np.ndarray  # (K, c)
    tau: float = TAU_DEFAULT

    def __post_init__(self):
        if len(self.labels) < 1:
            raise DataError("text bank must contain at least one class")
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(self.labels):
            raise DataError(
                f"embeddings must be ({len(self.labels)}, c), got {emb.shape}")
        norms = np.linalg.norm(emb, axis=-1, keepdims=True)
        if np.any(norms == 0):
            raise DataError("zero-norm text embedding")
        self.embeddings = emb / norms

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def save(self, path) -> None:
        header = "\n".join([f"{BANK_MAGIC} {self.num_classes} {self.tau}"] + self.labels)
        with open(path, "wb") as f:
            f.write(header.encode("utf-8") + b"\n")
            f.write(tensorio.tensor_to_bytes(self.embeddings))

    @staticmethod
    def load(path) -> "TextEmbeddingBank":
        with open(path, "rb") as f:
            data = f.read()
        pos = 0
        lines = []
        first = data.split(b"\n", 1)[0].decode("utf-8", "replace")
        parts = first.split()
        if len(parts) != 3 or parts[0] != BANK_MAGIC:
            raise DataError(f"{path}: missing {BANK_MAGIC} header")
        k = int(parts[1])
        tau = float(parts[2])
        pos = len(data.split(b"\n", 1)[0]) + 1
        for _ in range(k):
            end = data.index(b"\n", pos)
            lines.append(data[pos:end].decode("utf-8"))
            pos = end + 1
        emb = tensorio.tensor_from_bytes(data[pos:], name=str(path))
        return TextEmbeddingBank(labels=lines, embeddings=emb.astype(np.float64), tau=tau)


def classify(feat: np.ndarray, bank: TextEmbeddingBank
             ) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel label map and softmax probabilities over the bank's classes.

    prob_ij = softmax_k(f_ij . t_k / tau); labels are the argmax."""
    logits = feat @ bank.embeddings.T / bank.tau
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=-1, keepdims=True)
    return probs.argmax(axis=-1), probs


def query(feat: np.ndarray, prompt_embedding: np.ndarray, threshold: float
          ) -> np.ndarray:
    """Boolean relevance mask: cosine similarity to the prompt >= threshold."""
    emb = np.asarray(prompt_embedding, dtype=np.float64)
    emb = emb / np.linalg.norm(emb)
    norms = np.linalg.norm(feat, axis=-1)
    sim = np.where(norms > 0, feat @ emb / np.where(norms > 0, norms, 1.0), -1.0)
    return sim >= threshold
