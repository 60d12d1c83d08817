"""Emergent-language channel: Gumbel-Softmax relaxation, Sender and Receiver.

The Sender turns a feature vector into a fixed-length sentence of discrete
symbols. During training each symbol is a relaxed (Gumbel-Softmax) probability
vector so gradients reach the input; at inference the categorical mode is
taken, which makes the sentence a deterministic function of the weights and
the input. The Receiver reads the sentence back into a real vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ValidationError

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class Vocabulary:
    size: int

    def __post_init__(self):
        if int(self.size) < 2:
            raise ConfigError(f"vocabulary size must be >= 2, got {self.size}")

    def __contains__(self, index) -> bool:
        return 0 <= int(index) < self.size


@dataclass(frozen=True)
class GumbelSoftmaxConfig:
    temperature: float = 1.0
    hard_mode: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class AgentState:
    h: torch.Tensor
    c: torch.Tensor

    @classmethod
    def zeros(cls, num_layers: int, batch: int, dim: int, device=None, dtype=None) -> "AgentState":
        shape = (num_layers, batch, dim)
        return cls(torch.zeros(shape, device=device, dtype=dtype), torch.zeros(shape, device=device, dtype=dtype))

    def as_tuple(self):
        return self.h, self.c


@dataclass(frozen=True)
class SymbolSentence:
    """One emitted message. `relaxed` is only populated in training mode."""

    symbols: tuple[int, ...]
    relaxed: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.symbols)

    def validate(self, n_symbols: int, vocab: Vocabulary) -> None:
        if len(self.symbols) != n_symbols:
            raise ValidationError(f"sentence has {len(self.symbols)} symbols, expected {n_symbols}")
        bad = [s for s in self.symbols if s not in vocab]
        if bad:
            raise ValidationError(f"symbol indices {bad} outside [0, {vocab.size})")
        if self.relaxed is not None:
            r = np.asarray(self.relaxed)
            if r.shape != (n_symbols, vocab.size):
                raise ValidationError(f"relaxed form has shape {r.shape}")
            if (r < 0).any() or np.abs(r.sum(axis=-1) - 1.0).max() > 1e-6:
                raise ValidationError("relaxed vectors must lie on the probability simplex")

    def text(self) -> str:
        return " ".join(str(s) for s in self.symbols)

    @classmethod
    def parse(cls, text: str) -> "SymbolSentence":
        return cls(tuple(int(t) for t in text.split()))


def sample_gumbel(shape, generator: Optional[torch.Generator] = None, dtype=torch.float32, device=None):
    """Standard Gumbel noise g = -log(-log U)."""
    u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    tiny = torch.finfo(dtype).tiny
    u = u.clamp(min=tiny, max=1.0 - torch.finfo(dtype).eps)
    return -torch.log(-torch.log(u))


def _relax(log_p: torch.Tensor, noise: torch.Tensor, tau: float) -> torch.Tensor:
    return torch.softmax((log_p + noise) / tau, dim=-1)


def gumbel_softmax_sample(probs, noise=None, tau: float = 1.0, generator=None) -> torch.Tensor:
    """Relaxed categorical sample G_tau(p) over the last axis.

    Computes softmax((log p + g) / tau) with log p floored at 1e-12 so that
    zero-probability entries stay finite. `noise` defaults to fresh Gumbel
    draws; pass zeros (or a fixed draw) for a deterministic evaluation.
    """
    p = torch.as_tensor(probs)
    if not torch.is_floating_point(p):
        p = p.to(torch.get_default_dtype())
    if not tau > 0:
        raise ValidationError(f"temperature must be > 0, got {tau}")
    if not torch.isfinite(p).all():
        raise ValidationError("probabilities contain non-finite values")
    if (p < 0).any() or (p.sum(-1) - 1.0).abs().max() > 1e-6:
        raise ValidationError("probabilities must be nonnegative and sum to 1")
    if noise is None:
        noise = sample_gumbel(p.shape, generator=generator, dtype=p.dtype)
    else:
        noise = torch.as_tensor(noise, dtype=p.dtype)
        if noise.shape != p.shape:
            raise ValidationError(f"noise shape {tuple(noise.shape)} != probability shape {tuple(p.shape)}")
        if not torch.isfinite(noise).all():
            raise ValidationError("noise contains non-finite values")
    return _relax(torch.log(p.clamp_min(LOG_FLOOR)), noise, tau)


def gumbel_softmax_logits(logits: torch.Tensor, tau: float = 1.0, noise=None, hard: bool = False, generator=None):
    """Same operator parameterised by unnormalised logits (log p = log_softmax).

    With `hard=True` the forward value is the one-hot argmax while gradients
    follow the relaxed sample (straight-through).
    """
    if noise is None:
        noise = sample_gumbel(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
    y = _relax(F.log_softmax(logits, dim=-1), noise, tau)
    if hard:
        y_hard = F.one_hot(y.argmax(-1), y.shape[-1]).to(y.dtype)
        y = (y_hard - y).detach() + y
    return y


@dataclass
class SenderOutput:
    symbols: torch.Tensor  # (B, N_S) long
    messages: torch.Tensor  # (B, N_S, V): relaxed vectors (training) or one-hots (inference)
    logits: torch.Tensor  # (B, N_S, V)
    hidden: torch.Tensor  # (B, E), final hidden state of the top layer

    def sentences(self, relaxed: bool = False) -> list[SymbolSentence]:
        msgs = self.messages.detach().cpu().numpy() if relaxed else None
        return [SymbolSentence(tuple(row), None if msgs is None else msgs[i])
                for i, row in enumerate(self.symbols.tolist())]


class Sender(nn.Module):
    """Stacked LSTM that emits `n_symbols` symbols from a feature vector.

    The input vector is linearly projected and added to a learned start-token
    embedding to form the first LSTM input; state starts at zero. Each step's
    symbol (relaxed or one-hot) is embedded and fed back. After the last symbol
    is fed back the top-layer hidden state is returned as the sentence encoding.
    """

    def __init__(self, input_dim: int, vocab_size: int, n_symbols: int, embed_dim: int = 512,
                 num_layers: int = 2, temperature: float = 1.0, hard: bool = False):
        super().__init__()
        if n_symbols < 1:
            raise ConfigError(f"n_symbols must be >= 1, got {n_symbols}")
        self.vocab = Vocabulary(vocab_size)
        self.gs = GumbelSoftmaxConfig(temperature, hard)
        self.input_dim = input_dim
        self.n_symbols = n_symbols
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.input_proj = nn.Linear(input_dim, embed_dim)
        self.start_token = nn.Parameter(torch.zeros(embed_dim))
        self.embedding = nn.Linear(vocab_size, embed_dim, bias=False)
        self.lstm = nn.LSTM(embed_dim, embed_dim, num_layers=num_layers, batch_first=True)
        self.to_vocab = nn.Linear(embed_dim, vocab_size)

    def forward(self, x: torch.Tensor, noise: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None) -> SenderOutput:
        if x.dim() != 2 or x.shape[1] != self.input_dim:
            raise ValidationError(f"sender expects input (B, {self.input_dim}), got {tuple(x.shape)}")
        batch = x.shape[0]
        V = self.vocab.size
        if noise is not None and noise.shape != (batch, self.n_symbols, V):
            raise ValidationError(f"noise must have shape {(batch, self.n_symbols, V)}")
        state = AgentState.zeros(self.num_layers, batch, self.embed_dim, device=x.device, dtype=x.dtype).as_tuple()
        inp = self.input_proj(x) + self.start_token
        messages, logits_all, symbols = [], [], []
        for n in range(self.n_symbols):
            out, state = self.lstm(inp.unsqueeze(1), state)
            logits = self.to_vocab(out[:, 0])
            if self.training:
                g = None if noise is None else noise[:, n]
                w = gumbel_softmax_logits(logits, self.gs.temperature, noise=g, hard=self.gs.hard_mode,
                                          generator=generator)
                idx = w.argmax(-1)
            else:
                # first maximal index wins ties
                idx = logits.argmax(-1)
                w = F.one_hot(idx, V).to(logits.dtype)
            messages.append(w)
            logits_all.append(logits)
            symbols.append(idx)
            inp = self.embedding(w)
        out, state = self.lstm(inp.unsqueeze(1), state)
        return SenderOutput(
            symbols=torch.stack(symbols, 1),
            messages=torch.stack(messages, 1),
            logits=torch.stack(logits_all, 1),
            hidden=out[:, 0],
        )


class Receiver(nn.Module):
    """Single-layer LSTM reading a sentence; returns Linear(h_last)."""

    def __init__(self, vocab_size: int, embed_dim: int = 512, num_layers: int = 1, output_dim: Optional[int] = None):
        super().__init__()
        self.vocab = Vocabulary(vocab_size)
        self.embed_dim = embed_dim
        self.embedding = nn.Linear(vocab_size, embed_dim, bias=False)
        self.lstm = nn.LSTM(embed_dim, embed_dim, num_layers=num_layers, batch_first=True)
        self.out = nn.Linear(embed_dim, output_dim or embed_dim)

    def encode_symbols(self, symbols) -> torch.Tensor:
        s = torch.as_tensor(symbols, dtype=torch.long)
        if s.dim() == 1:
            s = s.unsqueeze(0)
        if (s < 0).any() or (s >= self.vocab.size).any():
            raise ValidationError(f"symbol index outside [0, {self.vocab.size})")
        return F.one_hot(s, self.vocab.size).to(self.embedding.weight.dtype)

    def forward(self, message: torch.Tensor) -> torch.Tensor:
        """`message` is (B, N, V) relaxed/one-hot vectors or (B, N) symbol indices."""
        if not torch.is_floating_point(message):
            message = self.encode_symbols(message)
        if message.dim() != 3 or message.shape[-1] != self.vocab.size:
            raise ValidationError(f"receiver expects (B, N, {self.vocab.size}), got {tuple(message.shape)}")
        out, _ = self.lstm(self.embedding(message))
        return self.out(out[:, -1])


def sender_forward(sender: Sender, x, mode: str = "inference", noise=None, generator=None):
    """Functional wrapper: run `sender` on a single vector or a batch in the given mode.

    Returns (sentences, final hidden state).
    """
    if mode not in ("training", "inference"):
        raise ValidationError(f"mode must be 'training' or 'inference', got {mode!r}")
    x = torch.as_tensor(x, dtype=sender.input_proj.weight.dtype)
    single = x.dim() == 1
    if single:
        x = x.unsqueeze(0)
    was_training = sender.training
    sender.train(mode == "training")
    try:
        if mode == "inference":
            with torch.no_grad():
                out = sender(x)
        else:
            out = sender(x, noise=noise, generator=generator)
    finally:
        sender.train(was_training)
    sentences = out.sentences(relaxed=mode == "training")
    hidden = out.hidden[0] if single else out.hidden
    return (sentences[0] if single else sentences), hidden


def receiver_forward(receiver: Receiver, sentence: SymbolSentence | Sequence[int]) -> torch.Tensor:
    """Decode one sentence at inference (one-hot encoded symbols)."""
    symbols = sentence.symbols if isinstance(sentence, SymbolSentence) else tuple(sentence)
    if isinstance(sentence, SymbolSentence):
        sentence.validate(len(symbols), receiver.vocab)
    with torch.no_grad():
        return receiver(receiver.encode_symbols(symbols))[0]
