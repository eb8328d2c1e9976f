"""Decoder-only transformer shared by the dialogue generator and the
text-to-image translator: causal forward, masked NLL, exact gradients,
beam/greedy decoding and ancestral sampling.

Position t's distribution conditions on tokens < t only. Internally the
sequence is shifted right behind a [PAD] start anchor, so even the first
token has a proper distribution and loss can cover every position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .optim import AdamState, adam_step  # noqa: F401  (re-exported: optimizer lives with the engine)
from .tokenizer import PAD


class SeqModelError(ValueError):
    pass


@dataclass(frozen=True)
class SeqModelConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    max_len: int = 128

    def __post_init__(self) -> None:
        if self.hidden % self.heads != 0:
            raise SeqModelError("hidden size must be divisible by head count")

    def to_dict(self) -> dict:
        return asdict(self)


class Block(nn.Module):
    def __init__(self, cfg: SeqModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.hidden // cfg.heads
        self.ln1 = nn.LayerNorm(cfg.hidden)
        self.qkv = nn.Linear(cfg.hidden, 3 * cfg.hidden)
        self.proj = nn.Linear(cfg.hidden, cfg.hidden)
        self.ln2 = nn.LayerNorm(cfg.hidden)
        self.fc1 = nn.Linear(cfg.hidden, 4 * cfg.hidden)
        self.fc2 = nn.Linear(4 * cfg.hidden, cfg.hidden)

    def forward(self, x: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        b, t, c = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(c, dim=-1)
        q = q.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(causal_mask[:t, :t], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        x = x + self.proj(out)
        x = x + self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(x))))
        return x


class TransformerLM(nn.Module):
    def __init__(self, cfg: SeqModelConfig):
        super().__init__()
        self.cfg = cfg
        # One extra position for the internal start anchor.
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len + 1, cfg.hidden))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.vocab_size)
        mask = torch.triu(torch.ones(cfg.max_len + 1, cfg.max_len + 1, dtype=torch.bool), 1)
        self.register_buffer("causal_mask", mask, persistent=False)
        self.apply(self._init)

    @staticmethod
    def _init(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        if input_ids.ndim != 2:
            raise SeqModelError("input_ids must be (batch, time)")
        t = input_ids.shape[1]
        if t > self.cfg.max_len + 1:
            raise SeqModelError(
                f"sequence length {t - 1} exceeds max_len {self.cfg.max_len}"
            )
        x = self.tok_emb(input_ids) + self.pos_emb[:t]
        for block in self.blocks:
            x = block(x, self.causal_mask)
        return self.head(self.ln_f(x))


def _as_batch(tokens) -> torch.Tensor:
    t = torch.as_tensor(tokens, dtype=torch.long)
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.ndim != 2:
        raise SeqModelError("tokens must be a sequence or a batch of sequences")
    return t


def full_logits(model: TransformerLM, tokens) -> torch.Tensor:
    """Logits (B, T+1, V): slot t scores token t given tokens < t; slot T is
    the next-token distribution for the whole sequence."""
    batch = _as_batch(tokens)
    if batch.shape[1] > model.cfg.max_len:
        raise SeqModelError(
            f"sequence length {batch.shape[1]} exceeds max_len {model.cfg.max_len}"
        )
    anchor = torch.full((batch.shape[0], 1), PAD, dtype=torch.long)
    return model(torch.cat([anchor, batch], dim=1))


def step_distributions(model: TransformerLM, tokens) -> torch.Tensor:
    """Per-position distributions (T, V) as float64 rows summing to 1."""
    batch = _as_batch(tokens)
    with torch.no_grad():
        logits = full_logits(model, batch)[:, : batch.shape[1], :]
    return torch.softmax(logits.double(), dim=-1).squeeze(0)


def nll_loss(model: TransformerLM, tokens, mask) -> torch.Tensor:
    """Mean -log p(token_t | tokens_<t) over masked positions (token-mean
    pooling across the whole batch)."""
    batch = _as_batch(tokens)
    mask_t = torch.as_tensor(mask, dtype=torch.bool)
    if mask_t.ndim == 1:
        mask_t = mask_t.unsqueeze(0)
    if mask_t.shape != batch.shape:
        raise SeqModelError(f"mask shape {tuple(mask_t.shape)} != tokens shape {tuple(batch.shape)}")
    n = int(mask_t.sum())
    if n == 0:
        raise SeqModelError("loss mask selects no positions")
    logits = full_logits(model, batch)[:, : batch.shape[1], :]
    logp = torch.log_softmax(logits, dim=-1)
    token_logp = logp.gather(-1, batch.unsqueeze(-1)).squeeze(-1)
    return -(token_logp * mask_t).sum() / n


def grads(model: TransformerLM, tokens, mask) -> dict[str, torch.Tensor]:
    """Exact reverse-mode gradients of nll_loss for every parameter."""
    model.zero_grad(set_to_none=True)
    loss = nll_loss(model, tokens, mask)
    loss.backward()
    out = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return out


def perplexity(model: TransformerLM, tokens, mask) -> float:
    with torch.no_grad():
        return float(torch.exp(nll_loss(model, tokens, mask)))


@torch.no_grad()
def decode_greedy_or_beam(
    model: TransformerLM,
    prefix: list[int],
    beam: int = 5,
    stop_id: int | None = None,
    max_new: int = 48,
    blocked_ids: frozenset[int] | set[int] = frozenset(),
) -> list[int]:
    """Length-normalized beam search; beam=1 is greedy decoding.

    Returns the generated continuation (stop token included when emitted).
    Blocked ids get -inf logits before every selection, so they can never
    appear in the output.
    """
    if beam < 1:
        raise SeqModelError("beam width must be >= 1")
    if len(prefix) >= model.cfg.max_len:
        raise SeqModelError("prefix leaves no room to generate")
    blocked = sorted(blocked_ids)
    max_new = min(max_new, model.cfg.max_len - len(prefix))

    # (generated tokens, summed logp). Finished hypotheses move to `done`.
    live: list[tuple[list[int], float]] = [([], 0.0)]
    done: list[tuple[list[int], float]] = []

    def norm(item: tuple[list[int], float]) -> float:
        toks, logp = item
        return logp / max(1, len(toks))

    for _ in range(max_new):
        if not live:
            break
        batch = torch.tensor([prefix + toks for toks, _ in live], dtype=torch.long)
        logits = full_logits(model, batch)[:, -1, :]
        if blocked:
            logits[:, blocked] = float("-inf")
        logp = torch.log_softmax(logits.double(), dim=-1)
        width = min(beam, logp.shape[-1] - len(blocked))
        top = torch.topk(logp, width, dim=-1)
        candidates: list[tuple[list[int], float]] = []
        for (toks, score), row_logp, row_ids in zip(live, top.values, top.indices):
            for lp, tid in zip(row_logp.tolist(), row_ids.tolist()):
                candidates.append((toks + [tid], score + lp))
        candidates.sort(key=norm, reverse=True)
        live = []
        for cand in candidates[:beam]:
            if stop_id is not None and cand[0][-1] == stop_id:
                done.append(cand)
            else:
                live.append(cand)
        done = sorted(done, key=norm, reverse=True)[:beam]

    pool = done + live
    if not pool:
        return []
    return max(pool, key=norm)[0]


@torch.no_grad()
def sample_tokens(
    model: TransformerLM,
    prefix: list[int],
    n_new: int,
    temperature: float = 1.0,
    allowed_ids: list[int] | None = None,
    generator: torch.Generator | None = None,
) -> list[int]:
    """Ancestral sampling of exactly n_new tokens. temperature == 0 is greedy.
    When allowed_ids is given, every step's distribution is masked to it."""
    if len(prefix) + n_new > model.cfg.max_len:
        raise SeqModelError("prefix + n_new exceeds max_len")
    allow_mask = None
    if allowed_ids is not None:
        allow_mask = torch.full((model.cfg.vocab_size,), float("-inf"))
        allow_mask[list(allowed_ids)] = 0.0
    out = list(prefix)
    for _ in range(n_new):
        logits = full_logits(model, torch.tensor([out], dtype=torch.long))[0, -1, :]
        if allow_mask is not None:
            logits = logits + allow_mask
        if temperature <= 0.0:
            nxt = int(torch.argmax(logits))
        else:
            probs = torch.softmax(logits.double() / temperature, dim=-1)
            nxt = int(torch.multinomial(probs, 1, generator=generator))
        out.append(nxt)
    return out[len(prefix):]


def model_tensors(model: TransformerLM) -> dict[str, np.ndarray]:
    return {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in model.named_parameters()
    }


def load_model_tensors(model: TransformerLM, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = set(params) ^ set(tensors)
        raise SeqModelError(f"tensor name mismatch: {sorted(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            arr = torch.from_numpy(np.ascontiguousarray(tensors[name]))
            if tuple(arr.shape) != tuple(p.shape):
                raise SeqModelError(f"shape mismatch for {name}")
            p.copy_(arr.to(p.dtype))


def save_model(path: str, model: TransformerLM) -> None:
    checkpoint.save_checkpoint(path, {"seq_model": model.cfg.to_dict()}, model_tensors(model))


def load_model(path: str) -> TransformerLM:
    config, tensors = checkpoint.load_checkpoint(path)
    if "seq_model" not in config:
        raise SeqModelError(f"{path} is not a sequence model checkpoint")
    model = TransformerLM(SeqModelConfig(**config["seq_model"]))
    load_model_tensors(model, tensors)
    return model
