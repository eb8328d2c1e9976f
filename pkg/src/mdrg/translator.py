"""Text-to-image translator: joins description tokens and image tokens into a
single autoregressive stream, scores it jointly, samples image token grids for
a description, and reranks decoded candidate images with a match scorer.

Stream layout: description ids, [SEP], then image tokens offset by the text
vocabulary size so the two id ranges never collide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import codec as codec_mod
from . import seqmodel
from .codec import VqCodec
from .seqmodel import TransformerLM
from .tokenizer import SEP, Vocab

MAX_DESCRIPTION_TOKENS = 32
DEFAULT_N_SAMPLES = 8


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class JointStream:
    """tokens = description ++ [SEP] ++ offset image tokens; boundary is the
    [SEP] index."""

    tokens: tuple[int, ...]
    boundary: int
    text_vocab: int
    n_image: int


def build_stream(
    desc_tokens: list[int],
    image_tokens: list[int],
    text_vocab: int,
    n_image: int,
    max_desc: int = MAX_DESCRIPTION_TOKENS,
) -> JointStream:
    if len(desc_tokens) > max_desc:
        raise StreamError(f"description of {len(desc_tokens)} tokens exceeds limit {max_desc}")
    if len(image_tokens) != n_image:
        raise StreamError(f"expected {n_image} image tokens, got {len(image_tokens)}")
    if any(t < 0 or t >= text_vocab for t in desc_tokens):
        raise StreamError("description token outside text vocabulary")
    offset = [t + text_vocab for t in image_tokens]
    return JointStream(
        tokens=tuple(desc_tokens) + (SEP,) + tuple(offset),
        boundary=len(desc_tokens),
        text_vocab=text_vocab,
        n_image=n_image,
    )


def unbuild_stream(stream: JointStream) -> tuple[list[int], list[int]]:
    desc = list(stream.tokens[: stream.boundary])
    image = [t - stream.text_vocab for t in stream.tokens[stream.boundary + 1 :]]
    return desc, image


def loss_F(model: TransformerLM, streams: list[JointStream]) -> torch.Tensor:
    """NLL over every stream position: the text factor, the boundary, and the
    image factor all count (token-mean pooled across the batch)."""
    if not streams:
        raise StreamError("no streams to score")
    from .tokenizer import PAD

    max_t = max(len(s.tokens) for s in streams)
    if max_t > model.cfg.max_len:
        raise seqmodel.SeqModelError(f"stream length {max_t} exceeds max_len {model.cfg.max_len}")
    tokens = torch.full((len(streams), max_t), PAD, dtype=torch.long)
    mask = torch.zeros((len(streams), max_t), dtype=torch.bool)
    for i, s in enumerate(streams):
        tokens[i, : len(s.tokens)] = torch.tensor(s.tokens, dtype=torch.long)
        mask[i, : len(s.tokens)] = True
    return seqmodel.nll_loss(model, tokens, mask)


@torch.no_grad()
def generate_image_tokens(
    model: TransformerLM,
    desc_tokens: list[int],
    text_vocab: int,
    n_image: int,
    codebook_size: int,
    n_samples: int = DEFAULT_N_SAMPLES,
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
    max_desc: int = MAX_DESCRIPTION_TOKENS,
) -> list[list[int]]:
    """Sample n_samples image token grids conditioned on the description.
    Image positions are masked to the image id range, so a sample can never
    contain text ids."""
    if n_samples < 1:
        raise StreamError("n_samples must be >= 1")
    if len(desc_tokens) > max_desc:
        raise StreamError(f"description of {len(desc_tokens)} tokens exceeds limit {max_desc}")
    prefix = list(desc_tokens) + [SEP]
    allowed = list(range(text_vocab, text_vocab + codebook_size))
    samples = []
    for _ in range(n_samples):
        raw = seqmodel.sample_tokens(
            model,
            prefix,
            n_new=n_image,
            temperature=temperature,
            allowed_ids=allowed,
            generator=generator,
        )
        samples.append([t - text_vocab for t in raw])
    return samples


def tokens_to_image(codec: VqCodec, tokens: list[int]) -> np.ndarray:
    """Codebook lookup then pixel decode; deterministic."""
    grid = codec_mod.tokens_to_grid(codec, tokens)
    return codec_mod.decode_grid(codec, grid)


class MatchScorer:
    """Scores how well an image matches a description; higher is better."""

    def score(self, description: str, image: np.ndarray) -> float:
        raise NotImplementedError

    def score_many(self, description: str, images: list[np.ndarray]) -> list[float]:
        return [self.score(description, img) for img in images]


def rerank(
    scorer: MatchScorer, description: str, candidates: list[np.ndarray]
) -> list[tuple[int, float]]:
    """Stable descending sort; returns (candidate index, score) pairs, ties
    keeping generation order."""
    if not candidates:
        raise StreamError("rerank needs at least one candidate")
    scores = scorer.score_many(description, candidates)
    order = sorted(range(len(candidates)), key=lambda i: -scores[i])
    return [(i, scores[i]) for i in order]


class PrototypeScorer(MatchScorer):
    """Test oracle: negative MSE against a per-description prototype image."""

    def __init__(self, prototypes: dict[str, np.ndarray]):
        self.prototypes = prototypes

    def score(self, description: str, image: np.ndarray) -> float:
        proto = self.prototypes.get(description)
        if proto is None:
            return 0.0
        return -float(np.mean((image - proto) ** 2))


class DualEncoderScorer(nn.Module, MatchScorer):
    """Contrastive text/image dual encoder used as the rerank backend."""

    def __init__(self, vocab: Vocab, image_size: int, dim: int = 64, hidden: int = 128):
        super().__init__()
        self.vocab = vocab
        self.image_size = image_size
        self.tok_emb = nn.Embedding(vocab.size, dim)
        self.text_fc = nn.Linear(dim, dim)
        self.img_fc1 = nn.Linear(image_size * image_size * 3, hidden)
        self.img_fc2 = nn.Linear(hidden, dim)
        self.temp = nn.Parameter(torch.tensor(0.07))

    def embed_text(self, token_batch: list[list[int]]) -> torch.Tensor:
        outs = []
        for ids in token_batch:
            if not ids:
                ids = [0]
            emb = self.tok_emb(torch.tensor(ids, dtype=torch.long)).mean(0)
            outs.append(emb)
        x = self.text_fc(torch.stack(outs))
        return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-8)

    def embed_images(self, images: torch.Tensor) -> torch.Tensor:
        flat = images.reshape(images.shape[0], -1) * 2.0 - 1.0
        x = self.img_fc2(torch.tanh(self.img_fc1(flat)))
        return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-8)

    @torch.no_grad()
    def score_many(self, description: str, images: list[np.ndarray]) -> list[float]:
        text = self.embed_text([self.vocab.encode(description)])
        stack = torch.from_numpy(np.stack(images)).float()
        img = self.embed_images(stack)
        return [float(v) for v in (img @ text.T).squeeze(-1)]

    def score(self, description: str, image: np.ndarray) -> float:
        return self.score_many(description, [image])[0]


def train_dual_encoder(
    scorer: DualEncoderScorer,
    pairs: list[tuple[str, np.ndarray]],
    steps: int = 300,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """InfoNCE over in-batch negatives on (description, image) pairs."""
    if not pairs:
        raise StreamError("no pairs to train the scorer on")
    rng = np.random.default_rng(seed)
    encoded = [(scorer.vocab.encode(d), img) for d, img in pairs]
    opt = torch.optim.Adam(scorer.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        take = rng.integers(0, len(encoded), size=min(batch_size, len(encoded)))
        toks = [encoded[i][0] for i in take]
        imgs = torch.from_numpy(np.stack([encoded[i][1] for i in take])).float()
        t_emb = scorer.embed_text(toks)
        i_emb = scorer.embed_images(imgs)
        logits = (t_emb @ i_emb.T) / scorer.temp.clamp_min(1e-3)
        labels = torch.arange(len(take))
        loss = 0.5 * (
            nn.functional.cross_entropy(logits, labels)
            + nn.functional.cross_entropy(logits.T, labels)
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def save_scorer(path: str, scorer: DualEncoderScorer) -> None:
    from . import checkpoint

    tensors = {k: v.detach().numpy().astype(np.float32) for k, v in scorer.named_parameters()}
    meta = {
        "scorer": {
            "image_size": scorer.image_size,
            "dim": scorer.tok_emb.embedding_dim,
            "hidden": scorer.img_fc1.out_features,
        }
    }
    checkpoint.save_checkpoint(path, meta, tensors)


def load_scorer(path: str, vocab: Vocab) -> DualEncoderScorer:
    from . import checkpoint

    config, tensors = checkpoint.load_checkpoint(path)
    meta = config["scorer"]
    scorer = DualEncoderScorer(vocab, meta["image_size"], dim=meta["dim"], hidden=meta["hidden"])
    with torch.no_grad():
        for name, p in scorer.named_parameters():
            p.copy_(torch.from_numpy(tensors[name]))
    return scorer


@torch.no_grad()
def retrieval_accuracy(scorer: MatchScorer, pairs: list[tuple[str, np.ndarray]]) -> float:
    """Top-1 accuracy of picking each description's own image from the pool."""
    if not pairs:
        raise StreamError("no pairs to evaluate")
    images = [img for _, img in pairs]
    hits = 0
    for i, (desc, _) in enumerate(pairs):
        ranked = rerank(scorer, desc, images)
        if ranked[0][0] == i:
            hits += 1
    return hits / len(pairs)
