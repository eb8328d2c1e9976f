"""Dialogue response generator protocol: flatten a multimodal context into
text tokens, build training targets where an image reply is represented as
[DST] description [SEP], and parse decoded token sequences back into segments.

In-context images never reach the model as pixels: each one enters as its
stored textual description.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import seqmodel
from .seqmodel import TransformerLM
from .tokenizer import DST, EOS, SEP, Vocab


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    speaker: int
    text: str | None = None
    image_description: str | None = None
    image_path: str | None = None

    def __post_init__(self) -> None:
        if (self.text is None) == (self.image_description is None):
            raise ProtocolError("utterance must carry exactly one of text / image")

    @property
    def kind(self) -> str:
        return "text" if self.text is not None else "image"


@dataclass(frozen=True)
class TextSegment:
    text: str


@dataclass(frozen=True)
class ImageSegment:
    description: str
    image_path: str | None = None


Segment = TextSegment | ImageSegment


@dataclass(frozen=True)
class Response:
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise ProtocolError("response needs at least one segment")
        for seg in self.segments:
            if isinstance(seg, TextSegment) and not seg.text:
                raise ProtocolError("empty text segment in response")
            if isinstance(seg, ImageSegment) and not seg.description:
                raise ProtocolError("image segment without description")

    @property
    def has_image(self) -> bool:
        return any(isinstance(s, ImageSegment) for s in self.segments)


@dataclass(frozen=True)
class GeneratorTarget:
    """Token encoding of a response plus the span of every segment.

    Spans tile the sequence up to (not including) the terminal [EOS]:
    a text span covers its tokens plus the [SEP] separating it from a
    following segment; a description span is exactly [DST] ... [SEP].
    """

    tokens: tuple[int, ...]
    spans: tuple[tuple[str, int, int], ...]


def flatten_context(context: list[Utterance], vocab: Vocab, max_len: int) -> list[int]:
    """Text-only context: image turns contribute their description, turns are
    joined with [SEP], and whole oldest turns are dropped first to fit."""
    if not context:
        raise ProtocolError("dialogue context is empty")
    per_turn: list[list[int]] = []
    for i, turn in enumerate(context):
        if turn.kind == "image":
            if not turn.image_description:
                raise ProtocolError(f"context turn {i} is an image without a description")
            per_turn.append(vocab.encode(turn.image_description))
        else:
            per_turn.append(vocab.encode(turn.text or ""))

    def total(turns: list[list[int]]) -> int:
        return sum(len(t) for t in turns) + max(0, len(turns) - 1)

    kept = list(per_turn)
    while len(kept) > 1 and total(kept) > max_len:
        kept.pop(0)
    out: list[int] = []
    for j, t in enumerate(kept):
        if j:
            out.append(SEP)
        out.extend(t)
    # A single remaining over-long turn keeps its most recent tokens.
    return out[-max_len:]


def build_target(response: Response, vocab: Vocab) -> GeneratorTarget:
    tokens: list[int] = []
    spans: list[tuple[str, int, int]] = []
    last = len(response.segments) - 1
    for i, seg in enumerate(response.segments):
        start = len(tokens)
        if isinstance(seg, TextSegment):
            tokens.extend(vocab.encode(seg.text))
            if i != last:
                tokens.append(SEP)
            spans.append(("text", start, len(tokens)))
        else:
            tokens.append(DST)
            tokens.extend(vocab.encode(seg.description))
            tokens.append(SEP)
            spans.append(("description", start, len(tokens)))
    tokens.append(EOS)
    return GeneratorTarget(tokens=tuple(tokens), spans=tuple(spans))


@dataclass
class ParsedSegments:
    segments: list[Segment] = field(default_factory=list)
    implicit_close: bool = False

    @property
    def has_description(self) -> bool:
        return any(isinstance(s, ImageSegment) for s in self.segments)


def parse_segments(tokens: list[int], vocab: Vocab) -> ParsedSegments:
    """Split a decoded sequence at [DST]/[SEP] boundaries. Never raises:
    a [DST] run left open at the end closes implicitly and is flagged."""
    out = ParsedSegments()
    run: list[int] = []

    def flush_text() -> None:
        if run:
            out.segments.append(TextSegment(vocab.decode(run)))
            run.clear()

    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok == EOS:
            break
        if tok == DST:
            flush_text()
            j = i + 1
            desc: list[int] = []
            while j < len(tokens) and tokens[j] not in (SEP, EOS, DST):
                desc.append(tokens[j])
                j += 1
            closed = j < len(tokens) and tokens[j] == SEP
            out.segments.append(ImageSegment(vocab.decode(desc)))
            if not closed:
                out.implicit_close = True
                i = j
                continue
            i = j + 1
        elif tok == SEP:
            flush_text()
            i += 1
        else:
            run.append(tok)
            i += 1
    flush_text()
    return out


def training_sequence(
    context: list[Utterance], target: GeneratorTarget, vocab: Vocab, max_len: int
) -> tuple[list[int], list[bool]]:
    """Concatenate flattened context, a [SEP] boundary, and the target tokens;
    the loss mask covers target positions only."""
    budget = max_len - len(target.tokens) - 1
    if budget <= 0:
        raise ProtocolError(
            f"target of {len(target.tokens)} tokens leaves no context room at max_len {max_len}"
        )
    ctx = flatten_context(context, vocab, budget)
    tokens = ctx + [SEP] + list(target.tokens)
    mask = [False] * (len(ctx) + 1) + [True] * len(target.tokens)
    return tokens, mask


def loss_G(
    model: TransformerLM, context: list[Utterance], target: GeneratorTarget, vocab: Vocab
) -> torch.Tensor:
    """NLL of the target given the flattened context (context never scored)."""
    tokens, mask = training_sequence(context, target, vocab, model.cfg.max_len)
    return seqmodel.nll_loss(model, tokens, mask)


@dataclass
class GenerationResult:
    segments: list[Segment]
    tokens: list[int]
    degenerate: bool

    @property
    def has_description(self) -> bool:
        return any(isinstance(s, ImageSegment) for s in self.segments)


def generate_response(
    model: TransformerLM,
    context: list[Utterance],
    vocab: Vocab,
    beam: int = 5,
    pure_text: bool = False,
    max_new: int = 48,
) -> GenerationResult:
    """Beam decode until [EOS], then split into text / description segments.
    pure_text blocks [DST], so no description segment can ever appear."""
    max_new = min(max_new, model.cfg.max_len - 1)
    prefix = flatten_context(context, vocab, model.cfg.max_len - max_new - 1) + [SEP]
    blocked = {DST} if pure_text else set()
    generated = seqmodel.decode_greedy_or_beam(
        model, prefix, beam=beam, stop_id=EOS, max_new=max_new, blocked_ids=blocked
    )
    parsed = parse_segments(generated, vocab)
    segments = parsed.segments
    degenerate = all(t < 4 for t in generated)  # nothing but control tokens
    if degenerate and not segments:
        segments = [TextSegment("")]
    return GenerationResult(segments=segments, tokens=generated, degenerate=degenerate)
