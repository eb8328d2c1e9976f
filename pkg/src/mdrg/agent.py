"""Full inference loop: generate a text/description sequence from the context,
translate each description to candidate images, rerank, and return ordered
reply events."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from . import generator as gen_mod
from . import translator as tr_mod
from .codec import VqCodec
from .evaluation import ShapeClassifier, load_classifier
from .generator import ImageSegment, TextSegment, Utterance
from .seqmodel import TransformerLM
from .tokenizer import Vocab
from .training import RunState, TrainingConfig, load_run_state
from .translator import DualEncoderScorer, MatchScorer


class AgentError(RuntimeError):
    pass


@dataclass
class TextReply:
    text: str


@dataclass
class ImageReply:
    description: str
    image: np.ndarray
    candidates: list[np.ndarray]  # rerank order; candidates[0] is the reply image


@dataclass
class AgentReply:
    events: list  # TextReply | ImageReply in response order
    degenerate: bool


class ChatAgent:
    def __init__(
        self,
        cfg: TrainingConfig,
        vocab: Vocab,
        generator: TransformerLM,
        translator: TransformerLM,
        codec: VqCodec,
        scorer: MatchScorer,
        classifier: ShapeClassifier | None = None,
    ):
        self.cfg = cfg
        self.vocab = vocab
        self.generator = generator
        self.translator = translator
        self.codec = codec
        self.scorer = scorer
        self.classifier = classifier

    @classmethod
    def from_state(cls, state: RunState, scorer: MatchScorer, classifier=None) -> "ChatAgent":
        return cls(
            state.cfg, state.vocab, state.generator, state.translator, state.codec,
            scorer, classifier,
        )

    @classmethod
    def load(cls, model_dir: str) -> "ChatAgent":
        """Load state.mdrg + scorer.mdrg (+ classifier.mdrg when present)."""
        state_path = os.path.join(model_dir, "state.mdrg")
        scorer_path = os.path.join(model_dir, "scorer.mdrg")
        for p in (state_path, scorer_path):
            if not os.path.exists(p):
                raise AgentError(f"missing checkpoint {p}")
        state = load_run_state(state_path)
        scorer = tr_mod.load_scorer(scorer_path, state.vocab)
        clf_path = os.path.join(model_dir, "classifier.mdrg")
        classifier = load_classifier(clf_path) if os.path.exists(clf_path) else None
        return cls.from_state(state, scorer, classifier)

    def respond(
        self,
        context: list[Utterance],
        pure_text: bool = False,
        beam: int = 5,
        n_samples: int = tr_mod.DEFAULT_N_SAMPLES,
        temperature: float = 1.0,
        seed: int | None = None,
    ) -> AgentReply:
        result = gen_mod.generate_response(
            self.generator, context, self.vocab, beam=beam, pure_text=pure_text
        )
        rng = torch.Generator()
        if seed is not None:
            rng.manual_seed(seed)
        else:
            rng.seed()
        events: list = []
        for seg in result.segments:
            if isinstance(seg, TextSegment):
                events.append(TextReply(seg.text))
                continue
            events.append(self._image_reply(seg, n_samples, temperature, rng))
        return AgentReply(events=events, degenerate=result.degenerate)

    def _image_reply(
        self, seg: ImageSegment, n_samples: int, temperature: float, rng: torch.Generator
    ) -> ImageReply:
        desc_tokens = self.vocab.encode(seg.description)[: self.cfg.max_desc_tokens]
        token_grids = tr_mod.generate_image_tokens(
            self.translator,
            desc_tokens,
            text_vocab=self.cfg.vocab_size,
            n_image=self.cfg.codec_config.tokens_per_image,
            codebook_size=self.cfg.codebook_size,
            n_samples=n_samples,
            temperature=temperature,
            generator=rng,
        )
        images = [tr_mod.tokens_to_image(self.codec, s) for s in token_grids]
        ranked = tr_mod.rerank(self.scorer, seg.description, images)
        ordered = [images[i] for i, _ in ranked]
        return ImageReply(description=seg.description, image=ordered[0], candidates=ordered)
