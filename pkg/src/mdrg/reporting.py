"""Corpus-level evaluation: compare prediction dialogues against gold
dialogues and assemble the metrics report."""

from __future__ import annotations

import os

import numpy as np

from . import evaluation
from .datasets import MultimodalDialogue, shape_class_of
from .evaluation import MetricsReport, TextGenMetrics
from .generator import ImageSegment, TextSegment, build_target, training_sequence
from .training import RunState


def first_description(d: MultimodalDialogue) -> str | None:
    for seg in d.response.segments:
        if isinstance(seg, ImageSegment):
            return seg.description
    return None


def joined_text(d: MultimodalDialogue) -> str | None:
    parts = [seg.text for seg in d.response.segments if isinstance(seg, TextSegment)]
    return " ".join(parts) if parts else None


def _pair_up(preds: list[MultimodalDialogue], golds: list[MultimodalDialogue]):
    by_id = {p.dialogue_id: p for p in preds}
    for g in golds:
        yield by_id.get(g.dialogue_id), g


class ImageStore:
    """Resolves image_path fields to pixel arrays, from disk or memory."""

    def __init__(self, root: str | None = None, memory: dict[str, np.ndarray] | None = None):
        self.root = root
        self.memory = memory or {}

    def get(self, path: str | None) -> np.ndarray | None:
        if path is None:
            return None
        if path in self.memory:
            return self.memory[path]
        if self.root is not None:
            full = os.path.join(self.root, path)
            if os.path.exists(full):
                from . import imageio

                return imageio.load_png(full)
        return None

    def gather(self, dialogues: list[MultimodalDialogue]) -> list[np.ndarray]:
        out = []
        for d in dialogues:
            for seg in d.response.segments:
                if isinstance(seg, ImageSegment):
                    img = self.get(seg.image_path)
                    if img is not None:
                        out.append(img)
        return out


def model_ppl(state: RunState, golds: list[MultimodalDialogue]) -> tuple[float | None, float | None]:
    """Teacher-forced generator perplexity over description spans and text
    spans of the gold targets (exp of token-mean NLL, same reduction as the
    training loss)."""
    desc_batches = []
    text_batches = []
    for g in golds:
        target = build_target(g.response, state.vocab)
        try:
            tokens, mask = training_sequence(
                list(g.context), target, state.vocab, state.cfg.gen_max_len
            )
        except Exception:
            continue
        offset = len(tokens) - len(target.tokens)
        desc_mask = [False] * len(tokens)
        text_mask = [False] * len(tokens)
        for kind, start, end in target.spans:
            for i in range(start, end):
                (desc_mask if kind == "description" else text_mask)[offset + i] = True
        if any(desc_mask):
            desc_batches.append((tokens, desc_mask))
        if any(text_mask):
            text_batches.append((tokens, text_mask))
    desc_ppl = evaluation.perplexity(state.generator, desc_batches) if desc_batches else None
    text_ppl = evaluation.perplexity(state.generator, text_batches) if text_batches else None
    return desc_ppl, text_ppl


def description_image_consistency(
    preds: list[MultimodalDialogue],
    store: ImageStore,
    classifier,
    shapes: tuple[str, ...],
) -> tuple[float | None, int]:
    """Fraction of predicted image segments whose decoded image is classified
    as the shape named in their own description."""
    total = 0
    hits = 0
    for p in preds:
        for seg in p.response.segments:
            if not isinstance(seg, ImageSegment):
                continue
            total += 1
            img = store.get(seg.image_path)
            named = shape_class_of(seg.description, shapes)
            if img is None or named is None:
                continue
            label = classifier.predict(img[None, :, :, :])[0]
            if label == named:
                hits += 1
    if total == 0:
        return None, 0
    return hits / total, total


def build_report(
    preds: list[MultimodalDialogue],
    golds: list[MultimodalDialogue],
    pred_store: ImageStore | None = None,
    gold_store: ImageStore | None = None,
    state: RunState | None = None,
    classifier=None,
) -> MetricsReport:
    report = MetricsReport()
    pairs = list(_pair_up(preds, golds))
    report.counts["dialogues"] = len(golds)
    report.counts["predictions"] = sum(1 for p, _ in pairs if p is not None)

    pred_intents = [p is not None and p.response.has_image for p, _ in pairs]
    gold_intents = [g.response.has_image for _, g in pairs]
    try:
        precision, recall, f1 = evaluation.intent_f1(pred_intents, gold_intents)
        report.intent_precision, report.intent_recall, report.intent_f1 = precision, recall, f1
    except evaluation.MetricError:
        pass

    desc_refs, desc_hyps = [], []
    text_refs, text_hyps = [], []
    for p, g in pairs:
        ref_desc = first_description(g)
        if ref_desc:
            desc_refs.append(ref_desc)
            desc_hyps.append((first_description(p) if p else None) or "")
        ref_text = joined_text(g)
        if ref_text:
            text_refs.append(ref_text)
            text_hyps.append((joined_text(p) if p else None) or "")

    def text_block(hyps: list[str], refs: list[str]) -> TextGenMetrics:
        if not refs:
            return TextGenMetrics()
        return TextGenMetrics(
            bleu1=evaluation.bleu(hyps, refs, 1),
            bleu2=evaluation.bleu(hyps, refs, 2),
            rouge_l=evaluation.rouge_l(hyps, refs),
            token_f1=evaluation.token_f1(hyps, refs),
            count=len(refs),
        )

    report.description = text_block(desc_hyps, desc_refs)
    report.response = text_block(text_hyps, text_refs)

    if state is not None:
        desc_ppl, text_ppl = model_ppl(state, golds)
        report.description.ppl = desc_ppl
        report.response.ppl = text_ppl

    if state is not None and pred_store is not None and gold_store is not None:
        pred_images = pred_store.gather(preds)
        gold_images = gold_store.gather(golds)
        report.counts["pred_images"] = len(pred_images)
        report.counts["gold_images"] = len(gold_images)
        if pred_images and gold_images:
            feats_a = evaluation.codec_features(state.codec, np.stack(gold_images))
            feats_b = evaluation.codec_features(state.codec, np.stack(pred_images))
            report.fid = evaluation.fid(feats_a, feats_b)
            report.backend["fid_features"] = "codec-encoder-pooled"
        if pred_images and classifier is not None:
            probs = classifier.predict_probs(np.stack(pred_images))
            report.is_mean, report.is_std = evaluation.inception_score(probs)
            report.backend["is_classifier"] = "synthetic-shape-classifier"
    return report
