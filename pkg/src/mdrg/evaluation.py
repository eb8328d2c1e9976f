"""Automatic metrics: intent F1, text generation quality (PPL, BLEU-1/2,
ROUGE-L, token F1), and image quality (FID, IS).

Desk-scale backends stand in for the usual large feature/classifier networks:
FID features are pooled codec encoder activations and IS uses a small shape
classifier trained on the synthetic corpus. Reports record the backend names.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from . import checkpoint, seqmodel
from .codec import VqCodec

BLEU_EPS = 1e-9
FID_EIG_CLAMP = 1e-10
FID_COV_REG = 1e-6


class MetricError(ValueError):
    pass


def intent_f1(preds: list[bool], golds: list[bool]) -> tuple[float, float, float]:
    """Binary F1 on the positive (image-intent) class."""
    if len(preds) != len(golds):
        raise MetricError(f"length mismatch: {len(preds)} preds vs {len(golds)} golds")
    if not any(golds):
        raise MetricError("intent F1 needs at least one positive gold")
    tp = sum(1 for p, g in zip(preds, golds) if p and g)
    fp = sum(1 for p, g in zip(preds, golds) if p and not g)
    fn = sum(1 for p, g in zip(preds, golds) if not p and g)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps: list[str], refs: list[str], n: int = 2) -> float:
    """Corpus BLEU: clipped modified n-gram precision, geometric mean up to
    order n, brevity penalty; zero-count orders floored at 1e-9."""
    if len(hyps) != len(refs):
        raise MetricError("hypothesis / reference count mismatch")
    if not refs or any(not r.split() for r in refs):
        raise MetricError("empty reference")
    hyp_len = ref_len = 0
    matches = [0] * n
    totals = [0] * n
    for hyp, ref in zip(hyps, refs):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for k in range(1, n + 1):
            hg, rg = _ngrams(h, k), _ngrams(r, k)
            matches[k - 1] += sum(min(c, rg[g]) for g, c in hg.items())
            totals[k - 1] += max(0, len(h) - k + 1)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for k in range(n):
        p = matches[k] / totals[k] if totals[k] else 0.0
        log_p += math.log(max(p, BLEU_EPS))
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p / n)


def _lcs(a: list[str], b: list[str]) -> int:
    dp = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, start=1):
            cur = dp[j]
            dp[j] = prev + 1 if x == y else max(dp[j], dp[j - 1])
            prev = cur
    return dp[len(b)]


def rouge_l(hyps: list[str], refs: list[str]) -> float:
    """Mean per-pair LCS F-measure (beta = 1)."""
    if len(hyps) != len(refs):
        raise MetricError("hypothesis / reference count mismatch")
    if not refs or any(not r.split() for r in refs):
        raise MetricError("empty reference")
    scores = []
    for hyp, ref in zip(hyps, refs):
        h, r = hyp.split(), ref.split()
        lcs = _lcs(h, r) if h else 0
        if lcs == 0:
            scores.append(0.0)
            continue
        p, rec = lcs / len(h), lcs / len(r)
        scores.append(2 * p * rec / (p + rec))
    return float(np.mean(scores))


def token_f1(hyps: list[str], refs: list[str]) -> float:
    """Mean per-pair unigram F1 with multiset clipping."""
    if len(hyps) != len(refs):
        raise MetricError("hypothesis / reference count mismatch")
    if not refs or any(not r.split() for r in refs):
        raise MetricError("empty reference")
    scores = []
    for hyp, ref in zip(hyps, refs):
        h, r = hyp.split(), ref.split()
        overlap = sum((Counter(h) & Counter(r)).values())
        if overlap == 0 or not h:
            scores.append(0.0)
            continue
        p, rec = overlap / len(h), overlap / len(r)
        scores.append(2 * p * rec / (p + rec))
    return float(np.mean(scores))


def ppl_from_loss(loss: float) -> float:
    return math.exp(loss)


def perplexity(model, token_batches) -> float:
    """exp of token-mean NLL, teacher-forced; same reduction as the training
    loss so exp(loss) == PPL exactly."""
    total_nll = 0.0
    total_tok = 0
    with torch.no_grad():
        for tokens, mask in token_batches:
            n = int(np.sum(mask))
            loss = seqmodel.nll_loss(model, tokens, mask)
            total_nll += float(loss) * n
            total_tok += n
    if total_tok == 0:
        raise MetricError("no scored tokens")
    return math.exp(total_nll / total_tok)


# --- image metrics --------------------------------------------------------


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; tiny negative
    eigenvalues clamp to zero."""
    sym = (mat + mat.T) / 2.0
    w, v = np.linalg.eigh(sym)
    w = np.where(w < FID_EIG_CLAMP, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def fid_from_stats(
    mu_a: np.ndarray, sigma_a: np.ndarray, mu_b: np.ndarray, sigma_b: np.ndarray
) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with the cross term
    computed as Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2))."""
    diff = mu_a - mu_b
    root_a = _sqrtm_psd(sigma_a)
    cross = _sqrtm_psd(root_a @ sigma_b @ root_a)
    return float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * np.trace(cross))


def _stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    if features.shape[0] < 2:
        sigma = np.zeros((features.shape[1], features.shape[1]))
    else:
        sigma = np.cov(features, rowvar=False)
    if features.shape[0] < features.shape[1] + 1:
        sigma = sigma + FID_COV_REG * np.eye(features.shape[1])
    return mu, sigma


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    mu_a, sigma_a = _stats(a)
    mu_b, sigma_b = _stats(b)
    return fid_from_stats(mu_a, sigma_a, mu_b, sigma_b)


def inception_score(probs: np.ndarray, splits: int = 10) -> tuple[float, float]:
    """Per split: exp(mean KL(p(y|x) || mean p)); returns (mean, std) over
    splits."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise MetricError("probs must be (N, C)")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6) or np.any(p < -1e-12):
        raise MetricError("rows must be distributions summing to 1")
    scores = []
    for chunk in np.array_split(p, min(splits, p.shape[0])):
        marginal = chunk.mean(axis=0, keepdims=True)
        kl = np.where(chunk > 0, chunk * (np.log(chunk, where=chunk > 0) - np.log(marginal)), 0.0)
        scores.append(math.exp(kl.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


@torch.no_grad()
def codec_features(codec: VqCodec, images: np.ndarray) -> np.ndarray:
    """FID feature backend: encoder activations mean-pooled over the grid."""
    t = torch.from_numpy(np.ascontiguousarray(images)).float()
    grid = codec.encode(t)
    return grid.mean(dim=(1, 2)).double().numpy()


# --- shape classifier (IS / consistency backend) --------------------------


class ShapeClassifier(nn.Module):
    def __init__(self, classes: tuple[str, ...], image_size: int, hidden: int = 64):
        super().__init__()
        self.classes = tuple(classes)
        self.image_size = image_size
        self.fc1 = nn.Linear(image_size * image_size * 3, hidden)
        self.fc2 = nn.Linear(hidden, len(classes))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        flat = images.reshape(images.shape[0], -1) * 2.0 - 1.0
        return self.fc2(torch.tanh(self.fc1(flat)))

    @torch.no_grad()
    def predict_probs(self, images: np.ndarray) -> np.ndarray:
        t = torch.from_numpy(np.ascontiguousarray(images)).float()
        return torch.softmax(self(t).double(), dim=-1).numpy()

    @torch.no_grad()
    def predict(self, images: np.ndarray) -> list[str]:
        probs = self.predict_probs(images)
        return [self.classes[int(i)] for i in probs.argmax(axis=1)]


def train_shape_classifier(
    images: np.ndarray,
    labels: list[str],
    classes: tuple[str, ...],
    image_size: int,
    steps: int = 500,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> ShapeClassifier:
    torch.manual_seed(seed)
    clf = ShapeClassifier(classes, image_size)
    idx = torch.tensor([classes.index(l) for l in labels], dtype=torch.long)
    data = torch.from_numpy(np.ascontiguousarray(images)).float()
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        take = torch.from_numpy(rng.integers(0, data.shape[0], size=min(batch_size, data.shape[0])))
        loss = nn.functional.cross_entropy(clf(data[take]), idx[take])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return clf


def save_classifier(path: str, clf: ShapeClassifier) -> None:
    tensors = {k: v.detach().numpy().astype(np.float32) for k, v in clf.named_parameters()}
    checkpoint.save_checkpoint(
        path, {"classifier": {"classes": list(clf.classes), "image_size": clf.image_size}}, tensors
    )


def load_classifier(path: str) -> ShapeClassifier:
    config, tensors = checkpoint.load_checkpoint(path)
    meta = config["classifier"]
    hidden = tensors["fc1.weight"].shape[0]
    clf = ShapeClassifier(tuple(meta["classes"]), meta["image_size"], hidden=hidden)
    with torch.no_grad():
        for name, p in clf.named_parameters():
            p.copy_(torch.from_numpy(tensors[name]))
    return clf


# --- report ---------------------------------------------------------------


@dataclass
class TextGenMetrics:
    ppl: float | None = None
    bleu1: float | None = None
    bleu2: float | None = None
    rouge_l: float | None = None
    token_f1: float | None = None
    count: int = 0


@dataclass
class MetricsReport:
    intent_precision: float | None = None
    intent_recall: float | None = None
    intent_f1: float | None = None
    description: TextGenMetrics = field(default_factory=TextGenMetrics)
    response: TextGenMetrics = field(default_factory=TextGenMetrics)
    fid: float | None = None
    is_mean: float | None = None
    is_std: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    backend: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def table(self) -> str:
        def f(x):
            return "--" if x is None else f"{x:.4g}"

        lines = [
            "metric group      | values",
            "------------------+-------------------------------------------------",
            f"intent            | P {f(self.intent_precision)}  R {f(self.intent_recall)}  F1 {f(self.intent_f1)}",
            f"description gen   | PPL {f(self.description.ppl)}  B-1 {f(self.description.bleu1)}  "
            f"B-2 {f(self.description.bleu2)}  Rouge {f(self.description.rouge_l)}  F1 {f(self.description.token_f1)}",
            f"image gen         | FID {f(self.fid)}  IS {f(self.is_mean)} +/- {f(self.is_std)}",
            f"text response gen | PPL {f(self.response.ppl)}  B-1 {f(self.response.bleu1)}  "
            f"B-2 {f(self.response.bleu2)}  Rouge {f(self.response.rouge_l)}  F1 {f(self.response.token_f1)}",
        ]
        return "\n".join(lines)
