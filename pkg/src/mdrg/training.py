"""Staged low-resource training recipe.

Stages: pretrain the text generator on text-only dialogues, pretrain the
image codec on images, pretrain the translator on <description, image> pairs,
then freeze the codec and jointly fine-tune generator + translator on the
small multimodal set with the integrated loss L_G + lambda * L_F. Inside the
fine-tune stage the translator alone trains for a warm-up block before the
joint steps (24:1 ratio by default).

Determinism: batches are drawn from a per-step seeded RNG, so an interrupted
run resumed from a checkpoint reproduces the original loss curve exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import checkpoint as ckpt
from . import codec as codec_mod
from . import evaluation, seqmodel, translator
from .codec import CodecConfig, VqCodec, vq_loss
from .datasets import SyntheticCorpus, TextDialogue
from .generator import Response, TextSegment, Utterance, build_target, training_sequence
from .optim import AdamState, adam_step
from .seqmodel import SeqModelConfig, TransformerLM
from .tokenizer import PAD, Vocab, train_vocab
from .translator import JointStream, build_stream, loss_F

STAGES = ("pretrain_g", "pretrain_v", "pretrain_f", "joint_finetune")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 0
    lr: float = 1e-3  # desk-scale; paper-scale runs use 1e-5
    batch_size: int = 8
    lambda_: float = 0.2
    vocab_size: int = 512
    gen_layers: int = 2
    gen_heads: int = 4
    gen_hidden: int = 64
    gen_max_len: int = 160
    tr_layers: int = 2
    tr_heads: int = 4
    tr_hidden: int = 64
    max_desc_tokens: int = 32
    image_size: int = 32
    grid_size: int = 4
    codebook_size: int = 64
    embed_dim: int = 16
    steps_pretrain_g: int = 1500
    steps_pretrain_v: int = 1500
    steps_pretrain_f: int = 2000
    steps_joint: int = 2000
    joint_warm_f_steps: int = 1920  # translator-only block; 24:1 warm:joint ratio
    val_every: int = 100
    val_cap: int = 64
    patience: int = 5

    def __post_init__(self) -> None:
        if self.lambda_ < 0:
            raise TrainingError("lambda must be >= 0")
        if self.joint_warm_f_steps > self.steps_joint:
            raise TrainingError("warm-up steps exceed the joint stage budget")

    def stage_budget(self, stage: str) -> int:
        return {
            "pretrain_g": self.steps_pretrain_g,
            "pretrain_v": self.steps_pretrain_v,
            "pretrain_f": self.steps_pretrain_f,
            "joint_finetune": self.steps_joint,
        }[stage]

    @property
    def codec_config(self) -> CodecConfig:
        return CodecConfig(
            image_size=self.image_size,
            grid_size=self.grid_size,
            codebook_size=self.codebook_size,
            embed_dim=self.embed_dim,
        )

    @property
    def generator_config(self) -> SeqModelConfig:
        return SeqModelConfig(
            vocab_size=self.vocab_size,
            layers=self.gen_layers,
            heads=self.gen_heads,
            hidden=self.gen_hidden,
            max_len=self.gen_max_len,
        )

    @property
    def translator_config(self) -> SeqModelConfig:
        return SeqModelConfig(
            vocab_size=self.vocab_size + self.codebook_size,
            layers=self.tr_layers,
            heads=self.tr_heads,
            hidden=self.tr_hidden,
            max_len=self.max_desc_tokens + 1 + self.grid_size * self.grid_size,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)


@dataclass
class RunState:
    cfg: TrainingConfig
    vocab: Vocab
    generator: TransformerLM
    translator: TransformerLM
    codec: VqCodec
    opt_g: AdamState
    opt_f: AdamState
    opt_v: AdamState
    steps_done: dict[str, int] = field(default_factory=lambda: {s: 0 for s in STAGES})
    stage_meta: dict[str, dict] = field(default_factory=dict)
    codec_frozen: bool = False

    @classmethod
    def fresh(cls, cfg: TrainingConfig, vocab: Vocab) -> "RunState":
        if vocab.size != cfg.vocab_size:
            raise TrainingError(
                f"vocab size {vocab.size} != configured vocab_size {cfg.vocab_size}"
            )
        torch.manual_seed(cfg.seed)
        gen = TransformerLM(cfg.generator_config)
        torch.manual_seed(cfg.seed + 1)
        tr = TransformerLM(cfg.translator_config)
        torch.manual_seed(cfg.seed + 2)
        codec = VqCodec(cfg.codec_config)
        return cls(
            cfg=cfg,
            vocab=vocab,
            generator=gen,
            translator=tr,
            codec=codec,
            opt_g=AdamState.for_params(dict(gen.named_parameters())),
            opt_f=AdamState.for_params(dict(tr.named_parameters())),
            opt_v=AdamState.for_params(dict(codec.named_parameters())),
        )


def joint_loss(loss_g: float, loss_f: float, lam: float) -> float:
    """Integrated objective: L_G + lambda * L_F."""
    out = loss_g + lam * loss_f
    if math.isnan(out):
        raise TrainingError("joint loss is NaN")
    return out


# --- checkpointing --------------------------------------------------------


def _named(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.named_parameters())


def save_run_state(path: str, state: RunState) -> None:
    tensors: dict[str, np.ndarray] = {}

    def put(prefix: str, params: dict[str, torch.Tensor]) -> None:
        for name, p in params.items():
            tensors[f"{prefix}/{name}"] = p.detach().cpu().numpy().astype(np.float32)

    put("generator", _named(state.generator))
    put("translator", _named(state.translator))
    put("codec", _named(state.codec))
    for tag, opt in (("opt_g", state.opt_g), ("opt_f", state.opt_f), ("opt_v", state.opt_v)):
        put(f"{tag}/m", opt.m)
        put(f"{tag}/v", opt.v)
    config = {
        "training": state.cfg.to_dict(),
        "vocab": json.loads(state.vocab.to_json()),
        "steps_done": state.steps_done,
        "stage_meta": state.stage_meta,
        "opt_t": {"g": state.opt_g.t, "f": state.opt_f.t, "v": state.opt_v.t},
        "codec_frozen": state.codec_frozen,
    }
    ckpt.save_checkpoint(path, config, tensors)


def load_run_state(path: str, expected: TrainingConfig | None = None) -> RunState:
    config, tensors = ckpt.load_checkpoint(path)
    cfg = TrainingConfig.from_dict(config["training"])
    if expected is not None and expected != cfg:
        raise TrainingError(
            f"checkpoint config mismatch: saved {cfg.to_dict()} vs expected {expected.to_dict()}"
        )
    vocab = Vocab.from_json(json.dumps(config["vocab"]))
    state = RunState.fresh(cfg, vocab)

    def take(prefix: str, params: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name, p in params.items():
                key = f"{prefix}/{name}"
                if key not in tensors:
                    raise TrainingError(f"{path}: checkpoint missing tensor {key!r}")
                arr = torch.from_numpy(np.ascontiguousarray(tensors[key]))
                if tuple(arr.shape) != tuple(p.shape):
                    raise TrainingError(
                        f"{path}: tensor {key!r} has shape {tuple(arr.shape)}, model needs {tuple(p.shape)}"
                    )
                p.copy_(arr)

    take("generator", _named(state.generator))
    take("translator", _named(state.translator))
    take("codec", _named(state.codec))
    for tag, opt in (("opt_g", state.opt_g), ("opt_f", state.opt_f), ("opt_v", state.opt_v)):
        take(f"{tag}/m", opt.m)
        take(f"{tag}/v", opt.v)
    state.opt_g.t = config["opt_t"]["g"]
    state.opt_f.t = config["opt_t"]["f"]
    state.opt_v.t = config["opt_t"]["v"]
    state.steps_done = {s: int(config["steps_done"].get(s, 0)) for s in STAGES}
    state.stage_meta = config.get("stage_meta", {})
    state.codec_frozen = bool(config.get("codec_frozen", False))
    return state


# --- batch preparation ----------------------------------------------------


def _pad_batch(items: list[tuple[list[int], list[bool]]]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(t) for t, _ in items)
    tokens = torch.full((len(items), width), PAD, dtype=torch.long)
    mask = torch.zeros((len(items), width), dtype=torch.bool)
    for i, (t, m) in enumerate(items):
        tokens[i, : len(t)] = torch.tensor(t, dtype=torch.long)
        mask[i, : len(m)] = torch.tensor(m, dtype=torch.bool)
    return tokens, mask


def text_dialogue_example(d: TextDialogue, vocab: Vocab, max_len: int):
    ctx = [Utterance(speaker=i % 2, text=t) for i, t in enumerate(d.context)]
    target = build_target(Response(segments=(TextSegment(d.response),)), vocab)
    return training_sequence(ctx, target, vocab, max_len)


def multimodal_example(dlg, vocab: Vocab, max_len: int):
    target = build_target(dlg.response, vocab)
    return training_sequence(list(dlg.context), target, vocab, max_len)


def _image_stream(
    state: RunState, description: str, image: np.ndarray
) -> JointStream:
    desc = state.vocab.encode(description)[: state.cfg.max_desc_tokens]
    tokens = codec_mod.image_to_tokens(state.codec, image)
    return build_stream(
        desc,
        tokens,
        text_vocab=state.cfg.vocab_size,
        n_image=state.cfg.codec_config.tokens_per_image,
        max_desc=state.cfg.max_desc_tokens,
    )


@dataclass
class StageData:
    """Pre-tokenized training/validation items for one stage."""

    train_lg: list | None = None
    val_lg: list | None = None
    train_streams: list | None = None
    val_streams: list | None = None
    train_images: torch.Tensor | None = None
    val_images: torch.Tensor | None = None
    train_has_image: list | None = None  # joint stage: stream index or None per item

    @property
    def n_train(self) -> int:
        for x in (self.train_lg, self.train_streams, self.train_images):
            if x is not None:
                return len(x)
        raise TrainingError("stage has no training items")


def _holdout_split(items: list, frac: float = 0.1) -> tuple[list, list]:
    n_val = max(1, int(len(items) * frac))
    return items[:-n_val], items[-n_val:]


def prepare_stage(stage: str, corpus: SyntheticCorpus, state: RunState) -> StageData:
    cfg = state.cfg
    if stage == "pretrain_g":
        items = [text_dialogue_example(d, state.vocab, cfg.gen_max_len) for d in corpus.d_c]
        if not items:
            raise TrainingError("pretrain_g: text dialogue corpus is empty")
        train, val = _holdout_split(items)
        return StageData(train_lg=train, val_lg=val)
    if stage == "pretrain_v":
        paths = sorted({p.image_path for p in corpus.d_p})
        if not paths:
            raise TrainingError("pretrain_v: no images in pair corpus")
        stack = np.stack([corpus.image(p) for p in paths])
        data = torch.from_numpy(stack).float()
        n_val = max(1, int(len(paths) * 0.1))
        return StageData(train_images=data[:-n_val] if len(paths) > 1 else data, val_images=data[-n_val:])
    if stage == "pretrain_f":
        streams = [
            _image_stream(state, p.description, corpus.image(p.image_path)) for p in corpus.d_p
        ]
        if not streams:
            raise TrainingError("pretrain_f: pair corpus is empty")
        train, val = _holdout_split(streams)
        return StageData(train_streams=train, val_streams=val)
    if stage == "joint_finetune":
        def build(dialogues):
            lg, has_img, streams = [], [], []
            for dlg in dialogues:
                lg.append(multimodal_example(dlg, state.vocab, cfg.gen_max_len))
                img_seg = next(
                    (s for s in dlg.response.segments if not isinstance(s, TextSegment)), None
                )
                if img_seg is not None and img_seg.image_path is not None:
                    streams.append(
                        _image_stream(state, img_seg.description, corpus.image(img_seg.image_path))
                    )
                    has_img.append(len(streams) - 1)
                else:
                    has_img.append(None)
            return lg, has_img, streams

        train_lg, train_has, train_streams = build(corpus.d_s["train"])
        val_lg, _, val_streams = build(corpus.d_s["dev"])
        if not train_lg:
            raise TrainingError("joint_finetune: train split is empty")
        return StageData(
            train_lg=train_lg,
            val_lg=val_lg,
            train_streams=train_streams,
            val_streams=val_streams,
            train_has_image=train_has,
        )
    raise TrainingError(f"unknown stage {stage!r}")


# --- steps ----------------------------------------------------------------


def _loss_lg(state: RunState, items: list) -> torch.Tensor:
    tokens, mask = _pad_batch(items)
    return seqmodel.nll_loss(state.generator, tokens, mask)


def joint_finetune_step(
    state: RunState, lg_items: list, streams: list[JointStream], lam: float, lr: float
) -> dict:
    """One integrated-loss step: generator sees dL_G, translator sees
    lambda * dL_F, the codec is untouched by construction (image tokens are
    pre-extracted data)."""
    if not lg_items:
        raise TrainingError("joint step needs at least one scorable item")
    lg = _loss_lg(state, lg_items)
    lf = loss_F(state.translator, streams) if streams else None
    total = lg + lam * lf if lf is not None else lg
    state.generator.zero_grad(set_to_none=True)
    state.translator.zero_grad(set_to_none=True)
    total.backward()
    g_params = _named(state.generator)
    adam_step(
        g_params,
        {k: p.grad if p.grad is not None else torch.zeros_like(p) for k, p in g_params.items()},
        state.opt_g,
        lr=lr,
    )
    f_params = _named(state.translator)
    adam_step(
        f_params,
        {k: p.grad if p.grad is not None else torch.zeros_like(p) for k, p in f_params.items()},
        state.opt_f,
        lr=lr,
    )
    return {
        "loss_G": float(lg.detach()),
        "loss_F": float(lf.detach()) if lf is not None else None,
        "loss_total": float(total.detach()),
    }


def _validation_loss(stage: str, data: StageData, state: RunState) -> float:
    cfg = state.cfg
    cap = cfg.val_cap
    with torch.no_grad():
        if stage == "pretrain_g":
            return float(_loss_lg(state, data.val_lg[:cap]))
        if stage == "pretrain_v":
            loss, _ = vq_loss(state.codec, data.val_images[:cap])
            return float(loss)
        if stage == "pretrain_f":
            return float(loss_F(state.translator, data.val_streams[:cap]))
        lg = float(_loss_lg(state, data.val_lg[:cap]))
        lf = float(loss_F(state.translator, data.val_streams[:cap])) if data.val_streams else 0.0
        return joint_loss(lg, lf, cfg.lambda_)


def run_stage(
    stage: str,
    corpus: SyntheticCorpus,
    state: RunState,
    log_path: str | None = None,
    best_path: str | None = None,
    stop_at_step: int | None = None,
) -> list[dict]:
    """Run (or resume) one stage. Logs one JSON record per step; validation
    runs every val_every steps with early stopping after `patience`
    non-improving validations."""
    if stage not in STAGES:
        raise TrainingError(f"unknown stage {stage!r}")
    cfg = state.cfg
    data = prepare_stage(stage, corpus, state)
    stage_id = STAGES.index(stage)
    budget = cfg.stage_budget(stage)
    meta = state.stage_meta.setdefault(stage, {"best_val": None, "since_best": 0, "stopped": False})
    log: list[dict] = []
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    codec_params = _named(state.codec)
    try:
        start = state.steps_done[stage]
        for step in range(start, budget):
            if stop_at_step is not None and step >= stop_at_step:
                break
            if meta["stopped"]:
                break
            rng = np.random.default_rng([cfg.seed, stage_id, step])
            take = rng.integers(0, data.n_train, size=min(cfg.batch_size, data.n_train))
            record: dict = {"step": step, "stage": stage, "loss_G": None, "loss_F": None}

            if stage == "pretrain_g":
                items = [data.train_lg[i] for i in take]
                loss = _loss_lg(state, items)
                _step_module(state.generator, state.opt_g, loss, cfg.lr)
                record["loss_G"] = float(loss.detach())
                record["loss_total"] = record["loss_G"]
            elif stage == "pretrain_v":
                batch = data.train_images[torch.from_numpy(take)]
                loss, _parts = vq_loss(state.codec, batch)
                if not torch.isfinite(loss):
                    raise TrainingError(f"codec loss diverged at step {step}")
                _step_module(state.codec, state.opt_v, loss, cfg.lr)
                record["loss_total"] = float(loss.detach())
            elif stage == "pretrain_f":
                streams = [data.train_streams[i] for i in take]
                loss = loss_F(state.translator, streams)
                _step_module(state.translator, state.opt_f, loss, cfg.lr)
                record["loss_F"] = float(loss.detach())
                record["loss_total"] = record["loss_F"]
            else:  # joint_finetune
                state.codec_frozen = True
                if step < cfg.joint_warm_f_steps:
                    if data.train_streams:
                        srng = np.random.default_rng([cfg.seed, stage_id, step, 1])
                        stake = srng.integers(
                            0, len(data.train_streams), size=min(cfg.batch_size, len(data.train_streams))
                        )
                        loss = loss_F(state.translator, [data.train_streams[i] for i in stake])
                        _step_module(state.translator, state.opt_f, loss, cfg.lr)
                        record["loss_F"] = float(loss.detach())
                        record["loss_total"] = record["loss_F"]
                    else:
                        record["loss_total"] = None
                else:
                    lg_items = [data.train_lg[i] for i in take]
                    stream_ids = [
                        data.train_has_image[i] for i in take if data.train_has_image[i] is not None
                    ]
                    streams = [data.train_streams[j] for j in stream_ids]
                    out = joint_finetune_step(state, lg_items, streams, cfg.lambda_, cfg.lr)
                    record.update(out)

            state.steps_done[stage] = step + 1
            is_last = step + 1 >= budget
            if (step + 1) % cfg.val_every == 0 or is_last:
                val = _validation_loss(stage, data, state)
                record["val_loss"] = val
                # During the translator-only warm block the joint validation
                # loss cannot improve through the generator; early stopping
                # only arms once the joint steps begin.
                in_warm = stage == "joint_finetune" and step + 1 <= cfg.joint_warm_f_steps
                if not in_warm:
                    best = meta["best_val"]
                    if best is None or val < best:
                        meta["best_val"] = val
                        meta["since_best"] = 0
                        if best_path:
                            save_run_state(best_path, state)
                    else:
                        meta["since_best"] += 1
                        if meta["since_best"] >= cfg.patience:
                            meta["stopped"] = True
            log.append(record)
            if log_f:
                log_f.write(json.dumps(record) + "\n")
    finally:
        if log_f:
            log_f.close()
    if stage == "joint_finetune":
        _check_frozen(codec_params, state)
    return log


def _step_module(module: torch.nn.Module, opt: AdamState, loss: torch.Tensor, lr: float) -> None:
    module.zero_grad(set_to_none=True)
    loss.backward()
    params = _named(module)
    adam_step(
        params,
        {k: p.grad if p.grad is not None else torch.zeros_like(p) for k, p in params.items()},
        opt,
        lr=lr,
    )


def _check_frozen(codec_params: dict[str, torch.Tensor], state: RunState) -> None:
    for name, p in _named(state.codec).items():
        if not torch.equal(p, codec_params[name]):
            raise TrainingError(f"frozen codec parameter {name!r} changed during joint fine-tune")


def run_full_recipe(
    corpus: SyntheticCorpus,
    cfg: TrainingConfig,
    workdir: str,
    vocab: Vocab | None = None,
) -> RunState:
    """All four stages in order, then the rerank scorer and the eval shape
    classifier. Writes vocab.json, state.mdrg, scorer.mdrg, classifier.mdrg
    and per-stage JSONL logs under workdir."""
    os.makedirs(workdir, exist_ok=True)
    logs_dir = os.path.join(workdir, "logs")
    os.makedirs(logs_dir, exist_ok=True)
    if vocab is None:
        vocab = train_vocab(corpus.text_lines(), cfg.vocab_size)
    vocab.save(os.path.join(workdir, "vocab.json"))
    state = RunState.fresh(cfg, vocab)
    for stage in STAGES:
        run_stage(stage, corpus, state, log_path=os.path.join(logs_dir, f"{stage}.jsonl"))
        save_run_state(os.path.join(workdir, "state.mdrg"), state)

    pairs = [(p.description, corpus.image(p.image_path)) for p in corpus.d_p]
    torch.manual_seed(cfg.seed + 10)
    scorer = translator.DualEncoderScorer(vocab, cfg.image_size)
    translator.train_dual_encoder(scorer, pairs, seed=cfg.seed)
    translator.save_scorer(os.path.join(workdir, "scorer.mdrg"), scorer)

    shapes = tuple(corpus.config.shapes)
    images = np.stack([corpus.image(p.image_path) for p in corpus.d_p])
    labels = [p.shape for p in corpus.d_p]
    clf = evaluation.train_shape_classifier(
        images, labels, shapes, cfg.image_size, seed=cfg.seed
    )
    evaluation.save_classifier(os.path.join(workdir, "classifier.mdrg"), clf)
    return state
