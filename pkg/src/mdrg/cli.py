"""Command-line entry points for every pipeline stage plus the inference
service. Exit codes: 0 success, 1 usage error, 2 runtime error.

The model/data root defaults to the MDRG_HOME env var (falling back to the
working directory): data lives at <root>/data, checkpoints at <root>/models.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import datasets, imageio, reporting, training
from .agent import ChatAgent
from .datasets import SyntheticWorldConfig, generate_synthetic, load_corpus, save_corpus
from .generator import ImageSegment, TextSegment
from .tokenizer import Vocab, train_vocab
from .training import RunState, TrainingConfig, load_run_state, run_stage, save_run_state


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _root() -> str:
    return os.environ.get("MDRG_HOME", ".")


def _data_dir(args) -> str:
    return args.data or os.path.join(_root(), "data")


def _models_dir(args) -> str:
    return args.models or os.path.join(_root(), "models")


def _load_config_doc(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return doc if isinstance(doc, dict) else {}


def _training_config(args, stage_key: str | None = None) -> TrainingConfig:
    doc = _load_config_doc(getattr(args, "config", None))
    section = doc.get("training", doc if "seed" in doc or "lr" in doc else {})
    cfg = TrainingConfig.from_dict(section) if section else TrainingConfig()
    overrides = {}
    for flag, field_name in (
        ("seed", "seed"),
        ("lr", "lr"),
        ("batch_size", "batch_size"),
        ("lambda_", "lambda_"),
        ("vocab_size", "vocab_size"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[field_name] = val
    if stage_key and getattr(args, "steps", None) is not None:
        overrides[stage_key] = args.steps
    return replace(cfg, **overrides) if overrides else cfg


def _world_config(args) -> SyntheticWorldConfig:
    doc = _load_config_doc(getattr(args, "config", None)).get("world", {})
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    for flag, key in (
        ("n_dialogues", "n_dialogues"),
        ("n_text_dialogues", "n_text_dialogues"),
        ("n_pairs", "n_pairs"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            doc[key] = val
    doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    return SyntheticWorldConfig(**doc)


def _load_or_init_state(args, stage_key: str | None) -> tuple[RunState, str]:
    models = _models_dir(args)
    os.makedirs(models, exist_ok=True)
    state_path = os.path.join(models, "state.mdrg")
    if os.path.exists(state_path):
        state = load_run_state(state_path)
        if getattr(args, "steps", None) is not None and stage_key:
            state.cfg = replace(state.cfg, **{stage_key: args.steps})
        return state, state_path
    cfg = _training_config(args, stage_key)
    vocab_path = os.path.join(models, "vocab.json")
    if not os.path.exists(vocab_path):
        raise RuntimeError(f"no vocabulary at {vocab_path}; run `mdrg tokenizer-train` first")
    vocab = Vocab.load(vocab_path)
    return RunState.fresh(cfg, vocab), state_path


# --- subcommands ----------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _world_config(args)
    out = args.out or _data_dir(args)
    corpus = generate_synthetic(cfg)
    save_corpus(corpus, out)
    n_train = len(corpus.d_s["train"])
    print(
        f"wrote corpus to {out}: {len(corpus.d_c)} text dialogues, "
        f"{len(corpus.d_p)} pairs, {n_train}/{len(corpus.d_s['dev'])}/{len(corpus.d_s['test'])} "
        f"multimodal train/dev/test dialogues, {len(corpus.images)} images"
    )
    return 0


def cmd_tokenizer_train(args) -> int:
    corpus = load_corpus(_data_dir(args))
    vocab = train_vocab(corpus.text_lines(), args.size)
    out = args.out or os.path.join(_models_dir(args), "vocab.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    vocab.save(out)
    print(f"trained vocabulary of size {vocab.size} -> {out}")
    return 0


def _stage_command(args, stage: str, stage_key: str) -> int:
    corpus = load_corpus(_data_dir(args))
    state, state_path = _load_or_init_state(args, stage_key)
    models = _models_dir(args)
    logs = os.path.join(models, "logs")
    os.makedirs(logs, exist_ok=True)
    log = run_stage(stage, corpus, state, log_path=os.path.join(logs, f"{stage}.jsonl"))
    save_run_state(state_path, state)
    final = log[-1]["loss_total"] if log else None
    print(f"{stage}: ran {len(log)} steps, final loss {final}, state -> {state_path}")

    if stage == "pretrain_v":
        import numpy as np

        from . import evaluation

        shapes = tuple(corpus.config.shapes)
        images = np.stack([corpus.image(p.image_path) for p in corpus.d_p])
        labels = [p.shape for p in corpus.d_p]
        clf = evaluation.train_shape_classifier(
            images, labels, shapes, state.cfg.image_size, seed=state.cfg.seed
        )
        evaluation.save_classifier(os.path.join(models, "classifier.mdrg"), clf)
        print(f"trained shape classifier -> {os.path.join(models, 'classifier.mdrg')}")
    if stage == "pretrain_f":
        import torch

        from . import translator as tr_mod

        pairs = [(p.description, corpus.image(p.image_path)) for p in corpus.d_p]
        torch.manual_seed(state.cfg.seed + 10)
        scorer = tr_mod.DualEncoderScorer(state.vocab, state.cfg.image_size)
        tr_mod.train_dual_encoder(scorer, pairs, seed=state.cfg.seed)
        tr_mod.save_scorer(os.path.join(models, "scorer.mdrg"), scorer)
        print(f"trained rerank scorer -> {os.path.join(models, 'scorer.mdrg')}")
    return 0


def cmd_generate(args) -> int:
    agent = ChatAgent.load(_models_dir(args))
    dialogues = datasets.load_photochat_format(args.context_file)
    out_dir = args.out
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    pred_path = os.path.join(out_dir, "pred.jsonl")
    with open(pred_path, "w", encoding="utf-8") as f:
        for i, dlg in enumerate(dialogues):
            seed = None if args.seed is None else args.seed + i
            reply = agent.respond(
                list(dlg.context),
                pure_text=args.pure_text,
                beam=args.beam,
                n_samples=args.n_samples,
                seed=seed,
            )
            segments = []
            for j, event in enumerate(reply.events):
                if hasattr(event, "text"):
                    segments.append({"text": event.text})
                else:
                    rel = f"images/{dlg.dialogue_id}-{j}.png"
                    imageio.save_png(os.path.join(out_dir, rel), event.image)
                    segments.append(
                        {"image": {"description": event.description, "image_path": rel}}
                    )
            f.write(
                json.dumps(
                    {
                        "dialogue_id": dlg.dialogue_id,
                        "turns": [datasets._utterance_to_json(u) for u in dlg.context],
                        "response": {"segments": segments},
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    print(f"wrote predictions for {len(dialogues)} dialogues -> {pred_path}")
    return 0


def cmd_eval(args) -> int:
    preds = datasets.load_photochat_format(args.pred)
    golds = datasets.load_photochat_format(args.gold)
    state = None
    classifier = None
    models = _models_dir(args)
    if os.path.exists(os.path.join(models, "state.mdrg")):
        state = load_run_state(os.path.join(models, "state.mdrg"))
        clf_path = os.path.join(models, "classifier.mdrg")
        if os.path.exists(clf_path):
            from . import evaluation

            classifier = evaluation.load_classifier(clf_path)
    pred_store = reporting.ImageStore(root=os.path.dirname(os.path.abspath(args.pred)))
    gold_root = args.data or os.path.dirname(os.path.abspath(args.gold))
    gold_store = reporting.ImageStore(root=gold_root)
    report = reporting.build_report(
        preds, golds, pred_store=pred_store, gold_store=gold_store,
        state=state, classifier=classifier,
    )
    print(report.to_json())
    print(report.table(), file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    from .service.app import serve

    serve(_models_dir(args), port=args.port, ui_dir=args.ui_dir)
    return 0


def cmd_chat(args) -> int:
    import urllib.request

    def post(path: str, payload: dict) -> dict:
        req = urllib.request.Request(
            args.server.rstrip("/") + path,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
        )
        with urllib.request.urlopen(req) as resp:
            return json.loads(resp.read().decode("utf-8"))

    session = post("/api/session", {})["session_id"]
    print(f"session {session}; empty line quits")
    os.makedirs(args.image_dir, exist_ok=True)
    while True:
        try:
            line = input("you> ").strip()
        except EOFError:
            break
        if not line:
            break
        reply = post(
            "/api/chat",
            {
                "session_id": session,
                "text": line,
                "options": {
                    "pure_text": args.pure_text,
                    "beam": args.beam,
                    "n_samples": args.n_samples,
                    "seed": args.seed,
                },
            },
        )
        for seg in reply["segments"]:
            if seg["kind"] == "text":
                print(f"bot> {seg['text']}")
            else:
                url = args.server.rstrip("/") + f"/api/image/{seg['image_id']}"
                dest = os.path.join(args.image_dir, f"{seg['image_id']}.png")
                with urllib.request.urlopen(url) as resp, open(dest, "wb") as f:
                    f.write(resp.read())
                print(f"bot> [image: {seg['description']}] -> {dest}")
    return 0


# --- parser ---------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, data=True, models=True, config=True) -> None:
    if config:
        p.add_argument("--config", help="JSON run config file")
    if data:
        p.add_argument("--data", help="dataset directory (default $MDRG_HOME/data)")
    if models:
        p.add_argument("--models", help="model directory (default $MDRG_HOME/models)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="step budget for this stage")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdrg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate the synthetic shapes corpus")
    _add_common(p, models=False)
    p.add_argument("--out", help="output directory (default the data dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-dialogues", dest="n_dialogues", type=int)
    p.add_argument("--n-text-dialogues", dest="n_text_dialogues", type=int)
    p.add_argument("--n-pairs", dest="n_pairs", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("tokenizer-train", help="train the subword vocabulary")
    _add_common(p)
    p.add_argument("--out", help="output vocab path (default <models>/vocab.json)")
    p.add_argument("--size", type=int, default=512)
    p.set_defaults(func=cmd_tokenizer_train)

    for cmd, stage, key in (
        ("codec-train", "pretrain_v", "steps_pretrain_v"),
        ("pretrain-g", "pretrain_g", "steps_pretrain_g"),
        ("pretrain-f", "pretrain_f", "steps_pretrain_f"),
        ("finetune", "joint_finetune", "steps_joint"),
    ):
        p = sub.add_parser(cmd, help=f"run the {stage} stage")
        _add_common(p)
        _add_train_flags(p)
        p.set_defaults(func=lambda a, s=stage, k=key: _stage_command(a, s, k))

    p = sub.add_parser("generate", help="generate responses for a context file")
    _add_common(p)
    p.add_argument("--context-file", dest="context_file", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pure-text", dest="pure_text", action="store_true")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predictions against gold dialogues")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    _add_common(p, data=False)
    p.add_argument("--port", type=int, default=8800)
    p.add_argument("--ui-dir", dest="ui_dir", help="static chat UI bundle to serve at /")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("chat", help="interactive client for a running service")
    p.add_argument("--server", default="http://127.0.0.1:8800")
    p.add_argument("--pure-text", dest="pure_text", action="store_true")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-dir", dest="image_dir", default="chat_images")
    p.set_defaults(func=cmd_chat)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args) or 0
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # runtime failures exit 2 with a message
        print(f"mdrg: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
