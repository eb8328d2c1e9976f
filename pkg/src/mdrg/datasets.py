"""Corpus model and I/O.

Three corpora drive training: text-only dialogues, <description, image>
pairs, and a small multimodal dialogue set whose images all carry textual
descriptions. A deterministic synthetic shapes world generates all three so
the full pipeline can be trained and verified on a desk machine.

Dialogue interchange format (JSONL, one dialogue per line):
    {"dialogue_id": str,
     "turns": [{"speaker": int, "text": str}
               | {"speaker": int, "image": {"description": str, "image_path": str}}],
     "response": {"segments": [{"text": str}
                  | {"image": {"description": str, "image_path": str}}]}}
Image paths are relative to the dataset root.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import imageio
from .generator import ImageSegment, Response, TextSegment, Utterance


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TextDialogue:
    turns: tuple[str, ...]  # last turn is the response

    def __post_init__(self) -> None:
        if len(self.turns) < 2:
            raise DatasetError("text dialogue needs at least context + response")

    @property
    def context(self) -> tuple[str, ...]:
        return self.turns[:-1]

    @property
    def response(self) -> str:
        return self.turns[-1]


@dataclass(frozen=True)
class DescriptionImagePair:
    description: str
    image_path: str
    shape: str
    color: str
    size: str

    def __post_init__(self) -> None:
        if not self.description:
            raise DatasetError("pair description must be non-empty")


@dataclass(frozen=True)
class MultimodalDialogue:
    dialogue_id: str
    context: tuple[Utterance, ...]
    response: Response


# --- synthetic shapes world ---------------------------------------------

DESCRIPTION_PREFIX = "Objects in the photo:"

COLOR_RGB = {
    "red": (0.80, 0.12, 0.12),
    "green": (0.10, 0.65, 0.18),
    "blue": (0.12, 0.25, 0.80),
    "yellow": (0.85, 0.78, 0.10),
}

SIZE_RADIUS = {"small": 0.22, "big": 0.34}  # fraction of image size

BACKGROUND = 0.92


@dataclass(frozen=True)
class SyntheticWorldConfig:
    seed: int = 7
    n_dialogues: int = 600
    n_text_dialogues: int = 2000
    n_pairs: int = 1200
    shapes: tuple[str, ...] = ("circle", "square", "triangle")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    sizes: tuple[str, ...] = ("small", "big")
    image_size: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


def description_for(size: str, color: str, shape: str) -> str:
    return f"{DESCRIPTION_PREFIX} {size} {color} {shape}"


def parse_description(desc: str, cfg: SyntheticWorldConfig) -> tuple[str, str, str] | None:
    """Recover (size, color, shape) from a description; None when any part is
    missing. Scans words so it also works on model-generated text."""
    words = desc.lower().replace(":", " ").replace(".", " ").split()
    size = next((w for w in words if w in cfg.sizes), None)
    color = next((w for w in words if w in cfg.colors), None)
    shape = next((w for w in words if w in cfg.shapes), None)
    if size is None or color is None or shape is None:
        return None
    return size, color, shape


def shape_class_of(desc: str, shapes: tuple[str, ...]) -> str | None:
    words = desc.lower().replace(":", " ").replace(".", " ").split()
    return next((w for w in words if w in shapes), None)


def render_shape(size: str, color: str, shape: str, image_size: int) -> np.ndarray:
    """Deterministic centered render, snapped to the 8-bit grid so PNG
    round-trips are exact."""
    n = image_size
    img = np.full((n, n, 3), BACKGROUND, dtype=np.float64)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = cx = (n - 1) / 2.0
    r = SIZE_RADIUS[size] * n
    if shape == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    elif shape == "square":
        half = r * 0.85
        mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    elif shape == "triangle":
        top, bottom = cy - r, cy + 0.8 * r
        frac = np.clip((yy - top) / (bottom - top), 0.0, 1.0)
        mask = (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * r)
    else:
        raise DatasetError(f"unknown shape {shape!r}")
    img[mask] = COLOR_RGB[color]
    return np.round(img * 255.0) / 255.0


@dataclass
class SyntheticCorpus:
    config: SyntheticWorldConfig
    d_c: list[TextDialogue]
    d_p: list[DescriptionImagePair]
    d_s: dict[str, list[MultimodalDialogue]]  # train / dev / test
    images: dict[str, np.ndarray] = field(default_factory=dict)

    def image(self, path: str) -> np.ndarray:
        return self.images[path]

    def text_lines(self) -> list[str]:
        """Every line of text the tokenizer should see."""
        lines: list[str] = []
        for d in self.d_c:
            lines.extend(d.turns)
        for p in self.d_p:
            lines.append(p.description)
        for split in self.d_s.values():
            for dlg in split:
                for turn in dlg.context:
                    lines.append(turn.text or turn.image_description or "")
                for seg in dlg.response.segments:
                    lines.append(seg.text if isinstance(seg, TextSegment) else seg.description)
        return lines


def intent_label(dialogue: MultimodalDialogue) -> bool:
    """True iff the gold response shares an image."""
    return dialogue.response.has_image


# 20 dialogue templates. {z}=size, {c}=color, {s}=shape; second combo gets a
# "2" suffix. Positive templates answer with an image of the asked-for object.
_POSITIVE_TEMPLATES = [
    (
        ("i really like {c} {s}s.", "can you show me a picture of a {z} {c} {s}?"),
        (("text", "sure, here is a photo."), ("image", None)),
    ),
    (
        ("do you have a photo of a {z} {c} {s}?",),
        (("image", None), ("text", "do you like it?")),
    ),
    (
        ("please send me a pic of a {z} {c} {s}.",),
        (("image", None),),
    ),
    (
        ("what does a {z} {c} {s} look like?", "show me please."),
        (("text", "let me show you."), ("image", None)),
    ),
    (
        ("i have never seen a {z} {c} {s}.", "can you share a picture?"),
        (("image", None), ("text", "there you go.")),
    ),
    (
        ("my favorite thing is a {z} {c} {s}.", "could you show it to me?"),
        (("text", "of course."), ("image", None), ("text", "hope you like it.")),
    ),
    (
        ("__IMAGE__", "nice! now show me a {z} {c} {s}."),
        (("image", None),),
    ),
]

_NEGATIVE_TEMPLATES = [
    (("hello there.",), "hi, how are you doing?"),
    (("how are you today?",), "i am doing great, thanks."),
    (("what did you do yesterday?",), "i stayed home and read a book."),
    (("do you like {c} {s}s?",), "yes, i like them a lot."),
    (("what is your favorite color?",), "i like {c} a lot."),
    (("the weather is nice today.",), "yes, it is a lovely day."),
    (("tell me about {s}s.",), "a {s} is a very simple shape."),
    (("__IMAGE__", "what shape is in this photo?"), "it is a {z} {c} {s}."),
]

_TEXT_ONLY_TEMPLATES = [
    (("do you want to talk about shapes?",), "sure, i love talking about shapes."),
    (("i saw a {c} {s} today.",), "that sounds really nice."),
    (("which do you prefer, a {s} or a {s2}?",), "i prefer the {s}."),
    (("i am tired.",), "you should get some rest."),
    (("thanks for the chat.",), "you are welcome."),
]

_GREETINGS = ("hi.", "hello.", "hey.")


def _fill(template: str, z: str, c: str, s: str, s2: str) -> str:
    return (
        template.replace("{z}", z).replace("{c}", c).replace("{s2}", s2).replace("{s}", s)
    )


def generate_synthetic(cfg: SyntheticWorldConfig) -> SyntheticCorpus:
    """Deterministic corpus build: same config (incl. seed) gives identical
    dialogues, pairs, splits, and pixel data."""
    rng = np.random.default_rng(cfg.seed)
    images: dict[str, np.ndarray] = {}

    def materialize(z: str, c: str, s: str, key: str) -> str:
        path = f"images/{key}.png"
        if path not in images:
            images[path] = render_shape(z, c, s, cfg.image_size)
        return path

    combos = [
        (z, c, s) for z in cfg.sizes for c in cfg.colors for s in cfg.shapes
    ]

    # Description-image pairs: round-robin over combos for exact class balance.
    d_p: list[DescriptionImagePair] = []
    for i in range(cfg.n_pairs):
        z, c, s = combos[i % len(combos)]
        path = materialize(z, c, s, f"pair-{z}-{c}-{s}")
        d_p.append(
            DescriptionImagePair(
                description=description_for(z, c, s),
                image_path=path,
                shape=s,
                color=c,
                size=z,
            )
        )
    perm = rng.permutation(len(d_p))
    d_p = [d_p[i] for i in perm]

    # Text-only dialogues.
    d_c: list[TextDialogue] = []
    text_templates = _TEXT_ONLY_TEMPLATES + [
        (ctx, resp) for ctx, resp in _NEGATIVE_TEMPLATES if "__IMAGE__" not in ctx
    ]
    for _ in range(cfg.n_text_dialogues):
        ctx, resp = text_templates[rng.integers(0, len(text_templates))]
        z, c, s = combos[rng.integers(0, len(combos))]
        s2 = cfg.shapes[rng.integers(0, len(cfg.shapes))]
        turns = [_fill(t, z, c, s, s2) for t in ctx]
        if rng.random() < 0.3:
            turns.insert(0, _GREETINGS[rng.integers(0, len(_GREETINGS))])
        d_c.append(TextDialogue(turns=tuple(turns) + (_fill(resp, z, c, s, s2),)))

    # Multimodal dialogues.
    dialogues: list[MultimodalDialogue] = []
    for i in range(cfg.n_dialogues):
        positive = rng.random() < 0.55
        z, c, s = combos[rng.integers(0, len(combos))]
        z2, c2, s2 = combos[rng.integers(0, len(combos))]
        ctx_turns: list[Utterance] = []

        def ctx_utts(raw_ctx) -> None:
            for j, raw in enumerate(raw_ctx):
                speaker = j % 2
                if raw == "__IMAGE__":
                    path = materialize(z2, c2, s2, f"ctx-{z2}-{c2}-{s2}")
                    ctx_turns.append(
                        Utterance(
                            speaker=speaker,
                            image_description=description_for(z2, c2, s2),
                            image_path=path,
                        )
                    )
                else:
                    ctx_turns.append(
                        Utterance(speaker=speaker, text=_fill(raw, z, c, s, s2))
                    )

        if positive:
            ctx, resp_spec = _POSITIVE_TEMPLATES[rng.integers(0, len(_POSITIVE_TEMPLATES))]
            ctx_utts(ctx)
            segs: list = []
            for kind, payload in resp_spec:
                if kind == "text":
                    segs.append(TextSegment(payload))
                else:
                    path = materialize(z, c, s, f"resp-{z}-{c}-{s}")
                    segs.append(
                        ImageSegment(description=description_for(z, c, s), image_path=path)
                    )
            response = Response(segments=tuple(segs))
        else:
            ctx, resp = _NEGATIVE_TEMPLATES[rng.integers(0, len(_NEGATIVE_TEMPLATES))]
            # For the in-context-image template the reply names that image.
            if "__IMAGE__" in ctx:
                z, c, s = z2, c2, s2
            ctx_utts(ctx)
            response = Response(segments=(TextSegment(_fill(resp, z, c, s, s2)),))
        dialogues.append(
            MultimodalDialogue(
                dialogue_id=f"syn-{i:04d}", context=tuple(ctx_turns), response=response
            )
        )

    order = rng.permutation(len(dialogues))
    dialogues = [dialogues[i] for i in order]
    n = len(dialogues)
    n_train = int(n * 0.8)
    n_dev = int(n * 0.1)
    d_s = {
        "train": dialogues[:n_train],
        "dev": dialogues[n_train : n_train + n_dev],
        "test": dialogues[n_train + n_dev :],
    }
    return SyntheticCorpus(config=cfg, d_c=d_c, d_p=d_p, d_s=d_s, images=images)


# --- JSONL I/O -----------------------------------------------------------


def _utterance_to_json(u: Utterance) -> dict:
    if u.kind == "text":
        return {"speaker": u.speaker, "text": u.text}
    return {
        "speaker": u.speaker,
        "image": {"description": u.image_description, "image_path": u.image_path},
    }


def _segment_to_json(seg) -> dict:
    if isinstance(seg, TextSegment):
        return {"text": seg.text}
    return {"image": {"description": seg.description, "image_path": seg.image_path}}


def dialogue_to_json(d: MultimodalDialogue) -> dict:
    return {
        "dialogue_id": d.dialogue_id,
        "turns": [_utterance_to_json(u) for u in d.context],
        "response": {"segments": [_segment_to_json(s) for s in d.response.segments]},
    }


def _parse_image_obj(obj: dict, where: str) -> tuple[str, str | None]:
    if "description" not in obj or not obj["description"]:
        raise DatasetError(f"{where}: missing field 'description' on image")
    return obj["description"], obj.get("image_path")


def dialogue_from_json(doc: dict, where: str = "dialogue") -> MultimodalDialogue:
    if "turns" not in doc or not isinstance(doc["turns"], list) or not doc["turns"]:
        raise DatasetError(f"{where}: missing or empty field 'turns'")
    turns: list[Utterance] = []
    for i, t in enumerate(doc["turns"]):
        spot = f"{where}: turn {i}"
        speaker = t.get("speaker", i % 2)
        if "text" in t:
            turns.append(Utterance(speaker=speaker, text=t["text"]))
        elif "image" in t:
            desc, path = _parse_image_obj(t["image"], spot)
            turns.append(Utterance(speaker=speaker, image_description=desc, image_path=path))
        else:
            raise DatasetError(f"{spot}: needs 'text' or 'image'")
    resp = doc.get("response")
    if not resp or "segments" not in resp or not resp["segments"]:
        raise DatasetError(f"{where}: missing field 'response.segments'")
    segs: list = []
    for i, s in enumerate(resp["segments"]):
        spot = f"{where}: response segment {i}"
        if "text" in s:
            segs.append(TextSegment(s["text"]))
        elif "image" in s:
            desc, path = _parse_image_obj(s["image"], spot)
            segs.append(ImageSegment(description=desc, image_path=path))
        else:
            raise DatasetError(f"{spot}: needs 'text' or 'image'")
    return MultimodalDialogue(
        dialogue_id=doc.get("dialogue_id", where),
        context=tuple(turns),
        response=Response(segments=tuple(segs)),
    )


def load_photochat_format(path: str) -> list[MultimodalDialogue]:
    out: list[MultimodalDialogue] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}: line {lineno}: invalid JSON ({e})") from e
            out.append(dialogue_from_json(doc, where=f"{path}: line {lineno}"))
    return out


def write_photochat_format(path: str, dialogues: list[MultimodalDialogue]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in dialogues:
            f.write(json.dumps(dialogue_to_json(d), sort_keys=True) + "\n")


def save_corpus(corpus: SyntheticCorpus, outdir: str) -> None:
    os.makedirs(os.path.join(outdir, "images"), exist_ok=True)
    for path, img in sorted(corpus.images.items()):
        imageio.save_png(os.path.join(outdir, path), img)
    with open(os.path.join(outdir, "d_c.jsonl"), "w", encoding="utf-8") as f:
        for d in corpus.d_c:
            f.write(json.dumps({"turns": list(d.turns)}) + "\n")
    with open(os.path.join(outdir, "d_p.jsonl"), "w", encoding="utf-8") as f:
        for p in corpus.d_p:
            f.write(json.dumps(asdict(p), sort_keys=True) + "\n")
    for split, dialogues in corpus.d_s.items():
        write_photochat_format(os.path.join(outdir, f"d_s.{split}.jsonl"), dialogues)
    manifest = {
        split: [d.dialogue_id for d in dialogues] for split, dialogues in corpus.d_s.items()
    }
    with open(os.path.join(outdir, "splits.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
    with open(os.path.join(outdir, "world.json"), "w", encoding="utf-8") as f:
        json.dump(corpus.config.to_dict(), f, sort_keys=True, indent=2)


def load_corpus(outdir: str) -> SyntheticCorpus:
    with open(os.path.join(outdir, "world.json"), "r", encoding="utf-8") as f:
        cfg = SyntheticWorldConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in json.load(f).items()})
    d_c = []
    with open(os.path.join(outdir, "d_c.jsonl"), "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d_c.append(TextDialogue(turns=tuple(json.loads(line)["turns"])))
    d_p = []
    with open(os.path.join(outdir, "d_p.jsonl"), "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d_p.append(DescriptionImagePair(**json.loads(line)))
    d_s = {
        split: load_photochat_format(os.path.join(outdir, f"d_s.{split}.jsonl"))
        for split in ("train", "dev", "test")
    }
    images: dict[str, np.ndarray] = {}
    img_dir = os.path.join(outdir, "images")
    for name in sorted(os.listdir(img_dir)):
        images[f"images/{name}"] = imageio.load_png(os.path.join(img_dir, name))
    return SyntheticCorpus(config=cfg, d_c=d_c, d_p=d_p, d_s=d_s, images=images)
