"""Synthetic scenes, the closed grammar over them, and the dataset file format.

A scene is a grid of cells; each cell is empty or holds one object with a
color and a shape. Cells are encoded as integers: ``0`` for empty and
``1 + color * N_SHAPES + shape`` otherwise.

Dataset file, one record per line::

    scene:<cell ints, comma separated>|cap:<ids>|q:<ids>|a:<ids>

Token id lists are comma separated; an empty list means the annotation is
absent. The answer list does not include the trailing end-of-sequence token.
Image ids are assigned by order of first appearance of each distinct scene
(``img00000``, ``img00001``, ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, VocabularyError

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
PLURALS = ("circles", "squares", "triangles")
NUMBERS = ("zero", "one", "two", "three", "four")
N_SHAPES = len(SHAPES)
MAX_OBJECTS = 4

RESERVED = ("<pad>", "<bos>", "<eos>", "<sum0>", "<sum1>", "<sum2>", "<sum3>")
PAD, BOS, EOS = 0, 1, 2
SUM_IDS = (3, 4, 5, 6)
N_RESERVED = len(RESERVED)

WORDS = (
    ("a", "and")
    + COLORS
    + SHAPES
    + PLURALS
    + ("what", "color", "is", "the", "how", "many", "there", "yes", "no")
    + NUMBERS
    + ("describe",)
)
DESCRIBE = "describe"

QUESTION_KINDS = ("color", "count", "exist")


class Vocabulary:
    """Bijection between words and ids. Reserved tokens occupy ids 0..6."""

    def __init__(self, words: Sequence[str] = WORDS):
        self.tokens: tuple[str, ...] = RESERVED + tuple(words)
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("duplicate token in vocabulary")
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> list[int]:
        try:
            return [self.ids[w] for w in text.split()]
        except KeyError as exc:
            raise VocabularyError(f"out-of-vocabulary word {exc.args[0]!r}") from None

    def detokenize(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"unknown token id {i}")
            out.append(self.tokens[i])
        return " ".join(out)


VOCAB = Vocabulary()


@dataclass(frozen=True)
class Scene:
    rows: int
    cols: int
    cells: tuple[int, ...]

    def __post_init__(self):
        if len(self.cells) != self.rows * self.cols:
            raise DataError(f"scene has {len(self.cells)} cells, expected {self.rows * self.cols}")
        hi = len(COLORS) * N_SHAPES
        for c in self.cells:
            if not 0 <= c <= hi:
                raise DataError(f"cell code {c} outside attribute vocabulary")

    @classmethod
    def empty(cls, rows: int = 6, cols: int = 6) -> "Scene":
        return cls(rows, cols, (0,) * (rows * cols))

    @classmethod
    def from_objects(cls, objects: dict[tuple[int, int], tuple[str, str]], rows: int = 6, cols: int = 6) -> "Scene":
        cells = [0] * (rows * cols)
        for (r, c), (color, shape) in objects.items():
            cells[r * cols + c] = encode_cell(color, shape)
        return cls(rows, cols, tuple(cells))

    def objects(self) -> list[tuple[int, str, str]]:
        """(cell index, color, shape) for occupied cells in reading order."""
        out = []
        for i, c in enumerate(self.cells):
            if c:
                color, shape = decode_cell(c)
                out.append((i, color, shape))
        return out


def encode_cell(color: str, shape: str) -> int:
    try:
        return 1 + COLORS.index(color) * N_SHAPES + SHAPES.index(shape)
    except ValueError:
        raise DataError(f"unknown attribute ({color}, {shape})") from None


def decode_cell(code: int) -> tuple[str, str]:
    code -= 1
    return COLORS[code // N_SHAPES], SHAPES[code % N_SHAPES]


def generate_scene(rng: np.random.Generator, rows: int = 6, cols: int = 6) -> Scene:
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    positions = rng.choice(rows * cols, size=n, replace=False)
    cells = [0] * (rows * cols)
    for p in positions:
        cells[int(p)] = 1 + int(rng.integers(len(COLORS))) * N_SHAPES + int(rng.integers(N_SHAPES))
    return Scene(rows, cols, tuple(cells))


def caption_text(scene: Scene) -> str:
    objs = scene.objects()
    if not objs:
        raise DataError("cannot caption an empty scene")
    return " and ".join(f"a {color} {shape}" for _, color, shape in objs)


def render_caption(scene: Scene, vocab: Vocabulary = VOCAB) -> list[int]:
    return vocab.tokenize(caption_text(scene))


def _color_candidates(scene: Scene) -> list[str]:
    """Shapes present in the scene whose instances all share one color."""
    colors: dict[str, set[str]] = {}
    for _, color, shape in scene.objects():
        colors.setdefault(shape, set()).add(color)
    return [s for s in SHAPES if len(colors.get(s, ())) == 1]


def answer_question(scene: Scene, question: str) -> str:
    """Re-derive the answer to a templated question from the scene alone."""
    words = question.split()
    objs = scene.objects()
    if words[:4] == ["what", "color", "is", "the"] and len(words) == 5:
        found = {color for _, color, shape in objs if shape == words[4]}
        if len(found) != 1:
            raise DataError(f"question {question!r} is ambiguous or unanswerable")
        return found.pop()
    if words[:2] == ["how", "many"] and len(words) == 3:
        shape = SHAPES[PLURALS.index(words[2])]
        return NUMBERS[sum(1 for _, _, s in objs if s == shape)]
    if words[:3] == ["is", "there", "a"] and len(words) == 4:
        return "yes" if any(s == words[3] for _, _, s in objs) else "no"
    raise DataError(f"unrecognised question {question!r}")


def question_kind(question: str) -> str:
    head = question.split()[0]
    return {"what": "color", "how": "count", "is": "exist"}[head]


def generate_qa(scene: Scene, rng: np.random.Generator, vocab: Vocabulary = VOCAB) -> tuple[list[int], list[int]]:
    if not scene.objects():
        raise DataError("cannot ask about an empty scene")
    while True:
        kind = QUESTION_KINDS[int(rng.integers(len(QUESTION_KINDS)))]
        if kind == "color":
            candidates = _color_candidates(scene)
            if not candidates:
                continue
            q = f"what color is the {candidates[int(rng.integers(len(candidates)))]}"
        elif kind == "count":
            q = f"how many {PLURALS[int(rng.integers(N_SHAPES))]}"
        else:
            q = f"is there a {SHAPES[int(rng.integers(N_SHAPES))]}"
        return vocab.tokenize(q), vocab.tokenize(answer_question(scene, q))


@dataclass
class Record:
    scene: Scene
    caption: list[int] | None = None
    question: list[int] | None = None
    answer: list[int] | None = None
    image_id: str = ""

    def __post_init__(self):
        if self.caption is None and self.question is None:
            raise DataError("record carries neither caption nor QA")
        if self.question is not None and not self.answer:
            raise DataError("QA record with empty answer")

    @property
    def has_qa(self) -> bool:
        return self.question is not None

    @property
    def has_caption(self) -> bool:
        return self.caption is not None


@dataclass
class Corpus:
    records: list[Record]
    scenes: list[Scene] = field(default_factory=list)

    def __post_init__(self):
        if not self.scenes:
            seen: dict[Scene, str] = {}
            for r in self.records:
                if r.scene not in seen:
                    seen[r.scene] = f"img{len(seen):05d}"
                    self.scenes.append(r.scene)
                r.image_id = seen[r.scene]
        self.ids = [f"img{i:05d}" for i in range(len(self.scenes))]
        self.scene_by_id = dict(zip(self.ids, self.scenes))

    def __len__(self) -> int:
        return len(self.records)

    def split(self, n_heldout: int) -> tuple["Corpus", "Corpus"]:
        """Scene-disjoint split: the last ``n_heldout`` distinct scenes are held out."""
        if not 0 <= n_heldout < len(self.scenes):
            raise DataError(f"cannot hold out {n_heldout} of {len(self.scenes)} scenes")
        held = set(self.ids[len(self.ids) - n_heldout:])
        train = [r for r in self.records if r.image_id not in held]
        test = [r for r in self.records if r.image_id in held]
        return _subcorpus(train), _subcorpus(test)

    def caption_pairs(self) -> list[tuple[str, Scene, list[int]]]:
        """One (image id, scene, caption) triple per distinct captioned scene."""
        out, seen = [], set()
        for r in self.records:
            if r.has_caption and r.image_id not in seen:
                seen.add(r.image_id)
                out.append((r.image_id, r.scene, r.caption))
        return out

    def qa_records(self) -> list[Record]:
        return [r for r in self.records if r.has_qa]


def _subcorpus(records: list[Record]) -> Corpus:
    # keep the parent's image ids
    scenes, ids, seen = [], [], set()
    for r in records:
        if r.image_id not in seen:
            seen.add(r.image_id)
            scenes.append(r.scene)
            ids.append(r.image_id)
    c = Corpus.__new__(Corpus)
    c.records, c.scenes, c.ids = records, scenes, ids
    c.scene_by_id = dict(zip(ids, scenes))
    return c


def build_corpus(
    seed: int,
    n_scenes: int,
    qa_per_scene: int = 1,
    rows: int = 6,
    cols: int = 6,
    unique_captions: bool = True,
) -> Corpus:
    """Draw ``n_scenes`` distinct scenes, each with a caption and QA pairs.

    With ``unique_captions`` a scene whose caption was already drawn is
    rejected, so every scene in the corpus has a distinct caption.
    """
    rng = np.random.default_rng(seed)
    limit = _distinct_caption_count() if unique_captions else math.inf
    if n_scenes > limit:
        raise DataError(f"only {limit} distinct captions exist; asked for {n_scenes}")
    scenes: list[Scene] = []
    seen_scenes: set[Scene] = set()
    seen_caps: set[str] = set()
    while len(scenes) < n_scenes:
        s = generate_scene(rng, rows, cols)
        cap = caption_text(s)
        if s in seen_scenes or (unique_captions and cap in seen_caps):
            continue
        seen_scenes.add(s)
        seen_caps.add(cap)
        scenes.append(s)
    records = []
    for s in scenes:
        cap = render_caption(s)
        for _ in range(qa_per_scene):
            q, a = generate_qa(s, rng)
            records.append(Record(s, list(cap), q, a))
    return Corpus(records)


def _distinct_caption_count() -> int:
    k = len(COLORS) * N_SHAPES
    return sum(k**n for n in range(1, MAX_OBJECTS + 1))


def corpus_stats(corpus: Corpus) -> dict[str, float]:
    caps = [caption_text(s) for s in corpus.scenes]
    colors = [c for s in corpus.scenes for _, c, _ in s.objects()]
    kinds = [question_kind(VOCAB.detokenize(r.question)) for r in corpus.qa_records()]
    stats = {
        "scenes": len(corpus.scenes),
        "records": len(corpus.records),
        "caption_uniqueness": len(set(caps)) / max(len(caps), 1),
    }
    for c in COLORS:
        stats[f"color_{c}"] = colors.count(c) / max(len(colors), 1)
    for k in QUESTION_KINDS:
        stats[f"question_{k}"] = kinds.count(k) / max(len(kinds), 1)
    return stats


def _ids_field(ids: list[int] | None) -> str:
    return "" if ids is None else ",".join(map(str, ids))


def _parse_ids(text: str) -> list[int] | None:
    return None if text == "" else [int(t) for t in text.split(",")]


def format_record(r: Record) -> str:
    return "|".join(
        [
            "scene:" + ",".join(map(str, r.scene.cells)),
            "cap:" + _ids_field(r.caption),
            "q:" + _ids_field(r.question),
            "a:" + _ids_field(r.answer),
        ]
    )


def parse_record(line: str, rows: int = 6, cols: int = 6) -> Record:
    parts = line.rstrip("\n").split("|")
    keys = ("scene:", "cap:", "q:", "a:")
    if len(parts) != 4 or not all(p.startswith(k) for p, k in zip(parts, keys)):
        raise DataError(f"malformed dataset line: {line[:60]!r}")
    try:
        values = [p[len(k):] for p, k in zip(parts, keys)]
        cells = tuple(int(t) for t in values[0].split(","))
        side = math.isqrt(len(cells))
        if side * side == len(cells):
            rows = cols = side
        scene = Scene(rows, cols, cells)
        cap, q, a = (_parse_ids(v) for v in values[1:])
    except ValueError as exc:
        raise DataError(f"malformed dataset line: {exc}") from None
    for ids in (cap, q, a):
        if ids and not all(0 <= i < len(VOCAB) for i in ids):
            raise VocabularyError("token id outside vocabulary")
    return Record(scene, cap, q, a)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in corpus.records:
            fh.write(format_record(r) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return Corpus([parse_record(line) for line in fh if line.strip()])
