"""Label transfer along warp paths and assembly of split training corpora."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, CoverageError, MissingInputError

SPLIT_MODES = ("speaker", "word+speaker")


@dataclass
class AlignedPair:
    path: list[tuple[int, int]]  # 1-based (source, target)
    source_params: np.ndarray  # (T1, K)
    target_length: int


@dataclass
class PropagatedSample:
    target_params: np.ndarray  # (T2, K)
    provenance: dict = field(default_factory=dict)


def propagate_params(pair: AlignedPair, provenance: dict | None = None) -> PropagatedSample:
    """Label target frame j with the mean parameters of all source frames aligned to it.

    A source frame aligned to several targets therefore reaches each of them
    unchanged, and a target aligned to several sources gets their average.
    """
    src = np.asarray(pair.source_params, dtype=np.float64)
    if src.ndim != 2:
        raise ContractError(f"source parameters must be T1 x K, got {src.shape}")
    t1, t2 = src.shape[0], int(pair.target_length)
    p = np.asarray(pair.path, dtype=int).reshape(-1, 2)
    if len(p) and (p[:, 0].min() < 1 or p[:, 0].max() > t1 or p[:, 1].min() < 1 or p[:, 1].max() > t2):
        raise ContractError(f"path indices fall outside [1, {t1}] x [1, {t2}]")
    count = np.bincount(p[:, 1] - 1, minlength=t2)
    missing = (np.flatnonzero(count == 0) + 1).tolist()
    if missing:
        raise CoverageError(missing)
    total = np.zeros((t2, src.shape[1]))
    np.add.at(total, p[:, 1] - 1, src[p[:, 0] - 1])
    return PropagatedSample(total / count[:, None], dict(provenance or {}))


# ---------------------------------------------------------------- corpus


@dataclass
class CorpusItem:
    id: str
    speaker: int
    word: int
    split: str
    features: np.ndarray  # (T, 41, 128, 3)
    params: np.ndarray  # (T, K)
    provenance: dict = field(default_factory=dict)


@dataclass
class Corpus:
    items: list[CorpusItem]
    split_mode: str

    def partition(self, split: str) -> list[CorpusItem]:
        return [it for it in self.items if it.split == split]


def split_tag(speaker: int, word: int, mode: str, val_speakers, val_words=()) -> str | None:
    """``train``, ``validation`` or ``None`` (dropped to keep partitions disjoint)."""
    if mode not in SPLIT_MODES:
        raise ContractError(f"unknown split mode {mode!r}")
    held_spk = speaker in set(val_speakers)
    if mode == "speaker":
        return "validation" if held_spk else "train"
    held_word = word in set(val_words)
    if held_spk and held_word:
        return "validation"
    if not held_spk and not held_word:
        return "train"
    return None


def assemble_dataset(samples: list[PropagatedSample], features, out_dir=None, mode: str = "speaker",
                     val_speakers=(), val_words=()) -> Corpus:
    """Pair labels with features, tag the split, and optionally write the corpus to ``out_dir``.

    Each sample's provenance must carry ``speaker`` and ``word`` ids.
    """
    features = list(features)
    if len(features) != len(samples):
        raise ContractError(f"{len(samples)} label sequences but {len(features)} feature stacks")
    items = []
    for k, (s, f) in enumerate(zip(samples, features)):
        blocks = getattr(f, "frames", f)
        blocks = np.asarray(blocks, dtype=np.float64)
        prov = dict(s.provenance)
        sid = str(prov.get("id", f"{k:05d}"))
        if len(blocks) != len(s.target_params):
            raise ContractError(f"sample {sid}: {len(blocks)} feature frames but {len(s.target_params)} labels")
        if "speaker" not in prov or "word" not in prov:
            raise ContractError(f"sample {sid}: provenance lacks speaker/word ids")
        tag = split_tag(int(prov["speaker"]), int(prov["word"]), mode, val_speakers, val_words)
        if tag is None:
            continue
        items.append(CorpusItem(sid, int(prov["speaker"]), int(prov["word"]), tag, blocks,
                                np.asarray(s.target_params, dtype=np.float64), prov))
    corpus = Corpus(items, mode)
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus


def write_corpus(corpus: Corpus, out_dir) -> Path:
    from .io import canonical_json, write_container

    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    index = []
    for it in corpus.items:
        write_container(out / "samples" / it.id, {"features": it.features, "params": it.params},
                        {"kind": "corpus-item", "provenance": it.provenance})
        index.append({"id": it.id, "speaker": it.speaker, "word": it.word, "split": it.split,
                      "frames": int(len(it.params)), "file": f"samples/{it.id}.json"})
    path = out / "index.json"
    path.write_text(canonical_json({"kind": "corpus", "split_mode": corpus.split_mode, "items": index}))
    return path


def read_corpus(out_dir) -> Corpus:
    from .io import read_container

    out = Path(out_dir)
    if not (out / "index.json").exists():
        raise MissingInputError(f"no corpus index in {out}")
    doc = json.loads((out / "index.json").read_text())
    items = []
    for e in doc["items"]:
        arrays, meta = read_container(out / e["file"])
        items.append(CorpusItem(e["id"], e["speaker"], e["word"], e["split"], arrays["features"],
                                arrays["params"], meta.get("provenance", {})))
    return Corpus(items, doc["split_mode"])
