"""Seeded generator for the toy pre-training corpus, probe task and synonym table.

Each sentence is about one topic: a few of that topic's content words
scattered among shared filler words, plus at most one distractor from
another topic. The topic is the probe label. Every content word has one
or two synonyms; the pre-training corpus uses them at a low rate so they
appear in the same contexts, while probe sentences use canonical forms
only. Swapping in synonyms at test time is therefore a shift the probe
never saw, and the encoder has to bridge it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

TOPICS: dict[str, dict[str, tuple[str, ...]]] = {
    "animals": {
        "cat": ("feline", "kitty"), "dog": ("hound", "puppy"), "horse": ("steed",),
        "bird": ("fowl",), "mouse": ("rodent",), "cow": ("cattle",),
    },
    "vehicles": {
        "car": ("automobile", "sedan"), "truck": ("lorry",), "boat": ("vessel",),
        "train": ("locomotive",), "bike": ("bicycle",), "plane": ("aircraft", "jet"),
    },
    "food": {
        "bread": ("loaf",), "soup": ("broth", "stew"), "cake": ("pastry",),
        "rice": ("grain",), "cheese": ("curd",), "apple": ("pippin",),
    },
    "weather": {
        "rain": ("drizzle", "shower"), "snow": ("sleet",), "wind": ("gale", "breeze"),
        "storm": ("tempest",), "cloud": ("haze",), "frost": ("ice",),
    },
}

FILLERS = (
    "the a and of to in on with near very big small old new red green quick slow "
    "saw likes has sees makes takes today then there again every some our my"
).split()


@dataclass
class SyntheticConfig:
    seed: int = 0
    n_corpus: int = 4000
    n_heldout: int = 400
    n_probe_per_class: int = 150
    corpus_synonym_rate: float = 0.2
    distractor_rate: float = 0.3
    min_fillers: int = 3
    max_fillers: int = 8


def synonym_table() -> dict[str, list[str]]:
    return {w: list(syns) for words in TOPICS.values() for w, syns in words.items()}


def _sentence(rng: np.random.Generator, label: int, cfg: SyntheticConfig, synonym_rate: float) -> str:
    topics = list(TOPICS.values())
    words = list(topics[label])
    n_content = int(rng.integers(2, 4))
    picked = [words[i] for i in rng.choice(len(words), size=n_content, replace=False)]
    if rng.random() < cfg.distractor_rate:
        other = int(rng.choice([k for k in range(len(topics)) if k != label]))
        other_words = list(topics[other])
        picked.append(other_words[int(rng.integers(len(other_words)))])
    table = synonym_table()
    content = []
    for w in picked:
        if synonym_rate > 0 and rng.random() < synonym_rate:
            syns = table[w]
            w = syns[int(rng.integers(len(syns)))]
        content.append(w)
    n_fill = int(rng.integers(cfg.min_fillers, cfg.max_fillers + 1))
    tokens = content + [FILLERS[i] for i in rng.integers(len(FILLERS), size=n_fill)]
    order = rng.permutation(len(tokens))
    return " ".join(tokens[i] for i in order)


def generate(cfg: SyntheticConfig):
    """Return ``(corpus, heldout, probe_examples)``; probe examples are ``(label, text)``, class-balanced."""
    rng = np.random.default_rng([cfg.seed, 7])
    n_classes = len(TOPICS)

    def unlabeled(n):
        return [_sentence(rng, int(rng.integers(n_classes)), cfg, cfg.corpus_synonym_rate) for _ in range(n)]

    corpus = unlabeled(cfg.n_corpus)
    heldout = unlabeled(cfg.n_heldout)
    probe = [(c, _sentence(rng, c, cfg, 0.0)) for c in range(n_classes) for _ in range(cfg.n_probe_per_class)]
    order = rng.permutation(len(probe))
    probe = [probe[i] for i in order]
    return corpus, heldout, probe


def write_synthetic(out_dir, cfg: SyntheticConfig | None = None) -> dict[str, Path]:
    """Write corpus.txt, heldout.txt, probe.tsv and synonyms.tsv into ``out_dir``."""
    cfg = cfg or SyntheticConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus, heldout, probe = generate(cfg)
    paths = {
        "corpus": out / "corpus.txt",
        "heldout": out / "heldout.txt",
        "probe": out / "probe.tsv",
        "synonyms": out / "synonyms.tsv",
    }
    paths["corpus"].write_text("\n".join(corpus) + "\n", encoding="utf-8")
    paths["heldout"].write_text("\n".join(heldout) + "\n", encoding="utf-8")
    paths["probe"].write_text("".join(f"{label}\t{text}\n" for label, text in probe), encoding="utf-8")
    paths["synonyms"].write_text(
        "".join(f"{w}\t{','.join(s)}\n" for w, s in synonym_table().items()), encoding="utf-8"
    )
    return paths
